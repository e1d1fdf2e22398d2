//! Pipeline configuration: one TOML file with a section per stage.
//!
//! A file only needs the keys it changes; everything else keeps its default.
//! Dotted overrides such as `segmenter.lr=0.01` are applied on top. Each
//! stage gets a hash of the settings it depends on, chained through its
//! inputs, so stale artifacts can be detected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::classifier::ClassifierHyper;
use crate::error::{Error, Result};
use crate::pseudo::PseudoConfig;
use crate::scenes::SceneConfig;
use crate::segmenter::{InferenceConfig, SegmenterHyper};

/// Keys with no default value, which therefore never appear in the
/// serialized defaults but are still accepted.
const OPTIONAL_KEYS: &[&str] = &["scene.class_weights"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Minimum score for a prediction to count in the count MAE.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub classifier: ClassifierHyper,
    pub pseudo: PseudoConfig,
    pub segmenter: SegmenterHyper,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

fn merge(base: &mut Table, patch: &Table, prefix: &str) -> Result<()> {
    for (k, v) in patch {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p, &path)?,
            (Some(slot), _) => *slot = coerce(slot, v.clone(), &path)?,
            (None, _) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k.clone(), v.clone());
            }
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
        }
    }
    Ok(())
}

/// Lets integers stand in for floats; everything else must match in kind.
fn coerce(default: &Value, v: Value, path: &str) -> Result<Value> {
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(_), other) if !other.is_table() => Err(Error::Config(format!("`{path}` is a section, not a value"))),
        (d, other) if std::mem::discriminant(d) == std::mem::discriminant(&other) => Ok(other),
        (d, other) => Err(Error::Config(format!(
            "`{path}` expects a {}, got {}",
            d.type_str(),
            other.type_str()
        ))),
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn nest(path: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().unwrap();
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

impl PipelineConfig {
    /// Defaults, then `text`, then each `key=value` override in order.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<PipelineConfig> {
        let mut base = match Value::try_from(PipelineConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("defaults serialize to a table"),
        };
        let file: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut base, &file, "")?;
        for (k, v) in overrides {
            merge(&mut base, &nest(k, parse_value(v)), "")?;
        }
        let cfg: PipelineConfig = Value::Table(base).try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let w = self.classifier.window;
        if w < 3 || w % 2 == 0 {
            return Err(Error::Config(format!("classifier.window must be odd and at least 3, got {w}")));
        }
        if !(0.0..=1.0).contains(&self.pseudo.peak_fraction) {
            return Err(Error::Config("pseudo.peak_fraction must lie in [0, 1]".into()));
        }
        if self.pseudo.max_peaks_per_class == 0 {
            return Err(Error::Config("pseudo.max_peaks_per_class must be positive".into()));
        }
        for (name, v) in [("classifier.lr", self.classifier.lr), ("segmenter.lr", self.segmenter.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classifier.batch_size == 0 {
            return Err(Error::Config("classifier.batch_size must be positive".into()));
        }
        if self.segmenter.rois_per_image == 0 {
            return Err(Error::Config("segmenter.rois_per_image must be positive".into()));
        }
        Ok(())
    }

    /// Sets every stage's seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.classifier.seed = seed;
        self.segmenter.seed = seed;
    }

    pub fn stage_hashes(&self) -> StageHashes {
        let dataset = hash_parts(&["dataset", &json(&self.scene)]);
        let classifier = hash_parts(&["classifier", &dataset, &json(&self.classifier)]);
        let pseudo = hash_parts(&["pseudo", &classifier, &json(&self.pseudo)]);
        let segmenter = hash_parts(&["segmenter", &pseudo, &json(&self.segmenter)]);
        let predict = hash_parts(&["predict", &segmenter, &json(&self.inference)]);
        let evaluate = hash_parts(&["evaluate", &predict, &pseudo, &json(&self.eval)]);
        StageHashes {
            dataset,
            classifier,
            pseudo,
            segmenter,
            predict,
            evaluate,
        }
    }
}

fn json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub dataset: String,
    pub classifier: String,
    pub pseudo: String,
    pub segmenter: String,
    pub predict: String,
    pub evaluate: String,
}

/// Splits `--a.b=value` and `--a.b value` style arguments out of `args`,
/// returning the remaining arguments and the overrides. Only keys containing
/// a dot are treated as overrides.
pub fn extract_overrides(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(body) = a.strip_prefix("--").filter(|b| b.split('=').next().unwrap().contains('.')) {
            if let Some((k, v)) = body.split_once('=') {
                overrides.push((k.to_string(), v.to_string()));
            } else if i + 1 < args.len() {
                overrides.push((body.to_string(), args[i + 1].clone()));
                i += 1;
            } else {
                rest.push(a.clone());
            }
        } else {
            rest.push(a.clone());
        }
        i += 1;
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_with_overrides("", &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn file_and_overrides() {
        let text = "[segmenter]\nepochs = 3\n[scene]\nnum_train = 10\n";
        let ov = vec![("segmenter.lr".to_string(), "1".to_string()), ("pseudo.selection".to_string(), "argmax".to_string())];
        let c = PipelineConfig::from_toml_with_overrides(text, &ov).unwrap();
        assert_eq!(c.segmenter.epochs, 3);
        assert_eq!(c.segmenter.lr, 1.0);
        assert_eq!(c.scene.num_train, 10);
        assert_eq!(c.pseudo.selection, crate::pseudo::Selection::Argmax);
    }

    #[test]
    fn rejects_unknown_and_mistyped_keys() {
        assert!(matches!(
            PipelineConfig::from_toml_with_overrides("[segmenter]\nlearning_rate = 1.0\n", &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_with_overrides("", &[("segmenter.epochs".into(), "\"many\"".into())]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_with_overrides("", &[("classifier.window".into(), "4".into())]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn optional_class_weights() {
        let c = PipelineConfig::from_toml_with_overrides("[scene]\nclass_weights = [0.0, 1.0, 0.0, 0.0]\n", &[]).unwrap();
        assert_eq!(c.scene.class_weights, Some(vec![0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn hash_chain_propagates() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.segmenter.epochs += 1;
        let (ha, hb) = (a.stage_hashes(), b.stage_hashes());
        assert_eq!(ha.classifier, hb.classifier);
        assert_eq!(ha.pseudo, hb.pseudo);
        assert_ne!(ha.segmenter, hb.segmenter);
        assert_ne!(ha.predict, hb.predict);
        assert_ne!(ha.evaluate, hb.evaluate);
    }

    #[test]
    fn override_extraction() {
        let args: Vec<String> = ["peakseg", "--segmenter.lr=0.1", "all", "--out", "x", "--scene.seed", "4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, ov) = extract_overrides(&args);
        assert_eq!(rest, vec!["peakseg", "all", "--out", "x"]);
        assert_eq!(ov, vec![("segmenter.lr".into(), "0.1".into()), ("scene.seed".into(), "4".into())]);
    }
}
