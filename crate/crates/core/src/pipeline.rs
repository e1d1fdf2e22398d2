//! Stage orchestration and on-disk artifacts.
//!
//! ```text
//! <out>/config.toml                 resolved configuration
//! <out>/dataset/                    images, annotations.json, dataset.json
//! <out>/classifier.ckpt (+ .json)   weights and manifest
//! <out>/pseudo_masks.json           one draw of pseudo targets per training image
//! <out>/segmenter.ckpt (+ .json)
//! <out>/predictions.json            segmenter output, both splits
//! <out>/predictions_refined.json    after proposal snapping
//! <out>/report.json, tables.csv, plots/*.png
//! <out>/comparison.json, comparison.csv
//! ```
//!
//! Every artifact records the hash of the configuration that produced it.
//! A stage refuses inputs whose hash differs from what the current
//! configuration expects, unless stale inputs are explicitly allowed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_classifier, load_segmenter, save_classifier, save_segmenter};
use crate::classifier::{classification_accuracy, train_classifier, ClassifierParams};
use crate::config::{PipelineConfig, StageHashes};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Rle};
use crate::metrics::{evaluate, tables_csv, EvalImage, EvalOptions, EvalReport, GtMask, Matching, PredMask};
use crate::plots;
use crate::pseudo::build_pseudo_targets;
use crate::rng::{self, STREAM_PSEUDO};
use crate::segmenter::{predict, refine_predictions, train_segmenter, SegmenterParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    TrainClassifier,
    MakePseudo,
    TrainSegmenter,
    Predict,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::TrainClassifier,
        Stage::MakePseudo,
        Stage::TrainSegmenter,
        Stage::Predict,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainClassifier => "train-classifier",
            Stage::MakePseudo => "make-pseudo",
            Stage::TrainSegmenter => "train-segmenter",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages whose code must never read ground-truth instances.
    pub fn is_training(self) -> bool {
        matches!(self, Stage::TrainClassifier | Stage::MakePseudo | Stage::TrainSegmenter)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub parent_hash: String,
    pub final_loss: Option<f64>,
    /// Ground-truth instance reads made while this stage ran.
    pub gt_accesses: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub class_id: usize,
    pub score: f64,
    pub rle: Rle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub split: String,
    pub predictions: Vec<PredictionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub config_hash: String,
    pub source: String,
    pub images: Vec<ImagePredictions>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoTargetEntry {
    pub class_id: usize,
    pub rle: Rle,
    pub peak: [usize; 2],
    pub peak_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoImage {
    pub image_id: String,
    pub targets: Vec<PseudoTargetEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoFile {
    pub config_hash: String,
    pub skipped_peaks: usize,
    pub images_without_targets: usize,
    pub images: Vec<PseudoImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub stage: String,
    pub artifact: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub provenance: Vec<ProvenanceEntry>,
    pub deviations: Vec<String>,
    pub evaluations: Vec<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub split: String,
    pub map25: Option<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    pub abo: Option<f64>,
    pub count_mae: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    pub rows: Vec<ComparisonRow>,
    pub gt_accesses_during_training: u64,
}

pub const DEVIATIONS: &[&str] = &[
    "segmenter RoIs come from the proposal gallery instead of a learned region-proposal network",
    "small convolutional backbones trained from scratch replace the pretrained ResNet-50/FPN",
    "synthetic scenes and a synthetic proposal gallery replace PASCAL VOC 2012 and MCG",
    "raw pseudo masks are scored by the logistic function of their source peak's activation",
];

pub const METHOD_PSEUDO: &str = "pseudo_masks";
pub const METHOD_WISE: &str = "wise";
pub const METHOD_REFINE: &str = "wise_refine";

pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.ckpt")
    }
    pub fn classifier_manifest(&self) -> PathBuf {
        self.root.join("classifier.json")
    }
    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo_masks.json")
    }
    pub fn segmenter(&self) -> PathBuf {
        self.root.join("segmenter.ckpt")
    }
    pub fn segmenter_manifest(&self) -> PathBuf {
        self.root.join("segmenter.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.json")
    }
    pub fn predictions_refined(&self) -> PathBuf {
        self.root.join("predictions_refined.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn tables(&self) -> PathBuf {
        self.root.join("tables.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn comparison(&self) -> PathBuf {
        self.root.join("comparison.json")
    }
    pub fn comparison_csv(&self) -> PathBuf {
        self.root.join("comparison.csv")
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, producer: Stage) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Prerequisite(format!("{}: {e}; run `peakseg {}` first", path.display(), producer.name()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub paths: Paths,
    pub allow_stale: bool,
    hashes: StageHashes,
    dataset: Option<Dataset>,
    /// (stage, GT reads during the stage) for every stage run in this process.
    pub audit: Vec<(Stage, u64)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: &Path, allow_stale: bool) -> Pipeline {
        let hashes = config.stage_hashes();
        Pipeline {
            config,
            paths: Paths { root: out.to_path_buf() },
            allow_stale,
            hashes,
            dataset: None,
            audit: Vec::new(),
        }
    }

    pub fn hashes(&self) -> &StageHashes {
        &self.hashes
    }

    fn check_hash(&self, what: &str, found: &str, expected: &str) -> Result<()> {
        if found == expected || self.allow_stale {
            return Ok(());
        }
        Err(Error::Stale(format!(
            "{what} was built with config hash {found}, current configuration expects {expected}"
        )))
    }

    fn ensure_dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            let dir = self.paths.dataset();
            let manifest = Dataset::read_manifest(&dir)?;
            self.check_hash("dataset", &manifest.config_hash, &self.hashes.dataset)?;
            self.dataset = Some(Dataset::load(&dir)?);
        }
        Ok(self.dataset.as_ref().unwrap())
    }

    /// GT reads so far in this process.
    pub fn gt_accesses(&self) -> u64 {
        self.dataset.as_ref().map_or(0, |d| d.gt_access_count())
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        fs::create_dir_all(&self.paths.root)?;
        let before = self.gt_accesses();
        match stage {
            Stage::Generate => self.generate()?,
            Stage::TrainClassifier => self.train_classifier()?,
            Stage::MakePseudo => self.make_pseudo()?,
            Stage::TrainSegmenter => self.train_segmenter()?,
            Stage::Predict => self.predict()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => self.report()?,
        }
        let reads = self.gt_accesses() - before;
        if stage.is_training() && reads != 0 {
            return Err(Error::Audit(format!(
                "{} read ground-truth instances {reads} times",
                stage.name()
            )));
        }
        self.audit.push((stage, reads));
        Ok(())
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run(s)?;
        }
        Ok(())
    }

    fn generate(&mut self) -> Result<()> {
        let ds = Dataset::generate(&self.config.scene)?;
        ds.write(&self.paths.dataset(), &self.hashes.dataset)?;
        fs::write(self.paths.config(), self.config.to_toml())?;
        self.dataset = Some(ds);
        Ok(())
    }

    fn train_classifier(&mut self) -> Result<()> {
        let hyper = self.config.classifier.clone();
        let hashes = self.hashes.clone();
        let ds = self.ensure_dataset()?;
        let training = train_classifier(ds, &hyper)?;
        let accuracy = classification_accuracy(ds, &training.params, Split::Train)?;
        let reads = ds.gt_access_count();
        save_classifier(&self.paths.classifier(), &training.params)?;
        write_json(
            &self.paths.classifier_manifest(),
            &RunManifest {
                stage: Stage::TrainClassifier.name().into(),
                config_hash: hashes.classifier,
                parent_hash: hashes.dataset,
                final_loss: training.loss_curve.last().copied(),
                gt_accesses: reads,
                extra: serde_json::json!({
                    "train_accuracy": accuracy,
                    "loss_curve": training.loss_curve,
                }),
            },
        )
    }

    fn load_classifier_checked(&self) -> Result<ClassifierParams> {
        let m: RunManifest = read_json(&self.paths.classifier_manifest(), Stage::TrainClassifier)?;
        self.check_hash("classifier", &m.config_hash, &self.hashes.classifier)?;
        load_classifier(&self.paths.classifier())
    }

    fn load_segmenter_checked(&self) -> Result<SegmenterParams> {
        let m: RunManifest = read_json(&self.paths.segmenter_manifest(), Stage::TrainSegmenter)?;
        self.check_hash("segmenter", &m.config_hash, &self.hashes.segmenter)?;
        load_segmenter(&self.paths.segmenter())
    }

    fn make_pseudo(&mut self) -> Result<()> {
        let classifier = self.load_classifier_checked()?;
        let cfg = self.config.pseudo.clone();
        let seed = self.config.segmenter.seed;
        let hash = self.hashes.pseudo.clone();
        let ds = self.ensure_dataset()?;
        let mut file = PseudoFile {
            config_hash: hash,
            skipped_peaks: 0,
            images_without_targets: 0,
            images: Vec::new(),
        };
        for i in ds.indices(Split::Train) {
            let mut r = rng::stream(seed, i as u64, STREAM_PSEUDO);
            let view = ds.weak(i);
            let out = build_pseudo_targets(&view, &classifier, &cfg, &mut r)?;
            file.skipped_peaks += out.skipped_peaks;
            file.images_without_targets += out.targets.is_empty() as usize;
            file.images.push(PseudoImage {
                image_id: view.image_id.to_string(),
                targets: out
                    .targets
                    .iter()
                    .map(|t| PseudoTargetEntry {
                        class_id: t.class_id,
                        rle: t.mask.to_rle(),
                        peak: [t.source_peak.row, t.source_peak.col],
                        peak_value: t.source_peak.value,
                    })
                    .collect(),
            });
        }
        write_json(&self.paths.pseudo(), &file)
    }

    fn train_segmenter(&mut self) -> Result<()> {
        let classifier = self.load_classifier_checked()?;
        let pseudo = self.config.pseudo.clone();
        let hyper = self.config.segmenter.clone();
        let hashes = self.hashes.clone();
        let ds = self.ensure_dataset()?;
        let training = train_segmenter(ds, &classifier, &pseudo, &hyper)?;
        let reads = ds.gt_access_count();
        save_segmenter(&self.paths.segmenter(), &training.params)?;
        write_json(
            &self.paths.segmenter_manifest(),
            &RunManifest {
                stage: Stage::TrainSegmenter.name().into(),
                config_hash: hashes.segmenter,
                parent_hash: hashes.pseudo,
                final_loss: training.curves.total.last().copied(),
                gt_accesses: reads,
                extra: serde_json::json!({
                    "iterations": training.curves.total.len(),
                    "skipped_visits": training.skipped_visits,
                    "skipped_peaks": training.skipped_peaks,
                    "loss_curves": training.curves,
                }),
            },
        )
    }

    fn predict(&mut self) -> Result<()> {
        let model = self.load_segmenter_checked()?;
        let inference = self.config.inference.clone();
        let hash = self.hashes.predict.clone();
        let ds = self.ensure_dataset()?;
        let mut raw = Vec::new();
        let mut refined = Vec::new();
        for split in [Split::Train, Split::Val] {
            for i in ds.indices(split) {
                let view = ds.weak(i);
                let preds = predict(&model, view.image, view.proposals, &inference)?;
                let snapped = refine_predictions(&preds, view.proposals)?;
                let to_entries = |ps: &[crate::segmenter::Prediction]| -> Vec<PredictionEntry> {
                    ps.iter()
                        .map(|p| PredictionEntry {
                            class_id: p.class_id,
                            score: p.score,
                            rle: p.mask.to_rle(),
                        })
                        .collect()
                };
                raw.push(ImagePredictions {
                    image_id: view.image_id.to_string(),
                    split: split.name().into(),
                    predictions: to_entries(&preds),
                });
                refined.push(ImagePredictions {
                    image_id: view.image_id.to_string(),
                    split: split.name().into(),
                    predictions: to_entries(&snapped),
                });
            }
        }
        write_json(
            &self.paths.predictions(),
            &PredictionsFile {
                config_hash: hash.clone(),
                source: METHOD_WISE.into(),
                images: raw,
            },
        )?;
        write_json(
            &self.paths.predictions_refined(),
            &PredictionsFile {
                config_hash: hash,
                source: METHOD_REFINE.into(),
                images: refined,
            },
        )
    }

    fn evaluate(&mut self) -> Result<()> {
        let wise: PredictionsFile = read_json(&self.paths.predictions(), Stage::Predict)?;
        let refined: PredictionsFile = read_json(&self.paths.predictions_refined(), Stage::Predict)?;
        self.check_hash("predictions.json", &wise.config_hash, &self.hashes.predict)?;
        self.check_hash("predictions_refined.json", &refined.config_hash, &self.hashes.predict)?;
        let pseudo: PseudoFile = read_json(&self.paths.pseudo(), Stage::MakePseudo)?;
        self.check_hash("pseudo_masks.json", &pseudo.config_hash, &self.hashes.pseudo)?;

        let pseudo_preds = PredictionsFile {
            config_hash: pseudo.config_hash.clone(),
            source: METHOD_PSEUDO.into(),
            images: pseudo
                .images
                .iter()
                .map(|im| ImagePredictions {
                    image_id: im.image_id.clone(),
                    split: Split::Train.name().into(),
                    predictions: im
                        .targets
                        .iter()
                        .map(|t| PredictionEntry {
                            class_id: t.class_id,
                            score: sigmoid(t.peak_value),
                            rle: t.rle.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };

        let eval_cfg = self.config.eval.clone();
        let hash = self.hashes.evaluate.clone();
        let hashes = self.hashes.clone();
        let ds = self.ensure_dataset()?;
        let num_classes = ds.config().num_classes;
        let image_area = ds.config().height * ds.config().width;

        let mut evaluations = Vec::new();
        let mut pr_series = Vec::new();
        for (file, splits) in [
            (&pseudo_preds, &[Split::Train][..]),
            (&wise, &[Split::Train, Split::Val][..]),
            (&refined, &[Split::Train, Split::Val][..]),
        ] {
            for &split in splits {
                let images = eval_images(ds, file, split)?;
                let report = evaluate(
                    &images,
                    &EvalOptions {
                        stage: &file.source,
                        split: split.name(),
                        config_hash: &hash,
                        num_classes,
                        image_area,
                        count_score_threshold: eval_cfg.score_threshold,
                    },
                )?;
                if split == Split::Val || file.source == METHOD_PSEUDO {
                    let m = crate::metrics::match_predictions(&images, num_classes, 0.5)?;
                    pr_series.push(pooled_pr(&m));
                }
                evaluations.push(report);
            }
        }

        let report = ReportFile {
            config_hash: hash.clone(),
            provenance: vec![
                ProvenanceEntry {
                    stage: "generate".into(),
                    artifact: "dataset/dataset.json".into(),
                    config_hash: hashes.dataset,
                },
                ProvenanceEntry {
                    stage: "train-classifier".into(),
                    artifact: "classifier.ckpt".into(),
                    config_hash: hashes.classifier,
                },
                ProvenanceEntry {
                    stage: "make-pseudo".into(),
                    artifact: "pseudo_masks.json".into(),
                    config_hash: hashes.pseudo,
                },
                ProvenanceEntry {
                    stage: "train-segmenter".into(),
                    artifact: "segmenter.ckpt".into(),
                    config_hash: hashes.segmenter,
                },
                ProvenanceEntry {
                    stage: "predict".into(),
                    artifact: "predictions.json".into(),
                    config_hash: hashes.predict,
                },
                ProvenanceEntry {
                    stage: "evaluate".into(),
                    artifact: "report.json".into(),
                    config_hash: hash,
                },
            ],
            deviations: DEVIATIONS.iter().map(|s| s.to_string()).collect(),
            evaluations,
        };
        write_json(&self.paths.report(), &report)?;
        fs::write(self.paths.tables(), tables_csv(&report.evaluations))?;

        let plots_dir = self.paths.plots();
        fs::create_dir_all(&plots_dir)?;
        plots::pr_curves(&plots_dir.join("pr_curves.png"), &pr_series)?;
        let val: Vec<&EvalReport> = report.evaluations.iter().filter(|r| r.split == "val").collect();
        let bins = |f: fn(&EvalReport) -> &Vec<crate::metrics::BinRow>| -> Vec<Vec<Option<f64>>> {
            let n = val.first().map_or(0, |r| f(r).len());
            (0..n).map(|b| val.iter().map(|r| f(r)[b].map50).collect()).collect()
        };
        plots::bar_chart(&plots_dir.join("size_bins.png"), &bins(|r| &r.size_bins))?;
        plots::bar_chart(&plots_dir.join("count_bins.png"), &bins(|r| &r.count_bins))?;
        Ok(())
    }

    fn report(&mut self) -> Result<()> {
        let report: ReportFile = read_json(&self.paths.report(), Stage::Evaluate)?;
        self.check_hash("report.json", &report.config_hash, &self.hashes.evaluate)?;
        let mut training_reads = 0;
        for path in [self.paths.classifier_manifest(), self.paths.segmenter_manifest()] {
            let m: RunManifest = read_json(&path, Stage::TrainSegmenter)?;
            training_reads += m.gt_accesses;
        }
        let rows: Vec<ComparisonRow> = report
            .evaluations
            .iter()
            .map(|e| ComparisonRow {
                method: e.stage.clone(),
                split: e.split.clone(),
                map25: e.map25,
                map50: e.map50,
                map75: e.map75,
                abo: e.abo,
                count_mae: e.count_mae,
            })
            .collect();
        let fmt = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default();
        let mut csv = String::from("method,split,map25,map50,map75,abo,count_mae\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method,
                r.split,
                fmt(r.map25),
                fmt(r.map50),
                fmt(r.map75),
                fmt(r.abo),
                r.count_mae.map(|x| format!("{x:.3}")).unwrap_or_default()
            ));
        }
        fs::write(self.paths.comparison_csv(), csv)?;
        write_json(
            &self.paths.comparison(),
            &Comparison {
                config_hash: report.config_hash,
                rows,
                gt_accesses_during_training: training_reads,
            },
        )
    }
}

/// Precision-recall points after pooling every class's ranked list by score.
fn pooled_pr(m: &Matching) -> Vec<(f64, f64)> {
    let mut recs = m.records.clone();
    recs.sort_by(|a, b| b.score.total_cmp(&a.score));
    let ranked: Vec<bool> = recs.iter().map(|r| r.tp).collect();
    crate::metrics::pr_points(&ranked, m.gt_counts.iter().sum())
}

/// Pairs a predictions file with ground truth for one split. Counts as GT access.
pub fn eval_images(ds: &Dataset, file: &PredictionsFile, split: Split) -> Result<Vec<EvalImage>> {
    let by_id: std::collections::HashMap<&str, &ImagePredictions> =
        file.images.iter().map(|p| (p.image_id.as_str(), p)).collect();
    ds.indices(split)
        .map(|i| {
            let id = ds.image_id(i);
            let preds = match by_id.get(id) {
                Some(p) => p
                    .predictions
                    .iter()
                    .map(|e| {
                        Ok(PredMask {
                            class_id: e.class_id,
                            score: e.score,
                            mask: BinaryMask::from_rle(&e.rle)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            let gts = ds
                .ground_truth(i)
                .iter()
                .map(|g| GtMask {
                    class_id: g.class_id,
                    mask: g.mask.clone(),
                })
                .collect();
            Ok(EvalImage {
                image_id: id.to_string(),
                gts,
                preds,
            })
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    read_json(path, Stage::Evaluate)
}

/// Finds the evaluation for `method` on `split`.
pub fn find<'a>(report: &'a ReportFile, method: &str, split: &str) -> Option<&'a EvalReport> {
    report.evaluations.iter().find(|e| e.stage == method && e.split == split)
}
