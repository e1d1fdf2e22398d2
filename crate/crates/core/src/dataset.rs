//! On-disk dataset layout and the weak-supervision boundary.
//!
//! ```text
//! <dir>/images/<image_id>.png
//! <dir>/annotations.json   [{image_id, labels, instances: [{class_id, rle}], proposals: [{rle, objectness}]}]
//! <dir>/dataset.json       {config, config_hash, splits: {train: [...], val: [...]}}
//! ```
//!
//! Training code only sees [`WeakView`]s. Ground-truth instances are reached
//! through [`Dataset::ground_truth`], which bumps an access counter so that a
//! pipeline run can prove its training stages never touched them.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{bbox, BinaryMask, Rle};
use crate::scenes::{generate_scene, Image, ImageRecord, Instance, Proposal, SceneConfig};

#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub class_id: usize,
    pub rle: Rle,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProposalEntry {
    pub rle: Rle,
    pub objectness: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: String,
    pub labels: Vec<u8>,
    pub instances: Vec<InstanceEntry>,
    pub proposals: Vec<ProposalEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SceneConfig,
    pub config_hash: String,
    pub splits: Splits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// What training stages are allowed to see of an image.
#[derive(Debug, Clone, Copy)]
pub struct WeakView<'a> {
    pub image_id: &'a str,
    pub image: &'a Image,
    pub labels: &'a [u8],
    pub proposals: &'a [Proposal],
}

#[derive(Debug)]
pub struct Dataset {
    config: SceneConfig,
    records: Vec<ImageRecord>,
    num_train: usize,
    gt_reads: AtomicU64,
}

impl Dataset {
    pub fn generate(config: &SceneConfig) -> Result<Dataset> {
        config.validate()?;
        let records = (0..config.num_images())
            .map(|i| generate_scene(config, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: config.clone(),
            records,
            num_train: config.num_train,
            gt_reads: AtomicU64::new(0),
        })
    }

    /// Wraps already-built records; the first `num_train` form the training split.
    pub fn from_records(config: SceneConfig, records: Vec<ImageRecord>, num_train: usize) -> Dataset {
        Dataset {
            config,
            records,
            num_train,
            gt_reads: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.num_train.min(self.records.len()),
            Split::Val => self.num_train.min(self.records.len())..self.records.len(),
        }
    }

    pub fn weak(&self, index: usize) -> WeakView<'_> {
        let r = &self.records[index];
        WeakView {
            image_id: &r.image_id,
            image: &r.image,
            labels: &r.labels,
            proposals: &r.proposals,
        }
    }

    pub fn image_id(&self, index: usize) -> &str {
        &self.records[index].image_id
    }

    /// Ground-truth instances of image `index`. Counted.
    pub fn ground_truth(&self, index: usize) -> &[Instance] {
        self.gt_reads.fetch_add(1, Ordering::Relaxed);
        &self.records[index].instances
    }

    pub fn gt_access_count(&self) -> u64 {
        self.gt_reads.load(Ordering::Relaxed)
    }

    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir)?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let buf = image::RgbImage::from_raw(r.image.width as u32, r.image.height as u32, r.image.to_rgb8())
                .ok_or_else(|| Error::DimensionMismatch("image buffer".into()))?;
            buf.save(images_dir.join(format!("{}.png", r.image_id)))?;
            entries.push(AnnotationEntry {
                image_id: r.image_id.clone(),
                labels: r.labels.clone(),
                instances: r
                    .instances
                    .iter()
                    .map(|i| InstanceEntry {
                        class_id: i.class_id,
                        rle: i.mask.to_rle(),
                    })
                    .collect(),
                proposals: r
                    .proposals
                    .iter()
                    .map(|p| ProposalEntry {
                        rle: p.mask.to_rle(),
                        objectness: p.objectness,
                    })
                    .collect(),
            });
        }
        fs::write(dir.join("annotations.json"), serde_json::to_vec(&entries)?)?;
        let manifest = DatasetManifest {
            config: self.config.clone(),
            config_hash: config_hash.to_string(),
            splits: Splits {
                train: self.indices(Split::Train).map(|i| self.records[i].image_id.clone()).collect(),
                val: self.indices(Split::Val).map(|i| self.records[i].image_id.clone()).collect(),
            },
        };
        fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("dataset.json");
        let bytes = fs::read(&path)
            .map_err(|e| Error::Prerequisite(format!("{}: {e}; run `generate` first", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = Self::read_manifest(dir)?;
        let entries = read_annotations(&dir.join("annotations.json"))?;
        let mut by_id: std::collections::HashMap<String, AnnotationEntry> =
            entries.into_iter().map(|e| (e.image_id.clone(), e)).collect();
        let mut records = Vec::new();
        for id in manifest.splits.train.iter().chain(&manifest.splits.val) {
            let e = by_id
                .remove(id)
                .ok_or_else(|| Error::Prerequisite(format!("image {id} missing from annotations.json")))?;
            let png = image::open(dir.join("images").join(format!("{id}.png")))?.to_rgb8();
            let image = Image::from_rgb8(png.height() as usize, png.width() as usize, png.as_raw())?;
            records.push(entry_to_record(e, image)?);
        }
        Ok(Dataset {
            config: manifest.config,
            records,
            num_train: manifest.splits.train.len(),
            gt_reads: AtomicU64::new(0),
        })
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationEntry>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Prerequisite(format!("{}: {e}; run `generate` first", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn entry_to_record(e: AnnotationEntry, image: Image) -> Result<ImageRecord> {
    let instances = e
        .instances
        .into_iter()
        .map(|i| {
            let mask = BinaryMask::from_rle(&i.rle)?;
            Ok(Instance {
                class_id: i.class_id,
                bbox: bbox(&mask)?,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let proposals = e
        .proposals
        .into_iter()
        .map(|p| {
            Ok(Proposal {
                mask: BinaryMask::from_rle(&p.rle)?,
                objectness: p.objectness,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageRecord {
        image_id: e.image_id,
        image,
        labels: e.labels,
        instances,
        proposals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_load_round_trip() {
        let cfg = SceneConfig {
            num_train: 3,
            num_val: 2,
            ..SceneConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path(), "abc").unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.indices(Split::Val), 3..5);
        for i in 0..5 {
            assert_eq!(back.records[i], ds.records[i]);
        }
        assert_eq!(Dataset::read_manifest(dir.path()).unwrap().config_hash, "abc");
    }

    #[test]
    fn gt_counter() {
        let cfg = SceneConfig {
            num_train: 2,
            num_val: 0,
            ..SceneConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let _ = ds.weak(0);
        let _ = ds.weak(1);
        assert_eq!(ds.gt_access_count(), 0);
        let _ = ds.ground_truth(1);
        assert_eq!(ds.gt_access_count(), 1);
    }

    #[test]
    fn missing_dataset_is_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Prerequisite(_))));
    }
}
