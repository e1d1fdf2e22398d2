//! Deterministic toy scenes and proposal galleries.
//!
//! Each class owns one shape family and one base colour. Objects are painted
//! back-to-front over a cluttered grey background, so the recorded instance
//! masks are the *visible* regions and are pairwise disjoint.
//!
//! The proposal gallery imitates a class-agnostic proposal method: for every
//! instance a handful of perturbed copies whose objectness tracks their true
//! IoU (plus noise), and a set of low-objectness distractors.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{bbox, iou, BinaryMask, Box};
use crate::rng::{self, Rng, STREAM_PROPOSALS, STREAM_SCENE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl ShapeKind {
    /// Whether the point (u, v), relative to the shape centre in an
    /// unrotated frame, lies inside a shape of circumradius `r`.
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Square => u.abs() <= 0.75 * r && v.abs() <= 0.75 * r,
            ShapeKind::Triangle => {
                // Equilateral triangle inscribed in the circle of radius r.
                [90f64, 210.0, 330.0].iter().all(|deg| {
                    let t = deg.to_radians();
                    u * t.cos() + v * t.sin() <= 0.5 * r
                })
            }
            ShapeKind::Cross => {
                let arm = r / 3.0;
                (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= r,
            ShapeKind::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
        }
    }
}

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.15],
    [0.80, 0.25, 0.80],
    [0.15, 0.80, 0.85],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Shape family for class `c` is `shapes[c - 1]`.
    pub shapes: Vec<ShapeKind>,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object circumscribed diameter range, pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Perturbed variants per instance (j).
    pub variants_per_instance: usize,
    /// Distractor proposals per image (d).
    pub distractors: usize,
    pub pixel_noise: f64,
    pub color_jitter: f64,
    pub objectness_noise: f64,
    /// Optional relative class frequencies; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    pub num_train: usize,
    pub num_val: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 96,
            width: 96,
            num_classes: 4,
            shapes: vec![
                ShapeKind::Disk,
                ShapeKind::Square,
                ShapeKind::Triangle,
                ShapeKind::Cross,
            ],
            objects_min: 1,
            objects_max: 4,
            size_min: 12.0,
            size_max: 40.0,
            variants_per_instance: 8,
            distractors: 24,
            pixel_noise: 0.04,
            color_jitter: 0.08,
            objectness_noise: 0.1,
            class_weights: None,
            num_train: 200,
            num_val: 100,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.height < 32 || self.width < 32 {
            return fail("image height and width must be at least 32");
        }
        if self.variants_per_instance < 3 {
            return fail("variants_per_instance must be at least 3");
        }
        if self.distractors < 5 {
            return fail("distractors must be at least 5");
        }
        if self.shapes.len() < self.num_classes {
            return fail("need one shape family per class");
        }
        if self.num_classes > PALETTE.len() {
            return fail("at most 6 classes are supported");
        }
        if self.objects_min > self.objects_max {
            return fail("objects_min exceeds objects_max");
        }
        if !(self.size_min >= 4.0 && self.size_min <= self.size_max)
            || self.size_max > self.height.min(self.width) as f64
        {
            return fail("object size range is invalid for the image size");
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return fail("class_weights must have one non-negative entry per class");
            }
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.num_train + self.num_val
    }
}

/// Three-channel image, channel-planar (`[c][row][col]`), values in [0, 1]
/// quantised to 8-bit levels so it survives a PNG round trip unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    #[inline]
    pub fn at(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    #[inline]
    fn at_mut(&mut self, ch: usize, row: usize, col: usize) -> &mut f32 {
        &mut self.data[(ch * self.height + row) * self.width + col]
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::DimensionMismatch("rgb buffer length".into()));
        }
        let mut img = Image::new(height, width);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    *img.at_mut(ch, r, c) = rgb[(r * width + c) * 3 + ch] as f32 / 255.0;
                }
            }
        }
        Ok(img)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = vec![0u8; 3 * self.height * self.width];
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..3 {
                    out[(r * self.width + c) * 3 + ch] = (self.at(ch, r, c) * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }

    /// Mirror across the vertical axis.
    pub fn flipped_horizontally(&self) -> Image {
        let mut out = Image::new(self.height, self.width);
        for ch in 0..3 {
            for r in 0..self.height {
                for c in 0..self.width {
                    *out.at_mut(ch, r, c) = self.at(ch, r, self.width - 1 - c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub mask: BinaryMask,
    pub bbox: Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub mask: BinaryMask,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: Image,
    /// `labels[c - 1]` is 1 iff class `c` appears.
    pub labels: Vec<u8>,
    pub instances: Vec<Instance>,
    pub proposals: Vec<Proposal>,
}

pub fn image_id(index: usize) -> String {
    format!("{index:05}")
}

pub fn derive_image_labels(instances: &[Instance], num_classes: usize) -> Result<Vec<u8>> {
    let mut y = vec![0u8; num_classes];
    for inst in instances {
        if inst.class_id == 0 || inst.class_id > num_classes {
            return Err(Error::ClassOutOfRange {
                class_id: inst.class_id,
                num_classes,
            });
        }
        y[inst.class_id - 1] = 1;
    }
    Ok(y)
}

struct PlacedShape {
    class_id: usize,
    full: BinaryMask,
    color: [f32; 3],
}

fn rasterize(config: &SceneConfig, kind: ShapeKind, cy: f64, cx: f64, radius: f64, angle: f64) -> BinaryMask {
    let (sin, cos) = angle.sin_cos();
    BinaryMask::from_fn(config.height, config.width, |r, c| {
        let dy = r as f64 + 0.5 - cy;
        let dx = c as f64 + 0.5 - cx;
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        kind.contains(u, v, radius)
    })
    .expect("config dimensions validated")
}

fn pick_class(config: &SceneConfig, rng: &mut Rng) -> usize {
    match &config.class_weights {
        None => rng.random_range(1..=config.num_classes),
        Some(w) => {
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (k, &wk) in w.iter().enumerate() {
                if u < wk {
                    return k + 1;
                }
                u -= wk;
            }
            w.iter().rposition(|&x| x > 0.0).unwrap() + 1
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum visible fraction of an object's full area after occlusion.
const MIN_VISIBLE_FRACTION: f64 = 0.35;

fn place_objects(config: &SceneConfig, rng: &mut Rng) -> Vec<PlacedShape> {
    let count = rng.random_range(config.objects_min..=config.objects_max);
    let mut placed: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let class_id = pick_class(config, rng);
            let size = rng.random_range(config.size_min..=config.size_max);
            let radius = size / 2.0;
            let cy = rng.random_range(radius..=config.height as f64 - radius);
            let cx = rng.random_range(radius..=config.width as f64 - radius);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let kind = config.shapes[class_id - 1];
            let full = rasterize(config, kind, cy, cx, radius, angle);
            let full_area = full.area();
            if full_area == 0 {
                continue;
            }
            // The new shape goes on top; every earlier object must stay visible.
            let ok = placed.iter().enumerate().all(|(k, p)| {
                let mut vis = p.full.subtract(&full).unwrap();
                for later in &placed[k + 1..] {
                    vis = vis.subtract(&later.full).unwrap();
                }
                vis.area() as f64 >= MIN_VISIBLE_FRACTION * p.full.area() as f64
            });
            if !ok {
                continue;
            }
            let base = PALETTE[class_id - 1];
            let jitter = config.color_jitter as f32;
            let color = base.map(|v| (v + rng.random_range(-1.0f32..=1.0) * jitter).clamp(0.0, 1.0));
            placed.push(PlacedShape { class_id, full, color });
            break;
        }
    }
    placed
}

fn paint_background(config: &SceneConfig, rng: &mut Rng) -> Image {
    let mut img = Image::new(config.height, config.width);
    let base = rng.random_range(0.35f32..0.55);
    let gy = rng.random_range(-0.15f32..0.15);
    let gx = rng.random_range(-0.15f32..0.15);
    for r in 0..config.height {
        for c in 0..config.width {
            let t = base + gy * (r as f32 / config.height as f32 - 0.5) + gx * (c as f32 / config.width as f32 - 0.5);
            for ch in 0..3 {
                *img.at_mut(ch, r, c) = t;
            }
        }
    }
    // Neutral clutter blobs that no class claims.
    let clutter = rng.random_range(2..=5);
    for _ in 0..clutter {
        let cy = rng.random_range(0.0..config.height as f64);
        let cx = rng.random_range(0.0..config.width as f64);
        let ry = rng.random_range(3.0..14.0);
        let rx = rng.random_range(3.0..14.0);
        let shade = rng.random_range(0.2f32..0.75);
        for r in 0..config.height {
            for c in 0..config.width {
                let dy = (r as f64 + 0.5 - cy) / ry;
                let dx = (c as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    for ch in 0..3 {
                        *img.at_mut(ch, r, c) = shade;
                    }
                }
            }
        }
    }
    img
}

/// Generates image `image_index` of the dataset described by `config`.
/// Pure function of `(config, image_index)`.
pub fn generate_scene(config: &SceneConfig, image_index: usize) -> Result<ImageRecord> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, image_index as u64, STREAM_SCENE);
    let mut image = paint_background(config, &mut rng);
    let placed = place_objects(config, &mut rng);

    for p in &placed {
        for r in 0..config.height {
            for c in 0..config.width {
                if p.full.get(r, c) {
                    for ch in 0..3 {
                        *image.at_mut(ch, r, c) = p.color[ch];
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, config.pixel_noise as f32).map_err(|e| Error::Config(e.to_string()))?;
    for v in image.data.iter_mut() {
        let x = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        *v = (x * 255.0).round() / 255.0;
    }

    let mut instances = Vec::with_capacity(placed.len());
    for (k, p) in placed.iter().enumerate() {
        let mut vis = p.full.clone();
        for later in &placed[k + 1..] {
            vis = vis.subtract(&later.full)?;
        }
        let bbox = bbox(&vis)?;
        instances.push(Instance {
            class_id: p.class_id,
            mask: vis,
            bbox,
        });
    }

    let labels = derive_image_labels(&instances, config.num_classes)?;
    let mut record = ImageRecord {
        image_id: image_id(image_index),
        image,
        labels,
        instances,
        proposals: Vec::new(),
    };
    record.proposals = generate_proposals_indexed(&record, config, image_index)?;
    Ok(record)
}

/// Builds the proposal gallery for `record`; the random stream is derived
/// from the record's image id so the gallery is reproducible on its own.
pub fn generate_proposals(record: &ImageRecord, config: &SceneConfig) -> Result<Vec<Proposal>> {
    let index: usize = record
        .image_id
        .parse()
        .map_err(|_| Error::Config(format!("image id {:?} is not an index", record.image_id)))?;
    generate_proposals_indexed(record, config, index)
}

/// Required best-variant IoU per instance.
pub const GALLERY_QUALITY_BAR: f64 = 0.7;

/// Boundary flip rate of each instance's first, edge-aligned variant.
const EDGE_FLIP: f64 = 0.05;

fn generate_proposals_indexed(record: &ImageRecord, config: &SceneConfig, index: usize) -> Result<Vec<Proposal>> {
    let mut rng = rng::stream(config.seed, index as u64, STREAM_PROPOSALS);
    let obj_noise =
        Normal::new(0.0, config.objectness_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();

    for inst in &record.instances {
        let mut variants: Vec<BinaryMask> = Vec::with_capacity(config.variants_per_instance);
        for k in 0..config.variants_per_instance {
            let mut v = if k == 0 {
                boundary_jitter(&inst.mask, EDGE_FLIP, &mut rng)
            } else {
                perturb(&inst.mask, &inst.bbox, &mut rng)
            };
            while v.is_empty() {
                v = boundary_jitter(&inst.mask, EDGE_FLIP, &mut rng);
            }
            variants.push(v);
        }
        let best = variants
            .iter()
            .map(|v| iou(v, &inst.mask).unwrap())
            .fold(0.0f64, f64::max);
        if best < GALLERY_QUALITY_BAR {
            let mut fixed = None;
            for _ in 0..20 {
                let v = boundary_jitter(&inst.mask, 0.1, &mut rng);
                if !v.is_empty() && iou(&v, &inst.mask)? >= GALLERY_QUALITY_BAR {
                    fixed = Some(v);
                    break;
                }
            }
            variants[0] = fixed.unwrap_or_else(|| inst.mask.clone());
        }
        for v in variants {
            let q = iou(&v, &inst.mask)?;
            let objectness = (q + obj_noise.sample(&mut rng)).clamp(0.05, 1.0);
            out.push(Proposal { mask: v, objectness });
        }
    }

    for _ in 0..config.distractors {
        let mask = loop {
            let m = distractor(record, config, &mut rng);
            if !m.is_empty() {
                break m;
            }
        };
        let objectness = 0.4 * (1.0 - rng.random::<f64>());
        out.push(Proposal { mask, objectness });
    }

    out.shuffle(&mut rng);
    Ok(out)
}

/// Re-draws each pixel in the one-pixel band around the boundary with
/// probability `flip`.
fn boundary_jitter(mask: &BinaryMask, flip: f64, rng: &mut Rng) -> BinaryMask {
    let outer = mask.dilate(1);
    let inner = mask.erode(1);
    let mut out = mask.clone();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if outer.get(r, c) && !inner.get(r, c) && rng.random_bool(flip) {
                out.set(r, c, !mask.get(r, c));
            }
        }
    }
    out
}

fn perturb(mask: &BinaryMask, b: &Box, rng: &mut Rng) -> BinaryMask {
    let size = b.height().max(b.width()) as f64;
    match rng.random_range(0..7) {
        0 => mask.dilate(rng.random_range(1..=2)),
        1 => {
            let e = mask.erode(rng.random_range(1..=2));
            if e.is_empty() {
                mask.dilate(1)
            } else {
                e
            }
        }
        2 => {
            let mag = |rng: &mut Rng| {
                let m = rng.random_range(0.1..0.4) * size;
                if rng.random_bool(0.5) {
                    -m
                } else {
                    m
                }
            };
            let (dr, dc) = (mag(rng), mag(rng));
            mask.translate(dr.round() as isize, dc.round() as isize)
        }
        3 => boundary_jitter(&boundary_jitter(mask, 0.5, rng), 0.5, rng),
        4 => {
            // Keep one side of a line passing near the centre: a part proposal.
            let cy = (b.row_min + b.row_max) as f64 / 2.0;
            let cx = (b.col_min + b.col_max) as f64 / 2.0;
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = rng.random_range(0.0..0.3) * size / 2.0;
            let (s, c) = t.sin_cos();
            BinaryMask::from_fn(mask.height(), mask.width(), |r, col| {
                mask.get(r, col) && (r as f64 - cy) * s + (col as f64 - cx) * c <= offset
            })
            .unwrap()
        }
        5 => mask.translate(rng.random_range(-2i64..=2) as isize, rng.random_range(-2i64..=2) as isize),
        _ => BinaryMask::from_fn(mask.height(), mask.width(), |r, c| b.contains(r, c)).unwrap(),
    }
}

fn distractor(record: &ImageRecord, config: &SceneConfig, rng: &mut Rng) -> BinaryMask {
    let (h, w) = (config.height, config.width);
    let n = record.instances.len();
    let kind = if n >= 2 { rng.random_range(0..3) } else { rng.random_range(0..2) };
    match kind {
        0 => {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(4.0..24.0);
            let rx = rng.random_range(4.0..24.0);
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = t.sin_cos();
            BinaryMask::from_fn(h, w, |r, col| {
                let dy = r as f64 + 0.5 - cy;
                let dx = col as f64 + 0.5 - cx;
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            })
            .unwrap()
        }
        1 => {
            let bh = rng.random_range(8..=48usize.min(h));
            let bw = rng.random_range(8..=48usize.min(w));
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            let rect = BinaryMask::from_fn(h, w, |r, c| r >= r0 && r < r0 + bh && c >= c0 && c < c0 + bw).unwrap();
            let mut bg = rect.clone();
            for inst in &record.instances {
                bg = bg.subtract(&inst.mask).unwrap();
            }
            if bg.is_empty() {
                rect
            } else {
                bg
            }
        }
        _ => {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            record.instances[a].mask.union(&record.instances[b].mask).unwrap().dilate(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(class_id: usize) -> Instance {
        let mask = BinaryMask::full(2, 2).unwrap();
        Instance {
            class_id,
            bbox: bbox(&mask).unwrap(),
            mask,
        }
    }

    #[test]
    fn labels_examples() {
        assert_eq!(derive_image_labels(&[], 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(
            derive_image_labels(&[inst(1), inst(1), inst(3)], 4).unwrap(),
            vec![1, 0, 1, 0]
        );
        assert_eq!(
            derive_image_labels(&[inst(2), inst(1), inst(3)], 3).unwrap(),
            vec![1, 1, 1]
        );
        assert!(matches!(
            derive_image_labels(&[inst(5)], 4),
            Err(Error::ClassOutOfRange { class_id: 5, .. })
        ));
        assert!(derive_image_labels(&[inst(0)], 4).is_err());
    }

    #[test]
    fn deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 4).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn zero_objects() {
        let cfg = SceneConfig {
            objects_min: 0,
            objects_max: 0,
            ..SceneConfig::default()
        };
        let r = generate_scene(&cfg, 0).unwrap();
        assert!(r.instances.is_empty());
        assert_eq!(r.labels, vec![0; 4]);
        assert_eq!(r.proposals.len(), cfg.distractors);
    }

    #[test]
    fn single_object_of_class_two() {
        let cfg = SceneConfig {
            objects_min: 1,
            objects_max: 1,
            class_weights: Some(vec![0.0, 1.0, 0.0, 0.0]),
            ..SceneConfig::default()
        };
        for i in 0..5 {
            let r = generate_scene(&cfg, i).unwrap();
            assert_eq!(r.instances.len(), 1);
            assert_eq!(r.labels, vec![0, 1, 0, 0]);
        }
    }

    #[test]
    fn proposal_count() {
        let cfg = SceneConfig {
            objects_min: 2,
            objects_max: 2,
            variants_per_instance: 5,
            distractors: 10,
            ..SceneConfig::default()
        };
        let r = generate_scene(&cfg, 1).unwrap();
        assert_eq!(r.instances.len(), 2);
        assert_eq!(r.proposals.len(), 20);
        assert_eq!(generate_proposals(&r, &cfg).unwrap(), r.proposals);
    }

    #[test]
    fn invariants_hold() {
        let cfg = SceneConfig::default();
        for i in 0..20 {
            let r = generate_scene(&cfg, i).unwrap();
            assert_eq!(r.labels, derive_image_labels(&r.instances, 4).unwrap());
            for (a, ia) in r.instances.iter().enumerate() {
                assert!(!ia.mask.is_empty());
                assert_eq!(ia.bbox, bbox(&ia.mask).unwrap());
                for ib in &r.instances[a + 1..] {
                    assert_eq!(ia.mask.intersection_area(&ib.mask).unwrap(), 0);
                }
                let best = r
                    .proposals
                    .iter()
                    .map(|p| iou(&p.mask, &ia.mask).unwrap())
                    .fold(0.0, f64::max);
                assert!(best >= GALLERY_QUALITY_BAR, "best {best}");
            }
            for p in &r.proposals {
                assert!(p.mask.area() >= 1);
                assert!(p.objectness > 0.0 && p.objectness <= 1.0);
            }
            assert!(r.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn validation() {
        let bad = |f: fn(&mut SceneConfig)| {
            let mut c = SceneConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.num_classes = 1));
        assert!(bad(|c| c.height = 16));
        assert!(bad(|c| c.variants_per_instance = 2));
        assert!(bad(|c| c.distractors = 4));
        assert!(SceneConfig::default().validate().is_ok());
    }

    #[test]
    fn rgb8_round_trip() {
        let r = generate_scene(&SceneConfig::default(), 0).unwrap();
        let back = Image::from_rgb8(96, 96, &r.image.to_rgb8()).unwrap();
        assert_eq!(back, r.image);
    }
}
