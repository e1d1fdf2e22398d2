//! Class-activation-map classifier with a peak stimulation layer.
//!
//! A small fully convolutional network (four 3x3 conv blocks, total stride
//! 8, then a 1x1 conv to one channel per class) produces a response map per
//! class. Local maxima of each map are the class's peaks; the class score is
//! the mean activation at those peaks, trained with the multi-label
//! soft-margin loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, relu_backward, relu_inplace, Conv2d, ConvCache, Param, Sgd, Tensor};
use crate::rng::{self, STREAM_CLASSIFIER_INIT, STREAM_CLASSIFIER_ORDER};
use crate::scenes::Image;

/// One class's response grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> ScoreMap {
        assert_eq!(values.len(), height * width);
        ScoreMap { height, width, values }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResponseMaps {
    /// `maps[c - 1]` is the map of class `c`.
    pub maps: Vec<ScoreMap>,
}

impl ClassResponseMaps {
    pub fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.maps.first().map_or((0, 0), |m| (m.height, m.width));
        (self.maps.len(), h, w)
    }
}

/// A located object: a local maximum of class `class_id`'s map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Locations strictly greater than every other cell of the centred
/// `(2*(r/2)+1)`-sided window (clipped at the border), by value descending.
pub fn stimulate_peaks(map: &ScoreMap, r: usize) -> Vec<(usize, usize)> {
    let half = r / 2;
    let (h, w) = (map.height, map.width);
    let mut peaks = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = map.get(i, j);
            let mut is_peak = true;
            'win: for y in i.saturating_sub(half)..=(i + half).min(h - 1) {
                for x in j.saturating_sub(half)..=(j + half).min(w - 1) {
                    if (y, x) != (i, j) && map.get(y, x) >= v {
                        is_peak = false;
                        break 'win;
                    }
                }
            }
            if is_peak {
                peaks.push((i, j));
            }
        }
    }
    // Stable: equal values stay in row-major order.
    peaks.sort_by(|a, b| map.get(b.0, b.1).total_cmp(&map.get(a.0, a.1)));
    peaks
}

/// Row-major first location of the global maximum.
pub fn global_max_location(map: &ScoreMap) -> (usize, usize) {
    let mut best = 0usize;
    for (k, &v) in map.values.iter().enumerate() {
        if v > map.values[best] {
            best = k;
        }
    }
    (best / map.width, best % map.width)
}

/// The locations `peak_score` actually averages over.
pub fn effective_peaks(map: &ScoreMap, peaks: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if peaks.is_empty() {
        vec![global_max_location(map)]
    } else {
        peaks.to_vec()
    }
}

/// Mean map value at the peaks; the global maximum when there are none.
pub fn peak_score(map: &ScoreMap, peaks: &[(usize, usize)]) -> f64 {
    let eff = effective_peaks(map, peaks);
    eff.iter().map(|&(i, j)| map.get(i, j)).sum::<f64>() / eff.len() as f64
}

/// d(peak_score)/d(map), holding the peak set fixed.
pub fn peak_score_grad(map: &ScoreMap, peaks: &[(usize, usize)]) -> Vec<f64> {
    let eff = effective_peaks(map, peaks);
    let mut g = vec![0.0; map.values.len()];
    let share = 1.0 / eff.len() as f64;
    for (i, j) in eff {
        g[i * map.width + j] += share;
    }
    g
}

const LOG_FLOOR: f64 = 1e-12;

/// `ln(max(sigmoid(s), 1e-12))`, computed without overflow.
fn log_sigmoid_floored(s: f64) -> f64 {
    let ls = if s >= 0.0 { -(-s).exp().ln_1p() } else { s - s.exp().ln_1p() };
    ls.max(LOG_FLOOR.ln())
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Multi-label soft-margin loss,
/// `-(1/C) sum_c [y_c ln sig(s_c) + (1 - y_c) ln sig(-s_c)]`.
pub fn multilabel_loss(scores: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let c = scores.len() as f64;
    -scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| if y == 1 { log_sigmoid_floored(s) } else { log_sigmoid_floored(-s) })
        .sum::<f64>()
        / c
}

/// Gradient of [`multilabel_loss`] with respect to the scores.
pub fn multilabel_loss_grad(scores: &[f64], labels: &[u8]) -> Vec<f64> {
    let c = scores.len() as f64;
    let floor = LOG_FLOOR.ln();
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            // Floored terms are constant, so they contribute nothing.
            if y == 1 {
                if log_sigmoid_floored(s) <= floor { 0.0 } else { (sigmoid(s) - 1.0) / c }
            } else if log_sigmoid_floored(-s) <= floor {
                0.0
            } else {
                sigmoid(s) / c
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub num_classes: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: [usize; 4],
    /// PSL window size r, in map cells.
    pub window: usize,
    pub stride: usize,
}

impl ClassifierArch {
    pub fn new(num_classes: usize, image_height: usize, image_width: usize, window: usize) -> Result<Self> {
        if window < 3 || window % 2 == 0 {
            return Err(Error::Config(format!("PSL window must be odd and at least 3, got {window}")));
        }
        if image_height % 8 != 0 || image_width % 8 != 0 {
            return Err(Error::Config("image size must be a multiple of the stride 8".into()));
        }
        Ok(ClassifierArch {
            num_classes,
            image_height,
            image_width,
            channels: [16, 32, 32, 32],
            window,
            stride: 8,
        })
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.image_height / self.stride, self.image_width / self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub arch: ClassifierArch,
    pub blocks: Vec<Conv2d>,
    pub head: Conv2d,
}

struct ForwardTrace {
    caches: Vec<ConvCache>,
    activations: Vec<Tensor>,
    head_cache: ConvCache,
}

impl ClassifierParams {
    pub fn init(arch: ClassifierArch, seed: u64) -> ClassifierParams {
        let mut rng = rng::stream(seed, 0, STREAM_CLASSIFIER_INIT);
        let ch = arch.channels;
        let blocks = vec![
            Conv2d::new(3, ch[0], 3, 2, &mut rng),
            Conv2d::new(ch[0], ch[1], 3, 2, &mut rng),
            Conv2d::new(ch[1], ch[2], 3, 2, &mut rng),
            Conv2d::new(ch[2], ch[3], 3, 1, &mut rng),
        ];
        let head = Conv2d::new(ch[3], arch.num_classes, 1, 1, &mut rng);
        ClassifierParams { arch, blocks, head }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{k}.weight"), &b.weight));
            out.push((format!("block{k}.bias"), &b.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{k}.weight"), &mut b.weight));
            out.push((format!("block{k}.bias"), &mut b.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    fn forward_batch(&self, x: &Tensor) -> (Tensor, ForwardTrace) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (mut y, cache) = b.forward(&cur);
            relu_inplace(&mut y.data);
            caches.push(cache);
            activations.push(y.clone());
            cur = y;
        }
        let (maps, head_cache) = self.head.forward(&cur);
        (
            maps,
            ForwardTrace {
                caches,
                activations,
                head_cache,
            },
        )
    }

    fn backward_batch(&mut self, trace: &ForwardTrace, grad_maps: &Tensor) {
        let mut g = self.head.backward(&trace.head_cache, grad_maps);
        for k in (0..self.blocks.len()).rev() {
            relu_backward(&trace.activations[k].data, &mut g.data);
            g = self.blocks[k].backward(&trace.caches[k], &g);
        }
    }
}

fn batch_tensor(images: &[&Image]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut t = Tensor::zeros(3, images.len(), h, w);
    let p = h * w;
    for (b, img) in images.iter().enumerate() {
        for ch in 0..3 {
            let dst = t.idx(ch, b, 0, 0);
            t.data[dst..dst + p].copy_from_slice(&img.data[ch * p..(ch + 1) * p]);
        }
    }
    t
}

fn maps_of(out: &Tensor, b: usize) -> ClassResponseMaps {
    let p = out.plane();
    ClassResponseMaps {
        maps: (0..out.c)
            .map(|c| {
                let start = out.idx(c, b, 0, 0);
                ScoreMap::new(out.h, out.w, out.data[start..start + p].iter().map(|&v| v as f64).collect())
            })
            .collect(),
    }
}

/// Forward pass producing one response map per class.
pub fn forward_cam(image: &Image, params: &ClassifierParams) -> Result<ClassResponseMaps> {
    if image.height != params.arch.image_height || image.width != params.arch.image_width {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, classifier expects {}x{}",
            image.height, image.width, params.arch.image_height, params.arch.image_width
        )));
    }
    let (out, _) = params.forward_batch(&batch_tensor(&[image]));
    Ok(maps_of(&out, 0))
}

/// Per-class scores `s^c` of an image.
pub fn class_scores(maps: &ClassResponseMaps, r: usize) -> Vec<f64> {
    maps.maps.iter().map(|m| peak_score(m, &stimulate_peaks(m, r))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHyper {
    pub window: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub hflip: bool,
    /// Not used by the synthetic task (colours are class-informative).
    pub color_jitter: bool,
    pub seed: u64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        ClassifierHyper {
            window: 3,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 80,
            batch_size: 8,
            grad_clip: 10.0,
            hflip: true,
            color_jitter: false,
            seed: 0,
        }
    }
}

impl ClassifierHyper {
    /// The large-scale schedule (lr 0.00125) kept for reference runs.
    pub fn large_scale() -> Self {
        ClassifierHyper {
            lr: 0.00125,
            epochs: 50_000 / 200,
            color_jitter: true,
            ..Self::default()
        }
    }
}

fn jitter_colors(img: &Image, rng: &mut rng::Rng) -> Image {
    use rand::Rng as _;
    let mut out = img.clone();
    let p = img.height * img.width;
    for ch in 0..3 {
        let gain = 1.0 + rng.random_range(-0.1f32..0.1);
        let bias = rng.random_range(-0.05f32..0.05);
        for v in &mut out.data[ch * p..(ch + 1) * p] {
            *v = (*v * gain + bias).clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    pub params: ClassifierParams,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains the classifier on the training split's `(image, labels)` pairs.
pub fn train_classifier(dataset: &Dataset, hyper: &ClassifierHyper) -> Result<ClassifierTraining> {
    use rand::Rng as _;
    let cfg = dataset.config();
    let arch = ClassifierArch::new(cfg.num_classes, cfg.height, cfg.width, hyper.window)?;
    let mut params = ClassifierParams::init(arch, hyper.seed);
    let opt = Sgd {
        lr: hyper.lr as f32,
        momentum: hyper.momentum as f32,
        weight_decay: hyper.weight_decay as f32,
    };
    let mut order: Vec<usize> = dataset.indices(Split::Train).collect();
    let mut rng = rng::stream(hyper.seed, 0, STREAM_CLASSIFIER_ORDER);
    let mut loss_curve = Vec::with_capacity(hyper.epochs);
    let bs = hyper.batch_size.max(1);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(bs) {
            let mut imgs: Vec<Image> = Vec::with_capacity(chunk.len());
            let mut labels: Vec<&[u8]> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let view = dataset.weak(i);
                let mut img = if hyper.hflip && rng.random_bool(0.5) {
                    view.image.flipped_horizontally()
                } else {
                    view.image.clone()
                };
                if hyper.color_jitter {
                    img = jitter_colors(&img, &mut rng);
                }
                imgs.push(img);
                labels.push(view.labels);
            }
            let refs: Vec<&Image> = imgs.iter().collect();
            let x = batch_tensor(&refs);
            let (out, trace) = params.forward_batch(&x);
            let mut grad = Tensor::zeros(out.c, out.n, out.h, out.w);
            let nb = chunk.len() as f64;
            for b in 0..chunk.len() {
                let maps = maps_of(&out, b);
                let peaks: Vec<Vec<(usize, usize)>> =
                    maps.maps.iter().map(|m| stimulate_peaks(m, hyper.window)).collect();
                let scores: Vec<f64> = maps.maps.iter().zip(&peaks).map(|(m, p)| peak_score(m, p)).collect();
                let loss = multilabel_loss(&scores, labels[b]);
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "classifier loss is {loss} at epoch {epoch} (scores {scores:?})"
                    )));
                }
                epoch_loss += loss;
                seen += 1;
                let ds = multilabel_loss_grad(&scores, labels[b]);
                for (c, m) in maps.maps.iter().enumerate() {
                    let gm = peak_score_grad(m, &peaks[c]);
                    let start = grad.idx(c, b, 0, 0);
                    for (k, g) in gm.iter().enumerate() {
                        if *g != 0.0 {
                            grad.data[start + k] = (ds[c] * g / nb) as f32;
                        }
                    }
                }
            }
            params.backward_batch(&trace, &grad);
            let mut ps = params.params_mut();
            let norm = clip_grad_norm(&mut ps, hyper.grad_clip as f32);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("classifier gradient norm is {norm} at epoch {epoch}")));
            }
            opt.step(&mut ps);
        }
        loss_curve.push(epoch_loss / seen.max(1) as f64);
    }
    Ok(ClassifierTraining { params, loss_curve })
}

/// Fraction of (image, class) decisions where `score > 0` agrees with the label.
pub fn classification_accuracy(dataset: &Dataset, params: &ClassifierParams, split: Split) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in dataset.indices(split) {
        let v = dataset.weak(i);
        let scores = class_scores(&forward_cam(v.image, params)?, params.arch.window);
        for (s, &y) in scores.iter().zip(v.labels) {
            correct += ((*s > 0.0) == (y == 1)) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::SceneConfig;

    fn grid(h: usize, w: usize, v: &[f64]) -> ScoreMap {
        ScoreMap::new(h, w, v.to_vec())
    }

    #[test]
    fn single_interior_peak() {
        let mut v = vec![0.0; 25];
        v[2 * 5 + 3] = 1.0;
        assert_eq!(stimulate_peaks(&grid(5, 5, &v), 3), vec![(2, 3)]);
    }

    #[test]
    fn constant_grid_has_no_peaks() {
        assert!(stimulate_peaks(&grid(4, 4, &[0.3; 16]), 3).is_empty());
    }

    #[test]
    fn peaks_sorted_descending() {
        let mut v = vec![0.0; 36];
        v[0] = 0.5;
        v[5 * 6 + 5] = 0.9;
        let p = stimulate_peaks(&grid(6, 6, &v), 3);
        assert_eq!(p, vec![(5, 5), (0, 0)]);
        // r = 5 still separates them (distance 5 > 2).
        assert_eq!(stimulate_peaks(&grid(6, 6, &v), 5), vec![(5, 5), (0, 0)]);
    }

    #[test]
    fn peak_score_examples() {
        let m = grid(1, 3, &[0.7, 0.4, 0.6]);
        assert_eq!(peak_score(&m, &[(0, 0)]), 0.7);
        assert!((peak_score(&m, &[(0, 1), (0, 2)]) - 0.5).abs() < 1e-15);
        let flat = grid(3, 3, &[0.3; 9]);
        assert_eq!(peak_score(&flat, &stimulate_peaks(&flat, 3)), 0.3);
        assert_eq!(global_max_location(&flat), (0, 0));
    }

    #[test]
    fn loss_examples() {
        assert!((multilabel_loss(&[0.0], &[1]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((multilabel_loss(&[0.0, 0.0], &[1, 0]) - 0.693147).abs() < 1e-6);
        assert!(multilabel_loss(&[40.0, 40.0], &[1, 1]) < 1e-15);
        // Floor at 1e-12 caps each term at -ln(1e-12).
        assert!((multilabel_loss(&[-1000.0], &[1]) - 27.631021115928547).abs() < 1e-9);
        assert_eq!(multilabel_loss_grad(&[-1000.0], &[1]), vec![0.0]);
    }

    #[test]
    fn arch_validation() {
        assert!(ClassifierArch::new(4, 96, 96, 4).is_err());
        assert!(ClassifierArch::new(4, 96, 96, 1).is_err());
        assert!(ClassifierArch::new(4, 90, 96, 3).is_err());
        assert_eq!(ClassifierArch::new(4, 96, 96, 3).unwrap().map_size(), (12, 12));
    }

    #[test]
    fn cam_shape_and_determinism() {
        let arch = ClassifierArch::new(4, 96, 96, 3).unwrap();
        let params = ClassifierParams::init(arch, 1);
        let img = crate::scenes::generate_scene(&SceneConfig::default(), 0).unwrap().image;
        let a = forward_cam(&img, &params).unwrap();
        assert_eq!(a.shape(), (4, 12, 12));
        assert_eq!(a, forward_cam(&img, &params).unwrap());
        let wrong = Image::new(64, 64);
        assert!(matches!(forward_cam(&wrong, &params), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn zero_head_gives_zero_maps() {
        let arch = ClassifierArch::new(4, 96, 96, 3).unwrap();
        let mut params = ClassifierParams::init(arch, 1);
        params.head.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let img = crate::scenes::generate_scene(&SceneConfig::default(), 0).unwrap().image;
        let maps = forward_cam(&img, &params).unwrap();
        assert!(maps.maps.iter().all(|m| m.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = SceneConfig {
            num_train: 4,
            num_val: 0,
            ..SceneConfig::default()
        };
        let ds = Dataset::generate(&cfg).unwrap();
        let hyper = ClassifierHyper {
            epochs: 0,
            seed: 9,
            ..ClassifierHyper::default()
        };
        let trained = train_classifier(&ds, &hyper).unwrap();
        let init = ClassifierParams::init(trained.params.arch.clone(), 9);
        for ((_, a), (_, b)) in trained.params.named_params().iter().zip(init.named_params()) {
            assert_eq!(a.value, b.value);
        }
        assert!(trained.loss_curve.is_empty());
    }
}
