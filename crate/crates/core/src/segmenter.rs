//! Detect-then-segment model trained on pseudo masks.
//!
//! A compact two-stage design: a stride-4 conv backbone, RoI features
//! grid-sampled to 7x7, a shared fully connected trunk feeding a (C+1)-way
//! classifier and a class-agnostic box regressor, and a small conv mask head
//! that emits one 28x28 grid per class. The proposal gallery's boxes serve
//! as RoIs at training and test time.
//!
//! The objective is the unweighted sum `L_cls + L_box + L_mask`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierParams;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::mask::{bbox, iou, BinaryMask, Box};
use crate::nn::{
    clip_grad_norm, relu_backward, relu_inplace, roi_align_backward, roi_align_forward, upsample2_backward,
    upsample2_forward, Conv2d, ConvCache, Linear, Param, RoiAlignCache, Sgd, Tensor,
};
use crate::pseudo::{assign_proposals, locate_peaks, PseudoConfig, PseudoTarget};
use crate::rng::{self, Rng, STREAM_PSEUDO, STREAM_SEGMENTER_INIT, STREAM_SEGMENTER_ORDER};
use crate::scenes::{Image, Proposal};

pub const POOL_SIZE: usize = 7;
pub const MASK_SIZE: usize = 28;
const ROI_SAMPLING: usize = 2;
/// Largest log-scale change a decoded box may apply.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

// ---------------------------------------------------------------------------
// Targets and loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    /// 0 is background, otherwise a class id.
    pub label: usize,
    pub matched: Option<usize>,
    /// (dy, dx, dlog_h, dlog_w) towards the matched target box.
    pub deltas: Option<[f64; 4]>,
    /// Binary target on the `mask_size x mask_size` grid over the RoI.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoIAssignment {
    pub rois: Vec<RoiTarget>,
    pub mask_size: usize,
}

impl RoIAssignment {
    pub fn num_positive(&self) -> usize {
        self.rois.iter().filter(|r| r.label > 0).count()
    }

    /// Keeps only the RoIs at `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> RoIAssignment {
        RoIAssignment {
            rois: keep.iter().map(|&k| self.rois[k].clone()).collect(),
            mask_size: self.mask_size,
        }
    }
}

/// Box centre and size in continuous pixel coordinates.
fn box_geometry(b: &Box) -> (f64, f64, f64, f64) {
    let h = b.height() as f64;
    let w = b.width() as f64;
    (b.row_min as f64 + h / 2.0, b.col_min as f64 + w / 2.0, h, w)
}

pub fn encode_deltas(roi: &Box, target: &Box) -> [f64; 4] {
    let (py, px, ph, pw) = box_geometry(roi);
    let (gy, gx, gh, gw) = box_geometry(target);
    [(gy - py) / ph, (gx - px) / pw, (gh / ph).ln(), (gw / pw).ln()]
}

/// Applies deltas to `roi` and clips to a `height x width` image.
pub fn decode_deltas(roi: &Box, d: &[f64; 4], height: usize, width: usize) -> Box {
    let (py, px, ph, pw) = box_geometry(roi);
    let cy = py + d[0] * ph;
    let cx = px + d[1] * pw;
    let h = ph * d[2].min(MAX_LOG_SCALE).exp();
    let w = pw * d[3].min(MAX_LOG_SCALE).exp();
    let clip = |v: f64, hi: usize| v.round().clamp(0.0, (hi - 1) as f64) as usize;
    let r0 = clip(cy - h / 2.0, height);
    let c0 = clip(cx - w / 2.0, width);
    let r1 = clip(cy + h / 2.0 - 1.0, height).max(r0);
    let c1 = clip(cx + w / 2.0 - 1.0, width).max(c0);
    Box::new(r0, c0, r1, c1)
}

/// Samples `mask` at the centres of a `size x size` grid laid over `roi`.
pub fn crop_mask_target(mask: &BinaryMask, roi: &Box, size: usize) -> Vec<f64> {
    let bh = roi.height() as f64 / size as f64;
    let bw = roi.width() as f64 / size as f64;
    let mut out = vec![0.0; size * size];
    for a in 0..size {
        let r = (roi.row_min as f64 + (a as f64 + 0.5) * bh).floor() as usize;
        for b in 0..size {
            let c = (roi.col_min as f64 + (b as f64 + 0.5) * bw).floor() as usize;
            if r < mask.height() && c < mask.width() && mask.get(r, c) {
                out[a * size + b] = 1.0;
            }
        }
    }
    out
}

/// RoI is positive iff its best box IoU with a target is >= 0.5; ties go to
/// the lowest target index.
pub fn assign_rois(rois: &[Box], targets: &[PseudoTarget], mask_size: usize) -> RoIAssignment {
    assign_rois_with_threshold(rois, targets, mask_size, 0.5)
}

pub fn assign_rois_with_threshold(rois: &[Box], targets: &[PseudoTarget], mask_size: usize, positive_iou: f64) -> RoIAssignment {
    let rois = rois
        .iter()
        .map(|roi| {
            let mut best: Option<(usize, f64)> = None;
            for (t, target) in targets.iter().enumerate() {
                let q = roi.iou(&target.bbox);
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((t, q));
                }
            }
            match best {
                Some((t, q)) if q >= positive_iou => RoiTarget {
                    label: targets[t].class_id,
                    matched: Some(t),
                    deltas: Some(encode_deltas(roi, &targets[t].bbox)),
                    mask: Some(crop_mask_target(&targets[t].mask, roi, mask_size)),
                },
                _ => RoiTarget {
                    label: 0,
                    matched: None,
                    deltas: None,
                    mask: None,
                },
            }
        })
        .collect();
    RoIAssignment { rois, mask_size }
}

/// Raw head outputs for a set of RoIs, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub num_classes: usize,
    pub mask_size: usize,
    /// `n x (C+1)`, row per RoI.
    pub cls_logits: Vec<f64>,
    /// `n x 4`.
    pub box_deltas: Vec<f64>,
    /// One `C x M x M` block per *positive* RoI, in RoI order.
    pub mask_logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub total: f64,
}

/// Per-term gradients with respect to the matching head output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub cls_logits: Vec<f64>,
    pub box_deltas: Vec<f64>,
    pub mask_logits: Vec<f64>,
}

/// Transition point of the smooth-L1 box loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

fn smooth_l1(x: f64) -> (f64, f64) {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        (0.5 * x * x / SMOOTH_L1_BETA, x / SMOOTH_L1_BETA)
    } else {
        (a - 0.5 * SMOOTH_L1_BETA, x.signum())
    }
}

/// Binary cross-entropy on a logit, and its derivative.
fn bce_with_logit(x: f64, t: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    (loss, sig - t)
}

fn check_arity(out: &HeadOutputs, a: &RoIAssignment) {
    let n = a.rois.len();
    let k = out.num_classes + 1;
    assert_eq!(out.cls_logits.len(), n * k, "cls logits arity");
    assert_eq!(out.box_deltas.len(), n * 4, "box deltas arity");
    assert_eq!(
        out.mask_logits.len(),
        a.num_positive() * out.num_classes * a.mask_size * a.mask_size,
        "mask logits arity"
    );
}

pub fn segmentation_loss(out: &HeadOutputs, a: &RoIAssignment) -> LossBreakdown {
    segmentation_loss_with_grads(out, a).0
}

/// Mean cross-entropy over all RoIs, mean smooth-L1 (summed over the four
/// deltas) over positives, and mean per-pixel BCE on the matched class's
/// mask channel over positives.
pub fn segmentation_loss_with_grads(out: &HeadOutputs, a: &RoIAssignment) -> (LossBreakdown, LossGrads) {
    check_arity(out, a);
    let n = a.rois.len();
    let k = out.num_classes + 1;
    let m2 = a.mask_size * a.mask_size;
    let block = out.num_classes * m2;
    let npos = a.num_positive();

    let mut g_cls = vec![0.0; out.cls_logits.len()];
    let mut cls = 0.0;
    for (i, roi) in a.rois.iter().enumerate() {
        let row = &out.cls_logits[i * k..(i + 1) * k];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
        cls += lse - row[roi.label];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            g_cls[i * k + j] = (p - if j == roi.label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    if n > 0 {
        cls /= n as f64;
    }

    let mut g_box = vec![0.0; out.box_deltas.len()];
    let mut g_mask = vec![0.0; out.mask_logits.len()];
    let mut box_loss = 0.0;
    let mut mask_loss = 0.0;
    let mut p = 0usize;
    for (i, roi) in a.rois.iter().enumerate() {
        if roi.label == 0 {
            continue;
        }
        let d = roi.deltas.as_ref().expect("positive RoI carries deltas");
        for j in 0..4 {
            let (l, g) = smooth_l1(out.box_deltas[i * 4 + j] - d[j]);
            box_loss += l;
            g_box[i * 4 + j] = g / npos as f64;
        }
        let target = roi.mask.as_ref().expect("positive RoI carries a mask target");
        let start = p * block + (roi.label - 1) * m2;
        for (q, &t) in target.iter().enumerate() {
            let (l, g) = bce_with_logit(out.mask_logits[start + q], t);
            mask_loss += l;
            g_mask[start + q] = g / (npos * m2) as f64;
        }
        p += 1;
    }
    if npos > 0 {
        box_loss /= npos as f64;
        mask_loss /= (npos * m2) as f64;
    }
    (
        LossBreakdown {
            cls,
            bbox: box_loss,
            mask: mask_loss,
            total: cls + box_loss + mask_loss,
        },
        LossGrads {
            cls_logits: g_cls,
            box_deltas: g_box,
            mask_logits: g_mask,
        },
    )
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterArch {
    pub num_classes: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub backbone_channels: [usize; 3],
    pub fc_dim: usize,
    pub mask_channels: [usize; 2],
    pub pool_size: usize,
    pub mask_size: usize,
    pub stride: usize,
}

impl SegmenterArch {
    pub fn new(num_classes: usize, image_height: usize, image_width: usize) -> SegmenterArch {
        SegmenterArch {
            num_classes,
            image_height,
            image_width,
            backbone_channels: [16, 32, 32],
            fc_dim: 128,
            mask_channels: [16, 16],
            pool_size: POOL_SIZE,
            mask_size: MASK_SIZE,
            stride: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterParams {
    pub arch: SegmenterArch,
    pub backbone: Vec<Conv2d>,
    pub fc: Linear,
    pub cls: Linear,
    pub bbox: Linear,
    pub mask_convs: Vec<Conv2d>,
    pub mask_out: Conv2d,
}

struct BackboneTrace {
    caches: Vec<ConvCache>,
    activations: Vec<Tensor>,
}

struct BoxHeadTrace {
    pooled_cols: Vec<f32>,
    hidden: Vec<f32>,
    n: usize,
}

struct MaskHeadTrace {
    c1: ConvCache,
    a1: Tensor,
    c2: ConvCache,
    a2: Tensor,
    c3: ConvCache,
}

impl SegmenterParams {
    pub fn init(arch: SegmenterArch, seed: u64) -> SegmenterParams {
        let mut rng = rng::stream(seed, 0, STREAM_SEGMENTER_INIT);
        let bc = arch.backbone_channels;
        let backbone = vec![
            Conv2d::new(3, bc[0], 3, 2, &mut rng),
            Conv2d::new(bc[0], bc[1], 3, 2, &mut rng),
            Conv2d::new(bc[1], bc[2], 3, 1, &mut rng),
        ];
        let feat = bc[2] * arch.pool_size * arch.pool_size;
        let fc = Linear::new(feat, arch.fc_dim, &mut rng);
        let cls = Linear::new_small(arch.fc_dim, arch.num_classes + 1, 0.01, &mut rng);
        let bbox = Linear::new_small(arch.fc_dim, 4, 0.001, &mut rng);
        let mc = arch.mask_channels;
        let mask_convs = vec![Conv2d::new(bc[2], mc[0], 3, 1, &mut rng), Conv2d::new(mc[0], mc[1], 3, 1, &mut rng)];
        let mut mask_out = Conv2d::new(mc[1], arch.num_classes, 1, 1, &mut rng);
        mask_out.weight.value.iter_mut().for_each(|w| *w *= 0.1);
        SegmenterParams {
            arch,
            backbone,
            fc,
            cls,
            bbox,
            mask_convs,
            mask_out,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (k, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone{k}.weight"), &c.weight));
            out.push((format!("backbone{k}.bias"), &c.bias));
        }
        for (name, l) in [("fc", &self.fc), ("cls", &self.cls), ("bbox", &self.bbox)] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        for (k, c) in self.mask_convs.iter().enumerate() {
            out.push((format!("mask{k}.weight"), &c.weight));
            out.push((format!("mask{k}.bias"), &c.bias));
        }
        out.push(("mask_out.weight".into(), &self.mask_out.weight));
        out.push(("mask_out.bias".into(), &self.mask_out.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (k, c) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone{k}.weight"), &mut c.weight));
            out.push((format!("backbone{k}.bias"), &mut c.bias));
        }
        for (name, l) in [("fc", &mut self.fc), ("cls", &mut self.cls), ("bbox", &mut self.bbox)] {
            out.push((format!("{name}.weight"), &mut l.weight));
            out.push((format!("{name}.bias"), &mut l.bias));
        }
        for (k, c) in self.mask_convs.iter_mut().enumerate() {
            out.push((format!("mask{k}.weight"), &mut c.weight));
            out.push((format!("mask{k}.bias"), &mut c.bias));
        }
        out.push(("mask_out.weight".into(), &mut self.mask_out.weight));
        out.push(("mask_out.bias".into(), &mut self.mask_out.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    fn backbone_forward(&self, image: &Image) -> (Tensor, BackboneTrace) {
        let mut x = Tensor::zeros(3, 1, image.height, image.width);
        x.data.copy_from_slice(&image.data);
        let mut caches = Vec::new();
        let mut activations = Vec::new();
        for conv in &self.backbone {
            let (mut y, cache) = conv.forward(&x);
            relu_inplace(&mut y.data);
            caches.push(cache);
            activations.push(y.clone());
            x = y;
        }
        (x, BackboneTrace { caches, activations })
    }

    fn backbone_backward(&mut self, trace: &BackboneTrace, grad: Tensor) {
        let mut g = grad;
        for k in (0..self.backbone.len()).rev() {
            relu_backward(&trace.activations[k].data, &mut g.data);
            g = self.backbone[k].backward(&trace.caches[k], &g);
        }
    }

    fn pool(&self, feat: &Tensor, boxes: &[Box]) -> (Tensor, RoiAlignCache) {
        roi_align_forward(feat, boxes, self.arch.stride as f32, self.arch.pool_size, ROI_SAMPLING)
    }

    /// Returns (cls logits `(C+1) x n`, deltas `4 x n`), column per RoI.
    fn box_head_forward(&self, pooled: &Tensor) -> (Vec<f32>, Vec<f32>, BoxHeadTrace) {
        let n = pooled.n;
        let cols = pooled.to_columns();
        let mut hidden = self.fc.forward(&cols, n);
        relu_inplace(&mut hidden);
        let logits = self.cls.forward(&hidden, n);
        let deltas = self.bbox.forward(&hidden, n);
        (
            logits,
            deltas,
            BoxHeadTrace {
                pooled_cols: cols,
                hidden,
                n,
            },
        )
    }

    fn box_head_backward(&mut self, trace: &BoxHeadTrace, d_logits: &[f32], d_deltas: &[f32], pooled_shape: (usize, usize, usize, usize)) -> Tensor {
        let n = trace.n;
        let mut dh = self.cls.backward(&trace.hidden, n, d_logits);
        let dh2 = self.bbox.backward(&trace.hidden, n, d_deltas);
        dh.iter_mut().zip(&dh2).for_each(|(a, b)| *a += b);
        relu_backward(&trace.hidden, &mut dh);
        let dcols = self.fc.backward(&trace.pooled_cols, n, &dh);
        let (c, nn, h, w) = pooled_shape;
        Tensor::from_columns(&dcols, c, nn, h, w)
    }

    /// Mask logits, tensor `(C, n, M, M)`.
    fn mask_head_forward(&self, pooled: &Tensor) -> (Tensor, MaskHeadTrace) {
        let (mut a1, c1) = self.mask_convs[0].forward(pooled);
        relu_inplace(&mut a1.data);
        let u1 = upsample2_forward(&a1);
        let (mut a2, c2) = self.mask_convs[1].forward(&u1);
        relu_inplace(&mut a2.data);
        let u2 = upsample2_forward(&a2);
        let (logits, c3) = self.mask_out.forward(&u2);
        (logits, MaskHeadTrace { c1, a1, c2, a2, c3 })
    }

    fn mask_head_backward(&mut self, trace: &MaskHeadTrace, grad: &Tensor) -> Tensor {
        let du2 = self.mask_out.backward(&trace.c3, grad);
        let mut da2 = upsample2_backward(&du2, trace.a2.h, trace.a2.w);
        relu_backward(&trace.a2.data, &mut da2.data);
        let du1 = self.mask_convs[1].backward(&trace.c2, &da2);
        let mut da1 = upsample2_backward(&du1, trace.a1.h, trace.a1.w);
        relu_backward(&trace.a1.data, &mut da1.data);
        self.mask_convs[0].backward(&trace.c1, &da1)
    }
}

/// Transposes a `rows x n` column-per-sample matrix into `n x rows` f64.
fn columns_to_rows(x: &[f32], rows: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for i in 0..n {
            out[i * rows + r] = x[r * n + i] as f64;
        }
    }
    out
}

fn rows_to_columns(x: &[f64], rows: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for i in 0..n {
            out[r * n + i] = x[i * rows + r] as f32;
        }
    }
    out
}

/// `(C, n, M, M)` tensor to per-RoI `C x M x M` blocks.
fn mask_tensor_to_blocks(t: &Tensor) -> Vec<f64> {
    let m2 = t.h * t.w;
    let mut out = vec![0.0; t.c * t.n * m2];
    for c in 0..t.c {
        for i in 0..t.n {
            let src = t.idx(c, i, 0, 0);
            let dst = (i * t.c + c) * m2;
            for q in 0..m2 {
                out[dst + q] = t.data[src + q] as f64;
            }
        }
    }
    out
}

fn blocks_to_mask_tensor(b: &[f64], c: usize, n: usize, m: usize) -> Tensor {
    let mut t = Tensor::zeros(c, n, m, m);
    let m2 = m * m;
    for ch in 0..c {
        for i in 0..n {
            let dst = t.idx(ch, i, 0, 0);
            let src = (i * c + ch) * m2;
            for q in 0..m2 {
                t.data[dst + q] = b[src + q] as f32;
            }
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub rois_per_image: usize,
    pub max_positive: usize,
    pub positive_iou: f64,
    /// Extra jittered copies of each target box added to the RoI set.
    pub jitter_per_target: usize,
    pub grad_clip: f64,
    pub freeze_pseudo_masks: bool,
    pub seed: u64,
}

impl Default for SegmenterHyper {
    fn default() -> Self {
        SegmenterHyper {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            rois_per_image: 48,
            max_positive: 16,
            positive_iou: 0.5,
            jitter_per_target: 2,
            grad_clip: 10.0,
            freeze_pseudo_masks: false,
            seed: 0,
        }
    }
}

impl SegmenterHyper {
    /// The large-scale schedule (lr 0.00125, 50K iterations at 200 images).
    pub fn large_scale() -> Self {
        SegmenterHyper {
            lr: 0.00125,
            epochs: 250,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossCurves {
    pub cls: Vec<f64>,
    pub bbox: Vec<f64>,
    pub mask: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossCurves {
    fn push(&mut self, l: &LossBreakdown) {
        self.cls.push(l.cls);
        self.bbox.push(l.bbox);
        self.mask.push(l.mask);
        self.total.push(l.total);
    }
}

#[derive(Debug, Clone)]
pub struct SegmenterTraining {
    pub params: SegmenterParams,
    pub curves: LossCurves,
    /// Image visits skipped because no pseudo target survived.
    pub skipped_visits: usize,
    pub skipped_peaks: usize,
}

fn jitter_box(b: &Box, height: usize, width: usize, rng: &mut Rng) -> Box {
    let jit = |lo: usize, hi: usize, span: usize, limit: usize, rng: &mut Rng| {
        let s = span as f64 * 0.1;
        let a = (lo as f64 + rng.random_range(-s..=s)).round().clamp(0.0, (limit - 1) as f64) as usize;
        let b = (hi as f64 + rng.random_range(-s..=s)).round().clamp(0.0, (limit - 1) as f64) as usize;
        (a.min(b), a.max(b))
    };
    let (r0, r1) = jit(b.row_min, b.row_max, b.height(), height, rng);
    let (c0, c1) = jit(b.col_min, b.col_max, b.width(), width, rng);
    Box::new(r0, c0, r1, c1)
}

/// Tells the training loop how to obtain targets for an image visit.
enum TargetSource {
    Frozen(Vec<Vec<PseudoTarget>>),
    Resample(Vec<Vec<crate::classifier::Peak>>),
}

/// Trains the segmenter. Each visit to an image redraws its pseudo targets
/// unless `freeze_pseudo_masks` is set, in which case they are drawn once.
pub fn train_segmenter(
    dataset: &Dataset,
    classifier: &ClassifierParams,
    pseudo: &PseudoConfig,
    hyper: &SegmenterHyper,
) -> Result<SegmenterTraining> {
    let cfg = dataset.config();
    let arch = SegmenterArch::new(cfg.num_classes, cfg.height, cfg.width);
    let mut params = SegmenterParams::init(arch, hyper.seed);
    let opt = Sgd {
        lr: hyper.lr as f32,
        momentum: hyper.momentum as f32,
        weight_decay: hyper.weight_decay as f32,
    };
    let train: Vec<usize> = dataset.indices(Split::Train).collect();
    let stride = classifier.arch.stride;

    // Classifier weights are fixed, so peaks are computed once per image.
    let mut skipped_peaks = 0usize;
    let mut peaks = Vec::with_capacity(train.len());
    for &i in &train {
        peaks.push(locate_peaks(&dataset.weak(i), classifier, pseudo)?);
    }
    let source = if hyper.freeze_pseudo_masks {
        let mut frozen = Vec::with_capacity(train.len());
        for (slot, &i) in train.iter().enumerate() {
            let mut r = rng::stream(hyper.seed, i as u64, STREAM_PSEUDO);
            let out = assign_proposals(&peaks[slot], dataset.weak(i).proposals, stride, pseudo.selection, &mut r)?;
            skipped_peaks += out.skipped_peaks;
            frozen.push(out.targets);
        }
        TargetSource::Frozen(frozen)
    } else {
        TargetSource::Resample(peaks)
    };

    let mut rng = rng::stream(hyper.seed, 0, STREAM_SEGMENTER_ORDER);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = LossCurves::default();
    let mut skipped_visits = 0usize;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &slot in &order {
            let i = train[slot];
            let view = dataset.weak(i);
            let targets = match &source {
                TargetSource::Frozen(t) => t[slot].clone(),
                TargetSource::Resample(p) => {
                    let out = assign_proposals(&p[slot], view.proposals, stride, pseudo.selection, &mut rng)?;
                    skipped_peaks += out.skipped_peaks;
                    out.targets
                }
            };
            if targets.is_empty() {
                skipped_visits += 1;
                continue;
            }
            let loss = train_step(&mut params, &opt, view.image, view.proposals, &targets, hyper, &mut rng)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "segmenter loss is not finite at epoch {epoch}, image {}: {loss:?}",
                    view.image_id
                )));
            }
            curves.push(&loss);
        }
    }
    Ok(SegmenterTraining {
        params,
        curves,
        skipped_visits,
        skipped_peaks,
    })
}

fn train_step(
    params: &mut SegmenterParams,
    opt: &Sgd,
    image: &Image,
    proposals: &[Proposal],
    targets: &[PseudoTarget],
    hyper: &SegmenterHyper,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let (h, w) = (image.height, image.width);
    let mut rois: Vec<Box> = proposals.iter().map(|p| bbox(&p.mask)).collect::<Result<_>>()?;
    for t in targets {
        rois.push(t.bbox);
        for _ in 0..hyper.jitter_per_target {
            rois.push(jitter_box(&t.bbox, h, w, rng));
        }
    }
    let full = assign_rois_with_threshold(&rois, targets, params.arch.mask_size, hyper.positive_iou);
    let mut pos: Vec<usize> = (0..rois.len()).filter(|&k| full.rois[k].label > 0).collect();
    let mut neg: Vec<usize> = (0..rois.len()).filter(|&k| full.rois[k].label == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(hyper.max_positive);
    neg.truncate(hyper.rois_per_image.saturating_sub(pos.len()));
    let keep: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let assignment = full.select(&keep);
    let boxes: Vec<Box> = keep.iter().map(|&k| rois[k]).collect();
    let pos_boxes: Vec<Box> = pos.iter().map(|&k| rois[k]).collect();
    let n = boxes.len();
    let npos = pos_boxes.len();
    let c = params.arch.num_classes;
    let m = params.arch.mask_size;

    let (feat, btrace) = params.backbone_forward(image);
    let (pooled, pcache) = params.pool(&feat, &boxes);
    let (logits, deltas, htrace) = params.box_head_forward(&pooled);
    let (mask_logits, mtrace, pos_cache, pos_shape) = if npos > 0 {
        let (pp, pc) = params.pool(&feat, &pos_boxes);
        let shape = (pp.c, pp.n, pp.h, pp.w);
        let (ml, mt) = params.mask_head_forward(&pp);
        (Some(ml), Some(mt), Some(pc), Some(shape))
    } else {
        (None, None, None, None)
    };

    let outputs = HeadOutputs {
        num_classes: c,
        mask_size: m,
        cls_logits: columns_to_rows(&logits, c + 1, n),
        box_deltas: columns_to_rows(&deltas, 4, n),
        mask_logits: mask_logits.as_ref().map(mask_tensor_to_blocks).unwrap_or_default(),
    };
    let (loss, grads) = segmentation_loss_with_grads(&outputs, &assignment);
    if !loss.total.is_finite() {
        return Ok(loss);
    }

    let d_logits = rows_to_columns(&grads.cls_logits, c + 1, n);
    let d_deltas = rows_to_columns(&grads.box_deltas, 4, n);
    let d_pooled = params.box_head_backward(&htrace, &d_logits, &d_deltas, (pooled.c, pooled.n, pooled.h, pooled.w));
    let mut d_feat = roi_align_backward(&pcache, &d_pooled);
    if let (Some(mt), Some(pc), Some(_)) = (mtrace, pos_cache, pos_shape) {
        let gm = blocks_to_mask_tensor(&grads.mask_logits, c, npos, m);
        let d_pp = params.mask_head_backward(&mt, &gm);
        let d2 = roi_align_backward(&pc, &d_pp);
        d_feat.data.iter_mut().zip(&d2.data).for_each(|(a, b)| *a += b);
    }
    params.backbone_backward(&btrace, d_feat);

    let mut ps = params.params_mut();
    let norm = clip_grad_norm(&mut ps, hyper.grad_clip as f32);
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("segmenter gradient norm is {norm}")));
    }
    opt.step(&mut ps);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
    pub bbox: Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub score_min: f64,
    pub nms_iou: f64,
    pub mask_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_min: 0.5,
            nms_iou: 0.5,
            mask_threshold: 0.5,
            max_detections: 50,
        }
    }
}

/// Resamples an `M x M` probability grid over `roi` to full resolution and
/// thresholds it.
pub fn paste_mask(probs: &[f64], m: usize, roi: &Box, height: usize, width: usize, threshold: f64) -> BinaryMask {
    let mut out = BinaryMask::new(height, width).expect("positive image size");
    let sy = m as f64 / roi.height() as f64;
    let sx = m as f64 / roi.width() as f64;
    let at = |a: usize, b: usize| probs[a * m + b];
    for r in roi.row_min..=roi.row_max.min(height - 1) {
        let gy = ((r - roi.row_min) as f64 + 0.5) * sy - 0.5;
        let gy = gy.clamp(0.0, (m - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(m - 1);
        let ly = gy - y0 as f64;
        for c in roi.col_min..=roi.col_max.min(width - 1) {
            let gx = ((c - roi.col_min) as f64 + 0.5) * sx - 0.5;
            let gx = gx.clamp(0.0, (m - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(m - 1);
            let lx = gx - x0 as f64;
            let v = (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1))
                + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1));
            if v >= threshold {
                out.set(r, c, true);
            }
        }
    }
    out
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Greedy per-class suppression: drops any prediction whose box IoU with
/// an already kept same-class prediction exceeds `threshold`. Input must be
/// sorted by score descending.
pub fn nms(preds: Vec<Prediction>, threshold: f64) -> Vec<Prediction> {
    let mut kept: Vec<Prediction> = Vec::new();
    for p in preds {
        if kept.iter().all(|k| k.class_id != p.class_id || k.bbox.iou(&p.bbox) <= threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Scores every proposal box as an RoI and returns the surviving detections
/// sorted by score, descending.
pub fn predict(model: &SegmenterParams, image: &Image, proposals: &[Proposal], cfg: &InferenceConfig) -> Result<Vec<Prediction>> {
    if image.height != model.arch.image_height || image.width != model.arch.image_width {
        return Err(Error::DimensionMismatch("image size differs from the segmenter's".into()));
    }
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (image.height, image.width);
    let c = model.arch.num_classes;
    let m = model.arch.mask_size;
    let rois: Vec<Box> = proposals.iter().map(|p| bbox(&p.mask)).collect::<Result<_>>()?;
    let (feat, _) = model.backbone_forward(image);
    let (pooled, _) = model.pool(&feat, &rois);
    let (logits, deltas, _) = model.box_head_forward(&pooled);
    let n = rois.len();
    let logits = columns_to_rows(&logits, c + 1, n);
    let deltas = columns_to_rows(&deltas, 4, n);

    // (score, roi index, class, refined box)
    let mut cands: Vec<(f64, usize, usize, Box)> = Vec::new();
    for i in 0..n {
        let p = softmax(&logits[i * (c + 1)..(i + 1) * (c + 1)]);
        let (mut best, mut score) = (1usize, p[1]);
        for (k, &pk) in p.iter().enumerate().skip(2) {
            if pk > score {
                best = k;
                score = pk;
            }
        }
        if score >= cfg.score_min {
            let d = [deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]];
            cands.push((score, i, best, decode_deltas(&rois[i], &d, h, w)));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cands.truncate(cfg.max_detections.max(1) * 2);
    if cands.is_empty() {
        return Ok(Vec::new());
    }

    let boxes: Vec<Box> = cands.iter().map(|c| c.3).collect();
    let (mp, _) = model.pool(&feat, &boxes);
    let (ml, _) = model.mask_head_forward(&mp);
    let blocks = mask_tensor_to_blocks(&ml);
    let m2 = m * m;
    let mut preds = Vec::with_capacity(cands.len());
    for (k, &(score, _, class_id, roi)) in cands.iter().enumerate() {
        let start = (k * c + class_id - 1) * m2;
        let probs: Vec<f64> = blocks[start..start + m2].iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let mask = paste_mask(&probs, m, &roi, h, w, cfg.mask_threshold);
        if let Ok(b) = bbox(&mask) {
            preds.push(Prediction {
                class_id,
                score,
                mask,
                bbox: b,
            });
        }
    }
    let mut kept = nms(preds, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

/// Replaces each predicted mask with the gallery proposal of highest
/// Jaccard similarity (lowest index on ties). Predictions with no
/// overlapping proposal keep their mask.
pub fn refine_predictions(preds: &[Prediction], proposals: &[Proposal]) -> Result<Vec<Prediction>> {
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (k, prop) in proposals.iter().enumerate() {
                let q = iou(&p.mask, &prop.mask)?;
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((k, q));
                }
            }
            Ok(match best {
                Some((k, q)) if q > 0.0 => {
                    let mask = proposals[k].mask.clone();
                    Prediction {
                        class_id: p.class_id,
                        score: p.score,
                        bbox: bbox(&mask)?,
                        mask,
                    }
                }
                _ => p.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Peak;

    fn target(class_id: usize, b: Box) -> PseudoTarget {
        let mask = BinaryMask::from_fn(32, 32, |r, c| b.contains(r, c)).unwrap();
        PseudoTarget {
            class_id,
            mask,
            bbox: b,
            source_peak: Peak {
                class_id,
                row: 0,
                col: 0,
                value: 1.0,
            },
            proposal_index: 0,
            objectness: 1.0,
        }
    }

    #[test]
    fn assignment_rules() {
        let t = [target(3, Box::new(0, 0, 1, 3))];
        let a = assign_rois(&[Box::new(0, 0, 1, 3), Box::new(10, 10, 12, 12), Box::new(0, 0, 1, 1)], &t, 4);
        assert_eq!(a.rois[0].label, 3);
        assert_eq!(a.rois[0].matched, Some(0));
        assert_eq!(a.rois[0].deltas, Some([0.0; 4]));
        assert_eq!(a.rois[1].label, 0);
        assert!(a.rois[1].deltas.is_none() && a.rois[1].mask.is_none());
        // IoU exactly 4/8 is positive.
        assert_eq!(a.rois[2].label, 3);
    }

    #[test]
    fn assignment_ties_go_to_lowest_index() {
        let t = [target(1, Box::new(0, 0, 3, 3)), target(2, Box::new(0, 0, 3, 3))];
        let a = assign_rois(&[Box::new(0, 0, 3, 3)], &t, 4);
        assert_eq!(a.rois[0].matched, Some(0));
        assert_eq!(a.rois[0].label, 1);
    }

    #[test]
    fn delta_round_trip() {
        let roi = Box::new(10, 20, 29, 35);
        let gt = Box::new(12, 18, 40, 33);
        let d = encode_deltas(&roi, &gt);
        assert_eq!(decode_deltas(&roi, &d, 96, 96), gt);
    }

    fn outputs(n: usize, npos: usize, c: usize, m: usize) -> HeadOutputs {
        HeadOutputs {
            num_classes: c,
            mask_size: m,
            cls_logits: vec![0.0; n * (c + 1)],
            box_deltas: vec![0.0; n * 4],
            mask_logits: vec![0.0; npos * c * m * m],
        }
    }

    #[test]
    fn uniform_logits_single_positive() {
        let t = [target(2, Box::new(0, 0, 3, 3))];
        let a = assign_rois(&[Box::new(0, 0, 3, 3)], &t, 2);
        let out = outputs(1, 1, 4, 2);
        let l = segmentation_loss(&out, &a);
        assert!((l.cls - 5f64.ln()).abs() < 1e-12);
        assert!((l.cls - 1.60944).abs() < 1e-5);
        assert_eq!(l.bbox, 0.0);
        assert!((l.mask - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.total, l.cls + l.bbox + l.mask);
    }

    #[test]
    fn background_only_batch() {
        let a = assign_rois(&[Box::new(0, 0, 3, 3), Box::new(5, 5, 9, 9)], &[], 2);
        let mut out = outputs(2, 0, 3, 2);
        let l = segmentation_loss(&out, &a);
        assert_eq!((l.bbox, l.mask), (0.0, 0.0));
        assert!(l.cls > 0.0);
        out.cls_logits = vec![50.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 0.0];
        assert!(segmentation_loss(&out, &a).cls < 1e-20);
    }

    #[test]
    fn perfect_predictions_near_zero() {
        let t = [target(1, Box::new(0, 0, 7, 7))];
        let roi = Box::new(0, 0, 8, 8);
        let a = assign_rois(&[roi], &t, 4);
        let d = a.rois[0].deltas.unwrap();
        let tm = a.rois[0].mask.clone().unwrap();
        let c = 2;
        let mut out = outputs(1, 1, c, 4);
        out.cls_logits = vec![-40.0, 40.0, -40.0];
        out.box_deltas = d.to_vec();
        for (q, &t) in tm.iter().enumerate() {
            out.mask_logits[q] = if t > 0.5 { 40.0 } else { -40.0 };
        }
        assert!(segmentation_loss(&out, &a).total < 1e-12);
    }

    fn pred(class_id: usize, score: f64, b: Box) -> Prediction {
        let mask = BinaryMask::from_fn(32, 32, |r, c| b.contains(r, c)).unwrap();
        Prediction { class_id, score, mask, bbox: b }
    }

    #[test]
    fn nms_drops_duplicates() {
        let p = vec![pred(1, 0.9, Box::new(0, 0, 9, 9)), pred(1, 0.8, Box::new(0, 0, 9, 9)), pred(2, 0.7, Box::new(0, 0, 9, 9))];
        let kept = nms(p, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].class_id, 2);
    }

    #[test]
    fn paste_full_grid_fills_box() {
        let probs = vec![1.0; 16];
        let m = paste_mask(&probs, 4, &Box::new(3, 4, 10, 6), 16, 16, 0.5);
        assert_eq!(bbox(&m).unwrap(), Box::new(3, 4, 10, 6));
        assert_eq!(m.area(), 8 * 3);
    }

    #[test]
    fn crop_target_of_full_box() {
        let t = target(1, Box::new(4, 4, 11, 11));
        assert!(crop_mask_target(&t.mask, &Box::new(4, 4, 11, 11), 8).iter().all(|&v| v == 1.0));
        let half = crop_mask_target(&t.mask, &Box::new(4, 0, 11, 7), 8);
        assert_eq!(half.iter().sum::<f64>(), 32.0);
    }

    #[test]
    fn refinement_cases() {
        let props: Vec<Proposal> = [Box::new(0, 0, 9, 9), Box::new(2, 2, 11, 11), Box::new(20, 20, 25, 25)]
            .iter()
            .map(|b| Proposal {
                mask: BinaryMask::from_fn(32, 32, |r, c| b.contains(r, c)).unwrap(),
                objectness: 0.5,
            })
            .collect();
        // Identical to a proposal: unchanged.
        let p = pred(1, 0.9, Box::new(0, 0, 9, 9));
        assert_eq!(refine_predictions(&[p.clone()], &props).unwrap()[0], p);
        // Disjoint from all: unchanged.
        let far = pred(2, 0.4, Box::new(28, 0, 31, 3));
        assert_eq!(refine_predictions(&[far.clone()], &props).unwrap()[0], far);
        // Empty gallery: unchanged.
        assert_eq!(refine_predictions(&[p.clone()], &[]).unwrap()[0], p);
        // Picks the higher Jaccard one and recomputes the box.
        let q = pred(3, 0.5, Box::new(2, 2, 10, 10));
        let r = refine_predictions(&[q], &props).unwrap();
        assert_eq!(r[0].bbox, Box::new(2, 2, 11, 11));
        assert_eq!((r[0].class_id, r[0].score), (3, 0.5));
    }

    #[test]
    fn untrained_model_with_high_threshold_predicts_nothing() {
        let cfg = crate::scenes::SceneConfig::default();
        let rec = crate::scenes::generate_scene(&cfg, 0).unwrap();
        let model = SegmenterParams::init(SegmenterArch::new(4, 96, 96), 0);
        let ic = InferenceConfig {
            score_min: 1.1,
            ..InferenceConfig::default()
        };
        assert!(predict(&model, &rec.image, &rec.proposals, &ic).unwrap().is_empty());
    }

    #[test]
    fn duplicate_rois_yield_one_prediction() {
        let cfg = crate::scenes::SceneConfig::default();
        let rec = crate::scenes::generate_scene(&cfg, 0).unwrap();
        let model = SegmenterParams::init(SegmenterArch::new(4, 96, 96), 0);
        let dup = vec![rec.proposals[0].clone(); 5];
        let ic = InferenceConfig {
            score_min: 0.0,
            mask_threshold: 0.0,
            ..InferenceConfig::default()
        };
        let preds = predict(&model, &rec.image, &dup, &ic).unwrap();
        assert_eq!(preds.len(), 1);
    }
}
