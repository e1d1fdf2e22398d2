//! Minimal CPU training engine: the handful of layers the classifier and the
//! segmenter need, each with an explicit forward and backward pass.
//!
//! Activations use a channel-major `[c][n][h][w]` layout so a batched
//! convolution is a single GEMM over im2col columns.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::mask::Box;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Per-sample feature columns: returns a `(c*h*w) x n` row-major matrix.
    pub fn to_columns(&self) -> Vec<f32> {
        let p = self.plane();
        let k = self.c * p;
        let mut out = vec![0.0; k * self.n];
        for c in 0..self.c {
            for b in 0..self.n {
                let src = &self.data[(c * self.n + b) * p..(c * self.n + b + 1) * p];
                for (i, &v) in src.iter().enumerate() {
                    out[(c * p + i) * self.n + b] = v;
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor::to_columns`].
    pub fn from_columns(cols: &[f32], c: usize, n: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(c, n, h, w);
        let p = h * w;
        for ch in 0..c {
            for b in 0..n {
                for i in 0..p {
                    t.data[(ch * n + b) * p + i] = cols[(ch * p + i) * n + b];
                }
            }
        }
        t
    }
}

/// A trainable array with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    momentum: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Param {
        let n = value.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        Param {
            shape,
            value,
            grad: vec![0.0; n],
            momentum: vec![0.0; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Param {
        let n = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }

    /// He-normal initialisation for a layer with `fan_in` inputs.
    pub fn he(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Param {
        let n = shape.iter().product();
        let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        Param::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn small(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Param {
        let n = shape.iter().product();
        Param::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0) * std).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `c = beta * c + op(a) * op(b)`, with `op` selected by the transpose flags.
/// `a` is `m x k` after op, `b` is `k x n`, all buffers row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], trans_a: bool, b: &[f32], trans_b: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element addressed by these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
}

pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Conv2d {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::he(vec![out_ch, in_ch, kernel, kernel], fan_in, rng),
            bias: Param::zeros(vec![out_ch]),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = self.out_size(x.h, x.w);
        let k = self.kernel;
        let cols_n = x.n * oh * ow;
        let mut cols = vec![0.0f32; self.in_ch * k * k * cols_n];
        for ci in 0..self.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for b in 0..x.n {
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = x.idx(ci, b, iy as usize, 0);
                            let dst_row = (b * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    dst[dst_row + ox] = x.data[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (cols, oh, ow) = self.im2col(x);
        let kk = self.in_ch * self.kernel * self.kernel;
        let n = x.n * oh * ow;
        let mut out = Tensor::zeros(self.out_ch, x.n, oh, ow);
        for (o, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(self.out_ch, kk, n, &self.weight.value, false, &cols, false, 1.0, &mut out.data);
        (
            out,
            ConvCache {
                cols,
                in_shape: (x.c, x.n, x.h, x.w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Tensor) -> Tensor {
        let kk = self.in_ch * self.kernel * self.kernel;
        let (c, nb, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let n = nb * oh * ow;
        gemm(self.out_ch, n, kk, &grad_out.data, false, &cache.cols, true, 1.0, &mut self.weight.grad);
        for (o, chunk) in grad_out.data.chunks(n).enumerate() {
            self.bias.grad[o] += chunk.iter().sum::<f32>();
        }
        let mut dcols = vec![0.0f32; kk * n];
        gemm(kk, self.out_ch, n, &self.weight.value, true, &grad_out.data, false, 0.0, &mut dcols);
        // col2im
        let mut dx = Tensor::zeros(c, nb, h, w);
        let k = self.kernel;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &dcols[row * n..(row + 1) * n];
                    for b in 0..nb {
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = dx.idx(ci, b, iy as usize, 0);
                            let src_row = (b * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx.data[dst_row + ix as usize] += src[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer over column-stacked samples (`in x n` -> `out x n`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Linear {
        Linear {
            in_dim,
            out_dim,
            weight: Param::he(vec![out_dim, in_dim], in_dim, rng),
            bias: Param::zeros(vec![out_dim]),
        }
    }

    /// Small uniform initialisation, used for prediction layers.
    pub fn new_small(in_dim: usize, out_dim: usize, std: f32, rng: &mut Rng) -> Linear {
        Linear {
            in_dim,
            out_dim,
            weight: Param::small(vec![out_dim, in_dim], std, rng),
            bias: Param::zeros(vec![out_dim]),
        }
    }

    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let mut y = vec![0.0f32; self.out_dim * n];
        for (o, row) in y.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(self.out_dim, self.in_dim, n, &self.weight.value, false, x, false, 1.0, &mut y);
        y
    }

    pub fn backward(&mut self, x: &[f32], n: usize, dy: &[f32]) -> Vec<f32> {
        gemm(self.out_dim, n, self.in_dim, dy, false, x, true, 1.0, &mut self.weight.grad);
        for (o, row) in dy.chunks(n).enumerate() {
            self.bias.grad[o] += row.iter().sum::<f32>();
        }
        let mut dx = vec![0.0f32; self.in_dim * n];
        gemm(self.in_dim, self.out_dim, n, &self.weight.value, true, dy, false, 0.0, &mut dx);
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the (post-activation) output was not positive.
pub fn relu_backward(output: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

fn upsample_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = (src - i0 as f32).clamp(0.0, 1.0);
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

/// Bilinear 2x upsampling (half-pixel centres).
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let ty = upsample_taps(x.h, oh);
    let tx = upsample_taps(x.w, ow);
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    for c in 0..x.c {
        for b in 0..x.n {
            let base_in = x.idx(c, b, 0, 0);
            let base_out = out.idx(c, b, 0, 0);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = wy0 * (wx0 * x.data[base_in + y0 * x.w + x0] + wx1 * x.data[base_in + y0 * x.w + x1])
                        + wy1 * (wx0 * x.data[base_in + y1 * x.w + x0] + wx1 * x.data[base_in + y1 * x.w + x1]);
                    out.data[base_out + oy * ow + ox] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let ty = upsample_taps(in_h, grad_out.h);
    let tx = upsample_taps(in_w, grad_out.w);
    let mut dx = Tensor::zeros(grad_out.c, grad_out.n, in_h, in_w);
    for c in 0..grad_out.c {
        for b in 0..grad_out.n {
            let base_in = dx.idx(c, b, 0, 0);
            let base_out = grad_out.idx(c, b, 0, 0);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = grad_out.data[base_out + oy * grad_out.w + ox];
                    dx.data[base_in + y0 * in_w + x0] += g * wy0 * wx0;
                    dx.data[base_in + y0 * in_w + x1] += g * wy0 * wx1;
                    dx.data[base_in + y1 * in_w + x0] += g * wy1 * wx0;
                    dx.data[base_in + y1 * in_w + x1] += g * wy1 * wx1;
                }
            }
        }
    }
    dx
}

/// Bilinear taps of every output bin, shared by all channels.
pub struct RoiAlignCache {
    taps: Vec<Vec<(usize, f32)>>,
    feat_shape: (usize, usize, usize),
}

/// Grid-sampled RoI pooling: each of the `size x size` bins averages
/// `sampling^2` bilinear samples of the stride-`stride` feature map.
pub fn roi_align_forward(feat: &Tensor, boxes: &[Box], stride: f32, size: usize, sampling: usize) -> (Tensor, RoiAlignCache) {
    assert_eq!(feat.n, 1);
    let (fh, fw) = (feat.h, feat.w);
    let mut taps = Vec::with_capacity(boxes.len() * size * size);
    for b in boxes {
        let y0 = b.row_min as f32;
        let x0 = b.col_min as f32;
        let bh = b.height() as f32 / size as f32;
        let bw = b.width() as f32 / size as f32;
        for by in 0..size {
            for bx in 0..size {
                let mut bin: Vec<(usize, f32)> = Vec::with_capacity(4 * sampling * sampling);
                let norm = 1.0 / (sampling * sampling) as f32;
                for sy in 0..sampling {
                    for sx in 0..sampling {
                        let py = y0 + (by as f32 + (sy as f32 + 0.5) / sampling as f32) * bh;
                        let px = x0 + (bx as f32 + (sx as f32 + 0.5) / sampling as f32) * bw;
                        let fy = py / stride - 0.5;
                        let fx = px / stride - 0.5;
                        if fy < -1.0 || fy > fh as f32 || fx < -1.0 || fx > fw as f32 {
                            continue;
                        }
                        let fy = fy.clamp(0.0, (fh - 1) as f32);
                        let fx = fx.clamp(0.0, (fw - 1) as f32);
                        let iy0 = fy.floor() as usize;
                        let ix0 = fx.floor() as usize;
                        let iy1 = (iy0 + 1).min(fh - 1);
                        let ix1 = (ix0 + 1).min(fw - 1);
                        let ly = fy - iy0 as f32;
                        let lx = fx - ix0 as f32;
                        bin.push((iy0 * fw + ix0, (1.0 - ly) * (1.0 - lx) * norm));
                        bin.push((iy0 * fw + ix1, (1.0 - ly) * lx * norm));
                        bin.push((iy1 * fw + ix0, ly * (1.0 - lx) * norm));
                        bin.push((iy1 * fw + ix1, ly * lx * norm));
                    }
                }
                taps.push(bin);
            }
        }
    }
    let n = boxes.len();
    let mut out = Tensor::zeros(feat.c, n, size, size);
    let p = fh * fw;
    for c in 0..feat.c {
        let plane = &feat.data[c * p..(c + 1) * p];
        let dst = &mut out.data[c * n * size * size..(c + 1) * n * size * size];
        for (slot, bin) in dst.iter_mut().zip(&taps) {
            *slot = bin.iter().map(|&(i, w)| plane[i] * w).sum();
        }
    }
    (
        out,
        RoiAlignCache {
            taps,
            feat_shape: (feat.c, fh, fw),
        },
    )
}

pub fn roi_align_backward(cache: &RoiAlignCache, grad_out: &Tensor) -> Tensor {
    let (c, fh, fw) = cache.feat_shape;
    let mut dx = Tensor::zeros(c, 1, fh, fw);
    let p = fh * fw;
    let per_c = grad_out.n * grad_out.h * grad_out.w;
    for ch in 0..c {
        let src = &grad_out.data[ch * per_c..(ch + 1) * per_c];
        let plane = &mut dx.data[ch * p..(ch + 1) * p];
        for (&g, bin) in src.iter().zip(&cache.taps) {
            if g != 0.0 {
                for &(i, w) in bin {
                    plane[i] += g * w;
                }
            }
        }
    }
    dx
}

/// Plain SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn step(&self, params: &mut [&mut Param]) {
        for p in params.iter_mut() {
            let Param {
                value, grad, momentum, ..
            } = &mut **p;
            for ((w, g), m) in value.iter_mut().zip(grad.iter_mut()).zip(momentum.iter_mut()) {
                let d = *g + self.weight_decay * *w;
                *m = self.momentum * *m + d;
                *w -= self.lr * *m;
                *g = 0.0;
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| (*g as f64) * (*g as f64))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(11)
    }

    fn rand_tensor(c: usize, n: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(c, n, h, w);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        t
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng();
        let conv = Conv2d::new(2, 3, 3, 2, &mut r);
        let x = rand_tensor(2, 2, 7, 6, &mut r);
        let (y, _) = conv.forward(&x);
        let (oh, ow) = conv.out_size(7, 6);
        assert_eq!((y.h, y.w), (oh, ow));
        for o in 0..3 {
            for b in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy >= 0 && ix >= 0 && iy < 7 && ix < 6 {
                                        acc += conv.weight.value[((o * 2 + ci) * 3 + ki) * 3 + kj]
                                            * x.data[x.idx(ci, b, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                        assert!((acc - y.data[y.idx(o, b, oy, ox)]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    // Backward passes are checked through the adjoint identity
    // <dy, J dx> == <J^T dy, dx> for linear maps.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut r = rng();
        let mut conv = Conv2d::new(3, 4, 3, 1, &mut r);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let x = rand_tensor(3, 2, 5, 5, &mut r);
        let (y, cache) = conv.forward(&x);
        let dy = rand_tensor(4, 2, y.h, y.w, &mut r);
        let dx = conv.backward(&cache, &dy);
        assert!((dot(&y.data, &dy.data) - dot(&x.data, &dx.data)).abs() < 1e-3);
        // Weight gradient: y is linear in the weights too.
        assert!((dot(&y.data, &dy.data) - dot(&conv.weight.value, &conv.weight.grad)).abs() < 1e-3);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut r = rng();
        let x = rand_tensor(2, 3, 4, 5, &mut r);
        let y = upsample2_forward(&x);
        let dy = rand_tensor(2, 3, 8, 10, &mut r);
        let dx = upsample2_backward(&dy, 4, 5);
        assert!((dot(&y.data, &dy.data) - dot(&x.data, &dx.data)).abs() < 1e-4);
    }

    #[test]
    fn upsample_constant_is_constant() {
        let mut x = Tensor::zeros(1, 1, 3, 3);
        x.data.iter_mut().for_each(|v| *v = 2.5);
        assert!(upsample2_forward(&x).data.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn roi_align_backward_is_adjoint() {
        let mut r = rng();
        let feat = rand_tensor(3, 1, 12, 12, &mut r);
        let boxes = [Box::new(0, 0, 47, 47), Box::new(10, 5, 30, 20), Box::new(40, 40, 47, 47)];
        let (y, cache) = roi_align_forward(&feat, &boxes, 4.0, 7, 2);
        let dy = rand_tensor(3, 3, 7, 7, &mut r);
        let dx = roi_align_backward(&cache, &dy);
        assert!((dot(&y.data, &dy.data) - dot(&feat.data, &dx.data)).abs() < 1e-4);
    }

    #[test]
    fn roi_align_of_constant_map() {
        let mut feat = Tensor::zeros(1, 1, 8, 8);
        feat.data.iter_mut().for_each(|v| *v = 1.0);
        let (y, _) = roi_align_forward(&feat, &[Box::new(4, 4, 20, 20)], 4.0, 7, 2);
        assert!(y.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn linear_backward_is_adjoint() {
        let mut r = rng();
        let mut lin = Linear::new(6, 4, &mut r);
        let x: Vec<f32> = (0..18).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = lin.forward(&x, 3);
        let dy: Vec<f32> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let dx = lin.backward(&x, 3, &dy);
        let yb: f64 = dot(&y, &dy) - dy.chunks(3).enumerate().map(|(o, row)| row.iter().sum::<f32>() as f64 * lin.bias.value[o] as f64).sum::<f64>();
        assert!((yb - dot(&x, &dx)).abs() < 1e-4);
    }

    #[test]
    fn columns_round_trip() {
        let mut r = rng();
        let t = rand_tensor(3, 4, 2, 5, &mut r);
        assert_eq!(Tensor::from_columns(&t.to_columns(), 3, 4, 2, 5), t);
    }

    #[test]
    fn sgd_descends_quadratic() {
        let mut p = Param::new(vec![1], vec![5.0]);
        let opt = Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        for _ in 0..300 {
            p.grad[0] = 2.0 * p.value[0];
            opt.step(&mut [&mut p]);
        }
        assert!(p.value[0].abs() < 1e-3);
    }
}
