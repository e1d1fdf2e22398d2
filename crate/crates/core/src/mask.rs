//! Binary masks, uncompressed run-length encoding and the geometric
//! primitives (IoU, bounding box, area) shared by every stage.
//!
//! Masks are stored row-major in memory. The RLE form scans column-major
//! and starts with a background run, the convention used by most
//! annotation tooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single object's pixel support on a fixed `height x width` grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("area", &self.area())
            .finish()
    }
}

/// Inclusive pixel-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl Box {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Self {
        debug_assert!(row_min <= row_max && col_min <= col_max);
        Box {
            row_min,
            col_min,
            row_max,
            col_max,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    /// Pixel-count IoU of two inclusive boxes.
    pub fn iou(&self, other: &Box) -> f64 {
        let r0 = self.row_min.max(other.row_min);
        let c0 = self.col_min.max(other.col_min);
        let r1 = self.row_max.min(other.row_max);
        let c1 = self.col_max.min(other.col_max);
        if r0 > r1 || c0 > c1 {
            return 0.0;
        }
        let inter = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        inter / (self.area() as f64 + other.area() as f64 - inter)
    }
}

/// On-disk RLE object: `{"size": [H, W], "counts": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        let mut m = Self::new(height, width)?;
        m.bits.iter_mut().for_each(|b| *b = true);
        Ok(m)
    }

    /// Builds a mask from row-major bits.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} bits cannot form a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut m = Self::new(height, width)?;
        for r in 0..height {
            for c in 0..width {
                m.bits[r * width + c] = f(r, c);
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        area(self)
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.check_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    /// `self` with every pixel of `other` cleared.
    pub fn subtract(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect();
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits,
        })
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool> {
        self.check_shape(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    /// Morphological dilation with a (2*radius+1) square structuring element.
    pub fn dilate(&self, radius: usize) -> BinaryMask {
        self.morph(radius, true)
    }

    /// Morphological erosion with a (2*radius+1) square structuring element.
    /// Pixels outside the grid count as background.
    pub fn erode(&self, radius: usize) -> BinaryMask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> BinaryMask {
        let (h, w) = (self.height as isize, self.width as isize);
        let rad = radius as isize;
        // Separable: rows then columns.
        let pass = |src: &[bool], horizontal: bool| -> Vec<bool> {
            let mut out = vec![false; src.len()];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = !dilate;
                    for d in -rad..=rad {
                        let (rr, cc) = if horizontal { (r, c + d) } else { (r + d, c) };
                        let v = if rr < 0 || cc < 0 || rr >= h || cc >= w {
                            false
                        } else {
                            src[(rr * w + cc) as usize]
                        };
                        if dilate {
                            acc |= v;
                        } else {
                            acc &= v;
                        }
                    }
                    out[(r * w + c) as usize] = acc;
                }
            }
            out
        };
        let tmp = pass(&self.bits, true);
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: pass(&tmp, false),
        }
    }

    /// Shifts the support by (drow, dcol); pixels leaving the grid are dropped.
    pub fn translate(&self, drow: isize, dcol: isize) -> BinaryMask {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = vec![false; self.bits.len()];
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = (r - drow, c - dcol);
                if sr >= 0 && sc >= 0 && sr < h && sc < w && self.bits[(sr * w + sc) as usize] {
                    out[(r * w + c) as usize] = true;
                }
            }
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: out,
        }
    }

    pub fn to_rle(&self) -> Rle {
        Rle {
            size: [self.height, self.width],
            counts: rle_encode(self),
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        rle_decode(&rle.counts, rle.size[0], rle.size[1])
    }
}

/// Alternating background/foreground run lengths in column-major order,
/// starting with a (possibly zero) background run.
pub fn rle_encode(mask: &BinaryMask) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for c in 0..mask.width {
        for r in 0..mask.height {
            let v = mask.get(r, c);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[u32], height: usize, width: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(height, width)?;
    let expected = (height * width) as u64;
    let sum: u64 = counts.iter().map(|&c| c as u64).sum();
    if sum != expected {
        return Err(Error::MalformedRle {
            sum,
            expected,
            height,
            width,
        });
    }
    let mut idx = 0usize;
    for (k, &run) in counts.iter().enumerate() {
        let fg = k % 2 == 1;
        for _ in 0..run {
            if fg {
                let (c, r) = (idx / height, idx % height);
                mask.set(r, c, true);
            }
            idx += 1;
        }
    }
    Ok(mask)
}

/// Jaccard index `|a ∩ b| / |a ∪ b|`; two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_shape(b)?;
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    })
}

/// Tightest inclusive box around the foreground.
pub fn bbox(mask: &BinaryMask) -> Result<Box> {
    let mut found: Option<Box> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                found = Some(match found {
                    None => Box::new(r, c, r, c),
                    Some(b) => Box {
                        row_min: b.row_min.min(r),
                        col_min: b.col_min.min(c),
                        row_max: b.row_max.max(r),
                        col_max: b.col_max.max(c),
                    },
                });
            }
        }
    }
    found.ok_or(Error::EmptyMask)
}

pub fn area(mask: &BinaryMask) -> usize {
    mask.bits.iter().filter(|&&b| b).count()
}
