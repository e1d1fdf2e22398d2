//! Pseudo instance masks from peaks and the proposal gallery.
//!
//! For every class present in the image-level labels, the classifier's
//! peaks above `tau * max(M^c)` (at most K per class) are mapped to image
//! pixels. Each peak draws one proposal among those covering its pixel with
//! probability `b_k / sum_j b_j` and labels it with the peak's class.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::{forward_cam, stimulate_peaks, ClassifierParams, Peak};
use crate::dataset::WeakView;
use crate::error::{Error, Result};
use crate::mask::{bbox, BinaryMask, Box};
use crate::rng::Rng;
use crate::scenes::Proposal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Objectness-weighted random draw.
    Sample,
    /// Highest objectness among the candidates (ablation).
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    /// Keep peaks with value >= tau * max of the class map.
    pub peak_fraction: f64,
    pub max_peaks_per_class: usize,
    pub selection: Selection,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            peak_fraction: 0.5,
            max_peaks_per_class: 8,
            selection: Selection::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTarget {
    pub class_id: usize,
    pub mask: BinaryMask,
    pub bbox: Box,
    pub source_peak: Peak,
    /// Index of the chosen proposal in the image's gallery.
    pub proposal_index: usize,
    pub objectness: f64,
}

/// Image pixel at the centre of a peak's map cell.
pub fn peak_pixel(peak: &Peak, stride: usize) -> (usize, usize) {
    (peak.row * stride + stride / 2, peak.col * stride + stride / 2)
}

/// Indices of the proposals whose mask contains the peak's pixel.
pub fn candidate_proposals(peak: &Peak, stride: usize, proposals: &[Proposal]) -> Vec<usize> {
    let (r, c) = peak_pixel(peak, stride);
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| r < p.mask.height() && c < p.mask.width() && p.mask.get(r, c))
        .map(|(k, _)| k)
        .collect()
}

/// Selection probabilities `b_k / sum_j b_j`; uniform if every weight is zero.
pub fn selection_probabilities(objectness: &[f64]) -> Vec<f64> {
    let total: f64 = objectness.iter().map(|b| b.max(0.0)).sum();
    if total > 0.0 {
        objectness.iter().map(|b| b.max(0.0) / total).collect()
    } else {
        vec![1.0 / objectness.len() as f64; objectness.len()]
    }
}

/// Draws an index into `candidates` with probability proportional to
/// objectness.
pub fn sample_proposal(candidates: &[&Proposal], rng: &mut Rng) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let weights: Vec<f64> = candidates.iter().map(|p| p.objectness.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(rng.random_range(0..candidates.len()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(k);
        }
    }
    // Rounding left u past the last boundary.
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap())
}

fn argmax_proposal(candidates: &[&Proposal]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0;
    for (k, p) in candidates.iter().enumerate() {
        if p.objectness > candidates[best].objectness {
            best = k;
        }
    }
    Ok(best)
}

/// Peaks kept for pseudo-labelling: only classes with `y_c = 1`.
pub fn locate_peaks(view: &WeakView<'_>, classifier: &ClassifierParams, cfg: &PseudoConfig) -> Result<Vec<Peak>> {
    let maps = forward_cam(view.image, classifier)?;
    let mut out = Vec::new();
    for (c0, map) in maps.maps.iter().enumerate() {
        if view.labels.get(c0).copied() != Some(1) {
            continue;
        }
        let threshold = cfg.peak_fraction * map.max();
        out.extend(
            stimulate_peaks(map, classifier.arch.window)
                .into_iter()
                .filter(|&(i, j)| map.get(i, j) >= threshold)
                .take(cfg.max_peaks_per_class)
                .map(|(row, col)| Peak {
                    class_id: c0 + 1,
                    row,
                    col,
                    value: map.get(row, col),
                }),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoOutcome {
    pub targets: Vec<PseudoTarget>,
    /// Peaks dropped because no proposal covered them.
    pub skipped_peaks: usize,
}

/// Turns located peaks into targets by drawing one covering proposal each.
pub fn assign_proposals(
    peaks: &[Peak],
    proposals: &[Proposal],
    stride: usize,
    selection: Selection,
    rng: &mut Rng,
) -> Result<PseudoOutcome> {
    let mut out = PseudoOutcome::default();
    for peak in peaks {
        let idx = candidate_proposals(peak, stride, proposals);
        if idx.is_empty() {
            out.skipped_peaks += 1;
            continue;
        }
        let cands: Vec<&Proposal> = idx.iter().map(|&k| &proposals[k]).collect();
        let pick = match selection {
            Selection::Sample => sample_proposal(&cands, rng)?,
            Selection::Argmax => argmax_proposal(&cands)?,
        };
        let chosen = cands[pick];
        out.targets.push(PseudoTarget {
            class_id: peak.class_id,
            bbox: bbox(&chosen.mask)?,
            mask: chosen.mask.clone(),
            source_peak: *peak,
            proposal_index: idx[pick],
            objectness: chosen.objectness,
        });
    }
    Ok(out)
}

/// One pass of the target-building loop for a single image.
pub fn build_pseudo_targets(
    view: &WeakView<'_>,
    classifier: &ClassifierParams,
    cfg: &PseudoConfig,
    rng: &mut Rng,
) -> Result<PseudoOutcome> {
    let peaks = locate_peaks(view, classifier, cfg)?;
    assign_proposals(&peaks, view.proposals, classifier.arch.stride, cfg.selection, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn square(r0: usize, c0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(32, 32, |r, c| r >= r0 && r < r0 + side && c >= c0 && c < c0 + side).unwrap()
    }

    fn peak(row: usize, col: usize) -> Peak {
        Peak {
            class_id: 2,
            row,
            col,
            value: 1.0,
        }
    }

    #[test]
    fn candidates_by_containment() {
        // Peak (1,1) at stride 8 maps to pixel (12,12).
        let props = vec![
            Proposal { mask: square(8, 8, 8), objectness: 0.5 },
            Proposal { mask: square(0, 0, 6), objectness: 0.5 },
            Proposal { mask: square(10, 10, 10), objectness: 0.5 },
        ];
        assert_eq!(peak_pixel(&peak(1, 1), 8), (12, 12));
        assert_eq!(candidate_proposals(&peak(1, 1), 8, &props), vec![0, 2]);
        assert_eq!(candidate_proposals(&peak(0, 0), 8, &props), vec![1]);
        assert!(candidate_proposals(&peak(3, 3), 8, &props).is_empty());
    }

    #[test]
    fn probabilities_follow_objectness() {
        assert_eq!(selection_probabilities(&[1.0; 4]), vec![0.25; 4]);
        assert_eq!(selection_probabilities(&[3.0, 1.0]), vec![0.75, 0.25]);
        assert_eq!(selection_probabilities(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn sampling_errors_on_empty() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(sample_proposal(&[], &mut rng), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn sampling_frequency_three_to_one() {
        let a = Proposal { mask: square(0, 0, 2), objectness: 3.0 };
        let b = Proposal { mask: square(0, 0, 2), objectness: 1.0 };
        let cands = [&a, &b];
        let mut rng = Rng::seed_from_u64(42);
        let n = 100_000;
        let hits = (0..n).filter(|_| sample_proposal(&cands, &mut rng).unwrap() == 0).count();
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let a = Proposal { mask: square(0, 0, 2), objectness: 0.0 };
        let cands = [&a, &a];
        let mut rng = Rng::seed_from_u64(1);
        let hits = (0..10_000).filter(|_| sample_proposal(&cands, &mut rng).unwrap() == 0).count();
        assert!((4_500..5_500).contains(&hits));
    }

    #[test]
    fn single_candidate_target() {
        let props = vec![Proposal { mask: square(8, 8, 8), objectness: 0.4 }];
        let mut rng = Rng::seed_from_u64(3);
        let out = assign_proposals(&[peak(1, 1)], &props, 8, Selection::Sample, &mut rng).unwrap();
        assert_eq!(out.targets.len(), 1);
        assert_eq!(out.targets[0].class_id, 2);
        assert_eq!(out.targets[0].mask, props[0].mask);
        assert_eq!(out.targets[0].bbox, Box::new(8, 8, 15, 15));
        let skipped = assign_proposals(&[peak(3, 3)], &props, 8, Selection::Sample, &mut rng).unwrap();
        assert!(skipped.targets.is_empty());
        assert_eq!(skipped.skipped_peaks, 1);
    }

    #[test]
    fn argmax_ablation() {
        let props = vec![
            Proposal { mask: square(8, 8, 8), objectness: 0.2 },
            Proposal { mask: square(10, 10, 8), objectness: 0.9 },
        ];
        let mut rng = Rng::seed_from_u64(3);
        let out = assign_proposals(&[peak(1, 1)], &props, 8, Selection::Argmax, &mut rng).unwrap();
        assert_eq!(out.targets[0].proposal_index, 1);
    }
}
