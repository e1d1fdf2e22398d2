//! Mask AP at several IoU thresholds, average best overlap, count error and
//! breakdowns by object size and objects per image.
//!
//! Matching is greedy per image and class: predictions in descending score
//! order each claim the unclaimed ground truth of highest mask IoU at or
//! above the threshold. AP integrates the all-point interpolated
//! precision-recall curve. Reductions run over a fixed ordering (class,
//! score descending, image id, prediction index) so results are
//! reproducible bit for bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{iou, BinaryMask};

pub const THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq)]
pub struct GtMask {
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredMask {
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: String,
    pub gts: Vec<GtMask>,
    pub preds: Vec<PredMask>,
}

/// Half-open pixel-area range used to restrict evaluation to a size bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub min: f64,
    pub max: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        min: 0.0,
        max: f64::INFINITY,
    };

    pub fn contains(&self, area: usize) -> bool {
        let a = area as f64;
        a >= self.min && a < self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub image: usize,
    pub pred: usize,
    pub class_id: usize,
    pub score: f64,
    pub tp: bool,
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub num_classes: usize,
    pub threshold: f64,
    /// Sorted by class, then score descending, then image id, then index.
    pub records: Vec<MatchRecord>,
    /// GT count per class, index `class_id - 1`.
    pub gt_counts: Vec<usize>,
}

fn check_classes(images: &[EvalImage], num_classes: usize) -> Result<()> {
    for img in images {
        let gt = img.gts.iter().map(|g| g.class_id);
        let pr = img.preds.iter().map(|p| p.class_id);
        for c in gt.chain(pr) {
            if c == 0 || c > num_classes {
                return Err(Error::ClassOutOfRange { class_id: c, num_classes });
            }
        }
    }
    Ok(())
}

fn by_score(preds: &[PredMask]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Outcome of greedy matching for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Tp(usize),
    Fp,
    /// Excluded from the PR curve (size-restricted evaluation only).
    Ignored,
}

/// Greedy matching within one image. GTs whose area is outside `range` are
/// ignored: a prediction claiming one is ignored too, and so is an
/// unmatched prediction whose own area is outside `range`.
pub fn match_image(preds: &[PredMask], gts: &[GtMask], threshold: f64, range: AreaRange) -> Result<Vec<MatchOutcome>> {
    let mut out = vec![MatchOutcome::Fp; preds.len()];
    let mut claimed = vec![false; gts.len()];
    let ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.mask.area())).collect();
    for p in by_score(preds) {
        let pred = &preds[p];
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] || gt.class_id != pred.class_id {
                continue;
            }
            let q = iou(&pred.mask, &gt.mask)?;
            if q < threshold {
                continue;
            }
            let slot = &mut best[ignored[g] as usize];
            if slot.is_none_or(|(_, bq)| q > bq) {
                *slot = Some((g, q));
            }
        }
        out[p] = match best {
            [Some((g, _)), _] => {
                claimed[g] = true;
                MatchOutcome::Tp(g)
            }
            [None, Some((g, _))] => {
                claimed[g] = true;
                MatchOutcome::Ignored
            }
            [None, None] if !range.contains(pred.mask.area()) => MatchOutcome::Ignored,
            [None, None] => MatchOutcome::Fp,
        };
    }
    Ok(out)
}

pub fn match_predictions(images: &[EvalImage], num_classes: usize, threshold: f64) -> Result<Matching> {
    match_predictions_in_range(images, num_classes, threshold, AreaRange::ALL)
}

pub fn match_predictions_in_range(images: &[EvalImage], num_classes: usize, threshold: f64, range: AreaRange) -> Result<Matching> {
    check_classes(images, num_classes)?;
    let mut records = Vec::new();
    let mut gt_counts = vec![0usize; num_classes];
    for (i, img) in images.iter().enumerate() {
        for g in &img.gts {
            if range.contains(g.mask.area()) {
                gt_counts[g.class_id - 1] += 1;
            }
        }
        for (p, outcome) in match_image(&img.preds, &img.gts, threshold, range)?.into_iter().enumerate() {
            let (tp, gt) = match outcome {
                MatchOutcome::Tp(g) => (true, Some(g)),
                MatchOutcome::Fp => (false, None),
                MatchOutcome::Ignored => continue,
            };
            records.push(MatchRecord {
                image: i,
                pred: p,
                class_id: img.preds[p].class_id,
                score: img.preds[p].score,
                tp,
                gt,
            });
        }
    }
    records.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(b.score.total_cmp(&a.score))
            .then_with(|| images[a.image].image_id.cmp(&images[b.image].image_id))
            .then(a.pred.cmp(&b.pred))
    });
    Ok(Matching {
        num_classes,
        threshold,
        records,
        gt_counts,
    })
}

/// All-point interpolated AP of a ranked TP/FP list against `num_gt`.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let curve = pr_points(ranked_tp, num_gt);
    let mut prec: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in curve.iter().enumerate() {
        ap += (recall - prev_recall) * prec[k];
        prev_recall = recall;
    }
    ap
}

/// (recall, precision) after each ranked prediction.
pub fn pr_points(ranked_tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            tp += t as usize;
            (tp as f64 / num_gt.max(1) as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

impl Matching {
    pub fn ranked(&self, class_id: usize) -> Vec<bool> {
        self.records.iter().filter(|r| r.class_id == class_id).map(|r| r.tp).collect()
    }

    /// None when the class has no ground truth.
    pub fn class_ap(&self, class_id: usize) -> Option<f64> {
        let n = self.gt_counts[class_id - 1];
        (n > 0).then(|| average_precision(&self.ranked(class_id), n))
    }

    /// Mean AP over classes with ground truth; None if there are none.
    pub fn map(&self) -> Option<f64> {
        let aps: Vec<f64> = (1..=self.num_classes).filter_map(|c| self.class_ap(c)).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    pub fn true_positives(&self) -> usize {
        self.records.iter().filter(|r| r.tp).count()
    }
}

/// mAP at each of `thresholds`.
pub fn map_at(images: &[EvalImage], num_classes: usize, thresholds: &[f64]) -> Result<Vec<Option<f64>>> {
    thresholds
        .iter()
        .map(|&t| Ok(match_predictions(images, num_classes, t)?.map()))
        .collect()
}

/// Per-class average best overlap (None for classes without GT) and their mean.
pub fn abo(images: &[EvalImage], num_classes: usize) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    check_classes(images, num_classes)?;
    let mut sum = vec![0.0; num_classes];
    let mut count = vec![0usize; num_classes];
    for img in images {
        for g in &img.gts {
            let mut best = 0.0f64;
            for p in img.preds.iter().filter(|p| p.class_id == g.class_id) {
                best = best.max(iou(&g.mask, &p.mask)?);
            }
            sum[g.class_id - 1] += best;
            count[g.class_id - 1] += 1;
        }
    }
    let per: Vec<Option<f64>> = sum.iter().zip(&count).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok((per, mean))
}

/// Mean |#preds with score >= threshold - #GT| over (image, class) cells
/// that are non-empty on at least one side. None if every cell is empty.
pub fn count_mae(images: &[EvalImage], num_classes: usize, score_threshold: f64) -> Result<Option<f64>> {
    check_classes(images, num_classes)?;
    let mut total = 0.0;
    let mut cells = 0usize;
    for img in images {
        for c in 1..=num_classes {
            let g = img.gts.iter().filter(|g| g.class_id == c).count();
            let p = img.preds.iter().filter(|p| p.class_id == c && p.score >= score_threshold).count();
            if g + p > 0 {
                total += (p as f64 - g as f64).abs();
                cells += 1;
            }
        }
    }
    Ok((cells > 0).then(|| total / cells as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub name: String,
    pub num_gt: usize,
    pub num_images: usize,
    pub map50: Option<f64>,
}

/// Size bins as fractions of image area: small < 1%, medium 1-10%, large > 10%.
pub fn size_bins(image_area: usize) -> [(&'static str, AreaRange); 3] {
    let a = image_area as f64;
    // Large is strictly above 10%: nudge the boundary past it.
    let ten = (0.10 * a).floor() + 1.0;
    [
        ("small", AreaRange { min: 0.0, max: 0.01 * a }),
        ("medium", AreaRange { min: 0.01 * a, max: ten }),
        ("large", AreaRange { min: ten, max: f64::INFINITY }),
    ]
}

pub const COUNT_BINS: [(&str, usize, usize); 3] = [("1", 1, 1), ("2-4", 2, 4), (">=5", 5, usize::MAX)];

pub fn size_breakdown(images: &[EvalImage], num_classes: usize, image_area: usize) -> Result<Vec<BinRow>> {
    size_bins(image_area)
        .iter()
        .map(|&(name, range)| {
            let m = match_predictions_in_range(images, num_classes, 0.5, range)?;
            Ok(BinRow {
                name: name.to_string(),
                num_gt: m.gt_counts.iter().sum(),
                num_images: images.iter().filter(|i| i.gts.iter().any(|g| range.contains(g.mask.area()))).count(),
                map50: m.map(),
            })
        })
        .collect()
}

pub fn count_breakdown(images: &[EvalImage], num_classes: usize) -> Result<Vec<BinRow>> {
    COUNT_BINS
        .iter()
        .map(|&(name, lo, hi)| {
            let subset: Vec<EvalImage> = images
                .iter()
                .filter(|i| (lo..=hi).contains(&i.gts.len()))
                .cloned()
                .collect();
            let m = match_predictions(&subset, num_classes, 0.5)?;
            Ok(BinRow {
                name: name.to_string(),
                num_gt: m.gt_counts.iter().sum(),
                num_images: subset.len(),
                map50: m.map(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_pred: usize,
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub abo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub matching: String,
    pub interpolation: String,
    pub abo_averaging: String,
    pub count_mae_cells: String,
    pub count_score_threshold: f64,
}

impl Protocol {
    pub fn new(count_score_threshold: f64) -> Protocol {
        Protocol {
            matching: "greedy by score, per image and class, highest mask IoU".into(),
            interpolation: "all-point".into(),
            abo_averaging: "per class, then mean over classes with ground truth".into(),
            count_mae_cells: "(image, class) cells non-empty on either side".into(),
            count_score_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub split: String,
    pub config_hash: String,
    pub num_images: usize,
    pub protocol: Protocol,
    pub map25: Option<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    pub abo: Option<f64>,
    pub count_mae: Option<f64>,
    pub per_class: Vec<ClassRow>,
    pub size_bins: Vec<BinRow>,
    pub count_bins: Vec<BinRow>,
}

pub struct EvalOptions<'a> {
    pub stage: &'a str,
    pub split: &'a str,
    pub config_hash: &'a str,
    pub num_classes: usize,
    pub image_area: usize,
    pub count_score_threshold: f64,
}

pub fn evaluate(images: &[EvalImage], opts: &EvalOptions<'_>) -> Result<EvalReport> {
    let c = opts.num_classes;
    let matchings: Vec<Matching> = THRESHOLDS
        .iter()
        .map(|&t| match_predictions(images, c, t))
        .collect::<Result<_>>()?;
    let (abo_per, abo_mean) = abo(images, c)?;
    let per_class = (1..=c)
        .map(|k| ClassRow {
            class_id: k,
            num_gt: matchings[0].gt_counts[k - 1],
            num_pred: images.iter().map(|i| i.preds.iter().filter(|p| p.class_id == k).count()).sum(),
            ap25: matchings[0].class_ap(k),
            ap50: matchings[1].class_ap(k),
            ap75: matchings[2].class_ap(k),
            abo: abo_per[k - 1],
        })
        .collect();
    Ok(EvalReport {
        stage: opts.stage.to_string(),
        split: opts.split.to_string(),
        config_hash: opts.config_hash.to_string(),
        num_images: images.len(),
        protocol: Protocol::new(opts.count_score_threshold),
        map25: matchings[0].map(),
        map50: matchings[1].map(),
        map75: matchings[2].map(),
        abo: abo_mean,
        count_mae: count_mae(images, c, opts.count_score_threshold)?,
        per_class,
        size_bins: size_breakdown(images, c, opts.image_area)?,
        count_bins: count_breakdown(images, c)?,
    })
}

/// Per-class rows, one column per metric; empty cells for undefined values.
pub fn tables_csv(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("stage,split,class,num_gt,num_pred,ap25,ap50,ap75,abo\n");
    for r in reports {
        for row in &r.per_class {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.stage,
                r.split,
                row.class_id,
                row.num_gt,
                row.num_pred,
                fmt(row.ap25),
                fmt(row.ap50),
                fmt(row.ap75),
                fmt(row.abo)
            ));
        }
        s.push_str(&format!(
            "{},{},mean,{},{},{},{},{},{}\n",
            r.stage,
            r.split,
            r.per_class.iter().map(|x| x.num_gt).sum::<usize>(),
            r.per_class.iter().map(|x| x.num_pred).sum::<usize>(),
            fmt(r.map25),
            fmt(r.map50),
            fmt(r.map75),
            fmt(r.abo)
        ));
    }
    s
}

/// Orders predictions by descending score, stable on ties.
pub fn sort_by_score(preds: &mut [PredMask]) {
    preds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(r0: usize, c0: usize, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(20, 20, |r, c| r >= r0 && r < r0 + h && c >= c0 && c < c0 + w).unwrap()
    }

    fn gt(c: usize, m: BinaryMask) -> GtMask {
        GtMask { class_id: c, mask: m }
    }

    fn pr(c: usize, s: f64, m: BinaryMask) -> PredMask {
        PredMask {
            class_id: c,
            score: s,
            mask: m,
        }
    }

    fn img(id: &str, gts: Vec<GtMask>, preds: Vec<PredMask>) -> EvalImage {
        EvalImage {
            image_id: id.into(),
            gts,
            preds,
        }
    }

    #[test]
    fn identical_predictions_are_all_tp() {
        let g = vec![gt(1, rect(0, 0, 4, 4)), gt(2, rect(10, 10, 5, 5))];
        let p = vec![pr(1, 0.9, rect(0, 0, 4, 4)), pr(2, 0.8, rect(10, 10, 5, 5))];
        let out = match_image(&p, &g, 0.5, AreaRange::ALL).unwrap();
        assert_eq!(out, vec![MatchOutcome::Tp(0), MatchOutcome::Tp(1)]);
        let ims = [img("a", g, p)];
        assert_eq!(map_at(&ims, 2, &THRESHOLDS).unwrap(), vec![Some(1.0); 3]);
        assert_eq!(abo(&ims, 2).unwrap().1, Some(1.0));
        assert_eq!(count_mae(&ims, 2, 0.5).unwrap(), Some(0.0));
    }

    #[test]
    fn no_predictions() {
        let ims = [img("a", vec![gt(1, rect(0, 0, 4, 4))], vec![])];
        let m = match_predictions(&ims, 1, 0.5).unwrap();
        assert_eq!(m.true_positives(), 0);
        assert_eq!(m.map(), Some(0.0));
        assert_eq!(abo(&ims, 1).unwrap().1, Some(0.0));
    }

    #[test]
    fn duplicate_prediction_is_fp() {
        let g = vec![gt(1, rect(0, 0, 4, 4))];
        let p = vec![pr(1, 0.6, rect(0, 0, 4, 4)), pr(1, 0.9, rect(0, 0, 4, 3))];
        let out = match_image(&p, &g, 0.5, AreaRange::ALL).unwrap();
        assert_eq!(out, vec![MatchOutcome::Fp, MatchOutcome::Tp(0)]);
    }

    #[test]
    fn hand_ap_cases() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, false], 1), 0.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert_eq!(average_precision(&[], 0), 0.0);
    }

    #[test]
    fn abo_single_gt() {
        // IoU of a 5x5 GT with a 3x5 prediction inside it is 0.6.
        let ims = [img("a", vec![gt(1, rect(0, 0, 5, 5))], vec![pr(1, 0.1, rect(0, 0, 3, 5))])];
        assert!((abo(&ims, 1).unwrap().1.unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn count_cells() {
        let g = vec![gt(1, rect(0, 0, 2, 2)); 4];
        let p = vec![pr(1, 0.9, rect(0, 0, 2, 2)), pr(1, 0.9, rect(0, 0, 2, 2)), pr(1, 0.1, rect(0, 0, 2, 2))];
        assert_eq!(count_mae(&[img("a", g.clone(), p)], 3, 0.5).unwrap(), Some(2.0));
        assert_eq!(count_mae(&[img("a", g, vec![])], 3, 0.5).unwrap(), Some(4.0));
        assert_eq!(count_mae(&[img("a", vec![], vec![])], 3, 0.5).unwrap(), None);
    }

    #[test]
    fn unknown_class_errors() {
        let ims = [img("a", vec![gt(5, rect(0, 0, 2, 2))], vec![])];
        assert!(matches!(map_at(&ims, 4, &[0.5]), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn size_bins_partition_gt() {
        // 20x20 image: small < 4 px, medium 4..=40, large > 40.
        let g = vec![gt(1, rect(0, 0, 1, 3)), gt(1, rect(5, 5, 4, 10)), gt(2, rect(10, 0, 5, 9)), gt(2, rect(16, 16, 2, 2))];
        let ims = [img("a", g, vec![])];
        let rows = size_breakdown(&ims, 2, 400).unwrap();
        assert_eq!(rows.iter().map(|r| r.num_gt).collect::<Vec<_>>(), vec![1, 2, 1]);
    }

    #[test]
    fn all_large_perfect() {
        let g = vec![gt(1, rect(0, 0, 10, 10))];
        let p = vec![pr(1, 0.9, rect(0, 0, 10, 10))];
        let rows = size_breakdown(&[img("a", g, p)], 1, 400).unwrap();
        assert_eq!(rows[0].map50, None);
        assert_eq!(rows[1].map50, None);
        assert_eq!(rows[2].map50, Some(1.0));
    }

    #[test]
    fn unpredicted_small_objects() {
        let large_only = img("a", vec![gt(1, rect(0, 0, 10, 10))], vec![pr(1, 0.9, rect(0, 0, 10, 9))]);
        let mixed = img(
            "b",
            vec![gt(1, rect(0, 0, 10, 10)), gt(2, rect(15, 15, 1, 2))],
            vec![pr(1, 0.9, rect(0, 0, 10, 9))],
        );
        let rows = size_breakdown(&[mixed], 2, 400).unwrap();
        assert_eq!(rows[0].map50, Some(0.0));
        let reference = match_predictions(&[large_only], 2, 0.5).unwrap().map();
        assert_eq!(rows[2].map50, reference);
    }

    #[test]
    fn count_bins_route_images() {
        let one = img("a", vec![gt(1, rect(0, 0, 3, 3))], vec![pr(1, 0.9, rect(0, 0, 3, 3))]);
        let three = img("b", vec![gt(1, rect(0, 0, 3, 3)); 3], vec![]);
        let rows = count_breakdown(&[one, three], 1).unwrap();
        assert_eq!(rows[0].map50, Some(1.0));
        assert_eq!(rows[1].map50, Some(0.0));
        assert_eq!(rows[2].map50, None);
        assert_eq!(rows[1].num_gt, 3);
    }

    #[test]
    fn tp_fp_monotonicity() {
        let base = [true, false, true];
        let ap = average_precision(&base, 4);
        assert!(average_precision(&[true, false, true, true], 4) >= ap);
        assert!(average_precision(&[true, false, true, false], 4) <= ap);
    }
}
