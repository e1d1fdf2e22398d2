//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;

use peakseg::classifier::ScoreMap;
use peakseg::mask::{iou, BinaryMask};
use peakseg::metrics::{EvalImage, GtMask, PredMask};

/// Every cell whose value beats all others in its clipped window.
pub fn peaks_by_window_scan(map: &ScoreMap, r: usize) -> Vec<(usize, usize)> {
    let half = (r / 2) as isize;
    let mut out = Vec::new();
    for i in 0..map.height {
        for j in 0..map.width {
            let v = map.get(i, j);
            let mut strict = true;
            for di in -half..=half {
                for dj in -half..=half {
                    let (a, b) = (i as isize + di, j as isize + dj);
                    if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= map.height as isize || b >= map.width as isize {
                        continue;
                    }
                    if map.get(a as usize, b as usize) >= v {
                        strict = false;
                    }
                }
            }
            if strict {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| r >= r0 && r < r0 + rh && c >= c0 && c < c0 + rw).unwrap()
}

/// Best one-to-one assignment by exhaustive search: most matches, then the
/// lexicographically best TP pattern in score order. Returns TP flags in
/// the input order of `preds`.
pub fn brute_force_match(preds: &[PredMask], gts: &[GtMask], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let ok: Vec<Vec<bool>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| g.class_id == p.class_id && iou(&p.mask, &g.mask).unwrap() >= thr)
                .collect()
        })
        .collect();
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut used = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    fn rec(
        k: usize,
        order: &[usize],
        ok: &[Vec<bool>],
        used: &mut Vec<bool>,
        flags: &mut Vec<bool>,
        best: &mut Option<(usize, Vec<bool>)>,
    ) {
        if k == order.len() {
            let n = flags.iter().filter(|&&f| f).count();
            let pattern: Vec<bool> = order.iter().map(|&p| flags[p]).collect();
            let better = match best {
                None => true,
                Some((bn, bp)) => {
                    let bpat: Vec<bool> = order.iter().map(|&p| bp[p]).collect();
                    n > *bn || (n == *bn && pattern > bpat)
                }
            };
            if better {
                *best = Some((n, flags.clone()));
            }
            return;
        }
        let p = order[k];
        rec(k + 1, order, ok, used, flags, best);
        for g in 0..used.len() {
            if ok[p][g] && !used[g] {
                used[g] = true;
                flags[p] = true;
                rec(k + 1, order, ok, used, flags, best);
                flags[p] = false;
                used[g] = false;
            }
        }
    }
    rec(0, &order, &ok, &mut used, &mut flags, &mut best);
    best.unwrap().1
}

/// AP as the sum, over true positives, of the best precision reached at
/// that rank or later, divided by the GT count.
pub fn reference_ap(ranked: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::new();
    let mut tp = 0;
    for (k, &t) in ranked.iter().enumerate() {
        tp += t as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut total = 0.0;
    for k in 0..ranked.len() {
        if ranked[k] {
            total += precision[k..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / num_gt as f64
}

pub fn reference_map(images: &[EvalImage], num_classes: usize, thr: f64) -> Option<f64> {
    let mut aps = Vec::new();
    for c in 1..=num_classes {
        let num_gt: usize = images.iter().map(|i| i.gts.iter().filter(|g| g.class_id == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut scored: Vec<(f64, &str, usize, bool)> = Vec::new();
        for img in images {
            let flags = brute_force_match(&img.preds, &img.gts, thr);
            for (p, pred) in img.preds.iter().enumerate() {
                if pred.class_id == c {
                    scored.push((pred.score, &img.image_id, p, flags[p]));
                }
            }
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        let ranked: Vec<bool> = scored.iter().map(|s| s.3).collect();
        aps.push(reference_ap(&ranked, num_gt));
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

pub fn reference_abo(images: &[EvalImage], num_classes: usize) -> Option<f64> {
    let mut per_class: HashMap<usize, Vec<f64>> = HashMap::new();
    for img in images {
        for g in &img.gts {
            let best = img
                .preds
                .iter()
                .filter(|p| p.class_id == g.class_id)
                .map(|p| iou(&p.mask, &g.mask).unwrap())
                .fold(0.0, f64::max);
            per_class.entry(g.class_id).or_default().push(best);
        }
    }
    let means: Vec<f64> = (1..=num_classes)
        .filter_map(|c| per_class.get(&c).map(|v| v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    if means.is_empty() {
        None
    } else {
        Some(means.iter().sum::<f64>() / means.len() as f64)
    }
}

pub fn reference_count_mae(images: &[EvalImage], num_classes: usize, thr: f64) -> Option<f64> {
    let mut errs = Vec::new();
    for img in images {
        let mut counts: HashMap<usize, (i64, i64)> = HashMap::new();
        for g in &img.gts {
            counts.entry(g.class_id).or_default().0 += 1;
        }
        for p in img.preds.iter().filter(|p| p.score >= thr) {
            counts.entry(p.class_id).or_default().1 += 1;
        }
        for c in 1..=num_classes {
            if let Some(&(g, p)) = counts.get(&c) {
                errs.push((g - p).abs() as f64);
            }
        }
    }
    if errs.is_empty() {
        None
    } else {
        Some(errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

/// Twenty small hand-built evaluation fixtures: at most 4 predictions and
/// 3 ground-truth instances per image, 2 classes, 16x16 images.
pub fn metric_fixtures() -> Vec<Vec<EvalImage>> {
    use rand::{Rng, SeedableRng};
    let (h, w) = (16, 16);
    let gt = |c, m| GtMask { class_id: c, mask: m };
    let pr = |c, s, m| PredMask {
        class_id: c,
        score: s,
        mask: m,
    };
    let img = |id: &str, gts, preds| EvalImage {
        image_id: id.into(),
        gts,
        preds,
    };
    let mut out = vec![
        // FP ranked above the single TP.
        vec![img(
            "a",
            vec![gt(1, rect(h, w, 0, 0, 6, 6))],
            vec![pr(1, 0.9, rect(h, w, 10, 10, 4, 4)), pr(1, 0.5, rect(h, w, 0, 0, 6, 6))],
        )],
        // TP ranked above the FP.
        vec![img(
            "a",
            vec![gt(1, rect(h, w, 0, 0, 6, 6))],
            vec![pr(1, 0.9, rect(h, w, 0, 0, 6, 6)), pr(1, 0.5, rect(h, w, 10, 10, 4, 4))],
        )],
        // Two predictions over one GT.
        vec![img(
            "a",
            vec![gt(2, rect(h, w, 2, 2, 8, 8))],
            vec![pr(2, 0.7, rect(h, w, 2, 2, 8, 7)), pr(2, 0.8, rect(h, w, 2, 3, 8, 7))],
        )],
        // Wrong class never matches.
        vec![img("a", vec![gt(1, rect(h, w, 0, 0, 5, 5))], vec![pr(2, 0.9, rect(h, w, 0, 0, 5, 5))])],
        // No predictions at all.
        vec![img("a", vec![gt(1, rect(h, w, 0, 0, 5, 5)), gt(2, rect(h, w, 8, 8, 5, 5))], vec![])],
        // Only false positives on an image without GT, plus a perfect image.
        vec![
            img("a", vec![], vec![pr(1, 0.9, rect(h, w, 0, 0, 3, 3))]),
            img("b", vec![gt(1, rect(h, w, 4, 4, 6, 6))], vec![pr(1, 0.4, rect(h, w, 4, 4, 6, 6))]),
        ],
    ];
    // The remainder: GT in disjoint cells; predictions perturb a cell's GT
    // or land elsewhere in that cell, so at most one GT is reachable per
    // prediction.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let cells = [(0, 0), (0, 8), (8, 0)];
    while out.len() < 20 {
        let n_img = rng.random_range(1..=3);
        let mut fixture = Vec::new();
        for k in 0..n_img {
            let n_gt = rng.random_range(0..=3);
            let mut gts = Vec::new();
            for &(r0, c0) in cells.iter().take(n_gt) {
                let s = rng.random_range(3..=7);
                gts.push(gt(rng.random_range(1..=2), rect(h, w, r0, c0, s, s)));
            }
            let n_pred = rng.random_range(0..=4);
            let mut preds = Vec::new();
            for _ in 0..n_pred {
                let cell = rng.random_range(0..3);
                let (r0, c0) = cells[cell];
                let class = rng.random_range(1..=2);
                let score = rng.random_range(1..100) as f64 / 100.0;
                let m = if cell < gts.len() && rng.random_bool(0.7) {
                    let s = rng.random_range(2..=7);
                    let dr = rng.random_range(0..=1);
                    rect(h, w, r0 + dr, c0, s, s)
                } else {
                    rect(h, w, r0 + rng.random_range(0..=4), c0 + rng.random_range(0..=4), 2, 2)
                };
                preds.push(pr(class, score, m));
            }
            fixture.push(img(&format!("img{k}"), gts, preds));
        }
        out.push(fixture);
    }
    out
}

/// Upper critical value of the chi-squared distribution.
pub fn chi2_critical(dof: usize, alpha: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - alpha)
}
