//! Temporal IoU, per-class average precision and the mAP protocol.
//!
//! A prediction is a true positive when its tIoU with the best still
//! unmatched ground-truth instance of the same class and video is at least
//! the threshold. AP is the area under the precision envelope (all-point
//! interpolation). Classes without ground truth in the evaluated subset are
//! left out of every mean.

mod report;

pub use report::{ap_report, mean_ap, ApEntry, ApReport, GroundTruth, DEFAULT_THRESHOLDS};

use crate::inference::Candidate;

/// `|a ∩ b| / |a ∪ b|`; zero-length intervals score 0 against anything.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    if a.1 <= a.0 || b.1 <= b.0 {
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1.max(b.1) - a.0.min(b.0)).max(f64::MIN_POSITIVE);
    inter / union
}

/// Ranking used by the evaluator: descending score, then earlier start,
/// then video id.
pub fn sort_for_eval(preds: &mut [&Candidate]) {
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start_s.total_cmp(&b.start_s))
            .then_with(|| a.video_id.cmp(&b.video_id))
    });
}

/// True-positive flags for `preds` (already ranked) against `gt`, all of
/// one class.
pub fn match_predictions(preds: &[&Candidate], gt: &[&GroundTruth], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gt.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if used[j] || g.video_id != p.video_id {
                    continue;
                }
                let o = tiou(p.interval(), (g.start_s, g.end_s));
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= threshold => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated area under the precision/recall curve.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_r {
            ap += (r - last_r) * p;
            last_r = *r;
        }
    }
    ap
}

/// AP of `class` at `threshold`; `None` when the class has no ground truth.
pub fn average_precision(preds: &[Candidate], gt: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let g: Vec<&GroundTruth> = gt.iter().filter(|g| g.label_id == class).collect();
    if g.is_empty() {
        return None;
    }
    let mut p: Vec<&Candidate> = preds.iter().filter(|p| p.label_id == class).collect();
    sort_for_eval(&mut p);
    let tp = match_predictions(&p, &g, threshold);
    Some(interpolated_ap(&tp, g.len()))
}
