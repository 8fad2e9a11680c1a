use std::collections::BTreeMap;

use crate::eval::tiou;

use super::decode::rank_order;
use super::{Candidate, DecodeConfig};

fn group(cands: Vec<Candidate>) -> BTreeMap<(String, usize), Vec<Candidate>> {
    let mut groups: BTreeMap<(String, usize), Vec<Candidate>> = BTreeMap::new();
    for c in cands {
        groups.entry((c.video_id.clone(), c.label_id)).or_default().push(c);
    }
    groups
}

/// Caps each video at `max_kept` candidates, best first.
fn finish(groups: BTreeMap<(String, usize), Vec<Candidate>>, max_kept: usize) -> Vec<Candidate> {
    let mut per_video: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for ((video, _), kept) in groups {
        per_video.entry(video).or_default().extend(kept);
    }
    let mut out = Vec::new();
    for (_, mut v) in per_video {
        v.sort_by(rank_order);
        v.truncate(max_kept);
        out.extend(v);
    }
    out.sort_by(rank_order);
    out
}

fn best_index(pool: &[Candidate]) -> Option<usize> {
    (0..pool.len()).min_by(|&a, &b| rank_order(&pool[a], &pool[b]))
}

/// Gaussian Soft-NMS applied independently within each (video, class).
///
/// The best remaining candidate is kept and every other candidate of the
/// same group is decayed by `exp(−tIoU² / σ)`. Output is sorted by final
/// score, at most `max_kept` per video.
pub fn soft_nms(cands: Vec<Candidate>, cfg: &DecodeConfig) -> Vec<Candidate> {
    let mut groups = group(cands);
    for pool in groups.values_mut() {
        let mut rest = std::mem::take(pool);
        while pool.len() < cfg.max_kept {
            let Some(b) = best_index(&rest) else { break };
            if rest[b].score < cfg.min_score {
                break;
            }
            let m = rest.swap_remove(b);
            for c in rest.iter_mut() {
                let o = tiou(m.interval(), c.interval());
                c.score *= (-o * o / cfg.sigma).exp();
            }
            pool.push(m);
        }
    }
    finish(groups, cfg.max_kept)
}

/// Classic NMS: candidates overlapping a kept one by more than
/// `iou_threshold` within the same (video, class) are discarded.
pub fn hard_nms(cands: Vec<Candidate>, iou_threshold: f64, cfg: &DecodeConfig) -> Vec<Candidate> {
    let mut groups = group(cands);
    for pool in groups.values_mut() {
        let mut rest = std::mem::take(pool);
        while pool.len() < cfg.max_kept {
            let Some(b) = best_index(&rest) else { break };
            if rest[b].score < cfg.min_score {
                break;
            }
            let m = rest.swap_remove(b);
            rest.retain(|c| tiou(m.interval(), c.interval()) <= iou_threshold);
            pool.push(m);
        }
    }
    finish(groups, cfg.max_kept)
}
