//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use avloc::eval::GroundTruth;
use avloc::inference::Candidate;
use avloc::numerics::SeededRng;

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    if a.1 - a.0 <= 0.0 || b.1 - b.0 <= 0.0 {
        return 0.0;
    }
    let lo = if a.0 > b.0 { a.0 } else { b.0 };
    let hi = if a.1 < b.1 { a.1 } else { b.1 };
    if hi <= lo {
        return 0.0;
    }
    let inter = hi - lo;
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Number of true positives among the first `k` ranked predictions, with
/// matching redone from scratch for that prefix.
fn true_positives(ranked: &[&Candidate], gt: &[&GroundTruth], k: usize, threshold: f64) -> usize {
    let mut taken = vec![false; gt.len()];
    let mut tp = 0;
    for p in &ranked[..k] {
        let mut options: Vec<(f64, usize)> = gt
            .iter()
            .enumerate()
            .filter(|(_, g)| g.video_id == p.video_id)
            .map(|(j, g)| (overlap((p.start_s, p.end_s), (g.start_s, g.end_s)), j))
            .collect();
        options.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if let Some(&(o, j)) = options.iter().find(|(_, j)| !taken[*j]) {
            if o >= threshold {
                taken[j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// AP by enumerating every cutoff of the ranked list: for each recall level
/// reached, the best precision at any cutoff with at least that recall.
pub fn brute_force_ap(preds: &[Candidate], gt: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let g: Vec<&GroundTruth> = gt.iter().filter(|g| g.label_id == class).collect();
    if g.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Candidate> = preds.iter().filter(|p| p.label_id == class).collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.start_s.partial_cmp(&b.start_s).unwrap())
            .then(a.video_id.cmp(&b.video_id))
    });
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives(&ranked, &g, k, threshold) as f64;
            (tp / g.len() as f64, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    Some(ap)
}

pub struct ApInstance {
    pub preds: Vec<Candidate>,
    pub gt: Vec<GroundTruth>,
    pub classes: usize,
}

/// Small random detection problem: up to 20 GT, 40 predictions, 5 classes.
pub fn random_ap_instance(seed: u64) -> ApInstance {
    let mut rng = SeededRng::new(seed);
    let classes = rng.int(1, 5);
    let videos = rng.int(1, 3);
    let video = |rng: &mut SeededRng| format!("v{}", rng.int(0, videos - 1));
    let interval = |rng: &mut SeededRng| {
        // Coarse grid so exact ties in tIoU and score occur.
        let s = rng.int(0, 40) as f64 * 0.5;
        let len = rng.int(1, 16) as f64 * 0.5;
        (s, s + len)
    };
    let gt = (0..rng.int(0, 20))
        .map(|_| {
            let (s, e) = interval(&mut rng);
            GroundTruth {
                video_id: video(&mut rng),
                start_s: s,
                end_s: e,
                label_id: rng.int(0, classes - 1),
            }
        })
        .collect::<Vec<_>>();
    let mut preds = Vec::new();
    for _ in 0..rng.int(0, 40) {
        let near = !gt.is_empty() && rng.bernoulli(0.6);
        let (vid, (s, e), label) = if near {
            let g = &gt[rng.int(0, gt.len() - 1)];
            let js = rng.int(0, 4) as f64 * 0.5 - 1.0;
            let je = rng.int(0, 4) as f64 * 0.5 - 1.0;
            let s = (g.start_s + js).max(0.0);
            let e = (g.end_s + je).max(s + 0.5);
            (g.video_id.clone(), (s, e), g.label_id)
        } else {
            (video(&mut rng), interval(&mut rng), rng.int(0, classes - 1))
        };
        let score = if rng.bernoulli(0.3) {
            rng.int(1, 4) as f64 * 0.25
        } else {
            rng.uniform()
        };
        preds.push(Candidate {
            video_id: vid,
            start_s: s,
            end_s: e,
            label_id: label,
            score,
        });
    }
    ApInstance { preds, gt, classes }
}

/// Positive entry found by [`brute_force_assignment`]:
/// `(level, step, class, d_start, d_end)` in level steps.
pub type OraclePositive = (usize, usize, usize, f64, f64);

/// Enumerates every `(level, step, class)` of a stride-2 pyramid directly.
pub fn brute_force_assignment(
    events: &[avloc::data::EventInstance],
    valid_len: usize,
    levels: usize,
    classes: usize,
    hop: f64,
    ranges: &[f64],
) -> Vec<OraclePositive> {
    let mut out = Vec::new();
    let mut n = valid_len;
    for l in 0..levels {
        if l > 0 {
            n = n.div_ceil(2);
        }
        let stride = (1usize << l) as f64;
        let lo = ranges[l];
        let hi = if l + 1 < levels { ranges[l + 1] } else { f64::INFINITY };
        for i in 0..n {
            let t = (i as f64 + 0.5) * hop * stride;
            for c in 0..classes {
                let mut chosen: Option<&avloc::data::EventInstance> = None;
                for e in events.iter().filter(|e| e.label_id == c) {
                    let inside = e.start_s <= t && t <= e.end_s;
                    let reach = f64::max(t - e.start_s, e.end_s - t) / hop;
                    if inside && reach >= lo && reach < hi {
                        let shorter = match chosen {
                            None => true,
                            Some(prev) => (e.end_s - e.start_s) < (prev.end_s - prev.start_s),
                        };
                        if shorter {
                            chosen = Some(e);
                        }
                    }
                }
                if let Some(e) = chosen {
                    out.push((l, i, c, (t - e.start_s) / (hop * stride), (e.end_s - t) / (hop * stride)));
                }
            }
        }
    }
    out
}

/// Random events on a `len`-step grid with hop `hop`: arbitrary real
/// boundaries, some overlapping, some tiny.
pub fn random_events(rng: &mut SeededRng, len: usize, hop: f64, classes: usize) -> Vec<avloc::data::EventInstance> {
    let dur = len as f64 * hop;
    (0..rng.int(0, 6))
        .map(|_| {
            let a = rng.range(0.0, dur);
            let l = if rng.bernoulli(0.2) {
                rng.range(0.01, hop)
            } else {
                rng.range(hop, dur)
            };
            avloc::data::EventInstance {
                label_id: rng.int(0, classes - 1),
                start_s: a,
                end_s: (a + l).min(dur),
            }
        })
        .filter(|e| e.end_s > e.start_s)
        .collect()
}

/// Raw predictions that echo an assignment: probability 1 exactly at
/// positives, with the assigned distances.
pub fn raw_from_targets(
    t: &avloc::training::TargetAssignment,
    hop_s: f32,
    offset_s: f32,
) -> avloc::model::RawPredictions {
    use avloc::model::{LevelPredictions, RawPredictions};
    use avloc::numerics::Tensor;
    let c = t.classes;
    let levels = t
        .levels
        .iter()
        .map(|lt| {
            let probs = Tensor::new(vec![lt.len, c], lt.labels.iter().map(|&v| v as f32).collect()).unwrap();
            let mut d = vec![0.0f32; 2 * c * lt.len];
            for p in &lt.positives {
                d[p.class * lt.len + p.step] = p.start as f32;
                d[(c + p.class) * lt.len + p.step] = p.end as f32;
            }
            LevelPredictions {
                probs,
                distances: Tensor::new(vec![2, c, lt.len], d).unwrap(),
                valid_len: lt.valid_len,
                scale: lt.scale,
            }
        })
        .collect();
    RawPredictions {
        levels,
        hop_s,
        offset_s,
    }
}

/// Up to 25 candidates over two videos and three classes on a quarter-second
/// grid, so identical intervals and partial overlaps are common.
pub fn random_candidates(seed: u64) -> Vec<Candidate> {
    let mut rng = SeededRng::new(seed);
    let n = rng.int(1, 25);
    (0..n)
        .map(|_| {
            let s = rng.int(0, 40) as f64 * 0.25;
            let len = rng.int(1, 20) as f64 * 0.25;
            Candidate {
                video_id: if rng.bernoulli(0.5) { "a" } else { "b" }.into(),
                start_s: s,
                end_s: s + len,
                label_id: rng.int(0, 2),
                score: 0.01 + 0.99 * rng.uniform(),
            }
        })
        .collect()
}
