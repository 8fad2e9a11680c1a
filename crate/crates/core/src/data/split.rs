//! Iterative stratification for multi-label corpora.
//!
//! Labels are processed rarest first. Each video carrying the current label
//! goes to the subset that still wants the most examples of that label,
//! breaking ties by the subset's overall remaining demand and then by a
//! seeded coin.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

use super::{DatasetIndex, Subset};

const SUBSETS: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

/// Assigns each video to train/val/test in proportion to `ratios`.
pub fn stratified_split(
    index: &DatasetIndex,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<BTreeMap<String, Subset>> {
    let r = [ratios.0, ratios.1, ratios.2];
    let total: f64 = r.iter().sum();
    if r.iter().any(|&x| !(x >= 0.0)) || !(total > 0.0) {
        return Err(Error::Stratification(format!("invalid ratios {ratios:?}")));
    }
    let r = r.map(|x| x / total);
    let classes = index.num_classes();

    let mut rng = SeededRng::new(seed);
    let mut pending: Vec<(&str, Vec<usize>)> = index
        .videos
        .values()
        .map(|v| (v.id.as_str(), v.labels().into_iter().collect()))
        .collect();
    rng.shuffle(&mut pending);

    let mut per_label = vec![0usize; classes];
    for (_, labels) in &pending {
        for &l in labels {
            per_label[l] += 1;
        }
    }
    if let Some(missing) = per_label.iter().position(|&n| n == 0) {
        return Err(Error::Stratification(format!(
            "class {missing} does not occur in the corpus"
        )));
    }
    for (c, &n) in per_label.iter().enumerate() {
        if n < 3 {
            log::warn!("class {c} occurs in only {n} videos; subsets cannot all receive it");
        }
    }

    let n = pending.len() as f64;
    let mut want: [f64; 3] = r.map(|x| x * n);
    let mut want_label: Vec<[f64; 3]> = per_label
        .iter()
        .map(|&cnt| r.map(|x| x * cnt as f64))
        .collect();
    let mut remaining = per_label.clone();
    let mut out = BTreeMap::new();

    let mut assign = |slot: usize,
                      id: &str,
                      labels: &[usize],
                      want: &mut [f64; 3],
                      want_label: &mut [[f64; 3]],
                      remaining: &mut [usize]| {
        want[slot] -= 1.0;
        for &l in labels {
            want_label[l][slot] -= 1.0;
            remaining[l] -= 1;
        }
        out.insert(id.to_owned(), SUBSETS[slot]);
    };

    loop {
        let label = (0..classes)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| (remaining[l], l));
        let Some(label) = label else { break };
        let (take, keep): (Vec<_>, Vec<_>) = pending.into_iter().partition(|(_, ls)| ls.contains(&label));
        pending = keep;
        for (id, labels) in take {
            let slot = pick(&want_label[label], &want, &mut rng);
            assign(slot, id, &labels, &mut want, &mut want_label, &mut remaining);
        }
    }
    // Videos without events.
    for (id, labels) in pending {
        let slot = pick(&want, &want, &mut rng);
        assign(slot, id, &labels, &mut want, &mut want_label, &mut remaining);
    }
    Ok(out)
}

fn pick(primary: &[f64; 3], secondary: &[f64; 3], rng: &mut SeededRng) -> usize {
    let best = primary.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..3).filter(|&j| primary[j] == best).collect();
    if tied.len() == 1 {
        return tied[0];
    }
    let best2 = tied.iter().map(|&j| secondary[j]).fold(f64::NEG_INFINITY, f64::max);
    let tied2: Vec<usize> = tied.into_iter().filter(|&j| secondary[j] == best2).collect();
    tied2[rng.int(0, tied2.len() - 1)]
}

/// Writes `assignment` into the index.
pub fn apply_split(index: &mut DatasetIndex, assignment: &BTreeMap<String, Subset>) {
    for (id, v) in index.videos.iter_mut() {
        if let Some(&s) = assignment.get(id) {
            v.subset = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotatedVideo, EventInstance, Taxonomy};

    fn corpus(labels: &[Vec<usize>], classes: usize) -> DatasetIndex {
        let videos = labels
            .iter()
            .enumerate()
            .map(|(i, ls)| AnnotatedVideo {
                id: format!("v{i:03}"),
                duration_s: 10.0,
                subset: Subset::Unassigned,
                events: ls
                    .iter()
                    .map(|&l| EventInstance { label_id: l, start_s: 1.0, end_s: 2.0 })
                    .collect(),
            })
            .collect();
        DatasetIndex::new(Taxonomy::numbered(classes), videos).unwrap()
    }

    fn sizes(a: &BTreeMap<String, Subset>) -> (usize, usize, usize) {
        let c = |s| a.values().filter(|&&x| x == s).count();
        (c(Subset::Train), c(Subset::Val), c(Subset::Test))
    }

    #[test]
    fn single_class_five_videos() {
        let idx = corpus(&vec![vec![0]; 5], 1);
        for seed in 0..10 {
            assert_eq!(sizes(&stratified_split(&idx, (3.0, 1.0, 1.0), seed).unwrap()), (3, 1, 1));
        }
    }

    #[test]
    fn disjoint_classes_split_six_two_two() {
        let mut labels = vec![vec![0]; 10];
        labels.extend(vec![vec![1]; 10]);
        let idx = corpus(&labels, 2);
        for seed in 0..10 {
            let a = stratified_split(&idx, (3.0, 1.0, 1.0), seed).unwrap();
            for class in 0..2 {
                let mut c = [0; 3];
                for (id, s) in &a {
                    if idx.get(id).unwrap().labels().contains(&class) {
                        c[SUBSETS.iter().position(|x| x == s).unwrap()] += 1;
                    }
                }
                assert_eq!(c, [6, 2, 2], "class {class} seed {seed}");
            }
        }
    }

    #[test]
    fn identical_multilabel_sets_reduce_to_ratio_split() {
        let idx = corpus(&vec![vec![0, 1, 2]; 25], 3);
        assert_eq!(sizes(&stratified_split(&idx, (3.0, 1.0, 1.0), 4).unwrap()), (15, 5, 5));
    }

    #[test]
    fn absent_class_is_an_error() {
        let idx = corpus(&vec![vec![0]; 5], 2);
        assert!(matches!(stratified_split(&idx, (3.0, 1.0, 1.0), 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn deterministic_partition() {
        let labels: Vec<Vec<usize>> = (0..40).map(|i| vec![i % 3, (i * 7) % 4]).collect();
        let idx = corpus(&labels, 4);
        let a = stratified_split(&idx, (3.0, 1.0, 1.0), 11).unwrap();
        assert_eq!(a, stratified_split(&idx, (3.0, 1.0, 1.0), 11).unwrap());
        assert_eq!(a.len(), 40);
    }
}
