//! Corpus statistics: overlap rate, co-occurrence NPMI, repetition and
//! duration histograms.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

use super::{AnnotatedVideo, DatasetIndex, EventInstance};

/// Default maximum gap for consecutive pairs, in seconds.
pub const DEFAULT_GAP_S: f64 = 5.0;

/// Lengths of the time covered by at least one and by at least two events.
fn coverage(events: &[EventInstance]) -> (f64, f64) {
    let mut cuts: Vec<f64> = events.iter().flat_map(|e| [e.start_s, e.end_s]).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let (mut any, mut multi) = (0.0, 0.0);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let active = events.iter().filter(|e| e.start_s <= a && e.end_s >= b).count();
        if active >= 1 {
            any += b - a;
        }
        if active >= 2 {
            multi += b - a;
        }
    }
    (any, multi)
}

/// Fraction of event-covered time covered by two or more events.
pub fn overlap_rate(video: &AnnotatedVideo) -> Result<f64> {
    if video.events.is_empty() {
        return Err(Error::UndefinedRate(video.id.clone()));
    }
    let (union, overlapped) = coverage(&video.events);
    Ok(if union > 0.0 { overlapped / union } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// Events whose intervals intersect with positive length.
    Simultaneous,
    /// `b` starts at or after the end of `a`, within the gap.
    Consecutive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpmiPair {
    pub class_a: usize,
    pub class_b: usize,
    /// Number of videos containing the pair.
    pub count: usize,
    pub npmi: f64,
}

/// Ranked pairs plus per-class repetition rates for consecutive mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NpmiTable {
    pub mode: PairMode,
    pub pairs: Vec<NpmiPair>,
}

impl NpmiTable {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let hit = |p: &&NpmiPair| {
            (p.class_a == a && p.class_b == b)
                || (self.mode == PairMode::Simultaneous && p.class_a == b && p.class_b == a)
        };
        self.pairs.iter().find(hit).map(|p| p.npmi)
    }
}

fn is_pair(a: &EventInstance, b: &EventInstance, mode: PairMode, gap_s: f64) -> bool {
    match mode {
        PairMode::Simultaneous => a.start_s.max(b.start_s) < a.end_s.min(b.end_s),
        PairMode::Consecutive => b.start_s >= a.end_s && b.start_s - a.end_s <= gap_s,
    }
}

/// NPMI over video-level occurrence frequencies.
///
/// `p(a)` is the fraction of videos containing class `a`, `p(a, b)` the
/// fraction of videos containing at least one qualifying `(a, b)` event pair.
/// Each pair is counted once per video; unordered in simultaneous mode,
/// ordered in consecutive mode. Same-class pairs are excluded (see
/// [`repetition_rates`]) and pairs never observed are omitted.
pub fn npmi_pairs(index: &DatasetIndex, mode: PairMode, gap_s: f64) -> Result<NpmiTable> {
    if index.is_empty() {
        return Err(Error::Contract("npmi needs a non-empty corpus".into()));
    }
    if !(gap_s >= 0.0) {
        return Err(Error::Contract(format!("gap must be non-negative, got {gap_s}")));
    }
    let n = index.len() as f64;
    let mut class_videos = vec![0usize; index.num_classes()];
    let mut pair_videos: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for v in index.videos.values() {
        for c in v.labels() {
            class_videos[c] += 1;
        }
        let mut seen = BTreeSet::new();
        for a in &v.events {
            for b in &v.events {
                if std::ptr::eq(a, b) || a.label_id == b.label_id || !is_pair(a, b, mode, gap_s) {
                    continue;
                }
                let key = match mode {
                    PairMode::Simultaneous => (a.label_id.min(b.label_id), a.label_id.max(b.label_id)),
                    PairMode::Consecutive => (a.label_id, b.label_id),
                };
                seen.insert(key);
            }
        }
        for key in seen {
            *pair_videos.entry(key).or_default() += 1;
        }
    }
    let mut pairs: Vec<NpmiPair> = pair_videos
        .into_iter()
        .map(|((a, b), count)| {
            let pab = count as f64 / n;
            let pa = class_videos[a] as f64 / n;
            let pb = class_videos[b] as f64 / n;
            NpmiPair { class_a: a, class_b: b, count, npmi: npmi(pab, pa, pb) }
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.npmi
            .total_cmp(&x.npmi)
            .then(y.count.cmp(&x.count))
            .then((x.class_a, x.class_b).cmp(&(y.class_a, y.class_b)))
    });
    Ok(NpmiTable { mode, pairs })
}

/// `ln(p(a,b) / (p(a) p(b))) / −ln p(a,b)`, with the `p(a,b) = 1` limit at 1.
pub fn npmi(pab: f64, pa: f64, pb: f64) -> f64 {
    if pab >= 1.0 {
        return 1.0;
    }
    (pab / (pa * pb)).ln() / -pab.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Repetition {
    pub class: usize,
    pub pairs: usize,
    pub instances: usize,
    pub rate: f64,
}

/// Same-class consecutive pairs per class instance.
pub fn repetition_rates(index: &DatasetIndex, gap_s: f64) -> Vec<Repetition> {
    let c = index.num_classes();
    let mut pairs = vec![0usize; c];
    let mut instances = vec![0usize; c];
    for v in index.videos.values() {
        for a in &v.events {
            instances[a.label_id] += 1;
            pairs[a.label_id] += v
                .events
                .iter()
                .filter(|b| !std::ptr::eq(a, *b) && b.label_id == a.label_id)
                .filter(|b| is_pair(a, b, PairMode::Consecutive, gap_s))
                .count();
        }
    }
    (0..c)
        .map(|class| Repetition {
            class,
            pairs: pairs[class],
            instances: instances[class],
            rate: if instances[class] > 0 { pairs[class] as f64 / instances[class] as f64 } else { 0.0 },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_start_s: f64,
    pub bin_end_s: f64,
    pub count: usize,
}

/// Histogram of event durations with fixed-width bins starting at 0.
pub fn duration_histogram(index: &DatasetIndex, bin_s: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_s > 0.0) {
        return Err(Error::Contract(format!("bin width must be positive, got {bin_s}")));
    }
    let durations: Vec<f64> = index.videos.values().flat_map(|v| v.events.iter().map(EventInstance::duration)).collect();
    let max = durations.iter().copied().fold(0.0, f64::max);
    let bins = ((max / bin_s).floor() as usize + 1).max(1);
    let mut counts = vec![0usize; bins];
    for d in durations {
        counts[((d / bin_s).floor() as usize).min(bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_start_s: i as f64 * bin_s,
            bin_end_s: (i + 1) as f64 * bin_s,
            count,
        })
        .collect())
}

pub fn write_npmi_csv<W: Write>(table: &NpmiTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class_a", "class_b", "count", "npmi"])?;
    for p in &table.pairs {
        w.write_record([p.class_a.to_string(), p.class_b.to_string(), p.count.to_string(), format!("{:.6}", p.npmi)])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_start_s", "bin_end_s", "count"])?;
    for b in bins {
        w.write_record([format!("{:.3}", b.bin_start_s), format!("{:.3}", b.bin_end_s), b.count.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Subset, Taxonomy};

    fn ev(label_id: usize, start_s: f64, end_s: f64) -> EventInstance {
        EventInstance { label_id, start_s, end_s }
    }

    fn video(id: &str, events: Vec<EventInstance>) -> AnnotatedVideo {
        AnnotatedVideo { id: id.into(), duration_s: 100.0, subset: Subset::Train, events }
    }

    #[test]
    fn overlap_rate_hand_cases() {
        assert_eq!(overlap_rate(&video("a", vec![ev(0, 1.0, 3.0)])).unwrap(), 0.0);
        let r = overlap_rate(&video("b", vec![ev(0, 0.0, 4.0), ev(1, 2.0, 6.0)])).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap_rate(&video("c", vec![ev(0, 0.0, 4.0), ev(0, 0.0, 4.0)])).unwrap(), 1.0);
        assert!(matches!(overlap_rate(&video("d", vec![])), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn triple_overlap_counts_once() {
        let r = overlap_rate(&video("t", vec![ev(0, 0.0, 10.0), ev(1, 2.0, 8.0), ev(2, 4.0, 6.0)])).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_co_occurrence_has_npmi_one() {
        let mut videos = vec![];
        for i in 0..4 {
            videos.push(video(&format!("ab{i}"), vec![ev(0, 0.0, 5.0), ev(1, 3.0, 8.0)]));
        }
        for i in 0..6 {
            videos.push(video(&format!("c{i}"), vec![ev(2, 0.0, 5.0)]));
        }
        let idx = DatasetIndex::new(Taxonomy::numbered(3), videos).unwrap();
        let t = npmi_pairs(&idx, PairMode::Simultaneous, DEFAULT_GAP_S).unwrap();
        assert_eq!(t.pairs.len(), 1);
        assert!((t.get(0, 1).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(t.get(1, 0), t.get(0, 1));
        assert_eq!(t.get(0, 2), None);
    }

    #[test]
    fn consecutive_pairs_are_ordered_and_gap_limited() {
        let videos = vec![
            video("x", vec![ev(0, 0.0, 2.0), ev(1, 3.0, 4.0)]),
            video("y", vec![ev(0, 0.0, 2.0), ev(1, 30.0, 34.0)]),
            video("z", vec![ev(2, 0.0, 2.0)]),
        ];
        let idx = DatasetIndex::new(Taxonomy::numbered(3), videos).unwrap();
        let t = npmi_pairs(&idx, PairMode::Consecutive, 5.0).unwrap();
        assert!(t.get(0, 1).is_some());
        assert!(t.get(1, 0).is_none());
        assert_eq!(t.pairs[0].count, 1);
    }

    #[test]
    fn repetition_rate_counts_same_class_followers() {
        let videos = vec![video("r", vec![ev(0, 0.0, 1.0), ev(0, 2.0, 3.0), ev(0, 4.0, 5.0)])];
        let idx = DatasetIndex::new(Taxonomy::numbered(1), videos).unwrap();
        let r = repetition_rates(&idx, 1.5);
        assert_eq!(r[0].pairs, 2);
        assert!((r[0].rate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_bins_cover_all_events() {
        let videos = vec![video("h", vec![ev(0, 0.0, 0.5), ev(0, 0.0, 1.5), ev(0, 0.0, 2.0)])];
        let idx = DatasetIndex::new(Taxonomy::numbered(1), videos).unwrap();
        let h = duration_histogram(&idx, 1.0).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1]);
        let mut buf = Vec::new();
        write_histogram_csv(&h, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("bin_start_s,bin_end_s,count\n"));
    }
}
