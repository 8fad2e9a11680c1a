use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, Subset, Taxonomy};
use crate::error::{Error, Result};
use crate::inference::{Candidate, Predictions};

use super::average_precision;

/// `[0.1:0.1:0.9]`
pub const DEFAULT_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class: usize,
    pub name: String,
    pub threshold: f64,
    pub ap: f64,
    pub gt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: Vec<ApEntry>,
    /// mAP per threshold, keyed by the threshold with one decimal.
    pub map: BTreeMap<String, f64>,
    #[serde(rename = "avg_map_0.1_0.9")]
    pub avg_map: f64,
    /// Classes without ground truth, left out of every mean.
    pub excluded_classes: Vec<usize>,
    pub videos: usize,
}

fn key(t: f64) -> String {
    format!("{t:.1}")
}

impl ApReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.map.get(&key(threshold)).copied()
    }

    pub fn ap(&self, class: usize, threshold: f64) -> Option<f64> {
        self.per_class
            .iter()
            .find(|e| e.class == class && key(e.threshold) == key(threshold))
            .map(|e| e.ap)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "name", "threshold", "ap", "gt_count"])?;
        for e in &self.per_class {
            w.write_record([
                e.class.to_string(),
                e.name.clone(),
                key(e.threshold),
                format!("{:.6}", e.ap),
                e.gt_count.to_string(),
            ])?;
        }
        for (t, m) in &self.map {
            w.write_record(["mAP".to_owned(), String::new(), t.clone(), format!("{m:.6}"), String::new()])?;
        }
        w.write_record([
            "avg_mAP".to_owned(),
            String::new(),
            "0.1-0.9".to_owned(),
            format!("{:.6}", self.avg_map),
            String::new(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, json_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))
    }
}

/// Scores `preds` against the videos of `subset` (all videos when `None`).
///
/// Predictions for videos outside the subset are ignored. Predictions for
/// videos missing from the index are an error when `strict`, otherwise they
/// are skipped with a warning. Labels outside the taxonomy are always an
/// error.
pub fn mean_ap(
    preds: &Predictions,
    index: &DatasetIndex,
    subset: Option<Subset>,
    thresholds: &[f64],
    strict: bool,
) -> Result<ApReport> {
    let in_subset = |id: &str| index.get(id).is_some_and(|v| subset.is_none_or(|s| v.subset == s));
    let mut kept: Vec<Candidate> = Vec::new();
    for (video, cands) in &preds.results {
        if index.get(video).is_none() {
            if strict {
                return Err(Error::UnknownVideo(video.clone()));
            }
            log::warn!("skipping predictions for unknown video {video}");
            continue;
        }
        for c in cands {
            if c.label_id >= index.num_classes() {
                return Err(Error::Validation {
                    video: video.clone(),
                    detail: format!("predicted label {} is outside the taxonomy", c.label_id),
                });
            }
        }
        if in_subset(video) {
            kept.extend(cands.iter().cloned());
        }
    }
    let videos: Vec<_> = index.videos.values().filter(|v| in_subset(&v.id)).collect();
    let gt: Vec<GroundTruth> = videos
        .iter()
        .flat_map(|v| {
            v.events.iter().map(|e| GroundTruth {
                video_id: v.id.clone(),
                start_s: e.start_s,
                end_s: e.end_s,
                label_id: e.label_id,
            })
        })
        .collect();
    Ok(ap_report(&kept, &gt, &index.taxonomy, thresholds, videos.len()))
}

/// Scores in-memory candidates against ground truth over `taxonomy`.
pub fn ap_report(
    preds: &[Candidate],
    gt: &[GroundTruth],
    taxonomy: &Taxonomy,
    thresholds: &[f64],
    videos: usize,
) -> ApReport {
    let mut counts = vec![0usize; taxonomy.len()];
    for g in gt {
        if let Some(n) = counts.get_mut(g.label_id) {
            *n += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut map = BTreeMap::new();
    let excluded: BTreeSet<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    for &t in thresholds {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (class, &gt_count) in counts.iter().enumerate() {
            let Some(ap) = average_precision(preds, gt, class, t) else { continue };
            sum += ap;
            n += 1;
            per_class.push(ApEntry {
                class,
                name: taxonomy.name(class).unwrap_or_default().to_owned(),
                threshold: t,
                ap,
                gt_count,
            });
        }
        map.insert(key(t), if n == 0 { 0.0 } else { sum / n as f64 });
    }
    let avg_map = if map.is_empty() {
        0.0
    } else {
        map.values().sum::<f64>() / map.len() as f64
    };
    ApReport {
        per_class,
        map,
        avg_map,
        excluded_classes: excluded.into_iter().collect(),
        videos,
    }
}
