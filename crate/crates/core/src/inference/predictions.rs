use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Candidate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    start_s: f64,
    end_s: f64,
    label_id: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    results: BTreeMap<String, Vec<Entry>>,
}

/// The predictions file: candidates grouped by video.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub results: BTreeMap<String, Vec<Candidate>>,
}

impl Predictions {
    pub fn from_candidates(cands: impl IntoIterator<Item = Candidate>) -> Self {
        let mut results: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
        for c in cands {
            results.entry(c.video_id.clone()).or_default().push(c);
        }
        Predictions { results }
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.results.values().flatten()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = File {
            results: self
                .results
                .iter()
                .map(|(k, v)| {
                    let entries = v
                        .iter()
                        .map(|c| Entry {
                            start_s: c.start_s,
                            end_s: c.end_s,
                            label_id: c.label_id,
                            score: c.score,
                        })
                        .collect();
                    (k.clone(), entries)
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let file: File = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut results = BTreeMap::new();
        for (video, entries) in file.results {
            let mut cands = Vec::with_capacity(entries.len());
            for e in entries {
                if !(e.start_s.is_finite() && e.end_s.is_finite() && e.score.is_finite()) {
                    return Err(Error::format(path, format!("non-finite prediction for video {video}")));
                }
                cands.push(Candidate {
                    video_id: video.clone(),
                    start_s: e.start_s,
                    end_s: e.end_s,
                    label_id: e.label_id,
                    score: e.score,
                });
            }
            results.insert(video, cands);
        }
        Ok(Predictions { results })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
