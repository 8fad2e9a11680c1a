use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

/// Ordered event categories with dense ids `0..C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Taxonomy(Vec<Category>);

impl Taxonomy {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Validation {
                video: "<taxonomy>".into(),
                detail: "at least one category is required".into(),
            });
        }
        for (i, c) in categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::Validation {
                    video: "<taxonomy>".into(),
                    detail: format!("field `id`: expected dense id {i}, found {}", c.id),
                });
            }
        }
        Ok(Taxonomy(categories))
    }

    /// `class_0 .. class_{n-1}`.
    pub fn numbered(n: usize) -> Self {
        Taxonomy((0..n).map(|id| Category { id, name: format!("class_{id}") }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.0.get(id).map(|c| c.name.as_str())
    }

    pub fn categories(&self) -> &[Category] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventInstance {
    pub label_id: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl EventInstance {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
            Subset::Unassigned => "unassigned",
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" => Ok(Subset::Val),
            "test" => Ok(Subset::Test),
            "unassigned" => Ok(Subset::Unassigned),
            other => Err(Error::Config {
                field: "subset".into(),
                detail: format!("unknown subset `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedVideo {
    pub id: String,
    pub duration_s: f64,
    #[serde(default)]
    pub subset: Subset,
    #[serde(default)]
    pub events: Vec<EventInstance>,
}

impl AnnotatedVideo {
    /// Distinct labels present in the video.
    pub fn labels(&self) -> BTreeSet<usize> {
        self.events.iter().map(|e| e.label_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    version: u32,
    taxonomy: Taxonomy,
    videos: Vec<AnnotatedVideo>,
}

/// Validated annotations keyed by video id.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub taxonomy: Taxonomy,
    pub videos: BTreeMap<String, AnnotatedVideo>,
}

impl DatasetIndex {
    /// Validates every video and builds the index.
    pub fn new(taxonomy: Taxonomy, videos: Vec<AnnotatedVideo>) -> Result<Self> {
        let taxonomy = Taxonomy::new(taxonomy.0)?;
        let mut map = BTreeMap::new();
        for v in videos {
            validate_video(&v, &taxonomy)?;
            if map.contains_key(&v.id) {
                return Err(Error::DuplicateVideo(v.id));
            }
            map.insert(v.id.clone(), v);
        }
        Ok(DatasetIndex { taxonomy, videos: map })
    }

    pub fn num_classes(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedVideo> {
        self.videos.get(id)
    }

    /// Videos of one subset in id order.
    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &AnnotatedVideo> {
        self.videos.values().filter(move |v| v.subset == subset)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Validation {
            video: "<file>".into(),
            detail: format!("schema violation: {e}"),
        })?;
        if file.version != ANNOTATION_VERSION {
            return Err(Error::Validation {
                video: "<file>".into(),
                detail: format!("field `version`: unsupported version {}", file.version),
            });
        }
        DatasetIndex::new(file.taxonomy, file.videos)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AnnotationFile {
            version: ANNOTATION_VERSION,
            taxonomy: self.taxonomy.clone(),
            videos: self.videos.values().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates an annotation file.
pub fn load_and_validate(path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetIndex::parse(&text)
}

fn validate_video(v: &AnnotatedVideo, taxonomy: &Taxonomy) -> Result<()> {
    let fail = |detail: String| Error::Validation {
        video: v.id.clone(),
        detail,
    };
    if v.id.is_empty() {
        return Err(fail("field `id`: empty".into()));
    }
    if !(v.duration_s.is_finite() && v.duration_s > 0.0) {
        return Err(fail(format!("field `duration_s`: {} is not a positive duration", v.duration_s)));
    }
    for (i, e) in v.events.iter().enumerate() {
        if !(e.start_s.is_finite() && e.end_s.is_finite()) {
            return Err(fail(format!("events[{i}]: non-finite timestamp")));
        }
        if e.start_s < 0.0 {
            return Err(fail(format!("events[{i}].start_s: {} is negative", e.start_s)));
        }
        if e.start_s >= e.end_s {
            return Err(Error::Ordering {
                video: v.id.clone(),
                start_s: e.start_s,
                end_s: e.end_s,
            });
        }
        if e.end_s > v.duration_s {
            return Err(fail(format!(
                "events[{i}].end_s: {} exceeds duration {}",
                e.end_s, v.duration_s
            )));
        }
        if e.label_id >= taxonomy.len() {
            return Err(fail(format!("events[{i}].label_id: {} not in taxonomy", e.label_id)));
        }
    }
    Ok(())
}
