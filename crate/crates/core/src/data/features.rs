//! Per-video feature streams and the `DAVF` file format.
//!
//! A feature file holds one modality of one video: magic `DAVF`, `u32`
//! version, `u32` T, `u32` D, `f32` hop, `f32` offset, then `T·D`
//! little-endian `f32` values in row-major order. Files live at
//! `<dir>/<modality>/<video_id>.davf`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DAVF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// One modality of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub hop_s: f32,
    pub offset_s: f32,
    /// `[T, D]`
    pub data: Tensor<f32>,
}

impl FeatureFile {
    pub fn encode(&self) -> Vec<u8> {
        let (t, d) = (self.data.shape()[0], self.data.shape()[1]);
        let mut out = Vec::with_capacity(24 + 4 * t * d);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&self.hop_s.to_le_bytes());
        out.extend_from_slice(&self.offset_s.to_le_bytes());
        for &x in self.data.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::format(path, "header truncated"));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::format(path, "bad magic, expected DAVF"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FEATURE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let (t, d) = (u32_at(8) as usize, u32_at(12) as usize);
        let (hop_s, offset_s) = (f32_at(16), f32_at(20));
        if !(hop_s.is_finite() && hop_s > 0.0) || !offset_s.is_finite() {
            return Err(Error::format(path, format!("invalid timing hop={hop_s} offset={offset_s}")));
        }
        let payload = &bytes[24..];
        if payload.len() != 4 * t * d {
            return Err(Error::format(
                path,
                format!("payload has {} bytes, header says {t}×{d} floats", payload.len()),
            ));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, "non-finite feature value"));
        }
        Ok(FeatureFile {
            hop_s,
            offset_s,
            data: Tensor::new(vec![t, d], data)?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureFile::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn feature_path(dir: &Path, modality: Modality, video_id: &str) -> PathBuf {
    dir.join(modality.dir_name()).join(format!("{video_id}.davf"))
}

/// Temporally aligned audio and visual features of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStreams {
    /// `[T, D_a]`
    pub audio: Tensor<f32>,
    /// `[T, D_v]`
    pub visual: Tensor<f32>,
    pub hop_s: f32,
    pub offset_s: f32,
    pub valid_len: usize,
    /// `[T]`, ones on the valid prefix.
    pub mask: Vec<f32>,
}

impl FeatureStreams {
    /// Unpadded streams; the whole sequence is valid.
    pub fn new(audio: Tensor<f32>, visual: Tensor<f32>, hop_s: f32, offset_s: f32) -> Result<Self> {
        if audio.rank() != 2 || visual.rank() != 2 || audio.shape()[0] != visual.shape()[0] {
            return Err(Error::shape(
                "feature_streams",
                format!("audio {:?} and visual {:?} must share T", audio.shape(), visual.shape()),
            ));
        }
        let t = audio.shape()[0];
        Ok(FeatureStreams {
            audio,
            visual,
            hop_s,
            offset_s,
            valid_len: t,
            mask: vec![1.0; t],
        })
    }

    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.shape()[1]
    }

    pub fn write(&self, dir: &Path, video_id: &str) -> Result<()> {
        let (audio, visual) = (self.valid_prefix(&self.audio)?, self.valid_prefix(&self.visual)?);
        FeatureFile { hop_s: self.hop_s, offset_s: self.offset_s, data: audio }
            .write(&feature_path(dir, Modality::Audio, video_id))?;
        FeatureFile { hop_s: self.hop_s, offset_s: self.offset_s, data: visual }
            .write(&feature_path(dir, Modality::Visual, video_id))
    }

    fn valid_prefix(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = t.shape()[1];
        Tensor::new(vec![self.valid_len, d], t.data()[..self.valid_len * d].to_vec())
    }
}

/// Reads and aligns both modalities of `video_id`.
///
/// When the two streams start at different offsets that differ by whole
/// steps, leading steps of the earlier stream are dropped. The remaining
/// lengths must agree.
pub fn load_features(video_id: &str, dir: &Path) -> Result<FeatureStreams> {
    let audio = FeatureFile::read(&feature_path(dir, Modality::Audio, video_id))?;
    let visual = FeatureFile::read(&feature_path(dir, Modality::Visual, video_id))?;
    let misaligned = |detail: String| Error::Alignment {
        video: video_id.to_owned(),
        detail,
    };
    if (audio.hop_s - visual.hop_s).abs() > 1e-6 * audio.hop_s.max(1.0) {
        return Err(misaligned(format!("hop {} vs {}", audio.hop_s, visual.hop_s)));
    }
    let hop = audio.hop_s;
    let shift = (visual.offset_s - audio.offset_s) / hop;
    let steps = shift.round();
    if (shift - steps).abs() > 1e-3 {
        return Err(misaligned(format!(
            "offsets {} and {} are not a whole number of steps apart",
            audio.offset_s, visual.offset_s
        )));
    }
    let drop_rows = |t: &Tensor<f32>, n: usize| -> Result<Tensor<f32>> {
        let (len, d) = (t.shape()[0], t.shape()[1]);
        let n = n.min(len);
        Tensor::new(vec![len - n, d], t.data()[n * d..].to_vec())
    };
    let (a, v, offset) = if steps > 0.0 {
        (drop_rows(&audio.data, steps as usize)?, visual.data, visual.offset_s)
    } else {
        (audio.data.clone(), drop_rows(&visual.data, (-steps) as usize)?, audio.offset_s)
    };
    if a.shape()[0] != v.shape()[0] {
        return Err(misaligned(format!("{} audio steps vs {} visual steps", a.shape()[0], v.shape()[0])));
    }
    FeatureStreams::new(a, v, hop, offset)
}

/// Zero-pads (or crops from the end) to `t_max` steps and sets the mask.
pub fn pad_and_mask(streams: &FeatureStreams, t_max: usize) -> Result<FeatureStreams> {
    if t_max == 0 {
        return Err(Error::Contract("t_max must be at least 1".into()));
    }
    let valid = streams.valid_len.min(t_max);
    let fit = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let d = t.shape()[1];
        let mut data = vec![0.0; t_max * d];
        data[..valid * d].copy_from_slice(&t.data()[..valid * d]);
        Tensor::new(vec![t_max, d], data)
    };
    let mut mask = vec![0.0; t_max];
    mask[..valid].iter_mut().for_each(|m| *m = 1.0);
    Ok(FeatureStreams {
        audio: fit(&streams.audio)?,
        visual: fit(&streams.visual)?,
        hop_s: streams.hop_s,
        offset_s: streams.offset_s,
        valid_len: valid,
        mask,
    })
}
