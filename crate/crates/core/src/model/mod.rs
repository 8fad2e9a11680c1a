//! The audio-visual localization network.
//!
//! Features from both modalities are projected to a shared width, encoded
//! per modality with self-attention, fused into a temporal pyramid by
//! bidirectional cross-modal attention, refined by event dependency
//! modeling, and decoded per level by a classification head and a boundary
//! regression head.

mod config;
mod init;
mod layers;
mod network;

use std::path::{Path, PathBuf};

pub use config::{InputModality, ModelConfig, KERNEL};
pub use init::{init_params, param_count, param_specs, Init, ParamSpec, CLS_PRIOR, PROJ_STD, REG_BIAS_INIT};
pub use layers::positional_encoding;
pub use network::{
    cross_modal_pyramid, encode_unimodal, forward, heads_forward, model_dependencies, project_inputs, ForwardOutput,
    LevelOutput, ModelInput, PyramidLevel,
};

use crate::data::{pad_and_mask, FeatureStreams};
use crate::error::{Error, Result};
use crate::numerics::{load_checkpoint, save_checkpoint, ParamStore, Scalar, Session, Tensor};

/// Head outputs of one level, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPredictions {
    /// `[T_l, C]`
    pub probs: Tensor<f32>,
    /// `[2, C, T_l]` distances in level steps: `[0]` to the start, `[1]` to the end.
    pub distances: Tensor<f32>,
    pub valid_len: usize,
    /// Base steps per step of this level.
    pub scale: usize,
}

impl LevelPredictions {
    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.last_dim()
    }

    pub fn start_distance(&self, class: usize, t: usize) -> f32 {
        self.distances.at(&[0, class, t])
    }

    pub fn end_distance(&self, class: usize, t: usize) -> f32 {
        self.distances.at(&[1, class, t])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    pub levels: Vec<LevelPredictions>,
    pub hop_s: f32,
    pub offset_s: f32,
}

/// Converts a `[T, 2C]` distance map to `[2, C, T]`.
pub fn distances_to_planes<S: Scalar>(reg: &Tensor<S>, classes: usize) -> Result<Tensor<S>> {
    let t = reg.rows();
    if reg.shape() != [t, 2 * classes] {
        return Err(Error::shape(
            "distances_to_planes",
            format!("{:?} for {classes} classes", reg.shape()),
        ));
    }
    let mut out = vec![S::zero(); t * 2 * classes];
    for i in 0..t {
        for j in 0..2 * classes {
            out[j * t + i] = reg.data()[i * 2 * classes + j];
        }
    }
    Tensor::new(vec![2, classes, t], out)
}

pub fn input_from_streams<S: Scalar>(streams: &FeatureStreams) -> ModelInput<S> {
    ModelInput {
        audio: streams.audio.cast(),
        visual: streams.visual.cast(),
        mask: streams.mask.iter().map(|&m| S::of(m as f64)).collect(),
    }
}

/// Configuration plus trained parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        for spec in param_specs(&config) {
            let t = params.value(&spec.name).map_err(|_| Error::Config {
                field: "checkpoint".into(),
                detail: format!("missing parameter {}", spec.name),
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config {
                    field: "checkpoint".into(),
                    detail: format!("parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape),
                });
            }
        }
        if params.len() != param_specs(&config).len() {
            return Err(Error::Config {
                field: "checkpoint".into(),
                detail: "checkpoint has parameters the configuration does not use".into(),
            });
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Runs the network on one video, padding or cropping to `max_len`.
    pub fn predict(&self, streams: &FeatureStreams) -> Result<RawPredictions> {
        let padded = pad_and_mask(streams, self.config.max_len)?;
        let input = input_from_streams::<f32>(&padded);
        let mut s = Session::new(&self.params);
        let out = forward(&mut s, &self.config, &input)?;
        let mut levels = Vec::with_capacity(out.levels.len());
        for (l, lvl) in out.levels.iter().enumerate() {
            levels.push(LevelPredictions {
                probs: s.graph.value(lvl.cls).clone(),
                distances: distances_to_planes(s.graph.value(lvl.reg), self.config.classes)?,
                valid_len: lvl.valid_len,
                scale: self.config.level_scale(l),
            });
        }
        Ok(RawPredictions {
            levels,
            hop_s: streams.hop_s,
            offset_s: streams.offset_s,
        })
    }

    /// Writes the parameters to `path` and the configuration next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, path)?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        let side = config_sidecar(path);
        std::fs::write(&side, cfg).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = config_sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        Model::from_params(config, load_checkpoint(path)?)
    }
}

/// Location of the configuration stored alongside a checkpoint.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("config.json")
}
