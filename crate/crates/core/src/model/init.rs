//! Parameter layout and initialization.
//!
//! Every parameter of a configuration is listed by [`param_specs`]; the
//! layout is a pure function of the configuration, which is what makes
//! parameter-count comparisons between ablation settings meaningful.

use crate::error::Result;
use crate::numerics::{ParamStore, SeededRng, Tensor};

use super::{ModelConfig, KERNEL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal (±2σ).
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Prior probability encoded by the initial classification bias.
pub const CLS_PRIOR: f64 = 0.01;
/// Initial distance (in level steps) produced by the regression head.
pub const REG_BIAS_INIT: f64 = 1.0;
pub const PROJ_STD: f64 = 0.02;

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, p: &str, din: usize, dout: usize) {
        self.push(format!("{p}.w"), vec![din, dout], Init::Normal(PROJ_STD));
        self.push(format!("{p}.b"), vec![dout], Init::Const(0.0));
    }

    /// Convolution weights scaled by fan-in so stacked convolutions keep
    /// unit-order activations.
    fn conv(&mut self, p: &str, cin: usize, cout: usize, bias: f64) {
        let std = 1.0 / ((KERNEL * cin) as f64).sqrt();
        self.push(format!("{p}.w"), vec![KERNEL, cin, cout], Init::Normal(std));
        self.push(format!("{p}.b"), vec![cout], Init::Const(bias));
    }

    fn layer_norm(&mut self, p: &str, d: usize) {
        self.push(format!("{p}.g"), vec![d], Init::Const(1.0));
        self.push(format!("{p}.b"), vec![d], Init::Const(0.0));
    }

    fn attention(&mut self, p: &str, d: usize) {
        for m in ["q", "k", "v", "o"] {
            self.linear(&format!("{p}.{m}"), d, d);
        }
    }

    fn ffn(&mut self, p: &str, d: usize, ratio: usize) {
        self.linear(&format!("{p}.fc1"), d, d * ratio);
        self.linear(&format!("{p}.fc2"), d * ratio, d);
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut s = Specs(Vec::new());
    for (m, din) in [("audio", cfg.audio_dim), ("visual", cfg.visual_dim)] {
        s.conv(&format!("proj.{m}.conv0"), din, d, 0.0);
        s.conv(&format!("proj.{m}.conv1"), d, d, 0.0);
    }
    for m in ["audio", "visual"] {
        for b in 0..cfg.unimodal_blocks {
            let p = format!("unimodal.{m}.{b}");
            s.layer_norm(&format!("{p}.ln_attn"), d);
            s.attention(&format!("{p}.attn"), d);
            s.layer_norm(&format!("{p}.ln_ffn"), d);
            s.ffn(&format!("{p}.ffn"), d, cfg.ffn_ratio);
        }
    }
    for l in 0..cfg.pyramid_levels {
        let p = format!("pyramid.{l}");
        for m in ["audio", "visual"] {
            let std = 1.0 / (KERNEL as f64).sqrt();
            s.push(format!("{p}.down.{m}.w"), vec![KERNEL, d], Init::Normal(std));
            s.push(format!("{p}.down.{m}.b"), vec![d], Init::Const(0.0));
            s.layer_norm(&format!("{p}.down.{m}.ln"), d);
        }
        s.attention(&format!("{p}.mca"), d);
        for dir in ["va", "av"] {
            s.layer_norm(&format!("{p}.{dir}.ln_query"), d);
            s.layer_norm(&format!("{p}.{dir}.ln_kv"), d);
            s.layer_norm(&format!("{p}.{dir}.ln_ffn"), d);
            s.ffn(&format!("{p}.{dir}.ffn"), d, cfg.ffn_ratio);
        }
    }
    if cfg.use_dependency {
        let (ch, h) = (cfg.hidden_classes, cfg.dependency_dim);
        s.linear("dependency.in", 2 * d, ch * h);
        for (branch, on) in [("simultaneous", cfg.simultaneous_branch), ("consecutive", cfg.consecutive_branch)] {
            if on {
                let p = format!("dependency.{branch}");
                s.layer_norm(&format!("{p}.ln_attn"), h);
                s.attention(&format!("{p}.attn"), h);
                s.layer_norm(&format!("{p}.ln_ffn"), h);
                s.ffn(&format!("{p}.ffn"), h, cfg.ffn_ratio);
            }
        }
        s.linear("dependency.out", ch * h, 2 * d);
    }
    let f = cfg.head_width();
    let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
    s.conv("heads.cls.conv0", 2 * d, f, 0.0);
    s.layer_norm("heads.cls.ln0", f);
    s.conv("heads.cls.conv1", f, f, 0.0);
    s.layer_norm("heads.cls.ln1", f);
    s.conv("heads.cls.conv2", f, cfg.classes, prior_bias);
    s.conv("heads.reg.conv0", 2 * d, f, 0.0);
    s.conv("heads.reg.conv1", f, f, 0.0);
    s.conv("heads.reg.conv2", f, cfg.regression_channels(), REG_BIAS_INIT);
    s.0
}

/// Number of scalar parameters implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Const(c) => vec![c as f32; n],
            Init::Normal(std) => {
                // One stream per parameter keeps values stable when unrelated
                // parameters are added or removed.
                let mut rng = SeededRng::new(seed).fork(name_hash(&spec.name));
                (0..n).map(|_| rng.truncated_normal(std) as f32).collect()
            }
        };
        store.insert(spec.name, Tensor::new(spec.shape, data)?)?;
    }
    Ok(store)
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
