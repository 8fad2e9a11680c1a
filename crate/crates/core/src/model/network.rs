//! The forward pass, one function per stage.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Session, Tensor, Var};

use super::layers::{attention, conv, ffn, layer_norm, linear, positional_encoding, self_attention_block};
use super::{InputModality, ModelConfig};

/// Padded, masked input for one video.
#[derive(Debug, Clone)]
pub struct ModelInput<S> {
    /// `[T, audio_dim]`
    pub audio: Tensor<S>,
    /// `[T, visual_dim]`
    pub visual: Tensor<S>,
    /// `[T]`, 1 for valid steps.
    pub mask: Vec<S>,
}

impl<S: Scalar> ModelInput<S> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m != S::zero()).count()
    }
}

/// One pyramid level: features `[T_l, 2D]` and their mask.
#[derive(Debug, Clone)]
pub struct PyramidLevel<S> {
    pub features: Var,
    pub mask: Vec<S>,
    pub valid_len: usize,
}

#[derive(Debug, Clone)]
pub struct LevelOutput<S> {
    /// Class probabilities `[T_l, C]`.
    pub cls: Var,
    /// Non-negative boundary distances `[T_l, 2C]`; start distances in
    /// columns `0..C`, end distances in `C..2C`.
    pub reg: Var,
    pub mask: Vec<S>,
    pub valid_len: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// Cross-modal pyramid before dependency modeling.
    pub pyramid: Vec<PyramidLevel<S>>,
    /// Pyramid after dependency modeling (identical when it is disabled).
    pub refined: Vec<Var>,
    pub levels: Vec<LevelOutput<S>>,
}

fn level_mask<S: Scalar>(len: usize, valid: usize) -> Vec<S> {
    (0..len).map(|i| if i < valid { S::one() } else { S::zero() }).collect()
}

/// Checks the input layout and that the mask is a valid prefix.
fn check_input<S: Scalar>(cfg: &ModelConfig, input: &ModelInput<S>) -> Result<usize> {
    let t = input.len();
    let bad = |detail: String| Err(Error::shape("forward", detail));
    if input.audio.shape() != [t, cfg.audio_dim] || input.visual.shape() != [t, cfg.visual_dim] {
        return bad(format!(
            "audio {:?} visual {:?} for mask of length {t}, expected widths {} and {}",
            input.audio.shape(),
            input.visual.shape(),
            cfg.audio_dim,
            cfg.visual_dim
        ));
    }
    let valid = input.valid_len();
    if valid == 0 {
        return bad("mask has no valid steps".into());
    }
    if input.mask[..valid].iter().any(|&m| m != S::one()) || input.mask[valid..].iter().any(|&m| m != S::zero()) {
        return bad("mask must be a prefix of ones followed by zeros".into());
    }
    Ok(valid)
}

/// Two masked convolutions with ReLU per modality, mapping features to width `D`.
pub fn project_inputs<S: Scalar>(s: &mut Session<S>, cfg: &ModelConfig, input: &ModelInput<S>) -> Result<(Var, Var)> {
    check_input(cfg, input)?;
    let mask = &input.mask[..];
    let mut out = Vec::with_capacity(2);
    for (m, x, keep) in [
        ("audio", &input.audio, cfg.modality != InputModality::Visual),
        ("visual", &input.visual, cfg.modality != InputModality::Audio),
    ] {
        let x = if keep { x.clone() } else { Tensor::zeros(x.shape()) };
        let x = s.graph.constant(x)?;
        let x = s.graph.mask_rows(x, mask)?;
        let h = conv(s, &format!("proj.{m}.conv0"), x)?;
        let h = s.graph.relu(h)?;
        let h = s.graph.mask_rows(h, mask)?;
        let h = conv(s, &format!("proj.{m}.conv1"), h)?;
        let h = s.graph.relu(h)?;
        out.push(s.graph.mask_rows(h, mask)?);
    }
    Ok((out[0], out[1]))
}

/// Positional encoding (when enabled) followed by `L_s` masked
/// self-attention blocks per modality.
pub fn encode_unimodal<S: Scalar>(s: &mut Session<S>, cfg: &ModelConfig, audio: Var, visual: Var, mask: &[S]) -> Result<(Var, Var)> {
    let mut out = [audio, visual];
    if cfg.use_positional {
        let table = positional_encoding(mask.len(), cfg.embed_dim);
        let t = Tensor::new(vec![mask.len(), cfg.embed_dim], table.into_iter().map(S::of).collect())?;
        let pe = s.graph.constant(t)?;
        for x in out.iter_mut() {
            let y = s.graph.add(*x, pe)?;
            *x = s.graph.mask_rows(y, mask)?;
        }
    }
    for (i, m) in ["audio", "visual"].iter().enumerate() {
        for b in 0..cfg.unimodal_blocks {
            let y = self_attention_block(s, &format!("unimodal.{m}.{b}"), out[i], cfg.heads, Some(mask))?;
            out[i] = s.graph.mask_rows(y, mask)?;
        }
    }
    Ok((out[0], out[1]))
}

/// One direction of cross-modal attention at a level: queries from `q_src`,
/// keys and values from `kv_src`, with the residual on `kv_src`.
fn cross_direction<S: Scalar>(
    s: &mut Session<S>,
    cfg: &ModelConfig,
    level: usize,
    dir: &str,
    q_src: Var,
    kv_src: Var,
    mask: &[S],
) -> Result<Var> {
    let p = format!("pyramid.{level}");
    let q = layer_norm(s, &format!("{p}.{dir}.ln_query"), q_src)?;
    let kv = layer_norm(s, &format!("{p}.{dir}.ln_kv"), kv_src)?;
    let a = attention(s, &format!("{p}.mca"), q, kv, cfg.heads, Some(mask), Some(mask))?;
    let x = s.graph.add(kv_src, a)?;
    let h = layer_norm(s, &format!("{p}.{dir}.ln_ffn"), x)?;
    let f = ffn(s, &format!("{p}.{dir}.ffn"), h)?;
    let x = s.graph.add(x, f)?;
    s.graph.mask_rows(x, mask)
}

/// `L_c` levels of downsampling plus bidirectional cross-modal attention.
/// Level `l` has length `ceil(T / 2^(l-1))` when downsampling is on.
pub fn cross_modal_pyramid<S: Scalar>(
    s: &mut Session<S>,
    cfg: &ModelConfig,
    audio: Var,
    visual: Var,
    mask: &[S],
) -> Result<Vec<PyramidLevel<S>>> {
    let valid0 = mask.iter().filter(|&&m| m != S::zero()).count();
    let (mut a, mut v) = (audio, visual);
    let (mut len, mut valid) = (mask.len(), valid0);
    let mut levels = Vec::with_capacity(cfg.pyramid_levels);
    for l in 0..cfg.pyramid_levels {
        let stride = cfg.level_stride(l);
        len = len.div_ceil(stride);
        valid = valid.div_ceil(stride);
        let lmask = level_mask::<S>(len, valid);
        let mut down = [a, v];
        for (i, m) in ["audio", "visual"].iter().enumerate() {
            let p = format!("pyramid.{l}.down.{m}");
            let w = s.param(&format!("{p}.w"))?;
            let b = s.param(&format!("{p}.b"))?;
            let x = s.graph.depthwise_conv1d(down[i], w, b, stride)?;
            let x = layer_norm(s, &format!("{p}.ln"), x)?;
            down[i] = s.graph.mask_rows(x, &lmask)?;
        }
        let [a_ds, v_ds] = down;
        // Audio-guided visual features and visual-guided audio features.
        let f_va = cross_direction(s, cfg, l, "va", a_ds, v_ds, &lmask)?;
        let f_av = cross_direction(s, cfg, l, "av", v_ds, a_ds, &lmask)?;
        let z = s.graph.concat(f_va, f_av)?;
        levels.push(PyramidLevel {
            features: z,
            mask: lmask,
            valid_len: valid,
        });
        a = f_av;
        v = f_va;
    }
    Ok(levels)
}

/// Event dependency modeling on one level `[T, 2D] -> [T, 2D]`.
///
/// Features are lifted to `C′` latent classes of width `H`. The
/// simultaneous branch attends across classes at each step; the consecutive
/// branch attends across valid steps within each class. Parameters are
/// shared by every level.
pub fn model_dependencies<S: Scalar>(s: &mut Session<S>, cfg: &ModelConfig, z: Var, mask: &[S]) -> Result<Var> {
    if !cfg.use_dependency {
        return Ok(z);
    }
    let (ch, h) = (cfg.hidden_classes, cfg.dependency_dim);
    let t = s.graph.shape(z)[0];
    let x = linear(s, "dependency.in", z)?;
    let x = s.graph.reshape(x, &[t, ch, h])?;
    let mut merged = x;
    if cfg.simultaneous_branch {
        let y = self_attention_block(s, "dependency.simultaneous", x, cfg.dependency_heads, None)?;
        let delta = s.graph.sub(y, x)?;
        merged = s.graph.add(merged, delta)?;
    }
    if cfg.consecutive_branch {
        let xt = s.graph.swap01(x)?;
        let m: Vec<S> = (0..ch).flat_map(|_| mask.iter().copied()).collect();
        let y = self_attention_block(s, "dependency.consecutive", xt, cfg.dependency_heads, Some(&m))?;
        let y = s.graph.swap01(y)?;
        let delta = s.graph.sub(y, x)?;
        merged = s.graph.add(merged, delta)?;
    }
    let flat = s.graph.reshape(merged, &[t, ch * h])?;
    let out = linear(s, "dependency.out", flat)?;
    let out = s.graph.add(z, out)?;
    s.graph.mask_rows(out, mask)
}

/// Classification and regression heads for one level, shared across levels.
pub fn heads_forward<S: Scalar>(s: &mut Session<S>, cfg: &ModelConfig, z: Var, mask: &[S]) -> Result<(Var, Var)> {
    let mut h = z;
    for i in 0..2 {
        h = conv(s, &format!("heads.cls.conv{i}"), h)?;
        h = layer_norm(s, &format!("heads.cls.ln{i}"), h)?;
        h = s.graph.relu(h)?;
        h = s.graph.mask_rows(h, mask)?;
    }
    let logits = conv(s, "heads.cls.conv2", h)?;
    let cls = s.graph.sigmoid(logits)?;

    let mut h = z;
    for i in 0..2 {
        h = conv(s, &format!("heads.reg.conv{i}"), h)?;
        h = s.graph.relu(h)?;
        h = s.graph.mask_rows(h, mask)?;
    }
    let d = conv(s, "heads.reg.conv2", h)?;
    let d = s.graph.relu(d)?;
    let reg = if cfg.class_aware_regression {
        d
    } else {
        s.graph.tile(d, cfg.classes)?
    };
    Ok((cls, reg))
}

/// Full forward pass for one padded video.
pub fn forward<S: Scalar>(s: &mut Session<S>, cfg: &ModelConfig, input: &ModelInput<S>) -> Result<ForwardOutput<S>> {
    cfg.validate()?;
    let (a, v) = project_inputs(s, cfg, input)?;
    let (a, v) = encode_unimodal(s, cfg, a, v, &input.mask)?;
    let pyramid = cross_modal_pyramid(s, cfg, a, v, &input.mask)?;
    let mut refined = Vec::with_capacity(pyramid.len());
    let mut levels = Vec::with_capacity(pyramid.len());
    for lvl in &pyramid {
        let z = model_dependencies(s, cfg, lvl.features, &lvl.mask)?;
        let (cls, reg) = heads_forward(s, cfg, z, &lvl.mask)?;
        refined.push(z);
        levels.push(LevelOutput {
            cls,
            reg,
            mask: lvl.mask.clone(),
            valid_len: lvl.valid_len,
        });
    }
    Ok(ForwardOutput { pyramid, refined, levels })
}
