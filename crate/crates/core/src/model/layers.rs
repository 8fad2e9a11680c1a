//! Parameterized building blocks shared by the network stages.

use crate::error::Result;
use crate::numerics::{Scalar, Session, Var};

pub(crate) fn linear<S: Scalar>(s: &mut Session<S>, p: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{p}.w"))?;
    let b = s.param(&format!("{p}.b"))?;
    let y = s.graph.matmul(x, w)?;
    s.graph.add_bias(y, b)
}

pub(crate) fn conv<S: Scalar>(s: &mut Session<S>, p: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{p}.w"))?;
    let b = s.param(&format!("{p}.b"))?;
    s.graph.conv1d(x, w, b)
}

pub(crate) fn layer_norm<S: Scalar>(s: &mut Session<S>, p: &str, x: Var) -> Result<Var> {
    let g = s.param(&format!("{p}.g"))?;
    let b = s.param(&format!("{p}.b"))?;
    s.graph.layer_norm(x, g, b)
}

pub(crate) fn ffn<S: Scalar>(s: &mut Session<S>, p: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{p}.fc1"), x)?;
    let h = s.graph.relu(h)?;
    linear(s, &format!("{p}.fc2"), h)
}

/// Projected multi-head attention: queries from `xq`, keys and values from `xkv`.
pub(crate) fn attention<S: Scalar>(
    s: &mut Session<S>,
    p: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    key_mask: Option<&[S]>,
    query_mask: Option<&[S]>,
) -> Result<Var> {
    let q = linear(s, &format!("{p}.q"), xq)?;
    let k = linear(s, &format!("{p}.k"), xkv)?;
    let v = linear(s, &format!("{p}.v"), xkv)?;
    let a = s.graph.attention(q, k, v, heads, key_mask, query_mask)?;
    linear(s, &format!("{p}.o"), a)
}

/// Pre-norm self-attention block followed by a pre-norm feed-forward block.
/// Returns the block output; rows are left unmasked.
pub(crate) fn self_attention_block<S: Scalar>(
    s: &mut Session<S>,
    p: &str,
    x: Var,
    heads: usize,
    mask: Option<&[S]>,
) -> Result<Var> {
    let h = layer_norm(s, &format!("{p}.ln_attn"), x)?;
    let a = attention(s, &format!("{p}.attn"), h, h, heads, mask, mask)?;
    let x = s.graph.add(x, a)?;
    let h = layer_norm(s, &format!("{p}.ln_ffn"), x)?;
    let f = ffn(s, &format!("{p}.ffn"), h)?;
    s.graph.add(x, f)
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / freq;
            out[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
