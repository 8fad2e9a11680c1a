//! Value-level access to the primitive catalog.

use crate::error::{Error, Result};

use super::{GiouTarget, Graph, Scalar, Tensor, Var};

/// A primitive together with its non-tensor attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale(f64),
    Relu,
    Sigmoid,
    Softmax,
    /// Inputs: x, gamma, beta.
    LayerNorm,
    /// Inputs: x `[T, Cin]`, w `[K, Cin, Cout]`, b `[Cout]`.
    Conv1d,
    /// Inputs: x `[T, C]`, w `[K, C]`, b `[C]`.
    DepthwiseConv1d { stride: usize },
    Concat,
    Reshape(Vec<usize>),
    Transpose,
    Swap01,
    MaskAxis { mask: Vec<f64>, axis: usize },
    MaskedMean { mask: Vec<f64> },
    /// Inputs: q, k, v.
    Attention {
        heads: usize,
        key_mask: Option<Vec<f64>>,
        query_mask: Option<Vec<f64>>,
    },
    Tile(usize),
    Sum,
    FocalSum {
        targets: Vec<f64>,
        weights: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    GiouSum { classes: usize, targets: Vec<GiouTarget> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddBias => "add_bias",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Conv1d => "conv1d",
            Primitive::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Primitive::Concat => "concat",
            Primitive::Reshape(_) => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Swap01 => "swap01",
            Primitive::MaskAxis { .. } => "mask_axis",
            Primitive::MaskedMean { .. } => "masked_mean",
            Primitive::Attention { .. } => "attention",
            Primitive::Tile(_) => "tile",
            Primitive::Sum => "sum",
            Primitive::FocalSum { .. } => "focal_sum",
            Primitive::GiouSum { .. } => "giou_sum",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::AddBias | Primitive::Concat => 2,
            Primitive::LayerNorm | Primitive::Conv1d | Primitive::DepthwiseConv1d { .. } | Primitive::Attention { .. } => 3,
            _ => 1,
        }
    }

    /// Records this primitive on `g`.
    pub fn record<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.arity() {
            return Err(Error::shape(
                "eval_primitive",
                format!("`{}` takes {} inputs, got {}", self.name(), self.arity(), inputs.len()),
            ));
        }
        let cast = |v: &[f64]| v.iter().map(|&x| S::of(x)).collect::<Vec<S>>();
        let i = inputs;
        match self {
            Primitive::MatMul => g.matmul(i[0], i[1]),
            Primitive::Add => g.add(i[0], i[1]),
            Primitive::Sub => g.sub(i[0], i[1]),
            Primitive::Mul => g.mul(i[0], i[1]),
            Primitive::AddBias => g.add_bias(i[0], i[1]),
            Primitive::Scale(k) => g.scale(i[0], *k),
            Primitive::Relu => g.relu(i[0]),
            Primitive::Sigmoid => g.sigmoid(i[0]),
            Primitive::Softmax => g.softmax(i[0]),
            Primitive::LayerNorm => g.layer_norm(i[0], i[1], i[2]),
            Primitive::Conv1d => g.conv1d(i[0], i[1], i[2]),
            Primitive::DepthwiseConv1d { stride } => g.depthwise_conv1d(i[0], i[1], i[2], *stride),
            Primitive::Concat => g.concat(i[0], i[1]),
            Primitive::Reshape(shape) => g.reshape(i[0], shape),
            Primitive::Transpose => g.transpose(i[0]),
            Primitive::Swap01 => g.swap01(i[0]),
            Primitive::MaskAxis { mask, axis } => g.mask_axis(i[0], &cast(mask), *axis),
            Primitive::MaskedMean { mask } => g.masked_mean(i[0], &cast(mask)),
            Primitive::Attention {
                heads,
                key_mask,
                query_mask,
            } => {
                let km = key_mask.as_deref().map(cast);
                let qm = query_mask.as_deref().map(cast);
                g.attention(i[0], i[1], i[2], *heads, km.as_deref(), qm.as_deref())
            }
            Primitive::Tile(reps) => g.tile(i[0], *reps),
            Primitive::Sum => g.sum(i[0]),
            Primitive::FocalSum {
                targets,
                weights,
                alpha,
                gamma,
            } => g.focal_sum(i[0], &cast(targets), &cast(weights), *alpha, *gamma),
            Primitive::GiouSum { classes, targets } => g.giou_sum(i[0], *classes, targets),
        }
    }
}

/// Evaluates one primitive on concrete tensors.
pub fn eval_primitive<S: Scalar>(op: &Primitive, inputs: &[Tensor<S>]) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = op.record(&mut g, &vars)?;
    Ok(g.value(out).clone())
}
