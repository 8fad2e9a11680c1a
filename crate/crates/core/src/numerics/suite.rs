//! Finite-difference checks over the whole primitive catalog.

use crate::error::Result;

use super::{grad_check, GiouTarget, GradCheckReport, ParamStore, Primitive, SeededRng, Tensor};

fn random(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Values bounded away from zero, for inputs that pass through kinks.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.range(0.2, 1.5);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).expect("shape")
}

/// One representative instance of every primitive, with inputs placed away
/// from non-differentiable points.
pub fn primitive_cases(seed: u64) -> Vec<(Primitive, Vec<Tensor<f64>>)> {
    let mut r = SeededRng::new(seed);
    let r = &mut r;
    let mask5 = vec![1.0, 1.0, 0.0, 1.0, 0.0];
    vec![
        (Primitive::MatMul, vec![random(r, &[2, 3, 4]), random(r, &[4, 5])]),
        (Primitive::Add, vec![random(r, &[3, 4]), random(r, &[3, 4])]),
        (Primitive::Sub, vec![random(r, &[3, 4]), random(r, &[3, 4])]),
        (Primitive::Mul, vec![random(r, &[3, 4]), random(r, &[3, 4])]),
        (Primitive::AddBias, vec![random(r, &[3, 4]), random(r, &[4])]),
        (Primitive::Scale(-1.7), vec![random(r, &[6])]),
        (Primitive::Relu, vec![away_from_zero(r, &[4, 5])]),
        (Primitive::Sigmoid, vec![random(r, &[4, 5])]),
        (Primitive::Softmax, vec![random(r, &[3, 6])]),
        (
            Primitive::LayerNorm,
            vec![random(r, &[4, 6]), uniform(r, &[6], 0.5, 1.5), random(r, &[6])],
        ),
        (
            Primitive::Conv1d,
            vec![random(r, &[7, 3]), random(r, &[3, 3, 4]), random(r, &[4])],
        ),
        (
            Primitive::DepthwiseConv1d { stride: 1 },
            vec![random(r, &[6, 4]), random(r, &[3, 4]), random(r, &[4])],
        ),
        (
            Primitive::DepthwiseConv1d { stride: 2 },
            vec![random(r, &[7, 4]), random(r, &[3, 4]), random(r, &[4])],
        ),
        (Primitive::Concat, vec![random(r, &[3, 2]), random(r, &[3, 5])]),
        (Primitive::Reshape(vec![4, 3]), vec![random(r, &[2, 6])]),
        (Primitive::Transpose, vec![random(r, &[3, 5])]),
        (Primitive::Swap01, vec![random(r, &[2, 3, 4])]),
        (
            Primitive::MaskAxis {
                mask: vec![1.0, 0.0, 1.0],
                axis: 1,
            },
            vec![random(r, &[2, 3, 4])],
        ),
        (Primitive::MaskedMean { mask: mask5.clone() }, vec![random(r, &[5, 3])]),
        (
            Primitive::Attention {
                heads: 2,
                key_mask: Some(mask5.clone()),
                query_mask: Some(vec![1.0, 1.0, 1.0, 0.0]),
            },
            vec![random(r, &[4, 6]), random(r, &[5, 6]), random(r, &[5, 4])],
        ),
        (
            Primitive::Attention {
                heads: 1,
                key_mask: None,
                query_mask: None,
            },
            vec![random(r, &[3, 4, 4]), random(r, &[3, 4, 4]), random(r, &[3, 4, 4])],
        ),
        (Primitive::Tile(3), vec![random(r, &[4, 2])]),
        (Primitive::Sum, vec![random(r, &[3, 3])]),
        (
            Primitive::FocalSum {
                targets: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
                weights: vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0],
                alpha: 0.25,
                gamma: 2.0,
            },
            vec![uniform(r, &[6], 0.05, 0.95)],
        ),
        (
            Primitive::GiouSum {
                classes: 2,
                targets: vec![
                    GiouTarget { row: 0, class: 0, start: 1.3, end: 0.4 },
                    GiouTarget { row: 1, class: 1, start: 0.2, end: 2.5 },
                    GiouTarget { row: 2, class: 0, start: 0.9, end: 0.9 },
                ],
            },
            vec![Tensor::new(
                vec![3, 4],
                vec![0.8, 1.1, 0.7, 0.3, 0.5, 0.6, 1.4, 1.9, 1.2, 0.1, 0.5, 0.6],
            )
            .expect("shape")],
        ),
    ]
}

/// Grad-checks `op` at `inputs` by differentiating `Σ out ∘ W` for a fixed
/// random `W`, treating every input as a parameter.
pub fn check_primitive(
    op: &Primitive,
    inputs: &[Tensor<f64>],
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("in{i}"), t.clone())?;
    }
    let probe = {
        let vars = {
            let mut g = super::Graph::new();
            let vs = inputs
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            let out = op.record(&mut g, &vs)?;
            g.value(out).shape().to_vec()
        };
        random(&mut SeededRng::new(seed ^ 0xA5A5), &vars)
    };
    grad_check(&store, h, None, seed, |sess| {
        let vars = (0..inputs.len())
            .map(|i| sess.param(&format!("in{i}")))
            .collect::<Result<Vec<_>>>()?;
        let out = op.record(&mut sess.graph, &vars)?;
        let w = sess.graph.constant(probe.clone())?;
        let weighted = sess.graph.mul(out, w)?;
        sess.graph.sum(weighted)
    })
}

/// Runs [`check_primitive`] over [`primitive_cases`].
pub fn check_all_primitives(h: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    primitive_cases(seed)
        .into_iter()
        .map(|(op, inputs)| Ok((op.name().to_owned(), check_primitive(&op, &inputs, h, seed)?)))
        .collect()
}
