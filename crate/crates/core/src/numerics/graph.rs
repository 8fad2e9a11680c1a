//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs to propagate gradients. Nodes only ever reference earlier nodes, so
//! the tape is already in topological order and `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Additive logit applied to masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Probability clamp used by the focal term.
pub const PROB_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One positive regression target consumed by [`Graph::giou_sum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouTarget {
    pub row: usize,
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<S>,
    },
    DwConv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Concat(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Swap01(Var),
    MaskAxis {
        x: Var,
        mask: Vec<S>,
        axis: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    Tile {
        x: Var,
        reps: usize,
    },
    Sum(Var),
    Focal {
        p: Var,
        targets: Vec<S>,
        weights: Vec<S>,
        alpha: S,
        gamma: S,
    },
    Giou {
        d: Var,
        classes: usize,
        items: Vec<GiouTarget>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// A recording of primitive evaluations that can be differentiated.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

fn check_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Domain {
            op,
            detail: format!("non-finite value at flat index {pos}"),
        });
    }
    Ok(())
}

fn check_mask<S: Scalar>(op: &'static str, mask: &[S]) -> Result<()> {
    if mask.iter().any(|&m| m != S::zero() && m != S::one()) {
        return Err(Error::Domain {
            op,
            detail: "mask entries must be 0 or 1".into(),
        });
    }
    Ok(())
}

/// Adds `src` into `dst` element-wise.
fn axpy<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var> {
        check_finite("constant", &t)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// A value that receives gradients.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var> {
        check_finite("leaf", &t)?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// `[.., k] × [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} × {}", dims_str(ash), dims_str(bsh)),
            ));
        }
        let k = bsh[0];
        let n = bsh[1];
        let m = self.value(a).len() / k.max(1);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            S::zero(),
            &mut out,
            n,
            1,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", dims_str(self.shape(a)), dims_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {} for input {}", dims_str(self.shape(bias)), dims_str(self.shape(x))),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d.max(1)) {
            axpy(row, &b);
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = S::of(k);
        let t = self.map(x, |v| v * k);
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Scale(x, k), ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| if v > S::zero() { v } else { S::zero() });
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Relu(x), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| {
            if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        });
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Sigmoid(x), ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let d = t.last_dim();
        if d == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        for row in t.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {} with gamma {} beta {}",
                    dims_str(self.shape(x)),
                    dims_str(self.shape(gamma)),
                    dims_str(self.shape(beta))
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = S::one() / S::of(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// "Same"-padded 1-D convolution, stride 1.
    ///
    /// `x: [T, Cin]`, `w: [K, Cin, Cout]` with odd `K`, `b: [Cout]` -> `[T, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] || ws[0] % 2 == 0 || bs != [ws[2]] {
            return Err(Error::shape(
                "conv1d",
                format!("x {} w {} b {}", dims_str(xs), dims_str(ws), dims_str(bs)),
            ));
        }
        let (t, cin) = (xs[0], xs[1]);
        let (kk, cout) = (ws[0], ws[2]);
        let half = kk / 2;
        let xd = self.value(x).data();
        let mut cols = vec![S::zero(); t * kk * cin];
        for i in 0..t {
            for k in 0..kk {
                let src = i as isize + k as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let dst = i * kk * cin + k * cin;
                cols[dst..dst + cin].copy_from_slice(&xd[src * cin..(src + 1) * cin]);
            }
        }
        let mut out = vec![S::zero(); t * cout];
        for row in out.chunks_mut(cout.max(1)) {
            row.copy_from_slice(self.value(b).data());
        }
        S::gemm(
            t,
            kk * cin,
            cout,
            S::one(),
            &cols,
            kk * cin,
            1,
            self.value(w).data(),
            cout,
            1,
            S::one(),
            &mut out,
            cout,
            1,
        );
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![t, cout], out)?,
            Op::Conv1d { x, w, b, cols },
            ng,
        ))
    }

    /// Depth-wise "same"-padded 1-D convolution with stride.
    ///
    /// `x: [T, C]`, `w: [K, C]`, `b: [C]` -> `[ceil(T / stride), C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if stride == 0 || xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || ws[0] % 2 == 0 || bs != [xs[1]] {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!(
                    "x {} w {} b {} stride {stride}",
                    dims_str(xs),
                    dims_str(ws),
                    dims_str(bs)
                ),
            ));
        }
        let (t, c) = (xs[0], xs[1]);
        let kk = ws[0];
        let half = kk / 2;
        let tout = t.div_ceil(stride);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = Vec::with_capacity(tout * c);
        for _ in 0..tout {
            out.extend_from_slice(self.value(b).data());
        }
        for i in 0..tout {
            for k in 0..kk {
                let src = (i * stride + k) as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                let orow = &mut out[i * c..(i + 1) * c];
                let xrow = &xd[src * c..(src + 1) * c];
                let wrow = &wd[k * c..(k + 1) * c];
                for j in 0..c {
                    orow[j] += wrow[j] * xrow[j];
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![tout, c], out)?,
            Op::DwConv { x, w, b, stride },
            ng,
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", format!("{} with {}", dims_str(sa), dims_str(sb))));
        }
        let (da, db) = (va.last_dim(), vb.last_dim());
        let rows = va.rows();
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&vb.data()[r * db..(r + 1) * db]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `[m, n] -> [n, m]`
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {}", dims_str(xs))));
        }
        let (m, n) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), ng))
    }

    /// `[a, b, c] -> [b, a, c]`
    pub fn swap01(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::shape("swap01", format!("expected rank 3, got {}", dims_str(xs))));
        }
        let (a, b, c) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); a * b * c];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * c;
                let dst = (j * a + i) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![b, a, c], out)?, Op::Swap01(x), ng))
    }

    /// Multiplies every slice along `axis` by the matching 0/1 mask entry.
    pub fn mask_axis(&mut self, x: Var, mask: &[S], axis: usize) -> Result<Var> {
        let xs = self.shape(x);
        if axis >= xs.len() || xs[axis] != mask.len() {
            return Err(Error::shape(
                "mask_axis",
                format!("mask of length {} on axis {axis} of {}", mask.len(), dims_str(xs)),
            ));
        }
        check_mask("mask_axis", mask)?;
        let post: usize = xs[axis + 1..].iter().product();
        let len = xs[axis];
        let mut t = self.value(x).clone();
        for (chunk_ix, chunk) in t.data_mut().chunks_mut(post.max(1)).enumerate() {
            let m = mask[chunk_ix % len];
            if m == S::zero() {
                chunk.iter_mut().for_each(|v| *v = S::zero());
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            t,
            Op::MaskAxis {
                x,
                mask: mask.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Zeroes rows of a `[T, ..]` tensor where `mask` is 0.
    pub fn mask_rows(&mut self, x: Var, mask: &[S]) -> Result<Var> {
        self.mask_axis(x, mask, 0)
    }

    /// Mean over valid rows: `[T, D]`, mask `[T]` -> `[D]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[S]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] != mask.len() {
            return Err(Error::shape(
                "masked_mean",
                format!("mask of length {} for {}", mask.len(), dims_str(xs)),
            ));
        }
        check_mask("masked_mean", mask)?;
        let count = mask.iter().copied().sum::<S>();
        if count == S::zero() {
            return Err(Error::Domain {
                op: "masked_mean",
                detail: "mask selects no rows".into(),
            });
        }
        let d = xs[1];
        let mut out = vec![S::zero(); d];
        for (r, row) in self.value(x).data().chunks(d.max(1)).enumerate() {
            if mask[r] != S::zero() {
                axpy(&mut out, row);
            }
        }
        out.iter_mut().for_each(|v| *v /= count);
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(vec![d], out)?,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [B, Lq, D]`, `k: [B, Lk, D]`, `v: [B, Lk, Dv]` (rank-2 inputs are
    /// treated as `B = 1`). `key_mask` (`[B·Lk]`) adds [`MASK_LOGIT`] to
    /// masked keys before the softmax; a query row whose keys are all masked,
    /// or which is itself masked by `query_mask` (`[B·Lq]`), yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[S]>,
        query_mask: Option<&[S]>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let as3 = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match *s {
                [l, d] => Some((1, l, d)),
                [b, l, d] => Some((b, l, d)),
                _ => None,
            }
        };
        let bad = || {
            Error::shape(
                "attention",
                format!(
                    "q {} k {} v {} heads {heads}",
                    dims_str(&qs),
                    dims_str(&ks),
                    dims_str(&vs)
                ),
            )
        };
        let ((bq, lq, dq), (bk, lk, dk), (bv, lv, dv)) = match (as3(&qs), as3(&ks), as3(&vs)) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(bad()),
        };
        if qs.len() != ks.len()
            || qs.len() != vs.len()
            || bq != bk
            || bk != bv
            || lk != lv
            || dq != dk
            || heads == 0
            || dq % heads != 0
            || dv % heads != 0
        {
            return Err(bad());
        }
        if let Some(m) = key_mask {
            if m.len() != bk * lk {
                return Err(Error::shape("attention", format!("key mask length {} != {}", m.len(), bk * lk)));
            }
            check_mask("attention", m)?;
        }
        if let Some(m) = query_mask {
            if m.len() != bq * lq {
                return Err(Error::shape("attention", format!("query mask length {} != {}", m.len(), bq * lq)));
            }
            check_mask("attention", m)?;
        }
        let (b, dh, dvh) = (bq, dq / heads, dv / heads);
        let scale = S::one() / S::of(dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![S::zero(); b * heads * lq * lk];
        let mut out = vec![S::zero(); b * lq * dv];
        for bi in 0..b {
            for h in 0..heads {
                let p = &mut probs[((bi * heads + h) * lq) * lk..((bi * heads + h + 1) * lq) * lk];
                S::gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    &qd[bi * lq * dq + h * dh..],
                    dq,
                    1,
                    &kd[bi * lk * dq + h * dh..],
                    1,
                    dq,
                    S::zero(),
                    p,
                    lk,
                    1,
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let q_masked = query_mask.is_some_and(|m| m[bi * lq + i] == S::zero());
                    let mut any_valid = !q_masked;
                    if let Some(m) = key_mask {
                        let km = &m[bi * lk..(bi + 1) * lk];
                        if km.iter().all(|&x| x == S::zero()) {
                            any_valid = false;
                        }
                        for (s, &mk) in row.iter_mut().zip(km) {
                            if mk == S::zero() {
                                *s += S::of(MASK_LOGIT);
                            }
                        }
                    }
                    if any_valid {
                        softmax_in_place(row);
                    } else {
                        row.iter_mut().for_each(|x| *x = S::zero());
                    }
                }
                S::gemm(
                    lq,
                    lk,
                    dvh,
                    S::one(),
                    p,
                    lk,
                    1,
                    &vd[bi * lk * dv + h * dvh..],
                    dv,
                    1,
                    S::zero(),
                    &mut out[bi * lq * dv + h * dvh..],
                    dv,
                    1,
                );
            }
        }
        let mut shape = qs.clone();
        *shape.last_mut().unwrap() = dv;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Attention probabilities `[B, heads, Lq, Lk]` recorded by an
    /// [`attention`](Self::attention) node.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[T, K] -> [T, K·reps]` with `out[t, k·reps + r] = x[t, k]`.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || reps == 0 {
            return Err(Error::shape("tile", format!("{} reps {reps}", dims_str(xs))));
        }
        let (t, k) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(t * k * reps);
        for i in 0..t {
            for j in 0..k {
                out.extend(std::iter::repeat_n(xd[i * k + j], reps));
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![t, k * reps], out)?, Op::Tile { x, reps }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    /// Weighted sum of binary focal terms over every element of `p`.
    ///
    /// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; clamped
    /// entries receive no gradient.
    pub fn focal_sum(&mut self, p: Var, targets: &[S], weights: &[S], alpha: f64, gamma: f64) -> Result<Var> {
        let n = self.value(p).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "focal_sum",
                format!("{n} probabilities, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let (alpha, gamma) = (S::of(alpha), S::of(gamma));
        let mut total = S::zero();
        for ((&pv, &y), &w) in self.value(p).data().iter().zip(targets).zip(weights) {
            if w != S::zero() {
                total += w * focal_value(pv, y, alpha, gamma);
            }
        }
        let ng = self.ng(&[p]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Focal {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                alpha,
                gamma,
            },
            ng,
        ))
    }

    /// Sum of `1 − IoU` between anchored predicted and target intervals.
    ///
    /// `d: [T, 2·classes]` with start distances in columns `0..classes` and
    /// end distances in `classes..2·classes`.
    pub fn giou_sum(&mut self, d: Var, classes: usize, items: &[GiouTarget]) -> Result<Var> {
        let ds = self.shape(d);
        if ds.len() != 2 || ds[1] != 2 * classes {
            return Err(Error::shape("giou_sum", format!("{} for {classes} classes", dims_str(ds))));
        }
        let t = ds[0];
        let dd = self.value(d).data();
        let mut total = S::zero();
        for it in items {
            if it.row >= t || it.class >= classes {
                return Err(Error::shape("giou_sum", format!("target ({}, {}) outside {}", it.row, it.class, dims_str(ds))));
            }
            if !(it.start + it.end > 0.0) || it.start < 0.0 || it.end < 0.0 {
                return Err(Error::DegenerateTarget(it.start, it.end));
            }
            let ps = dd[it.row * 2 * classes + it.class];
            let pe = dd[it.row * 2 * classes + classes + it.class];
            total += S::of(giou_loss_1d(ps.f64(), pe.f64(), it.start, it.end));
        }
        let ng = self.ng(&[d]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Giou {
                d,
                classes,
                items: items.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from the scalar `output`.
    ///
    /// Gradients are available afterwards via [`grad`](Self::grad).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {}",
                dims_str(self.shape(output))
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![S::one()]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()])
            }};
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let bs = nodes[b.0].value.shape();
                let (k, n) = (bs[0], bs[1]);
                let m = nodes[a.0].value.len() / k.max(1);
                if wants(*a) {
                    let ga = slot!(*a);
                    S::gemm(m, n, k, S::one(), g, n, 1, val(*b), 1, n, S::one(), ga, k, 1);
                }
                if wants(*b) {
                    let gb = slot!(*b);
                    S::gemm(k, m, n, S::one(), val(*a), 1, k, g, n, 1, S::one(), gb, n, 1);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    axpy(slot!(*a), g);
                }
                if wants(*b) {
                    axpy(slot!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot!(*a), g);
                }
                if wants(*b) {
                    for (d, &s) in slot!(*b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let vb = val(*b);
                    for ((d, &s), &y) in slot!(*a).iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    let va = val(*a);
                    for ((d, &s), &x) in slot!(*b).iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    axpy(slot!(*x), g);
                }
                if wants(*b) {
                    let gb = slot!(*b);
                    let d = gb.len().max(1);
                    for row in g.chunks(d) {
                        axpy(gb, row);
                    }
                }
            }
            Op::Scale(x, k) => {
                if wants(*x) {
                    for (d, &s) in slot!(*x).iter_mut().zip(g) {
                        *d += s * *k;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, &s), &xi) in slot!(*x).iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    for ((d, &s), &yi) in slot!(*x).iter_mut().zip(g).zip(y) {
                        *d += s * yi * (S::one() - yi);
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let dlen = node.value.last_dim();
                    let gx = slot!(*x);
                    for r in 0..y.len() / dlen {
                        let yr = &y[r * dlen..(r + 1) * dlen];
                        let gr = &g[r * dlen..(r + 1) * dlen];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..dlen {
                            gx[r * dlen + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gam = val(*gamma);
                if wants(*gamma) {
                    let gg = slot!(*gamma);
                    for (r_g, r_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += r_g[j] * r_h[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot!(*beta);
                    for r_g in g.chunks(d) {
                        axpy(gb, r_g);
                    }
                }
                if wants(*x) {
                    let gx = slot!(*x);
                    let inv_d = S::one() / S::of(d as f64);
                    let mut gh = vec![S::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let rh = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = S::zero();
                        let mut mean_ghh = S::zero();
                        for j in 0..d {
                            gh[j] = rg[j] * gam[j];
                            mean_gh += gh[j];
                            mean_ghh += gh[j] * rh[j];
                        }
                        mean_gh *= inv_d;
                        mean_ghh *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rs * (gh[j] - mean_gh - rh[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, cols } => {
                let ws = nodes[w.0].value.shape();
                let (kk, cin, cout) = (ws[0], ws[1], ws[2]);
                let t = node.value.shape()[0];
                let half = kk / 2;
                if wants(*b) {
                    let gb = slot!(*b);
                    for row in g.chunks(cout) {
                        axpy(gb, row);
                    }
                }
                if wants(*w) {
                    let gw = slot!(*w);
                    S::gemm(kk * cin, t, cout, S::one(), cols, 1, kk * cin, g, cout, 1, S::one(), gw, cout, 1);
                }
                if wants(*x) {
                    let mut gcols = vec![S::zero(); t * kk * cin];
                    S::gemm(t, cout, kk * cin, S::one(), g, cout, 1, val(*w), 1, cout, S::zero(), &mut gcols, kk * cin, 1);
                    let gx = slot!(*x);
                    for i in 0..t {
                        for k in 0..kk {
                            let src = i as isize + k as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            let off = i * kk * cin + k * cin;
                            axpy(&mut gx[src * cin..(src + 1) * cin], &gcols[off..off + cin]);
                        }
                    }
                }
            }
            Op::DwConv { x, w, b, stride } => {
                let ws = nodes[w.0].value.shape();
                let (kk, c) = (ws[0], ws[1]);
                let t = nodes[x.0].value.shape()[0];
                let tout = node.value.shape()[0];
                let half = kk / 2;
                if wants(*b) {
                    let gb = slot!(*b);
                    for row in g.chunks(c) {
                        axpy(gb, row);
                    }
                }
                let xd = val(*x);
                let wd = val(*w);
                let taps = |i: usize, k: usize| -> Option<usize> {
                    let src = (i * stride + k) as isize - half as isize;
                    (src >= 0 && src < t as isize).then_some(src as usize)
                };
                if wants(*w) {
                    let gw = slot!(*w);
                    for i in 0..tout {
                        for k in 0..kk {
                            if let Some(src) = taps(i, k) {
                                for j in 0..c {
                                    gw[k * c + j] += g[i * c + j] * xd[src * c + j];
                                }
                            }
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot!(*x);
                    for i in 0..tout {
                        for k in 0..kk {
                            if let Some(src) = taps(i, k) {
                                for j in 0..c {
                                    gx[src * c + j] += g[i * c + j] * wd[k * c + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let da = nodes[a.0].value.last_dim();
                let db = nodes[b.0].value.last_dim();
                let rows = nodes[a.0].value.rows();
                if wants(*a) {
                    let ga = slot!(*a);
                    for r in 0..rows {
                        axpy(&mut ga[r * da..(r + 1) * da], &g[r * (da + db)..r * (da + db) + da]);
                    }
                }
                if wants(*b) {
                    let gb = slot!(*b);
                    for r in 0..rows {
                        axpy(&mut gb[r * db..(r + 1) * db], &g[r * (da + db) + da..(r + 1) * (da + db)]);
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    axpy(slot!(*x), g);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let xs = nodes[x.0].value.shape();
                    let (m, n) = (xs[0], xs[1]);
                    let gx = slot!(*x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Swap01(x) => {
                if wants(*x) {
                    let xs = nodes[x.0].value.shape();
                    let (a, b, c) = (xs[0], xs[1], xs[2]);
                    let gx = slot!(*x);
                    for i in 0..a {
                        for j in 0..b {
                            let src = (j * a + i) * c;
                            let dst = (i * b + j) * c;
                            axpy(&mut gx[dst..dst + c], &g[src..src + c]);
                        }
                    }
                }
            }
            Op::MaskAxis { x, mask, axis } => {
                if wants(*x) {
                    let xs = nodes[x.0].value.shape();
                    let post: usize = xs[axis + 1..].iter().product();
                    let len = xs[*axis];
                    let gx = slot!(*x);
                    for (ci, (dst, src)) in gx.chunks_mut(post.max(1)).zip(g.chunks(post.max(1))).enumerate() {
                        if mask[ci % len] != S::zero() {
                            axpy(dst, src);
                        }
                    }
                }
            }
            Op::MaskedMean { x, mask } => {
                if wants(*x) {
                    let count = mask.iter().copied().sum::<S>();
                    let d = g.len();
                    let gx = slot!(*x);
                    for (r, &m) in mask.iter().enumerate() {
                        if m != S::zero() {
                            for j in 0..d {
                                gx[r * d + j] += g[j] / count;
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(node, (*q, *k, *v), *heads, probs, g, grads);
            }
            Op::Tile { x, reps } => {
                if wants(*x) {
                    let gx = slot!(*x);
                    for (j, d) in gx.iter_mut().enumerate() {
                        *d += g[j * reps..(j + 1) * reps].iter().copied().sum::<S>();
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let s = g[0];
                    slot!(*x).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Focal {
                p,
                targets,
                weights,
                alpha,
                gamma,
            } => {
                if wants(*p) {
                    let s = g[0];
                    let pv = val(*p);
                    let gp = slot!(*p);
                    for (j, d) in gp.iter_mut().enumerate() {
                        if weights[j] != S::zero() {
                            *d += s * weights[j] * focal_grad(pv[j], targets[j], *alpha, *gamma);
                        }
                    }
                }
            }
            Op::Giou { d, classes, items } => {
                if wants(*d) {
                    let s = g[0].f64();
                    let dv = val(*d);
                    let gd = slot!(*d);
                    let w = 2 * classes;
                    for it in items {
                        let is = it.row * w + it.class;
                        let ie = it.row * w + classes + it.class;
                        let (gs, ge) = giou_loss_1d_grad(dv[is].f64(), dv[ie].f64(), it.start, it.end);
                        gd[is] += S::of(s * gs);
                        gd[ie] += S::of(s * ge);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node<S>,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let nodes = &self.nodes;
        let qs = nodes[q.0].value.shape();
        let ks = nodes[k.0].value.shape();
        let (b, lq, dq) = if qs.len() == 3 { (qs[0], qs[1], qs[2]) } else { (1, qs[0], qs[1]) };
        let lk = ks[ks.len() - 2];
        let dv = node.value.last_dim();
        let (dh, dvh) = (dq / heads, dv / heads);
        let scale = S::one() / S::of(dh as f64).sqrt();
        let qd = nodes[q.0].value.data();
        let kd = nodes[k.0].value.data();
        let vd = nodes[v.0].value.data();
        let (wq, wk, wv) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
        let mut gq = wq.then(|| vec![S::zero(); qd.len()]);
        let mut gk = wk.then(|| vec![S::zero(); kd.len()]);
        let mut gv = wv.then(|| vec![S::zero(); vd.len()]);
        let mut gp = vec![S::zero(); lq * lk];
        for bi in 0..b {
            for h in 0..heads {
                let p = &probs[((bi * heads + h) * lq) * lk..((bi * heads + h + 1) * lq) * lk];
                let go = &g[bi * lq * dv + h * dvh..];
                if let Some(gv) = gv.as_mut() {
                    S::gemm(lk, lq, dvh, S::one(), p, 1, lk, go, dv, 1, S::one(), &mut gv[bi * lk * dv + h * dvh..], dv, 1);
                }
                if !(wq || wk) {
                    continue;
                }
                S::gemm(lq, dvh, lk, S::one(), go, dv, 1, &vd[bi * lk * dv + h * dvh..], 1, dv, S::zero(), &mut gp, lk, 1);
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let gr = &mut gp[i * lk..(i + 1) * lk];
                    let dot: S = pr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for (gs, &pi) in gr.iter_mut().zip(pr) {
                        *gs = pi * (*gs - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    S::gemm(lq, lk, dh, S::one(), &gp, lk, 1, &kd[bi * lk * dq + h * dh..], dq, 1, S::one(), &mut gq[bi * lq * dq + h * dh..], dq, 1);
                }
                if let Some(gk) = gk.as_mut() {
                    S::gemm(lk, lq, dh, S::one(), &gp, 1, lk, &qd[bi * lq * dq + h * dh..], dq, 1, S::one(), &mut gk[bi * lk * dq + h * dh..], dq, 1);
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                let dst = grads[var.0].get_or_insert_with(|| vec![S::zero(); local.len()]);
                axpy(dst, &local);
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Binary focal term for probability `p` and label `y` (0 or 1).
pub fn focal_value<S: Scalar>(p: S, y: S, alpha: S, gamma: S) -> S {
    let eps = S::of(PROB_EPS);
    let p = p.max(eps).min(S::one() - eps);
    if y > S::zero() {
        -alpha * (S::one() - p).powf(gamma) * p.ln()
    } else {
        -(S::one() - alpha) * p.powf(gamma) * (S::one() - p).ln()
    }
}

fn focal_grad<S: Scalar>(p: S, y: S, alpha: S, gamma: S) -> S {
    let eps = S::of(PROB_EPS);
    if p < eps || p > S::one() - eps {
        return S::zero();
    }
    // γ·x^(γ−1) with the γ = 0 case pinned to zero.
    let dpow = |x: S| {
        if gamma == S::zero() {
            S::zero()
        } else {
            gamma * x.powf(gamma - S::one())
        }
    };
    if y > S::zero() {
        let q = S::one() - p;
        -alpha * (-dpow(q) * p.ln() + q.powf(gamma) / p)
    } else {
        let q = S::one() - p;
        -(S::one() - alpha) * (dpow(p) * q.ln() - p.powf(gamma) / q)
    }
}

/// `1 − gIoU` of intervals `[−pred_s, pred_e]` and `[−tgt_s, tgt_e]`.
///
/// Both intervals contain the origin, so the enclosing hull equals the union
/// and the generalized IoU reduces to the plain IoU.
pub fn giou_loss_1d(pred_s: f64, pred_e: f64, tgt_s: f64, tgt_e: f64) -> f64 {
    let inter = pred_s.min(tgt_s) + pred_e.min(tgt_e);
    let union = pred_s + pred_e + tgt_s + tgt_e - inter;
    let hull = pred_s.max(tgt_s) + pred_e.max(tgt_e);
    let iou = inter / union;
    let giou = iou - (hull - union) / hull;
    1.0 - giou
}

fn giou_loss_1d_grad(ps: f64, pe: f64, ts: f64, te: f64) -> (f64, f64) {
    let inter = ps.min(ts) + pe.min(te);
    let union = ps + pe + ts + te - inter;
    let di_s = if ps < ts { 1.0 } else { 0.0 };
    let di_e = if pe < te { 1.0 } else { 0.0 };
    let d = |di: f64| -(di * union - inter * (1.0 - di)) / (union * union);
    (d(di_s), d(di_e))
}
