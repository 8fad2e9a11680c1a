use serde::Serialize;

use crate::error::Result;

use super::{ParamStore, SeededRng, Session, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Slack on the ratio test, relative to the coarse difference.
const KINK_TOLERANCE: f64 = 0.1;
/// Differences this small relative to the estimate are taken as converged.
const CONVERGED: f64 = 1e-7;
/// Assumed relative roundoff in one evaluation of the loss.
const ROUNDOFF: f64 = f64::EPSILON;
/// Halvings of the step tried before giving up on a kinked stencil.
const MAX_HALVINGS: usize = 16;

/// Compares analytic gradients of `f` against central differences.
///
/// At most `coords_per_param` coordinates of each parameter are probed
/// (`None` probes all of them); the sample is drawn from `seed`. The error
/// of a coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// ReLU and clamping make the loss piecewise smooth. When a switch point
/// lies inside the stencil, `D(h)` is off by half the jump in slope no
/// matter how correct the gradient is. For a smooth loss the truncation
/// error is quadratic in the step, so `D(s) − D(s/2) ≈ 4·(D(s/2) − D(s/4))`.
/// Steps are halved from `h` until four consecutive ones pass that ratio
/// twice; a single kink can pass one ratio by coincidence but not both.
/// The estimate is the Richardson extrapolation `(4·D(s/2) − D(s)) / 3`
/// at the coarsest passing step, or `D(s)` when all differences are below
/// the roundoff level of the loss. None of this looks at the analytic value.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut sess = Session::new(store);
        let out = f(&mut sess)?;
        sess.graph.backward(out)?;
        sess.gradients()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut sess = Session::new(s);
        let out = f(&mut sess)?;
        Ok(sess.graph.value(out).data()[0])
    };

    let base = eval(store)?.abs().max(1.0);
    let mut rng = SeededRng::new(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, grad) in &analytic {
        let n = grad.len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = probe.value(name)?.data()[i];
            let mut central = |step: f64| -> Result<f64> {
                probe.get_mut(name).unwrap().value.data_mut()[i] = orig + step;
                let plus = eval(&probe)?;
                probe.get_mut(name).unwrap().value.data_mut()[i] = orig - step;
                let minus = eval(&probe)?;
                probe.get_mut(name).unwrap().value.data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let mut d = vec![central(h)?, central(h / 2.0)?, central(h / 4.0)?];
            let mut numeric = (4.0 * d[1] - d[0]) / 3.0;
            for k in 0..=MAX_HALVINGS {
                let step = h / f64::powi(2.0, k as i32);
                d.push(central(step / 8.0)?);
                let w = &d[k..k + 4];
                let floor = (CONVERGED * w[0].abs()).max(ROUNDOFF * base * 8.0 / step);
                let diffs = [w[0] - w[1], w[1] - w[2], w[2] - w[3]];
                if diffs.iter().all(|x| x.abs() <= floor) {
                    numeric = w[0];
                    break;
                }
                let quadratic = diffs.windows(2).all(|p| {
                    p[0].abs().max(p[1].abs()) <= floor
                        || (p[0] - 4.0 * p[1]).abs() <= KINK_TOLERANCE * p[0].abs()
                });
                if quadratic {
                    numeric = (4.0 * w[1] - w[0]) / 3.0;
                    break;
                }
            }
            let a = grad[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                }
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
