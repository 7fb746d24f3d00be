//! Finite-difference verification of the analytic gradients produced by [`Graph`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero on both sides compare as absolute differences.
    pub floor: f64,
    /// Elements closer than `kink_radius * eps` to a non-differentiable point
    /// (ReLU hinge, pooling tie, smooth-L1 knee) are skipped.
    pub kink_radius: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            floor: 1e-3,
            kink_radius: 10.0,
            max_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Fixed projection weights used to reduce a non-scalar output to a scalar.
fn projection<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|i| T::lit(((i as f64 + 1.0) * 0.754_877_666).fract() * 2.0 - 1.0))
        .collect()
}

fn evaluate<T, F>(build: &F, inputs: &[Tensor<T>], backward: bool) -> Result<(Graph<T>, Vec<Var>, T, u64)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let loss = if g.value(out).shape().len() == 1 {
        out
    } else {
        let w = projection(g.value(out).data().len());
        g.dot(out, w)?
    };
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    if backward {
        g.backward(loss)?;
    }
    let sig = g.branch_signature();
    Ok((g, vars, value, sig))
}

/// Compares analytic input gradients of `build` against central differences
/// and returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck<T, F>(build: F, inputs: &[Tensor<T>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (g, vars, _, base_sig) = evaluate(&build, inputs, true)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.data().len()], <[T]>::to_vec))
        .collect();
    for a in &analytic {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
    }
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = T::lit(opts.eps);
    let probe = T::lit(opts.eps * opts.kink_radius);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let len = input.data().len();
        let indices: Vec<usize> = match opts.max_per_input {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in indices {
            let orig = input.data()[j];
            let mut at = |delta: T| -> Result<(T, u64)> {
                work[ti].data_mut()[j] = orig + delta;
                let (_, _, v, s) = evaluate(&build, &work, false)?;
                Ok((v, s))
            };
            let (_, sig_hi) = at(probe)?;
            let (_, sig_lo) = at(-probe)?;
            let (f_plus, s_plus) = at(eps)?;
            let (f_minus, s_minus) = at(-eps)?;
            work[ti].data_mut()[j] = orig;
            if [sig_hi, sig_lo, s_plus, s_minus].iter().any(|&s| s != base_sig) {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus).as_f64() / (2.0 * opts.eps);
            let a = analytic[ti][j].as_f64();
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::NonFinite("finite difference".into()));
            }
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
