//! Central-difference verification of reverse-mode gradients.
//!
//! The error metric is `|analytic − numeric| / max(1, |numeric|)`, maximised
//! over the checked coordinates. `f` must be deterministic; a function that
//! draws fresh randomness per call gives meaningless results.
//!
//! ReLU and max are not differentiable everywhere. When a coordinate's
//! mismatch is matched by disagreement between its one-sided slopes, the
//! step straddles a kink: the coordinate is re-measured at a tenth of the
//! step, and if the slopes still stay apart the analytic value only has to
//! lie between them.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Default step at 64-bit precision.
pub const DEFAULT_EPS: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Mismatches below this are reported as measured.
const KINK_FLOOR: f64 = 1e-9;

/// Error at one coordinate; `eval(v)` is the function with the coordinate set to `v`.
fn coordinate_error(
    mut eval: impl FnMut(f64) -> Result<f64>,
    orig: f64,
    analytic: f64,
    eps: f64,
) -> Result<f64> {
    let (plus, minus) = (eval(orig + eps)?, eval(orig - eps)?);
    let numeric = (plus - minus) / (2.0 * eps);
    let err = relative_error(analytic, numeric);
    if err <= KINK_FLOOR {
        return Ok(err);
    }
    let centre = eval(orig)?;
    let spread = ((plus - centre) - (centre - minus)).abs() / eps;
    if spread < (analytic - numeric).abs() {
        return Ok(err);
    }
    let h = eps / 10.0;
    let (plus, minus) = (eval(orig + h)?, eval(orig - h)?);
    let numeric = (plus - minus) / (2.0 * h);
    let mut best = err.min(relative_error(analytic, numeric));
    let (right, left) = ((plus - centre) / h, (centre - minus) / h);
    if (right - left).abs() > 0.5 * spread {
        let (lo, hi) = (right.min(left), right.max(left));
        let outside = (lo - analytic).max(analytic - hi).max(0.0);
        best = best.min(outside / numeric.abs().max(1.0));
    }
    Ok(best)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Checks `f` with respect to a single input tensor over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_inputs(|tape, v| f(tape, v[0]), std::slice::from_ref(x), eps, None)
}

/// Checks `f` with respect to every input. With `sample = Some((count, seed))`
/// only `count` coordinates drawn uniformly from all inputs are checked.
pub fn finite_diff_check_inputs<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    sample_coords: Option<(usize, u64)>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let chosen = choose(&sizes, sample_coords);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, j) in chosen {
        let orig = probe[i].data()[j];
        let e = coordinate_error(
            |v| {
                probe[i].data_mut()[j] = v;
                eval_scalar(&f, &probe)
            },
            orig,
            analytic[i].data()[j],
            eps,
        );
        probe[i].data_mut()[j] = orig;
        worst = worst.max(e?);
    }
    Ok(worst)
}

fn choose(sizes: &[usize], sample_coords: Option<(usize, u64)>) -> Vec<(usize, usize)> {
    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..n).map(move |j| (i, j)))
        .collect();
    match sample_coords {
        Some((count, seed)) if count < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, coords.len(), count)
                .into_iter()
                .map(|i| coords[i])
                .collect()
        }
        _ => coords,
    }
}

/// Checks a model-level function with respect to its parameters and its
/// inputs together. Slot `k < params.len()` is parameter `k`; the rest are
/// `inputs` in order.
pub fn finite_diff_check_model<F>(
    f: F,
    params: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    sample_coords: Option<(usize, u64)>,
) -> Result<f64>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut ctx = Ctx::new(params);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| ctx.tape.variable(t.clone()))
        .collect();
    let out = f(&mut ctx, &vars)?;
    let (param_grads, input_grads) = ctx.backward_with_inputs(out, &vars)?;

    let np = params.len();
    let sizes: Vec<usize> = params
        .iter()
        .map(|p| p.value.numel())
        .chain(inputs.iter().map(Tensor::numel))
        .collect();
    let eval = |store: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut ctx = Ctx::inference(store);
        let vars: Vec<Var> = xs.iter().map(|t| ctx.tape.constant(t.clone())).collect();
        let out = f(&mut ctx, &vars)?;
        ctx.tape.value(out).item()
    };
    fn slot<'a>(
        store: &'a mut ParamStore,
        xs: &'a mut [Tensor],
        np: usize,
        k: usize,
    ) -> &'a mut [f64] {
        if k < np {
            store
                .iter_mut()
                .nth(k)
                .expect("parameter slot")
                .value
                .data_mut()
        } else {
            xs[k - np].data_mut()
        }
    }

    let mut store = params.clone();
    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, j) in choose(&sizes, sample_coords) {
        let orig = slot(&mut store, &mut xs, np, k)[j];
        let analytic = if k < np {
            param_grads.0[k][j]
        } else {
            input_grads[k - np][j]
        };
        let e = coordinate_error(
            |v| {
                slot(&mut store, &mut xs, np, k)[j] = v;
                eval(&store, &xs)
            },
            orig,
            analytic,
            eps,
        );
        slot(&mut store, &mut xs, np, k)[j] = orig;
        worst = worst.max(e?);
    }
    Ok(worst)
}
