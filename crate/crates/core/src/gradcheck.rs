//! Central finite-difference checks of tape gradients.
//!
//! The error of one tensor is normwise:
//! `max|g_ad - g_fd| / max(max|g_fd|, FLOOR)`. The floor keeps gradients
//! that are zero up to rounding from turning finite-difference noise
//! (about `eps * |loss| / h`) into a large relative error.
//!
//! Central differences are only valid away from the LeakyReLU kink, so each
//! report carries the tape's kink margin; callers redraw instances whose
//! margin is comparable to the step.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Report {
    /// `(name, relative error)` per input or parameter.
    pub errors: Vec<(String, f64)>,
    /// See [`Tape::kink_margin`](crate::autodiff::Tape::kink_margin).
    pub kink_margin: f64,
}

impl Report {
    pub fn worst(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

pub fn relative_error(ad: &[f64], fd: &[f64]) -> f64 {
    let diff = ad.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = fd.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(FLOOR)
}

fn scalar(v: Var<'_>) -> Result<f64> {
    v.value()
        .item()
        .ok_or_else(|| Error::NonScalarLoss(v.shape()))
}

/// Relative error of the gradient with respect to each input of `f`,
/// named `input{i}`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<Report>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        scalar(f(&tape, &vars)?)
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let kink_margin = tape.kink_margin();
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let ad = grads.get(*var).expect("leaf requires grad").data().to_vec();
        let mut fd = vec![0.0; ad.len()];
        let mut values = inputs.to_vec();
        for (k, g) in fd.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            values[i].data_mut()[k] = orig + STEP;
            let up = eval(&values)?;
            values[i].data_mut()[k] = orig - STEP;
            let down = eval(&values)?;
            values[i].data_mut()[k] = orig;
            *g = (up - down) / (2.0 * STEP);
        }
        errors.push((format!("input{i}"), relative_error(&ad, &fd)));
    }
    Ok(Report { errors, kink_margin })
}

/// Relative error of the gradient of `f` with respect to every parameter
/// in `store`, checking up to `per_param` randomly chosen entries of each.
/// `f` must be deterministic (reseed any randomness inside it).
pub fn check_params<F>(
    store: &mut ParamStore,
    per_param: usize,
    rng: &mut impl Rng,
    f: F,
) -> Result<Report>
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Result<Var<'t>>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        scalar(f(&tape, &p)?)
    };
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let loss = f(&tape, &bound)?;
    let mut grads = tape.backward(loss)?;
    let kink_margin = tape.kink_margin();
    store.accumulate_grads(&bound, &mut grads);
    drop(bound);
    let ids: Vec<_> = store.iter().map(|p| store.id(p.name()).expect("listed")).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let param = store.param(id);
        let name = param.name().to_string();
        let ad_full = param
            .grad()
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .clone();
        let original = param.value().clone();
        let n = original.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let mut ad = Vec::with_capacity(picks.len());
        let mut fd = Vec::with_capacity(picks.len());
        for &k in &picks {
            let mut shifted = original.clone();
            shifted.data_mut()[k] += STEP;
            store.set_value(id, shifted.clone())?;
            let up = eval(store)?;
            shifted.data_mut()[k] = original.data()[k] - STEP;
            store.set_value(id, shifted)?;
            let down = eval(store)?;
            store.set_value(id, original.clone())?;
            ad.push(ad_full.data()[k]);
            fd.push((up - down) / (2.0 * STEP));
        }
        out.push((name, relative_error(&ad, &fd)));
    }
    store.clear_grads();
    Ok(Report {
        errors: out,
        kink_margin,
    })
}
