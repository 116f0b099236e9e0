//! Central-difference gradient checking in 64-bit.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Default pass threshold on the maximum relative error.
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

pub type ParamSet = BTreeMap<String, Tensor<f64>>;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    pub threshold: f64,
    /// Checks at most this many coordinates per parameter, chosen uniformly
    /// at random; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Coordinates that miss the threshold at `eps` are retried with steps
    /// `10 eps`, `eps/10`, `100 eps`, `eps/100`, … for this many decades.
    /// Smaller steps avoid straddling kinks (ReLU, trilinear sampling);
    /// larger ones lift tiny gradients above cancellation noise. A wrong
    /// analytic gradient fails at every step size.
    pub refinements: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            threshold: DEFAULT_THRESHOLD,
            max_coords: None,
            refinements: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub eps: f64,
    pub threshold: f64,
    /// Worst relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates that missed at `eps` and were retried with other steps.
    pub refined: usize,
    pub passed: bool,
}

impl GradReport {
    /// Name of the parameter holding the worst error, if any were checked.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, tape: &Tape<f64>, params: &ParamSet) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &BTreeMap<String, Var<'t, f64>>) -> Result<Var<'t, f64>>,
{
    let vars: BTreeMap<String, Var<'_, f64>> = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
        .collect();
    let out = f(tape, &vars)?;
    let value = out.value();
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

fn central_difference<F>(f: &F, params: &mut ParamSet, name: &str, i: usize, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &BTreeMap<String, Var<'t, f64>>) -> Result<Var<'t, f64>>,
{
    let base = params[name].data()[i];
    params.get_mut(name).unwrap().data_mut()[i] = base + step;
    let plus = evaluate(f, &Tape::inference(), params);
    params.get_mut(name).unwrap().data_mut()[i] = base - step;
    let minus = evaluate(f, &Tape::inference(), params);
    params.get_mut(name).unwrap().data_mut()[i] = base;
    let (plus, minus) = (plus?, minus?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::domain(
            "finite_diff_check",
            format!("non-finite value perturbing {name}[{i}]"),
        ));
    }
    Ok((plus - minus) / (2.0 * step))
}

fn steps(opts: &CheckOptions) -> Vec<f64> {
    let mut s = vec![opts.eps];
    for k in 1..=opts.refinements as i32 {
        s.push(opts.eps * 10f64.powi(k));
        s.push(opts.eps / 10f64.powi(k));
    }
    s
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` coordinate by coordinate.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, opts: &CheckOptions) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &BTreeMap<String, Var<'t, f64>>) -> Result<Var<'t, f64>>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::domain("finite_diff_check", "eps must be positive"));
    }
    let tape = Tape::new();
    let vars: BTreeMap<String, Var<'_, f64>> = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
        .collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param = BTreeMap::new();
    let mut coords_checked = 0;
    let mut refined = 0;
    let mut perturbed = params.clone();
    for (name, value) in params {
        let analytic = grads.get(name).expect("every parameter has a gradient");
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < value.len() => {
                let mut c = sample(&mut rng, value.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..value.len()).collect(),
        };
        let mut worst = 0.0f64;
        for i in coords {
            let analytic_i = analytic.data()[i];
            let mut err = f64::INFINITY;
            // Once the first step misses, every scheduled step runs and the
            // best one counts.
            for (attempt, step) in steps(opts).into_iter().enumerate() {
                let numeric = central_difference(&f, &mut perturbed, name, i, step)?;
                err = err.min(relative_error(analytic_i, numeric));
                if attempt == 0 && err < opts.threshold {
                    break;
                }
                if attempt == 0 && opts.refinements > 0 {
                    refined += 1;
                }
            }
            worst = worst.max(err);
            coords_checked += 1;
        }
        per_param.insert(name.clone(), worst);
    }
    let max_rel_err = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradReport {
        eps: opts.eps,
        threshold: opts.threshold,
        per_param,
        max_rel_err,
        coords_checked,
        refined,
        passed: max_rel_err < opts.threshold,
    })
}
