//! Central finite-difference gradient checking.
//!
//! Any model that exposes its parameters as a [`ParamSet`], a scalar loss
//! and an analytic gradient accumulation can be verified coordinate by
//! coordinate: perturb one parameter by +/- epsilon, difference the losses
//! and compare with the analytic value under a relative error that guards
//! against tiny denominators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nnet::params::ParamSet;

/// Default perturbation for 64-bit checking.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Relative error above which a gradient is considered wrong.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A model whose gradients can be checked numerically.
///
/// `loss` must be a pure function of the current parameter values (same
/// data, same result), and `accumulate_grads` must add the gradient of that
/// exact loss into the parameter set's gradient buffers.
pub trait Differentiable {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Loss at the current parameters, without touching gradients.
    fn loss(&self) -> Result<f64>;
    /// Accumulates analytic gradients for the current loss; returns the loss.
    fn accumulate_grads(&mut self) -> Result<f64>;
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub n_checked: usize,
    /// Parameter name and offset of the worst coordinate, for diagnostics.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Checks analytic gradients against central differences.
///
/// At most `n_samples` coordinates are tested; when the model has fewer,
/// every coordinate is tested. Sampling is driven by `seed`, so a failing
/// check can be reproduced exactly.
pub fn grad_check(
    model: &mut dyn Differentiable,
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    model.params_mut().zero_grads();
    model.accumulate_grads()?;

    let n_coords = model.params().n_coords();
    let analytic: Vec<f64> = (0..n_coords).map(|i| model.params().grad_coord(i)).collect();

    let coords: Vec<usize> = if n_coords <= n_samples {
        (0..n_coords).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, n_coords, n_samples).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_checked: coords.len(),
        worst: String::new(),
    };
    for &c in &coords {
        let original = model.params().coord(c);
        model.params_mut().set_coord(c, original + epsilon);
        let plus = model.loss()?;
        model.params_mut().set_coord(c, original - epsilon);
        let minus = model.loss()?;
        model.params_mut().set_coord(c, original);

        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = analytic[c].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[c] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            let (name, off) = model.params().coord_name(c);
            report.worst = format!("{name}[{off}] analytic {} numeric {numeric}", analytic[c]);
        }
    }
    model.params_mut().zero_grads();
    Ok(report)
}
