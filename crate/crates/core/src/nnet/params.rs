//! Named parameter storage, initialisation and the SGD step rule.
//!
//! A [`ParamSet`] keeps every trainable tensor of a model together with a
//! gradient buffer of the same shape. Iteration order is insertion order, so
//! serialisation and flat-coordinate access are deterministic. The flat view
//! (`n_coords` / `coord` / `set_coord` / `grad_coord`) is what the gradient
//! checker perturbs.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DidError, Result};
use crate::nnet::tensor::Tensor2;

/// One named tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    /// Logical dimensions, e.g. `[out_ch, in_ch, kernel]` for a convolution
    /// weight whose storage is a 2-D tensor.
    dims: Vec<usize>,
    value: Tensor2,
    grad: Tensor2,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn value(&self) -> &Tensor2 {
        &self.value
    }

    pub fn grad(&self) -> &Tensor2 {
        &self.grad
    }
}

/// An ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a tensor under `name`. `dims` are the logical dimensions;
    /// their product must equal the tensor's element count.
    pub fn add(&mut self, name: &str, dims: &[usize], value: Tensor2) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(DidError::Config(format!("duplicate parameter '{name}'")));
        }
        let expect: usize = dims.iter().product();
        if expect != value.len() {
            return Err(DidError::Shape(format!(
                "parameter '{name}': dims {dims:?} describe {expect} values but tensor holds {}",
                value.len()
            )));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            dims: dims.to_vec(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Panics if `name` is unknown; parameter names are fixed by the model
    /// code, so a miss is a programming error, not an input error.
    pub fn value(&self, name: &str) -> &Tensor2 {
        &self.entry(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor2 {
        let i = self.position(name);
        &mut self.params[i].value
    }

    pub fn grad(&self, name: &str) -> &Tensor2 {
        &self.entry(name).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor2 {
        let i = self.position(name);
        &mut self.params[i].grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    fn entry(&self, name: &str) -> &Param {
        &self.params[self.position(name)]
    }

    fn position(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn n_coords(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn locate(&self, coord: usize) -> (usize, usize) {
        let mut remaining = coord;
        for (i, p) in self.params.iter().enumerate() {
            if remaining < p.value.len() {
                return (i, remaining);
            }
            remaining -= p.value.len();
        }
        panic!("coordinate {coord} out of range ({} total)", self.n_coords());
    }

    pub fn coord(&self, coord: usize) -> f64 {
        let (p, off) = self.locate(coord);
        self.params[p].value.data()[off]
    }

    pub fn set_coord(&mut self, coord: usize, v: f64) {
        let (p, off) = self.locate(coord);
        self.params[p].value.data_mut()[off] = v;
    }

    pub fn grad_coord(&self, coord: usize) -> f64 {
        let (p, off) = self.locate(coord);
        self.params[p].grad.data()[off]
    }

    /// Name and within-tensor offset of a flat coordinate, for diagnostics.
    pub fn coord_name(&self, coord: usize) -> (String, usize) {
        let (p, off) = self.locate(coord);
        (self.params[p].name.clone(), off)
    }

    /// Adds `delta` elementwise into the gradient buffer of `name`.
    pub fn accumulate(&mut self, name: &str, delta: &[f64]) {
        let i = self.position(name);
        let grad = self.params[i].grad.data_mut();
        assert_eq!(grad.len(), delta.len(), "gradient delta for '{name}'");
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }

    /// Euclidean norm of the concatenated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One plain SGD update: `value -= lr * grad` for every coordinate.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            let grads = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grads) {
                *v -= lr * g;
            }
        }
    }
}

/// Exponentially decayed learning rate: `base * factor^floor(step/interval)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
}

impl LrSchedule {
    /// Default schedule: 0.001 decayed by 0.98 every 50 000 steps.
    pub fn speech_default() -> Self {
        LrSchedule {
            base_lr: 0.001,
            decay_factor: 0.98,
            decay_interval: 50_000,
        }
    }

    pub fn new(base_lr: f64, decay_factor: f64, decay_interval: u64) -> Result<Self> {
        // A zero rate is allowed: it freezes the parameters, which some
        // tests rely on to prove a training loop is side-effect free.
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return Err(DidError::Config(format!(
                "learning rate must be nonnegative and finite, got {base_lr}"
            )));
        }
        if !(decay_factor.is_finite() && decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(DidError::Config(format!(
                "decay factor must lie in (0, 1], got {decay_factor}"
            )));
        }
        if decay_interval == 0 {
            return Err(DidError::Config("decay interval must be at least 1".into()));
        }
        Ok(LrSchedule {
            base_lr,
            decay_factor,
            decay_interval,
        })
    }

    /// Learning rate in effect at a 0-based step index.
    pub fn lr_at(&self, step: u64) -> f64 {
        let exponent = (step / self.decay_interval) as f64;
        self.base_lr * self.decay_factor.powf(exponent)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::speech_default()
    }
}

/// Draws `n` values from the Glorot/Xavier uniform distribution
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small_set() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", &[2, 2], Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        ps.add("b", &[2], Tensor2::from_vec(1, 2, vec![5.0, 6.0]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn flat_coordinates_cover_insertion_order() {
        let ps = small_set();
        assert_eq!(ps.n_coords(), 6);
        let flat: Vec<f64> = (0..6).map(|i| ps.coord(i)).collect();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(ps.coord_name(4), ("b".to_string(), 0));
    }

    #[test]
    fn set_coord_round_trips() {
        let mut ps = small_set();
        ps.set_coord(3, -1.5);
        assert_eq!(ps.value("w").get(1, 1), -1.5);
        ps.set_coord(5, 0.25);
        assert_eq!(ps.value("b").get(0, 1), 0.25);
    }

    #[test]
    fn duplicate_and_mismatched_params_rejected() {
        let mut ps = small_set();
        assert!(ps.add("w", &[1], Tensor2::zeros(1, 1)).is_err());
        assert!(ps.add("x", &[3], Tensor2::zeros(2, 2)).is_err());
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut ps = small_set();
        ps.grad_mut("w").fill(1.0);
        ps.sgd_step(0.5);
        assert_eq!(ps.value("w").get(0, 0), 0.5);
        // "b" had zero gradient and must not move.
        assert_eq!(ps.value("b").get(0, 0), 5.0);
        ps.zero_grads();
        assert_eq!(ps.grad_norm(), 0.0);
    }

    #[test]
    fn schedule_matches_step_decay_rule() {
        let s = LrSchedule::speech_default();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(49_999), 0.001);
        // First decay boundary: 0.001 * 0.98.
        assert!((s.lr_at(50_000) - 0.00098).abs() < 1e-15);
        assert!((s.lr_at(100_000) - 0.001 * 0.98 * 0.98).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(0.0, 0.9, 10).is_ok());
        assert!(LrSchedule::new(-0.1, 0.9, 10).is_err());
        assert!(LrSchedule::new(0.1, 0.0, 10).is_err());
        assert!(LrSchedule::new(0.1, 1.5, 10).is_err());
        assert!(LrSchedule::new(0.1, 0.9, 0).is_err());
        assert!(LrSchedule::new(0.1, 1.0, 1).is_ok());
    }

    #[test]
    fn glorot_respects_limit_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals = glorot_uniform(&mut rng, 30, 70, 1000);
        let limit = (6.0 / 100.0_f64).sqrt();
        assert!(vals.iter().all(|v| v.abs() < limit));
        // Same seed, same stream.
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(vals, glorot_uniform(&mut rng2, 30, 70, 1000));
        // Rough symmetry check; the mean of 1000 draws should be small.
        let mean: f64 = vals.iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < limit / 5.0);
    }
}
