//! A sequential network over frame sequences: convolutions, one global
//! pooling layer, then dense layers.
//!
//! [`StackNet`] owns its parameters and a forward trace. Inference
//! (`forward`) is side-effect free; training calls `forward_train` followed
//! by `backward`, which accumulates parameter gradients and consumes the
//! trace, so every backward pass needs a fresh recorded forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DidError, Result};
use crate::nnet::kernels;
use crate::nnet::params::{glorot_uniform, ParamSet};
use crate::nnet::tensor::Tensor2;

/// One layer of a [`StackNet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Temporal convolution; `relu` applies a rectifier to the output.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    /// Collapses the time axis to per-channel statistics.
    GlobalPool { with_std: bool },
    /// Fully connected layer on the flat activation.
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Raw output of the last dense layer (logits; no softmax applied).
    pub output: Vec<f64>,
    /// Activation entering the last dense layer. For a classifier this is
    /// the embedding the fusion front ends consume.
    pub hidden: Vec<f64>,
}

/// An activation flowing through the stack: a frame sequence before pooling,
/// a flat vector after.
#[derive(Clone, Debug)]
enum Act {
    Seq(Tensor2),
    Flat(Vec<f64>),
}

impl Act {
    fn seq(&self) -> &Tensor2 {
        match self {
            Act::Seq(t) => t,
            Act::Flat(_) => panic!("expected sequence activation"),
        }
    }

    fn flat(&self) -> &[f64] {
        match self {
            Act::Flat(v) => v,
            Act::Seq(_) => panic!("expected flat activation"),
        }
    }
}

/// Sequential convolution + pooling + dense network.
#[derive(Clone, Debug)]
pub struct StackNet {
    input_dim: usize,
    specs: Vec<LayerSpec>,
    params: ParamSet,
    trace: Option<Vec<Act>>,
}

impl StackNet {
    /// Builds a network with Glorot-initialised weights and zero biases.
    pub fn build(input_dim: usize, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_specs(input_dim, &specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, dims, rows, cols, fan_in, fan_out) in param_plan(&specs) {
            let data = if name.ends_with(".b") {
                vec![0.0; rows * cols]
            } else {
                glorot_uniform(&mut rng, fan_in, fan_out, rows * cols)
            };
            params.add(&name, &dims, Tensor2::from_vec(rows, cols, data)?)?;
        }
        Ok(StackNet {
            input_dim,
            specs,
            params,
            trace: None,
        })
    }

    /// Reassembles a network from loaded parameters, validating that every
    /// expected tensor is present with the right shape.
    pub fn from_parts(input_dim: usize, specs: Vec<LayerSpec>, params: ParamSet) -> Result<Self> {
        validate_specs(input_dim, &specs)?;
        let plan = param_plan(&specs);
        if params.len() != plan.len() {
            return Err(DidError::Config(format!(
                "parameter set has {} tensors, architecture expects {}",
                params.len(),
                plan.len()
            )));
        }
        for (name, dims, rows, cols, _, _) in plan {
            if !params.contains(&name) {
                return Err(DidError::Config(format!("missing parameter '{name}'")));
            }
            let p = params.value(&name);
            if p.shape() != (rows, cols) {
                return Err(DidError::Config(format!(
                    "parameter '{name}': stored shape {:?}, architecture expects {:?} ({dims:?})",
                    p.shape(),
                    (rows, cols)
                )));
            }
        }
        Ok(StackNet {
            input_dim,
            specs,
            params,
            trace: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Dimension of the final layer's output.
    pub fn output_dim(&self) -> usize {
        match self.specs.last() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            _ => unreachable!("validated stacks end with a dense layer"),
        }
    }

    /// Dimension of the activation entering the final dense layer.
    pub fn hidden_dim(&self) -> usize {
        match self.specs.last() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => unreachable!("validated stacks end with a dense layer"),
        }
    }

    /// Fewest input frames the convolution stack can consume. Derived by
    /// running the output-length recurrence backwards from one frame.
    pub fn min_input_rows(&self) -> usize {
        let mut need = 1usize;
        for spec in self.specs.iter().rev() {
            if let LayerSpec::Conv1d { kernel, stride, .. } = spec {
                need = (need - 1) * stride + kernel;
            }
        }
        need
    }

    /// Inference pass; does not touch the training trace.
    pub fn forward(&self, x: &Tensor2) -> Result<ForwardOut> {
        let acts = self.eval(x)?;
        let n = acts.len();
        Ok(ForwardOut {
            output: acts[n - 1].flat().to_vec(),
            hidden: acts[n - 2].flat().to_vec(),
        })
    }

    /// Forward pass that records activations for a following [`Self::backward`].
    /// Returns the final layer's output.
    pub fn forward_train(&mut self, x: &Tensor2) -> Result<Vec<f64>> {
        let acts = self.eval(x)?;
        let out = acts.last().expect("eval returns input plus layers").flat().to_vec();
        self.trace = Some(acts);
        Ok(out)
    }

    /// Accumulates parameter gradients for the most recent recorded forward
    /// pass, given the loss gradient with respect to the final output. The
    /// trace is consumed; a second call without a new `forward_train` fails.
    pub fn backward(&mut self, gout: &[f64]) -> Result<()> {
        let acts = self.trace.take().ok_or(DidError::BackwardBeforeForward)?;
        if gout.len() != self.output_dim() {
            return Err(DidError::Shape(format!(
                "backward: gradient of {} against output of {}",
                gout.len(),
                self.output_dim()
            )));
        }
        let mut gflat: Vec<f64> = gout.to_vec();
        let mut gseq: Option<Tensor2> = None;
        let mut conv_idx = self.specs.iter().filter(|s| matches!(s, LayerSpec::Conv1d { .. })).count();
        let mut dense_idx = self.specs.iter().filter(|s| matches!(s, LayerSpec::Dense { .. })).count();

        for (i, spec) in self.specs.iter().enumerate().rev() {
            let input = &acts[i];
            let output = &acts[i + 1];
            match spec {
                LayerSpec::Dense { relu, .. } => {
                    dense_idx -= 1;
                    let name_w = format!("dense{dense_idx}.w");
                    let name_b = format!("dense{dense_idx}.b");
                    let mut g = gflat;
                    if *relu {
                        kernels::relu_backward_inplace(output.flat(), &mut g);
                    }
                    let w = self.params.value(&name_w);
                    let mut gx = vec![0.0; input.flat().len()];
                    let mut gw = Tensor2::zeros(w.rows(), w.cols());
                    let mut gb = vec![0.0; g.len()];
                    kernels::dense_backward(input.flat(), w, &g, &mut gx, &mut gw, &mut gb)?;
                    self.params.accumulate(&name_w, gw.data());
                    self.params.accumulate(&name_b, &gb);
                    gflat = gx;
                }
                LayerSpec::GlobalPool { with_std } => {
                    let in_t = input.seq();
                    let mut gx = Tensor2::zeros(in_t.rows(), in_t.cols());
                    if *with_std {
                        kernels::mean_std_pool_backward(in_t, output.flat(), &gflat, &mut gx)?;
                    } else {
                        kernels::mean_pool_backward(&gflat, &mut gx)?;
                    }
                    gseq = Some(gx);
                    gflat = Vec::new();
                }
                LayerSpec::Conv1d { kernel, stride, relu, .. } => {
                    conv_idx -= 1;
                    let name_w = format!("conv{conv_idx}.w");
                    let name_b = format!("conv{conv_idx}.b");
                    let mut g = gseq.take().expect("pool precedes convolutions");
                    if *relu {
                        let out_t = output.seq();
                        for (gv, &ov) in g.data_mut().iter_mut().zip(out_t.data()) {
                            if ov <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    let in_t = input.seq();
                    let w = self.params.value(&name_w);
                    let mut gx = Tensor2::zeros(in_t.rows(), in_t.cols());
                    let mut gw = Tensor2::zeros(w.rows(), w.cols());
                    let mut gb = vec![0.0; w.rows()];
                    kernels::conv1d_backward(in_t, w, *kernel, *stride, &g, &mut gx, &mut gw, &mut gb)?;
                    self.params.accumulate(&name_w, gw.data());
                    self.params.accumulate(&name_b, &gb);
                    gseq = Some(gx);
                }
            }
        }
        Ok(())
    }

    fn eval(&self, x: &Tensor2) -> Result<Vec<Act>> {
        if x.cols() != self.input_dim {
            return Err(DidError::Shape(format!(
                "input has {} channels, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        let min = self.min_input_rows();
        if x.rows() < min {
            return Err(DidError::Shape(format!(
                "input has {} frames, network needs at least {min}",
                x.rows()
            )));
        }
        let mut acts: Vec<Act> = Vec::with_capacity(self.specs.len() + 1);
        acts.push(Act::Seq(x.clone()));
        let mut conv_idx = 0usize;
        let mut dense_idx = 0usize;
        for spec in &self.specs {
            let next = match spec {
                LayerSpec::Conv1d { kernel, stride, relu, .. } => {
                    let w = self.params.value(&format!("conv{conv_idx}.w"));
                    let b = self.params.value(&format!("conv{conv_idx}.b"));
                    conv_idx += 1;
                    let mut out =
                        kernels::conv1d(acts.last().unwrap().seq(), w, b.data(), *kernel, *stride)?;
                    if *relu {
                        kernels::relu_inplace(out.data_mut());
                    }
                    Act::Seq(out)
                }
                LayerSpec::GlobalPool { with_std } => {
                    let pooled = if *with_std {
                        kernels::mean_std_pool(acts.last().unwrap().seq())?
                    } else {
                        kernels::mean_pool(acts.last().unwrap().seq())?
                    };
                    Act::Flat(pooled)
                }
                LayerSpec::Dense { relu, .. } => {
                    let w = self.params.value(&format!("dense{dense_idx}.w"));
                    let b = self.params.value(&format!("dense{dense_idx}.b"));
                    dense_idx += 1;
                    let mut out = kernels::dense(acts.last().unwrap().flat(), w, b.data())?;
                    if *relu {
                        kernels::relu_inplace(&mut out);
                    }
                    Act::Flat(out)
                }
            };
            acts.push(next);
        }
        Ok(acts)
    }
}

/// Expected parameters for a validated layer list:
/// `(name, logical_dims, rows, cols, fan_in, fan_out)` per tensor.
fn param_plan(specs: &[LayerSpec]) -> Vec<(String, Vec<usize>, usize, usize, usize, usize)> {
    let mut plan = Vec::new();
    let mut conv_idx = 0usize;
    let mut dense_idx = 0usize;
    for spec in specs {
        match spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                // Convolution fans count every tap of the kernel.
                let fan_in = in_channels * kernel;
                let fan_out = out_channels * kernel;
                plan.push((
                    format!("conv{conv_idx}.w"),
                    vec![*out_channels, *in_channels, *kernel],
                    *out_channels,
                    in_channels * kernel,
                    fan_in,
                    fan_out,
                ));
                plan.push((
                    format!("conv{conv_idx}.b"),
                    vec![*out_channels],
                    1,
                    *out_channels,
                    fan_in,
                    fan_out,
                ));
                conv_idx += 1;
            }
            LayerSpec::GlobalPool { .. } => {}
            LayerSpec::Dense { inputs, outputs, .. } => {
                plan.push((
                    format!("dense{dense_idx}.w"),
                    vec![*outputs, *inputs],
                    *outputs,
                    *inputs,
                    *inputs,
                    *outputs,
                ));
                plan.push((
                    format!("dense{dense_idx}.b"),
                    vec![*outputs],
                    1,
                    *outputs,
                    *inputs,
                    *outputs,
                ));
                dense_idx += 1;
            }
        }
    }
    plan
}

fn validate_specs(input_dim: usize, specs: &[LayerSpec]) -> Result<()> {
    if input_dim == 0 {
        return Err(DidError::Config("input dimension must be positive".into()));
    }
    let mut channels = input_dim;
    let mut flat: Option<usize> = None;
    let mut saw_pool = false;
    let mut saw_dense = false;
    for (i, spec) in specs.iter().enumerate() {
        match spec {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if saw_pool {
                    return Err(DidError::Config(format!(
                        "layer {i}: convolution after the pooling layer"
                    )));
                }
                if *in_channels != channels {
                    return Err(DidError::Config(format!(
                        "layer {i}: convolution expects {in_channels} channels, gets {channels}"
                    )));
                }
                if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                    return Err(DidError::Config(format!(
                        "layer {i}: channels, kernel and stride must be positive"
                    )));
                }
                channels = *out_channels;
            }
            LayerSpec::GlobalPool { with_std } => {
                if saw_pool {
                    return Err(DidError::Config(format!(
                        "layer {i}: second pooling layer"
                    )));
                }
                saw_pool = true;
                flat = Some(if *with_std { 2 * channels } else { channels });
            }
            LayerSpec::Dense { inputs, outputs, .. } => {
                let have = match flat {
                    Some(d) => d,
                    None => {
                        return Err(DidError::Config(format!(
                            "layer {i}: dense layer before the pooling layer"
                        )))
                    }
                };
                if *inputs != have {
                    return Err(DidError::Config(format!(
                        "layer {i}: dense layer expects {inputs} inputs, gets {have}"
                    )));
                }
                if *outputs == 0 {
                    return Err(DidError::Config(format!(
                        "layer {i}: dense layer must have outputs"
                    )));
                }
                flat = Some(*outputs);
                saw_dense = true;
            }
        }
    }
    if !saw_pool {
        return Err(DidError::Config("network needs a pooling layer".into()));
    }
    if !saw_dense {
        return Err(DidError::Config(
            "network needs at least one dense layer after pooling".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::kernels::softmax_xent;

    fn toy_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1d {
                in_channels: 4,
                out_channels: 6,
                kernel: 3,
                stride: 1,
                relu: true,
            },
            LayerSpec::Conv1d {
                in_channels: 6,
                out_channels: 5,
                kernel: 3,
                stride: 2,
                relu: true,
            },
            LayerSpec::GlobalPool { with_std: false },
            LayerSpec::Dense {
                inputs: 5,
                outputs: 7,
                relu: true,
            },
            LayerSpec::Dense {
                inputs: 7,
                outputs: 3,
                relu: false,
            },
        ]
    }

    fn ramp_input(rows: usize, cols: usize) -> Tensor2 {
        let data: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.17).sin()).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn builds_and_reports_shapes() {
        let net = StackNet::build(4, toy_specs(), 1).unwrap();
        assert_eq!(net.output_dim(), 3);
        assert_eq!(net.hidden_dim(), 7);
        // Reverse recurrence: one output frame of the stride-2 conv needs 3
        // input frames, and 3 output frames of the first conv need 5.
        assert_eq!(net.min_input_rows(), 5);
        let out = net.forward(&ramp_input(12, 4)).unwrap();
        assert_eq!(out.output.len(), 3);
        assert_eq!(out.hidden.len(), 7);
    }

    #[test]
    fn speech_shaped_stack_needs_eleven_frames() {
        // Kernels 5,7,1,1 with strides 1,2,1,1: one output frame needs 11.
        let specs = vec![
            LayerSpec::Conv1d { in_channels: 2, out_channels: 3, kernel: 5, stride: 1, relu: true },
            LayerSpec::Conv1d { in_channels: 3, out_channels: 3, kernel: 7, stride: 2, relu: true },
            LayerSpec::Conv1d { in_channels: 3, out_channels: 3, kernel: 1, stride: 1, relu: true },
            LayerSpec::Conv1d { in_channels: 3, out_channels: 4, kernel: 1, stride: 1, relu: true },
            LayerSpec::GlobalPool { with_std: false },
            LayerSpec::Dense { inputs: 4, outputs: 2, relu: false },
        ];
        let net = StackNet::build(2, specs, 0).unwrap();
        assert_eq!(net.min_input_rows(), 11);
        assert!(net.forward(&ramp_input(11, 2)).is_ok());
        assert!(net.forward(&ramp_input(10, 2)).is_err());
    }

    #[test]
    fn same_seed_same_network() {
        let a = StackNet::build(4, toy_specs(), 77).unwrap();
        let b = StackNet::build(4, toy_specs(), 77).unwrap();
        let x = ramp_input(10, 4);
        assert_eq!(a.forward(&x).unwrap().output, b.forward(&x).unwrap().output);
        let c = StackNet::build(4, toy_specs(), 78).unwrap();
        assert_ne!(a.forward(&x).unwrap().output, c.forward(&x).unwrap().output);
    }

    #[test]
    fn forward_and_forward_train_agree() {
        let mut net = StackNet::build(4, toy_specs(), 5).unwrap();
        let x = ramp_input(9, 4);
        let inf = net.forward(&x).unwrap();
        let tr = net.forward_train(&x).unwrap();
        assert_eq!(inf.output, tr);
    }

    #[test]
    fn backward_requires_a_recorded_forward() {
        let mut net = StackNet::build(4, toy_specs(), 5).unwrap();
        let err = net.backward(&[0.0; 3]).unwrap_err();
        assert!(matches!(err, DidError::BackwardBeforeForward));

        let x = ramp_input(9, 4);
        net.forward_train(&x).unwrap();
        net.backward(&[0.1, -0.2, 0.1]).unwrap();
        // Trace is consumed; a second backward must fail.
        assert!(matches!(
            net.backward(&[0.1, -0.2, 0.1]),
            Err(DidError::BackwardBeforeForward)
        ));
    }

    #[test]
    fn one_sgd_step_reduces_the_loss() {
        let mut net = StackNet::build(4, toy_specs(), 5).unwrap();
        let x = ramp_input(9, 4);
        let label = 2;
        let logits = net.forward_train(&x).unwrap();
        let (loss0, probs) = softmax_xent(&logits, label).unwrap();
        let mut g = probs;
        g[label] -= 1.0;
        net.backward(&g).unwrap();
        net.params_mut().sgd_step(0.05);
        net.params_mut().zero_grads();
        let logits = net.forward(&x).unwrap().output;
        let (loss1, _) = softmax_xent(&logits, label).unwrap();
        assert!(loss1 < loss0, "loss went from {loss0} to {loss1}");
    }

    #[test]
    fn validation_rejects_malformed_stacks() {
        // Dense before pool.
        let specs = vec![LayerSpec::Dense { inputs: 4, outputs: 2, relu: false }];
        assert!(StackNet::build(4, specs, 0).is_err());
        // Conv after pool.
        let specs = vec![
            LayerSpec::GlobalPool { with_std: false },
            LayerSpec::Conv1d { in_channels: 4, out_channels: 2, kernel: 1, stride: 1, relu: false },
            LayerSpec::Dense { inputs: 2, outputs: 2, relu: false },
        ];
        assert!(StackNet::build(4, specs, 0).is_err());
        // Channel mismatch between convolutions.
        let specs = vec![
            LayerSpec::Conv1d { in_channels: 4, out_channels: 6, kernel: 3, stride: 1, relu: true },
            LayerSpec::Conv1d { in_channels: 5, out_channels: 6, kernel: 3, stride: 1, relu: true },
            LayerSpec::GlobalPool { with_std: false },
            LayerSpec::Dense { inputs: 6, outputs: 2, relu: false },
        ];
        assert!(StackNet::build(4, specs, 0).is_err());
        // Missing pool entirely.
        let specs = vec![
            LayerSpec::Conv1d { in_channels: 4, out_channels: 6, kernel: 3, stride: 1, relu: true },
        ];
        assert!(StackNet::build(4, specs, 0).is_err());
        // Dense input mismatch after std pooling (doubles the width).
        let specs = vec![
            LayerSpec::Conv1d { in_channels: 4, out_channels: 6, kernel: 3, stride: 1, relu: true },
            LayerSpec::GlobalPool { with_std: true },
            LayerSpec::Dense { inputs: 6, outputs: 2, relu: false },
        ];
        assert!(StackNet::build(4, specs, 0).is_err());
    }

    #[test]
    fn std_pooling_doubles_the_flat_width() {
        let specs = vec![
            LayerSpec::Conv1d { in_channels: 4, out_channels: 6, kernel: 3, stride: 1, relu: true },
            LayerSpec::GlobalPool { with_std: true },
            LayerSpec::Dense { inputs: 12, outputs: 2, relu: false },
        ];
        let net = StackNet::build(4, specs, 0).unwrap();
        let out = net.forward(&ramp_input(8, 4)).unwrap();
        assert_eq!(out.hidden.len(), 12);
        assert_eq!(out.output.len(), 2);
    }

    #[test]
    fn wrong_channel_count_is_reported() {
        let net = StackNet::build(4, toy_specs(), 1).unwrap();
        let err = net.forward(&ramp_input(12, 3)).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }
}
