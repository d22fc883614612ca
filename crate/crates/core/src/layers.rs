//! Reusable parameterized layers shared by the attention blocks and models.

use std::cell::RefCell;

use crate::error::Result;
use crate::tensor::{batch_norm1d, Initializer, Parameter, Tensor};

/// Forward-pass mode; batch norm behaves differently between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Per-timestep dense layer `y = x W + b` with `W: [d_in, d_out]`.
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(init: &mut Initializer, d_in: usize, d_out: usize) -> Self {
        Dense {
            weight: init.dense(vec![d_in, d_out], d_in, d_out),
            bias: init.zeros(vec![d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias_last(&self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.weight"), self.weight.clone()));
        out.push(Parameter::new(format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Length-preserving 1D convolution with bias.
pub struct Conv1d {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    pub fn new(init: &mut Initializer, c_in: usize, c_out: usize, k: usize) -> Self {
        Conv1d {
            kernels: init.conv(c_out, c_in, k),
            bias: init.zeros(vec![c_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1d(&self.kernels, Some(&self.bias))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.weight"), self.kernels.clone()));
        out.push(Parameter::new(format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Batch normalization over channels with running statistics.
///
/// Training mode normalizes by batch statistics and updates the running
/// estimates with momentum 0.1; eval mode normalizes by the running
/// estimates. Epsilon is 1e-5.
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(init: &mut Initializer, channels: usize) -> Self {
        BatchNorm1d {
            gamma: init.constant(vec![channels], 1.0),
            beta: init.zeros(vec![channels]),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        let training = phase == Phase::Train;
        let (out, stats) = batch_norm1d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean.borrow(),
            &self.running_var.borrow(),
            self.eps,
            training,
        )?;
        if let Some(s) = stats {
            // Running variance uses the unbiased estimate when possible.
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..rm.len() {
                rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * s.mean[c];
                rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * s.var[c] * unbias;
            }
        }
        Ok(out)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.gamma"), self.gamma.clone()));
        out.push(Parameter::new(format!("{prefix}.beta"), self.beta.clone()));
    }

    /// Non-learnable state that must survive a checkpoint round-trip.
    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Vec<f64>)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.borrow().clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.borrow().clone()));
    }

    pub fn load_buffer(&self, name: &str, values: &[f64]) -> bool {
        if let Some(tag) = name.rsplit('.').next() {
            match tag {
                "running_mean" => {
                    self.running_mean.borrow_mut().copy_from_slice(values);
                    return true;
                }
                "running_var" => {
                    self.running_var.borrow_mut().copy_from_slice(values);
                    return true;
                }
                _ => {}
            }
        }
        false
    }
}

/// Layer normalization over the trailing axis with affine parameters.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Initializer, width: usize) -> Self {
        LayerNorm {
            gamma: init.constant(vec![width], 1.0),
            beta: init.zeros(vec![width]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<Parameter>) {
        out.push(Parameter::new(format!("{prefix}.gamma"), self.gamma.clone()));
        out.push(Parameter::new(format!("{prefix}.beta"), self.beta.clone()));
    }
}
