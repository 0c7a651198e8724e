//! Batch normalization and the ADQ block wrapper.
//!
//! ADQ normalizes the block input once, runs the wrapped residual branch and
//! rescales its output by `γ·σ(x) + β`, where `σ(x)` is the per-sample
//! standard deviation of the block input before normalization. There is no
//! second normalization after the branch.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, ParamGroup, StdLayout, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated only if asked.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

#[derive(Debug)]
pub struct BatchNorm2d {
    weight: Param,
    bias: Param,
    running_mean: RefCell<Vec<f64>>,
    running_var: RefCell<Vec<f64>>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(format!("{name}.weight"), ParamGroup::Weight, Tensor::ones(&[channels])),
            bias: Param::new(format!("{name}.bias"), ParamGroup::Weight, Tensor::zeros(&[channels])),
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (self.running_mean.borrow().clone(), self.running_var.borrow().clone())
    }

    pub fn set_running_stats(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.running_mean.borrow().len();
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(format!(
                "running statistics for {c} channels, got {} and {}",
                mean.len(),
                var.len()
            )));
        }
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: BnMode) -> Result<Var> {
        let xhat = match mode {
            BnMode::Train { update_stats } => {
                let (xhat, mean, var) = g.batch_norm(x, BN_EPS)?;
                if update_stats {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for c in 0..rm.len() {
                        rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                        rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c];
                    }
                }
                xhat
            }
            BnMode::Eval => {
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                let scale = Tensor::from_vec(rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect());
                let shift = Tensor::from_vec(rm.clone());
                let shift = g.constant(shift);
                let scale = g.constant(scale);
                let centered = g.sub(x, shift)?;
                g.mul(centered, scale)?
            }
        };
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.mul(xhat, w)?;
        g.add(y, b)
    }

    pub fn deep_clone(&self) -> BatchNorm2d {
        BatchNorm2d {
            weight: self.weight.deep_clone(),
            bias: self.bias.deep_clone(),
            running_mean: RefCell::new(self.running_mean.borrow().clone()),
            running_var: RefCell::new(self.running_var.borrow().clone()),
        }
    }
}

#[derive(Debug)]
pub struct AdqBlock {
    gamma: Param,
    beta: Param,
    bn: Option<BatchNorm2d>,
}

impl AdqBlock {
    /// `γ = 1, β = 0`: the branch output is restored to the input's spread.
    pub fn new(name: &str, channels: usize, with_bn: bool) -> Self {
        AdqBlock {
            gamma: Param::new(format!("{name}.gamma"), ParamGroup::Weight, Tensor::scalar(1.0)),
            beta: Param::new(format!("{name}.beta"), ParamGroup::Weight, Tensor::scalar(0.0)),
            bn: with_bn.then(|| BatchNorm2d::new(&format!("{name}.bn"), channels)),
        }
    }

    pub fn set_scalars(&self, gamma: f64, beta: f64) {
        self.gamma.set_value(Tensor::scalar(gamma));
        self.beta.set_value(Tensor::scalar(beta));
    }

    pub fn bn(&self) -> Option<&BatchNorm2d> {
        self.bn.as_ref()
    }

    pub fn params(&self) -> Vec<Param> {
        let mut v = vec![self.gamma.clone(), self.beta.clone()];
        if let Some(bn) = &self.bn {
            v.extend(bn.params());
        }
        v
    }

    /// `block(bn(x)) · (γ·σ(x) + β) + x`.
    pub fn forward<F>(&self, g: &mut Graph, x: Var, mode: BnMode, block: F) -> Result<Var>
    where
        F: FnOnce(&mut Graph, Var) -> Result<Var>,
    {
        let sigma = g.std(x, StdLayout::PerSample)?;
        let xin = match &self.bn {
            Some(bn) => bn.forward(g, x, mode)?,
            None => x,
        };
        let y = block(g, xin)?;
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let gs = g.mul(sigma, gamma)?;
        let scale = g.add(gs, beta)?;
        let y = g.mul(y, scale)?;
        g.add(y, x)
    }

    pub fn deep_clone(&self) -> AdqBlock {
        AdqBlock {
            gamma: self.gamma.deep_clone(),
            beta: self.beta.deep_clone(),
            bn: self.bn.as_ref().map(BatchNorm2d::deep_clone),
        }
    }
}
