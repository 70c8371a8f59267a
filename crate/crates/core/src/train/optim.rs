//! SGD with momentum, L2 weight decay, and step learning-rate decay.

use serde::Serialize;

use super::TrainError;
use crate::net::{Module, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between learning-rate decays; 0 disables decay.
    pub decay_period: u64,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.99,
            weight_decay: 5e-3,
            decay_period: 2000,
            decay_factor: 0.2,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub iteration: u64,
    /// One buffer per trainable tensor, in visit order.
    pub velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            config,
            lr: config.lr,
            iteration: 0,
            velocities: Vec::new(),
        })
    }
}

/// `v <- mu v - lr (g + wd p)`, `p <- p + v`, then decay `lr` at period
/// boundaries. A non-finite gradient leaves parameters and state untouched.
pub fn sgd_step<T: Scalar>(module: &mut impl Module<T>, state: &mut OptimizerState) -> Result<(), TrainError> {
    let mut bad: Option<String> = None;
    let mut sizes = Vec::new();
    module.visit(&mut |p| {
        if !p.trainable {
            return;
        }
        if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
            bad = Some(p.name.clone());
        }
        sizes.push(p.len());
    });
    if let Some(name) = bad {
        return Err(TrainError::NonFiniteGradient {
            iteration: state.iteration,
            param: name,
        });
    }
    if state.velocities.is_empty() {
        state.velocities = sizes.iter().map(|&n| vec![0.0; n]).collect();
    } else if state.velocities.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err(TrainError::Config("velocity buffers do not match the parameters".into()));
    }

    let (lr, mu, wd) = (state.lr, state.config.momentum, state.config.weight_decay);
    let mut k = 0;
    let velocities = &mut state.velocities;
    module.visit_mut(&mut |p| {
        if !p.trainable {
            return;
        }
        let v = &mut velocities[k];
        for ((w, &g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
            let wf = w.as_f64();
            *vi = mu * *vi - lr * (g.as_f64() + wd * wf);
            *w = T::of(wf + *vi);
        }
        k += 1;
    });
    state.iteration += 1;
    let period = state.config.decay_period;
    if period > 0 && state.iteration % period == 0 {
        state.lr *= state.config.decay_factor;
    }
    Ok(())
}
