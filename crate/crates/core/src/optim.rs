//! The two optimizers of the parameter split: Adam for the policy group,
//! momentum SGD with weight decay for the recognition group.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

fn check_grads(store: &ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Dimension(format!(
            "{} gradient slots for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    Ok(())
}

/// Adaptive-moment updates restricted to one group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub group: ParamGroup,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(group: ParamGroup, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            group,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from gradients aligned with store order; parameters outside the group are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        check_grads(store, grads)?;
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, t)) in store.iter_mut().enumerate() {
            if ParamGroup::of(name) != Some(self.group) {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Heavy-ball momentum with L2 weight decay, restricted to one group.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub group: ParamGroup,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(group: ParamGroup, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            group,
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        check_grads(store, grads)?;
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for (i, (name, t)) in store.iter_mut().enumerate() {
            if ParamGroup::of(name) != Some(self.group) {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let vel = &mut self.velocity[i];
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let d = g[j] + self.weight_decay * *w;
                vel[j] = self.momentum * vel[j] + d;
                *w -= self.lr * vel[j];
            }
        }
        Ok(())
    }
}
