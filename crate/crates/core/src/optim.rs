//! AdamW with decoupled weight decay and per-parameter step sizes.

use std::collections::BTreeMap;

use crate::container::Entry;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Matrices and larger tensors decay; gains, biases, embedding vectors do not.
fn decays(value: &Tensor) -> bool {
    value.rank() >= 2
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. `lr(name)` gives each parameter's step size; parameters
    /// absent from `grads` are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        cfg: &AdamWConfig,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, grad) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != grad.shape() {
                return Err(Error::dim(
                    "adamw",
                    format!("gradient shape {:?} for {name} {:?}", grad.shape(), p.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let lr = lr(name);
            let wd = if decays(p) { cfg.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *pi);
            }
            p.check_finite("adamw")?;
        }
        Ok(())
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<Entry> {
        let mut out = vec![Entry::words(format!("{prefix}step"), vec![self.step])];
        out.extend(self.m.iter().map(|(k, t)| Entry::tensor(format!("{prefix}m.{k}"), t)));
        out.extend(self.v.iter().map(|(k, t)| Entry::tensor(format!("{prefix}v.{k}"), t)));
        out
    }

    pub fn from_entries(entries: &[Entry], prefix: &str) -> Result<Self> {
        let mut opt = AdamW::new();
        for e in entries {
            let Some(rest) = e.name.strip_prefix(prefix) else {
                continue;
            };
            if rest == "step" {
                opt.step = *e.as_words()?.first().ok_or_else(|| Error::Format {
                    context: e.name.clone(),
                    detail: "empty step counter".into(),
                })?;
            } else if let Some(k) = rest.strip_prefix("m.") {
                opt.m.insert(k.to_string(), e.to_tensor()?);
            } else if let Some(k) = rest.strip_prefix("v.") {
                opt.v.insert(k.to_string(), e.to_tensor()?);
            }
        }
        Ok(opt)
    }
}
