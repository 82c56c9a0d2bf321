use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with L2 weight decay added to the gradient (the classic coupled
/// form) and optional clipping of the global gradient norm.
#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
    learning_rate: f64,
    weight_decay: f64,
    grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, learning_rate: f64, weight_decay: f64, grad_clip: Option<f64>) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            params,
            m,
            v,
            step: 0,
            learning_rate,
            weight_decay,
            grad_clip,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Restores moment estimates and the step counter.
    pub fn load_state(&mut self, step: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            for (kind, map) in [("m", &m), ("v", &v)] {
                let t = map
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state {kind} missing for `{name}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(format!("optimizer state {kind}.{name}"), var.dims(), t.dims()));
                }
            }
        }
        let dtype = self.params.first().map(|(_, v)| v.dtype());
        let known = |k: &String| self.params.iter().any(|(n, _)| n == k);
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.into_iter()
                .filter(|(k, _)| known(k))
                .map(|(k, t)| Ok((k, dtype.map_or(Ok(t.clone()), |d| t.to_dtype(d))?)))
                .collect()
        };
        let (m, v) = (cast(m)?, cast(v)?);
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    pub fn state(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Global L2 norm over the gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<StepStats> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let scale = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, var) in &self.params {
            // Detached so the stored moments never hold on to autograd history.
            let theta = var.as_tensor().detach();
            let grad = match grads.get(var.as_tensor()) {
                Some(g) => (g.detach() * scale)?,
                None => theta.zeros_like()?,
            };
            let grad = if self.weight_decay != 0.0 {
                (grad + (&theta * self.weight_decay)?)?
            } else {
                grad
            };
            let m = ((&self.m[name] * BETA1)? + (&grad * (1.0 - BETA1))?)?;
            let v = ((&self.v[name] * BETA2)? + (grad.sqr()? * (1.0 - BETA2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + EPSILON)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(&theta - (update * self.learning_rate)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }
}
