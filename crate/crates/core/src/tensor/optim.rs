use std::f64::consts::PI;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// Stable handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameters plus their momentum buffers. Insertion order is the
/// canonical order used for initialization and serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    velocity: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            velocity: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.velocity.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn velocity(&self, id: ParamId) -> &Tensor {
        &self.velocity[id.0]
    }

    pub fn velocity_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.velocity[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `v := momentum·v + (g + wd·w)`, `w := w - lr·v`.
///
/// Parameters without an entry in `grads` are left untouched, velocity included.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "sgd needs lr > 0 and 0 <= momentum < 1 (lr {lr}, momentum {momentum})"
        )));
    }
    for (id, grad) in grads.iter() {
        if id.0 >= params.len() {
            return Err(Error::OutOfRange {
                index: id.0,
                len: params.len(),
            });
        }
        params.values[id.0].expect_same_shape(grad, "sgd_step")?;
        let w = params.values[id.0].data_mut();
        let v = params.velocity[id.0].data_mut();
        for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *v = momentum * *v + (g + weight_decay * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Cosine decay from `lr0` at step 0 to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule needs 0 <= step <= total, total > 0 (step {step}, total {total})"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()))
}
