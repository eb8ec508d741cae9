//! Wengert-list reverse-mode autodiff over [`Tensor`] values.
//!
//! Parameters are borrowed from their [`ParamSet`](super::ParamSet), never
//! copied; only parameters that were actually recorded can receive a
//! gradient, so blocks skipped by a subnet mask are simply absent from the
//! resulting [`Gradients`].

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::loss::LOG_CLAMP;
use super::{add, cross_entropy, kl_divergence_masked, linear, relu, softmax, ParamId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu(usize),
    Add(usize, usize),
    Softmax(usize),
    CrossEntropy {
        probs: usize,
        targets: Tensor,
    },
    Kl {
        pred: usize,
        target: Tensor,
        valid: Vec<bool>,
    },
    Combine {
        a: usize,
        b: usize,
        weight: f64,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    macs: u64,
}

/// Gradients keyed by parameter, holding only parameters that took part in
/// the recorded computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(existing) => {
                existing.expect_same_shape(grad, "gradient accumulate")?;
                for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(id, grad.clone());
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulate operations executed so far, forward and backward.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.val(self.idx(v)?))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// Records a borrowed parameter as a differentiable leaf.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Param(id), true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = linear(self.val(xi), self.val(wi), self.val(bi))?;
        let (batch, fan_in) = self.val(xi).expect_matrix("linear")?;
        self.macs += (batch * fan_in * out.cols()) as u64;
        let rg = self.rg(xi) || self.rg(wi) || self.rg(bi);
        Ok(self.push(
            Cow::Owned(out),
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = relu(self.val(xi));
        let rg = self.rg(xi);
        Ok(self.push(Cow::Owned(out), Op::Relu(xi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = add(self.val(ai), self.val(bi))?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(Cow::Owned(out), Op::Add(ai, bi), rg))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let zi = self.idx(z)?;
        let out = softmax(self.val(zi))?;
        let rg = self.rg(zi);
        Ok(self.push(Cow::Owned(out), Op::Softmax(zi), rg))
    }

    /// Scalar cross-entropy of probabilities `p` against one-hot `targets`.
    pub fn cross_entropy(&mut self, p: Var, targets: &Tensor) -> Result<Var> {
        let pi = self.idx(p)?;
        let loss = cross_entropy(self.val(pi), targets)?;
        let rg = self.rg(pi);
        let op = Op::CrossEntropy {
            probs: pi,
            targets: targets.clone(),
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), op, rg))
    }

    /// Scalar `KL(target ‖ pred)` over rows flagged `valid`. The target is
    /// copied in as a constant and never receives gradient.
    pub fn kl_divergence(&mut self, target: &Tensor, pred: Var, valid: &[bool]) -> Result<Var> {
        let pi = self.idx(pred)?;
        let loss = kl_divergence_masked(target, self.val(pi), valid)?;
        let rg = self.rg(pi);
        let op = Op::Kl {
            pred: pi,
            target: target.clone(),
            valid: valid.to_vec(),
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), op, rg))
    }

    /// `a + weight·b` for scalar `a` and `b`.
    pub fn combine(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).len() != 1 || self.val(bi).len() != 1 {
            return Err(Error::shape("combine", "operands must be scalars"));
        }
        let value = self.val(ai).data()[0] + weight * self.val(bi).data()[0];
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(value)),
            Op::Combine {
                a: ai,
                b: bi,
                weight,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`, visiting each recorded node at most
    /// once from the loss back to the first node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.val(li).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        let mut work_done = 0u64;

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g)?,
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (xv, wv) = (self.val(x), self.val(w));
                    let (batch, fan_in) = xv.expect_matrix("linear backward")?;
                    let fan_out = wv.rows();
                    let gd = g.data();
                    let work = (batch * fan_in * fan_out) as u64;
                    if self.rg(x) {
                        let mut dx = vec![0.0; batch * fan_in];
                        for r in 0..batch {
                            let dxr = &mut dx[r * fan_in..(r + 1) * fan_in];
                            for o in 0..fan_out {
                                let go = gd[r * fan_out + o];
                                let wo = &wv.data()[o * fan_in..(o + 1) * fan_in];
                                for (d, wv) in dxr.iter_mut().zip(wo) {
                                    *d += go * wv;
                                }
                            }
                        }
                        work_done += work;
                        accumulate(&mut grads, x, Tensor::new(vec![batch, fan_in], dx)?)?;
                    }
                    if self.rg(w) {
                        let mut dw = vec![0.0; fan_out * fan_in];
                        for r in 0..batch {
                            let xr = xv.row(r);
                            for o in 0..fan_out {
                                let go = gd[r * fan_out + o];
                                for (d, xv) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xr) {
                                    *d += go * xv;
                                }
                            }
                        }
                        work_done += work;
                        accumulate(&mut grads, w, Tensor::new(vec![fan_out, fan_in], dw)?)?;
                    }
                    if self.rg(b) {
                        let mut db = vec![0.0; fan_out];
                        for r in 0..batch {
                            for (d, go) in db.iter_mut().zip(&gd[r * fan_out..(r + 1) * fan_out]) {
                                *d += go;
                            }
                        }
                        let shape = self.val(b).shape().to_vec();
                        accumulate(&mut grads, b, Tensor::new(shape, db)?)?;
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mut dx = g;
                    for (d, &xv) in dx.data_mut().iter_mut().zip(self.val(x).data()) {
                        if xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(b) {
                        accumulate(&mut grads, b, g.clone())?;
                    }
                    accumulate(&mut grads, a, g)?;
                }
                Op::Softmax(z) => {
                    let z = *z;
                    let p = &self.nodes[i].value;
                    let cols = p.cols();
                    let mut dz = vec![0.0; p.len()];
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dz[r * cols + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    let shape = p.shape().to_vec();
                    accumulate(&mut grads, z, Tensor::new(shape, dz)?)?;
                }
                Op::CrossEntropy { probs, targets } => {
                    let probs = *probs;
                    let p = self.val(probs);
                    let scale = g.data()[0] / p.rows() as f64;
                    let dp: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&pv, &t)| {
                            if t > 0.0 && pv > LOG_CLAMP {
                                -scale * t / pv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let shape = p.shape().to_vec();
                    accumulate(&mut grads, probs, Tensor::new(shape, dp)?)?;
                }
                Op::Kl {
                    pred,
                    target,
                    valid,
                } => {
                    let pred = *pred;
                    let q = self.val(pred);
                    let count = valid.iter().filter(|&&v| v).count();
                    let mut dq = vec![0.0; q.len()];
                    if count > 0 {
                        let scale = g.data()[0] / count as f64;
                        let cols = q.cols();
                        for r in (0..q.rows()).filter(|&r| valid[r]) {
                            for j in 0..cols {
                                let (t, qv) = (target.row(r)[j], q.row(r)[j]);
                                if t > 0.0 && qv > LOG_CLAMP {
                                    dq[r * cols + j] = -scale * t / qv;
                                }
                            }
                        }
                    }
                    let shape = q.shape().to_vec();
                    accumulate(&mut grads, pred, Tensor::new(shape, dq)?)?;
                }
                Op::Combine { a, b, weight } => {
                    let (a, b, weight) = (*a, *b, *weight);
                    let gv = g.data()[0];
                    accumulate(&mut grads, a, Tensor::scalar(gv))?;
                    accumulate(&mut grads, b, Tensor::scalar(weight * gv))?;
                }
            }
        }
        self.macs += work_done;
        Ok(out)
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) -> Result<()> {
    match &mut grads[i] {
        Some(existing) => {
            existing.expect_same_shape(&g, "backward")?;
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
