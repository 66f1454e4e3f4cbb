//! Reverse-mode gradient tape.
//!
//! Each recording method evaluates its op eagerly, stores the result and
//! whatever the backward pass needs, and returns a [`Var`] handle. The tape is
//! not consumed by [`Tape::backward`]; calling it twice and accumulating both
//! results yields exactly twice the gradients.

use rand::{Rng, RngExt};

use super::ops::{self, Activation, BatchStats, Conv2dGeometry, DyReluRanges, PoolGeometry, SpatialAxis};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::params::{GradStore, ParamId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SumAll(Var),
    Activation(Var, Activation),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    },
    Conv2dPerSample {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    },
    MixKernels {
        att: Var,
        kernels: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    AvgPool2d(Var, PoolGeometry),
    AxisPool(Var, SpatialAxis),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SoftmaxTemp(Var, f64),
    DyReluCoefficients(Var, DyReluRanges),
    DyReluApply {
        x: Var,
        coef: Var,
        arg: Vec<u8>,
        mappings: usize,
    },
    CoordScale {
        x: Var,
        sf: Option<Var>,
        st: Option<Var>,
    },
    ChannelScale(Var, Var),
    Dropout(Var, Vec<T>),
    BceWithLogits(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph in evaluation order.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn rg_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.nodes[v.0].requires_grad)
    }

    /// A value no gradient flows into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter; its gradient is routed to `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(id), true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = ops::activation(self.value(x), kind);
        let rg = self.rg(&[x]);
        self.push(v, Op::Activation(x, kind), rg)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    ) -> Result<Var> {
        let v = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let rg = self.rg(&[x, w]) || self.rg_opt(bias);
        Ok(self.push(v, Op::Conv2d { x, w, bias, geom }, rg))
    }

    /// Convolution with kernels stacked per sample, see
    /// [`ops::conv2d_per_sample_forward`].
    pub fn conv2d_per_sample(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    ) -> Result<Var> {
        let v = ops::conv2d_per_sample_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let rg = self.rg(&[x, w]) || self.rg_opt(bias);
        Ok(self.push(v, Op::Conv2dPerSample { x, w, bias, geom }, rg))
    }

    pub fn mix_kernels(&mut self, att: Var, kernels: Var) -> Result<Var> {
        let v = ops::mix_kernels(self.value(att), self.value(kernels))?;
        let rg = self.rg(&[att, kernels]);
        Ok(self.push(v, Op::MixKernels { att, kernels }, rg))
    }

    /// Batch norm with batch statistics; the statistics are returned so the
    /// caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (y, xhat, inv_std, stats) = ops::batch_norm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let y = ops::batch_norm(
            self.value(x),
            mean,
            var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, g: PoolGeometry) -> Result<Var> {
        let v = ops::avg_pool2d(self.value(x), &g)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::AvgPool2d(x, g), rg))
    }

    pub fn axis_pool(&mut self, x: Var, axis: SpatialAxis) -> Result<Var> {
        let v = ops::axis_pool(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::AxisPool(x, axis), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GlobalAvgPool(x), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(&[x, w]) || self.rg_opt(b);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&vals, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice_axis(self.value(x), axis, start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    pub fn softmax_temperature(&mut self, x: Var, tau: f64) -> Result<Var> {
        let v = ops::softmax_temperature(self.value(x), tau)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SoftmaxTemp(x, tau), rg))
    }

    pub fn dyrelu_coefficients(&mut self, raw: Var, ranges: &DyReluRanges) -> Result<Var> {
        ranges.validate()?;
        let v = ops::dyrelu_coefficients(self.value(raw), ranges)?;
        let rg = self.rg(&[raw]);
        Ok(self.push(v, Op::DyReluCoefficients(raw, ranges.clone()), rg))
    }

    pub fn dyrelu_apply(&mut self, x: Var, coef: Var, mappings: usize) -> Result<Var> {
        let (v, arg) = ops::dyrelu_apply(self.value(x), self.value(coef), mappings)?;
        let rg = self.rg(&[x, coef]);
        Ok(self.push(
            v,
            Op::DyReluApply {
                x,
                coef,
                arg,
                mappings,
            },
            rg,
        ))
    }

    pub fn coord_scale(&mut self, x: Var, sf: Option<Var>, st: Option<Var>) -> Result<Var> {
        let v = ops::coord_scale(
            self.value(x),
            sf.map(|s| self.value(s)),
            st.map(|s| self.value(s)),
        )?;
        let rg = self.rg(&[x]) || self.rg_opt(sf) || self.rg_opt(st);
        Ok(self.push(v, Op::CoordScale { x, sf, st }, rg))
    }

    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let v = ops::channel_scale(self.value(x), self.value(s))?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::ChannelScale(x, s), rg))
    }

    /// Inverted dropout: kept elements are scaled by `1/(1−p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut v = self.value(x).clone();
        for (a, &m) in v.data_mut().iter_mut().zip(&mask) {
            *a *= m;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Dropout(x, mask), rg))
    }

    /// Mean `BCE(σ(z), target)`; the target is a constant.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<T>) -> Result<Var> {
        let v = Tensor::scalar(ops::bce_with_logits(self.value(z), target)?);
        let rg = self.rg(&[z]);
        Ok(self.push(v, Op::BceWithLogits(z, target.clone()), rg))
    }

    /// Smallest distance from any recorded activation input to a point where
    /// its derivative jumps (relu/hardswish kinks, Dy-ReLU ties).
    pub fn min_kink_distance(&self) -> f64 {
        let mut d = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                &Op::Activation(x, kind) => {
                    for &v in self.value(x).data() {
                        d = d.min(kind.kink_distance(v));
                    }
                }
                Op::DyReluApply {
                    x, coef, mappings, ..
                } => {
                    d = d.min(ops::dyrelu_margin(self.value(*x), self.value(*coef), *mappings));
                }
                _ => {}
            }
        }
        d
    }

    /// Hash of every piecewise branch taken in the forward pass: relu sign,
    /// hardswish segment and Dy-ReLU winning mapping per element. Two passes
    /// with equal signatures evaluate the same smooth function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                &Op::Activation(x, kind) => {
                    for &v in self.value(x).data() {
                        let seg = match kind {
                            Activation::Relu => u8::from(v > T::zero()),
                            Activation::Hardswish => {
                                let three = T::of(3.0);
                                if v < -three {
                                    0
                                } else if v <= three {
                                    1
                                } else {
                                    2
                                }
                            }
                            Activation::Sigmoid => 0,
                        };
                        h.write_u8(seg);
                    }
                }
                Op::DyReluApply { arg, .. } => h.write(arg),
                _ => {}
            }
        }
        h.finish()
    }

    /// Backward pass seeded with ones (`loss` is usually a scalar).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_var(loss)?;
        let seed = Tensor::full(self.value(loss).shape(), T::one())?;
        self.backward_with(loss, seed)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward op".into()));
        }
        if v.0 >= self.nodes.len() {
            return Err(Error::State(format!("variable {} not on this tape", v.0)));
        }
        Ok(())
    }

    /// Backward pass from `out` seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check_var(out)?;
        if seed.shape() != self.value(out).shape() {
            return shape_err(format!(
                "seed gradient {:?} for output {:?}",
                seed.shape(),
                self.value(out).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn send_opt(&self, grads: &mut [Option<Tensor<T>>], v: Option<Var>, g: Tensor<T>) -> Result<()> {
        match v {
            Some(v) => self.send(grads, v, g),
            None => Ok(()),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(x).shape())?;
                self.send(grads, x, gx)?;
            }
            &Op::Add(a, b) => {
                self.send(grads, a, g.clone())?;
                self.send(grads, b, g.clone())?;
            }
            &Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), |p, q| p * q)?;
                let gb = g.zip_map(self.value(a), |p, q| p * q)?;
                self.send(grads, a, ga)?;
                self.send(grads, b, gb)?;
            }
            &Op::Scale(x, c) => self.send(grads, x, g.scale(c))?,
            &Op::SumAll(x) => {
                let gx = Tensor::full(self.value(x).shape(), g.data()[0])?;
                self.send(grads, x, gx)?;
            }
            &Op::Activation(x, kind) => {
                let gx = g.zip_map(self.value(x), |gv, xv| gv * kind.derivative(xv))?;
                self.send(grads, x, gx)?;
            }
            &Op::Conv2d { x, w, bias, geom } => {
                let cg = ops::conv2d_backward(self.value(x), self.value(w), g, &geom)?;
                self.send(grads, x, cg.dx)?;
                self.send(grads, w, cg.dw)?;
                self.send_opt(grads, bias, cg.db)?;
            }
            &Op::Conv2dPerSample { x, w, bias, geom } => {
                let cg = ops::conv2d_per_sample_backward(self.value(x), self.value(w), g, &geom)?;
                self.send(grads, x, cg.dx)?;
                self.send(grads, w, cg.dw)?;
                self.send_opt(grads, bias, cg.db)?;
            }
            &Op::MixKernels { att, kernels } => {
                let (ga, gk) = ops::mix_kernels_backward(self.value(att), self.value(kernels), g);
                self.send(grads, att, ga)?;
                self.send(grads, kernels, gk)?;
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) =
                    ops::batch_norm_train_backward(g, xhat, self.value(*gamma).data(), inv_std);
                self.send(grads, *x, dx)?;
                self.send(grads, *gamma, Tensor::new(vec![dg.len()], dg)?)?;
                self.send(grads, *beta, Tensor::new(vec![db.len()], db)?)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dg, db) = ops::batch_norm_eval_backward(
                    g,
                    self.value(*x),
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                );
                self.send(grads, *x, dx)?;
                self.send(grads, *gamma, Tensor::new(vec![dg.len()], dg)?)?;
                self.send(grads, *beta, Tensor::new(vec![db.len()], db)?)?;
            }
            &Op::AvgPool2d(x, geom) => {
                let gx = ops::avg_pool2d_backward(self.value(x).shape(), g, &geom);
                self.send(grads, x, gx)?;
            }
            &Op::AxisPool(x, axis) => {
                let gx = ops::axis_pool_backward(self.value(x).shape(), g, axis);
                self.send(grads, x, gx)?;
            }
            &Op::GlobalAvgPool(x) => {
                let gx = ops::global_avg_pool_backward(self.value(x).shape(), g);
                self.send(grads, x, gx)?;
            }
            &Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.value(x), self.value(w), g);
                self.send(grads, x, dx)?;
                self.send(grads, w, dw)?;
                self.send_opt(grads, b, db)?;
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let gp = ops::slice_axis(g, *axis, start, len)?;
                    self.send(grads, p, gp)?;
                    start += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let gx = ops::slice_axis_backward(self.value(x).shape(), axis, start, g);
                self.send(grads, x, gx)?;
            }
            &Op::SoftmaxTemp(x, tau) => {
                let gx = ops::softmax_temperature_backward(&node.value, g, tau);
                self.send(grads, x, gx)?;
            }
            Op::DyReluCoefficients(raw, ranges) => {
                let gx = ops::dyrelu_coefficients_backward(self.value(*raw), g, ranges);
                self.send(grads, *raw, gx)?;
            }
            Op::DyReluApply {
                x,
                coef,
                arg,
                mappings,
            } => {
                let (dx, dc) =
                    ops::dyrelu_apply_backward(self.value(*x), self.value(*coef), arg, g, *mappings);
                self.send(grads, *x, dx)?;
                self.send(grads, *coef, dc)?;
            }
            &Op::CoordScale { x, sf, st } => {
                let (dx, dsf, dst) = ops::coord_scale_backward(
                    self.value(x),
                    sf.map(|s| self.value(s)),
                    st.map(|s| self.value(s)),
                    g,
                );
                self.send(grads, x, dx)?;
                if let (Some(v), Some(t)) = (sf, dsf) {
                    self.send(grads, v, t)?;
                }
                if let (Some(v), Some(t)) = (st, dst) {
                    self.send(grads, v, t)?;
                }
            }
            &Op::ChannelScale(x, s) => {
                let (dx, ds) = ops::channel_scale_backward(self.value(x), self.value(s), g);
                self.send(grads, x, dx)?;
                self.send(grads, s, ds)?;
            }
            Op::Dropout(x, mask) => {
                let mut gx = g.clone();
                for (a, &m) in gx.data_mut().iter_mut().zip(mask) {
                    *a *= m;
                }
                self.send(grads, *x, gx)?;
            }
            Op::BceWithLogits(z, target) => {
                let gz = ops::bce_with_logits_backward(self.value(*z), target, g.data()[0]);
                self.send(grads, *z, gz)?;
            }
        }
        Ok(())
    }
}

/// Result of one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a recorded value, `None` when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter nodes, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into its buffer.
    pub fn accumulate_into(&self, store: &mut GradStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate(id, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.activation(x, Activation::Relu);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn pointwise_kernel_gradient_is_input_sum() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.5 - 1.0).unwrap();
        let total = xv.sum();
        let x = tape.constant(xv);
        let w = tape.input(Tensor::full(&[1, 1, 1, 1], 0.7).unwrap());
        let y = tape.conv2d(x, w, None, Conv2dGeometry::pointwise()).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!((g.wrt(w).unwrap().data()[0] - total).abs() < 1e-12);
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn constant_branches_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.input(Tensor::scalar(3.0));
        let c = tape.mul(a, b).unwrap();
        let g = tape.backward(c).unwrap();
        assert!(g.wrt(a).is_none());
        assert_eq!(g.wrt(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[7.0]);
    }
}
