//! Channel recalibration: squeeze-and-excitation and coordinate attention.

use rand::Rng;

use super::context::Context;
use super::{linear_uniform, Bound, CaOverride, ForwardCtx};
use crate::error::{config_err, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::{Activation, Conv2dGeometry, PoolGeometry};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub squeeze: usize,
}

impl SqueezeExcite {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        squeeze: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w1 = store.add(format!("{prefix}.fc1.weight"), linear_uniform(&[squeeze, channels], channels, rng)?, ParamKind::Trainable)?;
        let b1 = store.add(format!("{prefix}.fc1.bias"), linear_uniform(&[squeeze], channels, rng)?, ParamKind::Trainable)?;
        let w2 = store.add(format!("{prefix}.fc2.weight"), linear_uniform(&[channels, squeeze], squeeze, rng)?, ParamKind::Trainable)?;
        let b2 = store.add(format!("{prefix}.fc2.bias"), linear_uniform(&[channels], squeeze, rng)?, ParamKind::Trainable)?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            channels,
            squeeze,
        })
    }

    /// `x · σ(W₂ relu(W₁ mean(x)))` per channel.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>) -> Result<Var> {
        let s = tape.global_avg_pool(x)?;
        let h = tape.linear(s, p.var(self.w1), Some(p.var(self.b1)))?;
        let h = tape.activation(h, Activation::Relu);
        let g = tape.linear(h, p.var(self.w2), Some(p.var(self.b2)))?;
        let g = tape.activation(g, Activation::Sigmoid);
        tape.channel_scale(x, g)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels * self.squeeze + self.channels + self.squeeze
    }
}

/// One direction of coordinate attention: a 1×1 conv `H → C` with bias.
#[derive(Clone, Debug)]
pub struct CaBranch {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct CoordAttention {
    pub freq: Option<CaBranch>,
    pub time: Option<CaBranch>,
    pub channels: usize,
    pub context_dim: usize,
    pub stride: usize,
}

impl CoordAttention {
    /// Both linears start at zero so every weight is σ(0) = 0.5.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        context_dim: usize,
        stride: usize,
        frequency: bool,
        time: bool,
    ) -> Result<Self> {
        if !frequency && !time {
            return config_err("coordinate attention needs at least one direction");
        }
        let mut branch = |name: &str| -> Result<CaBranch> {
            Ok(CaBranch {
                weight: store.add(
                    format!("{prefix}.{name}.weight"),
                    Tensor::zeros(&[channels, context_dim, 1, 1])?,
                    ParamKind::Trainable,
                )?,
                bias: store.add(format!("{prefix}.{name}.bias"), Tensor::zeros(&[channels])?, ParamKind::Trainable)?,
            })
        };
        let freq = if frequency { Some(branch("freq")?) } else { None };
        let time = if time { Some(branch("time")?) } else { None };
        Ok(Self {
            freq,
            time,
            channels,
            context_dim,
            stride,
        })
    }

    /// Attention weights for one sequence `B × H × L × 1`, downsampled to
    /// the block resolution when strided.
    fn branch_weights<T: Real>(&self, tape: &mut Tape<T>, seq: Var, b: &CaBranch, p: &Bound<T>) -> Result<Var> {
        let seq = if self.stride > 1 {
            tape.avg_pool2d(
                seq,
                PoolGeometry {
                    kernel: (3, 1),
                    stride: (self.stride, 1),
                    padding: (1, 0),
                },
            )?
        } else {
            seq
        };
        let z = tape.conv2d(seq, p.var(b.weight), Some(p.var(b.bias)), Conv2dGeometry::pointwise())?;
        Ok(tape.activation(z, Activation::Sigmoid))
    }

    /// Frequency and time weights, `B × C × F × 1` and `B × C × T × 1`.
    pub fn weights<T: Real>(&self, tape: &mut Tape<T>, context: &Context, p: &Bound<T>) -> Result<(Option<Var>, Option<Var>)> {
        let sf = match &self.freq {
            Some(b) => Some(self.branch_weights(tape, context.freq, b, p)?),
            None => None,
        };
        let st = match &self.time {
            Some(b) => Some(self.branch_weights(tape, context.time, b, p)?),
            None => None,
        };
        Ok((sf, st))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        context: &Context,
        p: &Bound<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        let (mut sf, mut st) = self.weights(tape, context, p)?;
        let block = ctx.block;
        if let Some(hook) = ctx.hook.as_deref_mut() {
            let vf = sf.map(|v| tape.value(v).clone());
            let vt = st.map(|v| tape.value(v).clone());
            match hook.ca_weights(block, vf.as_ref(), vt.as_ref()) {
                None => {}
                Some(CaOverride::Factored(f, t)) => {
                    sf = f.map(|f| tape.constant(f));
                    st = t.map(|t| tape.constant(t));
                }
                Some(CaOverride::Full(map)) => {
                    let m = tape.constant(map);
                    return tape.mul(x, m);
                }
            }
        }
        tape.coord_scale(x, sf, st)
    }

    pub fn param_count(&self) -> usize {
        let per = self.channels * self.context_dim + self.channels;
        per * (self.freq.is_some() as usize + self.time.is_some() as usize)
    }
}
