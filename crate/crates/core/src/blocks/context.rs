//! Context generation: one embedding per block input shared by every dynamic
//! component of that block.

use rand::Rng;

use super::{kaiming_uniform, BnSlot, Bound, ForwardCtx};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::{Activation, Conv2dGeometry, SpatialAxis};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;

/// Outputs of the context module for a `B × C × F × T` input.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    /// Time-sequence embedding, `B × H × T × 1`.
    pub time: Var,
    /// Frequency-sequence embedding, `B × H × F × 1`.
    pub freq: Var,
    /// Mean over the concatenated sequence, `B × H`.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct ContextModule {
    pub conv: ParamId,
    pub bn: BnSlot,
    pub c_in: usize,
    pub dim: usize,
}

impl ContextModule {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = store.add(
            format!("{prefix}.conv.weight"),
            kaiming_uniform(&[dim, c_in, 1, 1], c_in, rng)?,
            ParamKind::Trainable,
        )?;
        let bn = BnSlot::register(store, &format!("{prefix}.bn"), dim)?;
        Ok(Self { conv, bn, c_in, dim })
    }

    /// Pools over frequency and time, concatenates the two sequences, and
    /// applies a shared 1×1 conv, batch norm and hardswish. Batch-norm
    /// statistics run over batch × sequence length.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>, ctx: &mut ForwardCtx<T>) -> Result<Context> {
        let [b, c, f, t] = tape.value(x).dims4()?;
        let over_freq = tape.axis_pool(x, SpatialAxis::Frequency)?;
        let over_time = tape.axis_pool(x, SpatialAxis::Time)?;
        let seq_t = tape.reshape(over_freq, &[b, c, t, 1])?;
        let seq_f = tape.reshape(over_time, &[b, c, f, 1])?;
        let cat = tape.concat(&[seq_t, seq_f], 2)?;
        let z = tape.conv2d(cat, p.var(self.conv), None, Conv2dGeometry::pointwise())?;
        let z = self.bn.forward(tape, z, p, ctx)?;
        let emb = tape.activation(z, Activation::Hardswish);
        let time = tape.slice(emb, 2, 0, t)?;
        let freq = tape.slice(emb, 2, t, f)?;
        let pooled = tape.global_avg_pool(emb)?;
        Ok(Context { time, freq, pooled })
    }

    pub fn param_count(&self) -> usize {
        self.dim * self.c_in + 2 * self.dim
    }
}
