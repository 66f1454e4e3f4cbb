//! Dynamic ReLU: per-sample, per-channel piecewise-linear activation whose
//! slopes and intercepts are predicted from the context.

use super::context::Context;
use super::{Bound, ForwardCtx};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::DyReluRanges;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct DyRelu {
    /// Predictor weight `(C·2M) × H`, zero-initialized.
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub ranges: DyReluRanges,
}

impl DyRelu {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        context_dim: usize,
        ranges: DyReluRanges,
    ) -> Result<Self> {
        ranges.validate()?;
        let n = channels * 2 * ranges.mappings;
        let weight = store.add(format!("{prefix}.weight"), Tensor::zeros(&[n, context_dim])?, ParamKind::Trainable)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[n])?, ParamKind::Trainable)?;
        Ok(Self {
            weight,
            bias,
            channels,
            ranges,
        })
    }

    /// Coefficients `B × (C·2M)` for the given context.
    pub fn coefficients<T: Real>(&self, tape: &mut Tape<T>, context: &Context, p: &Bound<T>) -> Result<Var> {
        let raw = tape.linear(context.pooled, p.var(self.weight), Some(p.var(self.bias)))?;
        tape.dyrelu_coefficients(raw, &self.ranges)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        context: &Context,
        p: &Bound<T>,
        ctx: &mut ForwardCtx<T>,
        position: usize,
    ) -> Result<Var> {
        let mut coef = self.coefficients(tape, context, p)?;
        let block = ctx.block;
        if let Some(hook) = ctx.hook.as_deref_mut() {
            if let Some(replaced) = hook.dyrelu_coefficients(block, position, tape.value(coef)) {
                coef = tape.constant(replaced);
            }
        }
        let y = tape.dyrelu_apply(x, coef, self.ranges.mappings)?;
        if let Some(hook) = ctx.hook.as_deref_mut() {
            hook.dyrelu_io(block, position, tape.value(x), tape.value(coef), tape.value(y));
        }
        Ok(y)
    }

    pub fn param_count(&self, context_dim: usize) -> usize {
        let n = self.channels * 2 * self.ranges.mappings;
        n * context_dim + n
    }
}
