//! Inverted residual block with optional dynamic components.

use rand::Rng;

use super::attention::{CoordAttention, SqueezeExcite};
use super::context::{Context, ContextModule};
use super::dyconv::{ConvShape, ConvSlot};
use super::dyrelu::DyRelu;
use super::{AttentionKind, BlockActivation, BlockSpec, BnSlot, Bound, ForwardCtx, DEPTHWISE, EXPANSION, PROJECTION};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::ops::Activation;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub enum Recalibration {
    None,
    Se(SqueezeExcite),
    Ca(CoordAttention),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub context: Option<ContextModule>,
    /// Expansion, depthwise and projection convs; expansion may be absent.
    pub convs: [Option<ConvSlot>; 3],
    pub norms: [Option<BnSlot>; 3],
    pub dyrelus: [Option<DyRelu>; 3],
    pub recalibration: Recalibration,
}

impl Block {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let h = spec.context_dim;
        let context = if spec.needs_context() {
            Some(ContextModule::register(store, &format!("{prefix}.context"), spec.c_in, h, rng)?)
        } else {
            None
        };
        let shapes = [
            ConvShape {
                c_in: spec.c_in,
                c_out: spec.c_exp,
                kernel: 1,
                stride: 1,
                groups: 1,
                bias: false,
            },
            ConvShape {
                c_in: spec.c_exp,
                c_out: spec.c_exp,
                kernel: spec.kernel,
                stride: spec.stride,
                groups: spec.c_exp,
                bias: false,
            },
            ConvShape {
                c_in: spec.c_exp,
                c_out: spec.c_out,
                kernel: 1,
                stride: 1,
                groups: 1,
                bias: false,
            },
        ];
        let names = ["expand", "depthwise", "project"];
        let mut convs: [Option<ConvSlot>; 3] = [None, None, None];
        let mut norms: [Option<BnSlot>; 3] = [None, None, None];
        let mut dyrelus: [Option<DyRelu>; 3] = [None, None, None];
        let mut recalibration = Recalibration::None;
        for pos in [EXPANSION, DEPTHWISE, PROJECTION] {
            if pos == EXPANSION && !spec.expand {
                continue;
            }
            let name = names[pos];
            convs[pos] = Some(ConvSlot::register(
                store,
                &format!("{prefix}.{name}"),
                spec.conv_kinds[pos],
                shapes[pos],
                spec.kernels,
                h,
                rng,
            )?);
            norms[pos] = Some(BnSlot::register(store, &format!("{prefix}.{name}_bn"), shapes[pos].c_out)?);
            if spec.activations[pos] == BlockActivation::DyRelu {
                dyrelus[pos] = Some(DyRelu::register(
                    store,
                    &format!("{prefix}.{name}_dyrelu"),
                    spec.channels_at(pos),
                    h,
                    spec.dyrelu.clone(),
                )?);
            }
            if pos == DEPTHWISE {
                recalibration = match spec.attention {
                    AttentionKind::None => Recalibration::None,
                    AttentionKind::Se => Recalibration::Se(SqueezeExcite::register(
                        store,
                        &format!("{prefix}.se"),
                        spec.c_exp,
                        spec.se_squeeze,
                        rng,
                    )?),
                    AttentionKind::Ca { frequency, time } => Recalibration::Ca(CoordAttention::register(
                        store,
                        &format!("{prefix}.ca"),
                        spec.c_exp,
                        h,
                        spec.stride,
                        frequency,
                        time,
                    )?),
                };
            }
        }
        Ok(Self {
            spec: spec.clone(),
            context,
            convs,
            norms,
            dyrelus,
            recalibration,
        })
    }

    fn activate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        pos: usize,
        context: Option<&Context>,
        p: &Bound<T>,
        ctx: &mut ForwardCtx<T>,
    ) -> Result<Var> {
        Ok(match self.spec.activations[pos] {
            BlockActivation::Relu => tape.activation(h, Activation::Relu),
            BlockActivation::Hardswish => tape.activation(h, Activation::Hardswish),
            BlockActivation::Identity => h,
            BlockActivation::DyRelu => {
                let dr = self.dyrelus[pos].as_ref().expect("Dy-ReLU registered");
                let c = context.expect("Dy-ReLU needs context");
                dr.forward(tape, h, c, p, ctx, pos)?
            }
        })
    }

    /// Context → expansion → depthwise → recalibration → projection →
    /// residual. Input `B × C_in × F × T`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let context = match &self.context {
            Some(m) => Some(m.forward(tape, x, p, ctx)?),
            None => None,
        };
        let mut h = x;
        for pos in [EXPANSION, DEPTHWISE, PROJECTION] {
            let Some(conv) = &self.convs[pos] else { continue };
            h = conv.forward(tape, h, context.as_ref(), p, ctx, pos)?;
            h = self.norms[pos].expect("norm registered").forward(tape, h, p, ctx)?;
            h = self.activate(tape, h, pos, context.as_ref(), p, ctx)?;
            if pos == DEPTHWISE {
                h = match &self.recalibration {
                    Recalibration::None => h,
                    Recalibration::Se(se) => se.forward(tape, h, p)?,
                    Recalibration::Ca(ca) => ca.forward(tape, h, context.as_ref().expect("CA needs context"), p, ctx)?,
                };
            }
        }
        if self.spec.use_residual() {
            h = tape.add(h, x)?;
        }
        Ok(h)
    }

    /// Trainable parameter count of the block.
    pub fn param_count(&self) -> usize {
        let h = self.spec.context_dim;
        let mut n = self.context.as_ref().map_or(0, |c| c.param_count());
        for (pos, conv) in self.convs.iter().enumerate() {
            if let Some(conv) = conv {
                n += conv.kernel_params() + conv.attention_params(h) + 2 * self.spec.channels_at(pos);
            }
        }
        n += self.dyrelus.iter().flatten().map(|d| d.param_count(h)).sum::<usize>();
        n + match &self.recalibration {
            Recalibration::None => 0,
            Recalibration::Se(se) => se.param_count(),
            Recalibration::Ca(ca) => ca.param_count(),
        }
    }
}
