//! Static and dynamic convolution slots.
//!
//! A dynamic slot stores `K` kernels stacked as `(K·C_out) × C_g × k × k`
//! (optional biases `K × C_out`) and mixes them per sample with attention
//! `softmax(W·c / τ)` predicted from the pooled context.

use rand::Rng;

use super::context::Context;
use super::{kaiming_uniform, Bound, ConvKind, ForwardCtx};
use crate::error::{config_err, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::Conv2dGeometry;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Attention {
    /// `K × H`, zero-initialized so the initial attention is uniform.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvSlot {
    pub kind: ConvKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub attention: Option<Attention>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub kernels: usize,
    pub geometry: Conv2dGeometry,
}

/// Shape and layout of one conv slot.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSlot {
    /// Registers weights; `kernels` and `context_dim` are used only for
    /// dynamic slots.
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: ConvKind,
        shape: ConvShape,
        kernels: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let ConvShape {
            c_in,
            c_out,
            kernel,
            stride,
            groups,
            bias,
        } = shape;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return config_err(format!("groups {groups} must divide {c_in} and {c_out}"));
        }
        let cg = c_in / groups;
        let fan_in = cg * kernel * kernel;
        let k = match kind {
            ConvKind::Static => 1,
            ConvKind::Dynamic => {
                if kernels == 0 {
                    return config_err("dynamic convolution needs K >= 1");
                }
                kernels
            }
        };
        let weight = store.add(
            format!("{prefix}.weight"),
            kaiming_uniform(&[k * c_out, cg, kernel, kernel], fan_in, rng)?,
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            let bshape: Vec<usize> = match kind {
                ConvKind::Static => vec![c_out],
                ConvKind::Dynamic => vec![k, c_out],
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            Some(store.add(format!("{prefix}.bias"), Tensor::uniform(&bshape, bound, rng)?, ParamKind::Trainable)?)
        } else {
            None
        };
        let attention = match kind {
            ConvKind::Static => None,
            ConvKind::Dynamic => Some(Attention {
                weight: store.add(
                    format!("{prefix}.attention.weight"),
                    Tensor::zeros(&[k, context_dim])?,
                    ParamKind::Trainable,
                )?,
                bias: store.add(format!("{prefix}.attention.bias"), Tensor::zeros(&[k])?, ParamKind::Trainable)?,
            }),
        };
        Ok(Self {
            kind,
            weight,
            bias,
            attention,
            c_in,
            c_out,
            kernel,
            kernels: k,
            geometry: Conv2dGeometry::same((kernel, kernel), (stride, stride), groups),
        })
    }

    /// Kernel attention `B × K` for a dynamic slot.
    pub fn attention<T: Real>(&self, tape: &mut Tape<T>, context: &Context, p: &Bound<T>, tau: f64) -> Result<Option<Var>> {
        match &self.attention {
            None => Ok(None),
            Some(a) => {
                let logits = tape.linear(context.pooled, p.var(a.weight), Some(p.var(a.bias)))?;
                Ok(Some(tape.softmax_temperature(logits, tau)?))
            }
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        context: Option<&Context>,
        p: &Bound<T>,
        ctx: &mut ForwardCtx<T>,
        position: usize,
    ) -> Result<Var> {
        let w = p.var(self.weight);
        let b = self.bias.map(|id| p.var(id));
        match self.kind {
            ConvKind::Static => tape.conv2d(x, w, b, self.geometry),
            ConvKind::Dynamic => {
                let Some(context) = context else {
                    return config_err("dynamic convolution without context");
                };
                let mut att = self
                    .attention(tape, context, p, ctx.effective_tau())?
                    .expect("dynamic slot has attention");
                let block = ctx.block;
                if let Some(hook) = ctx.hook.as_deref_mut() {
                    if let Some(replaced) = hook.kernel_attention(block, position, tape.value(att)) {
                        att = tape.constant(replaced);
                    }
                }
                let mixed = tape.mix_kernels(att, w)?;
                let mixed_bias = match b {
                    Some(b) => Some(mix_bias(tape, att, b)?),
                    None => None,
                };
                tape.conv2d_per_sample(x, mixed, mixed_bias, self.geometry)
            }
        }
    }

    /// Parameters of the kernels (and biases) alone.
    pub fn kernel_params(&self) -> usize {
        let cg = self.c_in / self.geometry.groups;
        let w = self.kernels * self.c_out * cg * self.kernel * self.kernel;
        w + if self.bias.is_some() { self.kernels * self.c_out } else { 0 }
    }

    /// Attention-predictor parameters (zero for static slots).
    pub fn attention_params(&self, context_dim: usize) -> usize {
        match self.kind {
            ConvKind::Static => 0,
            ConvKind::Dynamic => self.kernels * context_dim + self.kernels,
        }
    }
}

/// Mixed bias `B × C_out = att · biases` where biases are `K × C_out`.
fn mix_bias<T: Real>(tape: &mut Tape<T>, att: Var, b: Var) -> Result<Var> {
    let [k, c] = tape.value(b).dims2()?;
    // mix_kernels treats the bias rows as K kernels of shape C_out × 1 × 1 × 1
    let as_kernels = tape.reshape(b, &[k * c, 1, 1, 1])?;
    let mixed = tape.mix_kernels(att, as_kernels)?;
    let bsz = tape.value(att).dims2()?[0];
    tape.reshape(mixed, &[bsz, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::context::ContextModule;
    use crate::tensor::ops::{conv2d_forward, ConvParams};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn shape(bias: bool) -> ConvShape {
        ConvShape {
            c_in: 4,
            c_out: 6,
            kernel: 3,
            stride: 2,
            groups: 2,
            bias,
        }
    }

    #[test]
    fn uniform_attention_equals_mean_kernel() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let cgm = ContextModule::register(&mut store, "cgm", 4, 8, &mut rng).unwrap();
        let slot = ConvSlot::register(&mut store, "dc", ConvKind::Dynamic, shape(true), 3, 8, &mut rng).unwrap();
        let x = Tensor::<f64>::uniform(&[2, 4, 7, 6], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store);
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::train(5.0);
        let c = cgm.forward(&mut tape, xv, &p, &mut ctx).unwrap();
        let y = slot.forward(&mut tape, xv, Some(&c), &p, &mut ctx, 0).unwrap();

        let w = store.get(slot.weight);
        let per = w.numel() / 3;
        let mean_w = Tensor::from_fn(&[6, 2, 3, 3], |i| (0..3).map(|k| w.data()[k * per + i]).sum::<f64>() / 3.0).unwrap();
        let bk = store.get(slot.bias.unwrap());
        let mean_b = Tensor::from_fn(&[6], |i| (0..3).map(|k| bk.data()[k * 6 + i]).sum::<f64>() / 3.0).unwrap();
        let reference = conv2d_forward(&x, &mean_w, Some(&mean_b), &slot.geometry).unwrap();
        assert!(tape.value(y).max_abs_diff(&reference).unwrap() < 1e-12);
        assert_eq!(slot.kernel_params(), 3 * 6 * 2 * 9 + 18);
        assert_eq!(slot.attention_params(8), 3 * 8 + 3);
    }

    #[test]
    fn static_slot_is_plain_conv() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let slot = ConvSlot::register(&mut store, "c", ConvKind::Static, shape(false), 4, 8, &mut rng).unwrap();
        assert!(slot.attention.is_none());
        let x = Tensor::<f64>::uniform(&[1, 4, 5, 5], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store);
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let y = slot.forward(&mut tape, xv, None, &p, &mut ctx, 1).unwrap();
        let params = ConvParams {
            weight: store.get(slot.weight).clone(),
            bias: None,
            geometry: slot.geometry,
        };
        let r = crate::tensor::ops::conv2d(&x, &params).unwrap();
        assert_eq!(tape.value(y).data(), r.data());
    }

    #[test]
    fn dynamic_without_context_is_rejected() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let slot = ConvSlot::register(&mut store, "c", ConvKind::Dynamic, shape(false), 4, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &store);
        let xv = tape.constant(Tensor::zeros(&[1, 4, 5, 5]).unwrap());
        let mut ctx = ForwardCtx::eval();
        assert!(slot.forward(&mut tape, xv, None, &p, &mut ctx, 1).is_err());
    }
}
