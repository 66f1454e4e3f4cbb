//! Full network: stem, 15 inverted residual blocks and classifier head.

pub mod config;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::blocks::dyconv::{ConvShape, ConvSlot};
use crate::blocks::{linear_uniform, Block, BnSlot, Bound, ConvKind, ForwardCtx, Mode};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::Activation;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub use config::{ModelConfig, Placement};

/// Fully connected layer `out × in` with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), linear_uniform(&[fan_out, fan_in], fan_in, rng)?, ParamKind::Trainable)?,
            bias: store.add(format!("{prefix}.bias"), linear_uniform(&[fan_out], fan_in, rng)?, ParamKind::Trainable)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Parameter layout of a network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: ConvSlot,
    pub stem_bn: BnSlot,
    pub blocks: Vec<Block>,
    pub head_conv: ConvSlot,
    pub head_bn: BnSlot,
    pub hidden: Linear,
    pub classifier: Linear,
}

impl Network {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let specs = config.block_specs()?;
        let c0 = config.stem_channels();
        let pointwise = |c_in, c_out| ConvShape {
            c_in,
            c_out,
            kernel: 1,
            stride: 1,
            groups: 1,
            bias: false,
        };
        let stem_shape = ConvShape {
            kernel: 3,
            stride: 2,
            ..pointwise(1, c0)
        };
        let stem = ConvSlot::register(store, "stem", ConvKind::Static, stem_shape, 1, 0, rng)?;
        let stem_bn = BnSlot::register(store, "stem_bn", c0)?;
        let mut blocks = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            blocks.push(Block::register(store, &format!("blocks.{:02}", i + 1), spec, rng)?);
        }
        let c_last = specs.last().map_or(c0, |s| s.c_out);
        let c_head = config.head_channels();
        let head_conv = ConvSlot::register(store, "head.conv", ConvKind::Static, pointwise(c_last, c_head), 1, 0, rng)?;
        let head_bn = BnSlot::register(store, "head.bn", c_head)?;
        let hidden = Linear::register(store, "head.hidden", c_head, config.head_dim(), rng)?;
        let classifier = Linear::register(store, "head.classifier", config.head_dim(), config.n_classes, rng)?;
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
            head_conv,
            head_bn,
            hidden,
            classifier,
        })
    }

    /// Checks that `x` is `B × 1 × n_mels × T`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.config.n_mels || shape[0] == 0 || shape[3] == 0 {
            return shape_err(format!(
                "network expects B × 1 × {} × T input, got {:?}",
                self.config.n_mels, shape
            ));
        }
        Ok(())
    }

    /// Feature map after the last block.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let mut h = self.stem.forward(tape, x, None, p, ctx, 0)?;
        h = self.stem_bn.forward(tape, h, p, ctx)?;
        h = tape.activation(h, Activation::Hardswish);
        for (i, block) in self.blocks.iter().enumerate() {
            ctx.block = i + 1;
            h = block.forward(tape, h, p, ctx)?;
        }
        ctx.block = 0;
        Ok(h)
    }

    /// Raw logits `B × n_classes`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let h = self.features(tape, x, p, ctx)?;
        let h = self.head_conv.forward(tape, h, None, p, ctx, 0)?;
        let h = self.head_bn.forward(tape, h, p, ctx)?;
        let h = tape.activation(h, Activation::Hardswish);
        let h = tape.global_avg_pool(h)?;
        let h = self.hidden.forward(tape, h, p)?;
        let mut h = tape.activation(h, Activation::Hardswish);
        if ctx.mode == Mode::Train && self.config.dropout > 0.0 {
            if let Some(rng) = ctx.dropout_rng.as_deref_mut() {
                h = tape.dropout(h, self.config.dropout, rng)?;
            }
        }
        self.classifier.forward(tape, h, p)
    }

    /// Trainable parameters, counted from the layout.
    pub fn param_count(&self) -> usize {
        let stem = self.stem.kernel_params() + 2 * self.stem.c_out;
        let head = self.head_conv.kernel_params() + 2 * self.head_conv.c_out;
        stem + self.blocks.iter().map(Block::param_count).sum::<usize>() + head + self.hidden.param_count() + self.classifier.param_count()
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model from a seed.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Network::register(&mut params, config, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Records a forward pass; trainable parameters become tape leaves.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let p = Bound::new(tape, &self.params);
        self.net.forward(tape, x, &p, ctx)
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_with(x, &mut ForwardCtx::eval())
    }

    pub fn predict_with(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, ctx)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width_mult: 0.1,
            n_classes: 3,
            n_mels: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn logits_have_class_shape() {
        let m = Model::<f32>::new(&tiny(), 0).unwrap();
        let x = Tensor::uniform(&[2, 1, 16, 20], 1.0, &mut StdRng::seed_from_u64(1)).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.all_finite());
        assert_eq!(m.predict(&x).unwrap().data(), y.data());
    }

    #[test]
    fn wrong_input_is_rejected() {
        let m = Model::<f32>::new(&tiny(), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2, 16, 20]).unwrap()).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 1, 15, 20]).unwrap()).is_err());
    }

    #[test]
    fn layout_count_matches_store() {
        for cfg in [tiny(), ModelConfig::preset("mn").unwrap(), ModelConfig::default()] {
            let m = Model::<f32>::new(&cfg, 0).unwrap();
            let stored: usize = m
                .params
                .iter()
                .filter(|(_, e)| e.kind == ParamKind::Trainable)
                .map(|(_, e)| e.value.numel())
                .sum();
            assert_eq!(m.net.param_count(), stored);
        }
    }
}
