//! Inverted residual blocks and their dynamic components.
//!
//! A block owns [`ParamId`]s into a shared [`ParamStore`]; its forward pass
//! records onto a [`Tape`] through a [`Bound`] view that maps trainable
//! parameters to tape variables and exposes buffers by value.

pub mod attention;
pub mod block;
pub mod checks;
pub mod context;
pub mod dyconv;
pub mod dyrelu;

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::ops::{BatchStats, DyReluRanges};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub use block::Block;

/// Batch-norm constants.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Static,
    Dynamic,
}

/// Non-linearity applied after one of the three conv positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockActivation {
    Relu,
    Hardswish,
    DyRelu,
    Identity,
}

/// Recalibration between the depthwise and projection convs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Se,
    /// Coordinate attention; either factor can be disabled for ablations.
    Ca { frequency: bool, time: bool },
}

impl AttentionKind {
    pub fn full_ca() -> Self {
        AttentionKind::Ca {
            frequency: true,
            time: true,
        }
    }
}

/// Conv positions inside a block.
pub const EXPANSION: usize = 0;
pub const DEPTHWISE: usize = 1;
pub const PROJECTION: usize = 2;

/// Full static/dynamic configuration of one inverted residual block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kernel: usize,
    pub c_in: usize,
    pub c_exp: usize,
    pub c_out: usize,
    pub stride: usize,
    /// Whether the 1×1 expansion conv exists.
    pub expand: bool,
    pub attention: AttentionKind,
    /// Activation after the expansion, depthwise and projection convs.
    pub activations: [BlockActivation; 3],
    pub conv_kinds: [ConvKind; 3],
    /// Number of Dy-Conv kernels `K`.
    pub kernels: usize,
    /// Context embedding width `H`.
    pub context_dim: usize,
    /// Hidden width of the SE excitation.
    pub se_squeeze: usize,
    pub dyrelu: DyReluRanges,
}

impl BlockSpec {
    /// Residual connection when the block preserves both shape and width.
    pub fn use_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn has_dynamic_conv(&self) -> bool {
        self.conv_kinds.contains(&ConvKind::Dynamic)
    }

    pub fn has_dyrelu(&self) -> bool {
        self.activations.contains(&BlockActivation::DyRelu)
    }

    pub fn has_ca(&self) -> bool {
        matches!(self.attention, AttentionKind::Ca { .. })
    }

    /// Whether the block needs the context generation module.
    pub fn needs_context(&self) -> bool {
        self.has_dynamic_conv() || self.has_dyrelu() || self.has_ca()
    }

    /// Channels at the output of each conv position.
    pub fn channels_at(&self, position: usize) -> usize {
        match position {
            EXPANSION | DEPTHWISE => self.c_exp,
            _ => self.c_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return config_err(format!("kernel size {} must be odd", self.kernel));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return config_err(format!("stride {} must be 1 or 2", self.stride));
        }
        if self.c_in == 0 || self.c_exp == 0 || self.c_out == 0 {
            return config_err("channel counts must be positive");
        }
        if self.c_exp < self.c_in {
            return config_err(format!(
                "expansion width {} below input width {}",
                self.c_exp, self.c_in
            ));
        }
        if !self.expand && self.c_exp != self.c_in {
            return config_err("a block without expansion conv needs c_exp == c_in");
        }
        if !self.expand && self.conv_kinds[EXPANSION] == ConvKind::Dynamic {
            return config_err("dynamic expansion conv requested on a block without expansion");
        }
        if self.has_dynamic_conv() && self.kernels == 0 {
            return config_err("dynamic convolution needs K >= 1");
        }
        if self.needs_context() && self.context_dim == 0 {
            return config_err("context width H must be positive");
        }
        if self.attention == AttentionKind::Se && self.se_squeeze == 0 {
            return config_err("SE squeeze width must be positive");
        }
        if self.has_dyrelu() {
            self.dyrelu.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Perturbation of coordinate-attention weights.
#[derive(Clone, Debug)]
pub enum CaOverride<T> {
    /// Replacement factors `B×C×F×1` and `B×C×T×1` (absent factors stay absent).
    Factored(Option<Tensor<T>>, Option<Tensor<T>>),
    /// Replacement full map `B×C×F×T`.
    Full(Tensor<T>),
}

/// Observation and override points for inspection.
///
/// `block` is 1-based; `position` is one of [`EXPANSION`], [`DEPTHWISE`],
/// [`PROJECTION`]. Returning `Some` replaces the computed value with a
/// constant.
pub trait ForwardHook<T: Real> {
    fn dyrelu_coefficients(&mut self, _block: usize, _position: usize, _coef: &Tensor<T>) -> Option<Tensor<T>> {
        None
    }

    fn kernel_attention(&mut self, _block: usize, _position: usize, _att: &Tensor<T>) -> Option<Tensor<T>> {
        None
    }

    fn ca_weights(
        &mut self,
        _block: usize,
        _sf: Option<&Tensor<T>>,
        _st: Option<&Tensor<T>>,
    ) -> Option<CaOverride<T>> {
        None
    }

    /// Sees the input, the coefficients used and the output of a Dy-ReLU.
    fn dyrelu_io(&mut self, _block: usize, _position: usize, _x: &Tensor<T>, _coef: &Tensor<T>, _y: &Tensor<T>) {}
}

/// Running-statistics update produced by one training-mode batch norm.
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// Per-forward settings and side outputs.
pub struct ForwardCtx<'a, T: Real> {
    pub mode: Mode,
    /// Softmax temperature of kernel attention; evaluation forces 1.
    pub tau: f64,
    /// Current block (1-based); set by the network.
    pub block: usize,
    pub hook: Option<&'a mut dyn ForwardHook<T>>,
    pub dropout_rng: Option<&'a mut StdRng>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn train(tau: f64) -> Self {
        Self {
            mode: Mode::Train,
            tau,
            block: 0,
            hook: None,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            tau: 1.0,
            block: 0,
            hook: None,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn with_hook(mut self, hook: &'a mut dyn ForwardHook<T>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn with_dropout_rng(mut self, rng: &'a mut StdRng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    /// Temperature in effect: `tau` in training, 1 in evaluation.
    pub fn effective_tau(&self) -> f64 {
        match self.mode {
            Mode::Train => self.tau,
            Mode::Eval => 1.0,
        }
    }
}

/// Folds batch statistics into running estimates:
/// `running = (1 − m)·running + m·batch`, variance unbiased.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::of(momentum);
    for u in updates {
        let n = u.stats.count;
        let unbias = if n > 1 { T::of(n as f64 / (n as f64 - 1.0)) } else { T::one() };
        for (r, &b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Trainable parameters recorded on a tape, plus read access to buffers.
pub struct Bound<'s, T: Real> {
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<'s, T: Real> Bound<'s, T> {
    /// Records every trainable parameter as a tape leaf.
    pub fn new(tape: &mut Tape<T>, store: &'s ParamStore<T>) -> Self {
        let vars = store
            .iter()
            .map(|(id, e)| match e.kind {
                ParamKind::Trainable => Some(tape.param(id, e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        Self { store, vars }
    }

    /// Uses caller-supplied variables for trainable parameters (in store
    /// order); used by gradient checks to treat parameters as inputs.
    pub fn from_vars(store: &'s ParamStore<T>, trainable: &[Var]) -> Result<Self> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(store.len());
        for (_, e) in store.iter() {
            vars.push(match e.kind {
                ParamKind::Trainable => Some(*it.next().ok_or_else(|| {
                    Error::Shape("fewer variables than trainable parameters".into())
                })?),
                ParamKind::Buffer => None,
            });
        }
        if it.next().is_some() {
            return Err(Error::Shape("more variables than trainable parameters".into()));
        }
        Ok(Self { store, vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].unwrap_or_else(|| panic!("parameter {} is a buffer", self.store.entry(id).name))
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

/// Trainable parameter values of a store, in store order.
pub fn trainable_tensors<T: Real>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Trainable)
        .map(|(_, e)| e.value.clone())
        .collect()
}

/// Batch-norm parameter and buffer ids.
#[derive(Clone, Copy, Debug)]
pub struct BnSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnSlot {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())?, ParamKind::Trainable)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])?, ParamKind::Trainable)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])?, ParamKind::Buffer)?,
            running_var: store.add(format!("{prefix}.running_var"), Tensor::full(&[channels], T::one())?, ParamKind::Buffer)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, p: &Bound<T>, ctx: &mut ForwardCtx<T>) -> Result<Var> {
        let eps = T::of(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, p.var(self.gamma), p.var(self.beta), eps)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                p.var(self.gamma),
                p.var(self.beta),
                p.buffer(self.running_mean).data(),
                p.buffer(self.running_var).data(),
                eps,
            ),
        }
    }
}

/// Kaiming-uniform values for a conv weight: bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Linear-layer default: uniform in `±1/sqrt(fan_in)`.
pub fn linear_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Rounds to the nearest multiple of `divisor` (at least `divisor`), bumping
/// up one step when rounding would lose more than 10%.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut n = ((v + d / 2.0) / d).floor().max(1.0) * d;
    if n < 0.9 * v {
        n += d;
    }
    n as usize
}
