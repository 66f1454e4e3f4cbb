//! Model configuration, presets and the per-block layout table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{make_divisible, AttentionKind, BlockActivation, BlockSpec, ConvKind};
use crate::error::{config_err, Error, Result};
use crate::tensor::ops::DyReluRanges;

/// One row of the MobileNetV3-Large bottleneck table at width 1.
#[derive(Clone, Copy, Debug)]
pub struct BaseRow {
    pub kernel: usize,
    pub expansion: usize,
    pub out: usize,
    pub se: bool,
    pub hardswish: bool,
    pub stride: usize,
}

const fn row(kernel: usize, expansion: usize, out: usize, se: bool, hardswish: bool, stride: usize) -> BaseRow {
    BaseRow {
        kernel,
        expansion,
        out,
        se,
        hardswish,
        stride,
    }
}

pub const STEM_CHANNELS: usize = 16;
pub const HEAD_EXPANSION: usize = 6;
pub const HEAD_HIDDEN: usize = 1280;

pub const BASE_TABLE: [BaseRow; 15] = [
    row(3, 16, 16, false, false, 1),
    row(3, 64, 24, false, false, 2),
    row(3, 72, 24, false, false, 1),
    row(5, 72, 40, true, false, 2),
    row(5, 120, 40, true, false, 1),
    row(5, 120, 40, true, false, 1),
    row(3, 240, 80, false, true, 2),
    row(3, 200, 80, false, true, 1),
    row(3, 184, 80, false, true, 1),
    row(3, 184, 80, false, true, 1),
    row(3, 480, 112, true, true, 1),
    row(3, 672, 112, true, true, 1),
    row(5, 672, 160, true, true, 2),
    row(5, 960, 160, true, true, 1),
    row(5, 960, 160, true, true, 1),
];

/// Which of the 15 blocks become dynamic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    All,
    First5,
    Mid5,
    Last5,
    /// Exactly the blocks that carry SE in the static table.
    ReplaceSe,
    None,
}

impl Placement {
    /// Whether block `i` (0-based) is dynamic.
    pub fn is_dynamic(self, i: usize) -> bool {
        match self {
            Placement::All => true,
            Placement::First5 => i < 5,
            Placement::Mid5 => (5..10).contains(&i),
            Placement::Last5 => i >= 10,
            Placement::ReplaceSe => BASE_TABLE[i].se,
            Placement::None => false,
        }
    }

    pub const NAMES: [&'static str; 6] = ["all", "first5", "mid5", "last5", "replace_se", "none"];
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "all" => Placement::All,
            "first5" => Placement::First5,
            "mid5" => Placement::Mid5,
            "last5" => Placement::Last5,
            "replace_se" | "replace-se" => Placement::ReplaceSe,
            "none" => Placement::None,
            other => return config_err(format!("unknown placement '{other}' (expected one of {:?})", Self::NAMES)),
        })
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = match self {
            Placement::All => 0,
            Placement::First5 => 1,
            Placement::Mid5 => 2,
            Placement::Last5 => 3,
            Placement::ReplaceSe => 4,
            Placement::None => 5,
        };
        f.write_str(Self::NAMES[i])
    }
}

/// Complete model description; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width_mult: f64,
    pub n_classes: usize,
    pub n_mels: usize,
    pub placement: Placement,
    /// Dy-Conv kernel count `K`.
    pub kernels: usize,
    /// Dy-ReLU mapping count `M`.
    pub mappings: usize,
    /// Conv position (1 = expansion, 2 = depthwise, 3 = projection) whose
    /// activation Dy-ReLU replaces.
    pub dyrelu_position: usize,
    pub dyconv: bool,
    pub dyrelu: bool,
    pub ca: bool,
    pub ca_frequency: bool,
    pub ca_time: bool,
    pub context_reduction: usize,
    pub context_min: f64,
    pub context_max: f64,
    pub dyrelu_lambda_a: f64,
    pub dyrelu_lambda_b: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_mult: 1.0,
            n_classes: 527,
            n_mels: 128,
            placement: Placement::All,
            kernels: 4,
            mappings: 2,
            dyrelu_position: 2,
            dyconv: true,
            dyrelu: true,
            ca: true,
            ca_frequency: true,
            ca_time: true,
            context_reduction: 4,
            context_min: 32.0,
            context_max: 128.0,
            dyrelu_lambda_a: 1.0,
            dyrelu_lambda_b: 0.5,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    /// `dymn-s`, `dymn-m`, `dymn-l` (dynamic, α 0.4/1/2) or `mn` (static, α 1).
    pub fn preset(name: &str) -> Result<Self> {
        let (width_mult, placement) = match name.to_ascii_lowercase().as_str() {
            "dymn-s" => (0.4, Placement::All),
            "dymn-m" => (1.0, Placement::All),
            "dymn-l" => (2.0, Placement::All),
            "mn" => (1.0, Placement::None),
            other => return config_err(format!("unknown model '{other}' (expected dymn-s, dymn-m, dymn-l or mn)")),
        };
        Ok(Self {
            width_mult,
            placement,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult.is_finite() && self.width_mult > 0.0) {
            return config_err(format!("width multiplier must be positive, got {}", self.width_mult));
        }
        if self.n_classes == 0 || self.n_mels == 0 {
            return config_err("n_classes and n_mels must be positive");
        }
        if !(1..=3).contains(&self.dyrelu_position) {
            return config_err(format!("dyrelu_position must be 1, 2 or 3, got {}", self.dyrelu_position));
        }
        if self.kernels == 0 || self.mappings == 0 || self.context_reduction == 0 {
            return config_err("kernels, mappings and context_reduction must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config_err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.ca && !self.ca_frequency && !self.ca_time {
            return config_err("coordinate attention needs at least one of ca_frequency, ca_time");
        }
        if !(self.context_min > 0.0 && self.context_min <= self.context_max) {
            return config_err("context bounds must satisfy 0 < context_min <= context_max");
        }
        self.dyrelu_ranges().validate()
    }

    pub fn dyrelu_ranges(&self) -> DyReluRanges {
        DyReluRanges {
            lambda_a: self.dyrelu_lambda_a,
            lambda_b: self.dyrelu_lambda_b,
            ..DyReluRanges::standard(self.mappings)
        }
    }

    /// Channel count after width scaling.
    pub fn scaled(&self, channels: usize) -> usize {
        make_divisible(channels as f64 * self.width_mult, 8)
    }

    pub fn stem_channels(&self) -> usize {
        self.scaled(STEM_CHANNELS)
    }

    pub fn head_channels(&self) -> usize {
        HEAD_EXPANSION * self.scaled(BASE_TABLE[14].out)
    }

    /// Hidden width of the classifier: the scaled 1280, floored at
    /// `1280·min(α, 1)`.
    pub fn head_dim(&self) -> usize {
        let scaled = make_divisible(HEAD_HIDDEN as f64 * self.width_mult, 8);
        let floor = (HEAD_HIDDEN as f64 * self.width_mult.min(1.0)).round() as usize;
        scaled.max(floor)
    }

    /// Context width `clamp(round(c_exp / r), round(32α), round(128α))`.
    pub fn context_dim(&self, c_exp: usize) -> usize {
        let lo = (self.context_min * self.width_mult).round();
        let hi = (self.context_max * self.width_mult).round();
        (c_exp as f64 / self.context_reduction as f64).round().clamp(lo, hi).max(1.0) as usize
    }

    pub fn dynamic_count(&self) -> usize {
        (0..15).filter(|&i| self.placement.is_dynamic(i)).count()
    }

    /// The 15 block specs after width scaling and placement.
    pub fn block_specs(&self) -> Result<Vec<BlockSpec>> {
        self.validate()?;
        let mut c_in = self.stem_channels();
        let mut specs = Vec::with_capacity(15);
        for (i, r) in BASE_TABLE.iter().enumerate() {
            let c_exp = self.scaled(r.expansion);
            let c_out = self.scaled(r.out);
            let act = if r.hardswish {
                BlockActivation::Hardswish
            } else {
                BlockActivation::Relu
            };
            let dynamic = self.placement.is_dynamic(i);
            let mut spec = BlockSpec {
                kernel: r.kernel,
                c_in,
                c_exp,
                c_out,
                stride: r.stride,
                expand: c_exp != c_in,
                attention: if r.se { AttentionKind::Se } else { AttentionKind::None },
                activations: [act, act, BlockActivation::Identity],
                conv_kinds: [ConvKind::Static; 3],
                kernels: self.kernels,
                context_dim: self.context_dim(c_exp),
                se_squeeze: make_divisible(c_exp as f64 / 4.0, 8),
                dyrelu: self.dyrelu_ranges(),
            };
            if dynamic {
                // dynamic blocks always keep all three conv positions
                spec.expand = true;
                if self.dyconv {
                    spec.conv_kinds = [ConvKind::Dynamic; 3];
                }
                if self.dyrelu {
                    spec.activations[self.dyrelu_position - 1] = BlockActivation::DyRelu;
                }
                spec.attention = if self.ca {
                    AttentionKind::Ca {
                        frequency: self.ca_frequency,
                        time: self.ca_time,
                    }
                } else {
                    AttentionKind::None
                };
            }
            spec.validate()?;
            specs.push(spec);
            c_in = c_out;
        }
        Ok(specs)
    }
}
