//! Closed-form MAC and parameter accounting.
//!
//! One MAC is one multiply plus one accumulate. Bias adds, batch norm,
//! activations, pooling, sigmoid and softmax are element operations: they
//! are reported in `elem_ops` and never enter MAC totals. Conv MACs count
//! every kernel tap, including taps over zero padding.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::{AttentionKind, BlockActivation, BlockSpec, ConvKind, DEPTHWISE, EXPANSION, PROJECTION};
use crate::error::Result;
use crate::network::config::ModelConfig;
use crate::tensor::ops::output_extent;

/// `C_out · (C_in / groups) · k_F · k_T · F_out · T_out`.
pub fn conv_macs(c_in: usize, c_out: usize, groups: usize, kernel: (usize, usize), out: (usize, usize)) -> u64 {
    (c_out * (c_in / groups) * kernel.0 * kernel.1) as u64 * (out.0 * out.1) as u64
}

/// `in · out · positions`.
pub fn linear_macs(fan_in: usize, fan_out: usize, positions: usize) -> u64 {
    (fan_in * fan_out) as u64 * positions as u64
}

/// Context generation: `C_in · H · (T_in + F_in)`.
pub fn context_macs(c_in: usize, h: usize, f_in: usize, t_in: usize) -> u64 {
    linear_macs(c_in, h, t_in + f_in)
}

/// Dy-ReLU mapping evaluation: `M · C · T_out · F_out`.
pub fn dyrelu_macs(mappings: usize, channels: usize, f_out: usize, t_out: usize) -> u64 {
    (mappings * channels) as u64 * (f_out * t_out) as u64
}

/// Kernel aggregation: `K · (kernel element count)`.
pub fn aggregation_macs(kernels: usize, kernel_elements: usize) -> u64 {
    (kernels * kernel_elements) as u64
}

/// Coordinate attention linears: `H · C · (T_out + F_out)` for both factors.
pub fn ca_macs(h: usize, channels: usize, f_out: usize, t_out: usize, frequency: bool, time: bool) -> u64 {
    let len = if frequency { f_out } else { 0 } + if time { t_out } else { 0 };
    linear_macs(h, channels, len)
}

/// One reported row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    /// All MACs of the layer, dynamic overhead included.
    pub macs: u64,
    pub params: u64,
    /// MACs spent on context, predictors, mappings, aggregation and CA.
    pub dyn_overhead: u64,
    pub elem_ops: u64,
}

impl LayerEntry {
    fn new(name: impl Into<String>, kind: &str) -> Self {
        Self {
            name: name.into(),
            kind: kind.to_string(),
            macs: 0,
            params: 0,
            dyn_overhead: 0,
            elem_ops: 0,
        }
    }

    fn absorb(&mut self, e: &LayerEntry) {
        self.macs += e.macs;
        self.params += e.params;
        self.dyn_overhead += e.dyn_overhead;
        self.elem_ops += e.elem_ops;
    }
}

/// Dynamic-overhead MACs of a block by component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OverheadBreakdown {
    pub context: u64,
    pub dyrelu: u64,
    pub aggregation: u64,
    pub ca: u64,
    /// Attention and coefficient predictor linears.
    pub predictors: u64,
}

impl OverheadBreakdown {
    pub fn total(&self) -> u64 {
        self.context + self.dyrelu + self.aggregation + self.ca + self.predictors
    }
}

/// Parameter split of a block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Kernels of a single static path plus batch norm and SE.
    pub static_path: u64,
    /// The additional `K − 1` kernel sets.
    pub extra_kernels: u64,
    pub predictors: u64,
    pub context: u64,
    pub ca: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.static_path + self.extra_kernels + self.predictors + self.context + self.ca
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockCost {
    pub index: usize,
    pub input: (usize, usize),
    pub output: (usize, usize),
    pub static_macs: u64,
    pub overhead: OverheadBreakdown,
    pub params: ParamBreakdown,
    /// Per-layer rows inside the block.
    pub layers: Vec<LayerEntry>,
}

impl BlockCost {
    pub fn overhead_ratio(&self) -> f64 {
        self.overhead.total() as f64 / self.static_macs as f64
    }
}

/// Report for one configuration and input size.
#[derive(Clone, Debug, Serialize)]
pub struct MacReport {
    pub frames: usize,
    pub n_mels: usize,
    /// Rows `stem`, `block01` … `block15`, `head`.
    pub rows: Vec<LayerEntry>,
    pub blocks: Vec<BlockCost>,
    /// Fine-grained rows of every layer.
    pub layers: Vec<LayerEntry>,
}

fn conv_entry(
    name: String,
    c_in: usize,
    c_out: usize,
    groups: usize,
    k: usize,
    kind: ConvKind,
    kernels: usize,
    out: (usize, usize),
) -> LayerEntry {
    let kernel_elements = c_out * (c_in / groups) * k * k;
    let mut e = LayerEntry::new(name, if kind == ConvKind::Dynamic { "dyconv" } else { "conv" });
    e.macs = conv_macs(c_in, c_out, groups, (k, k), out);
    e.params = match kind {
        ConvKind::Static => kernel_elements as u64,
        ConvKind::Dynamic => (kernels * kernel_elements) as u64,
    };
    e
}

fn bn_entry(name: String, channels: usize, out: (usize, usize)) -> LayerEntry {
    let mut e = LayerEntry::new(name, "batchnorm");
    e.params = 2 * channels as u64;
    e.elem_ops = (channels * out.0 * out.1) as u64;
    e
}

fn overhead_entry(name: String, kind: &str, macs: u64, params: u64) -> LayerEntry {
    let mut e = LayerEntry::new(name, kind);
    e.macs = macs;
    e.dyn_overhead = macs;
    e.params = params;
    e
}

/// Cost of one block for an input of `F_in × T_in`.
pub fn block_cost(index: usize, spec: &BlockSpec, input: (usize, usize)) -> Result<BlockCost> {
    let (f_in, t_in) = input;
    let pad = spec.kernel / 2;
    let out = (
        output_extent(f_in, spec.kernel, spec.stride, pad)?,
        output_extent(t_in, spec.kernel, spec.stride, pad)?,
    );
    let h = spec.context_dim;
    let k = spec.kernels;
    let m = spec.dyrelu.mappings;
    let prefix = format!("block{index:02}");
    let mut layers = Vec::new();
    let mut ov = OverheadBreakdown::default();
    let mut pb = ParamBreakdown::default();
    let mut static_macs = 0;

    if spec.needs_context() {
        let macs = context_macs(spec.c_in, h, f_in, t_in);
        ov.context = macs;
        pb.context = (spec.c_in * h + 2 * h) as u64;
        let mut e = overhead_entry(format!("{prefix}.context"), "context", macs, pb.context);
        e.elem_ops = (spec.c_in * f_in * t_in) as u64 + 2 * (h * (f_in + t_in)) as u64;
        layers.push(e);
    }

    let geometry = [
        (spec.c_in, spec.c_exp, 1, 1, input),
        (spec.c_exp, spec.c_exp, spec.c_exp, spec.kernel, out),
        (spec.c_exp, spec.c_out, 1, 1, out),
    ];
    let names = ["expand", "depthwise", "project"];
    for pos in [EXPANSION, DEPTHWISE, PROJECTION] {
        if pos == EXPANSION && !spec.expand {
            continue;
        }
        let (ci, co, g, kk, o) = geometry[pos];
        let kind = spec.conv_kinds[pos];
        let conv = conv_entry(format!("{prefix}.{}", names[pos]), ci, co, g, kk, kind, k, o);
        static_macs += conv.macs;
        let single = conv.params / if kind == ConvKind::Dynamic { k as u64 } else { 1 };
        pb.static_path += single + 2 * co as u64;
        if kind == ConvKind::Dynamic {
            pb.extra_kernels += conv.params - single;
            let agg = aggregation_macs(k, single as usize);
            let pred = linear_macs(h, k, 1);
            ov.aggregation += agg;
            ov.predictors += pred;
            pb.predictors += (h * k + k) as u64;
            layers.push(overhead_entry(format!("{prefix}.{}.attention", names[pos]), "attention", pred, (h * k + k) as u64));
            layers.push(overhead_entry(format!("{prefix}.{}.aggregation", names[pos]), "aggregation", agg, 0));
        }
        layers.push(conv);
        layers.push(bn_entry(format!("{prefix}.{}_bn", names[pos]), co, o));
        let act = spec.activations[pos];
        if act == BlockActivation::DyRelu {
            let n = co * 2 * m;
            let pred = linear_macs(h, n, 1);
            let map = dyrelu_macs(m, co, o.0, o.1);
            ov.predictors += pred;
            ov.dyrelu += map;
            pb.predictors += (h * n + n) as u64;
            layers.push(overhead_entry(format!("{prefix}.{}_dyrelu.coefficients", names[pos]), "predictor", pred, (h * n + n) as u64));
            let mut e = overhead_entry(format!("{prefix}.{}_dyrelu", names[pos]), "dyrelu", map, 0);
            e.elem_ops = (co * o.0 * o.1) as u64;
            layers.push(e);
        } else if act != BlockActivation::Identity {
            let mut e = LayerEntry::new(format!("{prefix}.{}_act", names[pos]), "activation");
            e.elem_ops = (co * o.0 * o.1) as u64;
            layers.push(e);
        }
        if pos == DEPTHWISE {
            match spec.attention {
                AttentionKind::None => {}
                AttentionKind::Se => {
                    let sq = spec.se_squeeze;
                    let mut e = LayerEntry::new(format!("{prefix}.se"), "se");
                    e.macs = linear_macs(spec.c_exp, sq, 1) + linear_macs(sq, spec.c_exp, 1);
                    e.params = (2 * spec.c_exp * sq + sq + spec.c_exp) as u64;
                    e.elem_ops = 2 * (spec.c_exp * o.0 * o.1) as u64;
                    static_macs += e.macs;
                    pb.static_path += e.params;
                    layers.push(e);
                }
                AttentionKind::Ca { frequency, time } => {
                    let macs = ca_macs(h, spec.c_exp, o.0, o.1, frequency, time);
                    let dirs = frequency as usize + time as usize;
                    ov.ca = macs;
                    pb.ca = (dirs * (h * spec.c_exp + spec.c_exp)) as u64;
                    let mut e = overhead_entry(format!("{prefix}.ca"), "ca", macs, pb.ca);
                    e.elem_ops = 2 * (spec.c_exp * o.0 * o.1) as u64;
                    layers.push(e);
                }
            }
        }
    }
    if spec.use_residual() {
        let mut e = LayerEntry::new(format!("{prefix}.residual"), "add");
        e.elem_ops = (spec.c_out * out.0 * out.1) as u64;
        layers.push(e);
    }
    Ok(BlockCost {
        index,
        input,
        output: out,
        static_macs,
        overhead: ov,
        params: pb,
        layers,
    })
}

/// Full report for `1 × 1 × n_mels × frames` input.
pub fn mac_report(cfg: &ModelConfig, frames: usize) -> Result<MacReport> {
    let specs = cfg.block_specs()?;
    let n_mels = cfg.n_mels;
    let mut layers = Vec::new();
    let mut rows = Vec::new();

    let c0 = cfg.stem_channels();
    let stem_out = (output_extent(n_mels, 3, 2, 1)?, output_extent(frames, 3, 2, 1)?);
    let mut stem = LayerEntry::new("stem", "conv");
    for e in [
        conv_entry("stem.conv".into(), 1, c0, 1, 3, ConvKind::Static, 1, stem_out),
        bn_entry("stem.bn".into(), c0, stem_out),
    ] {
        stem.absorb(&e);
        layers.push(e);
    }
    stem.elem_ops += (c0 * stem_out.0 * stem_out.1) as u64;
    rows.push(stem);

    let mut blocks = Vec::with_capacity(specs.len());
    let mut extent = stem_out;
    for (i, spec) in specs.iter().enumerate() {
        let cost = block_cost(i + 1, spec, extent)?;
        let mut row = LayerEntry::new(
            format!("block{:02}", i + 1),
            if spec.needs_context() { "dynamic_block" } else { "block" },
        );
        for e in &cost.layers {
            row.absorb(e);
        }
        layers.extend(cost.layers.iter().cloned());
        extent = cost.output;
        rows.push(row);
        blocks.push(cost);
    }

    let c_last = specs.last().map_or(c0, |s| s.c_out);
    let c_head = cfg.head_channels();
    let hd = cfg.head_dim();
    let mut head = LayerEntry::new("head", "head");
    let mut hidden = LayerEntry::new("head.hidden", "linear");
    hidden.macs = linear_macs(c_head, hd, 1);
    hidden.params = (c_head * hd + hd) as u64;
    let mut cls = LayerEntry::new("head.classifier", "linear");
    cls.macs = linear_macs(hd, cfg.n_classes, 1);
    cls.params = (hd * cfg.n_classes + cfg.n_classes) as u64;
    let mut pool = LayerEntry::new("head.pool", "pool");
    pool.elem_ops = (c_head * extent.0 * extent.1) as u64;
    for e in [
        conv_entry("head.conv".into(), c_last, c_head, 1, 1, ConvKind::Static, 1, extent),
        bn_entry("head.bn".into(), c_head, extent),
        pool,
        hidden,
        cls,
    ] {
        head.absorb(&e);
        layers.push(e);
    }
    rows.push(head);

    Ok(MacReport {
        frames,
        n_mels,
        rows,
        blocks,
        layers,
    })
}

impl MacReport {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_overhead(&self) -> u64 {
        self.rows.iter().map(|r| r.dyn_overhead).sum()
    }

    pub fn total_elem_ops(&self) -> u64 {
        self.rows.iter().map(|r| r.elem_ops).sum()
    }

    /// `layer,kind,macs,params,dyn_overhead`, one row per stem, block, head.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,macs,params,dyn_overhead\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, r.macs, r.params, r.dyn_overhead);
        }
        s
    }

    /// Aligned-column text with per-block overhead ratios and totals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input 1x1x{}x{}", self.n_mels, self.frames);
        let _ = writeln!(
            s,
            "{:<10} {:<14} {:>15} {:>12} {:>13} {:>9} {:>15}",
            "layer", "kind", "macs", "params", "dyn_overhead", "overhead", "elem_ops"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let ratio = if (1..=self.blocks.len()).contains(&i) {
                format!("{:.2}%", 100.0 * self.blocks[i - 1].overhead_ratio())
            } else {
                "-".into()
            };
            let _ = writeln!(
                s,
                "{:<10} {:<14} {:>15} {:>12} {:>13} {:>9} {:>15}",
                r.name, r.kind, r.macs, r.params, r.dyn_overhead, ratio, r.elem_ops
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:<14} {:>15} {:>12} {:>13} {:>9} {:>15}",
            "total",
            "",
            self.total_macs(),
            self.total_params(),
            self.total_overhead(),
            "",
            self.total_elem_ops()
        );
        s
    }
}
