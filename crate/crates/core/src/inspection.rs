//! Probes of the dynamic components: coefficient shuffles, kernel-attention
//! overrides and Dy-ReLU input/output capture.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::blocks::{CaOverride, ForwardCtx, ForwardHook};
use crate::error::{config_err, Error, Result};
use crate::metrics::{accuracy, mean_average_precision};
use crate::network::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Ca,
    DyConv,
    DyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ContextShuffle,
    ChannelShuffle,
    SpatialShuffle,
    TimeShuffle,
    FrequencyShuffle,
    AttentionShuffle,
    UniformAttention,
    MaxAttention,
}

impl Target {
    pub const NAMES: [&'static str; 3] = ["ca", "dyconv", "dyrelu"];

    /// Methods defined for this component.
    pub fn methods(self) -> &'static [Method] {
        use Method::*;
        match self {
            Target::Ca => &[ContextShuffle, ChannelShuffle, SpatialShuffle, TimeShuffle, FrequencyShuffle],
            Target::DyConv => &[ContextShuffle, AttentionShuffle, UniformAttention, MaxAttention],
            Target::DyRelu => &[ContextShuffle, ChannelShuffle],
        }
    }
}

impl Method {
    pub const NAMES: [&'static str; 8] = [
        "context_shuffle",
        "channel_shuffle",
        "spatial_shuffle",
        "time_shuffle",
        "frequency_shuffle",
        "attention_shuffle",
        "uniform_attention",
        "max_attention",
    ];
    const ALL: [Method; 8] = [
        Method::ContextShuffle,
        Method::ChannelShuffle,
        Method::SpatialShuffle,
        Method::TimeShuffle,
        Method::FrequencyShuffle,
        Method::AttentionShuffle,
        Method::UniformAttention,
        Method::MaxAttention,
    ];
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Target::Ca, Target::DyConv, Target::DyRelu].iter().position(|t| t == self).unwrap();
        f.write_str(Self::NAMES[i])
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "ca" => Ok(Target::Ca),
            "dyconv" => Ok(Target::DyConv),
            "dyrelu" => Ok(Target::DyRelu),
            _ => config_err(format!("unknown target '{s}' (expected one of {:?})", Self::NAMES)),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = Self::ALL.iter().position(|m| m == self).unwrap();
        f.write_str(Self::NAMES[i])
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        match Self::NAMES.iter().position(|n| *n == key) {
            Some(i) => Ok(Self::ALL[i]),
            None => config_err(format!("unknown method '{s}' (expected one of {:?})", Self::NAMES)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionConfig {
    pub target: Target,
    pub method: Method,
    pub seed: u64,
    /// Restrict the perturbation to these 1-based blocks; `None` perturbs
    /// every block holding the target.
    pub blocks: Option<Vec<usize>>,
    /// Replace every drawn permutation by the identity (debug).
    pub identity: bool,
}

impl InspectionConfig {
    pub fn new(target: Target, method: Method, seed: u64) -> Self {
        Self {
            target,
            method,
            seed,
            blocks: None,
            identity: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.target.methods().contains(&self.method) {
            return config_err(format!(
                "method {} is not defined for target {} (valid: {})",
                self.method,
                self.target,
                self.target.methods().iter().map(|m| m.to_string()).collect::<Vec<_>>().join(", ")
            ));
        }
        if let Some(b) = &self.blocks {
            if let Some(bad) = b.iter().find(|&&i| !(1..=15).contains(&i)) {
                return config_err(format!("block index {bad} outside 1..=15"));
            }
        }
        Ok(())
    }

    fn selects(&self, block: usize) -> bool {
        self.blocks.as_ref().is_none_or(|b| b.contains(&block))
    }

    /// Checks that `model` has at least one selected block with the target.
    fn check_model<T: crate::tensor::Real>(&self, model: &Model<T>) -> Result<()> {
        self.validate()?;
        let present = model.net.blocks.iter().enumerate().any(|(i, b)| {
            self.selects(i + 1)
                && match self.target {
                    Target::Ca => b.spec.has_ca(),
                    Target::DyConv => b.spec.has_dynamic_conv(),
                    Target::DyRelu => b.spec.has_dyrelu(),
                }
        });
        if !present {
            return config_err(format!("no {} in the selected blocks", self.target));
        }
        Ok(())
    }
}

/// Metric reported by [`perturbed_eval`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    MeanAveragePrecision,
}

impl Metric {
    pub fn score(self, logits: &Tensor<f32>, targets: &Tensor<f32>) -> Result<f64> {
        match self {
            Metric::Accuracy => accuracy(logits, targets),
            Metric::MeanAveragePrecision => mean_average_precision(logits, targets),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::MeanAveragePrecision => "mAP",
        })
    }
}

/// Uniformly random permutation of `0..n`, or the identity.
fn permutation(n: usize, rng: &mut StdRng, identity: bool) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if !identity {
        p.shuffle(rng);
    }
    p
}

/// Uniformly random cyclic permutation (no fixed points for `n ≥ 2`).
pub fn derangement(n: usize, rng: &mut StdRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

type Key = (usize, usize);

/// Coefficients captured from a forward pass over the partner batch.
#[derive(Default)]
struct Recorded {
    coef: HashMap<Key, Tensor<f32>>,
    ca: HashMap<usize, (Option<Tensor<f32>>, Option<Tensor<f32>>)>,
}

enum Phase {
    Record(Recorded),
    Replay(Recorded),
    Perturb(StdRng),
}

/// The hook applying one inspection configuration.
struct Probe<'a> {
    cfg: &'a InspectionConfig,
    phase: Phase,
    /// Dy-ReLU mappings `M`.
    mappings: usize,
}

impl Probe<'_> {
    fn active(&self, target: Target, block: usize) -> bool {
        self.cfg.target == target && self.cfg.selects(block)
    }

    fn rng(&mut self) -> &mut StdRng {
        match &mut self.phase {
            Phase::Perturb(rng) => rng,
            _ => unreachable!("no rng outside the perturb phase"),
        }
    }
}

/// Permutes, per row, blocks of `width` entries of a `B × (n·width)` matrix.
fn shuffle_groups(t: &Tensor<f32>, width: usize, rng: &mut StdRng, identity: bool) -> Tensor<f32> {
    let b = t.shape()[0];
    let row = t.numel() / b;
    let n = row / width;
    let mut out = t.data().to_vec();
    for r in 0..b {
        let p = permutation(n, rng, identity);
        let src = &t.data()[r * row..(r + 1) * row];
        for (dst, &s) in p.iter().enumerate() {
            out[r * row + dst * width..r * row + (dst + 1) * width].copy_from_slice(&src[s * width..(s + 1) * width]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Permutes axis 1 (channels) or 2 (the spatial axis) of a `B×C×L×1`
/// factor with the given per-sample permutations.
fn permute_factor(t: &Tensor<f32>, axis: usize, perms: &[Vec<usize>]) -> Tensor<f32> {
    let [_, c, l, _] = t.dims4().expect("rank 4 factor");
    let d = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (bi, ci, li) = (i / (c * l), (i / l) % c, i % l);
        let p = &perms[bi];
        match axis {
            1 => d[(bi * c + p[ci]) * l + li],
            _ => d[(bi * c + ci) * l + p[li]],
        }
    })
    .expect("same shape")
}

impl ForwardHook<f32> for Probe<'_> {
    fn dyrelu_coefficients(&mut self, block: usize, position: usize, coef: &Tensor<f32>) -> Option<Tensor<f32>> {
        if !self.active(Target::DyRelu, block) {
            return None;
        }
        match &mut self.phase {
            Phase::Record(r) => {
                r.coef.insert((block, position), coef.clone());
                None
            }
            Phase::Replay(r) => r.coef.get(&(block, position)).cloned(),
            Phase::Perturb(_) => {
                // channel_shuffle: each channel owns 2M consecutive entries
                let width = 2 * self.mappings;
                let identity = self.cfg.identity;
                Some(shuffle_groups(coef, width, self.rng(), identity))
            }
        }
    }

    fn kernel_attention(&mut self, block: usize, position: usize, att: &Tensor<f32>) -> Option<Tensor<f32>> {
        if !self.active(Target::DyConv, block) {
            return None;
        }
        let method = self.cfg.method;
        let identity = self.cfg.identity;
        match &mut self.phase {
            Phase::Record(r) => {
                r.coef.insert((block, position), att.clone());
                None
            }
            Phase::Replay(r) => r.coef.get(&(block, position)).cloned(),
            Phase::Perturb(rng) => {
                let k = att.shape()[1];
                Some(match method {
                    Method::AttentionShuffle => shuffle_groups(att, 1, rng, identity),
                    Method::UniformAttention => att.map(|_| 1.0 / k as f32),
                    Method::MaxAttention => {
                        let mut out = att.map(|_| 0.0);
                        for (r, row) in att.data().chunks(k).enumerate() {
                            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                            out.data_mut()[r * k + best] = 1.0;
                        }
                        out
                    }
                    _ => unreachable!("validated"),
                })
            }
        }
    }

    fn ca_weights(&mut self, block: usize, sf: Option<&Tensor<f32>>, st: Option<&Tensor<f32>>) -> Option<CaOverride<f32>> {
        if !self.active(Target::Ca, block) {
            return None;
        }
        let method = self.cfg.method;
        let identity = self.cfg.identity;
        match &mut self.phase {
            Phase::Record(r) => {
                r.ca.insert(block, (sf.cloned(), st.cloned()));
                None
            }
            Phase::Replay(r) => r.ca.get(&block).map(|(f, t)| CaOverride::Factored(f.clone(), t.clone())),
            Phase::Perturb(rng) => {
                let dims = sf.or(st).expect("CA has a factor").dims4().expect("rank 4");
                let (b, c) = (dims[0], dims[1]);
                match method {
                    Method::ChannelShuffle => {
                        let perms: Vec<_> = (0..b).map(|_| permutation(c, rng, identity)).collect();
                        Some(CaOverride::Factored(
                            sf.map(|f| permute_factor(f, 1, &perms)),
                            st.map(|t| permute_factor(t, 1, &perms)),
                        ))
                    }
                    Method::FrequencyShuffle => sf.map(|f| {
                        let perms: Vec<_> = (0..b).map(|_| permutation(f.shape()[2], rng, identity)).collect();
                        CaOverride::Factored(Some(permute_factor(f, 2, &perms)), st.cloned())
                    }),
                    Method::TimeShuffle => st.map(|t| {
                        let perms: Vec<_> = (0..b).map(|_| permutation(t.shape()[2], rng, identity)).collect();
                        CaOverride::Factored(sf.cloned(), Some(permute_factor(t, 2, &perms)))
                    }),
                    Method::SpatialShuffle => {
                        let fl = sf.map_or(1, |f| f.shape()[2]);
                        let tl = st.map_or(1, |t| t.shape()[2]);
                        let map = full_map(sf, st, b, c, fl, tl);
                        let plane = fl * tl;
                        let perms: Vec<_> = (0..b).map(|_| permutation(plane, rng, identity)).collect();
                        let d = map.data();
                        let out = Tensor::from_fn(map.shape(), |i| {
                            let (bc, pos) = (i / plane, i % plane);
                            d[bc * plane + perms[bc / c][pos]]
                        })
                        .expect("same shape");
                        Some(CaOverride::Full(out))
                    }
                    _ => unreachable!("validated"),
                }
            }
        }
    }
}

/// `B×C×F×T` product of the CA factors (a missing factor counts as 1).
fn full_map(sf: Option<&Tensor<f32>>, st: Option<&Tensor<f32>>, b: usize, c: usize, f: usize, t: usize) -> Tensor<f32> {
    Tensor::from_fn(&[b, c, f, t], |i| {
        let (bc, fi, ti) = (i / (f * t), (i / t) % f, i % t);
        let a = sf.map_or(1.0, |s| s.data()[bc * f + fi]);
        let z = st.map_or(1.0, |s| s.data()[bc * t + ti]);
        a * z
    })
    .expect("positive extents")
}

/// Chunks of `0..n` of at most `batch` items, none of a single item unless
/// `n == 1`.
fn chunks(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let batch = batch.max(2);
    let mut out: Vec<_> = (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Evaluation-mode logits `N × classes` under the perturbation `cfg`.
pub fn perturbed_logits(model: &Model<f32>, mels: &[Tensor<f32>], cfg: &InspectionConfig, batch: usize) -> Result<Tensor<f32>> {
    cfg.check_model(model)?;
    if mels.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mappings = model.config().mappings;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for r in chunks(mels.len(), batch) {
        let x = Tensor::stack_batch(&mels[r])?;
        let n = x.shape()[0];
        let z = if cfg.method == Method::ContextShuffle {
            if n < 2 {
                return Err(Error::Data("context shuffle needs at least two clips".into()));
            }
            let partner = if cfg.identity { (0..n).collect() } else { derangement(n, &mut rng) };
            let mut probe = Probe {
                cfg,
                phase: Phase::Record(Recorded::default()),
                mappings,
            };
            model.predict_with(&x.permute_batch(&partner)?, &mut ForwardCtx::eval().with_hook(&mut probe))?;
            let Phase::Record(rec) = std::mem::replace(&mut probe.phase, Phase::Perturb(StdRng::seed_from_u64(0))) else {
                unreachable!()
            };
            probe.phase = Phase::Replay(rec);
            model.predict_with(&x, &mut ForwardCtx::eval().with_hook(&mut probe))?
        } else {
            let mut probe = Probe {
                cfg,
                phase: Phase::Perturb(StdRng::seed_from_u64(rng.random())),
                mappings,
            };
            model.predict_with(&x, &mut ForwardCtx::eval().with_hook(&mut probe))?
        };
        rows.extend_from_slice(z.data());
    }
    Tensor::new(vec![mels.len(), model.config().n_classes], rows)
}

/// Metric of the perturbed model.
pub fn perturbed_eval(
    model: &Model<f32>,
    mels: &[Tensor<f32>],
    targets: &Tensor<f32>,
    cfg: &InspectionConfig,
    metric: Metric,
    batch: usize,
) -> Result<f64> {
    metric.score(&perturbed_logits(model, mels, cfg, batch)?, targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionReport {
    pub metric: Metric,
    pub baseline: f64,
    /// One value per shuffle seed `seed, seed + 1, …`.
    pub perturbed: Vec<f64>,
}

impl InspectionReport {
    pub fn perturbed_mean(&self) -> f64 {
        self.perturbed.iter().sum::<f64>() / self.perturbed.len() as f64
    }

    /// Mean perturbed metric minus baseline.
    pub fn delta(&self) -> f64 {
        self.perturbed_mean() - self.baseline
    }
}

impl fmt::Display for InspectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric,baseline,perturbed,delta,repeats")?;
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{}",
            self.metric,
            self.baseline,
            self.perturbed_mean(),
            self.delta(),
            self.perturbed.len()
        )
    }
}

/// Baseline metric and the perturbed metric for `repeats` consecutive
/// seeds starting at `cfg.seed`.
pub fn inspect(
    model: &Model<f32>,
    mels: &[Tensor<f32>],
    targets: &Tensor<f32>,
    cfg: &InspectionConfig,
    metric: Metric,
    batch: usize,
    repeats: usize,
) -> Result<InspectionReport> {
    if repeats == 0 {
        return config_err("repeats must be positive");
    }
    let base = crate::training::trainer::predict_logits(model, mels, batch)?;
    let perturbed = (0..repeats as u64)
        .map(|i| {
            let c = InspectionConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            };
            perturbed_eval(model, mels, targets, &c, metric, batch)
        })
        .collect::<Result<_>>()?;
    Ok(InspectionReport {
        metric,
        baseline: metric.score(&base, targets)?,
        perturbed,
    })
}

/// One Dy-ReLU evaluation: scalar input, output and the coefficients of
/// its channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingPair {
    pub input: f32,
    pub output: f32,
    pub slopes: Vec<f32>,
    pub intercepts: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingSample {
    pub block: usize,
    pub pairs: Vec<MappingPair>,
}

impl MappingSample {
    /// CSV with header `block,input,output`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,input,output\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{}\n", self.block, p.input, p.output));
        }
        s
    }
}

/// Uniform reservoir over every Dy-ReLU scalar of the chosen blocks.
struct Capture {
    n: usize,
    mappings: usize,
    rng: StdRng,
    seen: BTreeMap<usize, u64>,
    kept: BTreeMap<usize, Vec<MappingPair>>,
}

impl ForwardHook<f32> for Capture {
    fn dyrelu_io(&mut self, block: usize, _position: usize, x: &Tensor<f32>, coef: &Tensor<f32>, y: &Tensor<f32>) {
        let Some(kept) = self.kept.get_mut(&block) else {
            return;
        };
        let seen = self.seen.entry(block).or_default();
        let [_, _, f, t] = x.dims4().expect("rank 4");
        let per = 2 * self.mappings;
        for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
            *seen += 1;
            let slot = if kept.len() < self.n {
                None
            } else {
                let r = self.rng.random_range(0..*seen) as usize;
                if r >= self.n {
                    continue;
                }
                Some(r)
            };
            let bc = i / (f * t);
            let row = &coef.data()[bc * per..(bc + 1) * per];
            let pair = MappingPair {
                input: xi,
                output: yi,
                slopes: row[..self.mappings].to_vec(),
                intercepts: row[self.mappings..].to_vec(),
            };
            match slot {
                None => kept.push(pair),
                Some(r) => kept[r] = pair,
            }
        }
    }
}

/// Samples up to `n_samples` Dy-ReLU (input, output) pairs per block,
/// uniformly over all evaluations on `mels`.
pub fn capture_dyrelu_mappings(
    model: &Model<f32>,
    mels: &[Tensor<f32>],
    blocks: &[usize],
    n_samples: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<MappingSample>> {
    for &b in blocks {
        if !(1..=15).contains(&b) {
            return config_err(format!("block index {b} outside 1..=15"));
        }
        if !model.net.blocks[b - 1].spec.has_dyrelu() {
            return config_err(format!("block {b} has no Dy-ReLU"));
        }
    }
    let mut cap = Capture {
        n: n_samples,
        mappings: model.config().mappings,
        rng: StdRng::seed_from_u64(seed),
        seen: BTreeMap::new(),
        kept: blocks.iter().map(|&b| (b, Vec::new())).collect(),
    };
    for chunk in mels.chunks(batch.max(1)) {
        model.predict_with(&Tensor::stack_batch(chunk)?, &mut ForwardCtx::eval().with_hook(&mut cap))?;
    }
    Ok(blocks
        .iter()
        .map(|&b| MappingSample {
            block: b,
            pairs: cap.kept[&b].clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, Placement};

    fn tiny(kernels: usize) -> ModelConfig {
        ModelConfig {
            width_mult: 0.1,
            n_classes: 3,
            n_mels: 24,
            kernels,
            placement: Placement::All,
            ..ModelConfig::default()
        }
    }

    fn dynamic_model(kernels: usize) -> Model<f32> {
        let mut m = Model::<f64>::new(&tiny(kernels), 1).unwrap();
        crate::blocks::checks::randomize_zero_params(&mut m.params, &mut StdRng::seed_from_u64(2)).unwrap();
        m.cast()
    }

    fn mels(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::uniform(&[1, 1, 24, 20], 1.0, &mut rng).unwrap()).collect()
    }

    fn sorted(t: &Tensor<f32>) -> Vec<f32> {
        let mut v = t.data().to_vec();
        v.sort_by(f32::total_cmp);
        v
    }

    fn probe(cfg: &InspectionConfig) -> Probe<'_> {
        Probe {
            cfg,
            phase: Phase::Perturb(StdRng::seed_from_u64(9)),
            mappings: 2,
        }
    }

    #[test]
    fn shuffles_preserve_the_multiset() {
        let mut rng = StdRng::seed_from_u64(0);
        let sf = Tensor::uniform(&[2, 5, 7, 1], 1.0, &mut rng).unwrap();
        let st = Tensor::uniform(&[2, 5, 6, 1], 1.0, &mut rng).unwrap();
        for m in [Method::ChannelShuffle, Method::TimeShuffle, Method::FrequencyShuffle] {
            let cfg = InspectionConfig::new(Target::Ca, m, 0);
            let Some(CaOverride::Factored(f, t)) = probe(&cfg).ca_weights(1, Some(&sf), Some(&st)) else {
                panic!("{m}")
            };
            let (f, t) = (f.unwrap(), t.unwrap());
            assert_eq!(sorted(&f), sorted(&sf), "{m}");
            assert_eq!(sorted(&t), sorted(&st), "{m}");
            assert!(f != sf || t != st, "{m} moved nothing");
        }
        let cfg = InspectionConfig::new(Target::Ca, Method::SpatialShuffle, 0);
        let Some(CaOverride::Full(map)) = probe(&cfg).ca_weights(1, Some(&sf), Some(&st)) else { panic!() };
        let full = full_map(Some(&sf), Some(&st), 2, 5, 7, 6);
        assert_eq!(sorted(&map), sorted(&full));
        assert_ne!(map, full);

        let coef = Tensor::uniform(&[3, 6 * 4], 1.0, &mut rng).unwrap();
        let cfg = InspectionConfig::new(Target::DyRelu, Method::ChannelShuffle, 0);
        let out = probe(&cfg).dyrelu_coefficients(1, 1, &coef).unwrap();
        // channel groups of 2M move as units
        for (r, row) in out.data().chunks(24).enumerate() {
            let mut groups: Vec<&[f32]> = row.chunks(4).collect();
            let mut orig: Vec<&[f32]> = coef.data()[r * 24..(r + 1) * 24].chunks(4).collect();
            groups.sort_by(|a, b| a[0].total_cmp(&b[0]));
            orig.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(groups, orig);
        }

        let att = Tensor::uniform(&[4, 5], 1.0, &mut rng).unwrap();
        let cfg = InspectionConfig::new(Target::DyConv, Method::AttentionShuffle, 0);
        let out = probe(&cfg).kernel_attention(1, 0, &att).unwrap();
        for (a, b) in out.data().chunks(5).zip(att.data().chunks(5)) {
            let (mut a, mut b) = (a.to_vec(), b.to_vec());
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn attention_overrides() {
        let att = Tensor::new(vec![2, 4], vec![0.1, 0.6, 0.2, 0.1, 0.3, 0.3, 0.1, 0.3]).unwrap();
        let uni = InspectionConfig::new(Target::DyConv, Method::UniformAttention, 0);
        assert!(probe(&uni).kernel_attention(1, 0, &att).unwrap().data().iter().all(|&v| v == 0.25));
        let max = InspectionConfig::new(Target::DyConv, Method::MaxAttention, 0);
        let out = probe(&max).kernel_attention(1, 0, &att).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = StdRng::seed_from_u64(1);
        for n in 2..40 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn chunking_avoids_singletons() {
        assert_eq!(chunks(9, 4), vec![0..4, 4..9]);
        assert_eq!(chunks(8, 4), vec![0..4, 4..8]);
        assert_eq!(chunks(1, 4), vec![0..1]);
    }

    #[test]
    fn identity_permutations_change_nothing() {
        let m = dynamic_model(4);
        let x = mels(6, 3);
        let base = crate::training::trainer::predict_logits(&m, &x, 4).unwrap();
        let cases = [
            (Target::Ca, Method::ContextShuffle),
            (Target::Ca, Method::ChannelShuffle),
            (Target::Ca, Method::SpatialShuffle),
            (Target::Ca, Method::TimeShuffle),
            (Target::Ca, Method::FrequencyShuffle),
            (Target::DyConv, Method::ContextShuffle),
            (Target::DyConv, Method::AttentionShuffle),
            (Target::DyRelu, Method::ContextShuffle),
            (Target::DyRelu, Method::ChannelShuffle),
        ];
        for (t, meth) in cases {
            let mut cfg = InspectionConfig::new(t, meth, 5);
            cfg.identity = true;
            assert_eq!(perturbed_logits(&m, &x, &cfg, 4).unwrap(), base, "{t} {meth}");
            cfg.identity = false;
            let z = perturbed_logits(&m, &x, &cfg, 4).unwrap();
            assert_ne!(z, base, "{t} {meth}");
            assert_eq!(z, perturbed_logits(&m, &x, &cfg, 4).unwrap(), "{t} {meth} reproducible");
        }
    }

    #[test]
    fn single_kernel_attention_overrides_are_no_ops() {
        let m = dynamic_model(1);
        let x = mels(5, 4);
        let base = crate::training::trainer::predict_logits(&m, &x, 5).unwrap();
        for meth in [Method::UniformAttention, Method::MaxAttention, Method::AttentionShuffle] {
            let cfg = InspectionConfig::new(Target::DyConv, meth, 0);
            assert_eq!(perturbed_logits(&m, &x, &cfg, 5).unwrap(), base, "{meth}");
        }
    }

    #[test]
    fn zero_predictors_make_context_shuffle_inert() {
        let m = Model::<f32>::new(&tiny(4), 1).unwrap();
        let x = mels(6, 5);
        let base = crate::training::trainer::predict_logits(&m, &x, 6).unwrap();
        for t in [Target::Ca, Target::DyConv, Target::DyRelu] {
            let cfg = InspectionConfig::new(t, Method::ContextShuffle, 3);
            assert_eq!(perturbed_logits(&m, &x, &cfg, 6).unwrap(), base, "{t}");
        }
    }

    #[test]
    fn per_block_selection_limits_the_perturbation() {
        let m = dynamic_model(4);
        let x = mels(4, 6);
        let mut cfg = InspectionConfig::new(Target::DyRelu, Method::ChannelShuffle, 1);
        cfg.blocks = Some(vec![15]);
        let one = perturbed_logits(&m, &x, &cfg, 4).unwrap();
        cfg.blocks = None;
        let all = perturbed_logits(&m, &x, &cfg, 4).unwrap();
        assert_ne!(one, all);
    }

    #[test]
    fn invalid_requests_are_config_errors() {
        let m = dynamic_model(4);
        let x = mels(2, 0);
        for (t, meth) in [(Target::Ca, Method::UniformAttention), (Target::DyRelu, Method::SpatialShuffle), (Target::DyConv, Method::ChannelShuffle)] {
            let cfg = InspectionConfig::new(t, meth, 0);
            assert!(matches!(perturbed_logits(&m, &x, &cfg, 2), Err(Error::Config(_))));
        }
        let mut cfg = InspectionConfig::new(Target::Ca, Method::ContextShuffle, 0);
        cfg.blocks = Some(vec![16]);
        assert!(matches!(perturbed_logits(&m, &x, &cfg, 2), Err(Error::Config(_))));
        let stat = Model::<f32>::new(&ModelConfig { placement: Placement::None, ..tiny(4) }, 0).unwrap();
        let cfg = InspectionConfig::new(Target::Ca, Method::ContextShuffle, 0);
        assert!(matches!(perturbed_logits(&stat, &x, &cfg, 2), Err(Error::Config(_))));
        assert!(matches!(capture_dyrelu_mappings(&stat, &x, &[1], 10, 0, 2), Err(Error::Config(_))));
        assert!(matches!(capture_dyrelu_mappings(&m, &x, &[0], 10, 0, 2), Err(Error::Config(_))));
        assert!("dy-relu".parse::<Target>().is_ok() && "bogus".parse::<Method>().is_err());
        assert_eq!("uniform-attention".parse::<Method>().unwrap(), Method::UniformAttention);
    }

    #[test]
    fn captured_pairs_follow_their_coefficients() {
        let m = dynamic_model(4);
        let x = mels(3, 7);
        let r = m.config().dyrelu_ranges();
        let caps = capture_dyrelu_mappings(&m, &x, &[1, 3, 13, 15], 500, 0, 3).unwrap();
        assert_eq!(caps.len(), 4);
        for c in &caps {
            assert!(!c.pairs.is_empty() && c.pairs.len() <= 500);
            for p in &c.pairs {
                let best = p.slopes.iter().zip(&p.intercepts).map(|(a, b)| a * p.input + b).fold(f32::MIN, f32::max);
                assert_eq!(p.output, best);
                for (j, a) in p.slopes.iter().enumerate() {
                    assert!((*a as f64 - r.init_a[j]).abs() <= r.lambda_a + 1e-6);
                }
            }
            assert!(c.to_csv().starts_with("block,input,output\n"));
            assert_eq!(c.to_csv().lines().count(), c.pairs.len() + 1);
        }
        assert_eq!(caps, capture_dyrelu_mappings(&m, &x, &[1, 3, 13, 15], 500, 0, 3).unwrap());
    }

    #[test]
    fn zero_predictors_capture_the_relu_curve() {
        let m = Model::<f32>::new(&tiny(4), 1).unwrap();
        let caps = capture_dyrelu_mappings(&m, &mels(2, 8), &[2, 9], 300, 1, 2).unwrap();
        for c in caps {
            assert!(!c.pairs.is_empty() && c.pairs.len() <= 300);
            assert!(c.pairs.iter().all(|p| p.output == p.input.max(0.0)));
        }
    }
}
