//! Labelled clips, label files and epoch sampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::frontend::wav::read_wav;
use crate::frontend::{MelConfig, MelExtractor, Waveform};
use crate::tensor::Tensor;

/// Name of the label file inside a data directory.
pub const LABEL_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub wave: Waveform,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(clips: Vec<Clip>, n_classes: usize) -> Result<Self> {
        let mut ids = HashSet::new();
        for c in &clips {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Data(format!("duplicate clip id {}", c.id)));
            }
            if let Some(&l) = c.labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::Data(format!("clip {} has label {l} >= {n_classes} classes", c.id)));
            }
        }
        Ok(Self { clips, n_classes })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Multi-hot targets `B × n_classes` for the given clips.
    pub fn targets(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let c = self.n_classes;
        let mut t = vec![0f32; idx.len() * c];
        for (row, &i) in idx.iter().enumerate() {
            for &l in &self.clips[i].labels {
                t[row * c + l] = 1.0;
            }
        }
        Tensor::new(vec![idx.len(), c], t)
    }

    /// Reads `labels.csv` and `{id}.wav` from `dir`; every clip is cropped
    /// or zero-padded to `clip_samples`.
    pub fn load_dir(dir: &Path, n_classes: usize, clip_samples: usize) -> Result<Self> {
        let path = dir.join(LABEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut clips = Vec::new();
        for (id, labels) in parse_label_csv(&text)? {
            let w = read_wav(&dir.join(format!("{id}.wav")))?;
            clips.push(Clip {
                id,
                wave: fit_length(&w, clip_samples),
                labels,
            });
        }
        Self::new(clips, n_classes)
    }
}

/// Parses `id,i;j;k` lines. Blank lines, `#` comments and an `id,labels`
/// header are skipped; an empty label field means no positive class.
pub fn parse_label_csv(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line == "id,labels") {
            continue;
        }
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("label line {}: expected `id,labels`", n + 1)))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::Data(format!("label line {}: empty id", n + 1)));
        }
        let labels = rest
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|e| Error::Data(format!("label line {}: {s}: {e}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        out.push((id.to_string(), labels));
    }
    Ok(out)
}

/// Crops or zero-pads to exactly `n` samples.
pub fn fit_length(w: &Waveform, n: usize) -> Waveform {
    let mut samples = w.samples.clone();
    samples.resize(n, 0.0);
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Stacks log-mel spectrograms of equal-length clips into `B × 1 × F × T`.
pub fn mel_batch(waves: &[&Waveform], ex: &MelExtractor) -> Result<Tensor<f32>> {
    let mels = waves.iter().map(|w| ex.compute(w)).collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&mels)
}

/// As [`mel_batch`] with a separately drawn filterbank per clip.
pub fn mel_batch_with(waves: &[&Waveform], cfgs: &[MelConfig]) -> Result<Tensor<f32>> {
    let mels = waves
        .iter()
        .zip(cfgs)
        .map(|(w, c)| MelExtractor::new(c)?.compute(w))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&mels)
}

/// Chooses the clip order of one epoch.
pub trait Sampler {
    fn epoch_order(&mut self, n: usize, rng: &mut StdRng) -> Vec<usize>;
}

/// Every clip once per epoch, shuffled.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformSampler;

impl Sampler for UniformSampler {
    fn epoch_order(&mut self, n: usize, rng: &mut StdRng) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn label_lines() {
        let parsed = parse_label_csv("id,labels\nclip_a,0;3\n\n# note\nclip_b,\nclip_c, 2 \n").unwrap();
        assert_eq!(
            parsed,
            vec![
                ("clip_a".to_string(), vec![0, 3]),
                ("clip_b".to_string(), vec![]),
                ("clip_c".to_string(), vec![2])
            ]
        );
        assert!(parse_label_csv("nocomma\n").is_err());
        assert!(parse_label_csv("a,x\n").is_err());
    }

    #[test]
    fn dataset_checks_labels_and_ids() {
        let w = Waveform::new(vec![0.0; 4], 32_000).unwrap();
        let clip = |id: &str, l: usize| Clip {
            id: id.into(),
            wave: w.clone(),
            labels: vec![l],
        };
        assert!(Dataset::new(vec![clip("a", 2)], 2).is_err());
        assert!(Dataset::new(vec![clip("a", 0), clip("a", 1)], 2).is_err());
        let d = Dataset::new(vec![clip("a", 1), clip("b", 0)], 2).unwrap();
        assert_eq!(d.targets(&[1, 0]).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_sampler_is_a_permutation() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut o = UniformSampler.epoch_order(10, &mut rng);
        o.sort();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fit_length_pads_and_crops() {
        let w = Waveform::new(vec![1.0; 3], 32_000).unwrap();
        assert_eq!(fit_length(&w, 5).samples, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(fit_length(&w, 2).samples, vec![1.0, 1.0]);
    }
}
