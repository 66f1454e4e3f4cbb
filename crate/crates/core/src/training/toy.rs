//! Synthetic two-class task: low-band tones against high-band tones.

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use super::config::{RunConfig, TrainConfig};
use super::data::{Clip, Dataset, UniformSampler};
use super::schedule::ScheduleConfig;
use super::trainer::{dataset_mels, mel_config_for, predict_logits, train_loop};
use crate::container::TeacherLogits;
use crate::error::Result;
use crate::frontend::{Waveform, SAMPLE_RATE};
use crate::network::{Model, ModelConfig};

pub const LOW_BAND: (f64, f64) = (150.0, 700.0);
pub const HIGH_BAND: (f64, f64) = (3_000.0, 9_000.0);

/// A tone with a random frequency inside `band`, random phase and level,
/// plus weak white noise.
pub fn tone(band: (f64, f64), seconds: f64, rng: &mut StdRng) -> Result<Waveform> {
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let f = rng.random_range(band.0..band.1);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.1..0.5);
    let w = std::f64::consts::TAU * f / SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| (amp * (w * i as f64 + phase).sin() + 0.01 * rng.random_range(-1.0..1.0)) as f32)
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

/// `per_class` clips of each class, interleaved; class 0 is low, 1 high.
pub fn toy_dataset(per_class: usize, seconds: f64, seed: u64) -> Result<Dataset> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(2 * per_class);
    for i in 0..per_class {
        for (label, band) in [(0, LOW_BAND), (1, HIGH_BAND)] {
            clips.push(Clip {
                id: format!("toy_{seed}_{i:04}_{label}"),
                wave: tone(band, seconds, &mut rng)?,
                labels: vec![label],
            });
        }
    }
    Dataset::new(clips, 2)
}

/// Reduced-width network with 64 mel bands and two classes.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        width_mult: 0.1,
        n_classes: 2,
        n_mels: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub const TOY_SECONDS: f64 = 0.32;

/// Short schedule over `epochs`; plain label loss, no augmentation.
pub fn toy_run_config(epochs: usize) -> RunConfig {
    RunConfig {
        model: toy_model_config(),
        schedule: ScheduleConfig {
            epochs,
            warmup_epochs: 1,
            rampdown_epochs: epochs / 2,
            tail_epochs: 0,
            peak_lr: 1e-3,
            tau_start: 5.0,
            tau_end: 1.0,
            tau_anneal_epochs: (epochs / 4).max(1),
        },
        train: TrainConfig {
            batch_size: 16,
            kd_lambda: 1.0,
            mixup_spectrogram: false,
            mel_perturb: false,
            weight_decay: 0.0,
            clip_seconds: TOY_SECONDS,
            ..TrainConfig::default()
        },
    }
}

/// Teacher training length: accurate, with logits that are not saturated.
pub const TEACHER_EPOCHS: usize = 15;

/// Trains a toy teacher on `data` and returns it with its evaluation-mode
/// logits for every clip.
pub fn train_teacher(data: &Dataset, epochs: usize, seed: u64) -> Result<(Model<f32>, TeacherLogits)> {
    let run = toy_run_config(epochs);
    let mut model = Model::<f32>::new(&run.model, seed)?;
    train_loop(&mut model, data, &run, None, &mut UniformSampler, |_, _| Ok(()))?;
    let mels = dataset_mels(data, &mel_config_for(&run.model))?;
    let z = predict_logits(&model, &mels, run.train.batch_size)?;
    let ids = data.clips.iter().map(|c| c.id.clone()).collect();
    Ok((model, TeacherLogits::new(ids, z)?))
}

/// Means over `windows` equal consecutive chunks (the last absorbs the
/// remainder).
pub fn window_means(series: &[f64], windows: usize) -> Vec<f64> {
    let w = (series.len() / windows.max(1)).max(1);
    let mut out: Vec<f64> = Vec::new();
    let mut chunks: Vec<&[f64]> = series.chunks(w).collect();
    if chunks.len() > windows && windows > 0 {
        let tail = chunks.split_off(windows - 1).concat();
        for c in &chunks {
            out.push(c.iter().sum::<f64>() / c.len() as f64);
        }
        out.push(tail.iter().sum::<f64>() / tail.len() as f64);
        return out;
    }
    for c in chunks {
        out.push(c.iter().sum::<f64>() / c.len() as f64);
    }
    out
}

/// Decrease after smoothing: window means never rise by more than
/// `tol·first` and the last window is below the first.
pub fn smoothed_decrease(series: &[f64], windows: usize, tol: f64) -> bool {
    let m = window_means(series, windows);
    let Some((&first, &last)) = m.first().zip(m.last()) else {
        return false;
    };
    last < first && m.windows(2).all(|p| p[1] <= p[0] + tol * first)
}
