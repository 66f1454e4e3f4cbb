//! Log-mel frontend: STFT, Slaney mel filterbank, WAV input and waveform
//! augmentations.

pub mod augment;
pub mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The only accepted sample rate.
pub const SAMPLE_RATE: u32 = 32_000;

/// Mono audio samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Data("waveform is empty".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Spectrogram parameters. `fmin_jitter` and `fmax_jitter` are the widths of
/// the random perturbation windows applied by [`augment::perturb_mel_range`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    /// FFT length; the window is zero-padded up to it.
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub fmin_jitter: f64,
    pub fmax_jitter: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_mels: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 1024,
            f_min: 0.0,
            f_max: SAMPLE_RATE as f64 / 2.0,
            fmin_jitter: 10.0,
            fmax_jitter: 2000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn win_length(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate == 0 || self.n_mels == 0 {
            return bad("sample rate and n_mels must be positive".into());
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got {} and {}",
                self.f_min, self.f_max
            ));
        }
        let (win, hop) = (self.win_length(), self.hop_length());
        if win == 0 || hop == 0 || win > self.n_fft {
            return bad(format!(
                "window {win} and hop {hop} must be positive, window <= n_fft {}",
                self.n_fft
            ));
        }
        if !(self.log_floor > 0.0) || self.fmin_jitter < 0.0 || self.fmax_jitter < 0.0 {
            return bad("log floor must be positive and jitter widths non-negative".into());
        }
        Ok(())
    }

    /// `1 + floor((N − win) / hop)` frames for `n` samples (no centering).
    pub fn frame_count(&self, n: usize) -> Result<usize> {
        let win = self.win_length();
        if n < win {
            return Err(Error::Data(format!(
                "waveform of {n} samples is shorter than one {win}-sample window"
            )));
        }
        Ok(1 + (n - win) / self.hop_length())
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular filters with area normalization (`2 / bandwidth`).
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × (n_fft/2 + 1)`, row-major.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_fft / 2 + 1;
        let lo = hz_to_mel(cfg.f_min);
        let hi = hz_to_mel(cfg.f_max);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let up = (f - left) / (center - left);
                let down = (right - f) / (right - center);
                weights[m * n_bins + k] = up.min(down).max(0.0) * norm;
            }
        }
        Ok(Self {
            weights,
            n_mels: cfg.n_mels,
            n_bins,
            centers: edges[1..=cfg.n_mels].to_vec(),
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Reusable STFT plan and filterbank for one configuration.
pub struct MelExtractor {
    cfg: MelConfig,
    bank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        let bank = MelFilterbank::new(cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            bank,
            window: hann(cfg.win_length()),
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Log-mel spectrogram `1 × 1 × n_mels × T`.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor<f32>> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::Data(format!(
                "expected {} Hz audio, got {} Hz (resampling is not supported)",
                self.cfg.sample_rate, w.sample_rate
            )));
        }
        let frames = self.cfg.frame_count(w.samples.len())?;
        let hop = self.cfg.hop_length();
        let n_fft = self.cfg.n_fft;
        let nb = self.bank.n_bins;
        let n_mels = self.cfg.n_mels;
        let mut out = vec![0f32; n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut mag = vec![0.0; nb];
        for t in 0..frames {
            let start = t * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let v = self
                    .window
                    .get(i)
                    .map_or(0.0, |&win| win * w.samples[start + i] as f64);
                *c = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for m in 0..n_mels {
                let e: f64 = self.bank.row(m).iter().zip(&mag).map(|(a, b)| a * b).sum();
                out[m * frames + t] = (e + self.cfg.log_floor).ln() as f32;
            }
        }
        Tensor::new(vec![1, 1, n_mels, frames], out)
    }
}

/// One-shot convenience wrapper around [`MelExtractor`].
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<Tensor<f32>> {
    MelExtractor::new(cfg)?.compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn ten_second_clip_frame_count() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.win_length(), 800);
        assert_eq!(cfg.hop_length(), 320);
        let w = Waveform::new(vec![0.0; 320_000], SAMPLE_RATE).unwrap();
        let s = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(s.shape(), &[1, 1, 128, 998]);
    }

    #[test]
    fn silence_is_log_floor() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        let s = mel_spectrogram(&w, &cfg).unwrap();
        let want = (1e-5f64).ln() as f32;
        assert!(s.data().iter().all(|&v| v == want));
    }

    #[test]
    fn sine_peaks_at_nearest_center() {
        let cfg = MelConfig::default();
        let ex = MelExtractor::new(&cfg).unwrap();
        let s = ex.compute(&sine(1000.0, 0.5)).unwrap();
        let frames = s.shape()[3];
        let t = frames / 2;
        let col: Vec<f32> = (0..128).map(|m| s.data()[m * frames + t]).collect();
        let argmax = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let nearest = ex
            .filterbank()
            .centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn filters_are_nonnegative_contiguous_bands() {
        let bank = MelFilterbank::new(&MelConfig::default()).unwrap();
        for m in 0..bank.n_mels {
            let row = bank.row(m);
            assert!(row.iter().all(|&v| v >= 0.0));
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert!(!nz.is_empty(), "empty filter {m}");
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "gap in filter {m}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = MelConfig::default();
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        assert!(matches!(mel_spectrogram(&w, &cfg), Err(Error::Data(_))));
        let short = Waveform::new(vec![0.0; 799], SAMPLE_RATE).unwrap();
        assert!(matches!(mel_spectrogram(&short, &cfg), Err(Error::Data(_))));
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
        let bad = MelConfig {
            f_min: 9000.0,
            f_max: 8000.0,
            ..MelConfig::default()
        };
        assert!(matches!(MelExtractor::new(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn rolling_by_one_hop_shifts_columns() {
        let cfg = MelConfig::default();
        let n = 320 * 40;
        let samples: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
        let w = Waveform::new(samples.clone(), SAMPLE_RATE).unwrap();
        let rolled = Waveform::new(augment::roll(&samples, 320), SAMPLE_RATE).unwrap();
        let a = mel_spectrogram(&w, &cfg).unwrap();
        let b = mel_spectrogram(&rolled, &cfg).unwrap();
        let frames = a.shape()[3];
        for m in 0..128 {
            for t in 1..frames - 1 {
                let x = a.data()[m * frames + t - 1];
                let y = b.data()[m * frames + t];
                assert!((x - y).abs() < 1e-4, "mel {m} frame {t}: {x} vs {y}");
            }
        }
    }
}
