//! Random waveform and filterbank perturbations.

use rand::{Rng, RngExt};

use super::{MelConfig, Waveform};

/// Circular shift: `out[(i + k) mod n] = x[i]`. Negative `k` shifts left.
pub fn roll(x: &[f32], k: isize) -> Vec<f32> {
    let n = x.len() as isize;
    if n == 0 {
        return Vec::new();
    }
    let k = k.rem_euclid(n) as usize;
    let mut out = Vec::with_capacity(x.len());
    out.extend_from_slice(&x[x.len() - k..]);
    out.extend_from_slice(&x[..x.len() - k]);
    out
}

/// Scales amplitudes by `10^(db/20)`.
pub fn apply_gain(x: &[f32], db: f64) -> Vec<f32> {
    let g = 10f64.powf(db / 20.0);
    x.iter().map(|&v| (v as f64 * g) as f32).collect()
}

/// Random circular roll within `±roll_ms` and gain within `±gain_db`.
pub fn waveform_augment<R: Rng + ?Sized>(w: &Waveform, roll_ms: f64, gain_db: f64, rng: &mut R) -> Waveform {
    let max_shift = (roll_ms.abs() * w.sample_rate as f64 / 1000.0).round() as i64;
    let shift = if max_shift > 0 {
        rng.random_range(-max_shift..=max_shift) as isize
    } else {
        0
    };
    let db = if gain_db > 0.0 {
        rng.random_range(-gain_db..=gain_db)
    } else {
        0.0
    };
    let rolled = roll(&w.samples, shift);
    Waveform {
        samples: if db == 0.0 { rolled } else { apply_gain(&rolled, db) },
        sample_rate: w.sample_rate,
    }
}

/// Draws `f_min` uniformly from `[f_min, f_min + fmin_jitter]` and `f_max`
/// from `[f_max − fmax_jitter, f_max]`; the result keeps `f_min < f_max`.
pub fn perturb_mel_range<R: Rng + ?Sized>(cfg: &MelConfig, rng: &mut R) -> MelConfig {
    let mut out = cfg.clone();
    if cfg.fmin_jitter > 0.0 {
        out.f_min = cfg.f_min + rng.random_range(0.0..=cfg.fmin_jitter);
    }
    if cfg.fmax_jitter > 0.0 {
        out.f_max = cfg.f_max - rng.random_range(0.0..=cfg.fmax_jitter);
    }
    if out.f_max <= out.f_min {
        out.f_min = cfg.f_min;
        out.f_max = cfg.f_max;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn wave() -> Waveform {
        Waveform::new((0..1000).map(|i| (i as f32 * 0.01).sin()).collect(), 32_000).unwrap()
    }

    #[test]
    fn zero_roll_zero_gain_is_identity() {
        let w = wave();
        let mut rng = StdRng::seed_from_u64(0);
        assert_eq!(waveform_augment(&w, 0.0, 0.0, &mut rng), w);
    }

    #[test]
    fn six_db_doubles_amplitude() {
        let out = apply_gain(&[0.25, -0.1], 6.0206);
        assert!((out[0] - 0.5).abs() < 1e-4);
        assert!((out[1] + 0.2).abs() < 1e-4);
    }

    #[test]
    fn roll_then_unroll() {
        let w = wave();
        for k in [-1500isize, -3, 0, 7, 999, 1000, 2345] {
            assert_eq!(roll(&roll(&w.samples, k), -k), w.samples);
        }
        assert_eq!(roll(&[1.0, 2.0, 3.0], 1), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn augment_respects_limits() {
        let w = Waveform::new(vec![1.0; 64_000], 32_000).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let a = waveform_augment(&w, 125.0, 7.0, &mut rng);
            let g = a.samples[0] as f64;
            assert!(g >= 10f64.powf(-7.0 / 20.0) - 1e-6 && g <= 10f64.powf(7.0 / 20.0) + 1e-6);
        }
    }

    #[test]
    fn zero_width_perturbation_is_identity() {
        let cfg = MelConfig {
            fmin_jitter: 0.0,
            fmax_jitter: 0.0,
            ..MelConfig::default()
        };
        assert_eq!(perturb_mel_range(&cfg, &mut StdRng::seed_from_u64(1)), cfg);
    }

    #[test]
    fn perturbation_is_seeded_and_bounded() {
        let cfg = MelConfig::default();
        let a = perturb_mel_range(&cfg, &mut StdRng::seed_from_u64(9));
        let b = perturb_mel_range(&cfg, &mut StdRng::seed_from_u64(9));
        assert_eq!(a, b);
        let mut rng = StdRng::seed_from_u64(10);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..10_000 {
            let p = perturb_mel_range(&cfg, &mut rng);
            lo = lo.min(p.f_min);
            hi = hi.max(p.f_min);
            assert!(p.f_max <= 16_000.0 && p.f_max >= 14_000.0);
            p.validate().unwrap();
        }
        assert!(lo >= 0.0 && hi <= 10.0);
    }
}
