//! Learning-rate and temperature schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Final learning rate as a fraction of the peak.
pub const FLOOR_FRACTION: f64 = 0.01;

/// Epoch budget: warmup, constant peak, linear rampdown, low tail. The
/// constant phase takes whatever `epochs` leaves over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub rampdown_epochs: usize,
    pub tail_epochs: usize,
    pub peak_lr: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_anneal_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 8,
            rampdown_epochs: 95,
            tail_epochs: 25,
            peak_lr: 1e-3,
            tau_start: 30.0,
            tau_end: 1.0,
            tau_anneal_epochs: 30,
        }
    }
}

impl ScheduleConfig {
    /// Downstream fine-tuning: 80 epochs, no constant phase, τ fixed at 1.
    pub fn fine_tuning(peak_lr: f64) -> Self {
        Self {
            epochs: 80,
            warmup_epochs: 10,
            rampdown_epochs: 65,
            tail_epochs: 5,
            peak_lr,
            tau_start: 1.0,
            tau_end: 1.0,
            tau_anneal_epochs: 0,
        }
    }

    /// Peak rate of a named preset.
    pub fn peak_lr_for(preset: &str) -> Option<f64> {
        match preset {
            "dymn-s" => Some(2e-3),
            "dymn-m" | "mn" => Some(1e-3),
            "dymn-l" => Some(5e-4),
            _ => None,
        }
    }

    pub fn constant_epochs(&self) -> usize {
        self.epochs
            .saturating_sub(self.warmup_epochs + self.rampdown_epochs + self.tail_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs + self.rampdown_epochs + self.tail_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup {} + rampdown {} + tail {} exceed {} epochs",
                self.warmup_epochs, self.rampdown_epochs, self.tail_epochs, self.epochs
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(self.tau_end >= 1.0 && self.tau_start >= self.tau_end) {
            return Err(Error::Config(format!(
                "need tau_start >= tau_end >= 1, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }
}

/// Learning rate at `epoch + frac`, `frac ∈ [0, 1)`.
///
/// Warmup is geometric from `0.01·peak` to `peak`; rampdown is linear from
/// `peak` to `0.01·peak`; the tail holds `0.01·peak`.
pub fn lr_at(epoch: usize, frac: f64, s: &ScheduleConfig) -> f64 {
    let p = epoch as f64 + frac.clamp(0.0, 1.0);
    let warm = s.warmup_epochs as f64;
    let ramp_start = warm + s.constant_epochs() as f64;
    let ramp = s.rampdown_epochs as f64;
    if p < warm {
        s.peak_lr * FLOOR_FRACTION.powf(1.0 - p / warm)
    } else if p < ramp_start {
        s.peak_lr
    } else if p < ramp_start + ramp {
        let r = (p - ramp_start) / ramp;
        s.peak_lr * (1.0 - (1.0 - FLOOR_FRACTION) * r)
    } else {
        s.peak_lr * FLOOR_FRACTION
    }
}

/// Kernel-attention temperature, linear from `tau_start` to `tau_end` over
/// `tau_anneal_epochs`, then constant.
pub fn tau_at(epoch: usize, s: &ScheduleConfig) -> f64 {
    if s.tau_anneal_epochs == 0 {
        return s.tau_end;
    }
    let r = epoch.min(s.tau_anneal_epochs) as f64 / s.tau_anneal_epochs as f64;
    s.tau_start - (s.tau_start - s.tau_end) * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phase_lengths_of_default() {
        let s = ScheduleConfig::default();
        assert_eq!(s.constant_epochs(), 72);
        assert_eq!(ScheduleConfig::fine_tuning(1e-4).constant_epochs(), 0);
        s.validate().unwrap();
    }

    #[test]
    fn lr_boundaries() {
        let s = ScheduleConfig::default();
        assert!((lr_at(0, 0.0, &s) - 0.01 * s.peak_lr).abs() < 1e-18);
        assert_eq!(lr_at(8, 0.0, &s), s.peak_lr);
        assert_eq!(lr_at(79, 0.99, &s), s.peak_lr);
        let mid = lr_at(80 + 47, 0.5, &s);
        assert!((mid - (s.peak_lr + 0.01 * s.peak_lr) / 2.0).abs() < 1e-15);
        assert!((lr_at(175, 0.0, &s) - 0.01 * s.peak_lr).abs() < 1e-18);
        assert_eq!(lr_at(199, 0.9, &s), 0.01 * s.peak_lr);
        // warmup is geometric: equal steps multiply by a constant factor
        let r1 = lr_at(2, 0.0, &s) / lr_at(1, 0.0, &s);
        let r2 = lr_at(6, 0.0, &s) / lr_at(5, 0.0, &s);
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn full_trace_is_monotone_after_warmup() {
        let s = ScheduleConfig::default();
        let trace: Vec<f64> = (0..200).flat_map(|e| (0..10).map(move |k| (e, k as f64 / 10.0))).map(|(e, f)| lr_at(e, f, &s)).collect();
        let w = 8 * 10;
        assert!(trace[..=w].windows(2).all(|p| p[1] > p[0]));
        assert!(trace[w..].windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn tau_points() {
        let s = ScheduleConfig::default();
        assert_eq!(tau_at(0, &s), 30.0);
        assert_eq!(tau_at(15, &s), 15.5);
        assert_eq!(tau_at(30, &s), 1.0);
        assert_eq!(tau_at(120, &s), 1.0);
        assert_eq!(tau_at(3, &ScheduleConfig::fine_tuning(1e-4)), 1.0);
    }

    #[test]
    fn inconsistent_budgets_are_rejected() {
        let s = ScheduleConfig {
            epochs: 100,
            ..ScheduleConfig::default()
        };
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn floors_hold(epoch in 0usize..400, frac in 0.0f64..1.0, peak in 1e-5f64..1e-1) {
            let s = ScheduleConfig { peak_lr: peak, ..ScheduleConfig::default() };
            let lr = lr_at(epoch, frac, &s);
            prop_assert!(lr >= 0.01 * peak * (1.0 - 1e-12));
            prop_assert!(lr <= peak * (1.0 + 1e-12));
            prop_assert!(tau_at(epoch, &s) >= 1.0);
        }
    }
}
