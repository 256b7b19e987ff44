use std::f64::consts::PI;

/// Linear warmup from 0 to `peak`, then a half cosine down to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Images per batch at which the base learning rate is quoted.
pub const REFERENCE_BATCH: f64 = 512.0;

/// `base_lr × forwards_per_batch / 512`. With two views per image this is
/// the same as `base_lr × images / 256`.
pub fn peak_lr(base_lr: f64, forwards_per_batch: usize) -> f64 {
    base_lr * forwards_per_batch as f64 / REFERENCE_BATCH
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak: 0.3,
            warmup_steps: 10,
            total_steps: 110,
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.at(0), 0.0);
        assert!((s.at(1) - 0.03).abs() < 1e-15);
        assert_eq!(s.at(10), 0.3);
        assert!((s.at(60) - 0.15).abs() < 1e-15);
        assert!(s.at(110).abs() < 1e-15);
        assert!(s.at(500).abs() < 1e-15);
    }

    #[test]
    fn continuous_and_nonnegative() {
        let s = sched();
        let mut prev = s.at(0);
        for step in 1..=120 {
            let lr = s.at(step);
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= 0.3 * (PI / 100.0).max(0.1) + 1e-12);
            prev = lr;
        }
        // Boundary: the ramp's last step and the first decay step are one
        // increment apart.
        assert!((s.at(10) - s.at(9)).abs() <= 0.03 + 1e-15);
        assert!((s.at(10) - s.at(11)).abs() < 1e-3);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_steps: 0,
            total_steps: 4,
        };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_scaling() {
        assert!((peak_lr(2e-4, 96) - 2e-4 * 96.0 / 512.0).abs() < 1e-20);
        // SimCLR with 128 images (256 views) at the 256-image reference.
        assert_eq!(peak_lr(1.0, 256), 0.5);
    }
}
