//! Linear warmup followed by cosine annealing.

/// Learning rate per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Ramp `0 → base_lr` over the warmup, then `base_lr·½(1 + cos πt)` with
    /// `t` the post-warmup progress.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = Schedule::new(1e-3, 100, 1000);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(100), 1e-3);
        assert!(s.lr_at(1000) <= 1e-9 * 1e-3);
        assert_eq!(s.lr_at(50), 0.5e-3);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = Schedule::new(1e-3, 100, 1000);
        assert!((s.lr_at(99) - s.lr_at(100)).abs() <= 1e-3 / 100.0 + 1e-15);
        assert!((s.lr_at(101) - s.lr_at(100)).abs() < 1e-7);
    }

    #[test]
    fn monotone_decay_after_warmup() {
        let s = Schedule::new(1.0, 10, 200);
        for step in 10..200 {
            assert!(s.lr_at(step + 1) <= s.lr_at(step));
        }
    }
}
