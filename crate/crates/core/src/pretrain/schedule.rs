/// `end + (start − end)·(1 + cos(π·step/total_steps))/2`; `total_steps = 0`
/// yields `end`.
pub fn cosine_schedule(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if total_steps == 0 {
        return end;
    }
    if step >= total_steps {
        return end;
    }
    if step == 0 {
        return start;
    }
    let t = step as f64 / total_steps as f64;
    end + (start - end) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Linear warmup from 0 over `warmup_steps`, then cosine from `peak` to
/// `min_lr`, reaching `min_lr` at the last step (`total_steps − 1`).
pub fn warmup_cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, peak: f64, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup_steps);
    cosine_schedule(step - warmup_steps, span, peak, min_lr)
}

/// Linear ramp from `start` to `end` over `warmup_epochs`, constant after.
pub fn linear_warmup(epoch: u64, warmup_epochs: u64, start: f64, end: f64) -> f64 {
    if warmup_epochs == 0 || epoch >= warmup_epochs {
        return end;
    }
    start + (end - start) * epoch as f64 / warmup_epochs as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_schedule(0, 100, 0.992, 1.0), 0.992);
        assert_eq!(cosine_schedule(100, 100, 0.992, 1.0), 1.0);
        assert!((cosine_schedule(50, 100, 2.0, 4.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lr_warmup_then_decay() {
        let total = 100;
        assert_eq!(warmup_cosine_lr(0, total, 10, 2e-3, 1e-6), 0.0);
        assert_eq!(warmup_cosine_lr(10, total, 10, 2e-3, 1e-6), 2e-3);
        assert_eq!(warmup_cosine_lr(99, total, 10, 2e-3, 1e-6), 1e-6);
        assert!(warmup_cosine_lr(50, total, 10, 2e-3, 1e-6) < 2e-3);
    }

    #[test]
    fn teacher_temp_ramp() {
        assert_eq!(linear_warmup(0, 30, 0.04, 0.07), 0.04);
        assert_eq!(linear_warmup(30, 30, 0.04, 0.07), 0.07);
        assert!((linear_warmup(15, 30, 0.04, 0.07) - 0.055).abs() < 1e-12);
    }
}
