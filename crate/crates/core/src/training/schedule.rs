use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub pct_start: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            pct_start: 0.25,
            div_start: 25.0,
            div_final: 1e4,
        }
    }
}

fn cosine(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos()) / 2.0
}

/// One-cycle learning rate at `step` of `total_steps`: a cosine warm-up
/// from `lr_max / div_start` to `lr_max` over the first `pct_start` of the
/// run, then cosine annealing to `lr_max / div_final` at `step == total_steps`.
pub fn one_cycle_lr(step: usize, total_steps: usize, lr_max: f64, sched: OneCycle) -> f64 {
    let start = lr_max / sched.div_start;
    let end = lr_max / sched.div_final;
    if total_steps == 0 {
        return start;
    }
    let peak = sched.pct_start * total_steps as f64;
    let s = step.min(total_steps) as f64;
    if s < peak {
        cosine(start, lr_max, s / peak)
    } else {
        let rest = total_steps as f64 - peak;
        if rest <= 0.0 {
            return lr_max;
        }
        cosine(lr_max, end, (s - peak) / rest)
    }
}
