use std::f64::consts::PI;

/// Linear warmup to `lr_max`, then cosine decay to `lr_final`.
///
/// Steps are 1-based: step `warmup_steps` is the first step at `lr_max`, and
/// step `total_steps` lands on `lr_final`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupCosine {
    pub lr_max: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn new(lr_max: f64, lr_final: f64, warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_frac * total_steps as f64).ceil() as usize).min(total_steps);
        Self {
            lr_max,
            lr_final,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr_max * step as f64 / self.warmup_steps as f64;
        }
        let decay_len = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_len == 0 {
            return self.lr_max;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay_len as f64).clamp(0.0, 1.0);
        self.lr_final + 0.5 * (self.lr_max - self.lr_final) * (1.0 + (PI * progress).cos())
    }
}
