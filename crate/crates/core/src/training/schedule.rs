use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub betas: (f64, f64),
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            weight_decay: 0.05,
            adam_eps: 1e-8,
            betas: (0.9, 0.999),
            total_steps: 2000,
            warmup_fraction: 0.10,
            div_factor: 10.0,
            final_div_factor: 10.0,
            batch_size: 4,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return fail(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction));
        }
        if !(self.div_factor >= 1.0 && self.final_div_factor >= 1.0) {
            return fail("div_factor and final_div_factor must be at least 1".into());
        }
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            return fail(format!("lr_max must be finite and non-negative, got {}", self.lr_max));
        }
        if !(self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return fail("weight_decay must be non-negative and adam_eps positive".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return fail("grad_clip must be positive when set".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    pub fn lr_initial(&self) -> f64 {
        self.lr_max / self.div_factor
    }

    pub fn lr_final(&self) -> f64 {
        self.lr_initial() / self.final_div_factor
    }
}

/// Cosine interpolation from `start` (pct = 0) to `end` (pct = 1).
fn anneal_cos(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * ((std::f64::consts::PI * pct).cos() + 1.0)
}

/// One-cycle learning rate: cosine warmup to `lr_max`, then cosine decay.
pub fn lr_at_step(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} lies beyond total_steps {}",
            config.total_steps
        )));
    }
    let warmup = config.warmup_steps();
    let s = step as f64;
    if s <= warmup {
        let pct = if warmup > 0.0 { s / warmup } else { 1.0 };
        Ok(anneal_cos(config.lr_initial(), config.lr_max, pct))
    } else {
        let pct = (s - warmup) / (config.total_steps as f64 - warmup);
        Ok(anneal_cos(config.lr_max, config.lr_final(), pct))
    }
}
