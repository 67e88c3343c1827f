use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-linear learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear ramp from 0 over the first `warmup` fraction, then linear decay to 0.
    WarmupLinearDecay { warmup: f64 },
    /// Warmup, constant hold, then linear decay; fractions of the total steps.
    TriStage { warmup: f64, hold: f64, decay: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::WarmupLinearDecay { warmup } if (0.0..1.0).contains(&warmup) => Ok(()),
            LrSchedule::TriStage { warmup, hold, decay }
                if [warmup, hold, decay].iter().all(|f| (0.0..=1.0).contains(f))
                    && (warmup + hold + decay - 1.0).abs() < 1e-9 =>
            {
                Ok(())
            }
            s => Err(Error::Config(format!("invalid learning-rate schedule {s:?}"))),
        }
    }

    /// Learning rate at `step` (0-based) of a run of `total` steps.
    pub fn lr(&self, step: usize, total: usize, peak: f64) -> f64 {
        if total == 0 {
            return 0.0;
        }
        let (warmup, hold) = match *self {
            LrSchedule::WarmupLinearDecay { warmup } => (warmup, 0.0),
            LrSchedule::TriStage { warmup, hold, .. } => (warmup, hold),
        };
        let w = (warmup * total as f64).round() as usize;
        let h = (hold * total as f64).round() as usize;
        let s = step.min(total);
        if s < w {
            peak * s as f64 / w as f64
        } else if s < w + h {
            peak
        } else {
            let decay = total.saturating_sub(w + h).max(1);
            peak * (total - s) as f64 / decay as f64
        }
    }
}
