use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("total steps {total} is less than warmup steps {warmup}")]
    TotalBeforeWarmup { warmup: u64, total: u64 },
}

/// Learning-rate schedule: a constant rate, or linear warmup followed by
/// linear (power 1) decay to an end rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Fixed {
        rate: f64,
    },
    PolynomialDecay {
        peak: f64,
        warmup_steps: u64,
        total_steps: u64,
        end_rate: f64,
    },
}

impl Schedule {
    pub fn fixed(rate: f64) -> Schedule {
        Schedule::Fixed { rate }
    }

    pub fn polynomial(
        peak: f64,
        warmup_steps: u64,
        total_steps: u64,
        end_rate: f64,
    ) -> Result<Schedule, ScheduleError> {
        if total_steps < warmup_steps {
            return Err(ScheduleError::TotalBeforeWarmup {
                warmup: warmup_steps,
                total: total_steps,
            });
        }
        Ok(Schedule::PolynomialDecay {
            peak,
            warmup_steps,
            total_steps,
            end_rate,
        })
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        match *self {
            Schedule::Fixed { .. } => Ok(()),
            Schedule::PolynomialDecay {
                warmup_steps,
                total_steps,
                ..
            } => {
                if total_steps < warmup_steps {
                    Err(ScheduleError::TotalBeforeWarmup {
                        warmup: warmup_steps,
                        total: total_steps,
                    })
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn rate_at(&self, step: u64) -> f64 {
        match *self {
            Schedule::Fixed { rate } => rate,
            Schedule::PolynomialDecay {
                peak,
                warmup_steps,
                total_steps,
                end_rate,
            } => {
                if step < warmup_steps {
                    peak * step as f64 / warmup_steps as f64
                } else if step >= total_steps {
                    end_rate
                } else {
                    let span = (total_steps - warmup_steps) as f64;
                    let done = (step - warmup_steps) as f64;
                    peak + (end_rate - peak) * done / span
                }
            }
        }
    }
}
