//! Corruption schedule for the multinomial forward process.
//!
//! `retention[t]` is the probability mass a token keeps on its previous
//! value at step `t` (the rest is spread uniformly over the categories).
//! `alpha_bar[t]` is the running product of retentions, with
//! `alpha_bar[0] = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest allowed final cumulative retention; the prior must be close to
/// uniform so the prior-matching term of the bound vanishes.
pub const MAX_FINAL_ALPHA_BAR: f64 = 1e-3;
const MIN_RETENTION: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `alpha_bar(t) = f(t)/f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`.
    Cosine {
        #[serde(rename = "cosine_s", default = "default_cosine_s")]
        s: f64,
    },
    /// `alpha_bar` linear from `start` at `t = 1` to `end` at `t = T`.
    Linear {
        #[serde(rename = "alpha_bar_start")]
        start: f64,
        #[serde(rename = "alpha_bar_end")]
        end: f64,
    },
}

fn default_cosine_s() -> f64 {
    0.008
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine { s: 0.008 }
    }
}

/// Schedule section of a run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::default(),
            steps: 100,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        build_schedule(self.kind, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    retention: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Build a schedule and check that its final cumulative retention is small
/// enough for the prior to be treated as uniform.
pub fn build_schedule(kind: ScheduleKind, steps: usize) -> Result<Schedule> {
    let sched = Schedule::unchecked(kind, steps)?;
    let last = sched.alpha_bar(steps);
    if last > MAX_FINAL_ALPHA_BAR {
        return Err(Error::DegenerateSchedule(last));
    }
    Ok(sched)
}

impl Schedule {
    /// Build without the final-prior check. Used for short chains in tests
    /// and exact enumeration.
    pub fn unchecked(kind: ScheduleKind, steps: usize) -> Result<Schedule> {
        if steps < 1 {
            return Err(Error::InvalidHorizon(steps));
        }
        let abar: Vec<f64> = match kind {
            ScheduleKind::Cosine { s } => {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::InvalidScheduleParams(format!(
                        "cosine offset must be positive, got {s}"
                    )));
                }
                let f = |t: usize| {
                    let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0);
                (0..=steps).map(|t| f(t) / f0).collect()
            }
            ScheduleKind::Linear { start, end } => {
                if !(0.0 < end && end < start && start <= 1.0) {
                    return Err(Error::InvalidScheduleParams(format!(
                        "linear endpoints need 0 < end < start <= 1, got start={start} end={end}"
                    )));
                }
                let mut v = vec![1.0];
                for t in 1..=steps {
                    let frac = if steps == 1 {
                        1.0
                    } else {
                        (t - 1) as f64 / (steps - 1) as f64
                    };
                    v.push(start + (end - start) * frac);
                }
                v
            }
        };
        let retention = (1..=steps)
            .map(|t| (abar[t] / abar[t - 1]).clamp(MIN_RETENTION, 1.0))
            .collect();
        Schedule::from_retention(retention)
    }

    /// Build directly from per-step retentions (1-indexed in the result).
    pub fn from_retention(retention: Vec<f64>) -> Result<Schedule> {
        if retention.is_empty() {
            return Err(Error::InvalidHorizon(0));
        }
        if let Some(b) = retention.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(Error::InvalidScheduleParams(format!(
                "retention {b} outside (0, 1]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(retention.len() + 1);
        alpha_bar.push(1.0);
        for &b in &retention {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * b);
        }
        Ok(Schedule {
            retention,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.retention.len()
    }

    /// Retention probability at step `t`, `1 <= t <= T`.
    #[inline]
    pub fn retention(&self, t: usize) -> f64 {
        self.retention[t - 1]
    }

    /// Cumulative retention at step `t`, `0 <= t <= T`.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn retentions(&self) -> &[f64] {
        &self.retention
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}
