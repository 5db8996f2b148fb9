//! Progressive sparsity schedule and the prune/adapt event calendar.
//!
//! Events at step `s` fire after the `s`-th training step has completed.
//! Prune events fall on multiples of the prune interval until the target
//! is reached; adapt events fall on multiples of the adapt interval that
//! are not prune steps.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the prune portion is applied at each prune event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PortionMode {
    /// Prune `p` of the currently surviving weights: `1 - (1-s0)(1-p)^k`.
    #[default]
    Remaining,
    /// Raise sparsity by `p` per event: `s0 + k p`.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Adapt,
    Prune,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Adapt => "adapt",
            EventKind::Prune => "prune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEvent {
    pub step: u64,
    pub kind: EventKind,
    /// Sparsity demanded by a prune event, or held by an adapt event.
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySchedule {
    pub target_sparsity: f64,
    pub start_sparsity: f64,
    /// Steps between prune events (T).
    pub prune_interval: u64,
    /// Steps between adapt events (n).
    pub adapt_interval: u64,
    /// Prune portion (p).
    pub prune_portion: f64,
    pub total_steps: u64,
    pub portion_mode: PortionMode,
    /// Whether adapt events are emitted at all.
    pub adaptive: bool,
    /// Keep adapting after the target sparsity has been reached.
    pub adapt_after_target: bool,
}

impl SparsitySchedule {
    /// Schedule with prune interval at 8% of training, adapt interval 100 and
    /// prune portion 20%, starting dense.
    pub fn new(total_steps: u64, target_sparsity: f64) -> Self {
        Self {
            target_sparsity,
            start_sparsity: 0.0,
            prune_interval: ((total_steps as f64 * 0.08).round() as u64).max(1),
            adapt_interval: 100,
            prune_portion: 0.2,
            total_steps,
            portion_mode: PortionMode::Remaining,
            adaptive: false,
            adapt_after_target: true,
        }
    }

    pub fn adaptive(mut self, on: bool) -> Self {
        self.adaptive = on;
        self
    }

    pub fn starting_at(mut self, sparsity: f64) -> Self {
        self.start_sparsity = sparsity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schedule(m));
        if !(self.target_sparsity.is_finite() && (0.0..1.0).contains(&self.target_sparsity)) {
            return bad(format!("target sparsity {} is outside [0, 1)", self.target_sparsity));
        }
        if !(self.start_sparsity.is_finite()
            && self.start_sparsity >= 0.0
            && self.start_sparsity <= self.target_sparsity)
        {
            return bad(format!(
                "start sparsity {} must lie in [0, target = {}]",
                self.start_sparsity, self.target_sparsity
            ));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.prune_interval == 0 {
            return bad("prune interval must be positive".into());
        }
        if !(self.prune_portion.is_finite() && self.prune_portion > 0.0 && self.prune_portion < 1.0) {
            return bad(format!("prune portion {} is outside (0, 1)", self.prune_portion));
        }
        if self.adaptive && !(self.adapt_interval > 0 && self.adapt_interval < self.prune_interval) {
            return bad(format!(
                "adapt interval {} must be positive and below the prune interval {}",
                self.adapt_interval, self.prune_interval
            ));
        }
        let needed = self.num_prune_events();
        if needed * self.prune_interval > self.total_steps {
            return bad(format!(
                "{needed} prune events every {} steps do not fit in {} steps",
                self.prune_interval, self.total_steps
            ));
        }
        Ok(())
    }

    /// Sparsity demanded by the `k`-th prune event (`k = 0` is the start).
    pub fn demanded_sparsity(&self, k: u64) -> f64 {
        if k == 0 {
            return self.start_sparsity;
        }
        let raw = match self.portion_mode {
            PortionMode::Remaining => {
                1.0 - (1.0 - self.start_sparsity) * (1.0 - self.prune_portion).powi(k as i32)
            }
            PortionMode::Absolute => self.start_sparsity + k as f64 * self.prune_portion,
        };
        if raw >= self.target_sparsity - 1e-12 {
            self.target_sparsity
        } else {
            // Strip float noise so 1 - 0.8 reports as 0.2.
            (raw * 1e12).round() / 1e12
        }
    }

    /// Number of prune events needed to reach the target.
    pub fn num_prune_events(&self) -> u64 {
        if self.start_sparsity >= self.target_sparsity {
            return 0;
        }
        let mut k = 0;
        while self.demanded_sparsity(k) < self.target_sparsity {
            k += 1;
            if k > 10_000 {
                break;
            }
        }
        k
    }

    /// The full, step-ordered event calendar.
    pub fn events(&self) -> Result<Vec<ScheduleEvent>> {
        self.validate()?;
        let t = self.prune_interval;
        let k_max = self.num_prune_events();
        let mut events: Vec<ScheduleEvent> = (1..=k_max)
            .map(|k| ScheduleEvent {
                step: k * t,
                kind: EventKind::Prune,
                sparsity: self.demanded_sparsity(k),
            })
            .collect();

        if self.adaptive {
            let n = self.adapt_interval;
            let last_prune = k_max * t;
            // Nothing to adapt until some mask exists.
            let first_allowed = if self.start_sparsity > 0.0 {
                1
            } else if k_max > 0 {
                t + 1
            } else {
                u64::MAX
            };
            let mut s = n;
            while s <= self.total_steps {
                let is_prune = s % t == 0 && s / t <= k_max;
                let in_window =
                    s >= first_allowed && (self.adapt_after_target || s < last_prune);
                if !is_prune && in_window {
                    let done = (s / t).min(k_max);
                    events.push(ScheduleEvent {
                        step: s,
                        kind: EventKind::Adapt,
                        sparsity: self.demanded_sparsity(done),
                    });
                }
                s += n;
            }
            events.sort_by_key(|e| e.step);
        }
        Ok(events)
    }
}

/// Dumps an event calendar as CSV (`step,kind,sparsity`).
pub fn write_events_csv<W: Write>(events: &[ScheduleEvent], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "kind", "sparsity"])?;
    for e in events {
        out.write_record([e.step.to_string(), e.kind.to_string(), e.sparsity.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
