//! Common interface for history-conditioned intensity models.
//!
//! A model maps a sequence prefix to the intensities that hold until the next
//! event. Likelihood evaluation, prediction and QQ analysis are written against
//! this trait so the neural model, the classic Hawkes baseline and test stubs
//! go through the same code paths.

use crate::data::Event;
use crate::error::Result;

/// Type-wise intensities on one inter-event interval `(start, next event]`.
pub trait IntervalIntensity {
    fn num_types(&self) -> usize;

    /// Time of the last observed event.
    fn start(&self) -> f64;

    /// λ_u(t) for `t ≥ start`.
    fn intensity(&self, u: usize, t: f64) -> f64;

    fn total(&self, t: f64) -> f64 {
        (0..self.num_types()).map(|u| self.intensity(u, t)).sum()
    }
}

pub trait IntensityModel: Sync {
    type Interval: IntervalIntensity + Send;

    fn num_types(&self) -> usize;

    /// One interval per event: element `i` conditions on `events[..=i]` and is
    /// valid from `events[i].time` to the next event (or the horizon).
    fn intervals(&self, events: &[Event]) -> Result<Vec<Self::Interval>>;
}

/// History-independent rates. Reference model for integration and prediction tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantRates {
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantInterval {
    rates: Vec<f64>,
    start: f64,
}

impl IntervalIntensity for ConstantInterval {
    fn num_types(&self) -> usize {
        self.rates.len()
    }

    fn start(&self) -> f64 {
        self.start
    }

    fn intensity(&self, u: usize, _t: f64) -> f64 {
        self.rates[u]
    }
}

impl IntensityModel for ConstantRates {
    type Interval = ConstantInterval;

    fn num_types(&self) -> usize {
        self.rates.len()
    }

    fn intervals(&self, events: &[Event]) -> Result<Vec<ConstantInterval>> {
        Ok(events
            .iter()
            .map(|e| ConstantInterval {
                rates: self.rates.clone(),
                start: e.time,
            })
            .collect())
    }
}
