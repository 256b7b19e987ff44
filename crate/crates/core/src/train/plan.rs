use std::ops::Range;

use crate::{Error, Result};

/// How a fixed number of sample forwards is cut into caption visits and
/// optimizer steps.
///
/// Every caption visit contributes `m` forwards except at the very end,
/// where the remainder is spread so that no visit has a lone sample. Steps
/// take `n` visits each; a final lone visit is folded into the previous step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardPlan {
    pub total_forwards: u64,
    pub visits: u64,
    pub samples_per_visit: u64,
    pub visits_per_step: u64,
    pub steps: u64,
}

impl ForwardPlan {
    pub fn new(total_forwards: u64, samples_per_visit: u64, visits_per_step: u64) -> Result<Self> {
        if samples_per_visit == 0 || visits_per_step < 2 {
            return Err(Error::InvalidConfig(
                "forward plan needs m >= 1 and n >= 2".into(),
            ));
        }
        if total_forwards < 2 * samples_per_visit.max(1) {
            return Err(Error::Insufficient(format!(
                "{total_forwards} forwards cannot fill two visits of {samples_per_visit}"
            )));
        }
        if samples_per_visit == 2 && total_forwards % 2 == 1 {
            return Err(Error::InvalidConfig(
                "an odd number of forwards cannot be split into pairs".into(),
            ));
        }
        let visits = total_forwards.div_ceil(samples_per_visit);
        let mut steps = visits.div_ceil(visits_per_step);
        if steps > 1 && visits % visits_per_step == 1 {
            steps -= 1;
        }
        Ok(Self {
            total_forwards,
            visits,
            samples_per_visit,
            visits_per_step,
            steps,
        })
    }

    /// Number of samples drawn at visit `v`.
    pub fn visit_size(&self, v: u64) -> u64 {
        let m = self.samples_per_visit;
        let rem = self.total_forwards % m;
        if rem == 0 || v + 2 < self.visits {
            return m;
        }
        if v + 1 == self.visits {
            if rem == 1 {
                2
            } else {
                rem
            }
        } else if rem == 1 {
            m - 1
        } else {
            m
        }
    }

    pub fn step_visits(&self, step: u64) -> Range<u64> {
        let start = step * self.visits_per_step;
        let end = if step + 1 == self.steps {
            self.visits
        } else {
            start + self.visits_per_step
        };
        start..end
    }

    /// Forwards performed by steps `0..=step`.
    pub fn forwards_through(&self, step: u64) -> u64 {
        let end = self.step_visits(step).end;
        if end == self.visits {
            return self.total_forwards;
        }
        end * self.samples_per_visit
    }
}
