//! Rolling z-score coherency check and the agent lifecycle it drives.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::acl::Lifecycle;
use crate::ids::AclId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Normal,
    Anomalous,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoherencyConfig {
    pub k_sigma: f64,
    pub window: usize,
    /// Fewer samples than this always yield `Normal`.
    pub min_history: usize,
    pub stddev_floor: f64,
    /// Consecutive anomalies that suspend an agent.
    pub suspend_after: u32,
    /// Consecutive normal verdicts that reinstate an observed agent.
    pub reinstate_after: u32,
}

impl Default for CoherencyConfig {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            window: 50,
            min_history: 10,
            stddev_floor: 1e-6,
            suspend_after: 3,
            reinstate_after: 5,
        }
    }
}

/// The last `capacity` action magnitudes of one ACL with their mean and
/// population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencyBaseline {
    pub acl_id: AclId,
    window: VecDeque<f64>,
    capacity: usize,
    mean: f64,
    stddev: f64,
}

impl CoherencyBaseline {
    pub fn new(acl_id: impl Into<AclId>, capacity: usize) -> Self {
        Self {
            acl_id: acl_id.into(),
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            mean: 0.0,
            stddev: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn stddev(&self) -> f64 {
        self.stddev
    }

    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn admit(&mut self, magnitude: f64) {
        self.window.push_back(magnitude);
        while self.window.len() > self.capacity {
            self.window.pop_front();
        }
        let n = self.window.len() as f64;
        self.mean = self.window.iter().sum::<f64>() / n;
        let var = self.window.iter().map(|x| (x - self.mean).powi(2)).sum::<f64>() / n;
        self.stddev = var.sqrt();
    }
}

/// Anomalous iff `|magnitude - mean| > k_sigma * max(stddev, floor)` once the
/// baseline holds `min_history` samples. The magnitude is admitted to the
/// baseline afterwards whatever the verdict.
pub fn coherency_check(magnitude: f64, baseline: &mut CoherencyBaseline, config: &CoherencyConfig) -> Verdict {
    let verdict = if baseline.len() < config.min_history {
        Verdict::Normal
    } else {
        let sigma = baseline.stddev().max(config.stddev_floor);
        if (magnitude - baseline.mean()).abs() > config.k_sigma * sigma {
            Verdict::Anomalous
        } else {
            Verdict::Normal
        }
    };
    baseline.admit(magnitude);
    verdict
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleTracker {
    pub state: Lifecycle,
    pub consecutive_anomalies: u32,
    pub normal_streak: u32,
}

impl Default for LifecycleTracker {
    fn default() -> Self {
        Self {
            state: Lifecycle::Active,
            consecutive_anomalies: 0,
            normal_streak: 0,
        }
    }
}

impl LifecycleTracker {
    /// Operator reinstatement; the only way out of `Suspended`.
    pub fn release(&mut self) {
        *self = Self::default();
    }
}

/// Active -> UnderObservation on an anomaly; `suspend_after` consecutive
/// anomalies -> Suspended; `reinstate_after` consecutive normals while under
/// observation -> Active. Suspended is absorbing.
pub fn update_lifecycle(tracker: &mut LifecycleTracker, verdict: Verdict, config: &CoherencyConfig) -> Lifecycle {
    match (tracker.state, verdict) {
        (Lifecycle::Suspended, _) => {}
        (Lifecycle::Active, Verdict::Normal) => {
            tracker.consecutive_anomalies = 0;
        }
        (Lifecycle::Active | Lifecycle::UnderObservation, Verdict::Anomalous) => {
            tracker.consecutive_anomalies += 1;
            tracker.normal_streak = 0;
            tracker.state = if tracker.consecutive_anomalies >= config.suspend_after {
                Lifecycle::Suspended
            } else {
                Lifecycle::UnderObservation
            };
        }
        (Lifecycle::UnderObservation, Verdict::Normal) => {
            tracker.consecutive_anomalies = 0;
            tracker.normal_streak += 1;
            if tracker.normal_streak >= config.reinstate_after {
                tracker.state = Lifecycle::Active;
                tracker.normal_streak = 0;
            }
        }
    }
    tracker.state
}
