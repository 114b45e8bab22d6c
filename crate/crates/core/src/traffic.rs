//! Synthetic per-region traffic: a sinusoid plus seeded Gaussian noise.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ids::RegionId;

/// Noise-free traffic mean of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub region: RegionId,
    pub base: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: u64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub noise: f64,
}

fn default_period() -> u64 {
    48
}

impl RegionProfile {
    pub fn flat(region: impl Into<RegionId>, base: f64) -> Self {
        Self {
            region: region.into(),
            base,
            amplitude: 0.0,
            period: default_period(),
            phase: 0.0,
            noise: 0.0,
        }
    }

    pub fn mean_at(&self, tick: u64) -> f64 {
        let period = self.period.max(1) as f64;
        (self.base + self.amplitude * (TAU * (tick as f64 + self.phase) / period).sin()).max(0.0)
    }
}

/// Independent RNG stream for one labelled component. Streams depend only on
/// `(seed, label)`, so adding a component never perturbs another's stream.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Debug, Clone)]
pub struct TrafficGenerator {
    regions: BTreeMap<RegionId, (RegionProfile, ChaCha8Rng)>,
    multipliers: BTreeMap<RegionId, (f64, u64)>,
}

impl TrafficGenerator {
    pub fn new(seed: u64, profiles: impl IntoIterator<Item = RegionProfile>) -> Self {
        let regions = profiles
            .into_iter()
            .map(|p| {
                let rng = substream(seed, &format!("traffic/{}", p.region));
                (p.region.clone(), (p, rng))
            })
            .collect();
        Self {
            regions,
            multipliers: BTreeMap::new(),
        }
    }

    pub fn profile(&self, region: &RegionId) -> Option<&RegionProfile> {
        self.regions.get(region).map(|(p, _)| p)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &RegionProfile> {
        self.regions.values().map(|(p, _)| p)
    }

    /// Scales a region's traffic by `factor` until (exclusive) `until_tick`.
    pub fn surge(&mut self, region: RegionId, factor: f64, until_tick: u64) {
        self.multipliers.insert(region, (factor, until_tick));
    }

    /// One sample per region for `tick`, in region order. Every region draws
    /// exactly one normal variate per tick whatever its noise level.
    pub fn sample(&mut self, tick: u64) -> Vec<(RegionId, f64)> {
        let standard = Normal::new(0.0, 1.0).expect("unit normal");
        self.regions
            .iter_mut()
            .map(|(region, (profile, rng))| {
                let z: f64 = standard.sample(rng);
                let mut value = profile.mean_at(tick) + profile.noise * z;
                if let Some((factor, until)) = self.multipliers.get(region) {
                    if tick < *until {
                        value *= factor;
                    }
                }
                (region.clone(), value.max(0.0))
            })
            .collect()
    }
}
