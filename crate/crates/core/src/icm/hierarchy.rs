//! Regional / end-to-end routing of intents and conflicts.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acl::SizeClass;
use crate::ids::RegionId;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceId {
    Regional(RegionId),
    E2e,
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstanceId::Regional(r) => write!(f, "regional:{r}"),
            InstanceId::E2e => f.write_str("e2e"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no regional instance for region `{0}`")]
pub struct UnknownRegion(pub RegionId);

/// One regional instance per region plus a single end-to-end instance that
/// processes on every `e2e_period`-th tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub regions: BTreeSet<RegionId>,
    pub e2e_period: u64,
}

impl Hierarchy {
    pub fn new(regions: impl IntoIterator<Item = RegionId>, e2e_period: u64) -> Self {
        Self {
            regions: regions.into_iter().collect(),
            e2e_period: e2e_period.max(1),
        }
    }

    pub fn instances(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.regions
            .iter()
            .cloned()
            .map(InstanceId::Regional)
            .chain(std::iter::once(InstanceId::E2e))
    }

    pub fn is_e2e_tick(&self, tick: u64) -> bool {
        tick.is_multiple_of(self.e2e_period)
    }

    /// First tick at or after `arrival` on which `instance` processes.
    pub fn processing_tick(&self, instance: &InstanceId, arrival: u64) -> u64 {
        match instance {
            InstanceId::Regional(_) => arrival,
            InstanceId::E2e => arrival.div_ceil(self.e2e_period) * self.e2e_period,
        }
    }
}

/// Size class and regions of one participant in a routed item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantScope<'a> {
    pub size: SizeClass,
    pub regions: &'a BTreeSet<RegionId>,
}

/// Items whose participants all sit in one region go to that region's
/// instance; anything Mega-sized, cross-region or region-less goes to E2E.
pub fn route(participants: &[ParticipantScope<'_>], hierarchy: &Hierarchy) -> Result<InstanceId, UnknownRegion> {
    if participants.iter().any(|p| p.size == SizeClass::Mega) {
        return Ok(InstanceId::E2e);
    }
    let regions: BTreeSet<&RegionId> = participants.iter().flat_map(|p| p.regions.iter()).collect();
    if regions.len() != 1 {
        return Ok(InstanceId::E2e);
    }
    let region = regions.into_iter().next().expect("one region");
    if !hierarchy.regions.contains(region) {
        return Err(UnknownRegion(region.clone()));
    }
    Ok(InstanceId::Regional(region.clone()))
}
