//! Trust-gated exchange of datasets and models between ACLs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acl::Lifecycle;
use crate::ids::AclId;
use crate::traffic::RegionProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtifactId(pub u64);

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "artifact-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArtifactKind {
    Dataset,
    Model,
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArtifactPayload {
    /// Traffic profiles the source learned, and how much of the forecast gap
    /// the receiver may close with them.
    Model { profiles: Vec<RegionProfile>, bonus: f64 },
    Dataset { sample_count: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeArtifact {
    pub id: ArtifactId,
    pub source: AclId,
    pub payload: ArtifactPayload,
}

impl KnowledgeArtifact {
    pub fn kind(&self) -> ArtifactKind {
        match self.payload {
            ArtifactPayload::Model { .. } => ArtifactKind::Model,
            ArtifactPayload::Dataset { .. } => ArtifactKind::Dataset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeRequest {
    pub source: AclId,
    pub target: AclId,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grant {
    pub artifact: ArtifactId,
    pub source: AclId,
    pub target: AclId,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenialReason {
    NotTrusted,
    SourceSuspended,
}

impl fmt::Display for DenialReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExchangeOutcome {
    Granted(Grant),
    Denied(DenialReason),
}

/// The ACLs allowed to receive the owner's datasets or models.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustList {
    pub owner: AclId,
    allowed: BTreeSet<(AclId, ArtifactKind)>,
}

impl TrustList {
    /// Entries naming the owner itself are dropped.
    pub fn new(owner: impl Into<AclId>, allowed: impl IntoIterator<Item = (AclId, ArtifactKind)>) -> Self {
        let owner = owner.into();
        let allowed = allowed.into_iter().filter(|(acl, _)| *acl != owner).collect();
        Self { owner, allowed }
    }

    pub fn allows(&self, target: &AclId, kind: ArtifactKind) -> bool {
        self.allowed.contains(&(target.clone(), kind))
    }

    pub fn allow(&mut self, target: AclId, kind: ArtifactKind) {
        if target != self.owner {
            self.allowed.insert((target, kind));
        }
    }

    pub fn revoke(&mut self, target: &AclId, kind: ArtifactKind) {
        self.allowed.remove(&(target.clone(), kind));
    }

    pub fn entries(&self) -> impl Iterator<Item = &(AclId, ArtifactKind)> {
        self.allowed.iter()
    }
}

/// Grant iff the target is on the source's trust list for `kind` and the
/// source is not suspended.
pub fn broker_exchange(
    request: &ExchangeRequest,
    trust_lists: &BTreeMap<AclId, TrustList>,
    source_lifecycle: Lifecycle,
    artifact: ArtifactId,
) -> ExchangeOutcome {
    let trusted = request.source != request.target
        && trust_lists
            .get(&request.source)
            .is_some_and(|t| t.allows(&request.target, request.kind));
    if !trusted {
        return ExchangeOutcome::Denied(DenialReason::NotTrusted);
    }
    if source_lifecycle == Lifecycle::Suspended {
        return ExchangeOutcome::Denied(DenialReason::SourceSuspended);
    }
    ExchangeOutcome::Granted(Grant {
        artifact,
        source: request.source.clone(),
        target: request.target.clone(),
        kind: request.kind,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("grant for {0} is unknown or already redeemed")]
pub struct RedeemError(pub ArtifactId);

/// Issues artifact ids and tracks outstanding grants; each grant can be
/// redeemed once.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBroker {
    pub trust_lists: BTreeMap<AclId, TrustList>,
    next_artifact: u64,
    outstanding: BTreeMap<ArtifactId, Grant>,
}

impl KnowledgeBroker {
    pub fn new(trust_lists: BTreeMap<AclId, TrustList>) -> Self {
        Self {
            trust_lists,
            ..Default::default()
        }
    }

    pub fn request(&mut self, request: &ExchangeRequest, source_lifecycle: Lifecycle) -> ExchangeOutcome {
        let id = ArtifactId(self.next_artifact);
        let outcome = broker_exchange(request, &self.trust_lists, source_lifecycle, id);
        if let ExchangeOutcome::Granted(grant) = &outcome {
            self.next_artifact += 1;
            self.outstanding.insert(id, grant.clone());
        }
        outcome
    }

    pub fn redeem(&mut self, grant: &Grant) -> Result<(), RedeemError> {
        match self.outstanding.get(&grant.artifact) {
            Some(g) if g == grant => {
                self.outstanding.remove(&grant.artifact);
                Ok(())
            }
            _ => Err(RedeemError(grant.artifact)),
        }
    }
}
