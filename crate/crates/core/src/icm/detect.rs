//! Conflict detection and arbitration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::acl::{Action, ActionIntent};
use crate::cluster::{tolerates, ClusterState, Pod, PriorityLevel, ResourceVector, Toleration};
use crate::ids::{AclId, NodeId};
use crate::scheduler::{filter_nodes, score_nodes};

use super::{ConflictKind, ConflictRecord, InstanceId, IntentId, Resolution};

/// What one intent asks of one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub intent: IntentId,
    pub acl: AclId,
    pub node: NodeId,
    pub demand: ResourceVector,
    /// Adds load or power, as opposed to releasing it.
    pub acquire: bool,
    /// The claiming pod tolerates the node's hard taints.
    pub tolerated: bool,
}

fn probe_pod(acl: &AclId, request: ResourceVector, preferred: Option<&NodeId>, priority: &PriorityLevel) -> Pod {
    let mut pod = Pod::new("probe", acl.clone(), request, priority.clone()).with_toleration(Toleration::all(acl.as_str()));
    pod.preferred_node = preferred.cloned();
    pod
}

/// The node a new pod would land on: its preferred node, else the first
/// scored node with room, else the first scored node.
fn claimed_node(pod: &Pod, state: &ClusterState) -> Option<NodeId> {
    if let Some(n) = &pod.preferred_node {
        if state.nodes.contains_key(n) {
            return Some(n.clone());
        }
    }
    let ranked = score_nodes(pod, &filter_nodes(pod, state), state);
    ranked
        .iter()
        .find(|n| state.fits(pod, n).unwrap_or(false))
        .or_else(|| ranked.first())
        .cloned()
}

pub fn claims_for(id: IntentId, intent: &ActionIntent, state: &ClusterState, priority: &PriorityLevel) -> Vec<Claim> {
    let acl = &intent.acl_id;
    let claim = |node: NodeId, demand, acquire, tolerated| Claim {
        intent: id,
        acl: acl.clone(),
        node,
        demand,
        acquire,
        tolerated,
    };
    let pod_claim = |request: ResourceVector, preferred: Option<&NodeId>| {
        let pod = probe_pod(acl, request, preferred, priority);
        claimed_node(&pod, state).map(|n| {
            let ok = tolerates(&pod, &state.nodes[&n]);
            claim(n, request, true, ok)
        })
    };
    match &intent.action {
        Action::ScaleUp(spec) => pod_claim(spec.request, spec.preferred_node.as_ref()).into_iter().collect(),
        Action::Instantiate(chain) => chain
            .iter()
            .filter_map(|spec| pod_claim(spec.request, spec.preferred_node.as_ref()))
            .collect(),
        Action::ScaleDown(p) | Action::Terminate(p) => state
            .pods
            .get(p)
            .and_then(|pod| pod.bound_node().map(|n| claim(n.clone(), pod.request, false, true)))
            .into_iter()
            .collect(),
        Action::PowerOff(n) if state.nodes.contains_key(n) => vec![claim(n.clone(), ResourceVector::ZERO, false, true)],
        Action::PowerOn(n) if state.nodes.contains_key(n) => vec![claim(n.clone(), ResourceVector::ZERO, true, true)],
        Action::PowerOff(_) | Action::PowerOn(_) => Vec::new(),
    }
}

fn node_contended(claims: &[&Claim], free: ResourceVector) -> bool {
    let acquirers: BTreeSet<&AclId> = claims.iter().filter(|c| c.acquire).map(|c| &c.acl).collect();
    let releasers: BTreeSet<&AclId> = claims.iter().filter(|c| !c.acquire).map(|c| &c.acl).collect();
    let all: BTreeSet<&AclId> = acquirers.union(&releasers).copied().collect();
    if all.len() < 2 {
        return false;
    }
    let demand: ResourceVector = claims.iter().filter(|c| c.acquire).map(|c| c.demand).sum();
    let over_capacity = acquirers.len() >= 2 && !demand.fits_within(&free);
    let taint_split = {
        let ok: BTreeSet<&AclId> = claims.iter().filter(|c| c.acquire && c.tolerated).map(|c| &c.acl).collect();
        let blocked: BTreeSet<&AclId> = claims.iter().filter(|c| c.acquire && !c.tolerated).map(|c| &c.acl).collect();
        !ok.is_empty() && !blocked.is_empty() && ok.union(&blocked).count() >= 2
    };
    let opposing = !acquirers.is_empty() && !releasers.is_empty();
    over_capacity || taint_split || opposing
}

fn find(parent: &mut BTreeMap<IntentId, IntentId>, x: IntentId) -> IntentId {
    let p = parent[&x];
    if p == x {
        return x;
    }
    let root = find(parent, p);
    parent.insert(x, root);
    root
}

/// One `ResourceContention` record per maximal group of intents linked by
/// contended nodes. Only claims on `nodes` (all nodes when `None`) count.
pub fn detect_resource_conflicts(
    intents: &[(IntentId, &ActionIntent)],
    state: &ClusterState,
    priorities: &BTreeMap<AclId, PriorityLevel>,
    nodes: Option<&BTreeSet<NodeId>>,
    tick: u64,
    instance: &InstanceId,
) -> Vec<ConflictRecord> {
    let fallback = PriorityLevel::new("unknown", 0, false);
    let claims: Vec<Claim> = intents
        .iter()
        .flat_map(|(id, intent)| claims_for(*id, intent, state, priorities.get(&intent.acl_id).unwrap_or(&fallback)))
        .filter(|c| nodes.is_none_or(|set| set.contains(&c.node)))
        .collect();
    let mut by_node: BTreeMap<&NodeId, Vec<&Claim>> = BTreeMap::new();
    for c in &claims {
        by_node.entry(&c.node).or_default().push(c);
    }
    let mut parent: BTreeMap<IntentId, IntentId> = BTreeMap::new();
    let mut hot_nodes: BTreeMap<IntentId, BTreeSet<NodeId>> = BTreeMap::new();
    for (node, group) in &by_node {
        let free = state.free_capacity(node).unwrap_or(ResourceVector::ZERO);
        if !node_contended(group, free) {
            continue;
        }
        for c in group {
            parent.entry(c.intent).or_insert(c.intent);
            hot_nodes.entry(c.intent).or_default().insert((*node).clone());
        }
        let first = group[0].intent;
        for c in &group[1..] {
            let (a, b) = (find(&mut parent, first), find(&mut parent, c.intent));
            if a != b {
                parent.insert(a.max(b), a.min(b));
            }
        }
    }
    let acl_of: BTreeMap<IntentId, &AclId> = intents.iter().map(|(id, i)| (*id, &i.acl_id)).collect();
    let members: Vec<IntentId> = parent.keys().copied().collect();
    let mut groups: BTreeMap<IntentId, ConflictRecord> = BTreeMap::new();
    for id in members {
        let root = find(&mut parent, id);
        let rec = groups.entry(root).or_insert_with(|| ConflictRecord {
            tick,
            kind: ConflictKind::ResourceContention,
            instance: instance.clone(),
            participants: BTreeSet::new(),
            targets: BTreeSet::new(),
            intents: BTreeSet::new(),
            resolution: None,
        });
        rec.participants.insert(acl_of[&id].clone());
        rec.targets.extend(hot_nodes[&id].iter().map(|n| n.to_string()));
        rec.intents.insert(id);
    }
    groups.into_values().filter(|r| r.participants.len() >= 2).collect()
}

/// An admitted action that set a binary state on a target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToggleEntry {
    pub tick: u64,
    pub acl: AclId,
    pub target: String,
    pub on: bool,
}

/// The binary target an intent sets, if any: `power:<node>` for power
/// actions and `scale:<node>` for scaling.
pub fn toggle_of(id: IntentId, intent: &ActionIntent, state: &ClusterState, priority: &PriorityLevel) -> Option<(String, bool)> {
    match &intent.action {
        Action::PowerOff(n) => Some((format!("power:{n}"), false)),
        Action::PowerOn(n) => Some((format!("power:{n}"), true)),
        Action::ScaleUp(_) | Action::ScaleDown(_) => {
            let claim = claims_for(id, intent, state, priority).into_iter().next()?;
            Some((format!("scale:{}", claim.node), claim.acquire))
        }
        _ => None,
    }
}

/// An `Interference` record for every target toggled at least `threshold`
/// times in the last `window` ticks (ending at `now`) by two or more ACLs.
/// An entry is a toggle when its state differs from the previous entry for
/// the same target; the first entry always counts.
pub fn detect_interference(history: &[ToggleEntry], now: u64, window: u64, threshold: usize) -> Vec<ConflictRecord> {
    let oldest = (now + 1).saturating_sub(window);
    let mut by_target: BTreeMap<&str, Vec<&ToggleEntry>> = BTreeMap::new();
    for e in history {
        by_target.entry(e.target.as_str()).or_default().push(e);
    }
    let mut out = Vec::new();
    for (target, entries) in by_target {
        let mut prev: Option<bool> = None;
        let mut toggles: Vec<&ToggleEntry> = Vec::new();
        for e in entries {
            if prev != Some(e.on) {
                toggles.push(e);
            }
            prev = Some(e.on);
        }
        let recent: Vec<&&ToggleEntry> = toggles.iter().filter(|e| e.tick >= oldest && e.tick <= now).collect();
        let acls: BTreeSet<AclId> = recent.iter().map(|e| e.acl.clone()).collect();
        if recent.len() >= threshold && acls.len() >= 2 {
            out.push(ConflictRecord {
                tick: now,
                kind: ConflictKind::Interference,
                instance: InstanceId::E2e,
                participants: acls,
                targets: [target.to_owned()].into(),
                intents: BTreeSet::new(),
                resolution: None,
            });
        }
    }
    out
}

/// Contention goes to the highest priority value (ties: smallest ACL id);
/// interference freezes the lowest (ties: largest ACL id) until
/// `tick + cooldown`.
pub fn resolve(conflict: &ConflictRecord, priorities: &BTreeMap<AclId, i64>, tick: u64, cooldown: u64) -> ConflictRecord {
    let value = |a: &AclId| priorities.get(a).copied().unwrap_or(0);
    let mut out = conflict.clone();
    out.resolution = match conflict.kind {
        ConflictKind::ResourceContention => conflict
            .participants
            .iter()
            .max_by(|a, b| value(a).cmp(&value(b)).then_with(|| b.cmp(a)))
            .map(|w| Resolution::ArbitratedFor(w.clone())),
        ConflictKind::Interference => conflict
            .participants
            .iter()
            .min_by(|a, b| value(a).cmp(&value(b)).then_with(|| b.cmp(a)))
            .map(|l| Resolution::Frozen {
                acl: l.clone(),
                until: tick + cooldown,
            }),
    };
    out
}
