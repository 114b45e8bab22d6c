//! Per-ACL scheduler units and the coordinator that drains them.
//!
//! A scheduling round is a pure function of `(state, queues)`: NoExecute
//! enforcement first, then every queue is drained in descending priority
//! order. Preemption victims are requeued with their owner and get their turn
//! later in the same round.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, VecDeque};

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{tolerates, ClusterState, Pod, PodPhase, PriorityLevel, ResourceVector, TaintEffect};
use crate::ids::{AclId, NodeId, PodId};

pub const UNSCHEDULABLE: &str = "unschedulable";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerUnit {
    pub acl_id: AclId,
    pub priority: PriorityLevel,
    pub queue: VecDeque<PodId>,
}

impl SchedulerUnit {
    pub fn new(acl_id: impl Into<AclId>, priority: PriorityLevel) -> Self {
        Self {
            acl_id: acl_id.into(),
            priority,
            queue: VecDeque::new(),
        }
    }

    /// Drain order: higher priority value first, then ACL id.
    fn drain_key(&self) -> (Reverse<i64>, &AclId) {
        (Reverse(self.priority.value), &self.acl_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Bound {
        pod: PodId,
        node: NodeId,
    },
    Preempt {
        pod: PodId,
        node: NodeId,
        victims: BTreeSet<PodId>,
    },
    Pending {
        pod: PodId,
        reason: String,
    },
}

impl Decision {
    pub fn pod(&self) -> &PodId {
        match self {
            Decision::Bound { pod, .. } | Decision::Preempt { pod, .. } | Decision::Pending { pod, .. } => pod,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvictionCause {
    NoExecute,
    PreemptedBy(PodId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundEvent {
    Evicted {
        pod: PodId,
        node: NodeId,
        cause: EvictionCause,
    },
    Decided(Decision),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub state: ClusterState,
    pub events: Vec<RoundEvent>,
}

impl RoundOutcome {
    pub fn decisions(&self) -> Vec<Decision> {
        self.events
            .iter()
            .filter_map(|e| match e {
                RoundEvent::Decided(d) => Some(d.clone()),
                RoundEvent::Evicted { .. } => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no set of lower-priority pods on `{node}` frees enough capacity for `{pod}`")]
pub struct NoVictimSet {
    pub pod: PodId,
    pub node: NodeId,
}

/// Nodes whose hard taints the pod tolerates. Capacity is not checked here.
pub fn filter_nodes(pod: &Pod, state: &ClusterState) -> BTreeSet<NodeId> {
    state
        .nodes
        .values()
        .filter(|n| tolerates(pod, n))
        .map(|n| n.id.clone())
        .collect()
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct NodeRank {
    not_preferred: bool,
    not_priority_host: bool,
    foreign_prefer_no_schedule: bool,
    free_memory: Reverse<u64>,
    free_cpu: Reverse<u64>,
}

fn rank(pod: &Pod, node_id: &NodeId, state: &ClusterState) -> NodeRank {
    let node = &state.nodes[node_id];
    let free = state.free_capacity(node_id).unwrap_or(ResourceVector::ZERO);
    NodeRank {
        not_preferred: pod.preferred_node.as_ref() != Some(node_id),
        not_priority_host: !node.taints.iter().any(|t| pod.tolerates_taint(t)),
        foreign_prefer_no_schedule: node
            .taints
            .iter()
            .any(|t| t.effect == TaintEffect::PreferNoSchedule && !pod.tolerates_taint(t)),
        free_memory: Reverse(free.memory_mib),
        free_cpu: Reverse(free.cpu_millicores),
    }
}

/// Orders `feasible` best-first: the pod's preferred node, then nodes that
/// carry a taint the pod tolerates (priority hosts for its ACL), then nodes
/// without foreign `PreferNoSchedule` taints, then larger free memory and
/// CPU, then node id.
pub fn score_nodes(pod: &Pod, feasible: &BTreeSet<NodeId>, state: &ClusterState) -> Vec<NodeId> {
    feasible
        .iter()
        .filter(|n| state.nodes.contains_key(*n))
        .map(|n| (rank(pod, n, state), n))
        .sorted_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, n)| n.clone())
        .collect()
}

/// Minimal set of strictly-lower-priority pods on `node` whose removal lets
/// `pod` fit. Minimal by (count, summed priority values, sorted pod ids).
pub fn select_preemption_victims(
    pod: &Pod,
    node: &NodeId,
    state: &ClusterState,
) -> Result<BTreeSet<PodId>, NoVictimSet> {
    let no_set = || NoVictimSet {
        pod: pod.id.clone(),
        node: node.clone(),
    };
    let free = state.free_capacity(node).map_err(|_| no_set())?;
    if pod.request.fits_within(&free) {
        return Ok(BTreeSet::new());
    }
    if !pod.priority.preemption_enabled {
        return Err(no_set());
    }
    let candidates: Vec<&Pod> = state
        .pods_on(node)
        .filter(|p| p.priority.value < pod.priority.value)
        .collect();
    let all: ResourceVector = candidates.iter().map(|p| p.request).sum();
    if !pod.request.fits_within(&(free + all)) {
        return Err(no_set());
    }
    for k in 1..=candidates.len() {
        let best = candidates
            .iter()
            .combinations(k)
            .filter(|set| {
                let freed: ResourceVector = set.iter().map(|p| p.request).sum();
                pod.request.fits_within(&(free + freed))
            })
            .min_by(|a, b| victim_order(a, b));
        if let Some(set) = best {
            return Ok(set.into_iter().map(|p| p.id.clone()).collect());
        }
    }
    Err(no_set())
}

fn victim_order(a: &[&&Pod], b: &[&&Pod]) -> Ordering {
    let sum = |s: &[&&Pod]| s.iter().map(|p| p.priority.value).sum::<i64>();
    let ids = |s: &[&&Pod]| s.iter().map(|p| p.id.clone()).sorted().collect::<Vec<_>>();
    sum(a).cmp(&sum(b)).then_with(|| ids(a).cmp(&ids(b)))
}

/// First score-ordered node that fits; otherwise, if the pod may preempt, the
/// first score-ordered node with a victim set; otherwise pending.
pub fn schedule(pod: &Pod, state: &ClusterState) -> Decision {
    let order = score_nodes(pod, &filter_nodes(pod, state), state);
    if let Some(node) = order
        .iter()
        .find(|n| state.fits(pod, n).unwrap_or(false))
    {
        return Decision::Bound {
            pod: pod.id.clone(),
            node: node.clone(),
        };
    }
    if pod.priority.preemption_enabled {
        for node in &order {
            if let Ok(victims) = select_preemption_victims(pod, node, state) {
                return Decision::Preempt {
                    pod: pod.id.clone(),
                    node: node.clone(),
                    victims,
                };
            }
        }
    }
    Decision::Pending {
        pod: pod.id.clone(),
        reason: UNSCHEDULABLE.to_owned(),
    }
}

/// Evicts every bound pod that does not tolerate a NoExecute taint on its
/// node and returns it to Pending. Returned ids are in pod-id order.
pub fn enforce_no_execute(state: &ClusterState) -> (ClusterState, Vec<(PodId, NodeId)>) {
    let doomed: Vec<(PodId, NodeId)> = state
        .bindings
        .iter()
        .filter(|(pod_id, node_id)| {
            let pod = &state.pods[*pod_id];
            state.nodes[*node_id]
                .taints
                .iter()
                .any(|t| t.effect == TaintEffect::NoExecute && !pod.tolerates_taint(t))
        })
        .map(|(p, n)| (p.clone(), n.clone()))
        .collect();
    if doomed.is_empty() {
        return (state.clone(), doomed);
    }
    let mut next = state.clone();
    for (pod, _) in &doomed {
        next.evict_mut(pod).expect("bound pod can be evicted");
        next.requeue_mut(pod).expect("evicted pod can be requeued");
    }
    (next, doomed)
}

fn unit_for<'a>(units: &'a mut Vec<SchedulerUnit>, pod: &Pod) -> &'a mut SchedulerUnit {
    match units.iter().position(|u| u.acl_id == pod.owner_acl) {
        Some(i) => &mut units[i],
        None => {
            units.push(SchedulerUnit::new(pod.owner_acl.clone(), pod.priority.clone()));
            units.last_mut().expect("just pushed")
        }
    }
}

/// One scheduling round over all units. Pods left unschedulable go back to
/// the front of their unit's queue in their original order.
pub fn coordinate(units: &mut Vec<SchedulerUnit>, state: &ClusterState) -> RoundOutcome {
    let (mut state, evicted) = enforce_no_execute(state);
    let mut events = Vec::new();
    for (pod_id, node) in evicted {
        let pod = state.pods[&pod_id].clone();
        unit_for(units, &pod).queue.push_back(pod_id.clone());
        events.push(RoundEvent::Evicted {
            pod: pod_id,
            node,
            cause: EvictionCause::NoExecute,
        });
    }

    let mut unscheduled: Vec<PodId> = Vec::new();
    loop {
        let next = units
            .iter_mut()
            .filter(|u| !u.queue.is_empty())
            .min_by(|a, b| a.drain_key().cmp(&b.drain_key()));
        let Some(unit) = next else { break };
        let pod_id = unit.queue.pop_front().expect("non-empty queue");
        let Some(pod) = state.pods.get(&pod_id).cloned() else {
            continue;
        };
        if pod.phase != PodPhase::Pending {
            continue;
        }
        let decision = schedule(&pod, &state);
        match &decision {
            Decision::Bound { node, .. } => {
                state.bind_mut(&pod_id, node).expect("schedule only binds feasible pods");
            }
            Decision::Preempt { node, victims, .. } => {
                for victim in victims {
                    state.evict_mut(victim).expect("victims are bound");
                    state.requeue_mut(victim).expect("victims were just evicted");
                    let owner = state.pods[victim].clone();
                    unit_for(units, &owner).queue.push_back(victim.clone());
                    events.push(RoundEvent::Evicted {
                        pod: victim.clone(),
                        node: node.clone(),
                        cause: EvictionCause::PreemptedBy(pod_id.clone()),
                    });
                }
                state.bind_mut(&pod_id, node).expect("victims freed enough capacity");
            }
            Decision::Pending { .. } => unscheduled.push(pod_id.clone()),
        }
        events.push(RoundEvent::Decided(decision));
    }

    for pod_id in unscheduled.into_iter().rev() {
        let pod = state.pods[&pod_id].clone();
        unit_for(units, &pod).queue.push_front(pod_id);
    }
    RoundOutcome { state, events }
}
