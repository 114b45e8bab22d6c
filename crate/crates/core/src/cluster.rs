//! Cluster state: nodes, pods, taints and the feasibility predicates the
//! scheduler composes.
//!
//! Every public transition takes `&self` and returns a new [`ClusterState`];
//! a failed transition leaves the receiver untouched. The `*_mut` variants are
//! crate-internal and validate fully before mutating, so they share the same
//! all-or-nothing contract.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AclId, NodeId, PodId, RegionId};

/// Reserved taint key used to model a powered-off node.
pub const POWER_OFF_KEY: &str = "power-off";

/// CPU millicores and memory MiB. Used both as demand and as capacity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceVector {
    pub cpu_millicores: u64,
    pub memory_mib: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        cpu_millicores: 0,
        memory_mib: 0,
    };

    pub const fn new(cpu_millicores: u64, memory_mib: u64) -> Self {
        Self {
            cpu_millicores,
            memory_mib,
        }
    }

    /// Component-wise `self <= other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.cpu_millicores <= other.cpu_millicores && self.memory_mib <= other.memory_mib
    }

    /// `None` if either component would go negative.
    pub fn checked_sub(&self, other: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            cpu_millicores: self.cpu_millicores.checked_sub(other.cpu_millicores)?,
            memory_mib: self.memory_mib.checked_sub(other.memory_mib)?,
        })
    }

    pub fn saturating_sub(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_millicores: self.cpu_millicores.saturating_sub(other.cpu_millicores),
            memory_mib: self.memory_mib.saturating_sub(other.memory_mib),
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_millicores: self.cpu_millicores + rhs.cpu_millicores,
            memory_mib: self.memory_mib + rhs.memory_mib,
        }
    }
}

impl AddAssign for ResourceVector {
    fn add_assign(&mut self, rhs: ResourceVector) {
        *self = *self + rhs;
    }
}

impl Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a ResourceVector> for ResourceVector {
    fn sum<I: Iterator<Item = &'a ResourceVector>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}m, {}Mi)", self.cpu_millicores, self.memory_mib)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaintEffect {
    NoSchedule,
    PreferNoSchedule,
    NoExecute,
}

impl TaintEffect {
    pub const ALL: [TaintEffect; 3] = [
        TaintEffect::NoSchedule,
        TaintEffect::PreferNoSchedule,
        TaintEffect::NoExecute,
    ];

    /// Hard effects exclude intolerant pods; `PreferNoSchedule` only affects scoring.
    pub fn is_hard(self) -> bool {
        !matches!(self, TaintEffect::PreferNoSchedule)
    }
}

impl fmt::Display for TaintEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaintEffect::NoSchedule => "NoSchedule",
            TaintEffect::PreferNoSchedule => "PreferNoSchedule",
            TaintEffect::NoExecute => "NoExecute",
        };
        f.write_str(s)
    }
}

/// A node-side repulsion marker. Keys are ACL identifiers, apart from the
/// reserved [`POWER_OFF_KEY`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Taint {
    pub key: String,
    pub effect: TaintEffect,
}

impl Taint {
    pub fn new(key: impl Into<String>, effect: TaintEffect) -> Self {
        Self {
            key: key.into(),
            effect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Toleration {
    pub key: String,
    pub effects: BTreeSet<TaintEffect>,
}

impl Toleration {
    pub fn new(key: impl Into<String>, effects: impl IntoIterator<Item = TaintEffect>) -> Self {
        Self {
            key: key.into(),
            effects: effects.into_iter().collect(),
        }
    }

    /// Tolerates every effect for `key`.
    pub fn all(key: impl Into<String>) -> Self {
        Self::new(key, TaintEffect::ALL)
    }

    pub fn matches(&self, taint: &Taint) -> bool {
        self.key == taint.key && self.effects.contains(&taint.effect)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PriorityLevel {
    pub name: String,
    pub value: i64,
    pub preemption_enabled: bool,
    #[serde(default)]
    pub global_default: bool,
}

impl PriorityLevel {
    pub fn new(name: impl Into<String>, value: i64, preemption_enabled: bool) -> Self {
        Self {
            name: name.into(),
            value,
            preemption_enabled,
            global_default: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub region: RegionId,
    pub capacity: ResourceVector,
    pub taints: BTreeSet<Taint>,
}

impl Node {
    pub fn new(id: impl Into<NodeId>, region: impl Into<RegionId>, capacity: ResourceVector) -> Self {
        Self {
            id: id.into(),
            region: region.into(),
            capacity,
            taints: BTreeSet::new(),
        }
    }

    pub fn with_taint(mut self, taint: Taint) -> Self {
        self.taints.insert(taint);
        self
    }

    pub fn is_powered_off(&self) -> bool {
        self.taints.iter().any(|t| t.key == POWER_OFF_KEY)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PodPhase {
    Pending,
    Bound(NodeId),
    Evicted,
    Terminated,
}

impl PodPhase {
    pub fn name(&self) -> &'static str {
        match self {
            PodPhase::Pending => "Pending",
            PodPhase::Bound(_) => "Bound",
            PodPhase::Evicted => "Evicted",
            PodPhase::Terminated => "Terminated",
        }
    }

    pub fn is_alive(&self) -> bool {
        !matches!(self, PodPhase::Terminated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pod {
    pub id: PodId,
    pub owner_acl: AclId,
    pub request: ResourceVector,
    pub tolerations: Vec<Toleration>,
    pub priority: PriorityLevel,
    /// Node the owning ACL asked for. Scoring ranks it first when feasible.
    pub preferred_node: Option<NodeId>,
    pub phase: PodPhase,
    /// Monotone creation counter; larger is newer.
    pub created_seq: u64,
    pub evictions: u32,
}

impl Pod {
    pub fn new(
        id: impl Into<PodId>,
        owner_acl: impl Into<AclId>,
        request: ResourceVector,
        priority: PriorityLevel,
    ) -> Self {
        Self {
            id: id.into(),
            owner_acl: owner_acl.into(),
            request,
            tolerations: Vec::new(),
            priority,
            preferred_node: None,
            phase: PodPhase::Pending,
            created_seq: 0,
            evictions: 0,
        }
    }

    pub fn with_toleration(mut self, toleration: Toleration) -> Self {
        self.tolerations.push(toleration);
        self
    }

    pub fn with_preferred_node(mut self, node: impl Into<NodeId>) -> Self {
        self.preferred_node = Some(node.into());
        self
    }

    pub fn tolerates_taint(&self, taint: &Taint) -> bool {
        self.tolerations.iter().any(|t| t.matches(taint))
    }

    pub fn bound_node(&self) -> Option<&NodeId> {
        match &self.phase {
            PodPhase::Bound(n) => Some(n),
            _ => None,
        }
    }
}

/// True iff every hard taint (`NoSchedule`, `NoExecute`) on `node` is matched
/// by one of the pod's tolerations. `PreferNoSchedule` taints never make this
/// false.
pub fn tolerates(pod: &Pod, node: &Node) -> bool {
    node.taints
        .iter()
        .filter(|t| t.effect.is_hard())
        .all(|t| pod.tolerates_taint(t))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("unknown pod `{0}`")]
    UnknownPod(PodId),
    #[error("pod `{0}` already exists")]
    DuplicatePod(PodId),
    #[error("binding pod `{pod}` to `{node}` exceeds the node's free capacity")]
    CapacityExceeded { pod: PodId, node: NodeId },
    #[error("pod `{pod}` does not tolerate the taints of `{node}`")]
    TaintViolation { pod: PodId, node: NodeId },
    #[error("pod `{pod}` cannot {op} from phase {phase}")]
    InvalidPhase {
        pod: PodId,
        phase: &'static str,
        op: &'static str,
    },
}

pub type ClusterResult<T> = Result<T, ClusterError>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub nodes: BTreeMap<NodeId, Node>,
    pub pods: BTreeMap<PodId, Pod>,
    pub bindings: BTreeMap<PodId, NodeId>,
}

impl ClusterState {
    pub fn new(nodes: impl IntoIterator<Item = Node>) -> Self {
        Self {
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            pods: BTreeMap::new(),
            bindings: BTreeMap::new(),
        }
    }

    pub fn node(&self, id: &NodeId) -> ClusterResult<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| ClusterError::UnknownNode(id.clone()))
    }

    pub fn pod(&self, id: &PodId) -> ClusterResult<&Pod> {
        self.pods
            .get(id)
            .ok_or_else(|| ClusterError::UnknownPod(id.clone()))
    }

    /// Pods bound to `node`, in pod-id order.
    pub fn pods_on<'a>(&'a self, node: &'a NodeId) -> impl Iterator<Item = &'a Pod> + 'a {
        self.bindings
            .iter()
            .filter(move |(_, n)| *n == node)
            .filter_map(move |(p, _)| self.pods.get(p))
    }

    pub fn used_capacity(&self, node: &NodeId) -> ClusterResult<ResourceVector> {
        self.node(node)?;
        Ok(self.pods_on(node).map(|p| p.request).sum())
    }

    /// Capacity minus the requests of bound pods.
    pub fn free_capacity(&self, node: &NodeId) -> ClusterResult<ResourceVector> {
        let n = self.node(node)?;
        let used = self.used_capacity(node)?;
        Ok(n.capacity.saturating_sub(&used))
    }

    /// `pod.request <= free_capacity(node)` component-wise.
    pub fn fits(&self, pod: &Pod, node: &NodeId) -> ClusterResult<bool> {
        Ok(pod.request.fits_within(&self.free_capacity(node)?))
    }

    pub fn add_pod(&self, pod: Pod) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.add_pod_mut(pod)?;
        Ok(next)
    }

    pub fn bind(&self, pod: &PodId, node: &NodeId) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.bind_mut(pod, node)?;
        Ok(next)
    }

    pub fn evict(&self, pod: &PodId) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.evict_mut(pod)?;
        Ok(next)
    }

    pub fn requeue(&self, pod: &PodId) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.requeue_mut(pod)?;
        Ok(next)
    }

    pub fn terminate(&self, pod: &PodId) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.terminate_mut(pod)?;
        Ok(next)
    }

    /// Adds `taint` to the node. Bound pods are not touched; NoExecute
    /// enforcement is a separate scheduler pass.
    pub fn apply_taint(&self, node: &NodeId, taint: Taint) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.apply_taint_mut(node, taint)?;
        Ok(next)
    }

    pub fn remove_taint(&self, node: &NodeId, taint: &Taint) -> ClusterResult<Self> {
        let mut next = self.clone();
        next.remove_taint_mut(node, taint)?;
        Ok(next)
    }

    pub(crate) fn add_pod_mut(&mut self, mut pod: Pod) -> ClusterResult<()> {
        if self.pods.contains_key(&pod.id) {
            return Err(ClusterError::DuplicatePod(pod.id));
        }
        pod.phase = PodPhase::Pending;
        self.pods.insert(pod.id.clone(), pod);
        Ok(())
    }

    pub(crate) fn bind_mut(&mut self, pod_id: &PodId, node_id: &NodeId) -> ClusterResult<()> {
        let pod = self.pod(pod_id)?;
        let node = self.node(node_id)?;
        if pod.phase != PodPhase::Pending {
            return Err(ClusterError::InvalidPhase {
                pod: pod_id.clone(),
                phase: pod.phase.name(),
                op: "bind",
            });
        }
        if !tolerates(pod, node) {
            return Err(ClusterError::TaintViolation {
                pod: pod_id.clone(),
                node: node_id.clone(),
            });
        }
        if !self.fits(pod, node_id)? {
            return Err(ClusterError::CapacityExceeded {
                pod: pod_id.clone(),
                node: node_id.clone(),
            });
        }
        self.bindings.insert(pod_id.clone(), node_id.clone());
        self.pods.get_mut(pod_id).expect("checked above").phase = PodPhase::Bound(node_id.clone());
        Ok(())
    }

    pub(crate) fn evict_mut(&mut self, pod_id: &PodId) -> ClusterResult<()> {
        let pod = self
            .pods
            .get_mut(pod_id)
            .ok_or_else(|| ClusterError::UnknownPod(pod_id.clone()))?;
        if !matches!(pod.phase, PodPhase::Bound(_)) {
            return Err(ClusterError::InvalidPhase {
                pod: pod_id.clone(),
                phase: pod.phase.name(),
                op: "evict",
            });
        }
        pod.phase = PodPhase::Evicted;
        pod.evictions += 1;
        self.bindings.remove(pod_id);
        Ok(())
    }

    pub(crate) fn requeue_mut(&mut self, pod_id: &PodId) -> ClusterResult<()> {
        let pod = self
            .pods
            .get_mut(pod_id)
            .ok_or_else(|| ClusterError::UnknownPod(pod_id.clone()))?;
        if pod.phase != PodPhase::Evicted {
            return Err(ClusterError::InvalidPhase {
                pod: pod_id.clone(),
                phase: pod.phase.name(),
                op: "requeue",
            });
        }
        pod.phase = PodPhase::Pending;
        Ok(())
    }

    pub(crate) fn terminate_mut(&mut self, pod_id: &PodId) -> ClusterResult<()> {
        let pod = self
            .pods
            .get_mut(pod_id)
            .ok_or_else(|| ClusterError::UnknownPod(pod_id.clone()))?;
        if pod.phase == PodPhase::Terminated {
            return Err(ClusterError::InvalidPhase {
                pod: pod_id.clone(),
                phase: pod.phase.name(),
                op: "terminate",
            });
        }
        pod.phase = PodPhase::Terminated;
        self.bindings.remove(pod_id);
        Ok(())
    }

    pub(crate) fn apply_taint_mut(&mut self, node: &NodeId, taint: Taint) -> ClusterResult<()> {
        self.nodes
            .get_mut(node)
            .ok_or_else(|| ClusterError::UnknownNode(node.clone()))?
            .taints
            .insert(taint);
        Ok(())
    }

    pub(crate) fn remove_taint_mut(&mut self, node: &NodeId, taint: &Taint) -> ClusterResult<()> {
        self.nodes
            .get_mut(node)
            .ok_or_else(|| ClusterError::UnknownNode(node.clone()))?
            .taints
            .remove(taint);
        Ok(())
    }

    /// Checks binding/phase consistency and the per-node capacity bound.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (pod_id, node_id) in &self.bindings {
            let pod = self
                .pods
                .get(pod_id)
                .ok_or_else(|| format!("binding for unknown pod {pod_id}"))?;
            if pod.bound_node() != Some(node_id) {
                return Err(format!(
                    "pod {pod_id} bound to {node_id} but phase is {:?}",
                    pod.phase
                ));
            }
            if !self.nodes.contains_key(node_id) {
                return Err(format!("pod {pod_id} bound to unknown node {node_id}"));
            }
        }
        for pod in self.pods.values() {
            if let Some(n) = pod.bound_node() {
                if self.bindings.get(&pod.id) != Some(n) {
                    return Err(format!("pod {} Bound({n}) without binding", pod.id));
                }
            }
        }
        for node in self.nodes.values() {
            let used: ResourceVector = self.pods_on(&node.id).map(|p| p.request).sum();
            if !used.fits_within(&node.capacity) {
                return Err(format!(
                    "node {} over capacity: used {used}, capacity {}",
                    node.id, node.capacity
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prio(v: i64) -> PriorityLevel {
        PriorityLevel::new(format!("p{v}"), v, true)
    }

    fn edge() -> Node {
        Node::new("edge-waterloo", "waterloo", ResourceVector::new(2000, 4096))
    }

    fn pod(id: &str, acl: &str, cpu: u64, mem: u64) -> Pod {
        Pod::new(id, acl, ResourceVector::new(cpu, mem), prio(5))
    }

    #[test]
    fn tolerates_vacuous_without_taints() {
        assert!(tolerates(&pod("p", "acl1", 1, 1), &edge()));
    }

    #[test]
    fn tolerates_matching_no_execute() {
        let node = edge().with_taint(Taint::new("acl1", TaintEffect::NoExecute));
        let p = pod("p", "acl1", 1, 1).with_toleration(Toleration::new("acl1", [TaintEffect::NoExecute]));
        assert!(tolerates(&p, &node));
        assert!(!tolerates(&pod("q", "acl2", 1, 1), &node));
    }

    #[test]
    fn prefer_no_schedule_never_blocks() {
        let node = edge().with_taint(Taint::new("acl1", TaintEffect::PreferNoSchedule));
        assert!(tolerates(&pod("p", "acl2", 1, 1), &node));
    }

    #[test]
    fn toleration_effect_subset_matching() {
        let node = edge().with_taint(Taint::new("acl1", TaintEffect::NoExecute));
        let p = pod("p", "acl1", 1, 1).with_toleration(Toleration::new("acl1", [TaintEffect::NoSchedule]));
        assert!(!tolerates(&p, &node));
    }

    #[test]
    fn fits_examples() {
        let state = ClusterState::new([edge()]);
        let n = NodeId::from("edge-waterloo");
        assert!(state.fits(&pod("z", "a", 0, 0), &n).unwrap());
        let big = pod("a", "acl1", 1500, 3072);
        assert!(state.fits(&big, &n).unwrap());
        let state = state.add_pod(big.clone()).unwrap().bind(&big.id, &n).unwrap();
        assert!(!state.fits(&pod("b", "acl2", 1500, 3072), &n).unwrap());
        assert_eq!(
            state.fits(&big, &NodeId::from("nowhere")),
            Err(ClusterError::UnknownNode("nowhere".into()))
        );
    }

    #[test]
    fn bind_errors_leave_state_unchanged() {
        let n = NodeId::from("edge-waterloo");
        let state = ClusterState::new([edge()])
            .add_pod(pod("a", "acl1", 1000, 3000))
            .unwrap()
            .add_pod(pod("b", "acl2", 500, 2000))
            .unwrap();
        let state = state.bind(&"a".into(), &n).unwrap();
        // 3000 + 2000 MiB > 4096 MiB even though CPU fits.
        assert_eq!(
            state.bind(&"b".into(), &n),
            Err(ClusterError::CapacityExceeded {
                pod: "b".into(),
                node: n.clone()
            })
        );
        assert!(matches!(
            state.bind(&"a".into(), &n),
            Err(ClusterError::InvalidPhase { op: "bind", .. })
        ));
        let tainted = state
            .apply_taint(&n, Taint::new("acl1", TaintEffect::NoSchedule))
            .unwrap();
        assert_eq!(
            tainted.bind(&"b".into(), &n),
            Err(ClusterError::TaintViolation {
                pod: "b".into(),
                node: n.clone()
            })
        );
        state.check_invariants().unwrap();
    }

    #[test]
    fn apply_taint_is_set_semantics() {
        let calgary = NodeId::from("edge-calgary");
        let state = ClusterState::new([Node::new("edge-calgary", "calgary", ResourceVector::new(2000, 4096))]);
        let t1 = Taint::new("acl1", TaintEffect::PreferNoSchedule);
        let once = state.apply_taint(&calgary, t1.clone()).unwrap();
        let twice = once.apply_taint(&calgary, t1).unwrap();
        assert_eq!(once, twice);
        let both = twice
            .apply_taint(&calgary, Taint::new("acl2", TaintEffect::PreferNoSchedule))
            .unwrap();
        assert_eq!(both.node(&calgary).unwrap().taints.len(), 2);
        assert!(matches!(
            state.apply_taint(&"x".into(), Taint::new("a", TaintEffect::NoSchedule)),
            Err(ClusterError::UnknownNode(_))
        ));
    }

    #[test]
    fn apply_taint_does_not_evict() {
        let n = NodeId::from("edge-waterloo");
        let state = ClusterState::new([edge()])
            .add_pod(pod("b", "acl2", 500, 1024))
            .unwrap()
            .bind(&"b".into(), &n)
            .unwrap()
            .apply_taint(&n, Taint::new("acl1", TaintEffect::NoExecute))
            .unwrap();
        assert_eq!(state.pod(&"b".into()).unwrap().phase, PodPhase::Bound(n));
    }

    #[test]
    fn free_capacity_round_trip() {
        let n = NodeId::from("edge-waterloo");
        let state = ClusterState::new([edge()]).add_pod(pod("a", "acl1", 500, 1024)).unwrap();
        assert_eq!(state.free_capacity(&n).unwrap(), ResourceVector::new(2000, 4096));
        let bound = state.bind(&"a".into(), &n).unwrap();
        assert_eq!(bound.free_capacity(&n).unwrap(), ResourceVector::new(1500, 3072));
        let evicted = bound.evict(&"a".into()).unwrap();
        assert_eq!(evicted.free_capacity(&n).unwrap(), ResourceVector::new(2000, 4096));
        assert_eq!(evicted.pod(&"a".into()).unwrap().phase, PodPhase::Evicted);
    }

    #[test]
    fn phase_machine_rejects_forbidden_transitions() {
        let state = ClusterState::new([edge()]).add_pod(pod("a", "acl1", 1, 1)).unwrap();
        let a = PodId::from("a");
        assert!(state.evict(&a).is_err());
        assert!(state.requeue(&a).is_err());
        let done = state.terminate(&a).unwrap();
        assert!(done.terminate(&a).is_err());
        assert!(done.bind(&a, &"edge-waterloo".into()).is_err());
    }

    #[test]
    fn resource_vector_guarded_subtraction() {
        let a = ResourceVector::new(10, 5);
        let b = ResourceVector::new(3, 7);
        assert_eq!(a.checked_sub(&b), None);
        assert_eq!(a.saturating_sub(&b), ResourceVector::new(7, 0));
        assert!(b.fits_within(&ResourceVector::new(3, 7)));
        assert!(!a.fits_within(&b));
    }
}
