//! Scenario files: TOML documents describing topology, priorities, agents,
//! trust lists, ICM thresholds, traffic and injected events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acl::{classify_size, AgentRole, PlanPolicy, ScopeTarget};
use crate::cluster::{Node, ResourceVector, Taint, TaintEffect, Toleration, POWER_OFF_KEY};
use crate::icm::broker::ArtifactKind;
use crate::icm::IcmConfig;
use crate::ids::{AclId, NodeId, RegionId};
use crate::traffic::RegionProfile;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("invalid reference: {0}")]
    ValidationError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub ticks: u64,
    #[serde(default)]
    pub nodes: Vec<NodeDef>,
    #[serde(default)]
    pub priorities: Vec<PriorityDef>,
    #[serde(default)]
    pub agents: Vec<AgentDef>,
    #[serde(default)]
    pub pods: Vec<PodDef>,
    #[serde(default)]
    pub trust: Vec<TrustDef>,
    #[serde(default)]
    pub icm: IcmConfig,
    #[serde(default)]
    pub traffic: TrafficDef,
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaintDef {
    pub key: String,
    pub effect: TaintEffect,
}

impl From<&TaintDef> for Taint {
    fn from(t: &TaintDef) -> Self {
        Taint::new(t.key.clone(), t.effect)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub id: NodeId,
    pub region: RegionId,
    pub cpu: u64,
    pub memory: u64,
    #[serde(default)]
    pub taints: Vec<TaintDef>,
}

impl NodeDef {
    pub fn to_node(&self) -> Node {
        let mut node = Node::new(self.id.clone(), self.region.clone(), ResourceVector::new(self.cpu, self.memory));
        for t in &self.taints {
            node = node.with_taint(t.into());
        }
        node
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityDef {
    pub name: String,
    pub value: i64,
    #[serde(default)]
    pub preemption: bool,
    #[serde(default)]
    pub global_default: bool,
}

/// Optional overrides of [`PlanPolicy`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDef {
    pub high_watermark: Option<f64>,
    pub low_watermark: Option<f64>,
    pub hysteresis_ticks: Option<u64>,
    pub idle_ticks: Option<u64>,
    pub pod_cpu: Option<u64>,
    pub pod_memory: Option<u64>,
    pub pod_capacity: Option<f64>,
    pub min_pods: Option<usize>,
    pub preferred_node: Option<NodeId>,
}

impl PolicyDef {
    pub fn to_policy(&self) -> PlanPolicy {
        let d = PlanPolicy::default();
        PlanPolicy {
            high_watermark: self.high_watermark.unwrap_or(d.high_watermark),
            low_watermark: self.low_watermark.unwrap_or(d.low_watermark),
            hysteresis_ticks: self.hysteresis_ticks.unwrap_or(d.hysteresis_ticks),
            idle_ticks: self.idle_ticks.unwrap_or(d.idle_ticks),
            pod_request: ResourceVector::new(
                self.pod_cpu.unwrap_or(d.pod_request.cpu_millicores),
                self.pod_memory.unwrap_or(d.pod_request.memory_mib),
            ),
            pod_capacity: self.pod_capacity.unwrap_or(d.pod_capacity),
            min_pods: self.min_pods.unwrap_or(d.min_pods),
            preferred_node: self.preferred_node.clone().or(d.preferred_node),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDef {
    pub id: AclId,
    pub role: AgentRole,
    pub scope: Vec<ScopeTarget>,
    /// Priority level name; the global default when absent.
    pub priority: Option<String>,
    #[serde(default = "one")]
    pub period: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_window")]
    pub window: u64,
    #[serde(default)]
    pub policy: PolicyDef,
}

fn one() -> u64 {
    1
}

fn default_alpha() -> f64 {
    0.3
}

fn default_window() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerationDef {
    pub key: String,
    #[serde(default = "all_effects")]
    pub effects: Vec<TaintEffect>,
}

fn all_effects() -> Vec<TaintEffect> {
    TaintEffect::ALL.to_vec()
}

impl From<&TolerationDef> for Toleration {
    fn from(t: &TolerationDef) -> Self {
        Toleration::new(t.key.clone(), t.effects.iter().copied())
    }
}

/// A pod present before tick 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodDef {
    pub id: String,
    pub owner: AclId,
    pub cpu: u64,
    pub memory: u64,
    /// Priority level name; the owning agent's level, else the global default.
    pub priority: Option<String>,
    /// Bound here at setup; pending when absent.
    pub node: Option<NodeId>,
    /// Defaults to tolerating every effect for the owner's key.
    pub tolerations: Option<Vec<TolerationDef>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustEntry {
    pub acl: AclId,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustDef {
    pub owner: AclId,
    #[serde(default)]
    pub allow: Vec<TrustEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficDef {
    #[serde(default)]
    pub regions: Vec<RegionProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSpecDef {
    pub cpu: u64,
    pub memory: u64,
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InjectedEvent {
    Taint { node: NodeId, key: String, effect: TaintEffect },
    Untaint { node: NodeId, key: String, effect: TaintEffect },
    SliceRequest { acl: AclId, pods: Vec<PodSpecDef> },
    KnowledgeRequest { source: AclId, target: AclId, artifact: ArtifactKind },
    /// Multiplies the agent's prediction by `factor` for `duration` ticks.
    Fault { acl: AclId, factor: f64, duration: u64 },
    /// Operator reinstatement of a suspended agent.
    Release { acl: AclId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub event: InjectedEvent,
}

/// Events appended by the operator CLI, stored as `[[events]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsFile {
    #[serde(default)]
    pub events: Vec<ScheduledEvent>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, err: toml::de::Error) -> ScenarioError {
    ScenarioError::ParseError {
        line: err.span().map_or(0, |s| line_of(text, s.start)),
        message: err.message().to_owned(),
    }
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_events(text: &str) -> Result<EventsFile, ScenarioError> {
    toml::from_str(text).map_err(|e| parse_error(text, e))
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::ValidationError(msg.into())
}

impl Scenario {
    pub fn node_map(&self) -> BTreeMap<NodeId, Node> {
        self.nodes.iter().map(|n| (n.id.clone(), n.to_node())).collect()
    }

    pub fn regions(&self) -> BTreeSet<RegionId> {
        self.nodes.iter().map(|n| n.region.clone()).collect()
    }

    pub fn priority(&self, name: &str) -> Option<&PriorityDef> {
        self.priorities.iter().find(|p| p.name == name)
    }

    pub fn global_default(&self) -> Option<&PriorityDef> {
        self.priorities.iter().find(|p| p.global_default)
    }

    pub fn agent(&self, id: &AclId) -> Option<&AgentDef> {
        self.agents.iter().find(|a| &a.id == id)
    }

    /// Priority level of an agent.
    pub fn agent_priority(&self, agent: &AgentDef) -> Option<&PriorityDef> {
        match &agent.priority {
            Some(name) => self.priority(name),
            None => self.global_default(),
        }
    }

    pub fn pod_priority(&self, pod: &PodDef) -> Option<&PriorityDef> {
        match &pod.priority {
            Some(name) => self.priority(name),
            None => self
                .agent(&pod.owner)
                .and_then(|a| self.agent_priority(a))
                .or_else(|| self.global_default()),
        }
    }

    /// Cross-reference checks; every failure names the dangling reference.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.ticks == 0 {
            return Err(invalid("ticks must be positive"));
        }
        let mut node_ids = BTreeSet::new();
        for n in &self.nodes {
            if !node_ids.insert(&n.id) {
                return Err(invalid(format!("duplicate node `{}`", n.id)));
            }
            if n.taints.iter().any(|t| t.key == POWER_OFF_KEY) {
                return Err(invalid(format!("node `{}`: taint key `{POWER_OFF_KEY}` is reserved", n.id)));
            }
        }
        let mut names = BTreeSet::new();
        for p in &self.priorities {
            if !names.insert(p.name.as_str()) {
                return Err(invalid(format!("duplicate priority level `{}`", p.name)));
            }
        }
        if self.priorities.iter().filter(|p| p.global_default).count() > 1 {
            return Err(invalid("more than one global_default priority level"));
        }
        let nodes = self.node_map();
        let mut agent_ids = BTreeSet::new();
        for a in &self.agents {
            if !agent_ids.insert(&a.id) {
                return Err(invalid(format!("duplicate agent `{}`", a.id)));
            }
            if self.agent_priority(a).is_none() {
                return Err(invalid(format!(
                    "agent `{}`: priority level `{}`",
                    a.id,
                    a.priority.as_deref().unwrap_or("<global default>")
                )));
            }
            if a.period == 0 {
                return Err(invalid(format!("agent `{}`: period must be positive", a.id)));
            }
            if !(a.alpha > 0.0 && a.alpha <= 1.0) {
                return Err(invalid(format!("agent `{}`: alpha must be in (0, 1]", a.id)));
            }
            let scope: BTreeSet<ScopeTarget> = a.scope.iter().cloned().collect();
            classify_size(&scope, &nodes).map_err(|e| invalid(format!("agent `{}`: {e}", a.id)))?;
            if let Some(n) = &a.policy.preferred_node {
                if !nodes.contains_key(n) {
                    return Err(invalid(format!("agent `{}`: preferred node `{n}`", a.id)));
                }
            }
        }
        let mut pod_ids = BTreeSet::new();
        for p in &self.pods {
            if !pod_ids.insert(p.id.as_str()) {
                return Err(invalid(format!("duplicate pod `{}`", p.id)));
            }
            if self.pod_priority(p).is_none() {
                return Err(invalid(format!(
                    "pod `{}`: priority level `{}`",
                    p.id,
                    p.priority.as_deref().unwrap_or("<default>")
                )));
            }
            if let Some(n) = &p.node {
                if !nodes.contains_key(n) {
                    return Err(invalid(format!("pod `{}`: node `{n}`", p.id)));
                }
            }
        }
        for t in &self.trust {
            if !agent_ids.contains(&t.owner) {
                return Err(invalid(format!("trust list owner `{}`", t.owner)));
            }
            for e in &t.allow {
                if !agent_ids.contains(&e.acl) {
                    return Err(invalid(format!("trust list of `{}`: agent `{}`", t.owner, e.acl)));
                }
            }
        }
        let regions = self.regions();
        for r in &self.traffic.regions {
            if !regions.contains(&r.region) {
                return Err(invalid(format!("traffic region `{}`", r.region)));
            }
        }
        if self.icm.e2e_period == 0 {
            return Err(invalid("icm.e2e_period must be positive"));
        }
        for e in &self.events {
            self.validate_event(&e.event, &nodes, &agent_ids)?;
        }
        Ok(())
    }

    fn validate_event(
        &self,
        event: &InjectedEvent,
        nodes: &BTreeMap<NodeId, Node>,
        agents: &BTreeSet<&AclId>,
    ) -> Result<(), ScenarioError> {
        let node = |n: &NodeId| {
            if nodes.contains_key(n) {
                Ok(())
            } else {
                Err(invalid(format!("event node `{n}`")))
            }
        };
        let agent = |a: &AclId| {
            if agents.contains(a) {
                Ok(())
            } else {
                Err(invalid(format!("event agent `{a}`")))
            }
        };
        match event {
            InjectedEvent::Taint { node: n, key, .. } | InjectedEvent::Untaint { node: n, key, .. } => {
                if key == POWER_OFF_KEY {
                    return Err(invalid(format!("taint key `{POWER_OFF_KEY}` is reserved")));
                }
                node(n)
            }
            InjectedEvent::SliceRequest { acl, pods } => {
                agent(acl)?;
                pods.iter().filter_map(|p| p.node.as_ref()).try_for_each(node)
            }
            InjectedEvent::KnowledgeRequest { source, target, .. } => {
                agent(source)?;
                agent(target)
            }
            InjectedEvent::Fault { acl, .. } | InjectedEvent::Release { acl } => agent(acl),
        }
    }

    /// SHA-256 over the canonical JSON form, covering seed and ticks.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

pub const BUILTIN: [(&str, &str); 4] = [
    ("case1", include_str!("../scenarios/case1.toml")),
    ("case2", include_str!("../scenarios/case2.toml")),
    ("three-acl-conflict", include_str!("../scenarios/three-acl-conflict.toml")),
    ("pingpong", include_str!("../scenarios/pingpong.toml")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}
