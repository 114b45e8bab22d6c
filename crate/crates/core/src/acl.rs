//! Autonomous control loops (ACLs) as MAPE-K agents.
//!
//! Each agent monitors the traffic of the regions in its scope, folds it into
//! an EWMA predictor, turns the prediction into resource actions with a
//! watermark policy, and hands those actions to the conflict manager through
//! an [`IntentSink`]. Agents never mutate the cluster themselves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterState, Node, Pod, PriorityLevel, ResourceVector, Toleration};
use crate::icm::broker::{ArtifactId, ArtifactPayload, Grant, KnowledgeArtifact};
use crate::icm::Receipt;
use crate::ids::{AclId, NodeId, PodId, RegionId};
use crate::traffic::RegionProfile;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AclError {
    #[error("agent `{0}` is suspended")]
    SuspendedAgent(AclId),
    #[error("scope is empty")]
    EmptyScope,
    #[error("scope target `{0}` does not exist in the topology")]
    UnknownTarget(String),
    #[error("invalid scope target `{0}`")]
    InvalidTarget(String),
    #[error("artifact {artifact} was not granted to `{agent}`")]
    NoGrant { agent: AclId, artifact: ArtifactId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Femto,
    Micro,
    Macro,
    Mega,
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One entry of an agent's scope, written `container:<id>[@<node>]`,
/// `node:<id>`, `region:<id>` or `e2e`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScopeTarget {
    Container { id: String, node: Option<NodeId> },
    Node(NodeId),
    Region(RegionId),
    EndToEnd,
}

impl FromStr for ScopeTarget {
    type Err = AclError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "e2e" {
            return Ok(ScopeTarget::EndToEnd);
        }
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| AclError::InvalidTarget(s.to_owned()))?;
        if rest.is_empty() {
            return Err(AclError::InvalidTarget(s.to_owned()));
        }
        match kind {
            "container" => Ok(match rest.split_once('@') {
                Some((id, node)) => ScopeTarget::Container {
                    id: id.to_owned(),
                    node: Some(node.into()),
                },
                None => ScopeTarget::Container {
                    id: rest.to_owned(),
                    node: None,
                },
            }),
            "node" => Ok(ScopeTarget::Node(rest.into())),
            "region" => Ok(ScopeTarget::Region(rest.into())),
            _ => Err(AclError::InvalidTarget(s.to_owned())),
        }
    }
}

impl TryFrom<String> for ScopeTarget {
    type Error = AclError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl fmt::Display for ScopeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeTarget::Container { id, node: Some(n) } => write!(f, "container:{id}@{n}"),
            ScopeTarget::Container { id, node: None } => write!(f, "container:{id}"),
            ScopeTarget::Node(n) => write!(f, "node:{n}"),
            ScopeTarget::Region(r) => write!(f, "region:{r}"),
            ScopeTarget::EndToEnd => f.write_str("e2e"),
        }
    }
}

impl From<ScopeTarget> for String {
    fn from(t: ScopeTarget) -> String {
        t.to_string()
    }
}

fn node_region<'a>(nodes: &'a BTreeMap<NodeId, Node>, id: &NodeId) -> Result<&'a RegionId, AclError> {
    nodes
        .get(id)
        .map(|n| &n.region)
        .ok_or_else(|| AclError::UnknownTarget(id.to_string()))
}

/// Regions touched by the scope. `e2e` covers every region of the topology.
pub fn scope_regions(
    scope: &BTreeSet<ScopeTarget>,
    nodes: &BTreeMap<NodeId, Node>,
) -> Result<BTreeSet<RegionId>, AclError> {
    let all: BTreeSet<RegionId> = nodes.values().map(|n| n.region.clone()).collect();
    let mut regions = BTreeSet::new();
    for target in scope {
        match target {
            ScopeTarget::EndToEnd => regions.extend(all.iter().cloned()),
            ScopeTarget::Node(n) => {
                regions.insert(node_region(nodes, n)?.clone());
            }
            ScopeTarget::Container { node: Some(n), .. } => {
                regions.insert(node_region(nodes, n)?.clone());
            }
            ScopeTarget::Container { node: None, .. } => {}
            ScopeTarget::Region(r) => {
                if !all.contains(r) {
                    return Err(AclError::UnknownTarget(r.to_string()));
                }
                regions.insert(r.clone());
            }
        }
    }
    Ok(regions)
}

/// Nodes the scope covers.
pub fn scope_nodes(scope: &BTreeSet<ScopeTarget>, nodes: &BTreeMap<NodeId, Node>) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    for target in scope {
        match target {
            ScopeTarget::EndToEnd => out.extend(nodes.keys().cloned()),
            ScopeTarget::Node(n) | ScopeTarget::Container { node: Some(n), .. } => {
                if nodes.contains_key(n) {
                    out.insert(n.clone());
                }
            }
            ScopeTarget::Region(r) => {
                out.extend(nodes.values().filter(|n| &n.region == r).map(|n| n.id.clone()))
            }
            ScopeTarget::Container { node: None, .. } => {}
        }
    }
    out
}

/// Femto for a single container, Micro for targets on one entity, Macro for
/// several entities of one region, Mega for end-to-end or multi-region scope.
/// Independent of the order of `scope`.
pub fn classify_size(
    scope: &BTreeSet<ScopeTarget>,
    nodes: &BTreeMap<NodeId, Node>,
) -> Result<SizeClass, AclError> {
    if scope.is_empty() {
        return Err(AclError::EmptyScope);
    }
    if scope.contains(&ScopeTarget::EndToEnd) {
        return Ok(SizeClass::Mega);
    }
    if scope_regions(scope, nodes)?.len() > 1 {
        return Ok(SizeClass::Mega);
    }
    if scope.len() == 1 && matches!(scope.first(), Some(ScopeTarget::Container { .. })) {
        return Ok(SizeClass::Femto);
    }
    if scope.iter().any(|t| matches!(t, ScopeTarget::Region(_))) {
        return Ok(SizeClass::Macro);
    }
    let entities: BTreeSet<String> = scope
        .iter()
        .map(|t| match t {
            ScopeTarget::Node(n) | ScopeTarget::Container { node: Some(n), .. } => n.to_string(),
            other => other.to_string(),
        })
        .collect();
    Ok(if entities.len() == 1 {
        SizeClass::Micro
    } else {
        SizeClass::Macro
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lifecycle {
    Active,
    UnderObservation,
    Suspended,
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentRole {
    /// Scales its own pods with the traffic it predicts (RAN and Core loops).
    ResourceManager,
    /// Instantiates pod chains when a slice request is pending.
    SliceInstantiator,
    /// Powers off idle nodes.
    EnergySaver,
    /// Powers nodes back on in saturated regions.
    LoadBalancer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPolicy {
    pub high_watermark: f64,
    pub low_watermark: f64,
    pub hysteresis_ticks: u64,
    pub idle_ticks: u64,
    /// Request of every pod the agent scales up.
    pub pod_request: ResourceVector,
    /// Traffic units one pod can serve.
    pub pod_capacity: f64,
    pub min_pods: usize,
    pub preferred_node: Option<NodeId>,
}

impl Default for PlanPolicy {
    fn default() -> Self {
        Self {
            high_watermark: 0.8,
            low_watermark: 0.3,
            hysteresis_ticks: 3,
            idle_ticks: 5,
            pod_request: ResourceVector::new(500, 1024),
            pod_capacity: 100.0,
            min_pods: 1,
            preferred_node: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWindow {
    pub target: String,
    pub samples: Vec<(u64, f64)>,
    pub span_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredictorKind {
    Ewma,
    /// Uses a model received from `source`: the noise-free traffic profiles
    /// of the regions this agent watches.
    SharedModel {
        source: AclId,
        profiles: Vec<RegionProfile>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorState {
    pub kind: PredictorKind,
    pub alpha: f64,
    pub level: f64,
    /// Fraction of the gap between the EWMA level and the shared model's
    /// forecast that the prediction closes. Zero for plain EWMA.
    pub accuracy_bonus: f64,
    /// When false the first folded sample replaces `level`.
    pub primed: bool,
    pub last_tick: Option<u64>,
}

impl PredictorState {
    pub fn ewma(alpha: f64) -> Self {
        Self {
            kind: PredictorKind::Ewma,
            alpha: alpha.clamp(f64::MIN_POSITIVE, 1.0),
            level: 0.0,
            accuracy_bonus: 0.0,
            primed: false,
            last_tick: None,
        }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level.max(0.0);
        self.primed = true;
        self
    }

    fn model_forecast(&self, tick: u64) -> Option<f64> {
        match &self.kind {
            PredictorKind::SharedModel { profiles, .. } => {
                Some(profiles.iter().map(|p| p.mean_at(tick)).sum())
            }
            PredictorKind::Ewma => None,
        }
    }
}

/// Folds every sample newer than the predictor's last tick into the EWMA
/// level (`level = alpha * x + (1 - alpha) * level`) and predicts. A shared
/// model pulls the prediction toward its own forecast by `accuracy_bonus`.
pub fn analyze(window: &MetricWindow, predictor: &PredictorState) -> (f64, PredictorState) {
    let mut next = predictor.clone();
    for &(tick, value) in &window.samples {
        if next.last_tick.is_some_and(|t| tick <= t) {
            continue;
        }
        if next.primed {
            next.level = next.alpha * value + (1.0 - next.alpha) * next.level;
        } else {
            next.level = value;
            next.primed = true;
        }
        next.last_tick = Some(tick);
    }
    if !next.level.is_finite() || next.level < 0.0 {
        next.level = 0.0;
    }
    let prediction = match next.last_tick.and_then(|t| next.model_forecast(t)) {
        Some(forecast) => next.level + next.accuracy_bonus * (forecast - next.level),
        None => next.level,
    };
    (prediction.max(0.0), next)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PodSpec {
    pub request: ResourceVector,
    pub preferred_node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    ScaleUp(PodSpec),
    ScaleDown(PodId),
    Instantiate(Vec<PodSpec>),
    Terminate(PodId),
    PowerOff(NodeId),
    PowerOn(NodeId),
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::ScaleUp(_) => "scale_up",
            Action::ScaleDown(_) => "scale_down",
            Action::Instantiate(_) => "instantiate",
            Action::Terminate(_) => "terminate",
            Action::PowerOff(_) => "power_off",
            Action::PowerOn(_) => "power_on",
        }
    }

    /// Adds capacity demand or power (as opposed to releasing it).
    pub fn is_acquire(&self) -> bool {
        matches!(self, Action::ScaleUp(_) | Action::Instantiate(_) | Action::PowerOn(_))
    }

    /// Short textual target used in traces.
    pub fn target_label(&self) -> String {
        match self {
            Action::ScaleUp(spec) => spec
                .preferred_node
                .as_ref()
                .map_or_else(|| "-".to_owned(), |n| n.to_string()),
            Action::Instantiate(chain) => chain
                .iter()
                .map(|s| s.preferred_node.as_ref().map_or("-", |n| n.as_str()))
                .collect::<Vec<_>>()
                .join("+"),
            Action::ScaleDown(p) | Action::Terminate(p) => p.to_string(),
            Action::PowerOff(n) | Action::PowerOn(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionIntent {
    pub acl_id: AclId,
    pub tick: u64,
    pub action: Action,
    /// Predicted demand that motivated the action.
    pub rationale: f64,
}

/// What the simulator exposes to agents during monitoring and planning.
#[derive(Debug, Clone, Default)]
pub struct Environment {
    pub tick: u64,
    /// Traffic samples per region, in tick order.
    pub traffic: BTreeMap<RegionId, Vec<(u64, f64)>>,
    /// Slice requests waiting for each instantiator.
    pub slice_requests: BTreeMap<AclId, Vec<Vec<PodSpec>>>,
    /// Tick since which each powered-on node has hosted no pods.
    pub idle_since: BTreeMap<NodeId, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleDirection {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AclAgent {
    pub id: AclId,
    pub role: AgentRole,
    pub scope: BTreeSet<ScopeTarget>,
    pub size: SizeClass,
    pub regions: BTreeSet<RegionId>,
    pub nodes: BTreeSet<NodeId>,
    pub priority: PriorityLevel,
    pub predictor: PredictorState,
    pub trust_list: BTreeSet<AclId>,
    pub lifecycle: Lifecycle,
    pub knowledge: BTreeSet<ArtifactId>,
    pub policy: PlanPolicy,
    pub window_span: u64,
    /// The agent runs its loop on ticks divisible by `period`.
    pub period: u64,
    pub last_scale: Option<(u64, ScaleDirection)>,
    pub receipts: Vec<Receipt>,
}

impl AclAgent {
    pub fn new(
        id: impl Into<AclId>,
        role: AgentRole,
        scope: BTreeSet<ScopeTarget>,
        priority: PriorityLevel,
        nodes: &BTreeMap<NodeId, Node>,
    ) -> Result<Self, AclError> {
        let size = classify_size(&scope, nodes)?;
        let regions = scope_regions(&scope, nodes)?;
        let covered = scope_nodes(&scope, nodes);
        Ok(Self {
            id: id.into(),
            role,
            scope,
            size,
            regions,
            nodes: covered,
            priority,
            predictor: PredictorState::ewma(0.3),
            trust_list: BTreeSet::new(),
            lifecycle: Lifecycle::Active,
            knowledge: BTreeSet::new(),
            policy: PlanPolicy::default(),
            window_span: 10,
            period: 1,
            last_scale: None,
            receipts: Vec::new(),
        })
    }

    pub fn acts_at(&self, tick: u64) -> bool {
        tick.is_multiple_of(self.period.max(1))
    }

    /// A pod this agent would own for `spec`.
    pub fn pod_for(&self, id: impl Into<PodId>, spec: &PodSpec) -> Pod {
        let mut pod = Pod::new(id, self.id.clone(), spec.request, self.priority.clone())
            .with_toleration(Toleration::all(self.id.as_str()));
        pod.preferred_node = spec.preferred_node.clone();
        pod
    }

    /// Remembers the last scale direction for hysteresis.
    pub fn record_plan(&mut self, intents: &[ActionIntent]) {
        for intent in intents {
            let dir = match intent.action {
                Action::ScaleUp(_) => ScaleDirection::Up,
                Action::ScaleDown(_) => ScaleDirection::Down,
                _ => continue,
            };
            self.last_scale = Some((intent.tick, dir));
        }
    }

    fn hysteresis_blocks(&self, tick: u64, dir: ScaleDirection) -> bool {
        matches!(self.last_scale, Some((t, d)) if d != dir && tick.saturating_sub(t) < self.policy.hysteresis_ticks)
    }
}

/// The agent's traffic: the sum over its regions for each of the last
/// `window_span` ticks.
pub fn monitor(env: &Environment, agent: &AclAgent) -> Result<MetricWindow, AclError> {
    if agent.lifecycle == Lifecycle::Suspended {
        return Err(AclError::SuspendedAgent(agent.id.clone()));
    }
    let span = agent.window_span.max(1);
    let oldest = (env.tick + 1).saturating_sub(span);
    let mut per_tick: BTreeMap<u64, f64> = BTreeMap::new();
    for region in &agent.regions {
        if let Some(series) = env.traffic.get(region) {
            for &(tick, value) in series.iter().filter(|(t, _)| *t >= oldest && *t <= env.tick) {
                *per_tick.entry(tick).or_default() += value;
            }
        }
    }
    Ok(MetricWindow {
        target: agent.id.to_string(),
        samples: per_tick.into_iter().collect(),
        span_ticks: span,
    })
}

fn region_saturated(state: &ClusterState, agent: &AclAgent, region: &RegionId) -> bool {
    let mut capacity = ResourceVector::ZERO;
    let mut used = ResourceVector::ZERO;
    for node in state.nodes.values().filter(|n| &n.region == region && !n.is_powered_off()) {
        capacity += node.capacity;
        used += state.used_capacity(&node.id).unwrap_or_default();
    }
    let frac = |u: u64, c: u64| if c == 0 { 1.0 } else { u as f64 / c as f64 };
    let load = frac(used.cpu_millicores, capacity.cpu_millicores).max(frac(used.memory_mib, capacity.memory_mib));
    load >= agent.policy.high_watermark
}

/// Watermark policy turning a prediction into intents.
pub fn plan(prediction: f64, agent: &AclAgent, state: &ClusterState, env: &Environment) -> Vec<ActionIntent> {
    if agent.lifecycle == Lifecycle::Suspended {
        return Vec::new();
    }
    let tick = env.tick;
    let intent = |action| ActionIntent {
        acl_id: agent.id.clone(),
        tick,
        action,
        rationale: prediction,
    };
    match agent.role {
        AgentRole::ResourceManager => {
            let alive: Vec<&Pod> = state
                .pods
                .values()
                .filter(|p| p.owner_acl == agent.id && p.phase.is_alive())
                .collect();
            let capacity = alive.len() as f64 * agent.policy.pod_capacity;
            let load = if capacity > 0.0 {
                prediction / capacity
            } else if prediction > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            if load > agent.policy.high_watermark && !agent.hysteresis_blocks(tick, ScaleDirection::Up) {
                vec![intent(Action::ScaleUp(PodSpec {
                    request: agent.policy.pod_request,
                    preferred_node: agent.policy.preferred_node.clone(),
                }))]
            } else if load < agent.policy.low_watermark
                && alive.len() > agent.policy.min_pods
                && !agent.hysteresis_blocks(tick, ScaleDirection::Down)
            {
                let newest = alive
                    .iter()
                    .max_by_key(|p| (p.created_seq, p.id.clone()))
                    .expect("more than min_pods alive");
                vec![intent(Action::ScaleDown(newest.id.clone()))]
            } else {
                Vec::new()
            }
        }
        AgentRole::SliceInstantiator => env
            .slice_requests
            .get(&agent.id)
            .into_iter()
            .flatten()
            .map(|chain| intent(Action::Instantiate(chain.clone())))
            .collect(),
        AgentRole::EnergySaver => agent
            .nodes
            .iter()
            .filter(|n| state.nodes.get(*n).is_some_and(|node| !node.is_powered_off()))
            .filter(|n| {
                env.idle_since
                    .get(*n)
                    .is_some_and(|since| tick.saturating_sub(*since) >= agent.policy.idle_ticks)
            })
            .map(|n| intent(Action::PowerOff(n.clone())))
            .collect(),
        AgentRole::LoadBalancer => agent
            .nodes
            .iter()
            .filter_map(|n| state.nodes.get(n))
            .filter(|node| node.is_powered_off() && region_saturated(state, agent, &node.region))
            .map(|node| intent(Action::PowerOn(node.id.clone())))
            .collect(),
    }
}

/// Receives intent batches on behalf of the conflict manager.
pub trait IntentSink {
    /// `magnitude` is the agent's output for this period, checked against
    /// its history even when `intents` is empty.
    fn submit(&mut self, acl: &AclId, tick: u64, magnitude: f64, intents: Vec<ActionIntent>) -> Vec<Receipt>;
}

/// Forwards the agent's intents to the conflict manager and keeps the receipts.
pub fn execute(
    agent: &mut AclAgent,
    tick: u64,
    magnitude: f64,
    intents: Vec<ActionIntent>,
    sink: &mut dyn IntentSink,
) -> Result<Vec<Receipt>, AclError> {
    if agent.lifecycle == Lifecycle::Suspended {
        return Err(AclError::SuspendedAgent(agent.id.clone()));
    }
    let receipts = sink.submit(&agent.id, tick, magnitude, intents);
    agent.receipts = receipts.clone();
    Ok(receipts)
}

/// Applies a granted artifact. Models switch the predictor to the shared
/// model; datasets lengthen the monitoring window. Already-held artifacts are
/// a no-op.
pub fn absorb_knowledge(
    agent: &AclAgent,
    artifact: &KnowledgeArtifact,
    grant: Option<&Grant>,
) -> Result<AclAgent, AclError> {
    let no_grant = || AclError::NoGrant {
        agent: agent.id.clone(),
        artifact: artifact.id,
    };
    let grant = grant.ok_or_else(no_grant)?;
    if grant.artifact != artifact.id
        || grant.target != agent.id
        || grant.source != artifact.source
        || grant.kind != artifact.kind()
    {
        return Err(no_grant());
    }
    if agent.knowledge.contains(&artifact.id) {
        return Ok(agent.clone());
    }
    let mut next = agent.clone();
    match &artifact.payload {
        ArtifactPayload::Model { profiles, bonus } => {
            let mine: Vec<RegionProfile> = profiles
                .iter()
                .filter(|p| agent.regions.contains(&p.region))
                .cloned()
                .collect();
            next.predictor.kind = PredictorKind::SharedModel {
                source: artifact.source.clone(),
                profiles: mine,
            };
            next.predictor.accuracy_bonus = bonus.clamp(0.0, 1.0);
        }
        ArtifactPayload::Dataset { sample_count } => {
            next.window_span += sample_count;
        }
    }
    next.knowledge.insert(artifact.id);
    Ok(next)
}
