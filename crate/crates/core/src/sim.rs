//! The discrete-event loop: traffic and injected events, agent MAPE-K
//! loops, ICM processing, materialization, scheduling, metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::Value;

use crate::acl::{
    absorb_knowledge, analyze, execute, monitor, plan, AclAgent, Action, AgentRole, Environment, Lifecycle, PodSpec,
    PredictorState,
};
use crate::cluster::{ClusterState, Pod, PodPhase, PriorityLevel, ResourceVector, Taint, TaintEffect, POWER_OFF_KEY};
use crate::fields;
use crate::icm::broker::{
    ArtifactKind, ArtifactPayload, ExchangeOutcome, ExchangeRequest, KnowledgeArtifact, KnowledgeBroker, TrustList,
};
use crate::icm::coherency::Verdict;
use crate::icm::{ConflictRecord, Hierarchy, IcmEngine, IcmEvent, IntentId, Resolution};
use crate::ids::{AclId, NodeId, PodId, RegionId};
use crate::scenario::{InjectedEvent, PodDef, PriorityDef, Scenario, ScenarioError};
use crate::scheduler::{coordinate, Decision, EvictionCause, RoundEvent, SchedulerUnit};
use crate::trace::{Trace, TraceHeader};
use crate::traffic::TrafficGenerator;

impl From<&PriorityDef> for PriorityLevel {
    fn from(p: &PriorityDef) -> Self {
        PriorityLevel {
            name: p.name.clone(),
            value: p.value,
            preemption_enabled: p.preemption,
            global_default: p.global_default,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PredictionError {
    pub sum: f64,
    pub count: u64,
}

impl PredictionError {
    pub fn mae(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub ticks: u64,
    pub conflicts: BTreeMap<String, u64>,
    pub arbitrations: u64,
    pub escalations: u64,
    pub freezes: u64,
    pub intents_submitted: u64,
    pub intents_admitted: u64,
    pub intents_deferred: u64,
    pub intents_dropped: BTreeMap<String, u64>,
    pub pods_created: u64,
    pub pods_terminated: u64,
    pub bindings: u64,
    pub preemptions: u64,
    pub evictions: u64,
    /// Bindings of pods that had been evicted before.
    pub reschedules: u64,
    /// Pending pods summed over ticks (pod-ticks spent waiting).
    pub pending_pod_ticks: u64,
    /// Longest time any pod has waited in Pending.
    pub max_pending_ticks: u64,
    pub verdicts: BTreeMap<String, u64>,
    pub suspensions: u64,
    pub grants: u64,
    pub denials: BTreeMap<String, u64>,
    /// Per node, per tick: (cpu, memory) utilization fractions.
    pub utilization: BTreeMap<NodeId, Vec<(f64, f64)>>,
    /// Per agent: absolute error of its prediction against the noise-free
    /// traffic mean of its regions.
    pub prediction_error: BTreeMap<AclId, PredictionError>,
}

impl Metrics {
    pub fn conflicts_of(&self, kind: &str) -> u64 {
        self.conflicts.get(kind).copied().unwrap_or(0)
    }

    pub fn mae(&self, acl: &str) -> Option<f64> {
        self.prediction_error.get(&AclId::from(acl)).map(PredictionError::mae)
    }
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::ValidationError(msg.into())
}

fn strings<T: ToString>(items: impl IntoIterator<Item = T>) -> Vec<String> {
    items.into_iter().map(|x| x.to_string()).collect()
}

fn conflict_fields(rec: &ConflictRecord) -> Vec<(&'static str, Value)> {
    let mut f = fields![
        "conflict" => rec.kind.to_string(),
        "instance" => rec.instance.to_string(),
        "participants" => strings(&rec.participants),
        "targets" => strings(&rec.targets),
        "intents" => rec.intents.iter().map(|i| i.0).collect::<Vec<u64>>(),
    ];
    match &rec.resolution {
        Some(Resolution::ArbitratedFor(w)) => {
            f.push(("resolution", "ArbitratedFor".into()));
            f.push(("winner", w.to_string().into()));
        }
        Some(Resolution::Frozen { acl, until }) => {
            f.push(("resolution", "Frozen".into()));
            f.push(("frozen", acl.to_string().into()));
            f.push(("until", (*until).into()));
        }
        Some(Resolution::Escalated) => f.push(("resolution", "Escalated".into())),
        None => f.push(("resolution", Value::Null)),
    }
    f
}

/// Everything that evolves during a run.
#[derive(Debug, Clone)]
pub struct World {
    pub scenario: Scenario,
    pub tick: u64,
    pub state: ClusterState,
    pub agents: BTreeMap<AclId, AclAgent>,
    pub icm: IcmEngine,
    pub units: Vec<SchedulerUnit>,
    pub trace: Trace,
    pub metrics: Metrics,
    traffic: TrafficGenerator,
    traffic_history: BTreeMap<RegionId, Vec<(u64, f64)>>,
    slice_requests: BTreeMap<AclId, Vec<Vec<PodSpec>>>,
    idle_since: BTreeMap<NodeId, u64>,
    faults: BTreeMap<AclId, (f64, u64)>,
    pod_counters: BTreeMap<AclId, u64>,
    next_created_seq: u64,
    pending_since: BTreeMap<PodId, u64>,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let nodes = scenario.node_map();
        let mut state = ClusterState::new(nodes.values().cloned());

        let mut agents = BTreeMap::new();
        for def in &scenario.agents {
            let priority: PriorityLevel = scenario.agent_priority(def).expect("validated").into();
            let scope = def.scope.iter().cloned().collect();
            let mut agent = AclAgent::new(def.id.clone(), def.role, scope, priority, &nodes)
                .map_err(|e| invalid(format!("agent `{}`: {e}", def.id)))?;
            agent.period = def.period;
            agent.window_span = def.window;
            agent.predictor = PredictorState::ewma(def.alpha);
            agent.policy = def.policy.to_policy();
            agents.insert(def.id.clone(), agent);
        }

        let trust_lists: BTreeMap<AclId, TrustList> = scenario
            .trust
            .iter()
            .map(|t| {
                let list = TrustList::new(t.owner.clone(), t.allow.iter().map(|e| (e.acl.clone(), e.kind)));
                (t.owner.clone(), list)
            })
            .collect();
        for agent in agents.values_mut() {
            if let Some(list) = trust_lists.get(&agent.id) {
                agent.trust_list = list.entries().map(|(a, _)| a.clone()).collect();
            }
        }
        let hierarchy = Hierarchy::new(scenario.regions(), scenario.icm.e2e_period);
        let mut icm = IcmEngine::new(scenario.icm, hierarchy, KnowledgeBroker::new(trust_lists));
        for agent in agents.values() {
            icm.register(agent.id.clone(), agent.into());
        }

        let mut units: Vec<SchedulerUnit> = agents
            .values()
            .map(|a| SchedulerUnit::new(a.id.clone(), a.priority.clone()))
            .collect();
        let header = TraceHeader::new(&scenario.name, &scenario.hash(), scenario.seed, scenario.ticks);
        let mut trace = Trace::new(header);
        let mut metrics = Metrics::default();
        let mut next_created_seq = 0;
        let mut pending_since = BTreeMap::new();
        for def in &scenario.pods {
            let pod = resident_pod(&scenario, def, next_created_seq);
            next_created_seq += 1;
            state = state
                .add_pod(pod.clone())
                .map_err(|e| invalid(format!("pod `{}`: {e}", def.id)))?;
            metrics.pods_created += 1;
            trace.push(
                0,
                "pod_created",
                fields![
                    "pod" => def.id.as_str(),
                    "owner" => def.owner.to_string(),
                    "priority" => pod.priority.value,
                    "cpu" => def.cpu,
                    "memory" => def.memory,
                ],
            );
            match &def.node {
                Some(node) => {
                    state = state
                        .bind(&pod.id, node)
                        .map_err(|e| invalid(format!("pod `{}` on `{node}`: {e}", def.id)))?;
                    trace.push(0, "placed", fields!["pod" => def.id.as_str(), "node" => node.to_string()]);
                }
                None => {
                    pending_since.insert(pod.id.clone(), 0);
                    match units.iter_mut().find(|u| u.acl_id == pod.owner_acl) {
                        Some(u) => u.queue.push_back(pod.id.clone()),
                        None => {
                            let mut u = SchedulerUnit::new(pod.owner_acl.clone(), pod.priority.clone());
                            u.queue.push_back(pod.id.clone());
                            units.push(u);
                        }
                    }
                }
            }
        }
        let traffic = TrafficGenerator::new(scenario.seed, scenario.traffic.regions.iter().cloned());
        Ok(Self {
            scenario,
            tick: 0,
            state,
            agents,
            icm,
            units,
            trace,
            metrics,
            traffic,
            traffic_history: BTreeMap::new(),
            slice_requests: BTreeMap::new(),
            idle_since: BTreeMap::new(),
            faults: BTreeMap::new(),
            pod_counters: BTreeMap::new(),
            next_created_seq,
            pending_since,
        })
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.scenario.ticks
    }

    fn emit(&mut self, kind: &'static str, fields: Vec<(&'static str, Value)>) {
        self.trace.push(self.tick, kind, fields);
    }

    /// Advances one tick through the seven phases.
    pub fn step(&mut self) {
        let t = self.tick;
        self.phase_inputs(t);
        self.phase_agents(t);
        self.phase_icm(t);
        self.phase_schedule(t);
        self.phase_metrics(t);
        self.tick += 1;
    }

    fn phase_inputs(&mut self, t: u64) {
        let keep = self.agents.values().map(|a| a.window_span).max().unwrap_or(1) + 1;
        for (region, value) in self.traffic.sample(t) {
            let series = self.traffic_history.entry(region).or_default();
            series.push((t, value));
            if series.len() as u64 > keep {
                let excess = series.len() - keep as usize;
                series.drain(..excess);
            }
        }
        let events: Vec<InjectedEvent> = self
            .scenario
            .events
            .iter()
            .filter(|e| e.tick == t)
            .map(|e| e.event.clone())
            .collect();
        for event in events {
            self.inject(t, event);
        }
    }

    fn inject(&mut self, t: u64, event: InjectedEvent) {
        match event {
            InjectedEvent::Taint { node, key, effect } => {
                self.state = self
                    .state
                    .apply_taint(&node, Taint::new(key.clone(), effect))
                    .expect("validated node");
                self.emit("taint_applied", fields!["node" => node.to_string(), "key" => key, "effect" => format!("{effect:?}")]);
            }
            InjectedEvent::Untaint { node, key, effect } => {
                self.state = self
                    .state
                    .remove_taint(&node, &Taint::new(key.clone(), effect))
                    .expect("validated node");
                self.emit("taint_removed", fields!["node" => node.to_string(), "key" => key, "effect" => format!("{effect:?}")]);
            }
            InjectedEvent::SliceRequest { acl, pods } => {
                let chain: Vec<PodSpec> = pods
                    .iter()
                    .map(|p| PodSpec {
                        request: ResourceVector::new(p.cpu, p.memory),
                        preferred_node: p.node.clone(),
                    })
                    .collect();
                self.emit("slice_requested", fields!["acl" => acl.to_string(), "pods" => chain.len()]);
                self.slice_requests.entry(acl).or_default().push(chain);
            }
            InjectedEvent::KnowledgeRequest { source, target, artifact } => {
                self.exchange(source, target, artifact);
            }
            InjectedEvent::Fault { acl, factor, duration } => {
                self.faults.insert(acl.clone(), (factor, t + duration));
                self.emit("fault_injected", fields!["acl" => acl.to_string(), "factor" => factor, "until" => t + duration]);
            }
            InjectedEvent::Release { acl } => {
                if let Some((from, to)) = self.icm.release(&acl) {
                    if let Some(agent) = self.agents.get_mut(&acl) {
                        agent.lifecycle = to;
                    }
                    self.emit("released", fields!["acl" => acl.to_string(), "from" => from.to_string(), "to" => to.to_string()]);
                }
            }
        }
    }

    fn exchange(&mut self, source: AclId, target: AclId, kind: ArtifactKind) {
        let request = ExchangeRequest {
            source: source.clone(),
            target: target.clone(),
            kind,
        };
        let lifecycle = self.icm.lifecycle(&source);
        match self.icm.broker.request(&request, lifecycle) {
            ExchangeOutcome::Denied(reason) => {
                *self.metrics.denials.entry(reason.to_string()).or_default() += 1;
                self.emit(
                    "exchange",
                    fields![
                        "source" => source.to_string(),
                        "target" => target.to_string(),
                        "artifact" => kind.to_string(),
                        "outcome" => "denied",
                        "reason" => reason.to_string(),
                    ],
                );
            }
            ExchangeOutcome::Granted(grant) => {
                self.metrics.grants += 1;
                self.emit(
                    "exchange",
                    fields![
                        "source" => source.to_string(),
                        "target" => target.to_string(),
                        "artifact" => kind.to_string(),
                        "outcome" => "granted",
                        "id" => grant.artifact.0,
                    ],
                );
                let payload = match kind {
                    ArtifactKind::Model => ArtifactPayload::Model {
                        profiles: self.traffic.profiles().cloned().collect(),
                        bonus: self.scenario.icm.knowledge_bonus,
                    },
                    ArtifactKind::Dataset => ArtifactPayload::Dataset {
                        sample_count: self.agents.get(&source).map_or(0, |a| a.window_span),
                    },
                };
                let artifact = KnowledgeArtifact {
                    id: grant.artifact,
                    source: source.clone(),
                    payload,
                };
                let redeemed = self.icm.broker.redeem(&grant).is_ok();
                let absorbed = match self.agents.get(&target) {
                    Some(agent) if redeemed => absorb_knowledge(agent, &artifact, Some(&grant)).ok(),
                    _ => None,
                };
                if let Some(next) = absorbed {
                    self.agents.insert(target.clone(), next);
                    self.emit(
                        "knowledge_absorbed",
                        fields!["acl" => target.to_string(), "source" => source.to_string(), "id" => grant.artifact.0],
                    );
                }
            }
        }
    }

    fn environment(&self, t: u64) -> Environment {
        Environment {
            tick: t,
            traffic: self.traffic_history.clone(),
            slice_requests: self.slice_requests.clone(),
            idle_since: self.idle_since.clone(),
        }
    }

    fn phase_agents(&mut self, t: u64) {
        let env = self.environment(t);
        let ids: Vec<AclId> = self.agents.keys().cloned().collect();
        for id in ids {
            let mut agent = self.agents[&id].clone();
            if agent.lifecycle == Lifecycle::Suspended || !agent.acts_at(t) {
                continue;
            }
            let Ok(window) = monitor(&env, &agent) else { continue };
            let (prediction, predictor) = analyze(&window, &agent.predictor);
            agent.predictor = predictor;
            if !agent.regions.is_empty() && !window.samples.is_empty() {
                let truth: f64 = agent
                    .regions
                    .iter()
                    .filter_map(|r| self.traffic.profile(r))
                    .map(|p| p.mean_at(t))
                    .sum();
                let err = self.metrics.prediction_error.entry(id.clone()).or_default();
                err.sum += (prediction - truth).abs();
                err.count += 1;
            }
            let factor = match self.faults.get(&id) {
                Some((f, until)) if t < *until => *f,
                _ => 1.0,
            };
            let magnitude = prediction * factor;
            let intents = plan(magnitude, &agent, &self.state, &env);
            agent.record_plan(&intents);
            if agent.role == AgentRole::SliceInstantiator {
                self.slice_requests.remove(&id);
            }
            let _ = execute(&mut agent, t, magnitude, intents, &mut self.icm);
            self.agents.insert(id, agent);
        }
    }

    fn phase_icm(&mut self, t: u64) {
        let out = self.icm.process_tick(t, &self.state);
        let mut actions: BTreeMap<IntentId, &'static str> = BTreeMap::new();
        for event in out.events {
            match event {
                IcmEvent::Submitted { intent, acl, action, target, instance } => {
                    self.metrics.intents_submitted += 1;
                    actions.insert(intent, action);
                    self.emit(
                        "intent_submitted",
                        fields![
                            "intent" => intent.0,
                            "acl" => acl.to_string(),
                            "action" => action,
                            "target" => target,
                            "instance" => instance.to_string(),
                        ],
                    );
                }
                IcmEvent::Verdict { acl, magnitude, verdict, mean, stddev } => {
                    *self.metrics.verdicts.entry(verdict.to_string()).or_default() += 1;
                    if verdict == Verdict::Anomalous {
                        self.emit(
                            "verdict",
                            fields![
                                "acl" => acl.to_string(),
                                "verdict" => verdict.to_string(),
                                "magnitude" => magnitude,
                                "mean" => mean,
                                "stddev" => stddev,
                            ],
                        );
                    }
                }
                IcmEvent::Lifecycle { acl, from, to } => {
                    if to == Lifecycle::Suspended {
                        self.metrics.suspensions += 1;
                    }
                    if let Some(agent) = self.agents.get_mut(&acl) {
                        agent.lifecycle = to;
                    }
                    self.emit("lifecycle", fields!["acl" => acl.to_string(), "from" => from.to_string(), "to" => to.to_string()]);
                }
                IcmEvent::Conflict(rec) => {
                    *self.metrics.conflicts.entry(rec.kind.to_string()).or_default() += 1;
                    match rec.resolution {
                        Some(Resolution::ArbitratedFor(_)) => self.metrics.arbitrations += 1,
                        Some(Resolution::Frozen { .. }) => self.metrics.freezes += 1,
                        Some(Resolution::Escalated) => self.metrics.escalations += 1,
                        None => {}
                    }
                    self.emit("conflict", conflict_fields(&rec));
                }
                IcmEvent::Deferred { intent, acl } => {
                    self.metrics.intents_deferred += 1;
                    self.emit("intent_deferred", fields!["intent" => intent.0, "acl" => acl.to_string(), "retry" => t + 1]);
                }
                IcmEvent::Dropped { intent, acl, reason } => {
                    *self.metrics.intents_dropped.entry(reason.to_string()).or_default() += 1;
                    self.emit("intent_dropped", fields!["intent" => intent.0, "acl" => acl.to_string(), "reason" => reason.to_string()]);
                }
                IcmEvent::Admitted { intent, acl, instance } => {
                    self.metrics.intents_admitted += 1;
                    self.emit("intent_admitted", fields!["intent" => intent.0, "acl" => acl.to_string(), "instance" => instance.to_string()]);
                }
            }
        }
        for agent in self.agents.values_mut() {
            agent.lifecycle = self.icm.lifecycle(&agent.id);
        }
        for (id, intent) in out.admitted {
            self.materialize(t, id, intent.acl_id, intent.action);
        }
    }

    fn next_pod_id(&mut self, acl: &AclId) -> PodId {
        loop {
            let n = self.pod_counters.entry(acl.clone()).or_default();
            let id = PodId::from(format!("{acl}-{n}"));
            *n += 1;
            if !self.state.pods.contains_key(&id) {
                return id;
            }
        }
    }

    fn create_pod(&mut self, t: u64, intent: IntentId, acl: &AclId, spec: &PodSpec) {
        let id = self.next_pod_id(acl);
        let mut pod = match self.agents.get(acl) {
            Some(agent) => agent.pod_for(id.clone(), spec),
            None => Pod::new(id.clone(), acl.clone(), spec.request, PriorityLevel::new("unknown", 0, false)),
        };
        pod.created_seq = self.next_created_seq;
        self.next_created_seq += 1;
        let priority = pod.priority.clone();
        self.state = self.state.add_pod(pod).expect("fresh pod id");
        self.pending_since.insert(id.clone(), t);
        self.metrics.pods_created += 1;
        match self.units.iter_mut().find(|u| u.acl_id == *acl) {
            Some(u) => u.queue.push_back(id.clone()),
            None => {
                let mut u = SchedulerUnit::new(acl.clone(), priority.clone());
                u.queue.push_back(id.clone());
                self.units.push(u);
            }
        }
        self.emit(
            "pod_created",
            fields![
                "pod" => id.to_string(),
                "owner" => acl.to_string(),
                "priority" => priority.value,
                "cpu" => spec.request.cpu_millicores,
                "memory" => spec.request.memory_mib,
                "intent" => intent.0,
            ],
        );
    }

    fn materialize(&mut self, t: u64, intent: IntentId, acl: AclId, action: Action) {
        match action {
            Action::ScaleUp(spec) => self.create_pod(t, intent, &acl, &spec),
            Action::Instantiate(chain) => {
                for spec in &chain {
                    self.create_pod(t, intent, &acl, spec);
                }
            }
            Action::ScaleDown(pod) | Action::Terminate(pod) => {
                let alive = self.state.pods.get(&pod).is_some_and(|p| p.phase.is_alive());
                if alive {
                    self.state = self.state.terminate(&pod).expect("alive pod terminates");
                    self.pending_since.remove(&pod);
                    for u in &mut self.units {
                        u.queue.retain(|p| *p != pod);
                    }
                    self.metrics.pods_terminated += 1;
                    self.emit("pod_terminated", fields!["pod" => pod.to_string(), "acl" => acl.to_string(), "intent" => intent.0]);
                } else {
                    self.emit("intent_stale", fields!["intent" => intent.0, "acl" => acl.to_string(), "target" => pod.to_string()]);
                }
            }
            Action::PowerOff(node) => {
                let taint = Taint::new(POWER_OFF_KEY, TaintEffect::NoExecute);
                self.state = self.state.apply_taint(&node, taint).expect("known node");
                self.emit("power", fields!["node" => node.to_string(), "state" => "off", "acl" => acl.to_string(), "intent" => intent.0]);
            }
            Action::PowerOn(node) => {
                let taint = Taint::new(POWER_OFF_KEY, TaintEffect::NoExecute);
                self.state = self.state.remove_taint(&node, &taint).expect("known node");
                self.emit("power", fields!["node" => node.to_string(), "state" => "on", "acl" => acl.to_string(), "intent" => intent.0]);
            }
        }
    }

    fn phase_schedule(&mut self, t: u64) {
        let outcome = coordinate(&mut self.units, &self.state);
        self.state = outcome.state;
        for event in outcome.events {
            match event {
                RoundEvent::Evicted { pod, node, cause } => {
                    self.metrics.evictions += 1;
                    self.pending_since.insert(pod.clone(), t);
                    let (cause, by) = match cause {
                        EvictionCause::NoExecute => ("NoExecute", Value::Null),
                        EvictionCause::PreemptedBy(p) => ("Preempted", Value::from(p.to_string())),
                    };
                    self.emit("evicted", fields!["pod" => pod.to_string(), "node" => node.to_string(), "cause" => cause, "by" => by]);
                }
                RoundEvent::Decided(Decision::Bound { pod, node }) => self.record_binding(pod, node),
                RoundEvent::Decided(Decision::Preempt { pod, node, victims }) => {
                    self.metrics.preemptions += 1;
                    self.emit(
                        "preempt",
                        fields!["pod" => pod.to_string(), "node" => node.to_string(), "victims" => strings(&victims)],
                    );
                    self.record_binding(pod, node);
                }
                RoundEvent::Decided(Decision::Pending { pod, reason }) => {
                    self.emit("pending", fields!["pod" => pod.to_string(), "reason" => reason]);
                }
            }
        }
        for (id, node) in &self.state.nodes {
            let busy = self.state.bindings.values().any(|n| n == id);
            if node.is_powered_off() || busy {
                self.idle_since.remove(id);
            } else {
                self.idle_since.entry(id.clone()).or_insert(t);
            }
        }
    }

    fn record_binding(&mut self, pod: PodId, node: NodeId) {
        self.metrics.bindings += 1;
        let evicted_before = self.state.pods.get(&pod).is_some_and(|p| p.evictions > 0);
        if evicted_before {
            self.metrics.reschedules += 1;
        }
        self.pending_since.remove(&pod);
        self.emit("bound", fields!["pod" => pod.to_string(), "node" => node.to_string()]);
    }

    fn phase_metrics(&mut self, t: u64) {
        let pending: Vec<&Pod> = self
            .state
            .pods
            .values()
            .filter(|p| p.phase == PodPhase::Pending)
            .collect();
        self.metrics.pending_pod_ticks += pending.len() as u64;
        let oldest_wait = pending
            .iter()
            .filter_map(|p| self.pending_since.get(&p.id))
            .map(|since| t - since)
            .max()
            .unwrap_or(0);
        self.metrics.max_pending_ticks = self.metrics.max_pending_ticks.max(oldest_wait);
        let mut cpu = Vec::new();
        let mut mem = Vec::new();
        for (id, node) in &self.state.nodes {
            let used = self.state.used_capacity(id).unwrap_or_default();
            let frac = |u: u64, c: u64| if c == 0 { 0.0 } else { u as f64 / c as f64 };
            let sample = (
                frac(used.cpu_millicores, node.capacity.cpu_millicores),
                frac(used.memory_mib, node.capacity.memory_mib),
            );
            cpu.push(sample.0);
            mem.push(sample.1);
            self.metrics.utilization.entry(id.clone()).or_default().push(sample);
        }
        let bound = self.state.bindings.len();
        let powered_off = self.state.nodes.values().filter(|n| n.is_powered_off()).count();
        let suspended: BTreeSet<String> = self
            .agents
            .values()
            .filter(|a| a.lifecycle == Lifecycle::Suspended)
            .map(|a| a.id.to_string())
            .collect();
        self.metrics.ticks = t + 1;
        self.emit(
            "metrics",
            fields![
                "bound" => bound,
                "pending" => pending.len(),
                "powered_off" => powered_off,
                "suspended" => suspended.into_iter().collect::<Vec<_>>(),
                "cpu_util" => cpu,
                "mem_util" => mem,
            ],
        );
    }
}

fn resident_pod(scenario: &Scenario, def: &PodDef, created_seq: u64) -> Pod {
    let priority: PriorityLevel = scenario.pod_priority(def).expect("validated").into();
    let mut pod = Pod::new(def.id.as_str(), def.owner.clone(), ResourceVector::new(def.cpu, def.memory), priority);
    pod.tolerations = match &def.tolerations {
        Some(list) => list.iter().map(Into::into).collect(),
        None => vec![crate::cluster::Toleration::all(def.owner.as_str())],
    };
    pod.created_seq = created_seq;
    pod
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: Metrics,
    pub world: World,
}

pub fn run(scenario: Scenario) -> Result<RunOutput, ScenarioError> {
    let mut world = World::new(scenario)?;
    while !world.is_done() {
        world.step();
    }
    Ok(RunOutput {
        trace: world.trace.clone(),
        metrics: world.metrics.clone(),
        world,
    })
}
