//! Interaction and conflict management between ACLs.
//!
//! The engine collects intent batches from agents, screens them with the
//! coherency check, routes them to a regional instance or the end-to-end
//! instance, arbitrates contention, freezes agents caught in ping-pong
//! interference, and hands the surviving intents back to the simulator.

pub mod broker;
pub mod coherency;
pub mod detect;
pub mod hierarchy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::acl::{AclAgent, ActionIntent, IntentSink, Lifecycle, SizeClass};
use crate::cluster::{ClusterState, PriorityLevel};
use crate::ids::{AclId, NodeId, RegionId};

use broker::KnowledgeBroker;
use coherency::{coherency_check, update_lifecycle, CoherencyBaseline, CoherencyConfig, LifecycleTracker, Verdict};
use detect::{detect_interference, detect_resource_conflicts, resolve, toggle_of, ToggleEntry};
pub use hierarchy::{route, Hierarchy, InstanceId, ParticipantScope, UnknownRegion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntentId(pub u64);

impl fmt::Display for IntentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// Acknowledgement of a submitted intent: where it went and when it will be
/// looked at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub intent: IntentId,
    pub acl: AclId,
    pub instance: InstanceId,
    pub check_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConflictKind {
    ResourceContention,
    Interference,
}

impl fmt::Display for ConflictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    ArbitratedFor(AclId),
    Frozen { acl: AclId, until: u64 },
    Escalated,
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resolution::ArbitratedFor(a) => write!(f, "ArbitratedFor({a})"),
            Resolution::Frozen { acl, until } => write!(f, "Frozen({acl},{until})"),
            Resolution::Escalated => f.write_str("Escalated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub tick: u64,
    pub kind: ConflictKind,
    /// The instance that recorded it.
    pub instance: InstanceId,
    pub participants: BTreeSet<AclId>,
    pub targets: BTreeSet<String>,
    pub intents: BTreeSet<IntentId>,
    pub resolution: Option<Resolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcmConfig {
    pub k_sigma: f64,
    pub window: usize,
    pub min_history: usize,
    pub stddev_floor: f64,
    pub suspend_after: u32,
    pub reinstate_after: u32,
    pub interference_window: u64,
    pub toggle_threshold: usize,
    pub cooldown: u64,
    pub e2e_period: u64,
    /// Share of the forecast gap a received model closes.
    pub knowledge_bonus: f64,
}

impl Default for IcmConfig {
    fn default() -> Self {
        let c = CoherencyConfig::default();
        Self {
            k_sigma: c.k_sigma,
            window: c.window,
            min_history: c.min_history,
            stddev_floor: c.stddev_floor,
            suspend_after: c.suspend_after,
            reinstate_after: c.reinstate_after,
            interference_window: 10,
            toggle_threshold: 3,
            cooldown: 10,
            e2e_period: 5,
            knowledge_bonus: 0.2,
        }
    }
}

impl IcmConfig {
    pub fn coherency(&self) -> CoherencyConfig {
        CoherencyConfig {
            k_sigma: self.k_sigma,
            window: self.window,
            min_history: self.min_history,
            stddev_floor: self.stddev_floor,
            suspend_after: self.suspend_after,
            reinstate_after: self.reinstate_after,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    Anomalous,
    Suspended,
    Frozen,
    /// A newer intent of the same kind on the same target replaced it.
    Superseded,
    Unroutable,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IcmEvent {
    Submitted { intent: IntentId, acl: AclId, action: &'static str, target: String, instance: InstanceId },
    Verdict { acl: AclId, magnitude: f64, verdict: Verdict, mean: f64, stddev: f64 },
    Lifecycle { acl: AclId, from: Lifecycle, to: Lifecycle },
    Conflict(ConflictRecord),
    Deferred { intent: IntentId, acl: AclId },
    Dropped { intent: IntentId, acl: AclId, reason: DropReason },
    Admitted { intent: IntentId, acl: AclId, instance: InstanceId },
}

#[derive(Debug, Clone, Default)]
pub struct IcmOutput {
    pub events: Vec<IcmEvent>,
    /// Intents allowed through this tick, in intent-id order.
    pub admitted: Vec<(IntentId, ActionIntent)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub size: SizeClass,
    pub regions: BTreeSet<RegionId>,
    pub priority: PriorityLevel,
}

impl From<&AclAgent> for AgentInfo {
    fn from(a: &AclAgent) -> Self {
        Self {
            size: a.size,
            regions: a.regions.clone(),
            priority: a.priority.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Batch {
    acl: AclId,
    magnitude: f64,
    intents: Vec<(IntentId, ActionIntent)>,
}

#[derive(Debug, Clone)]
struct Queued {
    id: IntentId,
    intent: ActionIntent,
    instance: InstanceId,
}

#[derive(Debug, Clone)]
pub struct IcmEngine {
    pub config: IcmConfig,
    pub hierarchy: Hierarchy,
    pub broker: KnowledgeBroker,
    agents: BTreeMap<AclId, AgentInfo>,
    baselines: BTreeMap<AclId, CoherencyBaseline>,
    trackers: BTreeMap<AclId, LifecycleTracker>,
    next_intent: u64,
    submitted: Vec<Batch>,
    pending_events: Vec<IcmEvent>,
    deferred: Vec<Queued>,
    e2e_buffer: Vec<Queued>,
    history: Vec<ToggleEntry>,
    freezes: BTreeMap<(AclId, String), u64>,
    escalated: Vec<ConflictRecord>,
}

impl IcmEngine {
    pub fn new(config: IcmConfig, hierarchy: Hierarchy, broker: KnowledgeBroker) -> Self {
        Self {
            config,
            hierarchy,
            broker,
            agents: BTreeMap::new(),
            baselines: BTreeMap::new(),
            trackers: BTreeMap::new(),
            next_intent: 0,
            submitted: Vec::new(),
            pending_events: Vec::new(),
            deferred: Vec::new(),
            e2e_buffer: Vec::new(),
            history: Vec::new(),
            freezes: BTreeMap::new(),
            escalated: Vec::new(),
        }
    }

    pub fn register(&mut self, id: AclId, info: AgentInfo) {
        self.baselines
            .insert(id.clone(), CoherencyBaseline::new(id.clone(), self.config.window));
        self.trackers.insert(id.clone(), LifecycleTracker::default());
        self.agents.insert(id, info);
    }

    pub fn lifecycle(&self, acl: &AclId) -> Lifecycle {
        self.trackers.get(acl).map_or(Lifecycle::Active, |t| t.state)
    }

    pub fn baseline(&self, acl: &AclId) -> Option<&CoherencyBaseline> {
        self.baselines.get(acl)
    }

    /// Operator reinstatement of a suspended agent.
    pub fn release(&mut self, acl: &AclId) -> Option<(Lifecycle, Lifecycle)> {
        let tracker = self.trackers.get_mut(acl)?;
        let from = tracker.state;
        tracker.release();
        Some((from, tracker.state))
    }

    /// Active freezes as `((acl, target), until)`.
    pub fn freezes(&self) -> impl Iterator<Item = (&(AclId, String), &u64)> {
        self.freezes.iter()
    }

    pub fn buffered(&self) -> usize {
        self.e2e_buffer.len()
    }

    fn priorities(&self) -> BTreeMap<AclId, PriorityLevel> {
        self.agents.iter().map(|(a, i)| (a.clone(), i.priority.clone())).collect()
    }

    fn priority_values(&self) -> BTreeMap<AclId, i64> {
        self.agents.iter().map(|(a, i)| (a.clone(), i.priority.value)).collect()
    }

    fn route_acls<'a>(&self, acls: impl IntoIterator<Item = &'a AclId>) -> Result<InstanceId, UnknownRegion> {
        let mut scopes = Vec::new();
        for acl in acls {
            match self.agents.get(acl) {
                Some(info) => scopes.push(ParticipantScope {
                    size: info.size,
                    regions: &info.regions,
                }),
                None => return Ok(InstanceId::E2e),
            }
        }
        route(&scopes, &self.hierarchy)
    }

    fn is_frozen(&self, id: IntentId, intent: &ActionIntent, state: &ClusterState, tick: u64) -> bool {
        let fallback = PriorityLevel::new("unknown", 0, false);
        let priority = self.agents.get(&intent.acl_id).map_or(&fallback, |i| &i.priority);
        toggle_of(id, intent, state, priority).is_some_and(|(target, _)| {
            self.freezes
                .get(&(intent.acl_id.clone(), target))
                .is_some_and(|until| tick < *until)
        })
    }

    /// Runs one ICM processing step for `tick` over everything submitted
    /// since the last call.
    pub fn process_tick(&mut self, tick: u64, state: &ClusterState) -> IcmOutput {
        let mut out = IcmOutput {
            events: std::mem::take(&mut self.pending_events),
            admitted: Vec::new(),
        };
        let cfg = self.config.coherency();

        // Coherency screening of this tick's batches.
        let mut fresh: Vec<(IntentId, ActionIntent)> = Vec::new();
        for batch in std::mem::take(&mut self.submitted) {
            let tracker = self.trackers.entry(batch.acl.clone()).or_default();
            if tracker.state == Lifecycle::Suspended {
                for (id, _) in &batch.intents {
                    out.events.push(IcmEvent::Dropped {
                        intent: *id,
                        acl: batch.acl.clone(),
                        reason: DropReason::Suspended,
                    });
                }
                continue;
            }
            let baseline = self
                .baselines
                .entry(batch.acl.clone())
                .or_insert_with(|| CoherencyBaseline::new(batch.acl.clone(), cfg.window));
            let (mean, stddev) = (baseline.mean(), baseline.stddev());
            let verdict = coherency_check(batch.magnitude, baseline, &cfg);
            out.events.push(IcmEvent::Verdict {
                acl: batch.acl.clone(),
                magnitude: batch.magnitude,
                verdict,
                mean,
                stddev,
            });
            let from = tracker.state;
            let to = update_lifecycle(tracker, verdict, &cfg);
            if from != to {
                out.events.push(IcmEvent::Lifecycle {
                    acl: batch.acl.clone(),
                    from,
                    to,
                });
            }
            if verdict == Verdict::Anomalous || to == Lifecycle::Suspended {
                let reason = if verdict == Verdict::Anomalous {
                    DropReason::Anomalous
                } else {
                    DropReason::Suspended
                };
                for (id, _) in &batch.intents {
                    out.events.push(IcmEvent::Dropped {
                        intent: *id,
                        acl: batch.acl.clone(),
                        reason,
                    });
                }
                continue;
            }
            fresh.extend(batch.intents);
        }

        // Deferred losers re-enter unless superseded by a fresh intent.
        let mut candidates: Vec<(IntentId, ActionIntent)> = Vec::new();
        for q in std::mem::take(&mut self.deferred) {
            let superseded = fresh.iter().any(|(_, f)| {
                f.acl_id == q.intent.acl_id
                    && f.action.name() == q.intent.action.name()
                    && f.action.target_label() == q.intent.action.target_label()
            });
            let reason = if superseded {
                Some(DropReason::Superseded)
            } else if self.lifecycle(&q.intent.acl_id) == Lifecycle::Suspended {
                Some(DropReason::Suspended)
            } else {
                None
            };
            match reason {
                Some(reason) => out.events.push(IcmEvent::Dropped {
                    intent: q.id,
                    acl: q.intent.acl_id.clone(),
                    reason,
                }),
                None => candidates.push((q.id, q.intent)),
            }
        }
        candidates.extend(fresh);
        candidates.sort_by_key(|(id, _)| *id);

        // Route.
        let mut inboxes: BTreeMap<RegionId, Vec<Queued>> = BTreeMap::new();
        for (id, intent) in candidates {
            if self.is_frozen(id, &intent, state, tick) {
                out.events.push(IcmEvent::Dropped {
                    intent: id,
                    acl: intent.acl_id.clone(),
                    reason: DropReason::Frozen,
                });
                continue;
            }
            match self.route_acls([&intent.acl_id]) {
                Ok(InstanceId::Regional(r)) => inboxes.entry(r.clone()).or_default().push(Queued {
                    id,
                    intent,
                    instance: InstanceId::Regional(r),
                }),
                Ok(InstanceId::E2e) => self.e2e_buffer.push(Queued {
                    id,
                    intent,
                    instance: InstanceId::E2e,
                }),
                Err(_) => out.events.push(IcmEvent::Dropped {
                    intent: id,
                    acl: intent.acl_id.clone(),
                    reason: DropReason::Unroutable,
                }),
            }
        }

        let priorities = self.priorities();
        let values = self.priority_values();
        let mut admitted: Vec<Queued> = Vec::new();

        // Regional instances, in region order.
        let regions: Vec<RegionId> = self.hierarchy.regions.iter().cloned().collect();
        for region in regions {
            let inbox = inboxes.remove(&region).unwrap_or_default();
            if inbox.is_empty() {
                continue;
            }
            let instance = InstanceId::Regional(region.clone());
            let region_nodes: BTreeSet<NodeId> = state
                .nodes
                .values()
                .filter(|n| n.region == region)
                .map(|n| n.id.clone())
                .collect();
            let buffered: BTreeSet<IntentId> = self.e2e_buffer.iter().map(|q| q.id).collect();
            let visible: Vec<(IntentId, &ActionIntent)> = inbox
                .iter()
                .chain(self.e2e_buffer.iter())
                .map(|q| (q.id, &q.intent))
                .collect();
            let records = detect_resource_conflicts(&visible, state, &priorities, Some(&region_nodes), tick, &instance);
            let mut settled: BTreeMap<IntentId, bool> = BTreeMap::new();
            let mut escalate: BTreeSet<IntentId> = BTreeSet::new();
            for rec in records {
                let rec = if rec.intents.iter().any(|i| buffered.contains(i)) {
                    escalate.extend(rec.intents.iter().filter(|i| !buffered.contains(i)));
                    ConflictRecord {
                        resolution: Some(Resolution::Escalated),
                        ..rec
                    }
                } else {
                    let rec = resolve(&rec, &values, tick, self.config.cooldown);
                    if let Some(Resolution::ArbitratedFor(w)) = &rec.resolution {
                        for q in inbox.iter().filter(|q| rec.intents.contains(&q.id)) {
                            settled.insert(q.id, q.intent.acl_id == *w);
                        }
                    }
                    rec
                };
                out.events.push(IcmEvent::Conflict(rec));
            }
            for q in inbox {
                if escalate.contains(&q.id) {
                    self.e2e_buffer.push(Queued {
                        instance: InstanceId::E2e,
                        ..q
                    });
                    continue;
                }
                match settled.get(&q.id) {
                    Some(false) => {
                        out.events.push(IcmEvent::Deferred {
                            intent: q.id,
                            acl: q.intent.acl_id.clone(),
                        });
                        self.deferred.push(q);
                    }
                    _ => admitted.push(q),
                }
            }
        }

        // End-to-end instance, on its period only.
        let e2e_tick = self.hierarchy.is_e2e_tick(tick);
        if e2e_tick && !self.e2e_buffer.is_empty() {
            let mut buffer = std::mem::take(&mut self.e2e_buffer);
            buffer.sort_by_key(|q| q.id);
            buffer.retain(|q| {
                let reason = if self.lifecycle(&q.intent.acl_id) == Lifecycle::Suspended {
                    Some(DropReason::Suspended)
                } else if self.is_frozen(q.id, &q.intent, state, tick) {
                    Some(DropReason::Frozen)
                } else {
                    None
                };
                if let Some(reason) = reason {
                    out.events.push(IcmEvent::Dropped {
                        intent: q.id,
                        acl: q.intent.acl_id.clone(),
                        reason,
                    });
                }
                reason.is_none()
            });
            let tagged: Vec<(IntentId, &ActionIntent)> = buffer.iter().map(|q| (q.id, &q.intent)).collect();
            let records = detect_resource_conflicts(&tagged, state, &priorities, None, tick, &InstanceId::E2e);
            let mut settled: BTreeMap<IntentId, bool> = BTreeMap::new();
            for rec in records {
                let rec = resolve(&rec, &values, tick, self.config.cooldown);
                if let Some(Resolution::ArbitratedFor(w)) = &rec.resolution {
                    for q in buffer.iter().filter(|q| rec.intents.contains(&q.id)) {
                        settled.insert(q.id, q.intent.acl_id == *w);
                    }
                }
                out.events.push(IcmEvent::Conflict(rec));
            }
            for q in buffer {
                if settled.get(&q.id) == Some(&false) {
                    out.events.push(IcmEvent::Deferred {
                        intent: q.id,
                        acl: q.intent.acl_id.clone(),
                    });
                    self.deferred.push(q);
                } else {
                    admitted.push(q);
                }
            }
        }
        if e2e_tick {
            for rec in std::mem::take(&mut self.escalated) {
                let rec = ConflictRecord {
                    tick,
                    instance: InstanceId::E2e,
                    ..resolve(&rec, &values, tick, self.config.cooldown)
                };
                self.apply_freeze(&rec);
                out.events.push(IcmEvent::Conflict(rec));
            }
        }

        admitted.sort_by_key(|q| q.id);
        for q in &admitted {
            out.events.push(IcmEvent::Admitted {
                intent: q.id,
                acl: q.intent.acl_id.clone(),
                instance: q.instance.clone(),
            });
            let priority = priorities
                .get(&q.intent.acl_id)
                .cloned()
                .unwrap_or_else(|| PriorityLevel::new("unknown", 0, false));
            if let Some((target, on)) = toggle_of(q.id, &q.intent, state, &priority) {
                self.history.push(ToggleEntry {
                    tick,
                    acl: q.intent.acl_id.clone(),
                    target,
                    on,
                });
            }
        }
        let oldest = (tick + 1).saturating_sub(self.config.interference_window);
        let mut flagged = detect_interference(&self.history, tick, self.config.interference_window, self.config.toggle_threshold);
        for rec in &mut flagged {
            self.history.retain(|e| !rec.targets.contains(&e.target));
            let region = rec
                .targets
                .iter()
                .next()
                .and_then(|t| t.split_once(':'))
                .and_then(|(_, node)| state.nodes.get(&NodeId::from(node)))
                .map(|n| n.region.clone());
            let instance = self.route_acls(&rec.participants).ok();
            let regional = matches!((&instance, &region), (Some(InstanceId::Regional(r)), Some(t)) if r == t);
            if regional || e2e_tick {
                rec.instance = instance.filter(|_| regional).unwrap_or(InstanceId::E2e);
                *rec = ConflictRecord {
                    instance: rec.instance.clone(),
                    ..resolve(rec, &values, tick, self.config.cooldown)
                };
                self.apply_freeze(rec);
            } else {
                rec.instance = region.map_or(InstanceId::E2e, InstanceId::Regional);
                rec.resolution = Some(Resolution::Escalated);
                self.escalated.push(ConflictRecord {
                    resolution: None,
                    ..rec.clone()
                });
            }
            out.events.push(IcmEvent::Conflict(rec.clone()));
        }
        self.history.retain(|e| e.tick >= oldest);
        self.freezes.retain(|_, until| *until > tick);

        out.admitted = admitted.into_iter().map(|q| (q.id, q.intent)).collect();
        out
    }

    fn apply_freeze(&mut self, rec: &ConflictRecord) {
        if let Some(Resolution::Frozen { acl, until }) = &rec.resolution {
            for target in &rec.targets {
                self.freezes.insert((acl.clone(), target.clone()), *until);
            }
        }
    }
}

impl IntentSink for IcmEngine {
    fn submit(&mut self, acl: &AclId, tick: u64, magnitude: f64, intents: Vec<ActionIntent>) -> Vec<Receipt> {
        let instance = self.route_acls([acl]).unwrap_or(InstanceId::E2e);
        let check_tick = self.hierarchy.processing_tick(&instance, tick);
        let mut receipts = Vec::new();
        let mut tagged = Vec::new();
        for intent in intents {
            let id = IntentId(self.next_intent);
            self.next_intent += 1;
            self.pending_events.push(IcmEvent::Submitted {
                intent: id,
                acl: acl.clone(),
                action: intent.action.name(),
                target: intent.action.target_label(),
                instance: instance.clone(),
            });
            receipts.push(Receipt {
                intent: id,
                acl: acl.clone(),
                instance: instance.clone(),
                check_tick,
            });
            tagged.push((id, intent));
        }
        self.submitted.push(Batch {
            acl: acl.clone(),
            magnitude,
            intents: tagged,
        });
        receipts
    }
}
