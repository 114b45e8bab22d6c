//! Replay verification of stored traces and the trace-level invariant suite.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::scenario::{Scenario, ScenarioError};
use crate::sim::run;
use crate::trace::{parse_trace, Record, StoredTrace, TraceError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("trace was produced from a different scenario (trace hash {trace}, scenario hash {scenario})")]
    HashMismatch { trace: String, scenario: String },
    #[error("unreadable trace: {0}")]
    Trace(#[from] TraceError),
    #[error("scenario error: {0}")]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    /// Sequence number of the first differing event.
    pub seq: u64,
    pub expected: Option<String>,
    pub found: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub tick: u64,
    pub seq: u64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] tick {} seq {}: {}", self.rule, self.tick, self.seq, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Report {
    pub divergence: Option<Divergence>,
    pub violations: Vec<Violation>,
}

impl Report {
    pub fn is_clean(&self) -> bool {
        self.divergence.is_none() && self.violations.is_empty()
    }
}

/// Re-runs `scenario`, compares the stored events line by line, and checks
/// the invariant suite against the stored trace.
pub fn verify_trace(text: &str, scenario: &Scenario) -> Result<Report, VerifyError> {
    let stored = parse_trace(text)?;
    let expected_hash = scenario.hash();
    if stored.header.hash != expected_hash {
        return Err(VerifyError::HashMismatch {
            trace: stored.header.hash,
            scenario: expected_hash,
        });
    }
    let rerun = run(scenario.clone())?.trace;
    let fresh: Vec<String> = rerun.events.iter().map(|e| e.to_line()).collect();
    let divergence = (0..stored.lines.len().max(fresh.len()))
        .find(|&i| stored.lines.get(i) != fresh.get(i))
        .map(|i| Divergence {
            seq: i as u64,
            expected: fresh.get(i).cloned(),
            found: stored.lines.get(i).cloned(),
        });
    Ok(Report {
        divergence,
        violations: check_invariants(&stored, scenario),
    })
}

const ICM_KINDS: [&str; 7] = [
    "intent_submitted",
    "verdict",
    "lifecycle",
    "conflict",
    "intent_deferred",
    "intent_dropped",
    "intent_admitted",
];
const SCHEDULER_KINDS: [&str; 4] = ["evicted", "preempt", "bound", "pending"];

#[derive(Debug, Clone)]
struct PodInfo {
    priority: i64,
    cpu: u64,
    memory: u64,
    node: Option<String>,
    alive: bool,
}

/// Checks on the stored trace alone: sequence order, capacity, preemption
/// strictness, requeue liveness, phase ordering, pod conservation and
/// freeze effectiveness.
pub fn check_invariants(stored: &StoredTrace, scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |rule: &'static str, r: &Record, message: String| {
        out.push(Violation {
            rule,
            tick: r.tick,
            seq: r.seq,
            message,
        })
    };
    let capacity: BTreeMap<String, (u64, u64)> = scenario
        .nodes
        .iter()
        .map(|n| (n.id.to_string(), (n.cpu, n.memory)))
        .collect();
    let mut pods: BTreeMap<String, PodInfo> = BTreeMap::new();
    let mut created = 0u64;
    let mut terminated = 0u64;
    let mut last: Option<(u64, u64)> = None;
    let mut scheduler_seen_in_tick: Option<u64> = None;
    let mut evicted_this_tick: BTreeSet<String> = BTreeSet::new();
    let mut decided_this_tick: BTreeSet<String> = BTreeSet::new();
    let mut intent_targets: BTreeMap<u64, (String, String)> = BTreeMap::new();
    let mut freezes: Vec<(String, String, u64, u64)> = Vec::new();

    let used_on = |pods: &BTreeMap<String, PodInfo>, node: &str| {
        pods.values()
            .filter(|p| p.node.as_deref() == Some(node))
            .fold((0u64, 0u64), |acc, p| (acc.0 + p.cpu, acc.1 + p.memory))
    };

    for (i, r) in stored.records.iter().enumerate() {
        if r.seq != i as u64 {
            flag("sequence", r, format!("expected seq {i}, found {}", r.seq));
        }
        if let Some((tick, seq)) = last {
            if r.tick < tick || r.seq <= seq {
                flag("sequence", r, format!("event out of order after tick {tick} seq {seq}"));
            }
            if r.tick != tick {
                let missing: Vec<&String> = evicted_this_tick.difference(&decided_this_tick).collect();
                if !missing.is_empty() {
                    flag("requeue-liveness", r, format!("evicted pods never reconsidered in tick {tick}: {missing:?}"));
                }
                evicted_this_tick.clear();
                decided_this_tick.clear();
            }
        }
        last = Some((r.tick, r.seq));

        let kind = r.kind.as_str();
        if SCHEDULER_KINDS.contains(&kind) {
            scheduler_seen_in_tick = Some(r.tick);
        } else if (ICM_KINDS.contains(&kind) || matches!(kind, "pod_terminated" | "power"))
            && scheduler_seen_in_tick == Some(r.tick)
        {
            flag("phase-order", r, format!("`{kind}` after scheduling events of the same tick"));
        }

        match kind {
            "pod_created" => {
                created += 1;
                let id = r.str("pod").unwrap_or_default().to_owned();
                pods.insert(
                    id,
                    PodInfo {
                        priority: r.i64("priority").unwrap_or(0),
                        cpu: r.u64("cpu").unwrap_or(0),
                        memory: r.u64("memory").unwrap_or(0),
                        node: None,
                        alive: true,
                    },
                );
            }
            "placed" | "bound" => {
                let pod = r.str("pod").unwrap_or_default();
                let node = r.str("node").unwrap_or_default().to_owned();
                match pods.get_mut(pod) {
                    Some(p) if p.alive && p.node.is_none() => p.node = Some(node.clone()),
                    Some(_) => flag("phase", r, format!("pod `{pod}` bound while not pending")),
                    None => flag("phase", r, format!("unknown pod `{pod}`")),
                }
                decided_this_tick.insert(pod.to_owned());
                let used = used_on(&pods, &node);
                match capacity.get(&node) {
                    Some(&(cpu, mem)) if used.0 > cpu || used.1 > mem => flag(
                        "capacity",
                        r,
                        format!("node `{node}` holds ({}, {}) over capacity ({cpu}, {mem})", used.0, used.1),
                    ),
                    None => flag("capacity", r, format!("unknown node `{node}`")),
                    _ => {}
                }
            }
            "evicted" => {
                let pod = r.str("pod").unwrap_or_default();
                match pods.get_mut(pod) {
                    Some(p) if p.node.as_deref() == r.str("node") => p.node = None,
                    _ => flag("phase", r, format!("pod `{pod}` evicted from a node it was not bound to")),
                }
                evicted_this_tick.insert(pod.to_owned());
            }
            "pending" => {
                decided_this_tick.insert(r.str("pod").unwrap_or_default().to_owned());
            }
            "preempt" => {
                let pod = r.str("pod").unwrap_or_default();
                let prio = pods.get(pod).map_or(i64::MIN, |p| p.priority);
                for victim in r.strings("victims") {
                    let vp = pods.get(&victim).map_or(i64::MAX, |p| p.priority);
                    if vp >= prio {
                        flag(
                            "preemption-strictness",
                            r,
                            format!("victim `{victim}` (priority {vp}) is not below `{pod}` (priority {prio})"),
                        );
                    }
                }
            }
            "pod_terminated" => {
                terminated += 1;
                let pod = r.str("pod").unwrap_or_default();
                match pods.get_mut(pod) {
                    Some(p) if p.alive => {
                        p.alive = false;
                        p.node = None;
                    }
                    _ => flag("phase", r, format!("pod `{pod}` terminated twice or unknown")),
                }
            }
            "intent_submitted" => {
                if let (Some(id), Some(action), Some(target)) = (r.u64("intent"), r.str("action"), r.str("target")) {
                    intent_targets.insert(id, (action.to_owned(), target.to_owned()));
                }
            }
            "conflict" if r.str("resolution") == Some("Frozen") => {
                if let (Some(acl), Some(until)) = (r.str("frozen"), r.u64("until")) {
                    for target in r.strings("targets") {
                        freezes.push((acl.to_owned(), target, r.tick, until));
                    }
                }
            }
            "intent_admitted" => {
                let acl = r.str("acl").unwrap_or_default();
                let target = r.u64("intent").and_then(|id| intent_targets.get(&id)).and_then(|(action, target)| {
                    action.starts_with("power_").then(|| format!("power:{target}"))
                });
                if let Some(target) = target {
                    let frozen = freezes
                        .iter()
                        .any(|(a, t, from, until)| a == acl && *t == target && r.tick > *from && r.tick < *until);
                    if frozen {
                        flag("freeze", r, format!("`{acl}` intent on frozen target `{target}` admitted"));
                    }
                }
            }
            "metrics" => {
                let alive = pods.values().filter(|p| p.alive).count() as u64;
                let reported = r.u64("bound").unwrap_or(0) + r.u64("pending").unwrap_or(0);
                if created - terminated != alive || alive != reported {
                    flag(
                        "conservation",
                        r,
                        format!("created {created} - terminated {terminated} vs alive {alive} vs bound+pending {reported}"),
                    );
                }
                let bound = pods.values().filter(|p| p.node.is_some()).count() as u64;
                if Some(bound) != r.u64("bound") {
                    flag("conservation", r, format!("{bound} pods bound by events, metrics report {:?}", r.u64("bound")));
                }
            }
            _ => {}
        }
    }
    if let (Some(last), Some((tick, _))) = (stored.records.last(), last) {
        let missing: Vec<&String> = evicted_this_tick.difference(&decided_this_tick).collect();
        if !missing.is_empty() {
            flag("requeue-liveness", last, format!("evicted pods never reconsidered in tick {tick}: {missing:?}"));
        }
    }
    out
}
