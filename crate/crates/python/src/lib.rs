use std::collections::{BTreeMap, BTreeSet};

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use sim::acl::{classify_size as classify, ScopeTarget};
use sim::cluster::{ClusterState, Node, Pod, PriorityLevel, ResourceVector, Taint, TaintEffect, Toleration};
use sim::scenario::{builtin, load_scenario, Scenario, BUILTIN};
use sim::scheduler::{coordinate, Decision, RoundEvent, SchedulerUnit};
use sim::sim::World;
use sim::verify::verify_trace as verify;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Accepts a built-in name, a path to a TOML file, or TOML text.
fn resolve(scenario: &str) -> PyResult<Scenario> {
    let text = if let Some(t) = builtin(scenario) {
        t.to_owned()
    } else if std::path::Path::new(scenario).is_file() {
        std::fs::read_to_string(scenario).map_err(value_err)?
    } else {
        scenario.to_owned()
    };
    load_scenario(&text).map_err(value_err)
}

fn effect(name: &str) -> PyResult<TaintEffect> {
    TaintEffect::ALL
        .into_iter()
        .find(|e| e.to_string() == name)
        .ok_or_else(|| value_err(format!("unknown taint effect `{name}`")))
}

#[pyfunction]
fn list_scenarios() -> Vec<&'static str> {
    BUILTIN.iter().map(|(name, _)| *name).collect()
}

/// Runs a scenario to completion. Returns `(trace_text, metrics_json)`.
#[pyfunction]
#[pyo3(signature = (scenario, seed=None, ticks=None))]
fn run_scenario(scenario: &str, seed: Option<u64>, ticks: Option<u64>) -> PyResult<(String, String)> {
    let mut s = resolve(scenario)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(ticks) = ticks {
        s.ticks = ticks;
    }
    let out = sim::sim::run(s).map_err(value_err)?;
    let metrics = serde_json::to_string(&out.metrics).map_err(value_err)?;
    Ok((out.trace.to_text(), metrics))
}

/// Re-runs `scenario` and checks `trace` against it. Returns a list of
/// problems; an empty list means the trace is reproducible and clean.
#[pyfunction]
fn verify_trace(trace: &str, scenario: &str) -> PyResult<Vec<String>> {
    let s = resolve(scenario)?;
    let report = verify(trace, &s).map_err(value_err)?;
    let mut out = Vec::new();
    if let Some(d) = report.divergence {
        out.push(format!(
            "divergence at seq {}: expected {:?}, found {:?}",
            d.seq, d.expected, d.found
        ));
    }
    out.extend(report.violations.iter().map(ToString::to_string));
    Ok(out)
}

/// Size class of a scope such as `["region:calgary"]`, given
/// `{node_id: region}`.
#[pyfunction]
fn classify_size(scope: Vec<String>, nodes: BTreeMap<String, String>) -> PyResult<String> {
    let scope: BTreeSet<ScopeTarget> = scope
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let nodes = nodes
        .into_iter()
        .map(|(id, region)| (id.as_str().into(), Node::new(id.as_str(), region, ResourceVector::ZERO)))
        .collect();
    classify(&scope, &nodes).map(|c| c.to_string()).map_err(value_err)
}

/// A bare cluster with one scheduler unit per ACL.
#[pyclass]
struct Cluster {
    state: ClusterState,
    units: Vec<SchedulerUnit>,
}

#[pymethods]
impl Cluster {
    #[new]
    fn new() -> Self {
        Self {
            state: ClusterState::new([]),
            units: Vec::new(),
        }
    }

    fn add_node(&mut self, id: &str, region: &str, cpu: u64, memory: u64) {
        let node = Node::new(id, region, ResourceVector::new(cpu, memory));
        self.state.nodes.insert(node.id.clone(), node);
    }

    fn taint(&mut self, node: &str, key: &str, effect: &str) -> PyResult<()> {
        self.state = self
            .state
            .apply_taint(&node.into(), Taint::new(key, self::effect(effect)?))
            .map_err(value_err)?;
        Ok(())
    }

    /// Queues a pod with its owner's scheduler unit. The pod tolerates
    /// taints keyed by its owner.
    #[pyo3(signature = (id, owner, cpu, memory, priority=0, preemption=false))]
    fn submit(&mut self, id: &str, owner: &str, cpu: u64, memory: u64, priority: i64, preemption: bool) -> PyResult<()> {
        let level = PriorityLevel::new(owner, priority, preemption);
        let pod = Pod::new(id, owner, ResourceVector::new(cpu, memory), level.clone())
            .with_toleration(Toleration::all(owner));
        self.state = self.state.add_pod(pod).map_err(value_err)?;
        match self.units.iter_mut().find(|u| u.acl_id.as_str() == owner) {
            Some(u) => u.queue.push_back(id.into()),
            None => {
                let mut u = SchedulerUnit::new(owner, level);
                u.queue.push_back(id.into());
                self.units.push(u);
            }
        }
        Ok(())
    }

    /// Runs one scheduling round and returns its events as strings.
    fn schedule(&mut self) -> Vec<String> {
        let outcome = coordinate(&mut self.units, &self.state);
        self.state = outcome.state;
        outcome
            .events
            .into_iter()
            .map(|e| match e {
                RoundEvent::Evicted { pod, node, cause } => format!("evicted {pod} from {node} ({cause:?})"),
                RoundEvent::Decided(Decision::Bound { pod, node }) => format!("bound {pod} to {node}"),
                RoundEvent::Decided(Decision::Preempt { pod, node, victims }) => {
                    format!("bound {pod} to {node} preempting {victims:?}")
                }
                RoundEvent::Decided(Decision::Pending { pod, reason }) => format!("pending {pod} ({reason})"),
            })
            .collect()
    }

    /// `{pod: node or None}` for every live pod.
    fn placements(&self) -> BTreeMap<String, Option<String>> {
        self.state
            .pods
            .values()
            .filter(|p| p.phase.is_alive())
            .map(|p| (p.id.to_string(), p.bound_node().map(ToString::to_string)))
            .collect()
    }
}

/// Step-by-step access to a scenario run.
#[pyclass(unsendable)]
struct Simulation {
    world: World,
}

#[pymethods]
impl Simulation {
    #[new]
    fn new(scenario: &str) -> PyResult<Self> {
        let world = World::new(resolve(scenario)?).map_err(value_err)?;
        Ok(Self { world })
    }

    #[getter]
    fn tick(&self) -> u64 {
        self.world.tick
    }

    fn is_done(&self) -> bool {
        self.world.is_done()
    }

    /// Advances one tick; returns the trace lines it produced.
    fn step(&mut self) -> Vec<String> {
        let before = self.world.trace.events.len();
        self.world.step();
        self.world.trace.events[before..].iter().map(|e| e.to_line()).collect()
    }

    fn run(&mut self) {
        while !self.world.is_done() {
            self.world.step();
        }
    }

    fn placements(&self) -> BTreeMap<String, Option<String>> {
        self.world
            .state
            .pods
            .values()
            .filter(|p| p.phase.is_alive())
            .map(|p| (p.id.to_string(), p.bound_node().map(ToString::to_string)))
            .collect()
    }

    fn lifecycle(&self, acl: &str) -> PyResult<String> {
        self.world
            .agents
            .get(&acl.into())
            .map(|a| a.lifecycle.to_string())
            .ok_or_else(|| PyKeyError::new_err(acl.to_owned()))
    }

    fn trace(&self) -> String {
        self.world.trace.to_text()
    }

    fn metrics(&self) -> PyResult<String> {
        serde_json::to_string(&self.world.metrics).map_err(value_err)
    }
}

#[pymodule]
#[pyo3(name = "icm_sim")]
fn py_icm_sim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(list_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(verify_trace, m)?)?;
    m.add_function(wrap_pyfunction!(classify_size, m)?)?;
    m.add_class::<Cluster>()?;
    m.add_class::<Simulation>()?;
    Ok(())
}
