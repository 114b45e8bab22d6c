//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icm_sim::cluster::{ClusterState, Node, Pod, PodPhase, PriorityLevel, ResourceVector, Taint, TaintEffect, Toleration};
use icm_sim::ids::{AclId, NodeId, PodId};
use icm_sim::scenario::{load_scenario, Scenario};
use icm_sim::scheduler::SchedulerUnit;

pub mod criteria;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture(name: &str) -> Scenario {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture exists");
    load_scenario(&text).expect("fixture parses")
}

pub fn builtin_scenario(name: &str) -> Scenario {
    load_scenario(icm_sim::scenario::builtin(name).expect("builtin exists")).expect("builtin parses")
}

// ---------------------------------------------------------------------------
// Scheduler instances

pub struct Instance {
    pub state: ClusterState,
    pub units: Vec<SchedulerUnit>,
}

const KEYS: [&str; 4] = ["acl0", "acl1", "acl2", "maint"];
const EFFECTS: [TaintEffect; 3] = [TaintEffect::NoSchedule, TaintEffect::PreferNoSchedule, TaintEffect::NoExecute];

/// Up to 4 nodes and 6 pods over up to 3 ACLs. Some pods start bound; taints
/// are applied afterwards so NoExecute evictions happen in the round.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let caps = [(1000, 2048), (2000, 4096)];
    let node_count = rng.random_range(1..=4);
    let nodes: Vec<Node> = (0..node_count)
        .map(|i| {
            let (c, m) = caps[rng.random_range(0..caps.len())];
            Node::new(format!("n{i}"), format!("r{}", i % 2), ResourceVector::new(c, m))
        })
        .collect();

    let acl_count = rng.random_range(1..=3);
    let prios: Vec<PriorityLevel> = (0..acl_count)
        .map(|a| PriorityLevel::new(format!("acl{a}"), [1, 5, 10][rng.random_range(0..3)], rng.random_bool(0.7)))
        .collect();

    let mut state = ClusterState::new(nodes.clone());
    let pod_count = rng.random_range(1..=6);
    let requests = [(500, 1024), (1000, 2048), (1500, 3072)];
    for i in 0..pod_count {
        let a = rng.random_range(0..acl_count);
        let (c, m) = requests[rng.random_range(0..requests.len())];
        let mut pod = Pod::new(format!("p{i}"), format!("acl{a}"), ResourceVector::new(c, m), prios[a].clone());
        pod.created_seq = i as u64;
        if rng.random_bool(0.6) {
            pod = pod.with_toleration(Toleration::all(format!("acl{a}")));
        }
        if rng.random_bool(0.3) {
            let key = KEYS[rng.random_range(0..KEYS.len())];
            let effect = EFFECTS[rng.random_range(0..3)];
            pod = pod.with_toleration(Toleration::new(key, [effect]));
        }
        if rng.random_bool(0.2) {
            pod = pod.with_preferred_node(format!("n{}", rng.random_range(0..node_count)));
        }
        let id = pod.id.clone();
        state = state.add_pod(pod).unwrap();
        // Low-priority pods tend to be running already, so later arrivals
        // have something to preempt.
        let top = prios.iter().map(|p| p.value).max().unwrap();
        if rng.random_bool(if prios[a].value < top { 0.9 } else { 0.3 }) {
            let node: NodeId = format!("n{}", rng.random_range(0..node_count)).into();
            if let Ok(next) = state.bind(&id, &node) {
                state = next;
            }
        }
    }
    for n in &nodes {
        for _ in 0..[0, 0, 1, 2][rng.random_range(0..4)] {
            let key = KEYS[rng.random_range(0..KEYS.len())];
            let effect = EFFECTS[rng.random_range(0..3)];
            state = state.apply_taint(&n.id, Taint::new(key, effect)).unwrap();
        }
    }

    let mut units: Vec<SchedulerUnit> = prios
        .iter()
        .enumerate()
        .map(|(a, p)| SchedulerUnit::new(format!("acl{a}"), p.clone()))
        .collect();
    for pod in state.pods.values().filter(|p| p.phase == PodPhase::Pending) {
        let u = units.iter_mut().find(|u| u.acl_id == pod.owner_acl).unwrap();
        u.queue.push_back(pod.id.clone());
    }
    Instance { state, units }
}

// ---------------------------------------------------------------------------
// Brute-force oracle. Works on plain maps and never calls into the engine's
// filter, score or victim code.

#[derive(Clone, Debug)]
pub struct OPod {
    pub id: String,
    pub owner: String,
    pub cpu: u64,
    pub mem: u64,
    pub prio: i64,
    pub preempt: bool,
    pub tolerated: BTreeSet<(String, TaintEffect)>,
    pub preferred: Option<String>,
    pub node: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ONode {
    pub cpu: u64,
    pub mem: u64,
    pub taints: Vec<(String, TaintEffect)>,
}

#[derive(Clone, Debug)]
pub struct OWorld {
    pub nodes: BTreeMap<String, ONode>,
    pub pods: BTreeMap<String, OPod>,
}

impl OWorld {
    pub fn from_state(state: &ClusterState) -> Self {
        let nodes = state
            .nodes
            .values()
            .map(|n| {
                (
                    n.id.to_string(),
                    ONode {
                        cpu: n.capacity.cpu_millicores,
                        mem: n.capacity.memory_mib,
                        taints: n.taints.iter().map(|t| (t.key.clone(), t.effect)).collect(),
                    },
                )
            })
            .collect();
        let pods = state
            .pods
            .values()
            .filter(|p| p.phase.is_alive())
            .map(|p| {
                let mut tolerated = BTreeSet::new();
                for t in &p.tolerations {
                    for e in &t.effects {
                        tolerated.insert((t.key.clone(), *e));
                    }
                }
                (
                    p.id.to_string(),
                    OPod {
                        id: p.id.to_string(),
                        owner: p.owner_acl.to_string(),
                        cpu: p.request.cpu_millicores,
                        mem: p.request.memory_mib,
                        prio: p.priority.value,
                        preempt: p.priority.preemption_enabled,
                        tolerated,
                        preferred: p.preferred_node.as_ref().map(|n| n.to_string()),
                        node: p.bound_node().map(|n| n.to_string()),
                    },
                )
            })
            .collect();
        Self { nodes, pods }
    }

    pub fn used(&self, node: &str) -> (u64, u64) {
        self.pods
            .values()
            .filter(|p| p.node.as_deref() == Some(node))
            .fold((0, 0), |a, p| (a.0 + p.cpu, a.1 + p.mem))
    }

    fn hard_ok(&self, pod: &OPod, node: &str) -> bool {
        self.nodes[node]
            .taints
            .iter()
            .filter(|(_, e)| *e != TaintEffect::PreferNoSchedule)
            .all(|t| pod.tolerated.contains(t))
    }

    fn fits(&self, pod: &OPod, node: &str) -> bool {
        let (c, m) = self.used(node);
        let n = &self.nodes[node];
        c + pod.cpu <= n.cpu && m + pod.mem <= n.mem
    }

    /// Nodes where the pod could be bound right now.
    pub fn schedulable(&self, pod: &str) -> BTreeSet<String> {
        let p = &self.pods[pod];
        self.nodes
            .keys()
            .filter(|n| self.hard_ok(p, n) && self.fits(p, n))
            .cloned()
            .collect()
    }

    /// Every tolerated node, best first by the documented ranking.
    fn ranked(&self, pod: &OPod) -> Vec<String> {
        let mut v: Vec<(bool, bool, bool, i64, i64, String)> = self
            .nodes
            .iter()
            .filter(|(n, _)| self.hard_ok(pod, n))
            .map(|(n, node)| {
                let (c, m) = self.used(n);
                (
                    pod.preferred.as_deref() != Some(n.as_str()),
                    !node.taints.iter().any(|t| pod.tolerated.contains(t)),
                    node.taints
                        .iter()
                        .any(|t| t.1 == TaintEffect::PreferNoSchedule && !pod.tolerated.contains(t)),
                    -(node.mem.saturating_sub(m) as i64),
                    -(node.cpu.saturating_sub(c) as i64),
                    n.clone(),
                )
            })
            .collect();
        v.sort();
        v.into_iter().map(|t| t.5).collect()
    }

    /// Enumerates every subset of strictly lower-priority pods on `node` and
    /// keeps the smallest by (count, priority sum, sorted ids).
    pub fn min_victims(&self, pod: &OPod, node: &str) -> Option<Vec<String>> {
        let cands: Vec<&OPod> = self
            .pods
            .values()
            .filter(|p| p.node.as_deref() == Some(node) && p.prio < pod.prio)
            .collect();
        let (c, m) = self.used(node);
        let n = &self.nodes[node];
        let mut best: Option<(usize, i64, Vec<String>)> = None;
        for mask in 1u32..(1 << cands.len()) {
            let set: Vec<&OPod> = (0..cands.len()).filter(|i| mask & (1 << i) != 0).map(|i| cands[i]).collect();
            let fc: u64 = set.iter().map(|p| p.cpu).sum();
            let fm: u64 = set.iter().map(|p| p.mem).sum();
            if c - fc + pod.cpu <= n.cpu && m - fm + pod.mem <= n.mem {
                let mut ids: Vec<String> = set.iter().map(|p| p.id.clone()).collect();
                ids.sort();
                let key = (set.len(), set.iter().map(|p| p.prio).sum(), ids);
                if best.as_ref().is_none_or(|b| key < *b) {
                    best = Some(key);
                }
            }
        }
        best.map(|b| b.2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OStep {
    Evict(String),
    Bind(String, String),
    Preempt(String, String, Vec<String>),
    Pending(String),
}

/// Replays one scheduling round: NoExecute sweep, then queues drained by
/// (priority desc, ACL id), victims appended to their owner's queue.
pub fn oracle_round(state: &ClusterState, units: &[SchedulerUnit]) -> (BTreeMap<String, Option<String>>, Vec<OStep>) {
    let mut w = OWorld::from_state(state);
    let mut queues: BTreeMap<String, (i64, VecDeque<String>)> = units
        .iter()
        .map(|u| (u.acl_id.to_string(), (u.priority.value, u.queue.iter().map(|p| p.to_string()).collect())))
        .collect();
    let mut steps = Vec::new();

    let doomed: Vec<String> = w
        .pods
        .values()
        .filter(|p| {
            p.node.as_ref().is_some_and(|n| {
                w.nodes[n]
                    .taints
                    .iter()
                    .any(|t| t.1 == TaintEffect::NoExecute && !p.tolerated.contains(t))
            })
        })
        .map(|p| p.id.clone())
        .collect();
    for id in doomed {
        w.pods.get_mut(&id).unwrap().node = None;
        let owner = w.pods[&id].owner.clone();
        queues.get_mut(&owner).unwrap().1.push_back(id.clone());
        steps.push(OStep::Evict(id));
    }

    loop {
        let next = queues
            .iter()
            .filter(|(_, (_, q))| !q.is_empty())
            .min_by_key(|(acl, (prio, _))| (-*prio, (*acl).clone()))
            .map(|(acl, _)| acl.clone());
        let Some(acl) = next else { break };
        let id = queues.get_mut(&acl).unwrap().1.pop_front().unwrap();
        if w.pods[&id].node.is_some() {
            continue;
        }
        let pod = w.pods[&id].clone();
        let ranked = w.ranked(&pod);
        if let Some(n) = ranked.iter().find(|n| w.fits(&pod, n)) {
            w.pods.get_mut(&id).unwrap().node = Some(n.clone());
            steps.push(OStep::Bind(id, n.clone()));
            continue;
        }
        let mut done = false;
        if pod.preempt {
            for n in &ranked {
                if let Some(victims) = w.min_victims(&pod, n) {
                    for v in &victims {
                        w.pods.get_mut(v).unwrap().node = None;
                        let owner = w.pods[v].owner.clone();
                        queues.get_mut(&owner).unwrap().1.push_back(v.clone());
                    }
                    w.pods.get_mut(&id).unwrap().node = Some(n.clone());
                    steps.push(OStep::Preempt(id.clone(), n.clone(), victims));
                    done = true;
                    break;
                }
            }
        }
        if !done {
            steps.push(OStep::Pending(id));
        }
    }
    let placement = w.pods.values().map(|p| (p.id.clone(), p.node.clone())).collect();
    (placement, steps)
}

pub fn placement_of(state: &ClusterState) -> BTreeMap<String, Option<String>> {
    state
        .pods
        .values()
        .filter(|p| p.phase.is_alive())
        .map(|p| (p.id.to_string(), p.bound_node().map(|n| n.to_string())))
        .collect()
}

pub fn pod_id(s: &str) -> PodId {
    PodId::from(s)
}

pub fn acl_id(s: &str) -> AclId {
    AclId::from(s)
}

// ---------------------------------------------------------------------------
// Random scenarios

/// A random but valid scenario as TOML text: 2-4 nodes over 2 regions, 2-4
/// agents of mixed roles, resident pods, and a handful of injected taints,
/// slice requests and faults.
pub fn random_scenario_toml(seed: u64, ticks: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = format!("name = \"random-{seed}\"\nseed = {seed}\nticks = {ticks}\n\n");
    let node_count = rng.random_range(2..=4);
    let regions = ["calgary", "toronto"];
    let mut free = Vec::new();
    for i in 0..node_count {
        let (c, m) = [(2000, 4096), (4000, 8192), (8000, 16384)][rng.random_range(0..3)];
        free.push((c, m));
        s += &format!(
            "[[nodes]]\nid = \"n{i}\"\nregion = \"{}\"\ncpu = {c}\nmemory = {m}\n\n",
            regions[i % 2]
        );
    }
    s += "[[priorities]]\nname = \"low\"\nvalue = 1\nglobal_default = true\n\n";
    s += "[[priorities]]\nname = \"mid\"\nvalue = 5\npreemption = true\n\n";
    s += "[[priorities]]\nname = \"high\"\nvalue = 10\npreemption = true\n\n";

    let agent_count = rng.random_range(2..=4);
    let mut slicers = Vec::new();
    let mut agents = Vec::new();
    for a in 0..agent_count {
        let id = format!("a{a}");
        let prio = ["low", "mid", "high"][rng.random_range(0..3)];
        let role = rng.random_range(0..4);
        let node = format!("n{}", rng.random_range(0..node_count));
        let region = regions[rng.random_range(0..2)];
        match role {
            0 => {
                s += &format!(
                    "[[agents]]\nid = \"{id}\"\nrole = \"resource-manager\"\nscope = [\"region:{region}\"]\npriority = \"{prio}\"\nperiod = {}\n\n[agents.policy]\npod_cpu = 500\npod_memory = 1024\npod_capacity = {}\nmin_pods = 1\n\n",
                    rng.random_range(1..=3),
                    [20.0, 40.0, 80.0][rng.random_range(0..3)]
                );
            }
            1 => {
                s += &format!(
                    "[[agents]]\nid = \"{id}\"\nrole = \"slice-instantiator\"\nscope = [\"e2e\"]\npriority = \"{prio}\"\n\n"
                );
                slicers.push(id.clone());
            }
            2 => {
                s += &format!(
                    "[[agents]]\nid = \"{id}\"\nrole = \"energy-saver\"\nscope = [\"node:{node}\"]\npriority = \"{prio}\"\n\n[agents.policy]\nidle_ticks = {}\n\n",
                    rng.random_range(2..=6)
                );
            }
            _ => {
                s += &format!(
                    "[[agents]]\nid = \"{id}\"\nrole = \"load-balancer\"\nscope = [\"node:{node}\"]\npriority = \"{prio}\"\n\n"
                );
            }
        }
        agents.push(id);
    }

    for p in 0..rng.random_range(0..=6) {
        let owner = &agents[rng.random_range(0..agents.len())];
        let (c, m) = [(250, 512), (500, 1024), (1000, 2048)][rng.random_range(0..3)];
        s += &format!("[[pods]]\nid = \"r{p}\"\nowner = \"{owner}\"\ncpu = {c}\nmemory = {m}\n");
        let n = rng.random_range(0..node_count);
        if rng.random_bool(0.5) && free[n].0 >= c && free[n].1 >= m {
            free[n] = (free[n].0 - c, free[n].1 - m);
            s += &format!("node = \"n{n}\"\n");
        }
        s += "\n";
    }

    for r in regions {
        s += &format!(
            "[[traffic.regions]]\nregion = \"{r}\"\nbase = {}\namplitude = {}\nperiod = {}\nnoise = {}\n\n",
            rng.random_range(20..150),
            rng.random_range(0..80),
            rng.random_range(8..60),
            rng.random_range(1..20)
        );
    }

    for _ in 0..rng.random_range(0..=6) {
        let tick = rng.random_range(0..ticks);
        match rng.random_range(0..4) {
            0 => {
                let effect = ["NoSchedule", "PreferNoSchedule", "NoExecute"][rng.random_range(0..3)];
                let key = &agents[rng.random_range(0..agents.len())];
                s += &format!(
                    "[[events]]\ntick = {tick}\nkind = \"taint\"\nnode = \"n{}\"\nkey = \"{key}\"\neffect = \"{effect}\"\n\n",
                    rng.random_range(0..node_count)
                );
            }
            1 if !slicers.is_empty() => {
                let acl = &slicers[rng.random_range(0..slicers.len())];
                s += &format!(
                    "[[events]]\ntick = {tick}\nkind = \"slice_request\"\nacl = \"{acl}\"\npods = [{{ cpu = {}, memory = 1024 }}, {{ cpu = 500, memory = 1024, node = \"n{}\" }}]\n\n",
                    [250, 1000, 3000][rng.random_range(0..3)],
                    rng.random_range(0..node_count)
                );
            }
            2 => {
                let acl = &agents[rng.random_range(0..agents.len())];
                s += &format!(
                    "[[events]]\ntick = {tick}\nkind = \"fault\"\nacl = \"{acl}\"\nfactor = 4.0\nduration = {}\n\n",
                    rng.random_range(1..6)
                );
            }
            _ => {
                s += &format!(
                    "[[events]]\ntick = {tick}\nkind = \"untaint\"\nnode = \"n{}\"\nkey = \"{}\"\neffect = \"NoExecute\"\n\n",
                    rng.random_range(0..node_count),
                    agents[0]
                );
            }
        }
    }
    s
}

pub fn random_scenario(seed: u64, ticks: u64) -> Scenario {
    let text = random_scenario_toml(seed, ticks);
    load_scenario(&text).unwrap_or_else(|e| panic!("generated scenario {seed} invalid: {e}\n{text}"))
}
