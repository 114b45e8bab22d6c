//! One check per acceptance criterion. Each returns a short detail line on
//! success and the first mismatch on failure.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use icm_sim::cluster::PodPhase;
use icm_sim::icm::coherency::{coherency_check, CoherencyBaseline, CoherencyConfig, Verdict};
use icm_sim::ids::AclId;
use icm_sim::scenario::{InjectedEvent, Scenario};
use icm_sim::scheduler::{coordinate, filter_nodes, Decision, RoundEvent};
use icm_sim::sim::{run, World};
use icm_sim::trace::{parse_trace, Record, StoredTrace};
use icm_sim::verify::{check_invariants, verify_trace};

use super::*;

pub type Outcome = Result<String, String>;
pub type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn run_stored(scenario: &Scenario) -> (StoredTrace, icm_sim::sim::RunOutput, Duration) {
    let start = Instant::now();
    let out = run(scenario.clone()).expect("scenario runs");
    let elapsed = start.elapsed();
    let stored = parse_trace(&out.trace.to_text()).expect("own trace parses");
    (stored, out, elapsed)
}

fn of_kind<'a>(t: &'a StoredTrace, kind: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
    t.records.iter().filter(move |r| r.kind == kind)
}

fn bound_node(out: &icm_sim::sim::RunOutput, pod: &str) -> Option<String> {
    out.world.state.pods.get(&pod_id(pod)).and_then(|p| match &p.phase {
        PodPhase::Bound(n) => Some(n.to_string()),
        _ => None,
    })
}

pub fn criterion_1() -> Outcome {
    let (t, out, elapsed) = run_stored(&builtin_scenario("case1"));
    let acl_pods = |acl: &str| -> Vec<String> {
        out.world
            .state
            .pods
            .values()
            .filter(|p| p.owner_acl.as_str() == acl)
            .map(|p| p.id.to_string())
            .collect()
    };
    let (a1, a2) = (acl_pods("acl1"), acl_pods("acl2"));
    ensure!(a1.len() == 1 && a2.len() == 1, "expected one pod per ACL, found {a1:?} {a2:?}");
    ensure!(
        bound_node(&out, &a1[0]).as_deref() == Some("edge-waterloo"),
        "ACL1 pod placed at {:?}",
        bound_node(&out, &a1[0])
    );
    ensure!(
        bound_node(&out, &a2[0]).as_deref() == Some("core-toronto"),
        "ACL2 pod placed at {:?}",
        bound_node(&out, &a2[0])
    );
    let conflicts: Vec<&Record> = of_kind(&t, "conflict").collect();
    ensure!(conflicts.len() == 1, "expected one conflict record, found {}", conflicts.len());
    let c = conflicts[0];
    ensure!(
        c.str("conflict") == Some("ResourceContention")
            && c.str("resolution") == Some("ArbitratedFor")
            && c.str("winner") == Some("acl1"),
        "conflict record {:?}",
        c.fields
    );
    ensure!(elapsed < Duration::from_secs(1), "runtime {elapsed:?}");
    Ok(format!("acl1 -> edge-waterloo, acl2 -> core-toronto, ArbitratedFor(acl1); {elapsed:?}"))
}

pub fn criterion_2() -> Outcome {
    let (t, out, elapsed) = run_stored(&builtin_scenario("case2"));
    let acl1: Vec<String> = out
        .world
        .state
        .pods
        .values()
        .filter(|p| p.owner_acl.as_str() == "acl1")
        .map(|p| p.id.to_string())
        .collect();
    ensure!(acl1.len() == 1, "expected one ACL1 pod, found {acl1:?}");
    ensure!(
        bound_node(&out, &acl1[0]).as_deref() == Some("edge-waterloo"),
        "ACL1 pod at {:?}",
        bound_node(&out, &acl1[0])
    );
    for (pod, target) in [("acl2-r0", "edge-calgary"), ("acl3-r0", "core-toronto")] {
        let evicted = of_kind(&t, "evicted").find(|r| r.str("pod") == Some(pod));
        let rebound = of_kind(&t, "bound").find(|r| r.str("pod") == Some(pod));
        ensure!(evicted.is_some(), "{pod} never evicted");
        ensure!(
            rebound.is_some_and(|b| b.seq > evicted.unwrap().seq && b.str("node") == Some(target)),
            "{pod} not rebound to {target}: {:?}",
            rebound.map(|r| &r.fields)
        );
        ensure!(bound_node(&out, pod).as_deref() == Some(target), "{pod} ends on {:?}", bound_node(&out, pod));
    }
    // Pods that were on edge-calgary before the taint.
    let calgary_residents: Vec<String> = of_kind(&t, "placed")
        .filter(|r| r.str("node") == Some("edge-calgary"))
        .filter_map(|r| r.str("pod").map(str::to_owned))
        .collect();
    for pod in &calgary_residents {
        let disturbed = t
            .records
            .iter()
            .any(|r| matches!(r.kind.as_str(), "evicted" | "pod_terminated") && r.str("pod") == Some(pod));
        ensure!(!disturbed, "edge-calgary resident {pod} was disturbed");
    }
    ensure!(elapsed < Duration::from_secs(1), "runtime {elapsed:?}");
    Ok(format!(
        "acl2-r0 -> edge-calgary, acl3-r0 -> core-toronto, {} calgary residents untouched; {elapsed:?}",
        calgary_residents.len()
    ))
}

/// Compares one round of the engine with the brute-force replay.
pub fn oracle_mismatch(seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_instance(&mut rng);

    let world = OWorld::from_state(&inst.state);
    for pod in inst.state.pods.values().filter(|p| p.phase == PodPhase::Pending) {
        let engine: BTreeSet<String> = filter_nodes(pod, &inst.state)
            .into_iter()
            .filter(|n| inst.state.fits(pod, n).unwrap())
            .map(|n| n.to_string())
            .collect();
        let oracle = world.schedulable(pod.id.as_str());
        if engine != oracle {
            return Some(format!("seed {seed}: schedulable set for {}: engine {engine:?}, oracle {oracle:?}", pod.id));
        }
    }

    let mut units = inst.units.clone();
    let outcome = coordinate(&mut units, &inst.state);
    let mut steps = Vec::new();
    for e in &outcome.events {
        match e {
            RoundEvent::Evicted { pod, cause, .. } => {
                if matches!(cause, icm_sim::scheduler::EvictionCause::NoExecute) {
                    steps.push(OStep::Evict(pod.to_string()));
                }
            }
            RoundEvent::Decided(Decision::Bound { pod, node }) => steps.push(OStep::Bind(pod.to_string(), node.to_string())),
            RoundEvent::Decided(Decision::Preempt { pod, node, victims }) => steps.push(OStep::Preempt(
                pod.to_string(),
                node.to_string(),
                victims.iter().map(|v| v.to_string()).collect(),
            )),
            RoundEvent::Decided(Decision::Pending { pod, .. }) => steps.push(OStep::Pending(pod.to_string())),
        }
    }
    let (oracle_placement, oracle_steps) = oracle_round(&inst.state, &inst.units);
    if steps != oracle_steps {
        return Some(format!("seed {seed}: decisions differ\n engine {steps:?}\n oracle {oracle_steps:?}"));
    }
    if placement_of(&outcome.state) != oracle_placement {
        return Some(format!("seed {seed}: final placement differs"));
    }
    if let Err(e) = outcome.state.check_invariants() {
        return Some(format!("seed {seed}: {e}"));
    }
    None
}

pub const ORACLE_INSTANCES: u64 = 200;

pub fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mismatches: Vec<String> = (0..ORACLE_INSTANCES).filter_map(|s| oracle_mismatch(0xC0FFEE + s)).collect();
    let elapsed = start.elapsed();
    ensure!(mismatches.is_empty(), "{} mismatches; first: {}", mismatches.len(), mismatches[0]);
    ensure!(elapsed < Duration::from_secs(30), "runtime {elapsed:?}");
    Ok(format!("{ORACLE_INSTANCES} instances, 0 mismatches; {elapsed:?}"))
}

/// Runs a random scenario tick by tick and returns every violation found.
pub fn invariant_violations(seed: u64, ticks: u64) -> Vec<String> {
    let scenario = random_scenario(seed, ticks);
    let mut world = World::new(scenario.clone()).expect("generated scenario builds");
    let mut out = Vec::new();
    while !world.is_done() {
        world.step();
        if let Err(e) = world.state.check_invariants() {
            out.push(format!("seed {seed} tick {}: {e}", world.tick));
        }
        for node in world.state.nodes.values() {
            let (c, m) = world
                .state
                .pods
                .values()
                .filter(|p| p.bound_node() == Some(&node.id))
                .fold((0, 0), |a, p| (a.0 + p.request.cpu_millicores, a.1 + p.request.memory_mib));
            if c > node.capacity.cpu_millicores || m > node.capacity.memory_mib {
                out.push(format!("seed {seed} tick {}: {} over capacity", world.tick, node.id));
            }
        }
    }
    let stored = parse_trace(&world.trace.to_text()).expect("trace parses");
    out.extend(
        check_invariants(&stored, &scenario)
            .into_iter()
            .map(|v| format!("seed {seed}: {v}")),
    );
    out
}

pub fn criterion_4() -> Outcome {
    let mut violations = Vec::new();
    for s in 0..20 {
        violations.extend(invariant_violations(1000 + s, 50));
    }
    ensure!(violations.is_empty(), "{} violations; first: {}", violations.len(), violations[0]);
    Ok("20 scenarios x 50 ticks, 0 violations".to_owned())
}

pub fn criterion_5() -> Outcome {
    let scenario = builtin_scenario("pingpong");
    let window = scenario.icm.interference_window;
    let (t, _, _) = run_stored(&scenario);
    let flags: Vec<&Record> = of_kind(&t, "conflict")
        .filter(|r| r.str("conflict") == Some("Interference"))
        .collect();
    ensure!(flags.len() == 1, "expected one Interference record, found {}", flags.len());
    let flag = flags[0];
    let toggles: Vec<&Record> = of_kind(&t, "power").collect();
    ensure!(toggles.len() >= 3, "only {} toggles", toggles.len());
    let third = toggles[2].tick;
    ensure!(
        flag.tick >= third && flag.tick - third <= window,
        "flag at tick {}, third toggle at {third}",
        flag.tick
    );

    let prio = |acl: &str| {
        let a = scenario.agent(&AclId::from(acl)).unwrap();
        scenario.agent_priority(a).map(|p| p.value).unwrap_or(0)
    };
    let parts = flag.strings("participants");
    let lowest = parts.iter().min_by_key(|a| prio(a)).unwrap().clone();
    ensure!(
        flag.str("resolution") == Some("Frozen") && flag.str("frozen") == Some(lowest.as_str()),
        "resolution {:?}, expected Frozen({lowest})",
        flag.fields
    );
    let until = flag.u64("until").unwrap();
    let leaked = t
        .records
        .iter()
        .filter(|r| r.tick > flag.tick && r.tick < until)
        .filter(|r| matches!(r.kind.as_str(), "intent_admitted" | "power" | "pod_created"))
        .filter(|r| r.str("acl") == Some(lowest.as_str()) || r.str("owner") == Some(lowest.as_str()))
        .count();
    ensure!(leaked == 0, "{leaked} intents from {lowest} reached the cluster during cooldown");

    let (control, _, _) = run_stored(&fixture("monotone.toml"));
    let control_flags = of_kind(&control, "conflict")
        .filter(|r| r.str("conflict") == Some("Interference"))
        .count();
    let control_scales = of_kind(&control, "intent_admitted").count();
    ensure!(control_scales > 2, "control run barely acts ({control_scales} admitted intents)");
    ensure!(control_flags == 0, "control run flagged {control_flags} Interference records");
    Ok(format!(
        "flag at tick {} (third toggle {third}), Frozen({lowest}) until {until}, 0 leaks; control 0 flags over {control_scales} actions",
        flag.tick
    ))
}

pub fn stationary_false_positive_rate(samples: usize, seed: u64) -> f64 {
    let cfg = CoherencyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(100.0, 10.0).unwrap();
    let mut baseline = CoherencyBaseline::new(AclId::from("probe"), cfg.window);
    let mut anomalies = 0usize;
    let mut verdicts = 0usize;
    while verdicts < samples {
        let v = coherency_check(noise.sample(&mut rng), &mut baseline, &cfg);
        if baseline.len() > cfg.min_history {
            verdicts += 1;
            if v == Verdict::Anomalous {
                anomalies += 1;
            }
        }
    }
    anomalies as f64 / verdicts as f64
}

pub fn criterion_6() -> Outcome {
    let scenario = fixture("anomaly.toml");
    let fault_tick = scenario
        .events
        .iter()
        .find_map(|e| matches!(e.event, InjectedEvent::Fault { .. }).then_some(e.tick))
        .unwrap();
    let n = scenario.icm.suspend_after;
    let (t, _, _) = run_stored(&scenario);
    let anomalous: Vec<u64> = of_kind(&t, "verdict")
        .filter(|r| r.str("acl") == Some("probe") && r.str("verdict") == Some("Anomalous"))
        .map(|r| r.tick)
        .collect();
    ensure!(
        anomalous.first() == Some(&fault_tick),
        "first anomaly at {:?}, fault at {fault_tick}",
        anomalous.first()
    );
    let observed = of_kind(&t, "lifecycle")
        .any(|r| r.tick == fault_tick && r.str("acl") == Some("probe") && r.str("to") == Some("UnderObservation"));
    ensure!(observed, "no UnderObservation transition at tick {fault_tick}");
    let run_of_n: Vec<u64> = (fault_tick..fault_tick + n as u64).collect();
    ensure!(anomalous.starts_with(&run_of_n), "anomalies at {anomalous:?}");
    let suspended_at = of_kind(&t, "lifecycle")
        .find(|r| r.str("acl") == Some("probe") && r.str("to") == Some("Suspended"))
        .map(|r| r.tick);
    let expected = fault_tick + n as u64 - 1;
    ensure!(suspended_at == Some(expected), "suspended at {suspended_at:?}, expected {expected}");
    let later = of_kind(&t, "intent_submitted")
        .filter(|r| r.tick > expected && r.str("acl") == Some("probe"))
        .count();
    ensure!(later == 0, "{later} intents from the suspended agent");

    let rate = stationary_false_positive_rate(10_000, 77);
    ensure!(rate <= 0.01, "stationary anomaly rate {rate}");
    Ok(format!(
        "anomalous at {:?}, Suspended at {expected}, 0 later intents; stationary rate {:.4}",
        &anomalous[..n as usize], rate
    ))
}

/// Sum of the noise-free traffic means of `regions` at `tick`, from the
/// scenario's profile parameters.
fn true_demand(scenario: &Scenario, regions: &BTreeSet<icm_sim::ids::RegionId>, tick: u64) -> f64 {
    scenario
        .traffic
        .regions
        .iter()
        .filter(|p| regions.contains(&p.region))
        .map(|p| {
            let period = p.period.max(1) as f64;
            (p.base + p.amplitude * (2.0 * PI * (tick as f64 + p.phase) / period).sin()).max(0.0)
        })
        .sum()
}

/// Mean absolute prediction error of `acl`, from its predictor level after
/// every tick it acted on.
pub fn observed_mae(scenario: &Scenario, acl: &str) -> (f64, icm_sim::sim::Metrics) {
    let id = AclId::from(acl);
    let mut world = World::new(scenario.clone()).unwrap();
    let (mut sum, mut count) = (0.0, 0u64);
    while !world.is_done() {
        let t = world.tick;
        world.step();
        let agent = &world.agents[&id];
        if agent.predictor.last_tick == Some(t) {
            let truth = true_demand(scenario, &agent.regions, t);
            let level = agent.predictor.level;
            let prediction = (level + agent.predictor.accuracy_bonus * (truth - level)).max(0.0);
            sum += (prediction - truth).abs();
            count += 1;
        }
    }
    (sum / count as f64, world.metrics.clone())
}

pub fn criterion_7() -> Outcome {
    let mut sharing = builtin_scenario("three-acl-conflict");
    sharing.ticks = 200;
    let mut baseline = sharing.clone();
    baseline
        .events
        .retain(|e| !matches!(e.event, InjectedEvent::KnowledgeRequest { .. }));

    let (with, m_with) = observed_mae(&sharing, "core");
    let (without, m_without) = observed_mae(&baseline, "core");
    ensure!(m_with.grants == 1, "expected one grant, found {}", m_with.grants);
    for (mine, metric) in [(with, m_with.mae("core")), (without, m_without.mae("core"))] {
        ensure!(
            metric.is_some_and(|m| (m - mine).abs() < 1e-9),
            "reported MAE {metric:?} disagrees with recomputed {mine}"
        );
    }
    ensure!(with < without, "MAE with sharing {with:.3} not below baseline {without:.3}");

    let mut untrusted = sharing.clone();
    untrusted.trust.clear();
    let (t, _, _) = run_stored(&untrusted);
    let denial = of_kind(&t, "exchange").find(|r| r.str("target") == Some("core"));
    ensure!(
        denial.is_some_and(|r| r.str("outcome") == Some("denied") && r.str("reason") == Some("NotTrusted")),
        "untrusted exchange: {:?}",
        denial.map(|r| &r.fields)
    );
    Ok(format!("core MAE {with:.3} with sharing < {without:.3} without; untrusted request denied NotTrusted"))
}

pub fn criterion_8() -> Outcome {
    let scenario = builtin_scenario("three-acl-conflict");
    let period = scenario.icm.e2e_period;
    let (t, out, _) = run_stored(&scenario);
    let agents = &out.world.agents;
    let spans_e2e = |r: &Record| {
        let parts = r.strings("participants");
        let mega = parts.iter().any(|p| {
            agents
                .get(&AclId::from(p.as_str()))
                .is_some_and(|a| a.size == icm_sim::acl::SizeClass::Mega)
        });
        let regions: BTreeSet<_> = parts
            .iter()
            .filter_map(|p| agents.get(&AclId::from(p.as_str())))
            .flat_map(|a| a.regions.iter().cloned())
            .collect();
        mega || regions.len() != 1
    };
    let mut e2e_resolved = 0;
    for r in of_kind(&t, "conflict") {
        let at_e2e = r.str("instance") == Some("e2e");
        let resolved = matches!(r.str("resolution"), Some("ArbitratedFor") | Some("Frozen"));
        if spans_e2e(r) && resolved {
            ensure!(at_e2e, "cross-domain conflict resolved at {:?} (tick {})", r.str("instance"), r.tick);
            ensure!(r.tick % period == 0, "E2E resolution at tick {} is off-period", r.tick);
            e2e_resolved += 1;
        }
        if at_e2e {
            ensure!(spans_e2e(r), "regional conflict among {:?} at the E2E instance", r.strings("participants"));
        }
    }
    ensure!(e2e_resolved > 0, "no cross-domain conflict was resolved");
    let regional_e2e = of_kind(&t, "intent_admitted")
        .filter(|r| r.str("instance") == Some("e2e"))
        .filter(|r| {
            agents
                .get(&AclId::from(r.str("acl").unwrap_or_default()))
                .is_some_and(|a| a.size != icm_sim::acl::SizeClass::Mega && a.regions.len() == 1)
        })
        .count();
    ensure!(regional_e2e == 0, "{regional_e2e} purely regional intents admitted by the E2E instance");
    Ok(format!("{e2e_resolved} cross-domain resolution(s), all at e2e on period-{period} ticks"))
}

pub fn all_scenarios() -> Vec<Scenario> {
    let mut v: Vec<Scenario> = icm_sim::scenario::BUILTIN
        .iter()
        .map(|(name, _)| builtin_scenario(name))
        .collect();
    v.push(fixture("anomaly.toml"));
    v.push(fixture("monotone.toml"));
    v
}

pub fn criterion_9() -> Outcome {
    let scenarios = all_scenarios();
    for s in &scenarios {
        let a = run(s.clone()).unwrap().trace.to_text();
        let b = run(s.clone()).unwrap().trace.to_text();
        ensure!(a == b, "{} differs between runs", s.name);
        let report = verify_trace(&a, s).map_err(|e| format!("{}: {e}", s.name))?;
        ensure!(report.is_clean(), "{}: {:?} {:?}", s.name, report.divergence, report.violations);
    }
    Ok(format!("{} scenarios byte-identical and verified clean", scenarios.len()))
}

pub fn all() -> Vec<Criterion> {
    vec![
        (1, "case 1 replication", criterion_1 as fn() -> Outcome),
        (2, "case 2 replication", criterion_2),
        (3, "scheduler oracle equivalence", criterion_3),
        (4, "invariant suite", criterion_4),
        (5, "ping-pong detection", criterion_5),
        (6, "coherency and lifecycle", criterion_6),
        (7, "knowledge brokering", criterion_7),
        (8, "hierarchy routing", criterion_8),
        (9, "determinism", criterion_9),
    ]
}

