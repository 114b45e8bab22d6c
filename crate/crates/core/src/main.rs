use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use icm_sim::ids::AclId;
use icm_sim::scenario::{builtin, load_events, load_scenario, EventsFile, InjectedEvent, Scenario, ScheduledEvent, BUILTIN};
use icm_sim::sim::run;
use icm_sim::trace::{parse_trace, StoredTrace};
use icm_sim::verify::{verify_trace, VerifyError};

const EXIT_USAGE: u8 = 1;
const EXIT_SCENARIO: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "icm-sim", version, about = "Simulate control loops competing for an edge/core cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or built-in scenario and write its trace.
    Run {
        /// Path to a scenario file, or the name of a built-in scenario.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ticks: Option<u64>,
        /// Trace output path; the trace goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Injected-event file merged into the scenario.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Write run metrics as JSON here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Re-run a scenario and compare it with a stored trace.
    Verify {
        trace: PathBuf,
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Print placement tables and conflicts from a trace.
    Summarize { trace: PathBuf },
    /// List the built-in scenarios.
    ListScenarios,
    /// Append an operator release of a suspended agent to an event file.
    Release {
        acl: String,
        /// Tick at which the release takes effect.
        #[arg(long)]
        tick: u64,
        #[arg(long)]
        events_file: PathBuf,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn read_scenario(arg: &str, seed: Option<u64>, ticks: Option<u64>, events: Option<&Path>) -> Result<Scenario, String> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?
    } else {
        builtin(arg)
            .ok_or_else(|| format!("`{arg}` is neither a file nor a built-in scenario"))?
            .to_owned()
    };
    let mut scenario = load_scenario(&text).map_err(|e| format!("{arg}: {e}"))?;
    if let Some(path) = events {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let extra = load_events(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        scenario.events.extend(extra.events);
    }
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    if let Some(ticks) = ticks {
        scenario.ticks = ticks;
    }
    scenario.validate().map_err(|e| format!("{arg}: {e}"))?;
    Ok(scenario)
}

fn read_trace(path: &Path) -> Result<(String, StoredTrace), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let stored = parse_trace(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((text, stored))
}

fn cmd_run(
    scenario: &str,
    seed: Option<u64>,
    ticks: Option<u64>,
    out: Option<&Path>,
    events: Option<&Path>,
    metrics: Option<&Path>,
) -> ExitCode {
    let scenario = match read_scenario(scenario, seed, ticks, events) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_SCENARIO, e),
    };
    let output = match run(scenario) {
        Ok(o) => o,
        Err(e) => return fail(EXIT_SCENARIO, e),
    };
    let text = output.trace.to_text();
    match out {
        Some(path) => {
            if let Err(e) = fs::write(path, &text) {
                return fail(EXIT_USAGE, format!("{}: {e}", path.display()));
            }
            let m = &output.metrics;
            println!(
                "{} ticks, {} events -> {}",
                m.ticks,
                output.trace.events.len(),
                path.display()
            );
            println!(
                "conflicts {:?}, evictions {}, preemptions {}, bindings {}, suspensions {}",
                m.conflicts, m.evictions, m.preemptions, m.bindings, m.suspensions
            );
        }
        None => print!("{text}"),
    }
    if let Some(path) = metrics {
        let json = serde_json::to_string_pretty(&output.metrics).expect("metrics serialize");
        if let Err(e) = fs::write(path, json) {
            return fail(EXIT_USAGE, format!("{}: {e}", path.display()));
        }
    }
    ExitCode::SUCCESS
}

fn cmd_verify(trace: &Path, scenario: &str, seed: Option<u64>, ticks: Option<u64>, events: Option<&Path>) -> ExitCode {
    let scenario = match read_scenario(scenario, seed, ticks, events) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_SCENARIO, e),
    };
    let text = match fs::read_to_string(trace) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_USAGE, format!("{}: {e}", trace.display())),
    };
    match verify_trace(&text, &scenario) {
        Ok(report) => {
            if let Some(d) = &report.divergence {
                println!("divergence at seq {}", d.seq);
                println!("  expected: {}", d.expected.as_deref().unwrap_or("<end of trace>"));
                println!("  found:    {}", d.found.as_deref().unwrap_or("<end of trace>"));
            }
            for v in &report.violations {
                println!("violation {v}");
            }
            if report.is_clean() {
                println!("ok: trace reproduces and no invariant is violated");
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Err(VerifyError::Scenario(e)) => fail(EXIT_SCENARIO, e),
        Err(e) => fail(EXIT_VERIFY, e),
    }
}

fn print_table(rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", cells.join("   ").trim_end());
    }
}

fn cmd_summarize(path: &Path) -> ExitCode {
    let (_, stored) = match read_trace(path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let h = &stored.header;
    println!("scenario {}  seed {}  ticks {}  hash {}", h.scenario, h.seed, h.ticks, &h.hash[..12.min(h.hash.len())]);

    #[derive(Default, Clone)]
    struct PodRow {
        owner: String,
        status: String,
        node: String,
        evictions: u64,
    }
    let mut pods: BTreeMap<String, PodRow> = BTreeMap::new();
    let mut changed_ticks: Vec<(u64, BTreeMap<String, Vec<String>>)> = Vec::new();
    let mut dirty = false;
    let snapshot = |pods: &BTreeMap<String, PodRow>| {
        let mut by_node: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, p) in pods.iter().filter(|(_, p)| p.status == "Running") {
            by_node.entry(p.node.clone()).or_default().push(id.clone());
        }
        by_node
    };
    let mut current_tick = None;
    for r in &stored.records {
        if current_tick != Some(r.tick) {
            if dirty {
                changed_ticks.push((current_tick.unwrap_or(0), snapshot(&pods)));
                dirty = false;
            }
            current_tick = Some(r.tick);
        }
        let pod = r.str("pod").unwrap_or_default().to_owned();
        match r.kind.as_str() {
            "pod_created" => {
                pods.insert(
                    pod,
                    PodRow {
                        owner: r.str("owner").unwrap_or_default().to_owned(),
                        status: "Pending".to_owned(),
                        ..Default::default()
                    },
                );
            }
            "placed" | "bound" => {
                let row = pods.entry(pod.clone()).or_default();
                row.status = "Running".to_owned();
                row.node = r.str("node").unwrap_or_default().to_owned();
                dirty = true;
                if r.kind == "bound" {
                    println!("tick {:>3}  {pod} bound to {}", r.tick, row.node);
                }
            }
            "evicted" => {
                let row = pods.entry(pod.clone()).or_default();
                row.status = "Pending".to_owned();
                row.evictions += 1;
                dirty = true;
                println!(
                    "tick {:>3}  {pod} evicted from {} ({})",
                    r.tick,
                    r.str("node").unwrap_or("?"),
                    r.str("cause").unwrap_or("?")
                );
                row.node.clear();
            }
            "pod_terminated" => {
                let row = pods.entry(pod.clone()).or_default();
                row.status = "Terminated".to_owned();
                row.node.clear();
                dirty = true;
                println!("tick {:>3}  {pod} terminated", r.tick);
            }
            "conflict" => {
                let detail = match r.str("resolution") {
                    Some("ArbitratedFor") => format!("ArbitratedFor({})", r.str("winner").unwrap_or("?")),
                    Some("Frozen") => format!("Frozen({}, until {})", r.str("frozen").unwrap_or("?"), r.u64("until").unwrap_or(0)),
                    Some(other) => other.to_owned(),
                    None => "unresolved".to_owned(),
                };
                println!(
                    "tick {:>3}  {} at {} between {} on {} -> {detail}",
                    r.tick,
                    r.str("conflict").unwrap_or("?"),
                    r.str("instance").unwrap_or("?"),
                    r.strings("participants").join(", "),
                    r.strings("targets").join(", "),
                );
            }
            "power" => println!(
                "tick {:>3}  {} powered {} by {}",
                r.tick,
                r.str("node").unwrap_or("?"),
                r.str("state").unwrap_or("?"),
                r.str("acl").unwrap_or("?")
            ),
            "lifecycle" => println!(
                "tick {:>3}  {} {} -> {}",
                r.tick,
                r.str("acl").unwrap_or("?"),
                r.str("from").unwrap_or("?"),
                r.str("to").unwrap_or("?")
            ),
            _ => {}
        }
    }
    if dirty {
        changed_ticks.push((current_tick.unwrap_or(0), snapshot(&pods)));
    }

    for (tick, by_node) in &changed_ticks {
        println!();
        println!("placement after tick {tick}");
        let mut rows = vec![vec!["NODE".to_owned(), "PODS".to_owned()]];
        rows.extend(by_node.iter().map(|(n, ps)| vec![n.clone(), ps.join(", ")]));
        print_table(&rows);
    }
    println!();
    let mut rows = vec![vec![
        "NAME".to_owned(),
        "OWNER".to_owned(),
        "STATUS".to_owned(),
        "NODE".to_owned(),
        "EVICTIONS".to_owned(),
    ]];
    rows.extend(pods.iter().map(|(id, p)| {
        vec![
            id.clone(),
            p.owner.clone(),
            p.status.clone(),
            if p.node.is_empty() { "<none>".to_owned() } else { p.node.clone() },
            p.evictions.to_string(),
        ]
    }));
    print_table(&rows);
    ExitCode::SUCCESS
}

fn cmd_release(acl: &str, tick: u64, path: &Path) -> ExitCode {
    let mut file = if path.exists() {
        match fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| load_events(&t).map_err(|e| e.to_string())) {
            Ok(f) => f,
            Err(e) => return fail(EXIT_SCENARIO, format!("{}: {e}", path.display())),
        }
    } else {
        EventsFile::default()
    };
    file.events.push(ScheduledEvent {
        tick,
        event: InjectedEvent::Release { acl: AclId::from(acl) },
    });
    let text = toml::to_string(&file).expect("events serialize");
    if let Err(e) = fs::write(path, text) {
        return fail(EXIT_USAGE, format!("{}: {e}", path.display()));
    }
    println!("release of `{acl}` scheduled at tick {tick} in {}", path.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run {
            scenario,
            seed,
            ticks,
            out,
            events,
            metrics,
        } => cmd_run(&scenario, seed, ticks, out.as_deref(), events.as_deref(), metrics.as_deref()),
        Command::Verify {
            trace,
            scenario,
            seed,
            ticks,
            events,
        } => cmd_verify(&trace, &scenario, seed, ticks, events.as_deref()),
        Command::Summarize { trace } => cmd_summarize(&trace),
        Command::ListScenarios => {
            for (name, text) in BUILTIN {
                let description = load_scenario(text).map(|s| s.description).unwrap_or_default();
                println!("{name:<20} {description}");
            }
            ExitCode::SUCCESS
        }
        Command::Release { acl, tick, events_file } => cmd_release(&acl, tick, &events_file),
    }
}
