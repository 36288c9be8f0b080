use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use guardian_core::audit::verify_chain;
use guardian_core::crypto::{load_operator_registry, OperatorEntry};
use guardian_core::ep::PluginDescriptor;
use guardian_core::guardrails::{default_guardrails, parse_guardrails, GuardrailConfig};
use guardian_core::manifest::{admission_check, default_ep_registry, EpRegistry, Manifest};
use guardian_core::simulator::{run_scenario, Scenario, SimConfig, Verdict};
use guardian_core::verifier::{check_trace, explore, ExploreConfig, Mutation};
use guardian_gateway::{GatewayConfig, DEFAULT_TICK};
use serde_json::json;

const SUCCESS: u8 = 0;
const FAILURE: u8 = 1;
const USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "guardian-fc",
    version,
    about = "Runtime safety loop for federated privacy-preserving jobs"
)]
struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario to completion and write its trace.
    Run {
        #[arg(long, default_value = "none")]
        scenario: Scenario,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=32))]
        nodes: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Guard-rail YAML; defaults to the scenario's built-in set.
        #[arg(long)]
        guardrails: Option<PathBuf>,
        /// Execution provider id; defaults to the scenario's.
        #[arg(long)]
        ep: Option<String>,
        /// Plugin descriptor JSON replacing the scenario's pipeline.
        #[arg(long)]
        plugin: Option<PathBuf>,
        #[arg(long)]
        max_ticks: Option<u64>,
        /// Where to write the canonical trace JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the binary ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Check a manifest against an EP registry and guard rails.
    Admit {
        manifest: PathBuf,
        #[arg(long)]
        ep_registry: Option<PathBuf>,
        #[arg(long)]
        guardrails: Option<PathBuf>,
    },
    /// Explore the abstract FSM product exhaustively.
    Modelcheck {
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=4))]
        nodes: u32,
        #[arg(long, default_value_t = 60, value_parser = clap::value_parser!(u32).range(1..))]
        depth: u32,
        #[arg(long, default_value_t = 2)]
        fire_budget: u8,
        #[arg(long, default_value_t = 0)]
        override_budget: u8,
        /// Inject a known transition bug: inf-to-pref or finalize-ignores-fires.
        #[arg(long)]
        mutate: Option<Mutation>,
    },
    /// Verify a binary ledger's block chain and Merkle roots.
    VerifyLedger { file: PathBuf },
    /// Serve a live tick-paced job over HTTP and WebSocket.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, default_value = "none")]
        scenario: Scenario,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=32))]
        nodes: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TICK.as_millis() as u64, value_parser = clap::value_parser!(u64).range(1..))]
        tick_ms: u64,
        /// JSON list of {operator_id, public_key}.
        #[arg(long)]
        operators: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_guardrails(path: &Path) -> Result<GuardrailConfig> {
    parse_guardrails(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn print(json: bool, value: serde_json::Value, human: impl FnOnce() -> String) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&value).expect("json values serialize")
        );
    } else {
        print!("{}", human());
    }
}

fn exit(ok: bool) -> u8 {
    if ok {
        SUCCESS
    } else {
        FAILURE
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    json: bool,
    scenario: Scenario,
    nodes: u32,
    seed: u64,
    guardrails: Option<PathBuf>,
    ep: Option<String>,
    plugin: Option<PathBuf>,
    max_ticks: Option<u64>,
    out: Option<PathBuf>,
    ledger: Option<PathBuf>,
) -> Result<u8> {
    let mut config = SimConfig::scenario(scenario, nodes, seed);
    if let Some(path) = guardrails {
        config.guardrails = load_guardrails(&path)?;
    }
    if let Some(ep) = ep {
        config.ep_id = ep;
    }
    if let Some(path) = plugin {
        config.plugin = serde_json::from_str::<PluginDescriptor>(&read(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
    }
    if let Some(m) = max_ticks {
        config.max_ticks = m;
    }
    let run = run_scenario(config)?;
    let trace = &run.trace;
    if let Some(path) = &out {
        std::fs::write(path, trace.canonical_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &ledger {
        std::fs::write(path, run.ledger.to_file_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let replay = check_trace(trace);
    let safety_ok = trace.ticks.iter().all(|t| t.safety_ok);
    let terminated = matches!(trace.verdict, Verdict::Finalize | Verdict::Aborted);
    let commands: Vec<String> = trace
        .ticks
        .iter()
        .flat_map(|t| {
            t.commands
                .iter()
                .map(move |c| format!("t{} {} -> {}", t.tick, c.kind, c.target))
        })
        .collect();
    let verdict = serde_json::to_value(trace.verdict).expect("verdicts serialize");
    print(
        json,
        json!({
            "scenario": scenario.to_string(),
            "ep": trace.header.ep_id,
            "verdict": verdict,
            "admission": trace.admission,
            "ticks": trace.ticks.len(),
            "initial_mu": trace.initial.as_ref().map(|i| i.mu),
            "final_mu": trace.final_mu,
            "safety_ok": safety_ok,
            "replay_ok": replay.is_ok(),
            "commands": commands,
            "trace_hash": trace.hash(),
            "ledger_root": trace.ledger_root,
        }),
        || {
            let mut s = format!(
                "scenario {scenario}, {} nodes, seed {}, {}\n",
                trace.header.n_nodes, trace.header.seed, trace.header.ep_id
            );
            if !trace.admission.is_admitted() {
                let reasons: Vec<String> = trace
                    .admission
                    .reasons
                    .iter()
                    .map(|r| r.to_string())
                    .collect();
                s += &format!("admission rejected: {}\n", reasons.join(", "));
            }
            s += &format!(
                "verdict: {} after {} ticks, final mu {}\n",
                verdict.as_str().unwrap_or("?"),
                trace.ticks.len(),
                trace.final_mu
            );
            for c in &commands {
                s += &format!("  {c}\n");
            }
            s += &format!(
                "safety: {}\n",
                if safety_ok {
                    "held at every tick"
                } else {
                    "VIOLATED"
                }
            );
            s += &format!(
                "replay check: {}\n",
                if replay.is_ok() { "PASS" } else { "FAIL" }
            );
            if !replay.is_ok() {
                s += &replay.to_string();
            }
            s += &format!(
                "trace hash: {}\nledger root: {}\n",
                trace.hash(),
                trace.ledger_root
            );
            s
        },
    );
    Ok(exit(terminated && safety_ok && replay.is_ok()))
}

fn cmd_admit(
    json: bool,
    manifest: PathBuf,
    ep_registry: Option<PathBuf>,
    guardrails: Option<PathBuf>,
) -> Result<u8> {
    let manifest = Manifest::from_json(&read(&manifest)?)
        .with_context(|| format!("parsing {}", manifest.display()))?;
    let registry = match ep_registry {
        Some(path) => EpRegistry::from_json(&read(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => default_ep_registry(),
    };
    let guardrails = match guardrails {
        Some(path) => load_guardrails(&path)?,
        None => default_guardrails(),
    };
    let result = admission_check(&manifest, &registry, &guardrails);
    print(
        json,
        serde_json::to_value(&result).expect("admission results serialize"),
        || {
            let mut s = format!(
                "{}: {}\n",
                manifest.job_id,
                if result.is_admitted() {
                    "admitted"
                } else {
                    "rejected"
                }
            );
            for r in &result.reasons {
                s += &format!("  {r}\n");
            }
            s
        },
    );
    Ok(exit(result.is_admitted()))
}

fn cmd_modelcheck(
    json: bool,
    nodes: u32,
    depth: u32,
    fire_budget: u8,
    override_budget: u8,
    mutate: Option<Mutation>,
) -> u8 {
    let mut config = ExploreConfig::new(nodes as usize, depth, fire_budget).with_mutation(mutate);
    config.override_budget = override_budget;
    let report = explore(&config);
    print(
        json,
        serde_json::to_value(&report).expect("reports serialize"),
        || {
            let header = match mutate {
            Some(m) => format!("modelcheck: {nodes} nodes, depth {depth}, fire budget {fire_budget}, mutation {m}\n"),
            None => format!("modelcheck: {nodes} nodes, depth {depth}, fire budget {fire_budget}\n"),
        };
            header + &report.to_string()
        },
    );
    exit(report.is_ok())
}

fn cmd_verify_ledger(json: bool, file: PathBuf) -> Result<u8> {
    let bytes = std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
    let result = verify_chain(&bytes);
    match &result {
        Ok(report) => print(json, json!({ "ok": true, "report": report }), || {
            format!(
                "ok: {} blocks, {} records, root {}\n",
                report.blocks, report.records, report.last_root
            )
        }),
        Err(e) => print(json, json!({ "ok": false, "error": e.to_string() }), || {
            format!("FAILED: {e}\n")
        }),
    }
    Ok(exit(result.is_ok()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_serve(
    port: u16,
    bind: IpAddr,
    scenario: Scenario,
    nodes: u32,
    seed: u64,
    tick_ms: u64,
    operators: PathBuf,
) -> Result<u8> {
    let entries: Vec<OperatorEntry> = serde_json::from_str(&read(&operators)?)
        .with_context(|| format!("parsing {}", operators.display()))?;
    let operators = load_operator_registry(&entries).context("loading operator keys")?;
    let mut config = GatewayConfig::new(
        SimConfig::scenario(scenario, nodes, seed),
        operators,
        SocketAddr::new(bind, port),
    );
    config.tick = Duration::from_millis(tick_ms);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let gateway = guardian_gateway::spawn(config).await?;
        eprintln!("serving on http://{}/api/v1", gateway.addr);
        gateway.wait().await;
        Ok(SUCCESS)
    })
}

fn dispatch(cli: Cli) -> Result<u8> {
    let json = cli.json;
    match cli.command {
        Command::Run {
            scenario,
            nodes,
            seed,
            guardrails,
            ep,
            plugin,
            max_ticks,
            out,
            ledger,
        } => cmd_run(
            json, scenario, nodes, seed, guardrails, ep, plugin, max_ticks, out, ledger,
        ),
        Command::Admit {
            manifest,
            ep_registry,
            guardrails,
        } => cmd_admit(json, manifest, ep_registry, guardrails),
        Command::Modelcheck {
            nodes,
            depth,
            fire_budget,
            override_budget,
            mutate,
        } => Ok(cmd_modelcheck(
            json,
            nodes,
            depth,
            fire_budget,
            override_budget,
            mutate,
        )),
        Command::VerifyLedger { file } => cmd_verify_ledger(json, file),
        Command::Serve {
            port,
            bind,
            scenario,
            nodes,
            seed,
            tick_ms,
            operators,
        } => cmd_serve(port, bind, scenario, nodes, seed, tick_ms, operators),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { SUCCESS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(USAGE)
        }
    }
}
