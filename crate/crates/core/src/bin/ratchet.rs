use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ratchet_core::envsim::{builtin_names, resolve_scenario, Scenario, ScenarioSandbox};
use ratchet_core::fdka::ReplayCase;
use ratchet_core::governance::{canary, GovernanceConfig, Ledger, LedgerEvent};
use ratchet_core::harness::{
    curve_csv, format_csv, format_table, run_audit, run_scenario_with_ledger, tta_bound_check,
    AgentConfig, RunReport, SuiteSummary, NAMED_CONFIGS,
};

#[derive(Parser)]
#[command(
    name = "ratchet",
    version,
    about = "Governed self-repairing planning agent"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one config over a scenario for each seed.
    Run {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "full")]
        config: String,
        #[arg(long, value_delimiter = ',', default_value = "7,13,31")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several configs over the same scenario and seeds.
    Ablate {
        #[arg(long)]
        scenario: String,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no-fdka,no-governance,no-verify,no-arbitration"
        )]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "7,13,31")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect or resolve the human review queue of a persisted ledger.
    Review {
        #[arg(long)]
        ledger: PathBuf,
        /// Scenario whose domain the ledger was recorded against.
        #[arg(long)]
        scenario: String,
        #[command(subcommand)]
        action: ReviewAction,
    },
    /// Re-emit the runs stored in an output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Monte Carlo check of the time-to-adapt bound.
    TtaBound {
        #[arg(long, default_value_t = 0.8)]
        p: f64,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run a scripted audit scenario and compare decisions.
    Audit {
        #[arg(long, default_value = "governance-audit-8")]
        scenario: String,
        #[arg(long, default_value = "full")]
        config: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// List built-in scenarios and named configs.
    List,
}

#[derive(Subcommand)]
enum ReviewAction {
    List,
    Approve {
        key: String,
    },
    Deny {
        key: String,
        #[arg(long)]
        rationale: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Jsonl,
}

const RUNS_FILE: &str = "runs.jsonl";

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            config,
            seeds,
            out,
        } => execute(&scenario, &[config], &seeds, &out),
        Cmd::Ablate {
            scenario,
            grid,
            seeds,
            out,
        } => execute(&scenario, &grid, &seeds, &out),
        Cmd::Review {
            ledger,
            scenario,
            action,
        } => review(&ledger, &scenario, action),
        Cmd::Report { input, format } => report(&input, format),
        Cmd::TtaBound {
            p,
            eps,
            delta,
            trials,
            seed,
        } => {
            if !(p > 0.0 && p <= 1.0 && (0.0..1.0).contains(&eps) && delta > 0.0 && delta < 1.0) {
                bail!("need 0 < p <= 1, 0 <= eps < 1, 0 < delta < 1");
            }
            let r = tta_bound_check(p, eps, delta, trials, seed);
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(if r.holds {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Audit {
            scenario,
            config,
            seed,
        } => {
            let s = resolve_scenario(&scenario)?;
            let cfg = AgentConfig::resolve(&config)?;
            let rows = run_audit(&s, &cfg, seed)?;
            let mut all = true;
            for r in &rows {
                all &= r.matched;
                println!(
                    "task {:>2}  {:<28} expect {:<10} got {:<10} canary {:<5} {}",
                    r.task,
                    r.label,
                    format!("{:?}", r.expect),
                    r.decision.map_or("-".into(), |d| format!("{d:?}")),
                    r.canary_passed.map_or("-".into(), |c| c.to_string()),
                    if r.matched { "ok" } else { "MISMATCH" }
                );
            }
            Ok(if all {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::List => {
            println!("scenarios: {}", builtin_names().join(", "));
            println!("configs:   {}", NAMED_CONFIGS.join(", "));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn execute(scenario: &str, configs: &[String], seeds: &[u64], out: &Path) -> Result<ExitCode> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let s = resolve_scenario(scenario)?;
    let cfgs = configs
        .iter()
        .map(|c| AgentConfig::resolve(c).with_context(|| format!("config {c}")))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let mut runs = Vec::new();
    for cfg in &cfgs {
        for &seed in seeds {
            runs.push(run_one(&s, cfg, seed, out)?);
        }
    }
    write_outputs(&runs, out)?;
    print!("{}", format_table(&summaries(&runs)));
    Ok(ExitCode::SUCCESS)
}

fn run_one(s: &Scenario, cfg: &AgentConfig, seed: u64, out: &Path) -> Result<RunReport> {
    let ledger = out.join(format!("ledger-{}-{seed}.jsonl", cfg.name));
    if ledger.exists() {
        fs::remove_file(&ledger)?;
    }
    let r = run_scenario_with_ledger(s, cfg, seed, &ledger)?;
    let mut f = fs::File::create(out.join(format!("tasks-{}-{seed}.jsonl", cfg.name)))?;
    for t in &r.tasks {
        writeln!(f, "{}", serde_json::to_string(t)?)?;
    }
    Ok(r)
}

fn summaries(runs: &[RunReport]) -> Vec<SuiteSummary> {
    let mut groups: Vec<((String, String), Vec<RunReport>)> = Vec::new();
    for r in runs {
        let k = (r.scenario.clone(), r.config.clone());
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r.clone()),
            None => groups.push((k, vec![r.clone()])),
        }
    }
    groups
        .iter()
        .map(|(_, v)| SuiteSummary::from_runs(v))
        .collect()
}

fn write_outputs(runs: &[RunReport], out: &Path) -> Result<()> {
    let mut f = fs::File::create(out.join(RUNS_FILE))?;
    for r in runs {
        writeln!(f, "{}", r.to_json())?;
    }
    let sums = summaries(runs);
    fs::write(out.join("summary.txt"), format_table(&sums))?;
    fs::write(out.join("summary.csv"), format_csv(&sums))?;
    fs::write(out.join("curve.csv"), curve_csv(runs))?;
    Ok(())
}

fn read_runs(dir: &Path) -> Result<Vec<RunReport>> {
    let path = dir.join(RUNS_FILE);
    let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

fn report(dir: &Path, format: Format) -> Result<ExitCode> {
    let runs = read_runs(dir)?;
    match format {
        Format::Table => print!("{}", format_table(&summaries(&runs))),
        Format::Csv => print!("{}", format_csv(&summaries(&runs))),
        Format::Jsonl => {
            for r in &runs {
                println!(
                    "{}",
                    serde_json::json!({
                        "scenario": r.scenario,
                        "config": r.config,
                        "seed": r.seed,
                        "aggregates": r.aggregates,
                    })
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn last_task(events: &[LedgerEvent]) -> u64 {
    events
        .iter()
        .filter_map(|e| match e {
            LedgerEvent::Staged { task, .. }
            | LedgerEvent::Queued { task, .. }
            | LedgerEvent::Escalated { task, .. }
            | LedgerEvent::Committed { task, .. }
            | LedgerEvent::RolledBack { task, .. } => Some(*task),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

fn review(path: &Path, scenario: &str, action: ReviewAction) -> Result<ExitCode> {
    let s = resolve_scenario(scenario)?;
    let mut pkg = s.domain.pkg()?;
    let mut ledger = Ledger::open(path, Default::default(), &mut pkg)?;
    match action {
        ReviewAction::List => {
            let pending = ledger.review_list();
            if pending.is_empty() {
                println!("review queue empty");
            }
            for e in pending {
                println!(
                    "{}  {:?}  {} {} {}  ({})",
                    e.edit_key,
                    e.status,
                    e.patch.scope,
                    e.patch.edit_type.as_str(),
                    e.patch.body.name(),
                    e.reason.as_deref().unwrap_or(&e.provenance.rationale)
                );
            }
        }
        ReviewAction::Approve { key } => {
            let task = last_task(ledger.events());
            let id = ledger.approve(&key, task, &mut pkg)?;
            let entry = ledger.entry(id).context("approved entry vanished")?;
            let patch = entry.patch.clone();
            let cfg = GovernanceConfig::default();
            let mut cases = entry.canary.clone();
            if cases.is_empty() {
                cases = s
                    .canary_suite
                    .get(&patch.scope)
                    .into_iter()
                    .flatten()
                    .take(cfg.n_canary)
                    .map(|c| {
                        Ok(ReplayCase {
                            task_index: usize::MAX,
                            state: s.case_state(&c.edit)?,
                            call: c.call.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            let mut patched = pkg.clone();
            patched.apply(&patch)?;
            let report = canary(&patched, &cases, &ScenarioSandbox::new(&s), &cfg);
            if !report.passed {
                ledger.discard(id, "canary failed", task, &mut pkg)?;
                println!(
                    "approved {key}: canary failed ({}/{} pass), entry {id} discarded",
                    report.n_pass, report.n_canary
                );
                return Ok(ExitCode::FAILURE);
            }
            let rho = ledger.commit(id, task, &mut pkg)?;
            println!(
                "approved {key}: canary {}/{} pass, entry {id} committed, trust {rho:.4}, pkg version {}",
                report.n_pass, report.n_canary, pkg.version
            );
        }
        ReviewAction::Deny { key, rationale } => {
            let rho = ledger.deny(&key, &rationale, &mut pkg)?;
            println!("denied {key}: trust {rho:.4}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
