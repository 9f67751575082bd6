//! Command-line front end: run workloads, inspect constraint automata,
//! check the scheduling optimality claim and replay golden cache traces.
//!
//! The log level comes from `RADIXFLOW_LOG` (default `warn`).

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use radixflow::experiment::{preprocessing_reuse, run_experiment, EngineConfig};
use radixflow::fsm::{FsmConfig, FsmIndex};
use radixflow::golden::{replay, Scenario};
use radixflow::oracles::verify_theorem_1_seed;
use radixflow::workload::{WorkloadKind, WorkloadSpec, JSON_GRADE_PATTERN};

#[derive(Parser)]
#[command(name = "radixflow", version, about = "Prefix-sharing LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and write metrics.json and steps.csv.
    Simulate {
        #[arg(long)]
        workload: PathBuf,
        /// Engine configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Named ablation applied on top of the configuration.
        #[arg(long, default_value = "full")]
        ablation: String,
    },
    /// Constraint automaton tools.
    Fsm {
        #[command(subcommand)]
        cmd: FsmCmd,
    },
    /// Brute-force checks.
    Verify {
        #[command(subcommand)]
        cmd: VerifyCmd,
    },
    /// Print the default engine configuration as JSON.
    Defaults,
    /// Replay a scripted cache walkthrough and diff it against its golden
    /// expectations.
    Replay {
        #[arg(long)]
        golden: PathBuf,
    },
}

#[derive(Subcommand)]
enum FsmCmd {
    /// Compile a regex and dump the compressed automaton.
    Compile {
        #[arg(long)]
        regex: String,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Depth-first order is optimal: brute force, closed form and the
    /// cache-aware scheduler agree on seeded workloads.
    Theorem1 {
        /// Inclusive range such as `0..99`.
        #[arg(long, default_value = "0..99", value_parser = parse_seeds)]
        seeds: Range<u64>,
        /// Write one report per seed here as a JSON array.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses an inclusive seed range `A..B` (or `A..=B`).
fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let bad = || format!("expected A..B, got {s:?}");
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok(a..b + 1)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn simulate(workload: &Path, config: Option<&Path>, out: &Path, ablation: &str) -> Result<()> {
    let spec = WorkloadSpec::from_json(&read(workload)?)?;
    let base = match config {
        Some(p) => EngineConfig::from_json(&read(p)?).context("parsing engine config")?,
        None => EngineConfig::default(),
    };
    let cfg = base.ablation(ablation)?;
    info!("running {} with ablation {ablation}", spec.name());
    let run = run_experiment(&spec, &cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("metrics.json"), &(serde_json::to_string_pretty(&run.report)? + "\n"))?;
    write(&out.join("steps.csv"), &run.steps_csv())?;
    if let WorkloadKind::JsonDecode { programs, regex, .. } = &spec.kind {
        let pattern = regex.as_deref().unwrap_or(JSON_GRADE_PATTERN);
        let timing = preprocessing_reuse(pattern, &cfg.model(), *programs)?;
        write(&out.join("preprocessing.json"), &(serde_json::to_string_pretty(&timing)? + "\n"))?;
    }
    let r = &run.report;
    println!(
        "{}: {} programs, hit rate {:.4} (optimal {:.4}), throughput {:.3} programs/kstep",
        r.workload, r.programs, r.hit_rate, r.optimal_hit_rate, r.throughput_programs_per_kilostep
    );
    Ok(())
}

fn fsm_compile(regex: &str, dot: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let cfg = EngineConfig::default();
    let index = FsmIndex::build(regex, cfg.vocabulary(), FsmConfig::default())?;
    let fsm = index.fsm();
    info!("{} dfa states, {} compressed states", index.dfa().num_states(), fsm.num_states());
    if let Some(p) = dot {
        write(p, &fsm.to_dot())?;
    }
    if let Some(p) = json {
        write(p, &fsm.to_json())?;
    }
    if dot.is_none() && json.is_none() {
        println!("{}", fsm.to_json());
    } else {
        println!("{} states, {} edges", fsm.num_states(), fsm.num_edges());
    }
    Ok(())
}

fn theorem1(seeds: Range<u64>, out: Option<&Path>) -> Result<bool> {
    let vocab = EngineConfig::default().vocabulary();
    let mut reports = Vec::new();
    let mut failed = 0;
    for seed in seeds {
        let r = verify_theorem_1_seed(seed, vocab.clone())?;
        if !r.holds() {
            failed += 1;
            println!("seed {seed}: FAIL {}", serde_json::to_string(&r)?);
        }
        reports.push(r);
    }
    if let Some(p) = out {
        write(p, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    }
    println!("{} of {} seeds agree", reports.len() - failed, reports.len());
    Ok(failed == 0)
}

fn replay_golden(path: &Path) -> Result<bool> {
    let scenario = Scenario::from_json(&read(path)?)?;
    let report = replay(&scenario)?;
    for (i, o) in report.observed.iter().enumerate() {
        println!("step {}: {}", i + 1, if o.tree.is_empty() { "(empty)" } else { &o.tree });
    }
    for d in &report.diffs {
        println!("DIFF {d}");
    }
    if report.matches() {
        println!("structural diff empty");
    }
    Ok(report.matches())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RADIXFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate { workload, config, out, ablation } => simulate(&workload, config.as_deref(), &out, &ablation).map(|_| true),
        Cmd::Fsm { cmd: FsmCmd::Compile { regex, dot, json } } => fsm_compile(&regex, dot.as_deref(), json.as_deref()).map(|_| true),
        Cmd::Verify { cmd: VerifyCmd::Theorem1 { seeds, out } } => theorem1(seeds, out.as_deref()),
        Cmd::Replay { golden } => replay_golden(&golden),
        Cmd::Defaults => serde_json::to_string_pretty(&EngineConfig::default()).map(|j| println!("{j}")).map(|_| true).map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..99").unwrap(), 0..100);
        assert_eq!(parse_seeds("0..=99").unwrap(), 0..100);
        assert_eq!(parse_seeds("5..5").unwrap(), 5..6);
        assert!(parse_seeds("6..5").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
