//! Experiment runner: workload plus engine configuration in, metrics out.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist_router::{Router, RouterConfig, RouterError, RouterReport};
use crate::fsm::{constrained_decode, DecodeMode, FsmConfig, FsmError, FsmIndex};
use crate::model::MockModel;
use crate::pool_sched::{Policy, RequestSpec, Scheduler, SchedulerConfig, StepRecord};
use crate::program::{run_programs, InterpreterConfig, Op, Program, ProgramError, ProgramResult};
use crate::tokenizer::{TokenId, Vocabulary, DEFAULT_MERGES};
use crate::workload::{WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("program execution: {0}")]
    Program(#[from] ProgramError),
    #[error("router: {0}")]
    Router(#[from] RouterError),
    #[error("regex: {0}")]
    Regex(#[from] FsmError),
    #[error("routed runs need single-call programs; program {0} is not one")]
    NotRoutable(usize),
    #[error("unknown ablation {0:?}")]
    UnknownAblation(String),
}

/// Everything about the engine that is not the workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub scheduler: SchedulerConfig,
    pub interpreter: InterpreterConfig,
    /// Dispatch through a data-parallel router instead of one scheduler.
    pub router: Option<RouterConfig>,
    pub model_seed: u64,
    pub vocab_seed: u64,
    pub vocab_merges: usize,
    /// Work per computed token, to give the simulator a realistic cost.
    pub burn_iters: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerConfig::default(),
            interpreter: InterpreterConfig::default(),
            router: None,
            model_seed: 0,
            vocab_seed: 0,
            vocab_merges: DEFAULT_MERGES,
            burn_iters: 0,
        }
    }
}

/// Named ablations, each switching off one component of the full engine.
pub const ABLATIONS: [&str; 8] = ["full", "no_tree", "fcfs", "random", "no_parallelism", "no_hint", "no_compression", "no_cache"];

impl EngineConfig {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// This configuration with one component disabled.
    pub fn ablation(&self, name: &str) -> Result<Self, ExperimentError> {
        let mut c = self.clone();
        match name {
            "full" => {}
            "no_tree" => c.scheduler.tree_structure = false,
            "fcfs" => c.scheduler.policy = Policy::Fcfs,
            "random" => c.scheduler.policy = Policy::Random(self.model_seed),
            "no_parallelism" => c.interpreter.frontend_parallelism = false,
            "no_hint" => c.interpreter.frontend_hint = false,
            "no_compression" => c.interpreter.compression = false,
            "no_cache" => c.scheduler.no_cache = true,
            other => return Err(ExperimentError::UnknownAblation(other.to_owned())),
        }
        Ok(c)
    }

    pub fn vocabulary(&self) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::build(self.vocab_seed, self.vocab_merges))
    }

    pub fn model(&self) -> MockModel {
        MockModel::new(self.vocabulary(), self.model_seed).with_burn(self.burn_iters)
    }
}

/// Deterministic summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub workload: String,
    pub programs: usize,
    pub requests: u64,
    pub hit_rate: f64,
    /// Closed-form optimum over the prompts actually issued.
    pub optimal_hit_rate: f64,
    pub prefill_compute: u64,
    pub decode_steps: u64,
    pub simulated_time: u64,
    pub throughput_programs_per_kilostep: f64,
    pub mean_latency_steps: f64,
    pub p50_latency_steps: u64,
    pub p95_latency_steps: u64,
    pub mean_batch_size: f64,
    pub evicted_tokens: u64,
    pub constrained_passes: usize,
    pub constrained_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub router: Option<RouterReport>,
}

/// A finished experiment, with data that does not belong in the report.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: MetricsReport,
    pub steps: Vec<StepRecord>,
    pub results: Vec<ProgramResult>,
    /// Time spent inside radix tree operations.
    pub tree_time: Duration,
    /// Wall time of the whole simulation.
    pub wall_time: Duration,
}

impl ExperimentRun {
    /// Per-step batch sizes as CSV.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,time,batch_size,prefill_tokens,decode_tokens\n");
        for (i, r) in self.steps.iter().enumerate() {
            s.push_str(&format!("{i},{},{},{},{}\n", r.time, r.batch_size, r.prefill_tokens, r.decode_tokens));
        }
        s
    }
}

/// Best possible hit rate of a request set with an unbounded cache, 0 when
/// empty. Each distinct prompt prefix must be computed once unless some
/// request decoded it as output.
pub fn optimal_hit_rate(requests: &[(&[TokenId], &[TokenId])]) -> f64 {
    let total: usize = requests.iter().map(|(i, _)| i.len()).sum();
    if total == 0 {
        return 0.0;
    }
    // Per-token trie: (children, decoded, prompted).
    let mut nodes: Vec<(HashMap<TokenId, usize>, bool, bool)> = vec![Default::default()];
    let mut walk = |seq: &mut dyn Iterator<Item = (TokenId, bool)>, mark_prompt: bool| {
        let mut cur = 0;
        for (t, decoded) in seq {
            let next = match nodes[cur].0.get(&t) {
                Some(&n) => n,
                None => {
                    nodes.push(Default::default());
                    let n = nodes.len() - 1;
                    nodes[cur].0.insert(t, n);
                    n
                }
            };
            cur = next;
            nodes[cur].1 |= decoded;
            nodes[cur].2 |= mark_prompt;
        }
    };
    for (input, output) in requests {
        let mut it = input.iter().map(|&t| (t, false)).chain(output.iter().map(|&t| (t, true)));
        walk(&mut it, false);
    }
    for (input, _) in requests {
        walk(&mut input.iter().map(|&t| (t, false)), true);
    }
    let computed = nodes.iter().filter(|n| n.2 && !n.1).count();
    (total - computed) as f64 / total as f64
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn run_experiment(spec: &WorkloadSpec, cfg: &EngineConfig) -> Result<ExperimentRun, ExperimentError> {
    let programs = spec.generate()?;
    run_programs_with(spec.name(), &programs, cfg)
}

/// Runs already generated programs.
pub fn run_programs_with(name: &str, programs: &[(Program, u64)], cfg: &EngineConfig) -> Result<ExperimentRun, ExperimentError> {
    if let Some(rc) = &cfg.router {
        return run_routed(name, programs, cfg, rc);
    }
    let start = Instant::now();
    let mut sched = Scheduler::new(cfg.scheduler.clone(), cfg.model());
    let run = run_programs(&mut sched, programs, cfg.interpreter)?;
    let wall_time = start.elapsed();
    let m = sched.metrics();
    let pairs: Vec<(&[TokenId], &[TokenId])> = run.requests.iter().map(|f| (&f.input[..], &f.output[..])).collect();
    let mut lat: Vec<u64> = run.programs.iter().map(|r| r.finish_time - r.arrival).collect();
    lat.sort_unstable();
    let steps = sched.steps().to_vec();
    let report = MetricsReport {
        workload: name.to_owned(),
        programs: programs.len(),
        requests: m.finished_requests,
        hit_rate: m.hit_rate().unwrap_or(0.0),
        optimal_hit_rate: optimal_hit_rate(&pairs),
        prefill_compute: m.prefill_compute_tokens,
        decode_steps: m.decode_steps,
        simulated_time: m.simulated_time,
        throughput_programs_per_kilostep: if m.simulated_time == 0 {
            0.0
        } else {
            programs.len() as f64 * 1000.0 / m.simulated_time as f64
        },
        mean_latency_steps: if lat.is_empty() { 0.0 } else { lat.iter().sum::<u64>() as f64 / lat.len() as f64 },
        p50_latency_steps: percentile(&lat, 0.5),
        p95_latency_steps: percentile(&lat, 0.95),
        mean_batch_size: if steps.is_empty() { 0.0 } else { steps.iter().map(|s| s.batch_size).sum::<usize>() as f64 / steps.len() as f64 },
        evicted_tokens: m.evicted_tokens,
        constrained_passes: run.programs.iter().map(|r| r.constrained_passes).sum(),
        constrained_tokens: run.programs.iter().map(|r| r.constrained_tokens).sum(),
        router: None,
    };
    Ok(ExperimentRun { report, steps, results: run.programs, tree_time: sched.tree_time(), wall_time })
}

/// Prompt tokens and output budget of a program that is a run of extends
/// followed by one plain generation.
fn single_call(p: &Program, vocab: &Vocabulary) -> Option<(Vec<TokenId>, usize)> {
    let (last, head) = p.ops.split_last()?;
    let Op::Gen { max_new_tokens, regex: None, .. } = last else { return None };
    let mut input = Vec::new();
    for op in head {
        let Op::Extend { text } = op else { return None };
        input.extend_from_slice(&vocab.encode(text.as_bytes()));
    }
    Some((input, *max_new_tokens))
}

/// One request per program, for programs that make a single plain
/// generation call.
pub fn routable_requests(programs: &[(Program, u64)], vocab: &Vocabulary) -> Result<Vec<RequestSpec>, ExperimentError> {
    programs
        .iter()
        .enumerate()
        .map(|(i, (p, at))| {
            let (input, max_new) = single_call(p, vocab).ok_or(ExperimentError::NotRoutable(i))?;
            Ok(RequestSpec::new(input, max_new).at(*at))
        })
        .collect()
}

fn run_routed(name: &str, programs: &[(Program, u64)], cfg: &EngineConfig, rc: &RouterConfig) -> Result<ExperimentRun, ExperimentError> {
    let model = cfg.model();
    let reqs = routable_requests(programs, model.vocab())?;
    let start = Instant::now();
    let mut rc = rc.clone();
    rc.sched = cfg.scheduler.clone();
    let mut router = Router::new(rc, model)?;
    let rr = router.run(reqs)?;
    let wall_time = start.elapsed();
    let mut lat: Vec<u64> = router.finished().iter().map(|(_, f)| f.finish_time - f.ready_time).collect();
    lat.sort_unstable();
    let sum = |f: fn(&crate::pool_sched::Metrics) -> u64| rr.per_worker.iter().map(f).sum::<u64>();
    let steps: Vec<StepRecord> = router.workers().iter().flat_map(|w| w.steps().iter().copied()).collect();
    let report = MetricsReport {
        workload: name.to_owned(),
        programs: programs.len(),
        requests: sum(|m| m.finished_requests),
        hit_rate: rr.hit_rate,
        optimal_hit_rate: optimal_hit_rate(&router.finished().iter().map(|(_, f)| (&f.input[..], &f.output[..])).collect::<Vec<_>>()),
        prefill_compute: sum(|m| m.prefill_compute_tokens),
        decode_steps: sum(|m| m.decode_steps),
        simulated_time: rr.makespan,
        throughput_programs_per_kilostep: rr.throughput_per_kilostep(),
        mean_latency_steps: if lat.is_empty() { 0.0 } else { lat.iter().sum::<u64>() as f64 / lat.len() as f64 },
        p50_latency_steps: percentile(&lat, 0.5),
        p95_latency_steps: percentile(&lat, 0.95),
        mean_batch_size: if steps.is_empty() { 0.0 } else { steps.iter().map(|s| s.batch_size).sum::<usize>() as f64 / steps.len() as f64 },
        evicted_tokens: sum(|m| m.evicted_tokens),
        constrained_passes: 0,
        constrained_tokens: 0,
        router: Some(rr),
    };
    let tree_time = router.workers().iter().map(|w| w.tree_time()).sum();
    Ok(ExperimentRun { report, steps, results: Vec::new(), tree_time, wall_time })
}

/// Cost of building the constraint index once per batch versus once per
/// request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingTiming {
    pub requests: usize,
    pub shared_micros: u128,
    pub per_request_micros: u128,
    /// per_request / shared.
    pub slowdown: f64,
}

pub fn preprocessing_reuse(pattern: &str, model: &MockModel, requests: usize) -> Result<PreprocessingTiming, ExperimentError> {
    let vocab = model.vocab().clone();
    let run = |ix: &FsmIndex, i: usize| constrained_decode(&model.reseeded(i as u64), ix, 256, DecodeMode::Compressed);
    let t0 = Instant::now();
    let shared = FsmIndex::build(pattern, vocab.clone(), FsmConfig::default())?;
    for i in 0..requests {
        run(&shared, i)?;
    }
    let shared_t = t0.elapsed();
    let t1 = Instant::now();
    for i in 0..requests {
        let ix = FsmIndex::build(pattern, vocab.clone(), FsmConfig::default())?;
        run(&ix, i)?;
    }
    let per_t = t1.elapsed();
    Ok(PreprocessingTiming {
        requests,
        shared_micros: shared_t.as_micros(),
        per_request_micros: per_t.as_micros(),
        slowdown: per_t.as_secs_f64() / shared_t.as_secs_f64().max(1e-9),
    })
}
