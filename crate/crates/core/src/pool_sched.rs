//! Token memory pool and the cache-aware continuous-batching scheduler.
//!
//! The pool is shared by cached tokens and running requests:
//! `in_use = tree.total_cached() + sum of tokens owned by running requests`,
//! where a running request owns its unmatched prompt tokens and its output.
//! Finished requests insert prompt plus output into the tree and release
//! whatever the tree did not take.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MockModel;
use crate::radix_cache::{EvictedPath, NodeId, RadixError, RadixTree};
use crate::tokenizer::{TokenId, TokenSequence};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("request needs {need} tokens but the pool holds {capacity}")]
    Capacity { need: usize, capacity: usize },
    #[error("pool exhausted: need {need}, free {free} after eviction")]
    OutOfMemory { need: usize, free: usize },
    #[error("hit rate is undefined with no prompt tokens")]
    UndefinedHitRate,
    #[error("scheduler made no progress with {0} waiting requests")]
    Stalled(usize),
    #[error(transparent)]
    Radix(#[from] RadixError),
}

pub type RequestId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum Policy {
    /// Longest matched prefix first, ties by arrival.
    CacheAware,
    /// Strict arrival order with head-of-line blocking.
    Fcfs,
    /// Seeded shuffle every scheduling round.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub capacity: usize,
    pub policy: Policy,
    /// Disable the cache entirely.
    pub no_cache: bool,
    /// When false, only whole previously inserted sequences can be reused,
    /// as with a flat table of cached requests.
    pub tree_structure: bool,
    /// Fraction of the matched prefix that may be reused.
    pub match_cap: Option<f64>,
    /// Upper bound on concurrently running requests.
    pub max_running: Option<usize>,
    /// Decode tokens that fit in one unit of simulated time. A decode step
    /// is memory bound, so a wider batch costs little extra.
    pub decode_width: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 16,
            policy: Policy::CacheAware,
            no_cache: false,
            tree_structure: true,
            match_cap: None,
            max_running: None,
            decode_width: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryPool {
    pub capacity: usize,
    pub in_use: usize,
}

impl MemoryPool {
    pub fn free(&self) -> usize {
        self.capacity - self.in_use
    }
}

/// A request as submitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestSpec {
    pub input: TokenSequence,
    pub max_new_tokens: usize,
    /// Simulated time before which the request is not visible.
    pub ready_time: u64,
    /// Output to emit instead of the model's greedy tokens, one per decode
    /// step. Used for outputs decoded under a constraint.
    pub forced_output: Option<Vec<TokenId>>,
}

impl RequestSpec {
    pub fn new(input: impl Into<TokenSequence>, max_new_tokens: usize) -> Self {
        Self { input: input.into(), max_new_tokens, ready_time: 0, forced_output: None }
    }

    /// A request whose output is fixed in advance.
    pub fn forced(input: impl Into<TokenSequence>, output: Vec<TokenId>) -> Self {
        Self { input: input.into(), max_new_tokens: output.len(), ready_time: 0, forced_output: Some(output) }
    }

    pub fn at(mut self, ready_time: u64) -> Self {
        self.ready_time = ready_time;
        self
    }
}

#[derive(Clone, Debug)]
struct Request {
    id: RequestId,
    spec: RequestSpec,
    arrival_seq: u64,
    prefix_node: Option<NodeId>,
    prefix_len: usize,
    produced: Vec<TokenId>,
    owned: usize,
    hash: u64,
    needs_prefill: bool,
    admitted_at: u64,
    inflight: Option<NodeId>,
}

/// A completed request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinishedRequest {
    pub id: RequestId,
    pub input: TokenSequence,
    pub output: Vec<TokenId>,
    pub prefix_len: usize,
    pub ready_time: u64,
    pub admitted_at: u64,
    pub finish_time: u64,
    /// Tree clock right after the finished sequence was inserted.
    pub tree_seq: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub cached_prompt_tokens: u64,
    pub total_prompt_tokens: u64,
    pub prefill_compute_tokens: u64,
    pub decode_steps: u64,
    pub finished_requests: u64,
    pub simulated_time: u64,
    pub evicted_tokens: u64,
}

impl Metrics {
    pub fn hit_rate(&self) -> Result<f64, SchedError> {
        if self.total_prompt_tokens == 0 {
            return Err(SchedError::UndefinedHitRate);
        }
        Ok(self.cached_prompt_tokens as f64 / self.total_prompt_tokens as f64)
    }
}

/// One row of the per-step time series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub time: u64,
    pub batch_size: usize,
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
}

/// Simulated inference server: radix cache, pool and scheduler.
#[derive(Debug)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    model: MockModel,
    tree: RadixTree,
    // Prompts of admitted, unfinished requests; used to hold back requests
    // whose prefix is about to be computed by another request.
    inflight: RadixTree,
    pool: MemoryPool,
    waiting: Vec<Request>,
    running: Vec<Request>,
    next_id: RequestId,
    clock: u64,
    rng: ChaCha8Rng,
    metrics: Metrics,
    steps: Vec<StepRecord>,
    record_evictions: bool,
    evictions: Vec<EvictedPath>,
    tree_time: Duration,
}

macro_rules! timed {
    ($self:ident, $e:expr) => {{
        let t0 = Instant::now();
        let r = $e;
        $self.tree_time += t0.elapsed();
        r
    }};
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig, model: MockModel) -> Self {
        let seed = match cfg.policy {
            Policy::Random(s) => s,
            _ => 0,
        };
        let pool = MemoryPool { capacity: cfg.capacity, in_use: 0 };
        Self {
            cfg,
            model,
            tree: RadixTree::new(),
            inflight: RadixTree::new(),
            pool,
            waiting: Vec::new(),
            running: Vec::new(),
            next_id: 0,
            clock: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            metrics: Metrics::default(),
            steps: Vec::new(),
            record_evictions: false,
            evictions: Vec::new(),
            tree_time: Duration::ZERO,
        }
    }

    /// Keeps the full path of every evicted leaf for [`drain_evictions`](Self::drain_evictions).
    pub fn record_evictions(&mut self, on: bool) {
        self.record_evictions = on;
    }

    pub fn drain_evictions(&mut self) -> Vec<EvictedPath> {
        std::mem::take(&mut self.evictions)
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &MockModel {
        &self.model
    }

    pub fn tree(&self) -> &RadixTree {
        &self.tree
    }

    pub fn pool(&self) -> MemoryPool {
        self.pool
    }

    pub fn metrics(&self) -> Metrics {
        self.metrics
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    /// Wall time spent inside radix-tree operations.
    pub fn tree_time(&self) -> Duration {
        self.tree_time
    }

    pub fn num_waiting(&self) -> usize {
        self.waiting.len()
    }

    pub fn num_running(&self) -> usize {
        self.running.len()
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty() && self.running.is_empty()
    }

    /// Tokens still to be decoded by running requests, plus prompt tokens
    /// of waiting requests.
    pub fn outstanding_tokens(&self) -> usize {
        let run: usize = self.running.iter().map(|r| r.spec.max_new_tokens - r.produced.len()).sum();
        let wait: usize = self.waiting.iter().map(|r| r.spec.input.len() + r.spec.max_new_tokens).sum();
        run + wait
    }

    pub fn submit(&mut self, spec: RequestSpec) -> Result<RequestId, SchedError> {
        let need = spec.input.len() + spec.max_new_tokens;
        if need > self.cfg.capacity {
            return Err(SchedError::Capacity { need, capacity: self.cfg.capacity });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.waiting.push(Request {
            id,
            spec,
            arrival_seq: id,
            prefix_node: None,
            prefix_len: 0,
            produced: Vec::new(),
            owned: 0,
            hash: 0,
            needs_prefill: true,
            admitted_at: 0,
            inflight: None,
        });
        Ok(id)
    }

    /// In-batch deduplication only makes sense when partial prefixes are reusable.
    fn dedup(&self) -> bool {
        self.cfg.policy == Policy::CacheAware && self.cfg.tree_structure && !self.cfg.no_cache
    }

    fn usable_match(&self, tokens: &[TokenId]) -> usize {
        if self.cfg.no_cache {
            return 0;
        }
        let m = if self.cfg.tree_structure { self.tree.peek_prefix(tokens) } else { self.tree.peek_terminal_prefix(tokens) };
        match self.cfg.match_cap {
            Some(f) => ((m as f64) * f.clamp(0.0, 1.0)).floor() as usize,
            None => m,
        }
    }

    /// Chooses requests to admit this round and pins their prefixes.
    pub fn schedule_step(&mut self) -> Result<Vec<RequestId>, SchedError> {
        let mut cand: Vec<(usize, usize)> = Vec::new();
        for (i, r) in self.waiting.iter().enumerate() {
            if r.spec.ready_time <= self.clock {
                let m = timed!(self, self.usable_match(&r.spec.input));
                cand.push((i, m));
            }
        }
        match self.cfg.policy {
            Policy::CacheAware => {
                cand.sort_by(|a, b| b.1.cmp(&a.1).then(self.waiting[a.0].arrival_seq.cmp(&self.waiting[b.0].arrival_seq)))
            }
            Policy::Fcfs => cand.sort_by_key(|c| self.waiting[c.0].arrival_seq),
            Policy::Random(_) => {
                cand.sort_by_key(|c| self.waiting[c.0].arrival_seq);
                cand.shuffle(&mut self.rng);
            }
        }
        let reserved: usize = self.running.iter().map(|r| r.spec.max_new_tokens - r.produced.len()).sum();
        let mut available = (self.tree.evictable_size() + self.pool.free()) as isize - reserved as isize;
        let mut current = 0isize;
        let mut admitted_idx = Vec::new();
        let slots = self.cfg.max_running.map_or(usize::MAX, |m| m.saturating_sub(self.running.len()));
        for (i, usable) in cand {
            if admitted_idx.len() >= slots {
                break;
            }
            let req = &self.waiting[i];
            let input = req.spec.input.clone();
            if self.dedup() {
                let shared = timed!(self, self.inflight.peek_prefix(&input));
                if shared > usable {
                    continue;
                }
            }
            let footprint = (input.len() - usable + req.spec.max_new_tokens) as isize;
            if footprint + current > available {
                if self.cfg.policy == Policy::Fcfs {
                    break;
                }
                continue;
            }
            let (node, got) = if self.cfg.no_cache || usable == 0 {
                (self.tree.root(), 0)
            } else {
                timed!(self, self.tree.match_prefix(&input[..usable]))
            };
            debug_assert_eq!(got, usable);
            // Pinning the prefix takes it out of the evictable budget.
            let delta = timed!(self, self.tree.inc_ref(node))?;
            if footprint + current > available + delta {
                timed!(self, self.tree.dec_ref(node))?;
                if self.cfg.policy == Policy::Fcfs {
                    break;
                }
                continue;
            }
            available += delta;
            current += footprint;
            let fl = if self.dedup() {
                let (_, h) = timed!(self, self.inflight.insert_with_handle(&input));
                timed!(self, self.inflight.inc_ref(h))?;
                Some(h)
            } else {
                None
            };
            self.metrics.cached_prompt_tokens += got as u64;
            self.metrics.total_prompt_tokens += input.len() as u64;
            let req = &mut self.waiting[i];
            req.prefix_node = Some(node);
            req.prefix_len = got;
            req.inflight = fl;
            req.admitted_at = self.clock;
            req.hash = self.model.prefix_hash(&input);
            admitted_idx.push(i);
        }
        let ids: Vec<RequestId> = admitted_idx.iter().map(|&i| self.waiting[i].id).collect();
        let mut remove = admitted_idx;
        remove.sort_unstable();
        let mut batch = Vec::with_capacity(remove.len());
        for &i in remove.iter().rev() {
            batch.push(self.waiting.remove(i));
        }
        batch.sort_by_key(|r| r.arrival_seq);
        self.running.extend(batch);
        Ok(ids)
    }

    fn allocate(&mut self, need: usize) -> Result<(), SchedError> {
        if self.pool.free() < need {
            let shortfall = need - self.pool.free();
            let evicted = if self.record_evictions {
                let log = &mut self.evictions;
                timed!(self, self.tree.evict_with_paths(shortfall, |p| log.push(p)))
            } else {
                timed!(self, self.tree.evict(shortfall, |_| {}))
            };
            self.pool.in_use -= evicted;
            self.metrics.evicted_tokens += evicted as u64;
            if self.pool.free() < need {
                return Err(SchedError::OutOfMemory { need, free: self.pool.free() });
            }
        }
        self.pool.in_use += need;
        Ok(())
    }

    /// Runs one batch iteration: prefill of newly admitted requests, one
    /// decode token for every running request, then completion.
    pub fn run_step(&mut self) -> Result<Vec<FinishedRequest>, SchedError> {
        let prefill: usize = self.running.iter().filter(|r| r.needs_prefill).map(|r| r.spec.input.len() - r.prefix_len).sum();
        let decode = self.running.iter().filter(|r| r.produced.len() < r.spec.max_new_tokens).count();
        if self.running.is_empty() {
            return Ok(Vec::new());
        }
        self.allocate(prefill + decode)?;
        let batch_size = self.running.len();
        for r in &mut self.running {
            if r.needs_prefill {
                r.owned += r.spec.input.len() - r.prefix_len;
                r.needs_prefill = false;
            }
            if r.produced.len() < r.spec.max_new_tokens {
                let t = match &r.spec.forced_output {
                    Some(out) => out[r.produced.len()],
                    None => self.model.next_token(r.hash),
                };
                r.hash = self.model.extend_hash(r.hash, t);
                r.produced.push(t);
                r.owned += 1;
            }
        }
        self.model.burn(prefill + decode);
        self.clock += (prefill + decode.div_ceil(self.cfg.decode_width.max(1))) as u64;
        self.metrics.prefill_compute_tokens += prefill as u64;
        self.metrics.decode_steps += decode as u64;
        self.metrics.simulated_time = self.clock;
        self.steps.push(StepRecord { time: self.clock, batch_size, prefill_tokens: prefill, decode_tokens: decode });

        let mut finished = Vec::new();
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].produced.len() < self.running[i].spec.max_new_tokens {
                i += 1;
                continue;
            }
            let r = self.running.remove(i);
            finished.push(self.finish(r)?);
        }
        Ok(finished)
    }

    fn finish(&mut self, r: Request) -> Result<FinishedRequest, SchedError> {
        let node = r.prefix_node.expect("running request has a prefix node");
        timed!(self, self.tree.dec_ref(node))?;
        if let Some(h) = r.inflight {
            timed!(self, self.inflight.dec_ref(h))?;
            timed!(self, self.inflight.evict(usize::MAX, |_| {}));
        }
        let mut full = r.spec.input.to_vec();
        full.extend_from_slice(&r.produced);
        let added = if self.cfg.no_cache { 0 } else { timed!(self, self.tree.insert(&full)) };
        debug_assert!(added <= r.owned);
        self.pool.in_use -= r.owned - added;
        self.metrics.finished_requests += 1;
        Ok(FinishedRequest {
            id: r.id,
            input: r.spec.input,
            output: r.produced,
            prefix_len: r.prefix_len,
            ready_time: r.spec.ready_time,
            admitted_at: r.admitted_at,
            finish_time: self.clock,
            tree_seq: self.tree.clock(),
        })
    }

    /// Schedules and runs one iteration. When nothing can run, the clock
    /// jumps to the next arrival.
    pub fn step(&mut self) -> Result<Vec<FinishedRequest>, SchedError> {
        self.schedule_step()?;
        if self.running.is_empty() {
            let next = self.waiting.iter().map(|r| r.spec.ready_time).filter(|&t| t > self.clock).min();
            match next {
                Some(t) => {
                    self.clock = t;
                    self.metrics.simulated_time = t;
                    return Ok(Vec::new());
                }
                None if self.waiting.is_empty() => return Ok(Vec::new()),
                None => return Err(SchedError::Stalled(self.waiting.len())),
            }
        }
        self.run_step()
    }

    pub fn run_to_completion(&mut self) -> Result<Vec<FinishedRequest>, SchedError> {
        let mut out = Vec::new();
        while !self.is_idle() {
            out.extend(self.step()?);
        }
        Ok(out)
    }

    /// Checks pool accounting against the tree and running requests.
    pub fn check_accounting(&self) -> Result<(), String> {
        let owned: usize = self.running.iter().map(|r| r.owned).sum();
        let expect = self.tree.total_cached() + owned;
        if self.pool.in_use != expect {
            return Err(format!("pool in_use {} != cached {} + owned {owned}", self.pool.in_use, self.tree.total_cached()));
        }
        if self.pool.in_use > self.pool.capacity {
            return Err(format!("pool over capacity: {} > {}", self.pool.in_use, self.pool.capacity));
        }
        if self.metrics.cached_prompt_tokens > self.metrics.total_prompt_tokens {
            return Err("cached tokens exceed total".into());
        }
        for r in &self.running {
            let node = r.prefix_node.unwrap();
            if self.tree.ref_count(node).map_err(|e| e.to_string())? == 0 && node != self.tree.root() {
                return Err(format!("running request {} lost its pin", r.id));
            }
            if self.tree.path(node).map_err(|e| e.to_string())? != r.spec.input[..r.prefix_len] {
                return Err(format!("running request {} is pinned to the wrong path", r.id));
            }
        }
        self.tree.check_invariants()
    }

    /// True if every node has a zero reference count.
    pub fn all_unpinned(&self) -> bool {
        self.tree.evictable_size() == self.tree.total_cached()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tokenizer::Vocabulary;

    fn sched(cfg: SchedulerConfig) -> Scheduler {
        Scheduler::new(cfg, MockModel::new(Arc::new(Vocabulary::build(0, 16)), 0))
    }

    fn seq(start: u32, n: u32) -> Vec<TokenId> {
        (start..start + n).collect()
    }

    #[test]
    fn single_request_bookkeeping() {
        let mut s = sched(SchedulerConfig::default());
        s.submit(RequestSpec::new(seq(0, 10), 2)).unwrap();
        assert!(s.step().unwrap().is_empty());
        let done = s.step().unwrap();
        assert_eq!(done.len(), 1);
        assert_eq!(s.metrics().prefill_compute_tokens, 10);
        assert_eq!(s.metrics().decode_steps, 2);

        s.submit(RequestSpec::new(seq(0, 10), 2)).unwrap();
        s.schedule_step().unwrap();
        let m = s.metrics();
        assert_eq!(m.cached_prompt_tokens, 10);
        s.run_to_completion().unwrap();
        assert_eq!(s.metrics().prefill_compute_tokens, 10);
        assert_eq!(s.metrics().hit_rate().unwrap(), 0.5);
        s.check_accounting().unwrap();
        assert!(s.all_unpinned());
    }

    #[test]
    fn admission_order_cache_aware() {
        let mut s = sched(SchedulerConfig::default());
        s.tree.insert(&seq(100, 12));
        s.tree.insert(&seq(200, 4));
        s.pool.in_use = 16;
        let a = s.submit(RequestSpec::new(seq(300, 5), 1)).unwrap();
        let b = s.submit(RequestSpec::new(seq(100, 14), 1)).unwrap();
        let c = s.submit(RequestSpec::new(seq(200, 6), 1)).unwrap();
        assert_eq!(s.schedule_step().unwrap(), vec![b, c, a]);
        let lens: Vec<_> = s.running.iter().map(|r| r.prefix_len).collect();
        assert_eq!(lens, vec![0, 12, 4]);
    }

    #[test]
    fn tie_break_by_arrival() {
        let mut s = sched(SchedulerConfig::default());
        s.tree.insert(&seq(100, 8));
        s.tree.insert(&seq(200, 8));
        s.pool.in_use = 16;
        let first = s.submit(RequestSpec::new(seq(200, 10), 1)).unwrap();
        let second = s.submit(RequestSpec::new(seq(100, 10), 1)).unwrap();
        assert_eq!(s.schedule_step().unwrap(), vec![first, second]);
    }

    #[test]
    fn fcfs_ignores_prefixes() {
        let mut s = sched(SchedulerConfig { policy: Policy::Fcfs, ..Default::default() });
        s.tree.insert(&seq(100, 12));
        s.pool.in_use = 12;
        let a = s.submit(RequestSpec::new(seq(300, 5), 1)).unwrap();
        let b = s.submit(RequestSpec::new(seq(100, 14), 1)).unwrap();
        assert_eq!(s.schedule_step().unwrap(), vec![a, b]);
    }

    #[test]
    fn capacity_error() {
        let mut s = sched(SchedulerConfig { capacity: 8, ..Default::default() });
        assert_eq!(s.submit(RequestSpec::new(seq(0, 8), 1)), Err(SchedError::Capacity { need: 9, capacity: 8 }));
    }

    #[test]
    fn evicts_cache_for_larger_batch() {
        let mut s = sched(SchedulerConfig { capacity: 40, ..Default::default() });
        s.submit(RequestSpec::new(seq(0, 30), 0)).unwrap();
        s.run_to_completion().unwrap();
        assert_eq!(s.tree().total_cached(), 30);
        s.submit(RequestSpec::new(seq(100, 20), 0)).unwrap();
        s.submit(RequestSpec::new(seq(200, 15), 0)).unwrap();
        s.schedule_step().unwrap();
        assert_eq!(s.num_running(), 2);
        s.run_step().unwrap();
        assert!(s.metrics().evicted_tokens >= 30);
        s.check_accounting().unwrap();
    }

    #[test]
    fn undefined_hit_rate() {
        assert_eq!(Metrics::default().hit_rate(), Err(SchedError::UndefinedHitRate));
    }
}
