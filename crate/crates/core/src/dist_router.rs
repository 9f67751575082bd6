//! Data-parallel serving: a router dispatches requests to independent
//! worker schedulers using a meta-tree of which worker caches which prefix.
//!
//! Workers report finished sequences right away and evictions through a
//! FIFO queue that the router applies lazily, so the meta-tree may list a
//! path a worker already dropped but never misses one it holds.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MockModel;
use crate::pool_sched::{FinishedRequest, Metrics, RequestId, RequestSpec, SchedError, Scheduler, SchedulerConfig};
use crate::radix_cache::EvictedPath;
use crate::tokenizer::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("router needs at least one worker")]
    NoWorkers,
    #[error("worker {worker}: {source}")]
    Worker { worker: usize, source: SchedError },
}

/// How a request picks its worker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoutePolicy {
    /// Longest cached prefix, then least load, then lowest id.
    AffinityFirst,
    /// Least load, then longest cached prefix, then lowest id.
    LoadFirst,
    /// `weight * matched/len - (1 - weight) * load/max_load`.
    Blend { weight: f64 },
}

impl Default for RoutePolicy {
    fn default() -> Self {
        RoutePolicy::Blend { weight: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub workers: usize,
    pub policy: RoutePolicy,
    /// Apply queued evictions once this many are pending; always applied at
    /// the end of a dispatch round.
    pub sync_threshold: usize,
    /// Step workers on scoped threads between dispatch rounds.
    pub parallel: bool,
    pub sched: SchedulerConfig,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { workers: 4, policy: RoutePolicy::default(), sync_threshold: 64, parallel: false, sched: SchedulerConfig::default() }
    }
}

/// Per-worker membership of one meta-tree node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Annot {
    /// Worker tree clock of the latest insert covering this node.
    seq: u64,
    /// Dispatched requests through this node that have not finished.
    pending: u32,
}

#[derive(Clone, Debug, Default)]
struct MetaNode {
    children: HashMap<TokenId, usize>,
    parent: usize,
    token: TokenId,
    annots: BTreeMap<usize, Annot>,
}

/// Token trie annotated with the workers believed to cache each path.
#[derive(Clone, Debug)]
pub struct MetaTree {
    nodes: Vec<MetaNode>,
    free: Vec<usize>,
}

impl Default for MetaTree {
    fn default() -> Self {
        Self::new()
    }
}

impl MetaTree {
    pub fn new() -> Self {
        Self { nodes: vec![MetaNode::default()], free: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    fn child_or_insert(&mut self, at: usize, t: TokenId) -> usize {
        if let Some(&c) = self.nodes[at].children.get(&t) {
            return c;
        }
        let node = MetaNode { parent: at, token: t, ..Default::default() };
        let id = match self.free.pop() {
            Some(i) => {
                self.nodes[i] = node;
                i
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        };
        self.nodes[at].children.insert(t, id);
        id
    }

    fn annotate(&mut self, worker: usize, path: &[TokenId], f: impl Fn(&mut Annot)) {
        let mut at = 0;
        for &t in path {
            at = self.child_or_insert(at, t);
            f(self.nodes[at].annots.entry(worker).or_default());
        }
    }

    /// Marks a dispatched prompt as in flight on `worker`.
    pub fn add_pending(&mut self, worker: usize, input: &[TokenId]) {
        self.annotate(worker, input, |a| a.pending += 1);
    }

    /// Records a finished request: its prompt is no longer pending and the
    /// whole sequence is cached as of `seq`.
    pub fn finish(&mut self, worker: usize, input: &[TokenId], output: &[TokenId], seq: u64) {
        self.annotate(worker, input, |a| {
            a.pending = a.pending.saturating_sub(1);
            a.seq = a.seq.max(seq);
        });
        let mut at = 0;
        for &t in input {
            at = self.nodes[at].children[&t];
        }
        for &t in output {
            at = self.child_or_insert(at, t);
            let a = self.nodes[at].annots.entry(worker).or_default();
            a.seq = a.seq.max(seq);
        }
    }

    /// Matched prefix length per worker.
    pub fn affinity(&self, input: &[TokenId], workers: usize) -> Vec<usize> {
        let mut m = vec![0; workers];
        let mut at = 0;
        for (d, t) in input.iter().enumerate() {
            let Some(&c) = self.nodes[at].children.get(t) else { break };
            at = c;
            for &w in self.nodes[at].annots.keys() {
                if w < workers && m[w] == d {
                    m[w] = d + 1;
                }
            }
        }
        m
    }

    /// Removes `worker` from the evicted part of `e.path` and everything
    /// below it, unless a newer insert or an in-flight request covers it.
    pub fn apply_eviction(&mut self, worker: usize, e: &EvictedPath) -> bool {
        let mut at = 0;
        for &t in &e.path[..e.from] {
            match self.nodes[at].children.get(&t) {
                Some(&c) => at = c,
                None => return false,
            }
        }
        let mut changed = false;
        let mut whole = true;
        for &t in &e.path[e.from..] {
            let Some(&c) = self.nodes[at].children.get(&t) else {
                whole = false;
                break;
            };
            at = c;
            changed |= self.drop_stale(at, worker, e.seq);
        }
        // The evicted node was a leaf of the worker, so nothing below it can
        // be held by that worker with an older insert.
        if whole {
            let mut stack: Vec<usize> = self.nodes[at].children.values().copied().collect();
            while let Some(n) = stack.pop() {
                changed |= self.drop_stale(n, worker, e.seq);
                stack.extend(self.nodes[n].children.values().copied());
            }
        }
        self.prune(at);
        changed
    }

    fn drop_stale(&mut self, n: usize, worker: usize, seq: u64) -> bool {
        let annots = &mut self.nodes[n].annots;
        match annots.get(&worker) {
            Some(a) if a.pending == 0 && a.seq < seq => {
                annots.remove(&worker);
                true
            }
            _ => false,
        }
    }

    /// Frees unannotated leaves from `n` upward, then any unannotated
    /// subtrees below `n`.
    fn prune(&mut self, n: usize) {
        let mut stack: Vec<usize> = self.nodes[n].children.values().copied().collect();
        let mut order = Vec::new();
        while let Some(c) = stack.pop() {
            order.push(c);
            stack.extend(self.nodes[c].children.values().copied());
        }
        for &c in order.iter().rev() {
            self.remove_if_empty(c);
        }
        let mut at = n;
        loop {
            let parent = self.nodes[at].parent;
            if at == 0 || !self.remove_if_empty(at) {
                break;
            }
            at = parent;
        }
    }

    fn remove_if_empty(&mut self, n: usize) -> bool {
        let node = &self.nodes[n];
        if n == 0 || !node.annots.is_empty() || !node.children.is_empty() {
            return false;
        }
        let (p, t) = (node.parent, node.token);
        self.nodes[p].children.remove(&t);
        self.nodes[n] = MetaNode::default();
        self.free.push(n);
        true
    }

    /// Maximal annotated paths of `worker`, sorted.
    pub fn worker_paths(&self, worker: usize) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            let mut deeper = false;
            for (&t, &c) in &self.nodes[n].children {
                if self.nodes[c].annots.contains_key(&worker) {
                    deeper = true;
                    let mut p = path.clone();
                    p.push(t);
                    stack.push((c, p));
                }
            }
            if !deeper && n != 0 {
                out.push(path);
            }
        }
        out.sort();
        out
    }

    fn any_pending(&self) -> bool {
        self.nodes.iter().any(|n| n.annots.values().any(|a| a.pending > 0))
    }
}

/// FIFO of worker eviction reports awaiting the router.
#[derive(Clone, Debug, Default)]
pub struct EvictionQueue {
    records: VecDeque<(usize, EvictedPath)>,
}

impl EvictionQueue {
    pub fn push(&mut self, worker: usize, e: EvictedPath) {
        self.records.push_back((worker, e));
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Aggregate and per-worker outcome of a routed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub per_worker: Vec<Metrics>,
    pub assigned: Vec<usize>,
    /// Largest worker clock.
    pub makespan: u64,
    pub hit_rate: f64,
    pub per_worker_hit_rate: Vec<Option<f64>>,
    /// Mean steps between arrival and admission.
    pub mean_queue_delay: f64,
    pub syncs: usize,
    pub applied_evictions: usize,
}

impl RouterReport {
    pub fn throughput_per_kilostep(&self) -> f64 {
        let n: usize = self.assigned.iter().sum();
        if self.makespan == 0 {
            return 0.0;
        }
        n as f64 * 1000.0 / self.makespan as f64
    }
}

pub struct Router {
    cfg: RouterConfig,
    workers: Vec<Scheduler>,
    meta: MetaTree,
    queue: EvictionQueue,
    inputs: Vec<HashMap<RequestId, Vec<TokenId>>>,
    assigned: Vec<usize>,
    finished: Vec<(usize, FinishedRequest)>,
    syncs: usize,
    applied: usize,
}

impl Router {
    pub fn new(cfg: RouterConfig, model: MockModel) -> Result<Self, RouterError> {
        if cfg.workers == 0 {
            return Err(RouterError::NoWorkers);
        }
        let workers = (0..cfg.workers)
            .map(|_| {
                let mut s = Scheduler::new(cfg.sched.clone(), model.clone());
                s.record_evictions(true);
                s
            })
            .collect();
        Ok(Self {
            inputs: vec![HashMap::new(); cfg.workers],
            assigned: vec![0; cfg.workers],
            cfg,
            workers,
            meta: MetaTree::new(),
            queue: EvictionQueue::default(),
            finished: Vec::new(),
            syncs: 0,
            applied: 0,
        })
    }

    pub fn meta_tree(&self) -> &MetaTree {
        &self.meta
    }

    pub fn workers(&self) -> &[Scheduler] {
        &self.workers
    }

    pub fn queue(&self) -> &EvictionQueue {
        &self.queue
    }

    /// Finished requests with their worker, in completion order per round.
    pub fn finished(&self) -> &[(usize, FinishedRequest)] {
        &self.finished
    }

    fn pick(&self, input: &[TokenId]) -> usize {
        let n = self.workers.len();
        let aff = self.meta.affinity(input, n);
        let load: Vec<usize> = self.workers.iter().map(|w| w.outstanding_tokens()).collect();
        let key = |w: usize| -> (i64, i64) {
            let (a, l) = (aff[w] as i64, load[w] as i64);
            match self.cfg.policy {
                RoutePolicy::AffinityFirst => (a, -l),
                RoutePolicy::LoadFirst => (-l, a),
                RoutePolicy::Blend { weight } => {
                    let max_load = load.iter().copied().max().unwrap_or(0).max(1) as f64;
                    let len = input.len().max(1) as f64;
                    let s = weight * aff[w] as f64 / len - (1.0 - weight) * load[w] as f64 / max_load;
                    ((s * 1e9) as i64, -l)
                }
            }
        };
        // Strictly greater keeps the lowest id on ties.
        (1..n).fold(0, |best, w| if key(w) > key(best) { w } else { best })
    }

    /// Assigns each request of a batch, in order. Requests later in the
    /// batch see earlier ones as pending paths, so shared prefixes within a
    /// batch gravitate to the same worker.
    pub fn dispatch(&mut self, batch: Vec<RequestSpec>) -> Result<Vec<usize>, RouterError> {
        let mut out = Vec::with_capacity(batch.len());
        for spec in batch {
            let w = self.pick(&spec.input);
            let input = spec.input.to_vec();
            let id = self.workers[w].submit(spec).map_err(|source| RouterError::Worker { worker: w, source })?;
            self.meta.add_pending(w, &input);
            self.inputs[w].insert(id, input);
            self.assigned[w] += 1;
            out.push(w);
        }
        Ok(out)
    }

    /// Applies every queued eviction. Returns how many changed the tree.
    pub fn sync_evictions(&mut self) -> usize {
        let mut applied = 0;
        while let Some((w, e)) = self.queue.records.pop_front() {
            applied += self.meta.apply_eviction(w, &e) as usize;
        }
        self.syncs += 1;
        self.applied += applied;
        applied
    }

    fn collect(&mut self, w: usize, done: Vec<FinishedRequest>) {
        for e in self.workers[w].drain_evictions() {
            self.queue.push(w, e);
        }
        for f in done {
            let input = self.inputs[w].remove(&f.id).expect("dispatched request");
            self.meta.finish(w, &input, &f.output, f.tree_seq);
            self.finished.push((w, f));
        }
    }

    /// Steps every busy worker until its clock reaches `until`.
    pub fn advance(&mut self, until: u64) -> Result<(), RouterError> {
        let run = |s: &mut Scheduler, w: usize| -> Result<Vec<FinishedRequest>, RouterError> {
            let mut done = Vec::new();
            while !s.is_idle() && s.clock() < until {
                done.extend(s.step().map_err(|source| RouterError::Worker { worker: w, source })?);
            }
            Ok(done)
        };
        let results: Vec<Result<Vec<FinishedRequest>, RouterError>> = if self.cfg.parallel {
            thread::scope(|sc| {
                let handles: Vec<_> = self.workers.iter_mut().enumerate().map(|(w, s)| sc.spawn(move || run(s, w))).collect();
                handles.into_iter().map(|h| h.join().expect("worker thread")).collect()
            })
        } else {
            self.workers.iter_mut().enumerate().map(|(w, s)| run(s, w)).collect()
        };
        for (w, r) in results.into_iter().enumerate() {
            self.collect(w, r?);
            if self.queue.len() >= self.cfg.sync_threshold {
                self.sync_evictions();
            }
        }
        Ok(())
    }

    /// Dispatches `requests` as they arrive and runs to completion.
    pub fn run(&mut self, mut requests: Vec<RequestSpec>) -> Result<RouterReport, RouterError> {
        requests.sort_by_key(|r| r.ready_time);
        let mut it = requests.into_iter().peekable();
        while let Some(first) = it.next() {
            let t = first.ready_time;
            self.advance(t)?;
            let mut batch = vec![first];
            while let Some(r) = it.next_if(|r| r.ready_time == t) {
                batch.push(r);
            }
            self.dispatch(batch)?;
            self.sync_evictions();
        }
        self.advance(u64::MAX)?;
        self.sync_evictions();
        Ok(self.report())
    }

    pub fn report(&self) -> RouterReport {
        let per_worker: Vec<Metrics> = self.workers.iter().map(|w| w.metrics()).collect();
        let cached: u64 = per_worker.iter().map(|m| m.cached_prompt_tokens).sum();
        let total: u64 = per_worker.iter().map(|m| m.total_prompt_tokens).sum();
        let delays: Vec<u64> = self.finished.iter().map(|(_, f)| f.admitted_at - f.ready_time).collect();
        RouterReport {
            per_worker_hit_rate: per_worker.iter().map(|m| m.hit_rate().ok()).collect(),
            per_worker,
            assigned: self.assigned.clone(),
            makespan: self.workers.iter().map(|w| w.clock()).max().unwrap_or(0),
            hit_rate: if total == 0 { 0.0 } else { cached as f64 / total as f64 },
            mean_queue_delay: if delays.is_empty() { 0.0 } else { delays.iter().sum::<u64>() as f64 / delays.len() as f64 },
            syncs: self.syncs,
            applied_evictions: self.applied,
        }
    }

    /// With nothing in flight and the queue drained, the meta-tree must list
    /// exactly the cached paths of each worker.
    pub fn check_convergence(&self) -> Result<(), String> {
        if !self.queue.is_empty() {
            return Err(format!("{} evictions not yet applied", self.queue.len()));
        }
        if self.workers.iter().any(|w| !w.is_idle()) || self.meta.any_pending() {
            return Err("requests still in flight".into());
        }
        for (w, s) in self.workers.iter().enumerate() {
            let mut cached = s.tree().leaf_paths();
            cached.sort();
            let meta = self.meta.worker_paths(w);
            if cached != meta {
                return Err(format!("worker {w}: {} cached paths, meta-tree lists {}", cached.len(), meta.len()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tokenizer::Vocabulary;

    fn model() -> MockModel {
        MockModel::new(Arc::new(Vocabulary::build(0, 16)), 1)
    }

    #[test]
    fn cold_start_spreads_by_load() {
        let mut r = Router::new(RouterConfig { policy: RoutePolicy::AffinityFirst, ..Default::default() }, model()).unwrap();
        let batch = (0..8).map(|i| RequestSpec::new(vec![i as TokenId * 10 + 1, 2, 3], 1)).collect();
        let w = r.dispatch(batch).unwrap();
        let mut counts = [0; 4];
        for x in w {
            counts[x] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
    }

    #[test]
    fn follows_unique_affinity() {
        let mut r = Router::new(RouterConfig { policy: RoutePolicy::AffinityFirst, ..Default::default() }, model()).unwrap();
        r.meta.finish(2, &[5, 6, 7], &[], 1);
        assert_eq!(r.dispatch(vec![RequestSpec::new(vec![5, 6, 7, 8], 1)]).unwrap(), vec![2]);
    }

    #[test]
    fn eviction_removes_route() {
        let mut m = MetaTree::new();
        m.finish(0, &[1, 2, 3], &[], 5);
        assert_eq!(m.affinity(&[1, 2, 3], 1), vec![3]);
        assert!(m.apply_eviction(0, &EvictedPath { path: vec![1, 2, 3], from: 0, seq: 9 }));
        assert_eq!(m.affinity(&[1, 2, 3], 1), vec![0]);
        assert_eq!(m.node_count(), 1);
    }

    #[test]
    fn stale_eviction_ignored() {
        let mut m = MetaTree::new();
        m.finish(0, &[1, 2], &[], 10);
        assert!(!m.apply_eviction(0, &EvictedPath { path: vec![1, 2], from: 0, seq: 4 }));
        assert_eq!(m.affinity(&[1, 2], 1), vec![2]);
    }

    #[test]
    fn empty_sync_is_zero() {
        let mut r = Router::new(RouterConfig::default(), model()).unwrap();
        assert_eq!(r.sync_evictions(), 0);
    }
}
