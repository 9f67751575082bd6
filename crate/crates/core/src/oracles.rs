//! Brute-force references for the cache, scheduler and decoder.
//!
//! None of these reuse the radix tree, the scheduler or the compressed
//! automaton: the cache simulation here is a per-token trie with its own LRU,
//! and the decoder walks the uncompressed DFA with masks computed piece by
//! piece.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::fsm::{Dfa, FsmError};
use crate::model::{ByteConstraint, MockModel};
use crate::pool_sched::{Policy, RequestSpec, SchedError, Scheduler, SchedulerConfig};
use crate::radix_cache::{NodeId, RadixTree};
use crate::tokenizer::{TokenId, Vocabulary};

/// Largest instance the permutation search accepts.
pub const MAX_BRUTE_FORCE: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{got} requests exceed the brute-force limit of {MAX_BRUTE_FORCE}")]
    TooLarge { got: usize },
    #[error("cache capacity {capacity} is below the longest request ({max_len} tokens)")]
    Precondition { capacity: usize, max_len: usize },
    #[error("hit rate is undefined with no prompt tokens")]
    Undefined,
    #[error(transparent)]
    Sched(#[from] SchedError),
}

struct TrieNode {
    parent: usize,
    children: HashMap<TokenId, usize>,
    last: u64,
    alive: bool,
}

/// Per-token trie cache with LRU leaf eviction, executing one request at a
/// time.
struct TokenCache {
    nodes: Vec<TrieNode>,
    size: usize,
    capacity: usize,
    time: u64,
}

impl TokenCache {
    fn new(capacity: usize) -> Self {
        let root = TrieNode { parent: 0, children: HashMap::new(), last: 0, alive: true };
        Self { nodes: vec![root], size: 0, capacity, time: 0 }
    }

    // Runs one request and returns the number of cached tokens it reused.
    fn run(&mut self, req: &[TokenId]) -> usize {
        self.time += 1;
        let mut path = vec![0usize];
        let mut cur = 0;
        for &t in req {
            match self.nodes[cur].children.get(&t) {
                Some(&c) => {
                    cur = c;
                    self.nodes[c].last = self.time;
                    path.push(c);
                }
                None => break,
            }
        }
        let hits = path.len() - 1;
        for &t in &req[hits..] {
            if self.size >= self.capacity && !self.evict_one(&path) {
                break;
            }
            let n = self.nodes.len();
            self.nodes.push(TrieNode { parent: cur, children: HashMap::new(), last: self.time, alive: true });
            self.nodes[cur].children.insert(t, n);
            self.size += 1;
            cur = n;
            path.push(n);
        }
        hits
    }

    fn evict_one(&mut self, pinned: &[usize]) -> bool {
        let victim = (1..self.nodes.len())
            .filter(|&i| self.nodes[i].alive && self.nodes[i].children.is_empty() && !pinned.contains(&i))
            .min_by_key(|&i| (self.nodes[i].last, i));
        let Some(v) = victim else { return false };
        let p = self.nodes[v].parent;
        self.nodes[p].children.retain(|_, c| *c != v);
        self.nodes[v].alive = false;
        self.size -= 1;
        true
    }
}

fn total_tokens(requests: &[Vec<TokenId>]) -> usize {
    requests.iter().map(Vec::len).sum()
}

/// Hit rate of executing `requests` sequentially in `order`.
pub fn sequential_hit_rate(requests: &[Vec<TokenId>], order: &[usize], capacity: usize) -> Result<f64, OracleError> {
    let total = total_tokens(requests);
    if total == 0 {
        return Err(OracleError::Undefined);
    }
    let mut cache = TokenCache::new(capacity);
    let hits: usize = order.iter().map(|&i| cache.run(&requests[i])).sum();
    Ok(hits as f64 / total as f64)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Best hit rate over all execution orders, and the first order (in
/// lexicographic enumeration) that reaches it.
pub fn optimal_hit_rate_bruteforce(requests: &[Vec<TokenId>], capacity: usize) -> Result<(f64, Vec<usize>), OracleError> {
    if requests.len() > MAX_BRUTE_FORCE {
        return Err(OracleError::TooLarge { got: requests.len() });
    }
    let total = total_tokens(requests);
    if total == 0 {
        return Err(OracleError::Undefined);
    }
    let mut perm: Vec<usize> = (0..requests.len()).collect();
    let mut best_hits = 0;
    let mut best = perm.clone();
    loop {
        let mut cache = TokenCache::new(capacity);
        let hits: usize = perm.iter().map(|&i| cache.run(&requests[i])).sum();
        if hits > best_hits {
            best_hits = hits;
            best = perm.clone();
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok((best_hits as f64 / total as f64, best))
}

/// Number of distinct non-empty prefixes, i.e. the total edge length of the
/// requests' radix tree.
pub fn distinct_prefix_tokens(requests: &[Vec<TokenId>]) -> usize {
    let mut sorted: Vec<&Vec<TokenId>> = requests.iter().collect();
    sorted.sort();
    let mut n = 0;
    for (i, r) in sorted.iter().enumerate() {
        let shared = if i == 0 { 0 } else { r.iter().zip(sorted[i - 1].iter()).take_while(|(a, b)| a == b).count() };
        n += r.len() - shared;
    }
    n
}

/// Closed-form hit rate of a depth-first execution order:
/// `1 - distinct prefix tokens / total tokens`.
pub fn dfs_hit_rate(requests: &[Vec<TokenId>], capacity: usize) -> Result<f64, OracleError> {
    let max_len = requests.iter().map(Vec::len).max().unwrap_or(0);
    if capacity < max_len {
        return Err(OracleError::Precondition { capacity, max_len });
    }
    let total = total_tokens(requests);
    if total == 0 {
        return Err(OracleError::Undefined);
    }
    // Same value as 1 - distinct/total, computed from integers so equal
    // counts give bit-identical rates.
    Ok((total - distinct_prefix_tokens(requests)) as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub workload_seed: u64,
    pub brute_force: f64,
    pub closed_form: Option<f64>,
    /// Not run when the precondition fails.
    pub scheduler_achieved: Option<f64>,
    pub precondition_met: bool,
    pub best_order: Vec<usize>,
}

impl TheoremReport {
    /// All three rates equal. False when the capacity precondition fails.
    pub fn holds(&self) -> bool {
        match self.closed_form {
            Some(c) => self.brute_force == c && self.scheduler_achieved == Some(c),
            None => false,
        }
    }
}

/// Runs the brute-force search, the closed form and the cache-aware
/// scheduler (zero-length outputs, whole batch submitted at once, one
/// request running at a time).
pub fn verify_theorem_1(
    workload_seed: u64,
    requests: &[Vec<TokenId>],
    capacity: usize,
    vocab: Arc<Vocabulary>,
) -> Result<TheoremReport, OracleError> {
    let (brute_force, best_order) = optimal_hit_rate_bruteforce(requests, capacity)?;
    let closed_form = match dfs_hit_rate(requests, capacity) {
        Ok(r) => Some(r),
        Err(OracleError::Precondition { .. }) => None,
        Err(e) => return Err(e),
    };
    let scheduler_achieved = if closed_form.is_some() {
        let cfg = SchedulerConfig { capacity, policy: Policy::CacheAware, max_running: Some(1), ..Default::default() };
        let mut s = Scheduler::new(cfg, MockModel::new(vocab, workload_seed));
        for r in requests {
            s.submit(RequestSpec::new(r.clone(), 0))?;
        }
        s.run_to_completion()?;
        Some(s.metrics().hit_rate()?)
    } else {
        None
    };
    Ok(TheoremReport { workload_seed, brute_force, closed_form, scheduler_achieved, precondition_met: closed_form.is_some(), best_order })
}

/// The seeded check used by the verifier: 2 to 6 requests of up to 64
/// tokens, with the cache sized to the longest request.
pub fn verify_theorem_1_seed(seed: u64, vocab: Arc<Vocabulary>) -> Result<TheoremReport, OracleError> {
    let n = 2 + (seed % 5) as usize;
    let reqs = random_prefix_workload(seed, n, 64);
    let cap = reqs.iter().map(Vec::len).max().unwrap_or(1);
    verify_theorem_1(seed, &reqs, cap, vocab)
}

/// Random requests that form a prefix tree: each new request copies a
/// random-length prefix of an earlier one and appends fresh tokens.
pub fn random_prefix_workload(seed: u64, n: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<TokenId>> = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(1..=max_len);
        let mut r: Vec<TokenId> = if !out.is_empty() && rng.gen_bool(0.75) {
            let base = &out[rng.gen_range(0..out.len())];
            let keep = rng.gen_range(0..=base.len().min(len));
            base[..keep].to_vec()
        } else {
            Vec::new()
        };
        while r.len() < len {
            r.push(rng.gen_range(0..6));
        }
        out.push(r);
    }
    out
}

/// Flat table of every cached prefix. Prefix queries scan it directly; it
/// shares nothing with the radix tree.
#[derive(Clone, Debug, Default)]
pub struct FlatPrefixMap {
    prefixes: HashSet<Vec<TokenId>>,
}

impl FlatPrefixMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the table from full leaf paths.
    pub fn from_paths(paths: &[Vec<TokenId>]) -> Self {
        let mut m = Self::new();
        for p in paths {
            m.insert(p);
        }
        m
    }

    /// Adds all prefixes of `seq`; returns how many were new.
    pub fn insert(&mut self, seq: &[TokenId]) -> usize {
        (1..=seq.len()).filter(|&k| self.prefixes.insert(seq[..k].to_vec())).count()
    }

    pub fn longest_prefix(&self, seq: &[TokenId]) -> usize {
        (1..=seq.len()).rev().find(|&k| self.prefixes.contains(&seq[..k])).unwrap_or(0)
    }

    pub fn contains(&self, seq: &[TokenId]) -> bool {
        seq.is_empty() || self.prefixes.contains(seq)
    }

    /// Cached tokens, one per distinct prefix.
    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    pub fn is_subset(&self, other: &FlatPrefixMap) -> bool {
        self.prefixes.is_subset(&other.prefixes)
    }
}

/// Counters from a differential run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FuzzStats {
    pub ops: usize,
    pub inserts: usize,
    pub matches: usize,
    pub evictions: usize,
    pub evicted_tokens: usize,
    pub max_cached: usize,
}

fn fuzz_sequence(rng: &mut ChaCha8Rng, known: &[Vec<TokenId>], max_len: usize, alphabet: u32) -> Vec<TokenId> {
    let len = rng.gen_range(1..=max_len);
    let mut s = if !known.is_empty() && rng.gen_bool(0.6) {
        let base = &known[rng.gen_range(0..known.len())];
        base[..rng.gen_range(0..=base.len().min(len))].to_vec()
    } else {
        Vec::new()
    };
    while s.len() < len {
        s.push(rng.gen_range(0..alphabet));
    }
    s
}

/// Drives a radix tree and a [`FlatPrefixMap`] with the same `ops` random
/// operations (insert, match and pin, unpin, peek, evict) and checks after
/// each one that they agree and the tree invariants hold. Evictions must
/// leave every pinned path in place and only remove tokens.
pub fn radix_differential(seed: u64, ops: usize) -> Result<FuzzStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = RadixTree::new();
    let mut flat = FlatPrefixMap::new();
    let mut known: Vec<Vec<TokenId>> = Vec::new();
    let mut pins: Vec<(NodeId, Vec<TokenId>)> = Vec::new();
    let mut st = FuzzStats::default();
    let err = |i: usize, m: String| format!("op {i}: {m}");
    for i in 0..ops {
        let roll = rng.gen_range(0..100);
        if roll < 35 {
            let seq = fuzz_sequence(&mut rng, &known, 12, 4);
            let got = tree.insert(&seq);
            let want = flat.insert(&seq);
            if got != want {
                return Err(err(i, format!("insert {seq:?} added {got}, flat map added {want}")));
            }
            known.push(seq);
            st.inserts += 1;
        } else if roll < 55 {
            let seq = fuzz_sequence(&mut rng, &known, 12, 4);
            let (node, got) = tree.match_prefix(&seq);
            let want = flat.longest_prefix(&seq);
            if got != want {
                return Err(err(i, format!("match {seq:?} gave {got}, flat map {want}")));
            }
            let path = tree.path(node).map_err(|e| err(i, e.to_string()))?;
            if path != seq[..got] {
                return Err(err(i, format!("matched node path {path:?} is not the prefix")));
            }
            tree.inc_ref(node).map_err(|e| err(i, e.to_string()))?;
            pins.push((node, path));
            st.matches += 1;
        } else if roll < 70 {
            if !pins.is_empty() {
                let (node, path) = pins.swap_remove(rng.gen_range(0..pins.len()));
                if tree.path(node).map_err(|e| err(i, e.to_string()))? != path {
                    return Err(err(i, "pinned node moved".into()));
                }
                tree.dec_ref(node).map_err(|e| err(i, e.to_string()))?;
            }
        } else if roll < 85 {
            let seq = fuzz_sequence(&mut rng, &known, 12, 4);
            let (got, want) = (tree.peek_prefix(&seq), flat.longest_prefix(&seq));
            if got != want {
                return Err(err(i, format!("peek {seq:?} gave {got}, flat map {want}")));
            }
        } else {
            let needed = rng.gen_range(1..=24);
            let mut removed = Vec::new();
            let freed = tree.evict_with_paths(needed, |p| removed.push(p));
            let after = FlatPrefixMap::from_paths(&tree.leaf_paths());
            if !after.is_subset(&flat) || flat.len() - after.len() != freed {
                return Err(err(i, format!("eviction freed {freed} but the table shrank by {}", flat.len() - after.len())));
            }
            if freed < needed && tree.evictable_size() != 0 {
                return Err(err(i, "eviction stopped early".into()));
            }
            for (_, p) in &pins {
                if !after.contains(p) {
                    return Err(err(i, format!("evicted pinned path {p:?}")));
                }
            }
            for r in &removed {
                if after.contains(&r.path[..r.from + 1]) {
                    return Err(err(i, "reported edge is still cached".into()));
                }
            }
            flat = after;
            st.evictions += 1;
            st.evicted_tokens += freed;
        }
        if tree.total_cached() != flat.len() {
            return Err(err(i, format!("tree holds {} tokens, flat map {}", tree.total_cached(), flat.len())));
        }
        tree.check_invariants().map_err(|m| err(i, m))?;
        st.max_cached = st.max_cached.max(flat.len());
        st.ops += 1;
    }
    Ok(st)
}

/// Runs `requests` random prefix-sharing requests through a scheduler with a
/// tight pool, random policy and random arrivals, checking pool accounting,
/// pins and tree invariants after every step. After the drain every
/// reference count must be zero and the pool must hold exactly the cache.
pub fn scheduler_fuzz(seed: u64, requests: usize) -> Result<FuzzStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = match rng.gen_range(0..3) {
        0 => Policy::CacheAware,
        1 => Policy::Fcfs,
        _ => Policy::Random(seed),
    };
    let cfg = SchedulerConfig {
        capacity: rng.gen_range(64..=256),
        policy,
        tree_structure: rng.gen_bool(0.8),
        max_running: rng.gen_bool(0.3).then(|| rng.gen_range(1..=4)),
        decode_width: rng.gen_range(1..=8),
        ..Default::default()
    };
    let mut s = Scheduler::new(cfg, MockModel::new(Arc::new(Vocabulary::build(0, 0)), seed));
    s.record_evictions(true);
    let mut known = Vec::new();
    for _ in 0..requests {
        let seq = fuzz_sequence(&mut rng, &known, 40, 3);
        let out = rng.gen_range(0..=8);
        s.submit(RequestSpec::new(seq.clone(), out).at(rng.gen_range(0..200))).map_err(|e| e.to_string())?;
        known.push(seq);
    }
    let mut st = FuzzStats::default();
    while !s.is_idle() {
        s.step().map_err(|e| e.to_string())?;
        s.check_accounting().map_err(|m| format!("step {}: {m}", st.ops))?;
        let ev = s.drain_evictions();
        st.evictions += ev.len();
        st.evicted_tokens += ev.iter().map(|e| e.path.len() - e.from).sum::<usize>();
        st.max_cached = st.max_cached.max(s.tree().total_cached());
        st.ops += 1;
        if st.ops > 1_000_000 {
            return Err("scheduler did not drain".into());
        }
    }
    st.inserts = s.metrics().finished_requests as usize;
    if st.inserts != requests {
        return Err(format!("{} of {requests} requests finished", st.inserts));
    }
    if !s.all_unpinned() {
        return Err("reference counts remain after drain".into());
    }
    if s.pool().in_use != s.tree().total_cached() {
        return Err(format!("pool holds {} tokens, cache {}", s.pool().in_use, s.tree().total_cached()));
    }
    Ok(st)
}

/// Reference token-by-token constrained decoder over the uncompressed DFA.
/// Returns the text and the number of model passes.
pub fn naive_constrained_decode(
    model: &MockModel,
    dfa: &Dfa,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<(Vec<u8>, Vec<TokenId>, usize), FsmError> {
    let mut masks: HashMap<u32, Vec<bool>> = HashMap::new();
    let mask_at = |s: u32, masks: &mut HashMap<u32, Vec<bool>>| -> Vec<bool> {
        masks
            .entry(s)
            .or_insert_with(|| {
                let mut m: Vec<bool> = vocab.pieces().map(|(_, p)| dfa.walk(s, p).is_some()).collect();
                m.push(dfa.is_accepting(s));
                m
            })
            .clone()
    };
    let mut text = Vec::new();
    let mut tokens = Vec::new();
    let mut state = dfa.start();
    let mut passes = 0;
    loop {
        let mask = mask_at(state, &mut masks);
        let open = mask[..vocab.len()].iter().filter(|&&b| b).count();
        if open == 0 && mask[vocab.len()] {
            break;
        }
        if open == 0 {
            return Err(FsmError::DeadEnd);
        }
        passes += 1;
        let tok = model.constrained_next(&text, dfa as &dyn ByteConstraint, state, |t| mask[t as usize]).ok_or(FsmError::DeadEnd)?;
        if tok == vocab.eos() {
            break;
        }
        let piece = vocab.piece(tok).expect("allowed token has a piece");
        state = dfa.walk(state, piece).expect("mask guarantees a path");
        text.extend_from_slice(piece);
        tokens.push(tok);
        if tokens.len() > max_tokens {
            return Err(FsmError::BudgetExceeded(max_tokens));
        }
    }
    Ok((text, tokens, passes))
}
