//! Golden replay of a scripted cache walkthrough.
//!
//! A scenario names token segments and lists, per step, the requests to run
//! with their outputs fixed in advance. After each step the cache tree is
//! rendered with segment names and compared against the expected structure,
//! splits and evictions.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool_sched::{Policy, RequestSpec, SchedError, Scheduler, SchedulerConfig};
use crate::radix_cache::NodeDump;
use crate::{MockModel, TokenId, Vocabulary};

#[derive(Debug, Error)]
pub enum GoldenError {
    #[error("unknown segment `{0}`")]
    UnknownSegment(String),
    #[error("duplicate segment `{0}`")]
    DuplicateSegment(String),
    #[error("step {step}: {source}")]
    Sched {
        step: usize,
        #[source]
        source: SchedError,
    },
    #[error("step {step}: {msg}")]
    Accounting { step: usize, msg: String },
    #[error("bad scenario file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedRequest {
    pub input: Vec<String>,
    pub output: Vec<String>,
}

/// What the tree must look like after a step.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Rendered tree: `label{child,child}` with children sorted, labels as
    /// `+`-joined segment names.
    pub tree: String,
    /// Paths of nodes created by splitting an edge, `/` between node labels.
    pub splits: Vec<String>,
    /// Removed edges in eviction order.
    pub evictions: Vec<String>,
    pub root_children: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedStep {
    pub requests: Vec<ScriptedRequest>,
    pub expect: StepOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub capacity: usize,
    pub segments: Vec<Segment>,
    pub steps: Vec<ScriptedStep>,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, GoldenError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Replay result: the observed outcome of every step and the mismatches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub observed: Vec<StepOutcome>,
    pub diffs: Vec<String>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.diffs.is_empty()
    }
}

struct Segments {
    ids: HashMap<String, (TokenId, usize)>,
    owner: Vec<(TokenId, String)>,
}

impl Segments {
    fn new(list: &[Segment]) -> Result<Self, GoldenError> {
        let mut ids = HashMap::new();
        let mut owner = Vec::new();
        let mut next: TokenId = 1;
        for s in list {
            if ids.insert(s.name.clone(), (next, s.len)).is_some() {
                return Err(GoldenError::DuplicateSegment(s.name.clone()));
            }
            owner.push((next, s.name.clone()));
            next += s.len as TokenId;
        }
        Ok(Self { ids, owner })
    }

    fn tokens(&self, names: &[String]) -> Result<Vec<TokenId>, GoldenError> {
        let mut out = Vec::new();
        for n in names {
            let &(start, len) = self.ids.get(n).ok_or_else(|| GoldenError::UnknownSegment(n.clone()))?;
            out.extend(start..start + len as TokenId);
        }
        Ok(out)
    }

    /// Names a token run; partial segments show their offsets.
    fn render(&self, label: &[TokenId]) -> String {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < label.len() {
            let idx = self.owner.partition_point(|(s, _)| *s <= label[i]) - 1;
            let (start, name) = &self.owner[idx];
            let len = self.ids[name].1;
            let off = (label[i] - start) as usize;
            let mut j = i;
            while j < label.len() && label[j] == start + (off + j - i) as TokenId && off + j - i < len {
                j += 1;
            }
            let end = off + j - i;
            if off == 0 && end == len {
                parts.push(name.clone());
            } else {
                parts.push(format!("{name}[{off}..{end}]"));
            }
            i = j;
        }
        parts.join("+")
    }

    fn render_tree(&self, n: &NodeDump) -> String {
        let mut kids: Vec<String> = n.children.iter().map(|c| self.render_node(c)).collect();
        kids.sort();
        kids.join(",")
    }

    fn render_node(&self, n: &NodeDump) -> String {
        let label = self.render(&n.label);
        if n.children.is_empty() {
            label
        } else {
            format!("{label}{{{}}}", self.render_tree(n))
        }
    }
}

/// Token path of every non-root node, with its label boundaries.
fn node_paths(root: &NodeDump) -> Vec<(Vec<TokenId>, Vec<usize>)> {
    fn walk(n: &NodeDump, path: &mut Vec<TokenId>, cuts: &mut Vec<usize>, out: &mut Vec<(Vec<TokenId>, Vec<usize>)>) {
        for c in &n.children {
            path.extend_from_slice(&c.label);
            cuts.push(path.len());
            out.push((path.clone(), cuts.clone()));
            walk(c, path, cuts, out);
            cuts.pop();
            path.truncate(path.len() - c.label.len());
        }
    }
    let mut out = Vec::new();
    walk(root, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

/// Runs the scenario step by step on a fresh cache-aware scheduler.
pub fn replay(scenario: &Scenario) -> Result<ReplayReport, GoldenError> {
    let segs = Segments::new(&scenario.segments)?;
    let cfg = SchedulerConfig { capacity: scenario.capacity, policy: Policy::CacheAware, ..Default::default() };
    let model = MockModel::new(Arc::new(Vocabulary::build(0, 0)), 0);
    let mut sched = Scheduler::new(cfg, model);
    sched.record_evictions(true);
    let mut observed = Vec::new();
    let mut diffs = Vec::new();
    let mut before = node_paths(&sched.tree().dump());
    for (k, step) in scenario.steps.iter().enumerate() {
        let n = k + 1;
        for r in &step.requests {
            let input = segs.tokens(&r.input)?;
            let output = segs.tokens(&r.output)?;
            sched.submit(RequestSpec::forced(input, output)).map_err(|source| GoldenError::Sched { step: n, source })?;
        }
        sched.run_to_completion().map_err(|source| GoldenError::Sched { step: n, source })?;
        sched.check_accounting().map_err(|msg| GoldenError::Accounting { step: n, msg })?;
        if !sched.all_unpinned() {
            return Err(GoldenError::Accounting { step: n, msg: "pinned nodes after drain".into() });
        }
        let dump = sched.tree().dump();
        let after = node_paths(&dump);
        let old: BTreeSet<&Vec<TokenId>> = before.iter().map(|(p, _)| p).collect();
        let splits = after
            .iter()
            .filter(|(p, _)| !old.contains(p))
            .filter(|(p, _)| before.iter().any(|(q, _)| q.len() > p.len() && q.starts_with(p)))
            .map(|(p, cuts)| {
                let mut from = 0;
                cuts.iter().map(|&c| std::mem::replace(&mut from, c)..c).map(|r| segs.render(&p[r])).collect::<Vec<_>>().join("/")
            })
            .collect();
        let evictions = sched.drain_evictions().iter().map(|e| segs.render(&e.path[e.from..])).collect();
        let outcome = StepOutcome { tree: segs.render_tree(&dump), splits, evictions, root_children: dump.children.len() };
        if outcome != step.expect {
            diffs.push(format!("step {n}: expected {:?}, observed {:?}", step.expect, outcome));
        }
        observed.push(outcome);
        before = after;
    }
    Ok(ReplayReport { observed, diffs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_names_partial_segments() {
        let s = Segments::new(&[Segment { name: "A".into(), len: 3 }, Segment { name: "B".into(), len: 2 }]).unwrap();
        assert_eq!(s.render(&[1, 2, 3, 4, 5]), "A+B");
        assert_eq!(s.render(&[2, 3, 4]), "A[1..3]+B[0..1]");
    }

    #[test]
    fn unknown_segment_is_an_error() {
        let sc = Scenario {
            capacity: 10,
            segments: vec![Segment { name: "A".into(), len: 1 }],
            steps: vec![ScriptedStep {
                requests: vec![ScriptedRequest { input: vec!["Z".into()], output: vec![] }],
                expect: StepOutcome::default(),
            }],
        };
        assert!(matches!(replay(&sc), Err(GoldenError::UnknownSegment(_))));
    }
}
