//! Interval multilevel Bayesian network over binary component states.
//!
//! Networks are trees: component roots carry normal-probability intervals,
//! internal nodes combine children through series (all children normal) or
//! parallel (at least one normal) gates. Because both gate maps are monotone
//! in every argument, evaluating the closed forms at the interval endpoints
//! is exact — the same numbers a scalar Bayesian network produces at those
//! endpoints, which [`BnGraph::brute_force_joint`] verifies by full
//! enumeration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::ProbInterval;

/// Most roots a network may have for brute-force enumeration (2^20 states).
pub const MAX_BRUTE_FORCE_ROOTS: usize = 20;

#[derive(Debug, Error)]
pub enum BnError {
    #[error("gate needs at least one child")]
    EmptyChildren,
    #[error("CPT width must lie in 1..=20, got {0}")]
    CptWidthOutOfRange(usize),
    #[error("duplicate node id {0}")]
    DuplicateId(String),
    #[error("node {parent} references unknown child {child}")]
    UnknownChild { parent: String, child: String },
    #[error("node {0} has more than one parent (networks must be trees)")]
    SharedChild(String),
    #[error("system node {0} not found")]
    SystemMissing(String),
    #[error("system node must have no parent, but {0} is a child")]
    SystemHasParent(String),
    #[error("node {0} unreachable from the system node")]
    Unreachable(String),
    #[error("invalid root probability interval on {id}: [{lo}, {hi}]")]
    BadRootProb { id: String, lo: f64, hi: f64 },
    #[error("evidence on unknown node {0}")]
    EvidenceUnknownNode(String),
    #[error("evidence state must be 0 or 1, got {state} for {id}")]
    BadEvidenceState { id: String, state: u8 },
    #[error("evidence on the system node {0} is not allowed")]
    EvidenceOnSystem(String),
    #[error("brute force supports at most {max} roots, network has {got}")]
    TooManyRoots { got: usize, max: usize },
}

/// Logical relationship between a block and its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    /// Normal iff every child is normal.
    Series,
    /// Normal iff at least one child is normal.
    Parallel,
}

/// `[∏ lo, ∏ hi]` — normal iff all children normal.
pub fn series_interval(children: &[ProbInterval]) -> Result<ProbInterval, BnError> {
    if children.is_empty() {
        return Err(BnError::EmptyChildren);
    }
    let lo = children.iter().map(|p| p.lo).product();
    let hi = children.iter().map(|p| p.hi).product();
    Ok(ProbInterval { lo, hi })
}

/// `[1 − ∏(1 − lo), 1 − ∏(1 − hi)]` — normal iff any child normal.
pub fn parallel_interval(children: &[ProbInterval]) -> Result<ProbInterval, BnError> {
    if children.is_empty() {
        return Err(BnError::EmptyChildren);
    }
    let lo = 1.0 - children.iter().map(|p| 1.0 - p.lo).product::<f64>();
    let hi = 1.0 - children.iter().map(|p| 1.0 - p.hi).product::<f64>();
    Ok(ProbInterval { lo, hi })
}

/// Deterministic gate output for given child states.
pub fn gate_output(gate: Gate, states: &[u8]) -> u8 {
    match gate {
        Gate::Series => u8::from(states.iter().all(|&s| s == 1)),
        Gate::Parallel => u8::from(states.iter().any(|&s| s == 1)),
    }
}

/// One row of an explicit conditional probability table.
#[derive(Debug, Clone, PartialEq)]
pub struct CptRow {
    /// Child states in binary-counting order (first child is the most
    /// significant digit).
    pub states: Vec<u8>,
    pub p_fail: f64,
    pub p_normal: f64,
}

/// The full 2^n-row CPT of a gate over `n` children.
pub fn cpt_for_gate(gate: Gate, n: usize) -> Result<Vec<CptRow>, BnError> {
    if n == 0 || n > MAX_BRUTE_FORCE_ROOTS {
        return Err(BnError::CptWidthOutOfRange(n));
    }
    let mut rows = Vec::with_capacity(1 << n);
    for row in 0..(1usize << n) {
        let states: Vec<u8> = (0..n).map(|j| ((row >> (n - 1 - j)) & 1) as u8).collect();
        let normal = gate_output(gate, &states);
        rows.push(CptRow {
            states,
            p_fail: f64::from(1 - normal),
            p_normal: f64::from(normal),
        });
    }
    Ok(rows)
}

/// One node of the on-disk network document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeSpec {
    Block { id: String, gate: Gate, children: Vec<String> },
    Root { id: String, p_lo: f64, p_hi: f64 },
}

impl NodeSpec {
    pub fn id(&self) -> &str {
        match self {
            NodeSpec::Block { id, .. } | NodeSpec::Root { id, .. } => id,
        }
    }
}

/// A tree-shaped interval Bayesian network with one system node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnGraph {
    pub nodes: Vec<NodeSpec>,
    pub system: String,
}

/// Which endpoint of every root interval a scalar evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Lower,
    Upper,
}

/// Evidence: node id → forced state (0 failure, 1 normal). A node under
/// evidence contributes a degenerate interval and its subtree is ignored.
pub type Evidence = BTreeMap<String, u8>;

enum Compiled {
    Root(ProbInterval),
    Block { gate: Gate, children: Vec<usize> },
}

impl BnGraph {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn index(&self) -> Result<BTreeMap<&str, usize>, BnError> {
        let mut index = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if index.insert(node.id(), i).is_some() {
                return Err(BnError::DuplicateId(node.id().to_string()));
            }
        }
        Ok(index)
    }

    fn compile(&self) -> Result<(Vec<Compiled>, usize), BnError> {
        let index = self.index()?;
        let &system = index
            .get(self.system.as_str())
            .ok_or_else(|| BnError::SystemMissing(self.system.clone()))?;

        let mut compiled = Vec::with_capacity(self.nodes.len());
        let mut parent_count = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            compiled.push(match node {
                NodeSpec::Root { id, p_lo, p_hi } => {
                    let p = ProbInterval { lo: *p_lo, hi: *p_hi };
                    p.validate().map_err(|_| BnError::BadRootProb {
                        id: id.clone(),
                        lo: *p_lo,
                        hi: *p_hi,
                    })?;
                    Compiled::Root(p)
                }
                NodeSpec::Block { id, gate, children } => {
                    if children.is_empty() {
                        return Err(BnError::EmptyChildren);
                    }
                    let mut child_idx = Vec::with_capacity(children.len());
                    for child in children {
                        let &ci =
                            index.get(child.as_str()).ok_or_else(|| BnError::UnknownChild {
                                parent: id.clone(),
                                child: child.clone(),
                            })?;
                        parent_count[ci] += 1;
                        child_idx.push(ci);
                    }
                    Compiled::Block { gate: *gate, children: child_idx }
                }
            });
        }
        for (i, &count) in parent_count.iter().enumerate() {
            if count > 1 {
                return Err(BnError::SharedChild(self.nodes[i].id().to_string()));
            }
            if i == system && count > 0 {
                return Err(BnError::SystemHasParent(self.system.clone()));
            }
        }
        // Reachability from the system node; with single parents this also
        // rules out cycles.
        let mut seen = BTreeSet::new();
        let mut stack = vec![system];
        while let Some(i) = stack.pop() {
            if seen.insert(i) {
                if let Compiled::Block { children, .. } = &compiled[i] {
                    stack.extend(children.iter().copied());
                }
            }
        }
        if let Some(i) = (0..self.nodes.len()).find(|i| !seen.contains(i)) {
            return Err(BnError::Unreachable(self.nodes[i].id().to_string()));
        }
        Ok((compiled, system))
    }

    fn check_evidence(&self, evidence: &Evidence) -> Result<(), BnError> {
        let index = self.index()?;
        for (id, &state) in evidence {
            if !index.contains_key(id.as_str()) {
                return Err(BnError::EvidenceUnknownNode(id.clone()));
            }
            if state > 1 {
                return Err(BnError::BadEvidenceState { id: id.clone(), state });
            }
            if *id == self.system {
                return Err(BnError::EvidenceOnSystem(id.clone()));
            }
        }
        Ok(())
    }

    /// Variable elimination on a tree: bottom-up gate evaluation of
    /// `Pr(S = 1)` under the given evidence.
    pub fn infer(&self, evidence: &Evidence) -> Result<ProbInterval, BnError> {
        self.check_evidence(evidence)?;
        let (compiled, system) = self.compile()?;
        fn eval(
            i: usize,
            nodes: &[NodeSpec],
            compiled: &[Compiled],
            evidence: &Evidence,
        ) -> ProbInterval {
            if let Some(&state) = evidence.get(nodes[i].id()) {
                let p = f64::from(state);
                return ProbInterval { lo: p, hi: p };
            }
            match &compiled[i] {
                Compiled::Root(p) => *p,
                Compiled::Block { gate, children } => {
                    let child_probs: Vec<ProbInterval> = children
                        .iter()
                        .map(|&c| eval(c, nodes, compiled, evidence))
                        .collect();
                    match gate {
                        Gate::Series => series_interval(&child_probs),
                        Gate::Parallel => parallel_interval(&child_probs),
                    }
                    .expect("children nonempty by construction")
                }
            }
        }
        Ok(eval(system, &self.nodes, &compiled, evidence))
    }

    /// Scalar `Pr(S = 1)` by summing the full joint over every root state
    /// combination, with deterministic gate CPTs and root probabilities
    /// taken at `endpoint`. The slow oracle behind [`BnGraph::infer`].
    pub fn brute_force_joint(
        &self,
        endpoint: Endpoint,
        evidence: &Evidence,
    ) -> Result<f64, BnError> {
        self.check_evidence(evidence)?;
        let (compiled, system) = self.compile()?;
        let roots: Vec<usize> = (0..compiled.len())
            .filter(|&i| matches!(compiled[i], Compiled::Root(_)))
            .collect();
        if roots.len() > MAX_BRUTE_FORCE_ROOTS {
            return Err(BnError::TooManyRoots {
                got: roots.len(),
                max: MAX_BRUTE_FORCE_ROOTS,
            });
        }
        let probs: Vec<f64> = roots
            .iter()
            .map(|&i| match &compiled[i] {
                Compiled::Root(p) => match endpoint {
                    Endpoint::Lower => p.lo,
                    Endpoint::Upper => p.hi,
                },
                Compiled::Block { .. } => unreachable!(),
            })
            .collect();
        let root_slot: BTreeMap<usize, usize> =
            roots.iter().enumerate().map(|(slot, &i)| (i, slot)).collect();

        fn eval(
            i: usize,
            nodes: &[NodeSpec],
            compiled: &[Compiled],
            evidence: &Evidence,
            root_slot: &BTreeMap<usize, usize>,
            assignment: usize,
        ) -> u8 {
            if let Some(&state) = evidence.get(nodes[i].id()) {
                return state;
            }
            match &compiled[i] {
                Compiled::Root(_) => ((assignment >> root_slot[&i]) & 1) as u8,
                Compiled::Block { gate, children } => {
                    let states: Vec<u8> = children
                        .iter()
                        .map(|&c| eval(c, nodes, compiled, evidence, root_slot, assignment))
                        .collect();
                    gate_output(*gate, &states)
                }
            }
        }

        let mut total = 0.0;
        for assignment in 0..(1usize << roots.len()) {
            let weight: f64 = probs
                .iter()
                .enumerate()
                .map(|(slot, &p)| if (assignment >> slot) & 1 == 1 { p } else { 1.0 - p })
                .product();
            if eval(system, &self.nodes, &compiled, evidence, &root_slot, assignment) == 1 {
                total += weight;
            }
        }
        Ok(total)
    }

    /// Validate structure without inferring.
    pub fn validate(&self) -> Result<(), BnError> {
        self.compile().map(|_| ())
    }
}

/// Ordering for reporting ranked intervals: higher midpoint first, ties
/// broken by smaller width. A presentation choice, not part of the interval
/// arithmetic.
pub fn compare_intervals_desc(a: &ProbInterval, b: &ProbInterval) -> std::cmp::Ordering {
    b.midpoint()
        .partial_cmp(&a.midpoint())
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| {
            a.width().partial_cmp(&b.width()).unwrap_or(std::cmp::Ordering::Equal)
        })
}
