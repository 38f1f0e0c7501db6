//! Action-centric task graphs: one node per observed action plus an
//! end-of-sequence node, one edge per observed immediate succession.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ActionId, ActionVocabulary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("task {task}: {name} is not a node of the graph")]
    UnknownNode { task: String, name: String },
    #[error("task {task}: action {id} is not in the vocabulary")]
    BadAction { task: String, id: ActionId },
    #[error("task {0}: no non-empty sequences to build from")]
    Empty(String),
    #[error("task {task}: node {name} has no outgoing edges")]
    DeadEnd { task: String, name: String },
    #[error("graph file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adtg {
    task_id: String,
    eos: ActionId,
    labels: BTreeMap<ActionId, String>,
    edges: BTreeMap<(ActionId, ActionId), u64>,
}

/// A built graph together with the number of empty sequences that were
/// skipped while building it.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub graph: Adtg,
    pub skipped_empty: usize,
}

pub fn build_graph(
    vocab: &ActionVocabulary,
    sequences: &[Vec<ActionId>],
) -> Result<BuildOutcome, GraphError> {
    let mut g = Adtg {
        task_id: vocab.task_id().to_string(),
        eos: vocab.eos(),
        labels: BTreeMap::new(),
        edges: BTreeMap::new(),
    };
    g.labels.insert(g.eos, vocab.name(g.eos).to_string());
    let mut skipped = 0;
    for seq in sequences {
        let Some(&last) = seq.last() else {
            skipped += 1;
            continue;
        };
        for &a in seq {
            if !vocab.is_action(a) {
                return Err(GraphError::BadAction {
                    task: g.task_id.clone(),
                    id: a,
                });
            }
            g.labels.entry(a).or_insert_with(|| vocab.name(a).to_string());
        }
        for w in seq.windows(2) {
            *g.edges.entry((w[0], w[1])).or_insert(0) += 1;
        }
        *g.edges.entry((last, g.eos)).or_insert(0) += 1;
    }
    if skipped > 0 {
        log::warn!("task {}: skipped {skipped} empty sequence(s)", g.task_id);
    }
    if g.labels.len() == 1 {
        return Err(GraphError::Empty(g.task_id));
    }
    Ok(BuildOutcome {
        graph: g,
        skipped_empty: skipped,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    task_id: String,
    nodes: Vec<String>,
    edges: Vec<(String, String, u64)>,
}

impl Adtg {
    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn eos(&self) -> ActionId {
        self.eos
    }

    /// Nodes in index order; EOS comes last.
    pub fn nodes(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.labels.keys().copied()
    }

    /// Action nodes, excluding EOS.
    pub fn action_nodes(&self) -> Vec<ActionId> {
        self.nodes().filter(|a| *a != self.eos).collect()
    }

    pub fn contains(&self, a: ActionId) -> bool {
        self.labels.contains_key(&a)
    }

    pub fn label(&self, a: ActionId) -> Option<&str> {
        self.labels.get(&a).map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = (ActionId, ActionId, u64)> + '_ {
        self.edges.iter().map(|(&(a, b), &c)| (a, b, c))
    }

    pub fn edge_set(&self) -> BTreeSet<(ActionId, ActionId)> {
        self.edges.keys().copied().collect()
    }

    pub fn has_edge(&self, a: ActionId, b: ActionId) -> bool {
        self.edges.contains_key(&(a, b))
    }

    pub fn edge_count(&self, a: ActionId, b: ActionId) -> u64 {
        self.edges.get(&(a, b)).copied().unwrap_or(0)
    }

    fn require(&self, a: ActionId) -> Result<(), GraphError> {
        if self.contains(a) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode {
                task: self.task_id.clone(),
                name: a.to_string(),
            })
        }
    }

    /// Outgoing-edge targets in index order (EOS last when present).
    pub fn successors(&self, a: ActionId) -> Result<Vec<ActionId>, GraphError> {
        self.require(a)?;
        Ok(self
            .edges
            .range((a, ActionId(0))..=(a, ActionId(u32::MAX)))
            .map(|(&(_, b), _)| b)
            .collect())
    }

    pub fn is_interchangeable(&self, a: ActionId, b: ActionId) -> Result<bool, GraphError> {
        self.require(a)?;
        self.require(b)?;
        Ok(self.has_edge(a, b) && self.has_edge(b, a))
    }

    /// True when `seq` walks existing edges and its last action links to EOS.
    pub fn is_replayable(&self, seq: &[ActionId]) -> bool {
        match seq.last() {
            None => true,
            Some(&last) => {
                seq.iter().all(|a| self.contains(*a))
                    && seq.windows(2).all(|w| self.has_edge(w[0], w[1]))
                    && self.has_edge(last, self.eos)
            }
        }
    }

    /// Transitions of `seq` (including the final one to EOS) that are not
    /// edges of the graph.
    pub fn unseen_transitions(&self, seq: &[ActionId]) -> Vec<(ActionId, ActionId)> {
        let Some(&last) = seq.last() else {
            return Vec::new();
        };
        seq.windows(2)
            .map(|w| (w[0], w[1]))
            .chain(std::iter::once((last, self.eos)))
            .filter(|(a, b)| !self.has_edge(*a, *b))
            .collect()
    }

    /// Every action node must be able to reach EOS.
    pub fn check_reaches_eos(&self) -> Result<(), GraphError> {
        let mut reach: BTreeSet<ActionId> = BTreeSet::from([self.eos]);
        loop {
            let before = reach.len();
            for &(a, b) in self.edges.keys() {
                if reach.contains(&b) {
                    reach.insert(a);
                }
            }
            if reach.len() == before {
                break;
            }
        }
        match self.nodes().find(|a| !reach.contains(a)) {
            None => Ok(()),
            Some(a) => Err(GraphError::DeadEnd {
                task: self.task_id.clone(),
                name: self.labels[&a].clone(),
            }),
        }
    }

    /// Graphviz text; byte-stable for a fixed graph.
    pub fn to_dot(&self) -> String {
        fn esc(s: &str) -> String {
            s.replace('\\', "\\\\").replace('"', "\\\"")
        }
        let mut out = String::new();
        writeln!(out, "digraph \"{}\" {{", esc(&self.task_id)).unwrap();
        out.push_str("  rankdir=LR;\n");
        for (id, name) in &self.labels {
            let shape = if *id == self.eos { "doublecircle" } else { "box" };
            writeln!(out, "  n{} [label=\"{}\", shape={shape}];", id.0, esc(name)).unwrap();
        }
        for (&(a, b), c) in &self.edges {
            writeln!(out, "  n{} -> n{} [label=\"{c}\"];", a.0, b.0).unwrap();
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            task_id: self.task_id.clone(),
            nodes: self.labels.values().cloned().collect(),
            edges: self
                .edges
                .iter()
                .map(|(&(a, b), &c)| (self.labels[&a].clone(), self.labels[&b].clone(), c))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str, vocab: &ActionVocabulary) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| {
            GraphError::Format(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        if file.task_id != vocab.task_id() {
            return Err(GraphError::Format(format!(
                "graph is for task {} but the vocabulary is for {}",
                file.task_id,
                vocab.task_id()
            )));
        }
        let look = |n: &str| {
            vocab
                .id(n)
                .filter(|id| !id.is_null())
                .ok_or_else(|| GraphError::UnknownNode {
                    task: file.task_id.clone(),
                    name: n.to_string(),
                })
        };
        let mut g = Adtg {
            task_id: file.task_id.clone(),
            eos: vocab.eos(),
            labels: BTreeMap::new(),
            edges: BTreeMap::new(),
        };
        g.labels.insert(g.eos, vocab.name(g.eos).to_string());
        for n in &file.nodes {
            let id = look(n)?;
            g.labels.insert(id, n.clone());
        }
        for (a, b, c) in &file.edges {
            let (ia, ib) = (look(a)?, look(b)?);
            if !g.contains(ia) || !g.contains(ib) {
                return Err(GraphError::Format(format!("edge {a} -> {b} uses an undeclared node")));
            }
            if ia == g.eos {
                return Err(GraphError::Format("EOS cannot have outgoing edges".into()));
            }
            if *c == 0 || g.edges.insert((ia, ib), *c).is_some() {
                return Err(GraphError::Format(format!("edge {a} -> {b} is duplicated or has count 0")));
            }
        }
        Ok(g)
    }
}
