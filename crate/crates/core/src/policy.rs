//! Service-level access policies: directed graphs over named entities.
//!
//! Self-loops are first-class edges (an entity always reaches itself) and are
//! exempt from invariant checking throughout the crate.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A named policy entity (a host, container group or network).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(String);

impl EntityId {
    /// Entity names are non-empty tokens without whitespace.
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidEntityName(name));
        }
        Ok(EntityId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for EntityId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EntityId::new(s)
    }
}

pub type Edge = (EntityId, EntityId);

/// A directed graph of allowed flows between entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyGraph {
    nodes: BTreeSet<EntityId>,
    edges: BTreeSet<Edge>,
}

impl PolicyGraph {
    /// Builds a graph, rejecting edges whose endpoints are not in `nodes`.
    /// Duplicate edges collapse.
    pub fn from_edges(
        nodes: impl IntoIterator<Item = EntityId>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self> {
        let nodes: BTreeSet<EntityId> = nodes.into_iter().collect();
        let mut edge_set = BTreeSet::new();
        for (src, dst) in edges {
            for end in [&src, &dst] {
                if !nodes.contains(end) {
                    return Err(Error::UnknownEntity(end.to_string()));
                }
            }
            edge_set.insert((src, dst));
        }
        Ok(PolicyGraph {
            nodes,
            edges: edge_set,
        })
    }

    /// The complete graph over `nodes`, self-loops included.
    pub fn complete(nodes: BTreeSet<EntityId>) -> Self {
        let edges = nodes
            .iter()
            .flat_map(|s| nodes.iter().map(move |d| (s.clone(), d.clone())))
            .collect();
        PolicyGraph { nodes, edges }
    }

    pub fn nodes(&self) -> &BTreeSet<EntityId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, src: &EntityId, dst: &EntityId) -> bool {
        self.edges.contains(&(src.clone(), dst.clone()))
    }

    /// Returns the graph without `edge` and whether the edge was present; a
    /// missing edge leaves the graph unchanged (the flag lets callers warn).
    pub fn remove_edge(&self, edge: &Edge) -> (Self, bool) {
        let mut out = self.clone();
        let removed = out.edges.remove(edge);
        (out, removed)
    }

    /// Returns the graph with `edge` added; endpoints must be known nodes.
    pub fn with_edge(&self, edge: Edge) -> Result<Self> {
        for end in [&edge.0, &edge.1] {
            if !self.nodes.contains(end) {
                return Err(Error::UnknownEntity(end.to_string()));
            }
        }
        let mut out = self.clone();
        out.edges.insert(edge);
        Ok(out)
    }
}

/// A policy plus the subset of its edges that may be answered statefully:
/// for each answer edge the firewall may admit reply packets of established
/// connections in the reverse direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatefulPolicy {
    base: PolicyGraph,
    answer_edges: BTreeSet<Edge>,
}

impl StatefulPolicy {
    /// Every answer edge must be a base edge whose reverse is absent (a
    /// bidirectional pair needs no stateful upgrade).
    pub fn new(base: PolicyGraph, answer_edges: BTreeSet<Edge>) -> Result<Self> {
        for (src, dst) in &answer_edges {
            if !base.has_edge(src, dst) {
                return Err(Error::AnswerEdgeNotInBase(src.to_string(), dst.to_string()));
            }
            if base.has_edge(dst, src) {
                return Err(Error::AnswerEdgeReversePresent(
                    src.to_string(),
                    dst.to_string(),
                ));
            }
        }
        Ok(StatefulPolicy { base, answer_edges })
    }

    pub fn base(&self) -> &PolicyGraph {
        &self.base
    }

    pub fn answer_edges(&self) -> &BTreeSet<Edge> {
        &self.answer_edges
    }
}

/// A policy edge rejected by one scenario invariant. Indices are 1-based in
/// scenario order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub invariant_index: usize,
    pub edge: Edge,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "invariant {}: {} -> {}",
            self.invariant_index, self.edge.0, self.edge.1
        )
    }
}
