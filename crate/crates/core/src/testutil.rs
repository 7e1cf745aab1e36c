//! Shared fixtures for unit tests: the five-entity demo scenario used
//! throughout the crate.

use std::collections::{BTreeMap, BTreeSet};

use crate::invariant::{BlpAttr, InvariantInstance, SinkAttr, SubnetsAttr};
use crate::policy::{Edge, EntityId, PolicyGraph};
use crate::synthesis::Scenario;

pub fn entity(name: &str) -> EntityId {
    EntityId::new(name).unwrap()
}

pub fn fig_nodes() -> Vec<EntityId> {
    ["INET", "WebFrnt", "WebApp", "DB", "Log"]
        .into_iter()
        .map(entity)
        .collect()
}

/// The four demo invariants: a subnet grouping with a DMZ, an information
/// sink, a two-level no-read-up labeling, and a destination ACL.
pub fn demo_invariants() -> [InvariantInstance; 4] {
    let subnets = InvariantInstance::Subnets(BTreeMap::from([
        (entity("DB"), SubnetsAttr::Member("internal".into())),
        (entity("Log"), SubnetsAttr::Member("internal".into())),
        (entity("WebApp"), SubnetsAttr::Member("internal".into())),
        (entity("WebFrnt"), SubnetsAttr::Dmz),
    ]));
    let sink = InvariantInstance::Sink(BTreeMap::from([(entity("Log"), SinkAttr::Sink)]));
    let blp = InvariantInstance::Blp(BTreeMap::from([
        (entity("DB"), BlpAttr::confidential()),
        (entity("Log"), BlpAttr::confidential()),
        (entity("WebApp"), BlpAttr::declassify()),
    ]));
    let acl = InvariantInstance::Acl(BTreeMap::from([(
        entity("DB"),
        BTreeSet::from([entity("WebApp")]),
    )]));
    [subnets, sink, blp, acl]
}

pub fn demo_scenario() -> Scenario {
    Scenario::new(fig_nodes().into_iter().collect(), demo_invariants().to_vec()).unwrap()
}

/// The 15 edges of the maximal policy for the demo scenario.
pub fn demo_policy_edges() -> Vec<Edge> {
    [
        ("INET", "INET"),
        ("INET", "WebFrnt"),
        ("WebFrnt", "INET"),
        ("WebFrnt", "WebFrnt"),
        ("WebFrnt", "WebApp"),
        ("WebFrnt", "Log"),
        ("WebApp", "INET"),
        ("WebApp", "WebFrnt"),
        ("WebApp", "WebApp"),
        ("WebApp", "DB"),
        ("WebApp", "Log"),
        ("DB", "WebApp"),
        ("DB", "DB"),
        ("DB", "Log"),
        ("Log", "Log"),
    ]
    .into_iter()
    .map(|(s, d)| (entity(s), entity(d)))
    .collect()
}

pub fn demo_policy() -> PolicyGraph {
    PolicyGraph::from_edges(fig_nodes(), demo_policy_edges()).unwrap()
}

/// The manually refined variant: the maximal policy minus WebFrnt -> INET.
pub fn refined_policy() -> PolicyGraph {
    let (g, removed) = demo_policy().remove_edge(&(entity("WebFrnt"), entity("INET")));
    assert!(removed);
    g
}
