//! Policy construction from invariants: maximal policy synthesis,
//! compliance verification, and the stateful upgrade.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::invariant::{InvariantCategory, InvariantInstance};
use crate::policy::{Edge, EntityId, PolicyGraph, StatefulPolicy, Violation};

/// The entity universe plus an ordered invariant list. Violation reports
/// cite invariants by their 1-based position in this list.
#[derive(Debug, Clone)]
pub struct Scenario {
    entities: BTreeSet<EntityId>,
    invariants: Vec<InvariantInstance>,
}

impl Scenario {
    /// Builds a scenario, rejecting invariants that mention entities
    /// outside the universe.
    pub fn new(entities: BTreeSet<EntityId>, invariants: Vec<InvariantInstance>) -> Result<Self> {
        for inv in &invariants {
            for referenced in inv.referenced_entities() {
                if !entities.contains(&referenced) {
                    return Err(Error::UnknownEntity(referenced.to_string()));
                }
            }
        }
        Ok(Scenario {
            entities,
            invariants,
        })
    }

    pub fn entities(&self) -> &BTreeSet<EntityId> {
        &self.entities
    }

    pub fn invariants(&self) -> &[InvariantInstance] {
        &self.invariants
    }
}

/// The unique maximal compliant policy: all self-loops plus every ordered
/// pair of distinct entities that every invariant permits.
pub fn synthesize_policy(sc: &Scenario) -> PolicyGraph {
    let mut edges: BTreeSet<Edge> = sc
        .entities
        .iter()
        .map(|e| (e.clone(), e.clone()))
        .collect();
    for s in &sc.entities {
        for d in &sc.entities {
            if s != d && sc.invariants.iter().all(|inv| inv.allows(s, d)) {
                edges.insert((s.clone(), d.clone()));
            }
        }
    }
    PolicyGraph::from_edges(sc.entities.iter().cloned(), edges)
        .expect("synthesized edges use scenario entities only")
}

/// All invariant violations of `g`, tagged with 1-based invariant indices.
/// The graph must range over exactly the scenario's entities.
pub fn verify_policy(g: &PolicyGraph, sc: &Scenario) -> Result<BTreeSet<Violation>> {
    let missing: Vec<String> = sc
        .entities
        .difference(g.nodes())
        .map(|e| e.to_string())
        .collect();
    let extra: Vec<String> = g
        .nodes()
        .difference(&sc.entities)
        .map(|e| e.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::NodeMismatch { missing, extra });
    }
    let mut violations = BTreeSet::new();
    for (idx, inv) in sc.invariants.iter().enumerate() {
        for edge in inv.offenders(g) {
            violations.insert(Violation {
                invariant_index: idx + 1,
                edge,
            });
        }
    }
    Ok(violations)
}

/// Upgrades a compliant policy to a stateful one. An edge gets the answer
/// annotation when its reverse is not itself a policy edge and every
/// information-flow invariant would permit the reverse direction; access
/// control invariants only govern who may initiate, so they are not
/// consulted for reply traffic.
pub fn make_stateful(g: &PolicyGraph, sc: &Scenario) -> Result<StatefulPolicy> {
    let violations = verify_policy(g, sc)?;
    if !violations.is_empty() {
        return Err(Error::PolicyViolations(violations));
    }
    let ifs: Vec<&InvariantInstance> = sc
        .invariants
        .iter()
        .filter(|inv| inv.category() == InvariantCategory::InformationFlow)
        .collect();
    let answer_edges: BTreeSet<Edge> = g
        .edges()
        .iter()
        .filter(|(s, d)| {
            s != d
                && !g.has_edge(d, s)
                && ifs.iter().all(|inv| inv.allows(d, s))
        })
        .cloned()
        .collect();
    StatefulPolicy::new(g.clone(), answer_edges)
}
