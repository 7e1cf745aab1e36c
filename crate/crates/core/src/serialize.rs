//! Serialization backends: rendering policies as iptables rulesets, DFWFW
//! configuration documents, and DOT graphs.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ipset::IpIntervalSet;
use crate::iptables::{render_rule_tokens, ConnState, MatchAtom, Rule, Target};
use crate::policy::{EntityId, PolicyGraph, StatefulPolicy, Violation};

/// How one entity maps to hosts on the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostBinding {
    /// Fixed addresses behind a named interface.
    Concrete { ips: IpIntervalSet, iface: String },
    /// Placeholder tokens emitted verbatim, to be substituted by the
    /// operator before loading the ruleset.
    Variable { ip_var: String, iface_var: String },
}

/// Address bindings for the entities of a policy.
///
/// At most one entity may be designated external: it stands for every host
/// outside the internal universe. An external entity either carries a
/// [`HostBinding::Variable`] entry or no entry at all, in which case it is
/// rendered as the negation of the internal bridge and universe.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityBinding {
    pub entries: BTreeMap<EntityId, HostBinding>,
    pub external: Option<EntityId>,
}

enum Side {
    Atoms(Vec<MatchAtom>),
    Verbatim(Vec<String>),
}

struct RuleContext {
    bridge: Option<String>,
    outside: Option<IpIntervalSet>,
}

fn validate_binding(
    sp: &StatefulPolicy,
    b: &EntityBinding,
    internal_universe: &IpIntervalSet,
) -> Result<RuleContext> {
    if let Some(external) = &b.external {
        if !sp.base().nodes().contains(external) {
            return Err(Error::InvalidBinding(format!(
                "external entity {external} is not a policy node"
            )));
        }
        if matches!(b.entries.get(external), Some(HostBinding::Concrete { .. })) {
            return Err(Error::InvalidBinding(format!(
                "external entity {external} must not carry fixed addresses; \
                 it stands for everything outside the internal universe"
            )));
        }
    }

    let mut bridge: Option<&str> = None;
    let mut concrete: Vec<(&EntityId, &IpIntervalSet)> = Vec::new();
    for (entity, binding) in &b.entries {
        let HostBinding::Concrete { ips, iface } = binding else {
            continue;
        };
        if ips.is_empty() {
            return Err(Error::InvalidBinding(format!(
                "entity {entity} is bound to an empty address set"
            )));
        }
        if !ips.is_subset(internal_universe) {
            return Err(Error::InvalidBinding(format!(
                "the addresses of entity {entity} lie outside the internal universe"
            )));
        }
        for (other, other_ips) in &concrete {
            if !ips.is_disjoint(other_ips) {
                return Err(Error::InvalidBinding(format!(
                    "entities {other} and {entity} have overlapping addresses"
                )));
            }
        }
        match bridge {
            None => bridge = Some(iface),
            Some(known) if known == iface => {}
            Some(known) => {
                return Err(Error::InvalidBinding(format!(
                    "entity {entity} is bound to interface {iface} but the \
                     internal bridge is {known}"
                )))
            }
        }
        concrete.push((entity, ips));
    }

    for node in sp.base().nodes() {
        if !b.entries.contains_key(node) && b.external.as_ref() != Some(node) {
            return Err(Error::UnboundEntity(node.to_string()));
        }
    }

    let needs_outside = b
        .external
        .as_ref()
        .is_some_and(|e| !b.entries.contains_key(e));
    if needs_outside && bridge.is_none() {
        return Err(Error::InvalidBinding(
            "cannot place the external entity without a concretely bound \
             internal entity to name the bridge interface"
                .to_string(),
        ));
    }
    Ok(RuleContext {
        bridge: bridge.map(str::to_string),
        outside: needs_outside.then(|| internal_universe.complement()),
    })
}

fn entity_side(b: &EntityBinding, ctx: &RuleContext, entity: &EntityId, src: bool) -> Side {
    let (iface_flag, addr_flag) = if src { ("-i", "-s") } else { ("-o", "-d") };
    match b.entries.get(entity) {
        Some(HostBinding::Concrete { ips, iface }) => Side::Atoms(vec![
            iface_atom(iface.clone(), false, src),
            addr_atom(ips.clone(), src),
        ]),
        Some(HostBinding::Variable { ip_var, iface_var }) => Side::Verbatim(vec![
            iface_flag.to_string(),
            iface_var.clone(),
            addr_flag.to_string(),
            ip_var.clone(),
        ]),
        None => {
            let bridge = ctx.bridge.clone().expect("validated");
            let outside = ctx.outside.clone().expect("validated");
            Side::Atoms(vec![iface_atom(bridge, true, src), addr_atom(outside, src)])
        }
    }
}

fn iface_atom(name: String, negated: bool, src: bool) -> MatchAtom {
    if src {
        MatchAtom::IIface { name, negated }
    } else {
        MatchAtom::OIface { name, negated }
    }
}

fn addr_atom(set: IpIntervalSet, src: bool) -> MatchAtom {
    if src {
        MatchAtom::Src(set)
    } else {
        MatchAtom::Dst(set)
    }
}

fn rule_line(command: &str, prefix: Vec<MatchAtom>, src: Side, dst: Side) -> String {
    let render_atoms = |matches: Vec<MatchAtom>, target: Target| {
        render_rule_tokens(&Rule { matches, target })
    };
    let tokens = match (src, dst) {
        (Side::Atoms(a), Side::Atoms(b)) => {
            let mut matches = prefix;
            matches.extend(a);
            matches.extend(b);
            render_atoms(matches, Target::Accept)
        }
        (src, dst) => {
            let mut tokens = Vec::new();
            if !prefix.is_empty() {
                tokens.extend(render_atoms(prefix, Target::NoOp));
            }
            for side in [src, dst] {
                match side {
                    Side::Atoms(atoms) => tokens.extend(render_atoms(atoms, Target::NoOp)),
                    Side::Verbatim(parts) => tokens.extend(parts),
                }
            }
            tokens.push("-j".to_string());
            tokens.push("ACCEPT".to_string());
            tokens
        }
    };
    format!("{command} {}", tokens.join(" "))
}

/// Renders a stateful policy as a standalone whitelist ruleset: a FORWARD
/// chain with policy DROP, one ACCEPT per base edge, and one inserted
/// ESTABLISHED rule per answer edge matching the reversed endpoints.
///
/// Concretely bound entities render as interface plus address matches; the
/// external entity renders as the negation of the bridge interface and the
/// internal universe; variable bindings render their placeholder tokens
/// verbatim. When one address side of a rule is a multi-address list and
/// the other a negated range, the negation is expressed through the iprange
/// match, since a plain negated address cannot be combined with an address
/// list in one rule.
pub fn to_iptables(
    sp: &StatefulPolicy,
    b: &EntityBinding,
    internal_universe: &IpIntervalSet,
) -> Result<String> {
    let ctx = validate_binding(sp, b, internal_universe)?;
    let mut out = String::from(
        "*filter\n:INPUT ACCEPT [0:0]\n:FORWARD DROP [0:0]\n:OUTPUT ACCEPT [0:0]\n",
    );
    for (src, dst) in sp.base().edges() {
        out.push_str(&rule_line(
            "-A FORWARD",
            Vec::new(),
            entity_side(b, &ctx, src, true),
            entity_side(b, &ctx, dst, false),
        ));
        out.push('\n');
    }
    for (src, dst) in sp.answer_edges() {
        let established = MatchAtom::CtState(BTreeSet::from([ConnState::Established]));
        out.push_str(&rule_line(
            "-I FORWARD",
            vec![established],
            entity_side(b, &ctx, dst, true),
            entity_side(b, &ctx, src, false),
        ));
        out.push('\n');
    }
    out.push_str("COMMIT\n");
    Ok(out)
}

/// Container patterns for rendering a policy as a DFWFW configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DfwfwBinding {
    pub network: String,
    pub patterns: BTreeMap<EntityId, String>,
    pub external: Option<EntityId>,
}

#[derive(Serialize)]
struct DfwfwDocument<'a> {
    container_to_container: DfwfwRules<'a>,
}

#[derive(Serialize)]
struct DfwfwRules<'a> {
    rules: Vec<DfwfwRule<'a>>,
}

#[derive(Serialize)]
struct DfwfwRule<'a> {
    network: &'a str,
    src_container: &'a str,
    dst_container: &'a str,
    filter: &'a str,
    action: &'a str,
}

/// Renders a policy as a DFWFW container-to-container configuration: one
/// ACCEPT rule per edge between entities with container patterns.
///
/// Edges involving the external entity have no container counterpart and
/// are omitted; each omission is reported as a warning, since the
/// configuration alone does not constrain that traffic.
pub fn to_dfwfw(g: &PolicyGraph, b: &DfwfwBinding) -> Result<(String, Vec<String>)> {
    let mut rules = Vec::new();
    let mut warnings = Vec::new();
    for (src, dst) in g.edges() {
        if let Some(external) = &b.external {
            if src == external || dst == external {
                warnings.push(format!(
                    "edge {src} -> {dst} involves the external entity \
                     {external} and is omitted: DFWFW only manages \
                     container-to-container traffic"
                ));
                continue;
            }
        }
        let pattern = |entity: &EntityId| {
            b.patterns
                .get(entity)
                .map(String::as_str)
                .ok_or_else(|| Error::MissingPattern(entity.to_string()))
        };
        rules.push(DfwfwRule {
            network: &b.network,
            src_container: pattern(src)?,
            dst_container: pattern(dst)?,
            filter: "",
            action: "ACCEPT",
        });
    }
    let document = DfwfwDocument {
        container_to_container: DfwfwRules { rules },
    };
    let mut text =
        serde_json::to_string_pretty(&document).expect("document serialization cannot fail");
    text.push('\n');
    Ok((text, warnings))
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Renders a policy graph as a DOT digraph. Edges listed in `highlight`
/// are drawn dotted and red.
pub fn policy_dot(g: &PolicyGraph, highlight: &BTreeSet<Violation>) -> String {
    let flagged: BTreeSet<_> = highlight.iter().map(|v| &v.edge).collect();
    let mut out = String::from("digraph policy {\n");
    for node in g.nodes() {
        out.push_str(&format!("    \"{}\";\n", dot_escape(node.as_str())));
    }
    for edge in g.edges() {
        let attrs = if flagged.contains(edge) {
            " [style=dotted, color=red]"
        } else {
            ""
        };
        out.push_str(&format!(
            "    \"{}\" -> \"{}\"{};\n",
            dot_escape(edge.0.as_str()),
            dot_escape(edge.1.as_str()),
            attrs
        ));
    }
    out.push_str("}\n");
    out
}

/// Renders a stateful policy as a DOT digraph: base edges solid, answer
/// edges dashed in the direction of the reply flow.
pub fn stateful_dot(sp: &StatefulPolicy) -> String {
    let mut out = String::from("digraph policy {\n");
    for node in sp.base().nodes() {
        out.push_str(&format!("    \"{}\";\n", dot_escape(node.as_str())));
    }
    for (src, dst) in sp.base().edges() {
        out.push_str(&format!(
            "    \"{}\" -> \"{}\";\n",
            dot_escape(src.as_str()),
            dot_escape(dst.as_str())
        ));
    }
    for (src, dst) in sp.answer_edges() {
        out.push_str(&format!(
            "    \"{}\" -> \"{}\" [style=dashed];\n",
            dot_escape(dst.as_str()),
            dot_escape(src.as_str())
        ));
    }
    out.push_str("}\n");
    out
}

/// Renders an access matrix as a DOT digraph: one node per class labeled
/// with its address set, solid edges for allowed flows, dashed edges for
/// the reply-only flows in `answers`.
pub fn matrix_dot(
    m: &crate::analysis::ServiceMatrix,
    answers: &BTreeSet<(usize, usize)>,
) -> String {
    let mut out = String::from("digraph matrix {\n");
    for (idx, class) in m.classes.iter().enumerate() {
        out.push_str(&format!(
            "    c{idx} [label=\"{}\"];\n",
            dot_escape(&class.to_string())
        ));
    }
    for &(i, j) in &m.edges {
        out.push_str(&format!("    c{i} -> c{j};\n"));
    }
    for &(i, j) in answers {
        out.push_str(&format!("    c{i} -> c{j} [style=dashed];\n"));
    }
    out.push_str("}\n");
    out
}
