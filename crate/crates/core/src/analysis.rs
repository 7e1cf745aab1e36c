//! Ruleset analysis: turning a parsed filter table back into service-level
//! access matrices.
//!
//! The pipeline has four stages. [`unfold`] inlines user-defined chains into
//! one linear rule list. [`rewrite_ifaces`] replaces interface matches with
//! the address ranges assigned to them. [`specialize`] fixes a service and
//! connection state, discharging protocol, port, and state matches.
//! [`closure`] removes the remaining uninterpretable matches, rounding the
//! ruleset up or down to a list of [`SimpleRule`]s that mention only source
//! and destination addresses. [`service_matrix`] then partitions the address
//! space into classes with identical connectivity.
//!
//! [`eval_packet`] is an independent interpreter for the original chain
//! structure; the transformation stages are tested against it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ipset::{atomize, Ip32, IpIntervalSet, PortSet};
use crate::iptables::{
    Chain, ChainPolicy, ConnState, MatchAtom, Protocol, Rule, Ruleset, Target,
};
use crate::policy::{EntityId, StatefulPolicy};

/// Connection state of a packet under the two-state abstraction: a packet
/// either opens a new connection or belongs to an established one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PacketState {
    New,
    Established,
}

impl PacketState {
    fn conn_state(self) -> ConnState {
        match self {
            PacketState::New => ConnState::New,
            PacketState::Established => ConnState::Established,
        }
    }
}

/// The packet fields the analysis reasons about. Interfaces are not part of
/// the packet; resolve them up front with
/// [`Ruleset::with_ifaces_resolved`] or rewrite them via [`rewrite_ifaces`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Packet {
    pub src: Ip32,
    pub dst: Ip32,
    pub protocol: Protocol,
    pub sport: u16,
    pub dport: u16,
    pub state: PacketState,
}

/// Final fate of a packet. REJECT is folded into Drop: for reachability the
/// two are indistinguishable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Accept,
    Drop,
}

/// How [`eval_packet`] resolves match modules the model does not interpret.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownVerdict {
    Match,
    NoMatch,
}

/// Rounding direction for [`closure`]. `Allow` keeps every rule that might
/// accept (over-approximating the accepted traffic); `Deny` keeps every rule
/// that might drop (under-approximating it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosureMode {
    Allow,
    Deny,
}

/// A service is a destination port on a transport protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Service {
    pub protocol: Protocol,
    pub port: u16,
}

impl FromStr for Service {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssh" => {
                return Ok(Service {
                    protocol: Protocol::Tcp,
                    port: 22,
                })
            }
            "http" => {
                return Ok(Service {
                    protocol: Protocol::Tcp,
                    port: 80,
                })
            }
            _ => {}
        }
        let Some((proto, port)) = s.split_once(':') else {
            return Err(Error::PortSpec(
                s.to_string(),
                "expected PROTOCOL:PORT (e.g. tcp:80) or an alias (ssh, http)".to_string(),
            ));
        };
        let protocol = match proto {
            "tcp" => Protocol::Tcp,
            "udp" => Protocol::Udp,
            _ => {
                return Err(Error::PortSpec(
                    s.to_string(),
                    "protocol must be tcp or udp".to_string(),
                ))
            }
        };
        let port = port.parse().map_err(|_| {
            Error::PortSpec(
                s.to_string(),
                "port must be an integer between 0 and 65535".to_string(),
            )
        })?;
        Ok(Service { protocol, port })
    }
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.protocol.keyword(), self.port)
    }
}

/// Map from interface names to the address ranges routed over them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ipassmt {
    entries: BTreeMap<String, IpIntervalSet>,
}

impl Ipassmt {
    pub fn new() -> Self {
        Ipassmt::default()
    }

    pub fn assign(&mut self, iface: impl Into<String>, addrs: IpIntervalSet) {
        self.entries.insert(iface.into(), addrs);
    }

    pub fn get(&self, iface: &str) -> Option<&IpIntervalSet> {
        self.entries.get(iface)
    }
}

/// Parses an interface assignment file: one `IFACE = ADDRESS-EXPRESSION`
/// per line, `#` starts a comment. Returns the assignment together with a
/// warning for every pair of interfaces whose ranges overlap, since the
/// interface-to-source rewrite is only exact when ranges are disjoint.
pub fn parse_ipassmt(text: &str) -> Result<(Ipassmt, Vec<String>)> {
    let mut assmt = Ipassmt::new();
    let mut order = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((iface, expr)) = content.split_once('=') else {
            return Err(Error::IpassmtSyntax {
                line,
                msg: "expected IFACE = ADDRESS-EXPRESSION".to_string(),
            });
        };
        let iface = iface.trim();
        let expr = expr.trim();
        if iface.is_empty() || iface.contains(char::is_whitespace) {
            return Err(Error::IpassmtSyntax {
                line,
                msg: "interface name must be a single token".to_string(),
            });
        }
        if assmt.entries.contains_key(iface) {
            return Err(Error::IpassmtSyntax {
                line,
                msg: format!("interface {iface} is assigned twice"),
            });
        }
        let addrs = crate::ipset::parse_ip_expr(expr).map_err(|e| Error::IpassmtSyntax {
            line,
            msg: e.to_string(),
        })?;
        order.push(iface.to_string());
        assmt.entries.insert(iface.to_string(), addrs);
    }
    let mut warnings = Vec::new();
    for (i, a) in order.iter().enumerate() {
        for b in &order[i + 1..] {
            if !assmt.entries[a].is_disjoint(&assmt.entries[b]) {
                warnings.push(format!(
                    "interfaces {a} and {b} have overlapping address ranges"
                ));
            }
        }
    }
    Ok((assmt, warnings))
}

/// Inlines every jump reachable from `start` into one linear rule list and
/// appends the chain policy as an unconditional final rule.
///
/// A matched jump is unfolded by prepending the jump rule's matches to every
/// rule of the target chain; a packet that fails the extra matches falls
/// through to the rules after the jump, exactly as the call would have
/// returned. RETURN is only supported as an unconditional final rule of a
/// user-defined chain, where it equals falling off the end.
pub fn unfold(rs: &Ruleset, start: &str) -> Result<Vec<Rule>> {
    let chain = rs
        .chain(start)
        .ok_or_else(|| Error::UnknownChain(start.to_string()))?;
    let policy = chain
        .policy
        .ok_or_else(|| Error::NoChainPolicy(start.to_string()))?;
    let mut out = Vec::new();
    let mut visiting = vec![start.to_string()];
    inline_chain(rs, chain, &[], &mut out, &mut visiting)?;
    out.push(Rule {
        matches: Vec::new(),
        target: policy_target(policy),
    });
    Ok(out)
}

fn policy_target(policy: ChainPolicy) -> Target {
    match policy {
        ChainPolicy::Accept => Target::Accept,
        ChainPolicy::Drop => Target::Drop,
    }
}

fn inline_chain(
    rs: &Ruleset,
    chain: &Chain,
    prefix: &[MatchAtom],
    out: &mut Vec<Rule>,
    visiting: &mut Vec<String>,
) -> Result<()> {
    for (idx, rule) in chain.rules.iter().enumerate() {
        match &rule.target {
            Target::Return => {
                if idx + 1 != chain.rules.len() || !rule.matches.is_empty() {
                    return Err(Error::ReturnPlacement(chain.name.clone()));
                }
            }
            Target::Jump(name) => {
                if visiting.iter().any(|v| v == name) {
                    return Err(Error::JumpCycle(name.clone()));
                }
                let callee = rs
                    .chain(name)
                    .ok_or_else(|| Error::UnresolvedJump(name.clone()))?;
                let mut inner = prefix.to_vec();
                inner.extend(rule.matches.iter().cloned());
                visiting.push(name.clone());
                inline_chain(rs, callee, &inner, out, visiting)?;
                visiting.pop();
            }
            _ => {
                let mut matches = prefix.to_vec();
                matches.extend(rule.matches.iter().cloned());
                out.push(Rule {
                    matches,
                    target: rule.target.clone(),
                });
            }
        }
    }
    Ok(())
}

fn atom_matches(atom: &MatchAtom, p: &Packet, unknown: UnknownVerdict) -> bool {
    match atom {
        MatchAtom::Src(s) => s.contains(p.src),
        MatchAtom::Dst(s) => s.contains(p.dst),
        MatchAtom::Protocol(pr) => pr.matches(p.protocol),
        MatchAtom::SrcPorts(s) => s.contains(p.sport),
        MatchAtom::DstPorts(s) => s.contains(p.dport),
        MatchAtom::BothPorts(s) => s.contains(p.sport) || s.contains(p.dport),
        MatchAtom::CtState(s) => s.contains(&p.state.conn_state()),
        MatchAtom::IIface { .. } | MatchAtom::OIface { .. } | MatchAtom::Unknown(_) => {
            unknown == UnknownVerdict::Match
        }
    }
}

/// Runs a packet through the original chain structure, following jumps and
/// returns, and reports its fate. Matches the model cannot interpret
/// (including unresolved interfaces) are decided by `unknown`.
pub fn eval_packet(
    rs: &Ruleset,
    start: &str,
    p: &Packet,
    unknown: UnknownVerdict,
) -> Result<Verdict> {
    let chain = rs
        .chain(start)
        .ok_or_else(|| Error::UnknownChain(start.to_string()))?;
    let policy = chain
        .policy
        .ok_or_else(|| Error::NoChainPolicy(start.to_string()))?;
    let mut visiting = vec![start.to_string()];
    Ok(match eval_chain(rs, chain, p, unknown, &mut visiting)? {
        Some(verdict) => verdict,
        None => match policy {
            ChainPolicy::Accept => Verdict::Accept,
            ChainPolicy::Drop => Verdict::Drop,
        },
    })
}

fn eval_chain(
    rs: &Ruleset,
    chain: &Chain,
    p: &Packet,
    unknown: UnknownVerdict,
    visiting: &mut Vec<String>,
) -> Result<Option<Verdict>> {
    for rule in &chain.rules {
        if !rule.matches.iter().all(|a| atom_matches(a, p, unknown)) {
            continue;
        }
        match &rule.target {
            Target::Accept => return Ok(Some(Verdict::Accept)),
            Target::Drop | Target::Reject => return Ok(Some(Verdict::Drop)),
            Target::Return => return Ok(None),
            Target::NoOp => {}
            Target::Jump(name) => {
                if visiting.iter().any(|v| v == name) {
                    return Err(Error::JumpCycle(name.clone()));
                }
                let callee = rs
                    .chain(name)
                    .ok_or_else(|| Error::UnresolvedJump(name.clone()))?;
                visiting.push(name.clone());
                let sub = eval_chain(rs, callee, p, unknown, visiting)?;
                visiting.pop();
                if let Some(verdict) = sub {
                    return Ok(Some(verdict));
                }
            }
        }
    }
    Ok(None)
}

/// Replaces input-interface matches by the source addresses assigned to the
/// interface. Interfaces without an assignment, and all output-interface
/// matches (which depend on the routing decision, not the packet), become
/// uninterpretable matches for [`closure`] to round away.
pub fn rewrite_ifaces(rules: &[Rule], assmt: &Ipassmt) -> Vec<Rule> {
    rules
        .iter()
        .map(|rule| Rule {
            matches: rule
                .matches
                .iter()
                .map(|atom| match atom {
                    MatchAtom::IIface { name, negated } => match assmt.get(name) {
                        Some(addrs) => MatchAtom::Src(if *negated {
                            addrs.complement()
                        } else {
                            addrs.clone()
                        }),
                        None => MatchAtom::Unknown(iface_text("-i", name, *negated)),
                    },
                    MatchAtom::OIface { name, negated } => {
                        MatchAtom::Unknown(iface_text("-o", name, *negated))
                    }
                    other => other.clone(),
                })
                .collect(),
            target: rule.target.clone(),
        })
        .collect()
}

fn iface_text(flag: &str, name: &str, negated: bool) -> String {
    if negated {
        format!("! {flag} {name}")
    } else {
        format!("{flag} {name}")
    }
}

/// Representative source port used when discharging source-port matches:
/// client connections originate from an unprivileged ephemeral port.
pub const SPORT_REPRESENTATIVE: u16 = 10000;

/// Specializes a rule list to packets of one service in one connection
/// state. Protocol, port, and state matches are either satisfied (and
/// removed) or unsatisfiable (and the whole rule is removed).
pub fn specialize(rules: &[Rule], svc: Service, state: PacketState) -> Vec<Rule> {
    let mut out = Vec::new();
    'rules: for rule in rules {
        let mut matches = Vec::new();
        for atom in &rule.matches {
            match atom {
                MatchAtom::Protocol(pr) => {
                    if !pr.matches(svc.protocol) {
                        continue 'rules;
                    }
                }
                MatchAtom::DstPorts(s) => {
                    if !s.contains(svc.port) {
                        continue 'rules;
                    }
                }
                MatchAtom::SrcPorts(s) => {
                    if !s.contains(SPORT_REPRESENTATIVE) {
                        continue 'rules;
                    }
                }
                MatchAtom::BothPorts(s) => {
                    if !s.contains(svc.port) && !s.contains(SPORT_REPRESENTATIVE) {
                        continue 'rules;
                    }
                }
                MatchAtom::CtState(s) => {
                    if !s.contains(&state.conn_state()) {
                        continue 'rules;
                    }
                }
                other => matches.push(other.clone()),
            }
        }
        out.push(Rule {
            matches,
            target: rule.target.clone(),
        });
    }
    out
}

/// A rule whose match expression is a plain conjunction of field
/// constraints, with no interface or module matches left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimpleRule {
    pub src: IpIntervalSet,
    pub dst: IpIntervalSet,
    pub protocol: Protocol,
    pub sports: PortSet,
    pub dports: PortSet,
    pub states: BTreeSet<ConnState>,
    pub action: Verdict,
}

impl SimpleRule {
    /// A rule matching every packet.
    pub fn any(action: Verdict) -> Self {
        SimpleRule {
            src: IpIntervalSet::full(),
            dst: IpIntervalSet::full(),
            protocol: Protocol::Any,
            sports: PortSet::full(),
            dports: PortSet::full(),
            states: all_states(),
            action,
        }
    }

    fn matches(&self, p: &Packet) -> bool {
        self.src.contains(p.src)
            && self.dst.contains(p.dst)
            && self.protocol.matches(p.protocol)
            && self.sports.contains(p.sport)
            && self.dports.contains(p.dport)
            && self.states.contains(&p.state.conn_state())
    }
}

fn all_states() -> BTreeSet<ConnState> {
    [
        ConnState::New,
        ConnState::Related,
        ConnState::Established,
        ConnState::Invalid,
    ]
    .into_iter()
    .collect()
}

/// Rounds a linear rule list to [`SimpleRule`]s by removing matches the
/// model cannot interpret.
///
/// In `Allow` mode an uninterpretable match on an accepting rule is dropped
/// (the rule accepts more than before) and a dropping rule carrying one is
/// deleted; the result accepts a superset of the original traffic. `Deny`
/// mode is the mirror image and accepts a subset. Rules that cannot match
/// any packet are deleted in both modes, so the two results coincide when
/// no uninterpretable matches are present.
pub fn closure(rules: &[Rule], mode: ClosureMode) -> Result<Vec<SimpleRule>> {
    let mut out = Vec::new();
    'rules: for rule in rules {
        let action = match &rule.target {
            Target::Accept => Verdict::Accept,
            Target::Drop | Target::Reject => Verdict::Drop,
            Target::NoOp => continue,
            Target::Return | Target::Jump(_) => {
                return Err(Error::NotLinear(
                    "the rule list still contains jumps or returns; unfold it first".to_string(),
                ))
            }
        };
        let mut simple = SimpleRule::any(action);
        let mut unknown = false;
        for atom in &rule.matches {
            match atom {
                MatchAtom::Src(s) => simple.src = simple.src.intersect(s),
                MatchAtom::Dst(s) => simple.dst = simple.dst.intersect(s),
                MatchAtom::Protocol(pr) => {
                    simple.protocol = match (simple.protocol, *pr) {
                        (Protocol::Any, next) => next,
                        (current, Protocol::Any) => current,
                        (current, next) if current == next => current,
                        _ => continue 'rules,
                    };
                }
                MatchAtom::SrcPorts(s) => simple.sports = simple.sports.intersect(s),
                MatchAtom::DstPorts(s) => simple.dports = simple.dports.intersect(s),
                MatchAtom::BothPorts(_) => {
                    return Err(Error::NotSpecialized(
                        "a port match covering both directions cannot be expressed; \
                         specialize to a service first"
                            .to_string(),
                    ))
                }
                MatchAtom::CtState(s) => {
                    simple.states = simple.states.intersection(s).copied().collect()
                }
                MatchAtom::IIface { .. } | MatchAtom::OIface { .. } | MatchAtom::Unknown(_) => {
                    unknown = true
                }
            }
        }
        if simple.src.is_empty()
            || simple.dst.is_empty()
            || simple.sports.is_empty()
            || simple.dports.is_empty()
            || simple.states.is_empty()
        {
            continue;
        }
        let keep = match (mode, action) {
            (ClosureMode::Allow, Verdict::Accept) | (ClosureMode::Deny, Verdict::Drop) => true,
            _ => !unknown,
        };
        if keep {
            out.push(simple);
        }
    }
    Ok(out)
}

/// First-match evaluation of a closed rule list. A list produced by
/// [`closure`] on an unfolded ruleset always ends in an unconditional rule;
/// a packet reaching the end of a list without one is dropped.
pub fn eval_simple(fw: &[SimpleRule], p: &Packet) -> Verdict {
    for rule in fw {
        if rule.matches(p) {
            return rule.action;
        }
    }
    Verdict::Drop
}

/// Partition of the address space into connectivity classes: two addresses
/// share a class exactly when they can reach the same classes and be
/// reached from the same classes. `edges` holds the allowed flows between
/// classes, as indices into `classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceMatrix {
    pub classes: Vec<IpIntervalSet>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl ServiceMatrix {
    /// Index of the class containing `ip`. The classes partition the full
    /// address space, so every address belongs to exactly one.
    pub fn class_of_ip(&self, ip: Ip32) -> usize {
        self.classes
            .iter()
            .position(|c| c.contains(ip))
            .expect("classes partition the address space")
    }

    /// Index of the single class containing all of `set`, if one exists.
    pub fn class_of_set(&self, set: &IpIntervalSet) -> Option<usize> {
        let lowest = set.min()?;
        let idx = self.class_of_ip(lowest);
        set.is_subset(&self.classes[idx]).then_some(idx)
    }
}

fn validate_closed(fw: &[SimpleRule]) -> Result<()> {
    for rule in fw {
        if rule.protocol != Protocol::Any
            || !rule.sports.is_full()
            || !rule.dports.is_full()
            || rule.states != all_states()
        {
            return Err(Error::NotSpecialized(
                "simple rules still constrain fields other than addresses".to_string(),
            ));
        }
    }
    match fw.last() {
        Some(last) if last.src.is_full() && last.dst.is_full() => Ok(()),
        _ => Err(Error::NotTerminated),
    }
}

fn simple_allows(fw: &[SimpleRule], src: Ip32, dst: Ip32) -> bool {
    for rule in fw {
        if rule.src.contains(src) && rule.dst.contains(dst) {
            return rule.action == Verdict::Accept;
        }
    }
    false
}

fn matrix_over_atoms<F>(atoms: Vec<IpIntervalSet>, allows: F) -> ServiceMatrix
where
    F: Fn(Ip32, Ip32) -> bool,
{
    let reps: Vec<Ip32> = atoms
        .iter()
        .map(|a| a.min().expect("atoms are non-empty"))
        .collect();
    let n = atoms.len();
    let verdict: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| allows(reps[i], reps[j])).collect())
        .collect();

    // Merge atoms with identical rows and columns until a fixpoint. Groups
    // stay homogeneous, so comparing one representative per group suffices.
    let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut changed = true;
    while changed {
        changed = false;
        'merge: for i in 0..groups.len() {
            for j in (i + 1)..groups.len() {
                let (a, b) = (groups[i][0], groups[j][0]);
                let same = groups.iter().all(|g| {
                    let k = g[0];
                    verdict[a][k] == verdict[b][k] && verdict[k][a] == verdict[k][b]
                });
                if same {
                    let merged = groups.remove(j);
                    groups[i].extend(merged);
                    changed = true;
                    break 'merge;
                }
            }
        }
    }

    let mut classes: Vec<(IpIntervalSet, usize)> = groups
        .iter()
        .map(|members| {
            let mut set = IpIntervalSet::empty();
            for &m in members {
                set = set.union(&atoms[m]);
            }
            (set, members[0])
        })
        .collect();
    classes.sort_by_key(|(set, _)| set.min());

    let mut edges = BTreeSet::new();
    for (i, &(_, a)) in classes.iter().enumerate() {
        for (j, &(_, b)) in classes.iter().enumerate() {
            if verdict[a][b] {
                edges.insert((i, j));
            }
        }
    }
    ServiceMatrix {
        classes: classes.into_iter().map(|(set, _)| set).collect(),
        edges,
    }
}

/// Builds the access matrix of a closed rule list: the coarsest partition
/// of the address space such that members of a class are indistinguishable
/// both as sources and as destinations, together with the allowed flows.
///
/// The list must be fully specialized (no constraints besides addresses)
/// and end in an unconditional rule.
pub fn service_matrix(fw: &[SimpleRule]) -> Result<ServiceMatrix> {
    validate_closed(fw)?;
    let mut sets = Vec::new();
    for rule in fw {
        sets.push(rule.src.clone());
        sets.push(rule.dst.clone());
    }
    Ok(matrix_over_atoms(atomize(&sets), |s, d| {
        simple_allows(fw, s, d)
    }))
}

/// Runs the full analysis pipeline for one service and connection state.
pub fn analyze_service(
    rs: &Ruleset,
    start: &str,
    assmt: &Ipassmt,
    svc: Service,
    state: PacketState,
    mode: ClosureMode,
) -> Result<ServiceMatrix> {
    let unfolded = unfold(rs, start)?;
    let rewritten = rewrite_ifaces(&unfolded, assmt);
    let fw = closure(&specialize(&rewritten, svc, state), mode)?;
    service_matrix(&fw)
}

/// Access matrix for new connections plus the flows that are only usable as
/// reply directions: `answers` lists class pairs `(i, j)` where established
/// traffic from `i` to `j` is accepted although `i` cannot open a
/// connection to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatefulOverview {
    pub matrix: ServiceMatrix,
    pub answers: BTreeSet<(usize, usize)>,
}

/// Analyzes one service in both connection states over a joint partition
/// and reports where the two matrices differ.
pub fn stateful_overview(
    rs: &Ruleset,
    start: &str,
    assmt: &Ipassmt,
    svc: Service,
    mode: ClosureMode,
) -> Result<StatefulOverview> {
    let unfolded = unfold(rs, start)?;
    let rewritten = rewrite_ifaces(&unfolded, assmt);
    let new_fw = closure(&specialize(&rewritten, svc, PacketState::New), mode)?;
    let est_fw = closure(
        &specialize(&rewritten, svc, PacketState::Established),
        mode,
    )?;
    validate_closed(&new_fw)?;
    validate_closed(&est_fw)?;

    let mut sets = Vec::new();
    for rule in new_fw.iter().chain(est_fw.iter()) {
        sets.push(rule.src.clone());
        sets.push(rule.dst.clone());
    }
    let atoms = atomize(&sets);
    let matrix = matrix_over_atoms(atoms.clone(), |s, d| simple_allows(&new_fw, s, d));

    let reps: Vec<Ip32> = atoms
        .iter()
        .map(|a| a.min().expect("atoms are non-empty"))
        .collect();
    let mut answers = BTreeSet::new();
    for &s in &reps {
        for &d in &reps {
            if simple_allows(&est_fw, s, d) && !simple_allows(&new_fw, s, d) {
                answers.insert((matrix.class_of_ip(s), matrix.class_of_ip(d)));
            }
        }
    }
    Ok(StatefulOverview { matrix, answers })
}

/// Difference between two access matrices over the common refinement of
/// their partitions. `atoms` are the blocks of the refinement; the edge
/// sets index into them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixDiff {
    pub atoms: Vec<IpIntervalSet>,
    pub only_in_a: BTreeSet<(usize, usize)>,
    pub only_in_b: BTreeSet<(usize, usize)>,
}

impl MatrixDiff {
    pub fn is_empty(&self) -> bool {
        self.only_in_a.is_empty() && self.only_in_b.is_empty()
    }
}

/// Compares two access matrices, refining both partitions to their common
/// atoms and listing the flows present in exactly one of the two.
pub fn matrix_diff(a: &ServiceMatrix, b: &ServiceMatrix) -> MatrixDiff {
    let mut sets = a.classes.clone();
    sets.extend(b.classes.iter().cloned());
    let atoms = atomize(&sets);
    let reps: Vec<Ip32> = atoms
        .iter()
        .map(|atom| atom.min().expect("atoms are non-empty"))
        .collect();
    let mut only_in_a = BTreeSet::new();
    let mut only_in_b = BTreeSet::new();
    for (i, &s) in reps.iter().enumerate() {
        for (j, &d) in reps.iter().enumerate() {
            let in_a = a.edges.contains(&(a.class_of_ip(s), a.class_of_ip(d)));
            let in_b = b.edges.contains(&(b.class_of_ip(s), b.class_of_ip(d)));
            match (in_a, in_b) {
                (true, false) => {
                    only_in_a.insert((i, j));
                }
                (false, true) => {
                    only_in_b.insert((i, j));
                }
                _ => {}
            }
        }
    }
    MatrixDiff {
        atoms,
        only_in_a,
        only_in_b,
    }
}

/// Outcome of checking an access matrix against a policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonReport {
    pub isomorphic: bool,
    pub mismatches: Vec<String>,
}

fn unordered(a: &EntityId, b: &EntityId) -> (EntityId, EntityId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

/// Checks whether an access matrix realizes a stateful policy, given the
/// address set of each policy entity.
///
/// The matrix realizes the policy when every entity's addresses fall inside
/// a single class, distinct entities land in distinct classes, classes
/// without an entity take part in no flow, the flows between bound classes
/// are exactly the policy edges, and the stateful reply flows connect the
/// same entity pairs. `matrix_answers` indexes into `matrix.classes`; pass
/// the answers of a [`StatefulOverview`], or an empty set for a stateless
/// comparison against a policy without answer edges.
pub fn matrix_policy_compare(
    matrix: &ServiceMatrix,
    matrix_answers: &BTreeSet<(usize, usize)>,
    policy: &StatefulPolicy,
    binding: &BTreeMap<EntityId, IpIntervalSet>,
) -> ComparisonReport {
    let mut mismatches = Vec::new();
    let mut class_entity: BTreeMap<usize, EntityId> = BTreeMap::new();
    let mut entity_class: BTreeMap<EntityId, usize> = BTreeMap::new();

    for (entity, addrs) in binding {
        if addrs.is_empty() {
            mismatches.push(format!("entity {entity} is bound to an empty address set"));
            continue;
        }
        match matrix.class_of_set(addrs) {
            Some(class) => {
                if let Some(prev) = class_entity.insert(class, entity.clone()) {
                    mismatches.push(format!(
                        "entities {prev} and {entity} are bound to the same class {}",
                        matrix.classes[class]
                    ));
                }
                entity_class.insert(entity.clone(), class);
            }
            None => mismatches.push(format!(
                "the addresses of entity {entity} do not form part of a single class"
            )),
        }
    }

    for node in policy.base().nodes() {
        if !binding.contains_key(node) {
            mismatches.push(format!("entity {node} has no address binding"));
        }
    }
    for entity in binding.keys() {
        if !policy.base().nodes().contains(entity) {
            mismatches.push(format!("binding names {entity}, which is not a policy node"));
        }
    }

    for (class, set) in matrix.classes.iter().enumerate() {
        if class_entity.contains_key(&class) {
            continue;
        }
        let touched = matrix
            .edges
            .iter()
            .chain(matrix_answers.iter())
            .any(|&(i, j)| i == class || j == class);
        if touched {
            mismatches.push(format!("class {set} takes part in flows but is bound to no entity"));
        }
    }

    for (src, dst) in policy.base().edges() {
        if let (Some(&cs), Some(&cd)) = (entity_class.get(src), entity_class.get(dst)) {
            if !matrix.edges.contains(&(cs, cd)) {
                mismatches.push(format!(
                    "policy allows {src} -> {dst} but the ruleset does not"
                ));
            }
        }
    }
    for &(i, j) in &matrix.edges {
        if let (Some(src), Some(dst)) = (class_entity.get(&i), class_entity.get(&j)) {
            if !policy.base().has_edge(src, dst) {
                mismatches.push(format!(
                    "ruleset allows {src} -> {dst} but the policy does not"
                ));
            }
        }
    }

    let policy_pairs: BTreeSet<(EntityId, EntityId)> = policy
        .answer_edges()
        .iter()
        .map(|(s, d)| unordered(s, d))
        .collect();
    let mut matrix_pairs = BTreeSet::new();
    for &(i, j) in matrix_answers {
        if let (Some(src), Some(dst)) = (class_entity.get(&i), class_entity.get(&j)) {
            matrix_pairs.insert(unordered(src, dst));
        }
    }
    for (a, b) in policy_pairs.difference(&matrix_pairs) {
        mismatches.push(format!(
            "policy expects a stateful flow between {a} and {b} that the ruleset lacks"
        ));
    }
    for (a, b) in matrix_pairs.difference(&policy_pairs) {
        mismatches.push(format!(
            "ruleset permits a stateful flow between {a} and {b} that the policy lacks"
        ));
    }

    ComparisonReport {
        isomorphic: mismatches.is_empty(),
        mismatches,
    }
}
