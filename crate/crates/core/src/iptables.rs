//! Typed model of the `iptables-save` filter-table dialect: parsing,
//! rendering and interface pre-resolution.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::ipset::{parse_ip_expr, IntervalSet, Ip32, IpIntervalSet, PortSet};

/// Layer-4 protocol selector of a rule or packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
    Any,
}

impl Protocol {
    pub fn keyword(self) -> &'static str {
        match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
            Protocol::Icmp => "icmp",
            Protocol::Any => "all",
        }
    }

    fn from_keyword(kw: &str) -> Option<Self> {
        match kw {
            "tcp" => Some(Protocol::Tcp),
            "udp" => Some(Protocol::Udp),
            "icmp" => Some(Protocol::Icmp),
            "all" => Some(Protocol::Any),
            _ => None,
        }
    }

    /// Whether a rule atom for `self` can match a packet carrying `packet_proto`.
    pub fn matches(self, packet_proto: Protocol) -> bool {
        self == Protocol::Any || self == packet_proto
    }
}

/// Connection-tracking states understood by the state and conntrack modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConnState {
    New,
    Related,
    Established,
    Invalid,
}

impl ConnState {
    pub fn keyword(self) -> &'static str {
        match self {
            ConnState::New => "NEW",
            ConnState::Related => "RELATED",
            ConnState::Established => "ESTABLISHED",
            ConnState::Invalid => "INVALID",
        }
    }

    fn from_keyword(kw: &str) -> Option<Self> {
        match kw {
            "NEW" => Some(ConnState::New),
            "RELATED" => Some(ConnState::Related),
            "ESTABLISHED" => Some(ConnState::Established),
            "INVALID" => Some(ConnState::Invalid),
            _ => None,
        }
    }
}

/// One conjunct of a rule's match expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchAtom {
    IIface { name: String, negated: bool },
    OIface { name: String, negated: bool },
    Src(IpIntervalSet),
    Dst(IpIntervalSet),
    Protocol(Protocol),
    SrcPorts(PortSet),
    DstPorts(PortSet),
    BothPorts(PortSet),
    CtState(BTreeSet<ConnState>),
    /// Verbatim text of a match module this model does not interpret.
    Unknown(String),
}

/// Rule action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Accept,
    Drop,
    Reject,
    Return,
    Jump(String),
    /// Rule without a `-j`; it can only trigger module side effects.
    NoOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainPolicy {
    Accept,
    Drop,
}

impl ChainPolicy {
    pub fn keyword(self) -> &'static str {
        match self {
            ChainPolicy::Accept => "ACCEPT",
            ChainPolicy::Drop => "DROP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub matches: Vec<MatchAtom>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub name: String,
    /// Default policy; present exactly on the built-in chains.
    pub policy: Option<ChainPolicy>,
    pub rules: Vec<Rule>,
}

/// A parsed filter table: chains in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ruleset {
    pub chains: Vec<Chain>,
}

pub const BUILTIN_CHAINS: [&str; 3] = ["INPUT", "FORWARD", "OUTPUT"];

impl Ruleset {
    pub fn chain(&self, name: &str) -> Option<&Chain> {
        self.chains.iter().find(|c| c.name == name)
    }

    /// Resolves every interface match against a concrete in/out interface
    /// pair: matching atoms are dropped, non-matching rules are removed.
    /// The result contains no interface atoms.
    pub fn with_ifaces_resolved(&self, in_iface: &str, out_iface: &str) -> Ruleset {
        let chains = self
            .chains
            .iter()
            .map(|chain| {
                let mut rules = Vec::new();
                'rule: for rule in &chain.rules {
                    let mut matches = Vec::new();
                    for atom in &rule.matches {
                        match atom {
                            MatchAtom::IIface { name, negated } => {
                                if (name == in_iface) == *negated {
                                    continue 'rule;
                                }
                            }
                            MatchAtom::OIface { name, negated } => {
                                if (name == out_iface) == *negated {
                                    continue 'rule;
                                }
                            }
                            other => matches.push(other.clone()),
                        }
                    }
                    rules.push(Rule {
                        matches,
                        target: rule.target.clone(),
                    });
                }
                Chain {
                    name: chain.name.clone(),
                    policy: chain.policy,
                    rules,
                }
            })
            .collect();
        Ruleset { chains }
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> Error {
    Error::RulesetSyntax {
        line,
        msg: msg.into(),
    }
}

fn valid_token(tok: &str) -> bool {
    !tok.is_empty()
        && !tok.starts_with('-')
        && tok
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Parses `iptables-save` text, returning the filter table.
pub fn parse_save(text: &str) -> Result<Ruleset> {
    parse_save_with_warnings(text).map(|(rs, _)| rs)
}

/// Like [`parse_save`], additionally reporting skipped non-filter tables.
pub fn parse_save_with_warnings(text: &str) -> Result<(Ruleset, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut chains: Vec<Chain> = Vec::new();
    let mut current_table: Option<String> = None;
    let mut saw_filter = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('*') {
            let name = name.trim();
            if name == "filter" {
                if saw_filter {
                    return Err(syntax(line_no, "duplicate *filter table"));
                }
                saw_filter = true;
            } else {
                warnings.push(format!(
                    "skipping table *{name}: only the filter table is analyzed"
                ));
            }
            current_table = Some(name.to_string());
            continue;
        }
        let Some(table) = current_table.as_deref() else {
            return Err(syntax(
                line_no,
                format!("unexpected line outside a table: {line:?}"),
            ));
        };
        if line == "COMMIT" {
            current_table = None;
            continue;
        }
        if table != "filter" {
            continue;
        }
        if let Some(rest) = line.strip_prefix(':') {
            parse_chain_header(rest, line_no, &mut chains)?;
        } else if line.starts_with("-A ") || line.starts_with("-I ") {
            parse_rule_line(line, line_no, &mut chains)?;
        } else {
            return Err(syntax(line_no, format!("unrecognized directive: {line:?}")));
        }
    }
    if !saw_filter {
        return Err(Error::NoFilterTable);
    }
    ensure_builtin_chains(&mut chains);
    resolve_jumps(&chains)?;
    Ok((Ruleset { chains }, warnings))
}

fn parse_chain_header(rest: &str, line_no: usize, chains: &mut Vec<Chain>) -> Result<()> {
    let mut parts = rest.split_whitespace();
    let name = parts
        .next()
        .ok_or_else(|| syntax(line_no, "chain header missing a name"))?;
    if !valid_token(name) {
        return Err(syntax(line_no, format!("invalid chain name {name:?}")));
    }
    let policy_tok = parts
        .next()
        .ok_or_else(|| syntax(line_no, "chain header missing a policy"))?;
    if let Some(counters) = parts.next() {
        if !(counters.starts_with('[') && counters.ends_with(']')) || parts.next().is_some() {
            return Err(syntax(line_no, "trailing junk after chain header"));
        }
    }
    let policy = match policy_tok {
        "ACCEPT" => Some(ChainPolicy::Accept),
        "DROP" => Some(ChainPolicy::Drop),
        "-" => None,
        other => {
            return Err(syntax(
                line_no,
                format!("unsupported chain policy {other:?}"),
            ))
        }
    };
    let builtin = BUILTIN_CHAINS.contains(&name);
    if builtin && policy.is_none() {
        return Err(syntax(
            line_no,
            format!("built-in chain {name} requires a default policy"),
        ));
    }
    if !builtin && policy.is_some() {
        return Err(syntax(
            line_no,
            format!("user-defined chain {name} cannot carry a default policy"),
        ));
    }
    if chains.iter().any(|c| c.name == name) {
        return Err(syntax(line_no, format!("duplicate chain {name:?}")));
    }
    chains.push(Chain {
        name: name.to_string(),
        policy,
        rules: Vec::new(),
    });
    Ok(())
}

fn parse_rule_line(line: &str, line_no: usize, chains: &mut [Chain]) -> Result<()> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let verb = toks[0];
    let chain_name = *toks
        .get(1)
        .ok_or_else(|| syntax(line_no, "rule is missing a chain name"))?;
    let mut body_start = 2;
    let mut insert_at = None;
    if verb == "-I" {
        if let Some(tok) = toks.get(2) {
            if tok.chars().all(|c| c.is_ascii_digit()) {
                let n: usize = tok
                    .parse()
                    .map_err(|_| syntax(line_no, format!("invalid insert index {tok:?}")))?;
                if n == 0 {
                    return Err(syntax(line_no, "insert index is 1-based"));
                }
                insert_at = Some(n);
                body_start = 3;
            }
        }
        insert_at.get_or_insert(1);
    }
    let rule = parse_rule_tokens(&toks[body_start..], line_no)?;
    let chain = chains
        .iter_mut()
        .find(|c| c.name == chain_name)
        .ok_or_else(|| Error::UnknownChain(chain_name.to_string()))?;
    match insert_at {
        None => chain.rules.push(rule),
        Some(n) => {
            if n > chain.rules.len() + 1 {
                return Err(syntax(
                    line_no,
                    format!("insert index {n} exceeds chain length"),
                ));
            }
            chain.rules.insert(n - 1, rule);
        }
    }
    Ok(())
}

/// Long options the parser interprets itself; an unknown module's option
/// collection must stop at these so the surrounding rule keeps its meaning.
const RESERVED_LONG_OPTS: [&str; 17] = [
    "--source",
    "--destination",
    "--in-interface",
    "--out-interface",
    "--protocol",
    "--dport",
    "--destination-port",
    "--sport",
    "--source-port",
    "--jump",
    "--state",
    "--ctstate",
    "--dports",
    "--sports",
    "--ports",
    "--src-range",
    "--dst-range",
];

fn need_value<'a>(
    toks: &[&'a str],
    i: &mut usize,
    line_no: usize,
    flag: &str,
) -> Result<&'a str> {
    *i += 1;
    let val = toks
        .get(*i)
        .copied()
        .ok_or_else(|| syntax(line_no, format!("missing value for {flag}")))?;
    *i += 1;
    Ok(val)
}

fn parse_states(spec: &str, line_no: usize) -> Result<BTreeSet<ConnState>> {
    let mut states = BTreeSet::new();
    for part in spec.split(',') {
        let st = ConnState::from_keyword(part)
            .ok_or_else(|| syntax(line_no, format!("unknown connection state {part:?}")))?;
        states.insert(st);
    }
    Ok(states)
}

fn parse_port_spec(spec: &str) -> Result<PortSet> {
    let bad = |reason: &str| Error::PortSpec(spec.to_string(), reason.to_string());
    if let Some((a, b)) = spec.split_once(':') {
        let lo: u16 = a.parse().map_err(|_| bad("invalid lower port"))?;
        let hi: u16 = b.parse().map_err(|_| bad("invalid upper port"))?;
        if lo > hi {
            return Err(bad("lower port exceeds upper port"));
        }
        Ok(IntervalSet::interval(lo, hi))
    } else {
        let p: u16 = spec.parse().map_err(|_| bad("invalid port number"))?;
        Ok(IntervalSet::singleton(p))
    }
}

fn parse_port_list(spec: &str) -> Result<PortSet> {
    let mut set = PortSet::empty();
    for part in spec.split(',') {
        set = set.union(&parse_port_spec(part)?);
    }
    Ok(set)
}

fn parse_rule_tokens(toks: &[&str], line_no: usize) -> Result<Rule> {
    let mut matches = Vec::new();
    let mut target = None;
    let mut negated_plain_addr = false;
    let mut multi_plain_addr = false;
    let mut i = 0;
    while i < toks.len() {
        let mut negated = false;
        if toks[i] == "!" {
            negated = true;
            i += 1;
            if i >= toks.len() {
                return Err(syntax(line_no, "dangling negation"));
            }
        }
        let flag = toks[i];
        let reject_negation = |negated: bool| {
            if negated {
                Err(syntax(line_no, format!("negation is not supported for {flag}")))
            } else {
                Ok(())
            }
        };
        match flag {
            "-s" | "--source" | "-d" | "--destination" => {
                let val = need_value(toks, &mut i, line_no, flag)?;
                let mut set = parse_ip_expr(val)?;
                if val.contains(',') {
                    multi_plain_addr = true;
                }
                if negated {
                    negated_plain_addr = true;
                    set = set.complement();
                }
                if matches!(flag, "-s" | "--source") {
                    matches.push(MatchAtom::Src(set));
                } else {
                    matches.push(MatchAtom::Dst(set));
                }
            }
            "-i" | "--in-interface" | "-o" | "--out-interface" => {
                let name = need_value(toks, &mut i, line_no, flag)?;
                if !valid_token(name) {
                    return Err(syntax(line_no, format!("invalid interface name {name:?}")));
                }
                let atom = if flag == "-i" || flag == "--in-interface" {
                    MatchAtom::IIface {
                        name: name.to_string(),
                        negated,
                    }
                } else {
                    MatchAtom::OIface {
                        name: name.to_string(),
                        negated,
                    }
                };
                matches.push(atom);
            }
            "-p" | "--protocol" => {
                reject_negation(negated)?;
                let val = need_value(toks, &mut i, line_no, flag)?;
                let proto = Protocol::from_keyword(val)
                    .ok_or_else(|| syntax(line_no, format!("unsupported protocol {val:?}")))?;
                matches.push(MatchAtom::Protocol(proto));
            }
            "--dport" | "--destination-port" => {
                reject_negation(negated)?;
                let val = need_value(toks, &mut i, line_no, flag)?;
                matches.push(MatchAtom::DstPorts(parse_port_spec(val)?));
            }
            "--sport" | "--source-port" => {
                reject_negation(negated)?;
                let val = need_value(toks, &mut i, line_no, flag)?;
                matches.push(MatchAtom::SrcPorts(parse_port_spec(val)?));
            }
            "-m" | "--match" => {
                reject_negation(negated)?;
                let module = need_value(toks, &mut i, line_no, flag)?;
                parse_module(module, toks, &mut i, line_no, &mut matches)?;
            }
            "-j" | "--jump" => {
                reject_negation(negated)?;
                let name = need_value(toks, &mut i, line_no, flag)?;
                if i != toks.len() {
                    return Err(syntax(line_no, "unexpected tokens after the jump target"));
                }
                target = Some(name.to_string());
            }
            "-g" | "--goto" => {
                return Err(syntax(line_no, "goto targets are not supported"));
            }
            other => {
                return Err(syntax(line_no, format!("unsupported token {other:?}")));
            }
        }
    }
    if negated_plain_addr && multi_plain_addr {
        return Err(Error::NegatedAddressList { line: line_no });
    }
    let target = match target.as_deref() {
        None => Target::NoOp,
        Some("ACCEPT") => Target::Accept,
        Some("DROP") => Target::Drop,
        Some("REJECT") => Target::Reject,
        Some("RETURN") => Target::Return,
        Some(name) => {
            if !valid_token(name) {
                return Err(syntax(line_no, format!("invalid jump target {name:?}")));
            }
            Target::Jump(name.to_string())
        }
    };
    Ok(Rule { matches, target })
}

fn parse_module(
    module: &str,
    toks: &[&str],
    i: &mut usize,
    line_no: usize,
    matches: &mut Vec<MatchAtom>,
) -> Result<()> {
    match module {
        "state" | "conntrack" => {
            let opt = toks
                .get(*i)
                .copied()
                .ok_or_else(|| syntax(line_no, format!("-m {module} without options")))?;
            let expected = if module == "state" { "--state" } else { "--ctstate" };
            if opt != expected {
                return Err(syntax(
                    line_no,
                    format!("-m {module} expects {expected}, found {opt:?}"),
                ));
            }
            let spec = need_value(toks, i, line_no, opt)?;
            matches.push(MatchAtom::CtState(parse_states(spec, line_no)?));
        }
        "tcp" | "udp" => {
            // Port options are handled by the generic --dport/--sport flags.
        }
        "multiport" => {
            let mut any = false;
            loop {
                let save = *i;
                let mut negated = false;
                if toks.get(*i) == Some(&"!") {
                    negated = true;
                    *i += 1;
                }
                let Some(opt) = toks.get(*i).copied() else {
                    *i = save;
                    break;
                };
                let kind = match opt {
                    "--dports" | "--destination-ports" => Some(0),
                    "--sports" | "--source-ports" => Some(1),
                    "--ports" => Some(2),
                    _ => None,
                };
                let Some(kind) = kind else {
                    *i = save;
                    break;
                };
                let spec = need_value(toks, i, line_no, opt)?;
                let mut set = parse_port_list(spec)?;
                if negated {
                    set = set.complement();
                }
                matches.push(match kind {
                    0 => MatchAtom::DstPorts(set),
                    1 => MatchAtom::SrcPorts(set),
                    _ => MatchAtom::BothPorts(set),
                });
                any = true;
            }
            if !any {
                return Err(syntax(line_no, "-m multiport without a port option"));
            }
        }
        "iprange" => {
            let mut any = false;
            loop {
                let save = *i;
                let mut negated = false;
                if toks.get(*i) == Some(&"!") {
                    negated = true;
                    *i += 1;
                }
                let Some(opt) = toks.get(*i).copied() else {
                    *i = save;
                    break;
                };
                if opt != "--src-range" && opt != "--dst-range" {
                    *i = save;
                    break;
                }
                let spec = need_value(toks, i, line_no, opt)?;
                let mut set = parse_ip_expr(spec)?;
                if negated {
                    set = set.complement();
                }
                matches.push(if opt == "--src-range" {
                    MatchAtom::Src(set)
                } else {
                    MatchAtom::Dst(set)
                });
                any = true;
            }
            if !any {
                return Err(syntax(line_no, "-m iprange without a range option"));
            }
        }
        other => {
            let collectable =
                |tok: &str| tok.starts_with("--") && !RESERVED_LONG_OPTS.contains(&tok);
            let mut parts = vec!["-m".to_string(), other.to_string()];
            loop {
                match toks.get(*i) {
                    Some(&"!") if toks.get(*i + 1).is_some_and(|t| collectable(t)) => {
                        parts.push("!".to_string());
                        parts.push(toks[*i + 1].to_string());
                        *i += 2;
                    }
                    Some(tok) if collectable(tok) => {
                        parts.push(tok.to_string());
                        *i += 1;
                    }
                    Some(tok) if !tok.starts_with('-') && *tok != "!" => {
                        parts.push(tok.to_string());
                        *i += 1;
                    }
                    _ => break,
                }
            }
            matches.push(MatchAtom::Unknown(parts.join(" ")));
        }
    }
    Ok(())
}

fn ensure_builtin_chains(chains: &mut Vec<Chain>) {
    if BUILTIN_CHAINS
        .iter()
        .all(|b| chains.iter().any(|c| c.name == *b))
    {
        return;
    }
    let mut out: Vec<Chain> = BUILTIN_CHAINS
        .iter()
        .map(|b| {
            chains
                .iter()
                .find(|c| c.name == *b)
                .cloned()
                .unwrap_or_else(|| Chain {
                    name: b.to_string(),
                    policy: Some(ChainPolicy::Accept),
                    rules: Vec::new(),
                })
        })
        .collect();
    for chain in chains.drain(..) {
        if !BUILTIN_CHAINS.contains(&chain.name.as_str()) {
            out.push(chain);
        }
    }
    *chains = out;
}

fn resolve_jumps(chains: &[Chain]) -> Result<()> {
    for chain in chains {
        for rule in &chain.rules {
            if let Target::Jump(name) = &rule.target {
                if !chains.iter().any(|c| c.name == *name) {
                    return Err(Error::UnresolvedJump(name.clone()));
                }
            }
        }
    }
    Ok(())
}

/// Renders the ruleset back to `iptables-save` text. The output parses to a
/// structurally identical ruleset.
pub fn render_save(rs: &Ruleset) -> String {
    let mut out = String::from("*filter\n");
    for chain in &rs.chains {
        let policy = chain.policy.map_or("-", ChainPolicy::keyword);
        out.push_str(&format!(":{} {} [0:0]\n", chain.name, policy));
    }
    for chain in &rs.chains {
        for rule in &chain.rules {
            let toks = render_rule_tokens(rule);
            if toks.is_empty() {
                out.push_str(&format!("-A {}\n", chain.name));
            } else {
                out.push_str(&format!("-A {} {}\n", chain.name, toks.join(" ")));
            }
        }
    }
    out.push_str("COMMIT\n");
    out
}

enum AddrForm {
    Plain(String),
    Multi(String),
    Negated(String),
    RangePos(Ip32, Ip32),
    RangeNeg(Ip32, Ip32),
}

fn classify_addr(set: &IpIntervalSet) -> AddrForm {
    if set.is_empty() {
        return AddrForm::Negated("0.0.0.0/0".to_string());
    }
    if set.is_full() {
        return AddrForm::Plain("0.0.0.0/0".to_string());
    }
    let cidrs = set.cidr_strings();
    if cidrs.len() == 1 {
        return AddrForm::Plain(cidrs.into_iter().next().unwrap());
    }
    let comp = set.complement();
    let comp_cidrs = comp.cidr_strings();
    if comp_cidrs.len() == 1 {
        return AddrForm::Negated(comp_cidrs.into_iter().next().unwrap());
    }
    if let [(lo, hi)] = set.intervals() {
        return AddrForm::RangePos(*lo, *hi);
    }
    if let [(lo, hi)] = comp.intervals() {
        return AddrForm::RangeNeg(*lo, *hi);
    }
    AddrForm::Multi(cidrs.join(","))
}

fn render_port_list(set: &PortSet) -> String {
    set.intervals()
        .iter()
        .map(|&(lo, hi)| {
            if lo == hi {
                lo.to_string()
            } else {
                format!("{lo}:{hi}")
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn push_ports(out: &mut Vec<String>, set: &PortSet, single_flag: &str, multi_flag: &str) {
    if set.is_empty() {
        // A never-matching port atom survives only via a negated full range.
        out.extend(
            ["-m", "multiport", "!", multi_flag, "0:65535"]
                .iter()
                .map(|s| s.to_string()),
        );
    } else if set.intervals().len() == 1 {
        out.push(single_flag.to_string());
        out.push(render_port_list(set));
    } else {
        out.extend(["-m", "multiport", multi_flag].iter().map(|s| s.to_string()));
        out.push(render_port_list(set));
    }
}

/// Renders one rule as the token sequence following `-A CHAIN`.
pub(crate) fn render_rule_tokens(rule: &Rule) -> Vec<String> {
    let forms: Vec<Option<AddrForm>> = rule
        .matches
        .iter()
        .map(|atom| match atom {
            MatchAtom::Src(set) | MatchAtom::Dst(set) => Some(classify_addr(set)),
            _ => None,
        })
        .collect();
    let any_multi = forms
        .iter()
        .any(|f| matches!(f, Some(AddrForm::Multi(_))));

    let mut out = Vec::new();
    for (atom, form) in rule.matches.iter().zip(forms) {
        match atom {
            MatchAtom::IIface { name, negated } => {
                if *negated {
                    out.push("!".to_string());
                }
                out.push("-i".to_string());
                out.push(name.clone());
            }
            MatchAtom::OIface { name, negated } => {
                if *negated {
                    out.push("!".to_string());
                }
                out.push("-o".to_string());
                out.push(name.clone());
            }
            MatchAtom::Src(set) | MatchAtom::Dst(set) => {
                let is_src = matches!(atom, MatchAtom::Src(_));
                let (plain_flag, range_flag) = if is_src {
                    ("-s", "--src-range")
                } else {
                    ("-d", "--dst-range")
                };
                let mut form = form.unwrap();
                if any_multi {
                    if let AddrForm::Negated(_) = form {
                        // iptables rejects "!" together with an address list
                        // elsewhere in the rule; fall back to the iprange module.
                        let comp = set.complement();
                        let &(lo, hi) = comp.intervals().first().unwrap();
                        form = AddrForm::RangeNeg(lo, hi);
                    }
                }
                match form {
                    AddrForm::Plain(s) | AddrForm::Multi(s) => {
                        out.push(plain_flag.to_string());
                        out.push(s);
                    }
                    AddrForm::Negated(s) => {
                        out.push("!".to_string());
                        out.push(plain_flag.to_string());
                        out.push(s);
                    }
                    AddrForm::RangePos(lo, hi) => {
                        out.extend(
                            ["-m", "iprange", range_flag]
                                .iter()
                                .map(|s| s.to_string()),
                        );
                        out.push(format!("{lo}-{hi}"));
                    }
                    AddrForm::RangeNeg(lo, hi) => {
                        out.extend(
                            ["-m", "iprange", "!", range_flag]
                                .iter()
                                .map(|s| s.to_string()),
                        );
                        out.push(format!("{lo}-{hi}"));
                    }
                }
            }
            MatchAtom::Protocol(proto) => {
                out.push("-p".to_string());
                out.push(proto.keyword().to_string());
            }
            MatchAtom::SrcPorts(set) => push_ports(&mut out, set, "--sport", "--sports"),
            MatchAtom::DstPorts(set) => push_ports(&mut out, set, "--dport", "--dports"),
            MatchAtom::BothPorts(set) => {
                if set.is_empty() {
                    out.extend(
                        ["-m", "multiport", "!", "--ports", "0:65535"]
                            .iter()
                            .map(|s| s.to_string()),
                    );
                } else {
                    out.extend(["-m", "multiport", "--ports"].iter().map(|s| s.to_string()));
                    out.push(render_port_list(set));
                }
            }
            MatchAtom::CtState(states) => {
                debug_assert!(!states.is_empty());
                out.extend(["-m", "state", "--state"].iter().map(|s| s.to_string()));
                out.push(
                    states
                        .iter()
                        .map(|s| s.keyword())
                        .collect::<Vec<_>>()
                        .join(","),
                );
            }
            MatchAtom::Unknown(text) => {
                out.extend(text.split_whitespace().map(|s| s.to_string()));
            }
        }
    }
    match &rule.target {
        Target::Accept => out.extend(["-j".to_string(), "ACCEPT".to_string()]),
        Target::Drop => out.extend(["-j".to_string(), "DROP".to_string()]),
        Target::Reject => out.extend(["-j".to_string(), "REJECT".to_string()]),
        Target::Return => out.extend(["-j".to_string(), "RETURN".to_string()]),
        Target::Jump(name) => out.extend(["-j".to_string(), name.clone()]),
        Target::NoOp => {}
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BASELINE: &str = include_str!("../tests/fixtures/baseline.rules");
    const RATELIMIT: &str = include_str!("../tests/fixtures/ratelimit.rules");
    const TIGHTENED: &str = include_str!("../tests/fixtures/tightened.rules");
    const DEVACCESS: &str = include_str!("../tests/fixtures/devaccess.rules");
    const FINAL: &str = include_str!("../tests/fixtures/final.rules");

    fn ip(s: &str) -> IpIntervalSet {
        parse_ip_expr(s).unwrap()
    }

    fn wrap(rule: &str) -> String {
        format!("*filter\n:FORWARD ACCEPT [0:0]\n:MYNET - [0:0]\n{rule}\nCOMMIT\n")
    }

    fn parse_one(rule: &str) -> Result<Rule> {
        let rs = parse_save(&wrap(rule))?;
        let chain = rule.split_whitespace().nth(1).unwrap().to_string();
        Ok(rs.chain(&chain).unwrap().rules[0].clone())
    }

    #[test]
    fn pair_rule_parses_to_four_atoms() {
        let rule =
            parse_one("-A MYNET -i dockerbr -s 10.0.0.1 -o dockerbr -d 10.0.0.2 -j ACCEPT")
                .unwrap();
        assert_eq!(
            rule.matches,
            vec![
                MatchAtom::IIface {
                    name: "dockerbr".to_string(),
                    negated: false
                },
                MatchAtom::Src(ip("10.0.0.1")),
                MatchAtom::OIface {
                    name: "dockerbr".to_string(),
                    negated: false
                },
                MatchAtom::Dst(ip("10.0.0.2")),
            ]
        );
        assert_eq!(rule.target, Target::Accept);
    }

    #[test]
    fn comma_list_expands_to_a_set() {
        let rule = parse_one("-A MYNET -s 10.0.0.1,10.0.0.42 -j ACCEPT").unwrap();
        assert_eq!(rule.matches, vec![MatchAtom::Src(ip("10.0.0.1,10.0.0.42"))]);
    }

    #[test]
    fn negation_folds_into_the_complement() {
        let rule = parse_one("-A MYNET ! -s 10.0.0.0/8 -j DROP").unwrap();
        assert_eq!(
            rule.matches,
            vec![MatchAtom::Src(ip("10.0.0.0/8").complement())]
        );
    }

    #[test]
    fn negation_with_an_address_list_is_rejected() {
        let err = parse_one("-A MYNET -s 10.0.0.1,10.0.0.42 ! -d 10.0.0.0/8 -j ACCEPT")
            .unwrap_err();
        assert_eq!(err, Error::NegatedAddressList { line: 4 });
        assert!(err
            .to_string()
            .contains("negation is not allowed with multiple source or destination IP addresses"));
    }

    #[test]
    fn iprange_negation_is_exempt_from_the_list_restriction() {
        let rule = parse_one(
            "-A MYNET -s 10.0.0.1,10.0.0.42 -m iprange ! --dst-range 10.0.0.0-10.255.255.255 -j ACCEPT",
        )
        .unwrap();
        assert_eq!(
            rule.matches,
            vec![
                MatchAtom::Src(ip("10.0.0.1,10.0.0.42")),
                MatchAtom::Dst(ip("10.0.0.0-10.255.255.255").complement()),
            ]
        );
    }

    #[test]
    fn side_effect_module_becomes_unknown_noop() {
        let rule =
            parse_one("-A MYNET -d 193.99.144.80 -m recent --set --name rateheise --rsource")
                .unwrap();
        assert_eq!(
            rule.matches,
            vec![
                MatchAtom::Dst(ip("193.99.144.80")),
                MatchAtom::Unknown("-m recent --set --name rateheise --rsource".to_string()),
            ]
        );
        assert_eq!(rule.target, Target::NoOp);
    }

    #[test]
    fn unknown_module_collects_option_values() {
        let rule = parse_one(
            "-A MYNET -m recent --update --seconds 60 --hitcount 3 --name rateheise --rsource -j DROP",
        )
        .unwrap();
        assert_eq!(
            rule.matches,
            vec![MatchAtom::Unknown(
                "-m recent --update --seconds 60 --hitcount 3 --name rateheise --rsource"
                    .to_string()
            )]
        );
        assert_eq!(rule.target, Target::Drop);
    }

    #[test]
    fn state_and_conntrack_agree() {
        let a = parse_one("-A MYNET -m state --state RELATED,ESTABLISHED -j ACCEPT").unwrap();
        let b = parse_one("-A MYNET -m conntrack --ctstate RELATED,ESTABLISHED -j ACCEPT")
            .unwrap();
        assert_eq!(a.matches, b.matches);
        let MatchAtom::CtState(states) = &a.matches[0] else {
            panic!("expected a state atom");
        };
        assert_eq!(
            states.iter().copied().collect::<Vec<_>>(),
            vec![ConnState::Related, ConnState::Established]
        );
    }

    #[test]
    fn protocol_module_marker_is_dropped() {
        let rule = parse_one("-A MYNET -p tcp -m tcp --dport 22 -j ACCEPT").unwrap();
        assert_eq!(
            rule.matches,
            vec![
                MatchAtom::Protocol(Protocol::Tcp),
                MatchAtom::DstPorts(IntervalSet::singleton(22)),
            ]
        );
    }

    #[test]
    fn multiport_ports_sets_both_directions() {
        let rule = parse_one("-A MYNET -p tcp -m multiport --ports 22 -j ACCEPT").unwrap();
        assert_eq!(
            rule.matches,
            vec![
                MatchAtom::Protocol(Protocol::Tcp),
                MatchAtom::BothPorts(IntervalSet::singleton(22)),
            ]
        );
        let rule = parse_one("-A MYNET -m multiport --dports 80,443,8000:8080 -j ACCEPT").unwrap();
        let expected = IntervalSet::singleton(80)
            .union(&IntervalSet::singleton(443))
            .union(&IntervalSet::interval(8000, 8080));
        assert_eq!(rule.matches, vec![MatchAtom::DstPorts(expected)]);
    }

    #[test]
    fn insert_precedes_appended_rules() {
        let text = "*filter\n:FORWARD ACCEPT [0:0]\n\
                    -A FORWARD -s 10.0.0.1 -j ACCEPT\n\
                    -A FORWARD -s 10.0.0.2 -j ACCEPT\n\
                    -I FORWARD -s 10.0.0.3 -j DROP\n\
                    -I FORWARD 2 -s 10.0.0.4 -j DROP\n\
                    COMMIT\n";
        let rs = parse_save(text).unwrap();
        let srcs: Vec<_> = rs
            .chain("FORWARD")
            .unwrap()
            .rules
            .iter()
            .map(|r| match &r.matches[0] {
                MatchAtom::Src(s) => s.to_string(),
                _ => panic!(),
            })
            .collect();
        assert_eq!(
            srcs,
            vec!["{10.0.0.3}", "{10.0.0.4}", "{10.0.0.1}", "{10.0.0.2}"]
        );
    }

    #[test]
    fn unresolved_jump_is_an_error() {
        let err = parse_one("-A MYNET -j LOG").unwrap_err();
        assert_eq!(err, Error::UnresolvedJump("LOG".to_string()));
    }

    #[test]
    fn goto_is_rejected() {
        let err = parse_one("-A MYNET -g FORWARD").unwrap_err();
        assert!(matches!(err, Error::RulesetSyntax { .. }));
    }

    #[test]
    fn chain_policy_placement_is_validated() {
        let no_policy = "*filter\n:FORWARD - [0:0]\nCOMMIT\n";
        assert!(matches!(
            parse_save(no_policy),
            Err(Error::RulesetSyntax { .. })
        ));
        let user_policy = "*filter\n:MYNET ACCEPT [0:0]\nCOMMIT\n";
        assert!(matches!(
            parse_save(user_policy),
            Err(Error::RulesetSyntax { .. })
        ));
    }

    #[test]
    fn append_to_undeclared_chain_is_an_error() {
        let text = "*filter\n:FORWARD ACCEPT [0:0]\n-A MYNET -j ACCEPT\nCOMMIT\n";
        assert_eq!(
            parse_save(text).unwrap_err(),
            Error::UnknownChain("MYNET".to_string())
        );
    }

    #[test]
    fn empty_filter_table_gets_the_builtin_chains() {
        let rs = parse_save("*filter\nCOMMIT\n").unwrap();
        assert_eq!(
            rs.chains.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            vec!["INPUT", "FORWARD", "OUTPUT"]
        );
        assert!(rs.chains.iter().all(|c| c.policy == Some(ChainPolicy::Accept)));
        assert_eq!(
            render_save(&rs),
            "*filter\n:INPUT ACCEPT [0:0]\n:FORWARD ACCEPT [0:0]\n:OUTPUT ACCEPT [0:0]\nCOMMIT\n"
        );
    }

    #[test]
    fn missing_filter_table_is_an_error() {
        assert_eq!(parse_save("*nat\nCOMMIT\n").unwrap_err(), Error::NoFilterTable);
        assert_eq!(parse_save("").unwrap_err(), Error::NoFilterTable);
    }

    #[test]
    fn non_filter_tables_are_skipped_with_a_warning() {
        let text = "*nat\n:PREROUTING ACCEPT [0:0]\n-A PREROUTING -j MASQUERADE\nCOMMIT\n\
                    *filter\n:FORWARD DROP [0:0]\nCOMMIT\n";
        let (rs, warnings) = parse_save_with_warnings(text).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("*nat"));
        assert_eq!(
            rs.chain("FORWARD").unwrap().policy,
            Some(ChainPolicy::Drop)
        );
    }

    #[test]
    fn fixtures_round_trip_structurally() {
        for text in [BASELINE, RATELIMIT, TIGHTENED, DEVACCESS, FINAL] {
            let rs = parse_save(text).unwrap();
            let rendered = render_save(&rs);
            let reparsed = parse_save(&rendered).unwrap();
            assert_eq!(rs, reparsed);
        }
    }

    #[test]
    fn final_ruleset_insert_lands_at_the_head() {
        let rs = parse_save(FINAL).unwrap();
        let forward = rs.chain("FORWARD").unwrap();
        assert_eq!(forward.policy, Some(ChainPolicy::Drop));
        let first = &forward.rules[0];
        assert_eq!(
            first.matches[0],
            MatchAtom::CtState([ConnState::Established].into_iter().collect())
        );
        assert_eq!(first.target, Target::Accept);
        assert_eq!(forward.rules[1].target, Target::Jump("CUSTOM".to_string()));
        assert_eq!(rs.chain("CUSTOM").unwrap().rules[0], Rule {
            matches: Vec::new(),
            target: Target::NoOp
        });
    }

    #[test]
    fn unknown_atoms_render_verbatim() {
        let rs = parse_save(RATELIMIT).unwrap();
        let rendered = render_save(&rs);
        assert!(rendered.contains(
            "-A FORWARD -d 193.99.144.80 -m recent --update --seconds 60 --hitcount 3 --name rateheise --rsource -j DROP"
        ));
    }

    #[test]
    fn negated_address_with_list_renders_via_iprange() {
        let rule = Rule {
            matches: vec![
                MatchAtom::Src(ip("10.0.0.1,10.0.0.42")),
                MatchAtom::Dst(ip("10.0.0.0/8").complement()),
            ],
            target: Target::Accept,
        };
        assert_eq!(
            render_rule_tokens(&rule).join(" "),
            "-s 10.0.0.1,10.0.0.42 -m iprange ! --dst-range 10.0.0.0-10.255.255.255 -j ACCEPT"
        );
        let without_list = Rule {
            matches: vec![
                MatchAtom::Src(ip("10.0.0.4")),
                MatchAtom::Dst(ip("10.0.0.0/8").complement()),
            ],
            target: Target::Accept,
        };
        assert_eq!(
            render_rule_tokens(&without_list).join(" "),
            "-s 10.0.0.4 ! -d 10.0.0.0/8 -j ACCEPT"
        );
    }

    #[test]
    fn interface_resolution_strips_and_filters() {
        let text = "*filter\n:FORWARD ACCEPT [0:0]\n\
                    -A FORWARD -i dockerbr -s 10.0.0.1 -j ACCEPT\n\
                    -A FORWARD ! -i dockerbr -j DROP\n\
                    -A FORWARD -o eth0 -j ACCEPT\n\
                    COMMIT\n";
        let rs = parse_save(text).unwrap();
        let resolved = rs.with_ifaces_resolved("dockerbr", "eth0");
        let rules = &resolved.chain("FORWARD").unwrap().rules;
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].matches, vec![MatchAtom::Src(ip("10.0.0.1"))]);
        assert_eq!(rules[1].matches, Vec::new());
        assert_eq!(rules[1].target, Target::Accept);

        let other = rs.with_ifaces_resolved("eth1", "eth0");
        let rules = &other.chain("FORWARD").unwrap().rules;
        assert_eq!(rules.len(), 2);
        assert_eq!(rules[0].target, Target::Drop);
    }

    fn arb_ipset() -> impl Strategy<Value = IpIntervalSet> {
        proptest::collection::vec((any::<u32>(), any::<u32>()), 0..4).prop_map(|pairs| {
            IntervalSet::from_intervals(
                pairs
                    .into_iter()
                    .map(|(a, b)| (Ip32::new(a.min(b)), Ip32::new(a.max(b)))),
            )
        })
    }

    fn arb_ports() -> impl Strategy<Value = PortSet> {
        proptest::collection::vec((any::<u16>(), any::<u16>()), 1..3).prop_map(|pairs| {
            IntervalSet::from_intervals(pairs.into_iter().map(|(a, b)| (a.min(b), a.max(b))))
        })
    }

    fn arb_states() -> impl Strategy<Value = BTreeSet<ConnState>> {
        proptest::collection::btree_set(
            prop_oneof![
                Just(ConnState::New),
                Just(ConnState::Related),
                Just(ConnState::Established),
                Just(ConnState::Invalid),
            ],
            1..4,
        )
    }

    fn arb_atom() -> impl Strategy<Value = MatchAtom> {
        prop_oneof![
            ("(eth0|br0|dockerbr)", any::<bool>())
                .prop_map(|(name, negated)| MatchAtom::IIface { name, negated }),
            ("(eth0|br0|dockerbr)", any::<bool>())
                .prop_map(|(name, negated)| MatchAtom::OIface { name, negated }),
            arb_ipset().prop_map(MatchAtom::Src),
            arb_ipset().prop_map(MatchAtom::Dst),
            prop_oneof![
                Just(Protocol::Tcp),
                Just(Protocol::Udp),
                Just(Protocol::Icmp),
                Just(Protocol::Any)
            ]
            .prop_map(MatchAtom::Protocol),
            arb_ports().prop_map(MatchAtom::SrcPorts),
            arb_ports().prop_map(MatchAtom::DstPorts),
            arb_ports().prop_map(MatchAtom::BothPorts),
            arb_states().prop_map(MatchAtom::CtState),
            prop_oneof![
                Just("-m recent --set --name probes --rsource"),
                Just("-m limit --limit 5/min"),
            ]
            .prop_map(|s| MatchAtom::Unknown(s.to_string())),
        ]
    }

    fn arb_rule() -> impl Strategy<Value = Rule> {
        (
            proptest::collection::vec(arb_atom(), 0..5),
            prop_oneof![
                Just(Target::Accept),
                Just(Target::Drop),
                Just(Target::Reject),
                Just(Target::Return),
                Just(Target::NoOp),
                Just(Target::Jump("EXTRA".to_string())),
            ],
        )
            .prop_map(|(matches, target)| Rule { matches, target })
    }

    fn arb_ruleset() -> impl Strategy<Value = Ruleset> {
        let policy = prop_oneof![Just(ChainPolicy::Accept), Just(ChainPolicy::Drop)];
        (
            [policy.clone(), policy.clone(), policy],
            proptest::collection::vec(arb_rule(), 0..4),
            proptest::collection::vec(arb_rule(), 0..4),
        )
            .prop_map(|([p1, p2, p3], forward, extra)| Ruleset {
                chains: vec![
                    Chain {
                        name: "INPUT".to_string(),
                        policy: Some(p1),
                        rules: Vec::new(),
                    },
                    Chain {
                        name: "FORWARD".to_string(),
                        policy: Some(p2),
                        rules: forward,
                    },
                    Chain {
                        name: "OUTPUT".to_string(),
                        policy: Some(p3),
                        rules: Vec::new(),
                    },
                    Chain {
                        name: "EXTRA".to_string(),
                        policy: None,
                        rules: extra,
                    },
                ],
            })
    }

    proptest! {
        #[test]
        fn random_rulesets_round_trip(rs in arb_ruleset()) {
            let rendered = render_save(&rs);
            let reparsed = parse_save(&rendered).unwrap();
            prop_assert_eq!(rs, reparsed);
        }
    }
}
