//! Command line frontend: synthesizes policies from invariant scenarios,
//! renders them as rulesets, and analyzes existing rulesets back into
//! service-level access matrices so the two directions can be checked
//! against each other.

mod scenario;

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fwpol_core::analysis::{
    analyze_service, matrix_diff, matrix_policy_compare, parse_ipassmt, stateful_overview,
    ClosureMode, Ipassmt, PacketState, Service, ServiceMatrix,
};
use fwpol_core::ipset::IpIntervalSet;
use fwpol_core::iptables::{parse_save_with_warnings, Ruleset};
use fwpol_core::policy::{EntityId, PolicyGraph, Violation};
use fwpol_core::serialize::{matrix_dot, policy_dot, stateful_dot, to_dfwfw, to_iptables};
use fwpol_core::synthesis::{make_stateful, synthesize_policy, verify_policy, Scenario};

use scenario::{
    load_address_binding, load_dfwfw_binding, load_host_bindings, load_scenario,
    parse_scenario_file, ScenarioFile,
};

#[derive(Parser)]
#[command(name = "fwpol", version, about = "Policy synthesis and firewall analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the maximal policy satisfying a scenario's invariants
    Synth {
        /// Scenario file, or "-" for standard input
        scenario: String,
        /// Write the policy graph in DOT format to this path
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Check a policy edge list against a scenario's invariants
    Check {
        /// Scenario file, or "-" for standard input
        scenario: String,
        /// Policy edge file with one "src -> dst" line per edge
        policy: String,
        /// Write the policy graph with violations highlighted to this path
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Compute which policy flows may receive stateful answers
    Stateful {
        /// Scenario file, or "-" for standard input
        scenario: String,
        /// Policy edge file with one "src -> dst" line per edge
        policy: String,
        /// Write the stateful policy graph in DOT format to this path
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Render a policy as a ruleset using the scenario's bindings
    Generate {
        /// Scenario file, or "-" for standard input
        scenario: String,
        /// Policy edge file with one "src -> dst" line per edge
        policy: String,
        #[arg(long, value_enum, default_value_t = Format::Iptables)]
        format: Format,
    },
    /// Summarize a ruleset as a service access matrix
    Analyze {
        /// Ruleset in iptables-save format, or "-" for standard input
        ruleset: String,
        #[command(flatten)]
        flags: AnalysisFlags,
        /// Connection state of the analyzed packets
        #[arg(long, value_enum, default_value_t = StateArg::New)]
        state: StateArg,
        /// Write the access matrix in DOT format to this path
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Report where the access matrices of two rulesets differ
    Diff {
        /// First ruleset, or "-" for standard input
        ruleset_a: String,
        /// Second ruleset
        ruleset_b: String,
        #[command(flatten)]
        flags: AnalysisFlags,
        /// Connection state of the analyzed packets
        #[arg(long, value_enum, default_value_t = StateArg::New)]
        state: StateArg,
    },
    /// Verify that a ruleset realizes a policy under the scenario's bindings
    Compare {
        /// Ruleset in iptables-save format, or "-" for standard input
        ruleset: String,
        /// Scenario file with concrete bindings
        scenario: String,
        /// Policy edge file with one "src -> dst" line per edge
        policy: String,
        #[command(flatten)]
        flags: AnalysisFlags,
    },
}

#[derive(Args)]
struct AnalysisFlags {
    /// Service to analyze, e.g. "tcp:80", "udp:53" or "ssh"
    #[arg(long, default_value = "tcp:80")]
    service: String,
    /// Interface address assignment file ("iface = addresses" lines)
    #[arg(long)]
    ipassmt: Option<String>,
    /// Verdict assumed for match features outside the model
    #[arg(long, value_enum, default_value_t = ClosureArg::Allow)]
    closure: ClosureArg,
    /// Chain the analyzed packets traverse
    #[arg(long, default_value = "FORWARD")]
    chain: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Iptables,
    Dfwfw,
}

#[derive(Clone, Copy, ValueEnum)]
enum StateArg {
    New,
    Established,
    Stateful,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClosureArg {
    Allow,
    Deny,
}

impl From<ClosureArg> for ClosureMode {
    fn from(value: ClosureArg) -> Self {
        match value {
            ClosureArg::Allow => ClosureMode::Allow,
            ClosureArg::Deny => ClosureMode::Deny,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { scenario, dot } => cmd_synth(&scenario, dot.as_deref()),
        Command::Check {
            scenario,
            policy,
            dot,
        } => cmd_check(&scenario, &policy, dot.as_deref()),
        Command::Stateful {
            scenario,
            policy,
            dot,
        } => cmd_stateful(&scenario, &policy, dot.as_deref()),
        Command::Generate {
            scenario,
            policy,
            format,
        } => cmd_generate(&scenario, &policy, format),
        Command::Analyze {
            ruleset,
            flags,
            state,
            dot,
        } => cmd_analyze(&ruleset, &flags, state, dot.as_deref()),
        Command::Diff {
            ruleset_a,
            ruleset_b,
            flags,
            state,
        } => cmd_diff(&ruleset_a, &ruleset_b, &flags, state),
        Command::Compare {
            ruleset,
            scenario,
            policy,
            flags,
        } => cmd_compare(&ruleset, &scenario, &policy, &flags),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_input(path: &str) -> Result<String, String> {
    if path == "-" {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| format!("standard input: {e}"))?;
        Ok(text)
    } else {
        fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))
    }
}

fn write_dot(path: Option<&std::path::Path>, dot: String) -> Result<(), String> {
    match path {
        Some(p) => fs::write(p, dot).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(()),
    }
}

fn load_scenario_file(path: &str) -> Result<(ScenarioFile, Scenario), String> {
    let file = parse_scenario_file(&read_input(path)?)?;
    let sc = load_scenario(&file)?;
    Ok((file, sc))
}

/// Reads a policy edge file: one "src -> dst" line per edge, '#' starting a
/// comment. Nodes are the scenario's entities.
fn load_policy(sc: &Scenario, path: &str) -> Result<PolicyGraph, String> {
    let text = read_input(path)?;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((src, dst)) = line.split_once("->") else {
            return Err(format!(
                "{path}:{}: expected \"src -> dst\", got {line:?}",
                idx + 1
            ));
        };
        let src = EntityId::new(src.trim()).map_err(|e| e.to_string())?;
        let dst = EntityId::new(dst.trim()).map_err(|e| e.to_string())?;
        edges.push((src, dst));
    }
    PolicyGraph::from_edges(sc.entities().clone(), edges).map_err(|e| e.to_string())
}

fn load_ruleset(path: &str) -> Result<Ruleset, String> {
    let (rs, warnings) =
        parse_save_with_warnings(&read_input(path)?).map_err(|e| format!("{path}: {e}"))?;
    for w in warnings {
        eprintln!("warning: {path}: {w}");
    }
    Ok(rs)
}

fn load_ipassmt(path: Option<&str>) -> Result<Ipassmt, String> {
    match path {
        Some(p) => {
            let (assmt, warnings) = parse_ipassmt(&read_input(p)?).map_err(|e| e.to_string())?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            Ok(assmt)
        }
        None => Ok(Ipassmt::new()),
    }
}

fn violation_line(sc: &Scenario, v: &Violation) -> String {
    let kind = sc.invariants()[v.invariant_index - 1].kind().name();
    format!(
        "violation: invariant {} ({}): {} -> {}",
        v.invariant_index, kind, v.edge.0, v.edge.1
    )
}

fn check_violations(sc: &Scenario, g: &PolicyGraph) -> Result<BTreeSet<Violation>, String> {
    verify_policy(g, sc).map_err(|e| e.to_string())
}

/// Refuses to proceed when the policy violates its own scenario, listing the
/// violations on standard error.
fn require_compliant(sc: &Scenario, g: &PolicyGraph) -> Result<Option<ExitCode>, String> {
    let violations = check_violations(sc, g)?;
    if violations.is_empty() {
        return Ok(None);
    }
    eprintln!("error: the policy violates the scenario's invariants");
    for v in &violations {
        eprintln!("{}", violation_line(sc, v));
    }
    Ok(Some(ExitCode::from(1)))
}

fn cmd_synth(scenario: &str, dot: Option<&std::path::Path>) -> Result<ExitCode, String> {
    let (_, sc) = load_scenario_file(scenario)?;
    let g = synthesize_policy(&sc);
    write_dot(dot, policy_dot(&g, &BTreeSet::new()))?;
    for (src, dst) in g.edges() {
        println!("{src} -> {dst}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(scenario: &str, policy: &str, dot: Option<&std::path::Path>) -> Result<ExitCode, String> {
    let (_, sc) = load_scenario_file(scenario)?;
    let g = load_policy(&sc, policy)?;
    let violations = check_violations(&sc, &g)?;
    write_dot(dot, policy_dot(&g, &violations))?;
    for v in &violations {
        println!("{}", violation_line(&sc, v));
    }
    if violations.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_stateful(
    scenario: &str,
    policy: &str,
    dot: Option<&std::path::Path>,
) -> Result<ExitCode, String> {
    let (_, sc) = load_scenario_file(scenario)?;
    let g = load_policy(&sc, policy)?;
    if let Some(code) = require_compliant(&sc, &g)? {
        return Ok(code);
    }
    let sp = make_stateful(&g, &sc).map_err(|e| e.to_string())?;
    write_dot(dot, stateful_dot(&sp))?;
    for (src, dst) in sp.base().edges() {
        println!("{src} -> {dst}");
    }
    for (src, dst) in sp.answer_edges() {
        println!("answer: {src} -> {dst}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(scenario: &str, policy: &str, format: Format) -> Result<ExitCode, String> {
    let (file, sc) = load_scenario_file(scenario)?;
    let g = load_policy(&sc, policy)?;
    if let Some(code) = require_compliant(&sc, &g)? {
        return Ok(code);
    }
    match format {
        Format::Iptables => {
            let bindings = load_host_bindings(&file)?;
            let sp = make_stateful(&g, &sc).map_err(|e| e.to_string())?;
            let text = to_iptables(&sp, &bindings.entity_binding, &bindings.internal_universe)
                .map_err(|e| e.to_string())?;
            print!("{text}");
        }
        Format::Dfwfw => {
            let binding = load_dfwfw_binding(&file)?;
            let (json, warnings) = to_dfwfw(&g, &binding).map_err(|e| e.to_string())?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            print!("{json}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

struct Analysis {
    matrix: ServiceMatrix,
    answers: BTreeSet<(usize, usize)>,
}

fn run_analysis(
    ruleset: &str,
    flags: &AnalysisFlags,
    state: StateArg,
) -> Result<Analysis, String> {
    let rs = load_ruleset(ruleset)?;
    let svc: Service = flags.service.parse().map_err(|e: fwpol_core::Error| e.to_string())?;
    let assmt = load_ipassmt(flags.ipassmt.as_deref())?;
    let mode = flags.closure.into();
    match state {
        StateArg::New | StateArg::Established => {
            let packet_state = match state {
                StateArg::New => PacketState::New,
                _ => PacketState::Established,
            };
            let matrix = analyze_service(&rs, &flags.chain, &assmt, svc, packet_state, mode)
                .map_err(|e| e.to_string())?;
            Ok(Analysis {
                matrix,
                answers: BTreeSet::new(),
            })
        }
        StateArg::Stateful => {
            let overview = stateful_overview(&rs, &flags.chain, &assmt, svc, mode)
                .map_err(|e| e.to_string())?;
            Ok(Analysis {
                matrix: overview.matrix,
                answers: overview.answers,
            })
        }
    }
}

fn cmd_analyze(
    ruleset: &str,
    flags: &AnalysisFlags,
    state: StateArg,
    dot: Option<&std::path::Path>,
) -> Result<ExitCode, String> {
    let analysis = run_analysis(ruleset, flags, state)?;
    write_dot(dot, matrix_dot(&analysis.matrix, &analysis.answers))?;
    for (idx, class) in analysis.matrix.classes.iter().enumerate() {
        println!("class {idx}: {class}");
    }
    for (i, j) in &analysis.matrix.edges {
        println!("edge {i} -> {j}");
    }
    for (i, j) in &analysis.answers {
        println!("answer {i} -> {j}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Maps class-index answer pairs onto the shared atoms of a diff so the
/// answer sets of two analyses can be compared set against set.
fn answer_atoms(
    atoms: &[IpIntervalSet],
    matrix: &ServiceMatrix,
    answers: &BTreeSet<(usize, usize)>,
) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for &(i, j) in answers {
        for (x, ax) in atoms.iter().enumerate() {
            if !ax.is_subset(&matrix.classes[i]) {
                continue;
            }
            for (y, ay) in atoms.iter().enumerate() {
                if ay.is_subset(&matrix.classes[j]) {
                    out.insert((x, y));
                }
            }
        }
    }
    out
}

fn cmd_diff(
    ruleset_a: &str,
    ruleset_b: &str,
    flags: &AnalysisFlags,
    state: StateArg,
) -> Result<ExitCode, String> {
    let a = run_analysis(ruleset_a, flags, state)?;
    let b = run_analysis(ruleset_b, flags, state)?;
    let diff = matrix_diff(&a.matrix, &b.matrix);
    for (i, j) in &diff.only_in_a {
        println!("only in A: {} -> {}", diff.atoms[*i], diff.atoms[*j]);
    }
    for (i, j) in &diff.only_in_b {
        println!("only in B: {} -> {}", diff.atoms[*i], diff.atoms[*j]);
    }
    let answers_a = answer_atoms(&diff.atoms, &a.matrix, &a.answers);
    let answers_b = answer_atoms(&diff.atoms, &b.matrix, &b.answers);
    let mut clean = diff.is_empty();
    for (i, j) in answers_a.difference(&answers_b) {
        println!("answer only in A: {} -> {}", diff.atoms[*i], diff.atoms[*j]);
        clean = false;
    }
    for (i, j) in answers_b.difference(&answers_a) {
        println!("answer only in B: {} -> {}", diff.atoms[*i], diff.atoms[*j]);
        clean = false;
    }
    if clean {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_compare(
    ruleset: &str,
    scenario: &str,
    policy: &str,
    flags: &AnalysisFlags,
) -> Result<ExitCode, String> {
    let (file, sc) = load_scenario_file(scenario)?;
    let g = load_policy(&sc, policy)?;
    if let Some(code) = require_compliant(&sc, &g)? {
        return Ok(code);
    }
    let sp = make_stateful(&g, &sc).map_err(|e| e.to_string())?;
    let binding = load_address_binding(&file)?;
    let rs = load_ruleset(ruleset)?;
    let svc: Service = flags.service.parse().map_err(|e: fwpol_core::Error| e.to_string())?;
    let assmt = load_ipassmt(flags.ipassmt.as_deref())?;
    let overview = stateful_overview(&rs, &flags.chain, &assmt, svc, flags.closure.into())
        .map_err(|e| e.to_string())?;
    let report = matrix_policy_compare(&overview.matrix, &overview.answers, &sp, &binding);
    if report.isomorphic {
        println!("isomorphic");
        Ok(ExitCode::SUCCESS)
    } else {
        for m in &report.mismatches {
            println!("mismatch: {m}");
        }
        Ok(ExitCode::from(1))
    }
}
