use std::collections::BTreeSet;

use thiserror::Error;

use crate::policy::Violation;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid entity name {0:?}: must be a non-empty token without whitespace")]
    InvalidEntityName(String),

    #[error("unknown entity {0:?}")]
    UnknownEntity(String),

    #[error("policy nodes do not match scenario entities (missing: {missing:?}, extra: {extra:?})")]
    NodeMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("answer edge {0} -> {1} is not a base edge of the policy")]
    AnswerEdgeNotInBase(String, String),

    #[error("answer edge {0} -> {1} is redundant: the reverse base edge already exists")]
    AnswerEdgeReversePresent(String, String),

    #[error("policy violates the scenario invariants ({} violation(s))", .0.len())]
    PolicyViolations(BTreeSet<Violation>),

    #[error("invalid ip expression {expr:?} at offset {offset}: {reason}")]
    IpExpr {
        expr: String,
        offset: usize,
        reason: String,
    },

    #[error("invalid port specification {0:?}: {1}")]
    PortSpec(String, String),

    #[error("line {line}: {msg}")]
    RulesetSyntax { line: usize, msg: String },

    #[error("line {line}: negation is not allowed with multiple source or destination IP addresses")]
    NegatedAddressList { line: usize },

    #[error("ruleset has no *filter table")]
    NoFilterTable,

    #[error("jump target {0:?} is neither a built-in target nor a declared chain")]
    UnresolvedJump(String),

    #[error("unknown chain {0:?}")]
    UnknownChain(String),

    #[error("chain {0:?} has no default policy; analysis must start at a built-in chain")]
    NoChainPolicy(String),

    #[error("unsupported RETURN placement in chain {0:?}: RETURN must be the final rule and carry no matches")]
    ReturnPlacement(String),

    #[error("jump cycle through chain {0:?}")]
    JumpCycle(String),

    #[error("rule list is not linear: {0}")]
    NotLinear(String),

    #[error("rule list is not specialized to a service: {0}")]
    NotSpecialized(String),

    #[error("rule list does not end in an unconditional rule")]
    NotTerminated,

    #[error("ipassmt syntax error on line {line}: {msg}")]
    IpassmtSyntax { line: usize, msg: String },

    #[error("entity {0:?} has no binding")]
    UnboundEntity(String),

    #[error("entity {0:?} has no container pattern")]
    MissingPattern(String),

    #[error("invalid binding: {0}")]
    InvalidBinding(String),
}

pub type Result<T> = std::result::Result<T, Error>;
