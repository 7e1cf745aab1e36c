//! Security invariant templates.
//!
//! An invariant instance is a template plus a partial attribute map over the
//! scenario entities; entities without an explicit attribute get the
//! template's secure default, so forgetting a host never widens access.
//! Every template evaluates a single directed edge in isolation and
//! self-loops are exempt by construction.

use std::collections::{BTreeMap, BTreeSet};

use crate::policy::{Edge, EntityId, PolicyGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvariantKind {
    Subnets,
    Sink,
    Blp,
    Acl,
}

impl InvariantKind {
    pub fn name(self) -> &'static str {
        match self {
            InvariantKind::Subnets => "subnets",
            InvariantKind::Sink => "sink",
            InvariantKind::Blp => "blp",
            InvariantKind::Acl => "acl",
        }
    }
}

/// Whether a template restricts who may initiate access or where information
/// may flow. Only information-flow invariants constrain the reverse
/// direction when a flow is made stateful: access control governs who opens
/// a connection, not the replies it receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvariantCategory {
    AccessControl,
    InformationFlow,
}

/// Subnet membership. Members of a group reach each other, the DMZ bridges
/// group boundaries, unassigned entities are unconstrained as destinations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum SubnetsAttr {
    Member(String),
    Dmz,
    #[default]
    Unassigned,
}

/// Information sinks accept flows but must not emit any (except to
/// themselves).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkAttr {
    Sink,
    #[default]
    Unconstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub enum BlpLevel {
    #[default]
    Unclassified,
    Confidential,
}

/// A no-read-up label. Trusted entities may receive from any level and emit
/// at the bottom level (they are expected to declassify what they forward).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlpAttr {
    pub level: BlpLevel,
    pub trusted: bool,
}

impl BlpAttr {
    pub fn confidential() -> Self {
        BlpAttr {
            level: BlpLevel::Confidential,
            trusted: false,
        }
    }

    pub fn declassify() -> Self {
        BlpAttr {
            level: BlpLevel::Unclassified,
            trusted: true,
        }
    }
}

/// One configured invariant: a template with its attribute map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvariantInstance {
    Subnets(BTreeMap<EntityId, SubnetsAttr>),
    Sink(BTreeMap<EntityId, SinkAttr>),
    Blp(BTreeMap<EntityId, BlpAttr>),
    /// Per destination, the closed set of entities allowed to access it.
    /// Destinations without an entry are unconstrained.
    Acl(BTreeMap<EntityId, BTreeSet<EntityId>>),
}

impl InvariantInstance {
    pub fn kind(&self) -> InvariantKind {
        match self {
            InvariantInstance::Subnets(_) => InvariantKind::Subnets,
            InvariantInstance::Sink(_) => InvariantKind::Sink,
            InvariantInstance::Blp(_) => InvariantKind::Blp,
            InvariantInstance::Acl(_) => InvariantKind::Acl,
        }
    }

    /// The category is a fixed property of the template.
    pub fn category(&self) -> InvariantCategory {
        match self.kind() {
            InvariantKind::Subnets | InvariantKind::Acl => InvariantCategory::AccessControl,
            InvariantKind::Sink | InvariantKind::Blp => InvariantCategory::InformationFlow,
        }
    }

    /// Entities this instance mentions (attribute keys and ACL sources).
    pub fn referenced_entities(&self) -> BTreeSet<EntityId> {
        match self {
            InvariantInstance::Subnets(attrs) => attrs.keys().cloned().collect(),
            InvariantInstance::Sink(attrs) => attrs.keys().cloned().collect(),
            InvariantInstance::Blp(attrs) => attrs.keys().cloned().collect(),
            InvariantInstance::Acl(attrs) => attrs
                .iter()
                .flat_map(|(dst, srcs)| srcs.iter().chain(std::iter::once(dst)))
                .cloned()
                .collect(),
        }
    }

    /// Whether the invariant permits a directed flow from `src` to `dst`.
    /// Self-loops are always permitted.
    pub fn allows(&self, src: &EntityId, dst: &EntityId) -> bool {
        if src == dst {
            return true;
        }
        match self {
            InvariantInstance::Subnets(attrs) => {
                let sa = attrs.get(src).cloned().unwrap_or_default();
                let da = attrs.get(dst).cloned().unwrap_or_default();
                match da {
                    SubnetsAttr::Unassigned | SubnetsAttr::Dmz => true,
                    SubnetsAttr::Member(group) => {
                        sa == SubnetsAttr::Member(group) || sa == SubnetsAttr::Dmz
                    }
                }
            }
            InvariantInstance::Sink(attrs) => {
                attrs.get(src).copied().unwrap_or_default() != SinkAttr::Sink
            }
            InvariantInstance::Blp(attrs) => {
                let sa = attrs.get(src).copied().unwrap_or_default();
                let da = attrs.get(dst).copied().unwrap_or_default();
                let effective_src_level = if sa.trusted {
                    BlpLevel::Unclassified
                } else {
                    sa.level
                };
                da.trusted || effective_src_level <= da.level
            }
            InvariantInstance::Acl(attrs) => attrs
                .get(dst)
                .is_none_or(|allowed| allowed.contains(src)),
        }
    }

    /// All non-self-loop edges of `g` this invariant rejects.
    pub fn offenders(&self, g: &PolicyGraph) -> BTreeSet<Edge> {
        g.edges()
            .iter()
            .filter(|(src, dst)| src != dst && !self.allows(src, dst))
            .cloned()
            .collect()
    }
}
