//! Loading of scenario files: JSON documents naming the entities, the
//! invariant templates with their attribute maps, and optionally the host
//! bindings used for ruleset generation and comparison.

use std::collections::{BTreeMap, BTreeSet};

use fwpol_core::invariant::{BlpAttr, InvariantInstance, SinkAttr, SubnetsAttr};
use fwpol_core::ipset::{parse_ip_expr, IpIntervalSet};
use fwpol_core::policy::EntityId;
use fwpol_core::serialize::{DfwfwBinding, EntityBinding, HostBinding};
use fwpol_core::synthesis::Scenario;
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub entities: Vec<String>,
    pub invariants: Vec<InvariantSpec>,
    #[serde(default)]
    pub bindings: Option<BindingsSpec>,
    #[serde(default)]
    pub dfwfw: Option<DfwfwSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSpec {
    pub template: String,
    pub attrs: BTreeMap<String, Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingsSpec {
    #[serde(default)]
    pub internal_universe: Option<String>,
    pub entities: BTreeMap<String, BindingEntry>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingEntry {
    #[serde(default)]
    pub ips: Option<String>,
    #[serde(default)]
    pub iface: Option<String>,
    #[serde(default)]
    pub ip_var: Option<String>,
    #[serde(default)]
    pub iface_var: Option<String>,
    #[serde(default)]
    pub external: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfwfwSpec {
    pub network: String,
    #[serde(default)]
    pub external: Option<String>,
    pub patterns: BTreeMap<String, String>,
}

pub fn parse_scenario_file(text: &str) -> Result<ScenarioFile, String> {
    serde_json::from_str(text).map_err(|e| format!("invalid scenario file: {e}"))
}

/// Builds the invariant set described by the file. Attribute values are
/// validated against the templates' domains; indices in error messages are
/// 1-based to match violation listings.
pub fn load_scenario(file: &ScenarioFile) -> Result<Scenario, String> {
    let mut entities = BTreeSet::new();
    for name in &file.entities {
        let id = EntityId::new(name).map_err(|e| e.to_string())?;
        if !entities.insert(id) {
            return Err(format!("duplicate entity {name:?}"));
        }
    }
    let mut invariants = Vec::new();
    for (idx, spec) in file.invariants.iter().enumerate() {
        let inv = build_invariant(spec).map_err(|msg| format!("invariant {}: {msg}", idx + 1))?;
        invariants.push(inv);
    }
    Scenario::new(entities, invariants).map_err(|e| e.to_string())
}

fn attr_string(entity: &str, value: &Value) -> Result<String, String> {
    match value {
        Value::String(s) => Ok(s.clone()),
        other => Err(format!("attribute of {entity} must be a string, got {other}")),
    }
}

fn build_invariant(spec: &InvariantSpec) -> Result<InvariantInstance, String> {
    match spec.template.as_str() {
        "subnets" => {
            let mut attrs = BTreeMap::new();
            for (name, value) in &spec.attrs {
                let id = EntityId::new(name).map_err(|e| e.to_string())?;
                let value = attr_string(name, value)?;
                let attr = if value == "DMZ" {
                    SubnetsAttr::Dmz
                } else if value.is_empty() {
                    return Err(format!("empty group name for {name}"));
                } else {
                    SubnetsAttr::Member(value)
                };
                attrs.insert(id, attr);
            }
            Ok(InvariantInstance::Subnets(attrs))
        }
        "sink" => {
            let mut attrs = BTreeMap::new();
            for (name, value) in &spec.attrs {
                let id = EntityId::new(name).map_err(|e| e.to_string())?;
                match attr_string(name, value)?.as_str() {
                    "sink" => attrs.insert(id, SinkAttr::Sink),
                    other => return Err(format!("unknown sink attribute {other:?} for {name}")),
                };
            }
            Ok(InvariantInstance::Sink(attrs))
        }
        "blp" => {
            let mut attrs = BTreeMap::new();
            for (name, value) in &spec.attrs {
                let id = EntityId::new(name).map_err(|e| e.to_string())?;
                let attr = match attr_string(name, value)?.as_str() {
                    "confidential" => BlpAttr::confidential(),
                    "declassify" => BlpAttr::declassify(),
                    other => return Err(format!("unknown blp attribute {other:?} for {name}")),
                };
                attrs.insert(id, attr);
            }
            Ok(InvariantInstance::Blp(attrs))
        }
        "acl" => {
            let mut attrs = BTreeMap::new();
            for (name, value) in &spec.attrs {
                let id = EntityId::new(name).map_err(|e| e.to_string())?;
                let Value::Array(items) = value else {
                    return Err(format!("attribute of {name} must be a list of entity names"));
                };
                let mut allowed = BTreeSet::new();
                for item in items {
                    let Value::String(s) = item else {
                        return Err(format!("attribute of {name} must be a list of entity names"));
                    };
                    allowed.insert(EntityId::new(s).map_err(|e| e.to_string())?);
                }
                attrs.insert(id, allowed);
            }
            Ok(InvariantInstance::Acl(attrs))
        }
        other => Err(format!("unknown invariant template {other:?}")),
    }
}

/// The parsed `bindings` section: how each entity maps onto hosts, plus the
/// address range the firewall considers internal.
pub struct HostBindings {
    pub entity_binding: EntityBinding,
    pub internal_universe: IpIntervalSet,
}

pub fn load_host_bindings(file: &ScenarioFile) -> Result<HostBindings, String> {
    let Some(spec) = &file.bindings else {
        return Err("scenario file has no bindings section".to_string());
    };
    let internal_universe = match &spec.internal_universe {
        Some(expr) => parse_ip_expr(expr).map_err(|e| e.to_string())?,
        None => IpIntervalSet::full(),
    };
    let mut entries = BTreeMap::new();
    let mut external = None;
    for (name, entry) in &spec.entities {
        let id = EntityId::new(name).map_err(|e| e.to_string())?;
        if entry.external {
            if let Some(prev) = external.replace(id.clone()) {
                return Err(format!("both {prev} and {id} are marked external"));
            }
        }
        let concrete = entry.ips.is_some() || entry.iface.is_some();
        let variable = entry.ip_var.is_some() || entry.iface_var.is_some();
        let binding = match (concrete, variable) {
            (true, true) => {
                return Err(format!(
                    "binding for {name} mixes concrete and variable fields"
                ));
            }
            (true, false) => {
                let (Some(ips), Some(iface)) = (&entry.ips, &entry.iface) else {
                    return Err(format!("binding for {name} needs both ips and iface"));
                };
                HostBinding::Concrete {
                    ips: parse_ip_expr(ips).map_err(|e| e.to_string())?,
                    iface: iface.clone(),
                }
            }
            (false, true) => {
                let (Some(ip_var), Some(iface_var)) = (&entry.ip_var, &entry.iface_var) else {
                    return Err(format!(
                        "binding for {name} needs both ip_var and iface_var"
                    ));
                };
                HostBinding::Variable {
                    ip_var: ip_var.clone(),
                    iface_var: iface_var.clone(),
                }
            }
            (false, false) => {
                if entry.external {
                    continue;
                }
                return Err(format!("binding for {name} is empty"));
            }
        };
        entries.insert(id, binding);
    }
    if external.is_some()
        && spec.internal_universe.is_none()
        && entries
            .values()
            .any(|b| matches!(b, HostBinding::Concrete { .. }))
    {
        return Err("concrete bindings with an external entity require internal_universe".into());
    }
    Ok(HostBindings {
        entity_binding: EntityBinding { entries, external },
        internal_universe,
    })
}

pub fn load_dfwfw_binding(file: &ScenarioFile) -> Result<DfwfwBinding, String> {
    let Some(spec) = &file.dfwfw else {
        return Err("scenario file has no dfwfw section".to_string());
    };
    let mut patterns = BTreeMap::new();
    for (name, pattern) in &spec.patterns {
        patterns.insert(EntityId::new(name).map_err(|e| e.to_string())?, pattern.clone());
    }
    let external = match &spec.external {
        Some(name) => Some(EntityId::new(name).map_err(|e| e.to_string())?),
        None => None,
    };
    Ok(DfwfwBinding {
        network: spec.network.clone(),
        patterns,
        external,
    })
}

/// Flattens the bindings to plain entity address sets for matrix
/// comparison. The external entity covers everything outside the internal
/// universe; variable bindings carry no addresses and are rejected.
pub fn load_address_binding(file: &ScenarioFile) -> Result<BTreeMap<EntityId, IpIntervalSet>, String> {
    let bindings = load_host_bindings(file)?;
    let mut map = BTreeMap::new();
    for (id, binding) in &bindings.entity_binding.entries {
        match binding {
            HostBinding::Concrete { ips, .. } => {
                map.insert(id.clone(), ips.clone());
            }
            HostBinding::Variable { .. } => {
                return Err(format!(
                    "entity {id} is bound to variables; comparison needs concrete addresses"
                ));
            }
        }
    }
    if let Some(ext) = &bindings.entity_binding.external {
        if file
            .bindings
            .as_ref()
            .is_some_and(|b| b.internal_universe.is_none())
        {
            return Err("an external entity requires internal_universe".to_string());
        }
        map.insert(ext.clone(), bindings.internal_universe.complement());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = include_str!("../../core/tests/fixtures/scenario.json");
    const VARS: &str = include_str!("../../core/tests/fixtures/scenario_vars.json");
    const CONCRETE: &str = include_str!("../../core/tests/fixtures/scenario_concrete.json");

    #[test]
    fn demo_scenario_loads() {
        let file = parse_scenario_file(DEMO).unwrap();
        let sc = load_scenario(&file).unwrap();
        assert_eq!(sc.entities().len(), 5);
        assert_eq!(sc.invariants().len(), 4);
    }

    #[test]
    fn unknown_template_is_rejected() {
        let text = r#"{"entities": ["A"], "invariants": [{"template": "bell", "attrs": {}}]}"#;
        let file = parse_scenario_file(text).unwrap();
        let err = load_scenario(&file).unwrap_err();
        assert!(err.contains("unknown invariant template"));
    }

    #[test]
    fn unknown_blp_value_is_rejected() {
        let text = r#"{"entities": ["A"],
            "invariants": [{"template": "blp", "attrs": {"A": "topsecret"}}]}"#;
        let file = parse_scenario_file(text).unwrap();
        let err = load_scenario(&file).unwrap_err();
        assert!(err.contains("invariant 1"), "{err}");
        assert!(err.contains("topsecret"), "{err}");
    }

    #[test]
    fn acl_attrs_must_be_arrays() {
        let text = r#"{"entities": ["A", "B"],
            "invariants": [{"template": "acl", "attrs": {"A": "B"}}]}"#;
        let file = parse_scenario_file(text).unwrap();
        assert!(load_scenario(&file).is_err());
    }

    #[test]
    fn attrs_of_unknown_entities_are_rejected() {
        let text = r#"{"entities": ["A"],
            "invariants": [{"template": "sink", "attrs": {"Z": "sink"}}]}"#;
        let file = parse_scenario_file(text).unwrap();
        assert!(load_scenario(&file).is_err());
    }

    #[test]
    fn variable_bindings_load() {
        let file = parse_scenario_file(VARS).unwrap();
        let bindings = load_host_bindings(&file).unwrap();
        assert_eq!(bindings.entity_binding.entries.len(), 5);
        assert_eq!(
            bindings.entity_binding.external,
            Some(EntityId::new("INET").unwrap())
        );
        assert!(bindings
            .entity_binding
            .entries
            .values()
            .all(|b| matches!(b, HostBinding::Variable { .. })));
    }

    #[test]
    fn concrete_bindings_load() {
        let file = parse_scenario_file(CONCRETE).unwrap();
        let bindings = load_host_bindings(&file).unwrap();
        assert_eq!(bindings.entity_binding.entries.len(), 4);
        assert_eq!(bindings.internal_universe.to_string(), "{10.0.0.0 .. 10.255.255.255}");
        let frnt = &bindings.entity_binding.entries[&EntityId::new("WebFrnt").unwrap()];
        match frnt {
            HostBinding::Concrete { ips, iface } => {
                assert_eq!(ips.to_string(), "{10.0.0.1} \u{222a} {10.0.0.42}");
                assert_eq!(iface, "dockerbr");
            }
            other => panic!("unexpected binding {other:?}"),
        }
    }

    #[test]
    fn address_binding_gives_the_external_entity_the_outside() {
        let file = parse_scenario_file(CONCRETE).unwrap();
        let map = load_address_binding(&file).unwrap();
        assert_eq!(map.len(), 5);
        let inet = &map[&EntityId::new("INET").unwrap()];
        assert_eq!(
            inet.to_string(),
            "{0.0.0.0 .. 9.255.255.255} \u{222a} {11.0.0.0 .. 255.255.255.255}"
        );
    }

    #[test]
    fn address_binding_rejects_variables() {
        let file = parse_scenario_file(VARS).unwrap();
        let err = load_address_binding(&file).unwrap_err();
        assert!(err.contains("concrete"), "{err}");
    }

    #[test]
    fn dfwfw_binding_loads() {
        let file = parse_scenario_file(CONCRETE).unwrap();
        let binding = load_dfwfw_binding(&file).unwrap();
        assert_eq!(binding.network, "alicewebappnet");
        assert_eq!(binding.patterns.len(), 4);
        assert_eq!(binding.external, Some(EntityId::new("INET").unwrap()));
    }

    #[test]
    fn mixed_binding_fields_are_rejected() {
        let text = r#"{"entities": ["A"], "invariants": [],
            "bindings": {"entities": {"A": {"ips": "10.0.0.1", "iface": "br0", "ip_var": "$x"}}}}"#;
        let file = parse_scenario_file(text).unwrap();
        assert!(load_host_bindings(&file).is_err());
    }
}
