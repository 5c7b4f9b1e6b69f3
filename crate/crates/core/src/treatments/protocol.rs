use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::Value;

/// Reserved factor carrying the group size a game is launched with.
pub const PLAYER_COUNT: &str = "playerCount";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorType {
    Integer,
    Number,
    String,
    Boolean,
}

impl FactorType {
    pub fn admits(self, value: &Value) -> bool {
        match self {
            FactorType::Integer => value.is_i64() || value.is_u64(),
            FactorType::Number => value.is_number(),
            FactorType::String => value.is_string(),
            FactorType::Boolean => value.is_boolean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorDef {
    pub name: String,
    #[serde(rename = "type")]
    pub value_type: FactorType,
    pub values: Vec<Value>,
}

impl FactorDef {
    pub fn allows(&self, value: &Value) -> bool {
        self.values.iter().any(|v| same_value(v, value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Treatment {
    pub name: String,
    pub assignments: BTreeMap<String, Value>,
}

impl Treatment {
    /// Group size; zero when the reserved factor is missing or malformed,
    /// which validation rules out for parsed protocols.
    pub fn player_count(&self) -> u32 {
        self.assignments
            .get(PLAYER_COUNT)
            .and_then(Value::as_u64)
            .and_then(|n| u32::try_from(n).ok())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutStrategy {
    Fail,
    StartAnyway,
    Extend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LobbyConfig {
    pub name: String,
    /// Seconds.
    pub timeout: u32,
    pub strategy: TimeoutStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extend_limit: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMethod {
    Complete,
    Simple,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quota {
    pub treatment: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub name: String,
    pub assignment_method: AssignmentMethod,
    pub quotas: Vec<Quota>,
    pub lobby: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub factors: Vec<FactorDef>,
    pub treatments: Vec<Treatment>,
    #[serde(default)]
    pub lobbies: Vec<LobbyConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub batches: Vec<BatchSpec>,
}

/// One validation finding. `needle` is a token from the source that locates it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
    pub needle: Option<String>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("validation failed: {}", join(.0))]
    Validation(Vec<Diagnostic>),
}

fn join(ds: &[Diagnostic]) -> String {
    ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Parse { .. } => "parse-error",
            ProtocolError::Validation(_) => "validation-error",
        }
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        match self {
            ProtocolError::Validation(d) => d,
            ProtocolError::Parse { .. } => &[],
        }
    }
}

/// Numbers compare by value so `12` and `12.0` are the same level.
pub(crate) fn same_value(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) if a.is_number() && b.is_number() => x == y,
        _ => a == b,
    }
}

/// Renders a factor level for generated treatment names.
pub(crate) fn render_level(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn parse_protocol(text: &str) -> Result<Protocol, ProtocolError> {
    let protocol: Protocol = serde_yaml::from_str(text).map_err(|e| ProtocolError::Parse {
        line: e.location().map(|l| l.line()),
        message: e.to_string(),
    })?;
    protocol.validate()?;
    Ok(protocol)
}

pub fn serialize_protocol(protocol: &Protocol) -> String {
    serde_yaml::to_string(protocol).expect("protocol types always serialize")
}

struct Findings(Vec<Diagnostic>);

impl Findings {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>, needle: Option<&str>) {
        self.0.push(Diagnostic {
            path: path.into(),
            message: message.into(),
            needle: needle.map(str::to_string),
        });
    }
}

impl Protocol {
    pub fn factor(&self, name: &str) -> Option<&FactorDef> {
        self.factors.iter().find(|f| f.name == name)
    }

    pub fn treatment(&self, name: &str) -> Option<&Treatment> {
        self.treatments.iter().find(|t| t.name == name)
    }

    pub fn lobby(&self, name: &str) -> Option<&LobbyConfig> {
        self.lobbies.iter().find(|l| l.name == name)
    }

    pub fn batch(&self, name: &str) -> Option<&BatchSpec> {
        self.batches.iter().find(|b| b.name == name)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut f = Findings(Vec::new());
        validate_factors(&self.factors, &mut f);
        match self.factor(PLAYER_COUNT) {
            None => f.push(
                "factors",
                format!("reserved factor {PLAYER_COUNT} is not declared"),
                None,
            ),
            Some(pc) => {
                if pc.value_type != FactorType::Integer {
                    f.push("factors.playerCount", "must have type integer", Some(PLAYER_COUNT));
                }
                if pc.values.iter().any(|v| v.as_u64().is_none_or(|n| n == 0)) {
                    f.push(
                        "factors.playerCount",
                        "values must be positive integers",
                        Some(PLAYER_COUNT),
                    );
                }
            }
        }

        if self.treatments.is_empty() {
            f.push("treatments", "at least one treatment is required", None);
        }
        let mut seen = BTreeSet::new();
        for (i, t) in self.treatments.iter().enumerate() {
            let path = format!("treatments[{i}]");
            if t.name.is_empty() {
                f.push(&path, "treatment name must not be empty", None);
            }
            if !seen.insert(t.name.as_str()) {
                f.push(&path, format!("duplicate treatment name {:?}", t.name), Some(&t.name));
            }
            self.check_assignments(&t.assignments, &format!("{path}.assignments"), &mut f);
            if !t.assignments.contains_key(PLAYER_COUNT) {
                f.push(
                    &path,
                    format!("treatment {:?} does not assign {PLAYER_COUNT}", t.name),
                    Some(&t.name),
                );
            }
        }

        let mut seen = BTreeSet::new();
        for (i, l) in self.lobbies.iter().enumerate() {
            let path = format!("lobbies[{i}]");
            if !seen.insert(l.name.as_str()) {
                f.push(&path, format!("duplicate lobby name {:?}", l.name), Some(&l.name));
            }
            if l.timeout == 0 {
                f.push(&path, "timeout must be a positive number of seconds", Some(&l.name));
            }
            match (l.strategy, l.extend_limit) {
                (TimeoutStrategy::Extend, None) => {
                    f.push(&path, "strategy extend requires extend_limit", Some(&l.name))
                }
                (TimeoutStrategy::Fail | TimeoutStrategy::StartAnyway, Some(_)) => {
                    f.push(&path, "extend_limit is only valid with strategy extend", Some(&l.name))
                }
                _ => {}
            }
        }

        let mut seen = BTreeSet::new();
        for (i, b) in self.batches.iter().enumerate() {
            let path = format!("batches[{i}]");
            if !seen.insert(b.name.as_str()) {
                f.push(&path, format!("duplicate batch name {:?}", b.name), Some(&b.name));
            }
            for d in self.check_batch(b) {
                f.push(format!("{path}.{}", d.path), d.message, d.needle.as_deref());
            }
        }

        if f.0.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::Validation(f.0))
        }
    }

    /// Checks a batch spec against this protocol's treatments and lobbies.
    pub fn check_batch(&self, b: &BatchSpec) -> Vec<Diagnostic> {
        let mut f = Findings(Vec::new());
        if b.quotas.is_empty() {
            f.push("quotas", "at least one quota is required", None);
        }
        for (i, q) in b.quotas.iter().enumerate() {
            if self.treatment(&q.treatment).is_none() {
                f.push(
                    format!("quotas[{i}]"),
                    format!("unknown treatment {:?}", q.treatment),
                    Some(&q.treatment),
                );
            }
            if q.count == 0 {
                f.push(
                    format!("quotas[{i}]"),
                    "game count must be at least 1",
                    Some(&q.treatment),
                );
            }
        }
        if self.lobby(&b.lobby).is_none() {
            f.push("lobby", format!("unknown lobby {:?}", b.lobby), Some(&b.lobby));
        }
        f.0
    }

    fn check_assignments(&self, assignments: &BTreeMap<String, Value>, path: &str, f: &mut Findings) {
        for (name, value) in assignments {
            match self.factor(name) {
                None => f.push(format!("{path}.{name}"), format!("unknown factor {name:?}"), Some(name)),
                Some(def) if !def.allows(value) => f.push(
                    format!("{path}.{name}"),
                    format!("value {value} is not an allowed level of factor {name:?}"),
                    Some(name),
                ),
                Some(_) => {}
            }
        }
    }
}

fn validate_factors(factors: &[FactorDef], f: &mut Findings) {
    let mut seen = BTreeSet::new();
    for (i, def) in factors.iter().enumerate() {
        let path = format!("factors[{i}]");
        let ident_ok = def
            .name
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
            && def.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !ident_ok {
            f.push(
                &path,
                format!("factor name {:?} is not an identifier", def.name),
                Some(&def.name),
            );
        }
        if !seen.insert(def.name.as_str()) {
            f.push(&path, format!("duplicate factor name {:?}", def.name), Some(&def.name));
        }
        if def.values.is_empty() {
            f.push(
                &path,
                format!("factor {:?} has no allowed values", def.name),
                Some(&def.name),
            );
        }
        for (j, v) in def.values.iter().enumerate() {
            if !def.value_type.admits(v) {
                f.push(
                    format!("{path}.values[{j}]"),
                    format!("value {v} does not match type of factor {:?}", def.name),
                    Some(&def.name),
                );
            }
            if def.values[..j].iter().any(|w| same_value(v, w)) {
                f.push(
                    format!("{path}.values[{j}]"),
                    format!("duplicate value {v} in factor {:?}", def.name),
                    Some(&def.name),
                );
            }
        }
    }
}

pub(crate) fn validate_factor_defs(factors: &[FactorDef]) -> Result<(), ProtocolError> {
    let mut f = Findings(Vec::new());
    validate_factors(factors, &mut f);
    if f.0.is_empty() {
        Ok(())
    } else {
        Err(ProtocolError::Validation(f.0))
    }
}
