use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ModelError, ScopeRef, Value};

/// Largest encoded value accepted by `set`/`append`.
pub const MAX_VALUE_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeOp {
    Set,
    Append,
}

/// One versioned cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub scope: ScopeRef,
    pub key: String,
    pub value: Value,
    pub version: u64,
    pub updated_at: u64,
    pub updated_by: String,
}

/// A committed write. For `Append` the `value` is the appended element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrChange {
    pub scope: ScopeRef,
    pub key: String,
    pub op: ChangeOp,
    pub value: Value,
    pub version: u64,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub scope: ScopeRef,
    pub name: String,
    pub payload: Value,
    pub at: u64,
    pub actor: String,
}

/// Attribute cells keyed by scope then key.
///
/// `plan_*` methods validate a write and compute the resulting change without
/// touching the store; `apply` is the only mutation path, which keeps the
/// live store and a replayed one identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeStore {
    cells: BTreeMap<ScopeRef, BTreeMap<String, Attribute>>,
}

fn encoded_len(value: &Value) -> usize {
    serde_json::to_vec(value).map(|v| v.len()).unwrap_or(usize::MAX)
}

impl AttributeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, scope: &ScopeRef, key: &str) -> Option<&Attribute> {
        self.cells.get(scope).and_then(|m| m.get(key))
    }

    pub fn version(&self, scope: &ScopeRef, key: &str) -> u64 {
        self.get(scope, key).map_or(0, |a| a.version)
    }

    pub fn plan_set(&self, scope: &ScopeRef, key: &str, value: Value, actor: &str) -> Result<AttrChange, ModelError> {
        check_key(key)?;
        let len = encoded_len(&value);
        if len > MAX_VALUE_BYTES {
            return Err(ModelError::ValueTooLarge(len));
        }
        Ok(AttrChange {
            scope: scope.clone(),
            key: key.to_string(),
            op: ChangeOp::Set,
            value,
            version: self.version(scope, key) + 1,
            actor: actor.to_string(),
        })
    }

    pub fn plan_append(
        &self,
        scope: &ScopeRef,
        key: &str,
        element: Value,
        actor: &str,
    ) -> Result<AttrChange, ModelError> {
        check_key(key)?;
        let existing = match self.get(scope, key) {
            None => 0,
            Some(attr) => match &attr.value {
                Value::Array(_) => encoded_len(&attr.value),
                _ => {
                    return Err(ModelError::TypeConflict {
                        scope: scope.to_string(),
                        key: key.to_string(),
                    })
                }
            },
        };
        let len = existing + encoded_len(&element) + 2;
        if len > MAX_VALUE_BYTES {
            return Err(ModelError::ValueTooLarge(len));
        }
        Ok(AttrChange {
            scope: scope.clone(),
            key: key.to_string(),
            op: ChangeOp::Append,
            value: element,
            version: self.version(scope, key) + 1,
            actor: actor.to_string(),
        })
    }

    /// Applies a change produced by `plan_set`/`plan_append` (or read back
    /// from the journal). Rejects version gaps and appends onto non-lists.
    pub fn apply(&mut self, change: &AttrChange, at: u64) -> Result<(), ModelError> {
        let expected = self.version(&change.scope, &change.key) + 1;
        if change.version != expected {
            return Err(ModelError::VersionGap {
                scope: change.scope.to_string(),
                key: change.key.clone(),
                expected,
                found: change.version,
            });
        }
        let cells = self.cells.entry(change.scope.clone()).or_default();
        let slot = cells.entry(change.key.clone()).or_insert_with(|| Attribute {
            scope: change.scope.clone(),
            key: change.key.clone(),
            value: match change.op {
                ChangeOp::Set => Value::Null,
                ChangeOp::Append => Value::Array(Vec::new()),
            },
            version: 0,
            updated_at: at,
            updated_by: String::new(),
        });
        match change.op {
            ChangeOp::Set => slot.value = change.value.clone(),
            ChangeOp::Append => match &mut slot.value {
                Value::Array(items) => items.push(change.value.clone()),
                _ => {
                    return Err(ModelError::TypeConflict {
                        scope: change.scope.to_string(),
                        key: change.key.clone(),
                    })
                }
            },
        }
        slot.version = change.version;
        slot.updated_at = at;
        slot.updated_by = change.actor.clone();
        Ok(())
    }

    pub fn scope(&self, scope: &ScopeRef) -> impl Iterator<Item = &Attribute> {
        self.cells.get(scope).into_iter().flat_map(|m| m.values())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.cells.values().flat_map(|m| m.values())
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_key(key: &str) -> Result<(), ModelError> {
    if key.is_empty() {
        Err(ModelError::EmptyKey)
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn commit(store: &mut AttributeStore, change: AttrChange) -> u64 {
        let v = change.version;
        store.apply(&change, 0).unwrap();
        v
    }

    #[test]
    fn versions_count_up_from_one() {
        let mut store = AttributeStore::new();
        let g = ScopeRef::game("g1");
        let c = store.plan_set(&g, "topology", json!("dynamic"), "server").unwrap();
        assert_eq!(commit(&mut store, c), 1);
        let c = store.plan_set(&g, "topology", json!("static"), "server").unwrap();
        assert_eq!(commit(&mut store, c), 2);
        assert_eq!(store.get(&g, "topology").unwrap().value, json!("static"));
        assert!(store.get(&g, "missing").is_none());
    }

    #[test]
    fn append_creates_list_then_extends() {
        let mut store = AttributeStore::new();
        let s = ScopeRef::stage("g1-r0-s0");
        for (n, want) in [(7, 1), (8, 2), (9, 3)] {
            let c = store.plan_append(&s, "xs", json!(n), "p1").unwrap();
            assert_eq!(commit(&mut store, c), want);
        }
        assert_eq!(store.get(&s, "xs").unwrap().value, json!([7, 8, 9]));
    }

    #[test]
    fn append_onto_scalar_conflicts() {
        let mut store = AttributeStore::new();
        let s = ScopeRef::game("g1");
        let c = store.plan_set(&s, "k", json!(1), "server").unwrap();
        commit(&mut store, c);
        let err = store.plan_append(&s, "k", json!(2), "server").unwrap_err();
        assert!(matches!(err, ModelError::TypeConflict { .. }));
    }

    #[test]
    fn empty_key_and_oversize_rejected() {
        let store = AttributeStore::new();
        let s = ScopeRef::game("g1");
        assert_eq!(
            store.plan_set(&s, "", json!(1), "server").unwrap_err(),
            ModelError::EmptyKey
        );
        let big = Value::String("x".repeat(MAX_VALUE_BYTES));
        assert!(matches!(
            store.plan_set(&s, "k", big, "server").unwrap_err(),
            ModelError::ValueTooLarge(_)
        ));
    }

    #[test]
    fn apply_rejects_gaps() {
        let mut store = AttributeStore::new();
        let s = ScopeRef::game("g1");
        let mut c = store.plan_set(&s, "k", json!(1), "server").unwrap();
        c.version = 3;
        assert!(matches!(
            store.apply(&c, 0).unwrap_err(),
            ModelError::VersionGap {
                expected: 1,
                found: 3,
                ..
            }
        ));
    }
}
