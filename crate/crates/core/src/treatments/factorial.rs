use std::collections::BTreeMap;

use super::protocol::{render_level, validate_factor_defs, Diagnostic, FactorDef, ProtocolError, Treatment};
use crate::model::Value;

/// Full cross product of the non-fixed factors, each combined with `fixed`.
///
/// Factors are ordered by name; the first name varies slowest and levels
/// follow their declared order. Generated names list every factor as
/// `name=value`, joined by `;`.
pub fn expand_factorial(
    factors: &[FactorDef],
    fixed: &BTreeMap<String, Value>,
) -> Result<Vec<Treatment>, ProtocolError> {
    if factors.is_empty() {
        return Err(invalid("factors", "at least one factor is required", None));
    }
    validate_factor_defs(factors)?;
    for (name, value) in fixed {
        match factors.iter().find(|f| &f.name == name) {
            None => return Err(invalid("fixed", format!("unknown factor {name:?}"), Some(name))),
            Some(def) if !def.allows(value) => {
                return Err(invalid(
                    "fixed",
                    format!("value {value} is not an allowed level of factor {name:?}"),
                    Some(name),
                ))
            }
            Some(_) => {}
        }
    }

    let mut ordered: Vec<&FactorDef> = factors.iter().collect();
    ordered.sort_by(|a, b| a.name.cmp(&b.name));
    let varying: Vec<&FactorDef> = ordered
        .iter()
        .copied()
        .filter(|f| !fixed.contains_key(&f.name))
        .collect();

    let total: usize = varying.iter().map(|f| f.values.len()).product();
    let mut out = Vec::with_capacity(total);
    // Mixed-radix counter over the varying factors, last digit fastest.
    let mut digits = vec![0usize; varying.len()];
    for _ in 0..total {
        let mut assignments = fixed.clone();
        for (f, &d) in varying.iter().zip(&digits) {
            assignments.insert(f.name.clone(), f.values[d].clone());
        }
        let name = ordered
            .iter()
            .map(|f| format!("{}={}", f.name, render_level(&assignments[&f.name])))
            .collect::<Vec<_>>()
            .join(";");
        out.push(Treatment { name, assignments });

        for i in (0..digits.len()).rev() {
            digits[i] += 1;
            if digits[i] < varying[i].values.len() {
                break;
            }
            digits[i] = 0;
        }
    }
    Ok(out)
}

fn invalid(path: &str, message: impl Into<String>, needle: Option<&str>) -> ProtocolError {
    ProtocolError::Validation(vec![Diagnostic {
        path: path.to_string(),
        message: message.into(),
        needle: needle.map(str::to_string),
    }])
}
