#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use vlab_core::events::Event;
use vlab_core::journal::parse_journal;
use vlab_core::lifecycle::Phase;
use vlab_core::treatments::{
    expand_factorial, serialize_protocol, AssignmentMethod, BatchSpec, FactorDef, FactorType, LobbyConfig, Protocol,
    Quota, TimeoutStrategy,
};

/// Lifecycle invariants that can be read straight off a journal: the cursor
/// only moves forward, each stage ends once, and every move to the outro
/// carries a terminal reason.
pub fn lifecycle_violations(journal: &str) -> Vec<String> {
    let parsed = parse_journal(journal).expect("journal parses");
    let mut out = Vec::new();
    let mut cursor: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut open: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut ended: BTreeSet<(String, usize, usize)> = BTreeSet::new();
    for r in &parsed.records {
        match &r.body {
            Event::StageStarted { game, round, stage, .. } => {
                if let Some(prev) = cursor.get(game) {
                    if (*round, *stage) <= *prev {
                        out.push(format!("{game}: cursor went from {prev:?} to {:?}", (round, stage)));
                    }
                }
                if let Some(o) = open.get(game) {
                    out.push(format!(
                        "{game}: stage {o:?} still open when {:?} started",
                        (round, stage)
                    ));
                }
                cursor.insert(game.clone(), (*round, *stage));
                open.insert(game.clone(), (*round, *stage));
            }
            Event::StageEnded { game, round, stage, .. } => {
                if !ended.insert((game.clone(), *round, *stage)) {
                    out.push(format!("{game}: stage {:?} ended twice", (round, stage)));
                }
                if open.remove(game) != Some((*round, *stage)) {
                    out.push(format!("{game}: ended {:?} which was not open", (round, stage)));
                }
            }
            Event::PlayerPhase {
                player,
                to: Phase::Outro,
                reason,
                ..
            } if reason.is_none() => {
                out.push(format!("{player} reached the outro without a reason"));
            }
            _ => {}
        }
    }
    out
}

/// A protocol holding the full cross product of the given factors plus a
/// fixed group size, with one batch that runs each treatment once.
pub fn factorial_protocol(factors: &[(&str, &[&str])], players: u32) -> String {
    let mut defs: Vec<FactorDef> = factors
        .iter()
        .map(|(name, levels)| FactorDef {
            name: name.to_string(),
            value_type: FactorType::String,
            values: levels.iter().map(|l| serde_json::json!(l)).collect(),
        })
        .collect();
    defs.push(FactorDef {
        name: "playerCount".into(),
        value_type: FactorType::Integer,
        values: vec![serde_json::json!(players)],
    });
    let treatments = expand_factorial(&defs, &BTreeMap::new()).expect("valid factors");
    let quotas = treatments
        .iter()
        .map(|t| Quota {
            treatment: t.name.clone(),
            count: 1,
        })
        .collect();
    let protocol = Protocol {
        factors: defs,
        treatments,
        lobbies: vec![LobbyConfig {
            name: "l".into(),
            timeout: 600,
            strategy: TimeoutStrategy::Fail,
            extend_limit: None,
        }],
        batches: vec![BatchSpec {
            name: "all".into(),
            assignment_method: AssignmentMethod::Complete,
            quotas,
            lobby: "l".into(),
            seed: None,
        }],
    };
    serialize_protocol(&protocol)
}
