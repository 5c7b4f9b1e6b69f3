//! Property tests for the platform invariants.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use serde_json::json;

use vlab_core::bots::{BotScript, Scenario};
use vlab_core::lifecycle::{check_hook_trace, GameLayout};
use vlab_core::model::{GameStatus, ScopeKind, ScopeRef};
use vlab_core::state::World;
use vlab_core::sync::can_see;
use vlab_core::treatments::{
    expand_factorial, parse_protocol, serialize_protocol, Assignment, AssignmentMethod, BatchAssigner, BatchSpec,
    FactorDef, FactorType, LobbyConfig, Protocol, Quota, TimeoutStrategy,
};

fn factor_defs() -> impl Strategy<Value = Vec<FactorDef>> {
    let levels = prop::collection::vec(prop::collection::btree_set("[a-z]{1,6}", 1..4), 0..3);
    let counts = prop::collection::btree_set(1u32..30, 1..3);
    (levels, counts).prop_map(|(sets, counts)| {
        let mut defs: Vec<FactorDef> = sets
            .into_iter()
            .enumerate()
            .map(|(i, l)| FactorDef {
                name: format!("factor{i}"),
                value_type: FactorType::String,
                values: l.into_iter().map(|v| json!(v)).collect(),
            })
            .collect();
        defs.push(FactorDef {
            name: "playerCount".into(),
            value_type: FactorType::Integer,
            values: counts.into_iter().map(|v| json!(v)).collect(),
        });
        defs
    })
}

proptest! {
    #[test]
    fn factorial_size_distinct_and_valid(defs in factor_defs()) {
        let ts = expand_factorial(&defs, &BTreeMap::new()).unwrap();
        let product: usize = defs.iter().map(|f| f.values.len()).product();
        prop_assert_eq!(ts.len(), product);
        let distinct: BTreeSet<String> = ts.iter().map(|t| serde_json::to_string(&t.assignments).unwrap()).collect();
        prop_assert_eq!(distinct.len(), product);
        let names: BTreeSet<&str> = ts.iter().map(|t| t.name.as_str()).collect();
        prop_assert_eq!(names.len(), product);
        let p = Protocol { factors: defs.clone(), treatments: ts, lobbies: Vec::new(), batches: Vec::new() };
        prop_assert!(p.validate().is_ok(), "{:?}", p.validate());
    }

    #[test]
    fn protocol_round_trips(defs in factor_defs(), timeout in 1u32..1000, pick in 1usize..4, simple in any::<bool>()) {
        let ts = expand_factorial(&defs, &BTreeMap::new()).unwrap();
        let quotas = ts.iter().take(pick).map(|t| Quota { treatment: t.name.clone(), count: 2 }).collect();
        let p = Protocol {
            factors: defs,
            treatments: ts,
            lobbies: vec![LobbyConfig { name: "l".into(), timeout, strategy: TimeoutStrategy::StartAnyway, extend_limit: None }],
            batches: vec![BatchSpec {
                name: "b".into(),
                assignment_method: if simple { AssignmentMethod::Simple } else { AssignmentMethod::Complete },
                quotas,
                lobby: "l".into(),
                seed: Some(timeout as u64),
            }],
        };
        let text = serialize_protocol(&p);
        let back = parse_protocol(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(serialize_protocol(&back), text);
    }

    #[test]
    fn assignment_conserves_seats(caps in prop::collection::vec(1u32..6, 1..6), arrivals in 0usize..40, seed in any::<u64>(), simple in any::<bool>()) {
        let method = if simple { AssignmentMethod::Simple } else { AssignmentMethod::Complete };
        let mut a = BatchAssigner::new(method, seed, &caps);
        let mut filled = vec![0u32; caps.len()];
        let mut seen = BTreeSet::new();
        for i in 0..arrivals {
            match a.assign_player(&format!("p{i}")).unwrap() {
                Assignment::Slot { game, position } => {
                    prop_assert_eq!(position as u32, filled[game]);
                    filled[game] += 1;
                    prop_assert!(seen.insert((game, position)));
                    if !simple {
                        // game k+1 gets nobody until game k is full
                        prop_assert!(filled[..game].iter().zip(&caps).all(|(f, c)| f == c));
                    }
                }
                Assignment::Waitlisted => prop_assert!(filled.iter().zip(&caps).all(|(f, c)| f == c)),
            }
            prop_assert!(filled.iter().zip(&caps).all(|(f, c)| f <= c));
        }
        prop_assert!(a.assign_player("p0").is_err() || arrivals == 0);
    }
}

/// Visibility rule computed from the roster and ids alone.
fn oracle_sees(world: &World, viewer: &str, scope: &ScopeRef, key: &str) -> bool {
    let owner = match scope.kind {
        ScopeKind::Player => Some(scope.id.as_str()),
        ScopeKind::PlayerRound | ScopeKind::PlayerStage => scope.player.as_deref(),
        _ => None,
    };
    if owner == Some(viewer) {
        return true;
    }
    let game_id = match scope.kind {
        ScopeKind::Player => world
            .games
            .values()
            .find(|g| g.player_ids.iter().any(|p| p == &scope.id))
            .map(|g| g.id.clone()),
        _ => Some(scope.id.split('-').next().unwrap().to_string()),
    };
    let Some(g) = game_id.and_then(|id| world.games.get(&id)) else {
        return false;
    };
    let member = g.player_ids.iter().any(|p| p == viewer);
    match owner {
        None => member,
        Some(_) => member && g.public_keys.contains(key),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn random_scenarios_hold_every_invariant(
        seed in any::<u64>(),
        players in 1u32..4,
        games in 1u32..3,
        rounds in 1usize..3,
        lat in (0u64..30, 0u64..80),
        fuzz in 0usize..40,
    ) {
        let protocol = format!(
            "factors: [{{name: playerCount, type: integer, values: [{players}]}}]\ntreatments: [{{name: t, assignments: {{playerCount: {players}}}}}]\nlobbies: [{{name: l, timeout: 120, strategy: fail}}]\nbatches: [{{name: b, assignment_method: simple, quotas: [{{treatment: t, count: {games}}}], lobby: l}}]\n"
        );
        let layout = GameLayout::parse(&format!(
            "rounds: {rounds}\nstages:\n  - {{name: a, duration: 30, submit_advance: true}}\n  - {{name: b, duration: 5}}\npublic_keys: [k0]\n"
        )).unwrap();
        let script = BotScript::parse(&format!(
            "bots:\n  - name: w\n    count: {}\n    arrive_within_ms: 3000\n    stages:\n      - stage: a\n        actions: [{{fuzz: {{count: {fuzz}, keys: [k0, k1], scopes: [game, round, player, player_round, player_stage], append_ratio: 0.4, spread_ms: 4000}}}}, {{wait: 5000}}, submit]\n",
            players * games
        )).unwrap();
        let (lo, hi) = (lat.0.min(lat.1), lat.0.max(lat.1));
        let report = Scenario::new(protocol, script, Arc::new(layout)).seed(seed).latency(lo, hi).run().unwrap();
        prop_assert!(report.problems().is_empty(), "{:?}", report.problems());
        let lc = common::lifecycle_violations(&report.journal);
        prop_assert!(lc.is_empty(), "{:?}", lc);
        for g in &report.games {
            prop_assert!(g.status.is_terminal());
            prop_assert!(g.players.len() <= players as usize);
            let trace = report.hook_trace(&g.id);
            prop_assert!(check_hook_trace(trace, g.status == GameStatus::Cancelled).is_ok());
        }
        let seated: Vec<&String> = report.games.iter().flat_map(|g| &g.players).collect();
        let unique: BTreeSet<&&String> = seated.iter().collect();
        prop_assert_eq!(seated.len(), unique.len());
        let world = &report.world;
        for a in world.store.iter() {
            for p in world.players.keys() {
                prop_assert_eq!(
                    can_see(world, p, &a.scope, &a.key),
                    oracle_sees(world, p, &a.scope, &a.key),
                    "{} on {}/{}", p, a.scope, a.key
                );
            }
        }
    }
}
