use crate::model::{ScopeKind, ScopeRef};
use crate::state::World;

use super::wire::AttrView;

/// Whether `viewer` may receive `(scope, key)`.
///
/// A player sees the game, round and stage scopes of the game they play in,
/// their own player and composite scopes, and other members' player and
/// composite scopes only for keys the game marked public.
pub fn can_see(world: &World, viewer: &str, scope: &ScopeRef, key: &str) -> bool {
    let Some(game) = world.scope_game(scope) else {
        return scope.kind == ScopeKind::Player && scope.id == viewer;
    };
    match scope.kind {
        ScopeKind::Game | ScopeKind::Round | ScopeKind::Stage => game.is_member(viewer),
        ScopeKind::Player => {
            scope.id == viewer
                || (game.is_member(viewer) && game.is_member(&scope.id) && game.public_keys.contains(key))
        }
        ScopeKind::PlayerRound | ScopeKind::PlayerStage => {
            scope.player.as_deref() == Some(viewer) || (game.is_member(viewer) && game.public_keys.contains(key))
        }
    }
}

/// Players who may receive a change on `(scope, key)`.
pub fn audience(world: &World, scope: &ScopeRef, key: &str) -> Vec<String> {
    let mut out: Vec<String> = match world.scope_game(scope) {
        Some(g) => g
            .player_ids
            .iter()
            .filter(|p| can_see(world, p, scope, key))
            .cloned()
            .collect(),
        None => Vec::new(),
    };
    if scope.kind == ScopeKind::Player && !out.contains(&scope.id) && world.players.contains_key(&scope.id) {
        out.push(scope.id.clone());
    }
    out
}

/// Every attribute `viewer` may see, at current versions.
pub fn visible_attributes(world: &World, viewer: &str) -> Vec<AttrView> {
    let mut scopes: Vec<ScopeRef> = vec![ScopeRef::player(viewer)];
    let game = world
        .players
        .get(viewer)
        .and_then(|p| p.current_game.as_ref())
        .and_then(|g| world.games.get(g))
        .filter(|g| g.is_member(viewer));
    if let Some(g) = game {
        scopes.push(ScopeRef::game(&g.id));
        for r in &g.rounds {
            scopes.push(ScopeRef::round(&r.id));
            for s in &r.stages {
                scopes.push(ScopeRef::stage(&s.id));
            }
        }
        for p in &g.player_ids {
            if p != viewer {
                scopes.push(ScopeRef::player(p));
            }
            for r in &g.rounds {
                scopes.push(ScopeRef::player_round(&r.id, p));
                for s in &r.stages {
                    scopes.push(ScopeRef::player_stage(&s.id, p));
                }
            }
        }
    }
    scopes
        .iter()
        .flat_map(|s| world.store.scope(s))
        .filter(|a| can_see(world, viewer, &a.scope, &a.key))
        .map(|a| AttrView {
            scope: a.scope.clone(),
            key: a.key.clone(),
            value: a.value.clone(),
            version: a.version,
        })
        .collect()
}
