//! Game lifecycle: seating, lobbies, rounds and stages, disconnects.

use crate::events::Event;
use crate::lifecycle::{CallbackResult, DisconnectAction, DisconnectMode, FlowEvent, HookKind, LobbyAction, Phase};
use crate::model::{id_order, BatchStatus, Cursor, ExitReason, GameStatus, StageEndReason};
use crate::treatments::{choose_seat, Assignment, Seats};

use super::{Engine, EngineError, GameCtx, Request};

impl Engine {
    /// Runs experiment code against a game. Returns whether the game is
    /// still live afterwards; a failing callback cancels the game.
    pub(crate) fn run_callback(
        &mut self,
        game: &str,
        kind: HookKind,
        f: impl FnOnce(&mut GameCtx<'_>) -> CallbackResult,
    ) -> Result<bool, EngineError> {
        let (result, requests) = {
            let mut ctx = GameCtx::new(self, game);
            let result = f(&mut ctx);
            (result, ctx.requests)
        };
        if let Some(h) = &self.halted {
            return Err(EngineError::Halted(h.clone()));
        }
        match result {
            Err(e) => {
                tracing::warn!(game, hook = kind.short(), error = %e, "callback failed; cancelling game");
                self.commit(Event::HookFailed {
                    game: game.to_string(),
                    hook: kind,
                    error: e.to_string(),
                })?;
                self.cancel_game(game, &format!("callback_error: {e}"), ExitReason::Cancelled)?;
                Ok(false)
            }
            Ok(()) => {
                self.deferred
                    .extend(requests.into_iter().map(|r| (game.to_string(), r)));
                Ok(self.world.games.get(game).is_some_and(|g| g.is_live()))
            }
        }
    }

    fn run_hook(
        &mut self,
        game: &str,
        hook: HookKind,
        round: Option<usize>,
        stage: Option<usize>,
        f: impl FnOnce(&mut GameCtx<'_>) -> CallbackResult,
    ) -> Result<bool, EngineError> {
        self.commit(Event::Hook {
            game: game.to_string(),
            hook,
            round,
            stage,
        })?;
        self.run_callback(game, hook, f)
    }

    pub(crate) fn run_request(&mut self, game: &str, req: Request) {
        let live = self.world.games.get(game).is_some_and(|g| g.is_live());
        if !live {
            return;
        }
        let result = match req {
            Request::EndStage { round, stage } => {
                let g = &self.world.games[game];
                if g.cursor == (Cursor::At { round, stage }) {
                    self.end_stage(game, StageEndReason::Policy)
                } else {
                    Ok(())
                }
            }
            Request::Cancel { reason } => self.cancel_game(game, &reason, ExitReason::Custom),
            Request::RemovePlayer { player } => self.remove_from_roster(game, &player),
        };
        if let Err(e) = result {
            tracing::warn!(game, error = %e, "deferred request failed");
        }
    }

    // ---- seating and lobbies --------------------------------------------

    /// Puts a player who finished the intro into a lobby, or on the waitlist.
    pub(crate) fn seat(&mut self, player: &str) -> Result<(), EngineError> {
        let p = self.world.player(player)?;
        if p.phase != Phase::Lobby || p.retired || p.dropped {
            return Ok(());
        }
        if let Some(g) = p.current_game.as_ref().and_then(|g| self.world.games.get(g)) {
            if !g.status.is_terminal() {
                return Ok(());
            }
        }
        let mut batches: Vec<String> = self
            .world
            .batches
            .values()
            .filter(|b| b.status == BatchStatus::Running)
            .map(|b| b.id.clone())
            .collect();
        batches.sort_by(|a, b| id_order(a, b));
        for b in batches {
            let batch = &self.world.batches[&b];
            let seats: Vec<Seats> = batch
                .games
                .iter()
                .map(|g| {
                    let g = &self.world.games[g];
                    Seats {
                        capacity: g.player_count(),
                        filled: g.lobby.present(),
                        open: g.status == GameStatus::Pending,
                    }
                })
                .collect();
            let seed = batch.spec.seed.unwrap_or_default();
            if let Assignment::Slot { game, position } =
                choose_seat(batch.spec.assignment_method, &seats, seed, batch.arrivals)
            {
                let game = batch.games[game].clone();
                self.commit(Event::LobbyJoined {
                    game: game.clone(),
                    player: player.to_string(),
                    position,
                })?;
                return self.process_lobby(&game);
            }
        }
        if !self.world.waitlist.iter().any(|w| w == player) {
            self.commit(Event::Waitlisted {
                player: player.to_string(),
            })?;
        }
        Ok(())
    }

    pub(crate) fn drain_waitlist(&mut self) -> Result<(), EngineError> {
        for p in self.world.waitlist.clone() {
            self.seat(&p)?;
        }
        Ok(())
    }

    pub(crate) fn process_lobby(&mut self, game: &str) -> Result<(), EngineError> {
        let g = self.world.game(game)?;
        if g.status != GameStatus::Pending {
            return Ok(());
        }
        let action = g.lobby.tick(&g.lobby_config, g.player_count(), self.now);
        let members = g.lobby.members.clone();
        match action {
            LobbyAction::None => Ok(()),
            LobbyAction::Launch => self.start_game(game, members),
            LobbyAction::TimeoutStartAnyway => {
                self.commit(Event::LobbyTimedOut {
                    game: game.to_string(),
                    action,
                })?;
                self.start_game(game, members)
            }
            LobbyAction::TimeoutExtend => {
                self.commit(Event::LobbyTimedOut {
                    game: game.to_string(),
                    action,
                })?;
                self.commit(Event::LobbyExtended { game: game.to_string() })
            }
            LobbyAction::TimeoutFail => {
                self.commit(Event::LobbyTimedOut {
                    game: game.to_string(),
                    action,
                })?;
                self.cancel_game(game, "lobby_timeout", ExitReason::LobbyTimeout)
            }
        }
    }

    // ---- running games -----------------------------------------------------

    fn start_game(&mut self, game: &str, players: Vec<String>) -> Result<(), EngineError> {
        self.commit(Event::GameStarted {
            game: game.to_string(),
            players: players.clone(),
        })?;
        for p in &players {
            self.commit(Event::PlayerPhase {
                player: p.clone(),
                from: Phase::Lobby,
                to: Phase::Game,
                event: Some(FlowEvent::GameAssigned),
                reason: None,
            })?;
        }
        let cbs = self.callbacks.clone();
        if !self.run_hook(game, HookKind::GameInit, None, None, |ctx| cbs.on_game_init(ctx))? {
            return Ok(());
        }
        if self.world.games[game].rounds.is_empty() {
            self.commit(Event::HookFailed {
                game: game.to_string(),
                hook: HookKind::GameInit,
                error: "game init added no rounds".into(),
            })?;
            return self.cancel_game(game, "no_rounds", ExitReason::Cancelled);
        }
        self.enter_round(game, 0)
    }

    fn enter_round(&mut self, game: &str, round: usize) -> Result<(), EngineError> {
        let cbs = self.callbacks.clone();
        if !self.run_hook(game, HookKind::RoundStart, Some(round), None, |ctx| {
            cbs.on_round_start(ctx, round)
        })? {
            return Ok(());
        }
        self.enter_stage(game, round, 0)
    }

    fn enter_stage(&mut self, game: &str, round: usize, stage: usize) -> Result<(), EngineError> {
        let duration = self.world.games[game].rounds[round].stages[stage].duration;
        self.commit(Event::StageStarted {
            game: game.to_string(),
            round,
            stage,
            deadline: duration.map(|d| self.now + u64::from(d) * 1000),
        })?;
        let cbs = self.callbacks.clone();
        self.run_hook(game, HookKind::StageStart, Some(round), Some(stage), |ctx| {
            cbs.on_stage_start(ctx, round, stage)
        })?;
        Ok(())
    }

    /// Closes the current stage and moves the game on.
    pub(crate) fn end_stage(&mut self, game: &str, reason: StageEndReason) -> Result<(), EngineError> {
        let g = self.world.game(game)?;
        if g.status != GameStatus::Running {
            return Ok(());
        }
        let Cursor::At { round, stage } = g.cursor else {
            return Ok(());
        };
        if g.current_stage().is_some_and(|s| s.ended.is_some()) {
            return Ok(());
        }
        let cbs = self.callbacks.clone();
        if !self.run_hook(game, HookKind::StageEnd, Some(round), Some(stage), |ctx| {
            cbs.on_stage_end(ctx, round, stage)
        })? {
            return Ok(());
        }
        self.commit(Event::StageEnded {
            game: game.to_string(),
            round,
            stage,
            reason,
        })?;
        if stage + 1 < self.world.games[game].rounds[round].stages.len() {
            return self.enter_stage(game, round, stage + 1);
        }
        if !self.run_hook(game, HookKind::RoundEnd, Some(round), None, |ctx| {
            cbs.on_round_end(ctx, round)
        })? {
            return Ok(());
        }
        if round + 1 < self.world.games[game].rounds.len() {
            return self.enter_round(game, round + 1);
        }
        if !self.run_hook(game, HookKind::GameEnd, None, None, |ctx| cbs.on_game_end(ctx))? {
            return Ok(());
        }
        self.commit(Event::GameEnded { game: game.to_string() })?;
        self.send_to_outro(game, ExitReason::Completed)?;
        self.check_batch_end(game)
    }

    fn send_to_outro(&mut self, game: &str, reason: ExitReason) -> Result<(), EngineError> {
        let players: Vec<String> = self.world.games[game]
            .player_ids
            .iter()
            .filter(|p| {
                let p = &self.world.players[*p];
                p.phase == Phase::Game && !p.dropped
            })
            .cloned()
            .collect();
        for p in players {
            self.commit(Event::PlayerPhase {
                player: p,
                from: Phase::Game,
                to: Phase::Outro,
                event: Some(FlowEvent::GameOver),
                reason: Some(reason),
            })?;
        }
        Ok(())
    }

    /// Stage submission. Returns whether every active player has submitted.
    pub(crate) fn submit(&mut self, game: &str, player: &str, stage_id: &str) -> Result<bool, EngineError> {
        let g = self.world.game(game)?;
        match g.status {
            GameStatus::Pending => return Err(EngineError::BadRequest(format!("game {game} has not started"))),
            GameStatus::Paused => return Err(EngineError::GamePaused(game.to_string())),
            GameStatus::Ended | GameStatus::Cancelled => {
                return Err(crate::model::ModelError::GameClosed(game.to_string()).into())
            }
            GameStatus::Running => {}
        }
        let Some(stage) = g.current_stage() else {
            return Err(EngineError::BadRequest(format!("game {game} has no current stage")));
        };
        if stage.id != stage_id {
            return Err(EngineError::StaleStage {
                current: stage.id.clone(),
                got: stage_id.to_string(),
            });
        }
        if !g.active.contains(player) {
            return Err(EngineError::Forbidden(format!("{player} is not on the active roster")));
        }
        let complete = |g: &crate::model::Game| {
            let s = g.current_stage().expect("checked");
            g.active.iter().all(|p| s.submitted.contains(p))
        };
        if stage.submitted.contains(player) {
            return Ok(complete(g));
        }
        let Cursor::At { round, stage: s } = g.cursor else {
            unreachable!("current stage implies a cursor")
        };
        let advance = stage.submit_advance;
        self.commit(Event::Submitted {
            game: game.to_string(),
            round,
            stage: s,
            player: player.to_string(),
        })?;
        let done = complete(&self.world.games[game]);
        if done && advance {
            self.end_stage(game, StageEndReason::AllSubmitted)?;
        }
        Ok(done)
    }

    /// Ends a game early. Remaining players go to the outro with `reason`.
    pub(crate) fn cancel_game(&mut self, game: &str, why: &str, reason: ExitReason) -> Result<(), EngineError> {
        let g = self.world.game(game)?;
        if g.status.is_terminal() {
            return Ok(());
        }
        let lobby = if g.status == GameStatus::Pending {
            g.lobby.members.clone()
        } else {
            Vec::new()
        };
        self.commit(Event::GameCancelled {
            game: game.to_string(),
            reason: why.to_string(),
        })?;
        for p in lobby {
            if self.world.players[&p].phase == Phase::Lobby {
                self.commit(Event::PlayerPhase {
                    player: p,
                    from: Phase::Lobby,
                    to: Phase::Outro,
                    event: None,
                    reason: Some(reason),
                })?;
            }
        }
        self.send_to_outro(game, reason)?;
        self.check_batch_end(game)
    }

    pub(crate) fn check_batch_end(&mut self, game: &str) -> Result<(), EngineError> {
        let batch = self.world.games[game].batch_id.clone();
        let b = &self.world.batches[&batch];
        if b.status == BatchStatus::Running && b.games.iter().all(|g| self.world.games[g].status.is_terminal()) {
            self.commit(Event::BatchEnded { batch })?;
        }
        Ok(())
    }

    fn remove_from_roster(&mut self, game: &str, player: &str) -> Result<(), EngineError> {
        let g = self.world.game(game)?;
        if !g.active.contains(player) {
            return Ok(());
        }
        self.commit(Event::RosterRemoved {
            game: game.to_string(),
            player: player.to_string(),
        })?;
        let g = &self.world.games[game];
        if g.active.is_empty() {
            return self.cancel_game(game, "roster_empty", ExitReason::Cancelled);
        }
        if let Some(s) = g.current_stage() {
            if g.status == GameStatus::Running
                && s.submit_advance
                && s.ended.is_none()
                && g.active.iter().all(|p| s.submitted.contains(p))
            {
                return self.end_stage(game, StageEndReason::AllSubmitted);
            }
        }
        Ok(())
    }

    // ---- disconnects ---------------------------------------------------------

    /// A player stayed dead through the grace period.
    pub(crate) fn on_dead(&mut self, player: &str) -> Result<DisconnectAction, EngineError> {
        let p = self.world.player(player)?;
        let Some(game) = p.current_game.clone() else {
            return Ok(DisconnectAction::Ignored);
        };
        let g = self.world.game(&game)?;
        match (p.phase, g.status) {
            (Phase::Lobby, GameStatus::Pending) => {
                self.commit(Event::LobbyLeft {
                    game,
                    player: player.to_string(),
                })?;
                self.commit(Event::PlayerDropped {
                    player: player.to_string(),
                })?;
                Ok(DisconnectAction::Removed)
            }
            (Phase::Game, GameStatus::Running | GameStatus::Paused) if g.active.contains(player) => {
                self.apply_disconnect_policy(&game, player)
            }
            _ => Ok(DisconnectAction::Ignored),
        }
    }

    fn apply_disconnect_policy(&mut self, game: &str, player: &str) -> Result<DisconnectAction, EngineError> {
        let policy = self.callbacks.disconnect_policy(&self.world.games[game].treatment);
        tracing::info!(game, player, mode = ?policy.mode, "applying disconnect policy");
        match policy.mode {
            DisconnectMode::ContinueWithout => {
                self.remove_from_roster(game, player)?;
                Ok(DisconnectAction::Removed)
            }
            DisconnectMode::CancelTrial => {
                self.commit(Event::PlayerDropped {
                    player: player.to_string(),
                })?;
                self.cancel_game(game, "player_disconnected", ExitReason::Cancelled)?;
                Ok(DisconnectAction::Cancelled)
            }
            DisconnectMode::PauseTrial => {
                let g = &self.world.games[game];
                let remaining_ms = match &g.paused {
                    Some(p) => p.remaining_ms,
                    None => g
                        .current_stage()
                        .and_then(|s| s.deadline)
                        .map(|d| d.saturating_sub(self.now)),
                };
                self.commit(Event::GamePaused {
                    game: game.to_string(),
                    player: player.to_string(),
                    remaining_ms,
                })?;
                Ok(DisconnectAction::Paused)
            }
            DisconnectMode::Custom => {
                let cbs = self.callbacks.clone();
                let who = player.to_string();
                self.run_callback(game, HookKind::Disconnect, |ctx| cbs.on_disconnect(ctx, &who))?;
                Ok(DisconnectAction::Custom)
            }
        }
    }

    /// A player came back; lift the pause once nobody else is missing.
    pub(crate) fn maybe_resume(&mut self, player: &str) -> Result<(), EngineError> {
        let Some(game) = self.world.player(player)?.current_game.clone() else {
            return Ok(());
        };
        let g = &self.world.games[&game];
        let Some(pause) = &g.paused else {
            return Ok(());
        };
        if !pause.waiting_for.contains(player) {
            return Ok(());
        }
        if pause.waiting_for.len() > 1 {
            return self.commit(Event::PauseCleared {
                game,
                player: player.to_string(),
            });
        }
        let deadline = pause.remaining_ms.map(|r| self.now + r);
        self.commit(Event::GameResumed { game, deadline })
    }
}
