use serde::{Deserialize, Serialize};

/// Where a participant is in the consent → intro → lobby → game → outro flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Consent,
    Intro,
    Lobby,
    Game,
    Outro,
    Exited,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Consent => "consent",
            Phase::Intro => "intro",
            Phase::Lobby => "lobby",
            Phase::Game => "game",
            Phase::Outro => "outro",
            Phase::Exited => "exited",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowEvent {
    Consented,
    IntroDone,
    GameAssigned,
    GameOver,
    SurveyDone,
}

impl FlowEvent {
    /// Events a client may send; the others are raised by the engine.
    pub fn client_may_send(self) -> bool {
        matches!(
            self,
            FlowEvent::Consented | FlowEvent::IntroDone | FlowEvent::SurveyDone
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("flow violation: {event:?} is not legal in phase {phase:?}")]
pub struct FlowViolation {
    pub phase: Phase,
    pub event: FlowEvent,
}

/// Participant flow state as exposed to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerFlowState {
    pub phase: Phase,
    pub intro_step: Option<u32>,
}

/// Advances exactly one step. The lobby→outro jump on lobby timeout is not
/// an event; the engine performs it directly.
pub fn advance_flow(phase: Phase, event: FlowEvent) -> Result<Phase, FlowViolation> {
    let next = match (phase, event) {
        (Phase::Consent, FlowEvent::Consented) => Phase::Intro,
        (Phase::Intro, FlowEvent::IntroDone) => Phase::Lobby,
        (Phase::Lobby, FlowEvent::GameAssigned) => Phase::Game,
        (Phase::Game, FlowEvent::GameOver) => Phase::Outro,
        (Phase::Outro, FlowEvent::SurveyDone) => Phase::Exited,
        _ => return Err(FlowViolation { phase, event }),
    };
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn happy_path_in_order() {
        let mut p = Phase::Consent;
        for (e, want) in [
            (FlowEvent::Consented, Phase::Intro),
            (FlowEvent::IntroDone, Phase::Lobby),
            (FlowEvent::GameAssigned, Phase::Game),
            (FlowEvent::GameOver, Phase::Outro),
            (FlowEvent::SurveyDone, Phase::Exited),
        ] {
            p = advance_flow(p, e).unwrap();
            assert_eq!(p, want);
        }
    }

    #[test]
    fn survey_in_lobby_is_a_violation() {
        assert_eq!(
            advance_flow(Phase::Lobby, FlowEvent::SurveyDone).unwrap_err(),
            FlowViolation {
                phase: Phase::Lobby,
                event: FlowEvent::SurveyDone
            }
        );
    }

    #[test]
    fn no_event_skips_a_phase() {
        let events = [
            FlowEvent::Consented,
            FlowEvent::IntroDone,
            FlowEvent::GameAssigned,
            FlowEvent::GameOver,
            FlowEvent::SurveyDone,
        ];
        let phases = [
            Phase::Consent,
            Phase::Intro,
            Phase::Lobby,
            Phase::Game,
            Phase::Outro,
            Phase::Exited,
        ];
        for (i, &p) in phases.iter().enumerate() {
            for &e in &events {
                if let Ok(next) = advance_flow(p, e) {
                    assert_eq!(next, phases[i + 1]);
                }
            }
        }
    }
}
