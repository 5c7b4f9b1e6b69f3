//! Scripted headless participants and the in-process scenario runner.

mod client;
mod harness;
mod script;

pub use client::{bot_identifier, BotClient, BotOutput, BotStats};
pub use harness::{
    run_scenario, BotReport, Direction, GameOutcome, Scenario, ScenarioError, ScenarioReport, TranscriptEntry,
};
pub use script::{Action, BotGroup, BotScript, FuzzAction, Generator, ScriptError, StageRule, ValueGen, WriteAction};
