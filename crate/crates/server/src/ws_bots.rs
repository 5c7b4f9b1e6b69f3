//! Runs scripted bots against a live server over real WebSockets, one task
//! per bot, on the wall clock.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use vlab_core::bots::{BotClient, BotOutput, BotScript, BotStats};
use vlab_core::lifecycle::Phase;
use vlab_core::model::ScopeRef;

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// What one bot saw by the time it stopped.
#[derive(Debug, Clone)]
pub struct WsBotOutcome {
    pub identifier: String,
    pub player_id: Option<String>,
    pub token: Option<String>,
    pub phase: Option<Phase>,
    pub finished: bool,
    pub stats: BotStats,
    pub view: BTreeMap<(ScopeRef, String), (Value, u64)>,
}

enum Wake {
    Frame(String),
    Closed,
    Timer,
}

async fn apply(bot: &mut BotClient, ws: &mut Option<Socket>, url: &str, outs: Vec<BotOutput>, now: impl Fn() -> u64) {
    let mut pending: VecDeque<BotOutput> = outs.into();
    while let Some(o) = pending.pop_front() {
        match o {
            BotOutput::Send(text) => {
                let failed = match ws.as_mut() {
                    Some(w) => w.send(Message::text(text)).await.is_err(),
                    None => false,
                };
                if failed {
                    *ws = None;
                    bot.on_closed(now());
                }
            }
            BotOutput::Close => {
                if let Some(mut w) = ws.take() {
                    let _ = w.close(None).await;
                }
                bot.on_closed(now());
            }
            BotOutput::Connect => match connect_async(url).await {
                Ok((w, _)) => {
                    *ws = Some(w);
                    pending.extend(bot.on_connected(now()));
                }
                Err(e) => {
                    bot.stats.errors.push(format!("connect: {e}"));
                }
            },
        }
    }
}

async fn drive(mut bot: BotClient, url: Arc<str>, start: Instant, limit: Instant) -> WsBotOutcome {
    let now = move || start.elapsed().as_millis() as u64;
    let arrive = start + Duration::from_millis(bot.arrival_ms());
    tokio::time::sleep_until(arrive.into()).await;
    let mut ws: Option<Socket> = None;
    apply(&mut bot, &mut ws, &url, vec![BotOutput::Connect], now).await;
    while !bot.finished() && Instant::now() < limit {
        let deadline = bot
            .next_wake()
            .map(|ms| start + Duration::from_millis(ms))
            .unwrap_or(limit)
            .min(limit);
        let wake = match ws.as_mut() {
            Some(w) => tokio::select! {
                m = w.next() => match m {
                    Some(Ok(Message::Text(t))) => Wake::Frame(t.to_string()),
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => Wake::Closed,
                    Some(Ok(_)) => continue,
                },
                _ = tokio::time::sleep_until(deadline.into()) => Wake::Timer,
            },
            None => {
                tokio::time::sleep_until(deadline.into()).await;
                Wake::Timer
            }
        };
        let outs = match wake {
            Wake::Frame(text) => bot.on_frame(&text, now()),
            Wake::Closed => {
                ws = None;
                bot.on_closed(now());
                Vec::new()
            }
            Wake::Timer => bot.poll(now()),
        };
        apply(&mut bot, &mut ws, &url, outs, now).await;
    }
    if let Some(mut w) = ws.take() {
        let _ = w.close(None).await;
    }
    WsBotOutcome {
        identifier: bot.identifier.clone(),
        player_id: bot.player_id().map(str::to_string),
        token: bot.token().map(str::to_string),
        phase: bot.phase(),
        finished: bot.finished(),
        stats: bot.stats.clone(),
        view: bot.view().clone(),
    }
}

/// Spawns every bot in the script against `url` and waits until each has
/// finished or `limit` has passed.
pub async fn run_ws_bots(url: &str, script: &BotScript, seed: u64, limit: Duration) -> Vec<WsBotOutcome> {
    let start = Instant::now();
    let url: Arc<str> = url.into();
    let mut handles = Vec::new();
    for g in &script.bots {
        let plan = Arc::new(g.clone());
        for i in 0..g.count {
            let bot = BotClient::new(plan.clone(), i, seed);
            handles.push(tokio::spawn(drive(bot, url.clone(), start, start + limit)));
        }
    }
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        if let Ok(o) = h.await {
            out.push(o);
        }
    }
    out
}
