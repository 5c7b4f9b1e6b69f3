#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use vlab_core::sync::{MessageType, WireMessage};
use vlab_core::GameLayout;
use vlab_server::{Account, Accounts, Server, ServerConfig};

pub type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub const ADMIN: &str = "root";
pub const PASSWORD: &str = "correct horse";

pub fn accounts() -> Accounts {
    let mut a = Accounts::default();
    a.upsert(Account::new(ADMIN, PASSWORD, 1000));
    a
}

pub fn protocol(players: u32, games: u32) -> String {
    format!(
        "\
factors: [{{name: playerCount, type: integer, values: [{players}]}}]
treatments: [{{name: t, assignments: {{playerCount: {players}}}}}]
lobbies: [{{name: l, timeout: 600, strategy: fail}}]
batches: [{{name: b, assignment_method: complete, quotas: [{{treatment: t, count: {games}}}], lobby: l}}]
"
    )
}

pub async fn start(config: ServerConfig, layout: &str) -> Server {
    let layout = GameLayout::parse(layout).unwrap();
    Server::start(config, Arc::new(layout)).await.unwrap()
}

pub fn config() -> ServerConfig {
    ServerConfig {
        accounts: accounts(),
        ..ServerConfig::default()
    }
}

pub struct Api {
    pub base: String,
    pub http: reqwest::Client,
    pub token: String,
}

impl Api {
    pub async fn login(server: &Server) -> Self {
        let http = reqwest::Client::new();
        let base = server.api_url();
        let r: Value = http
            .post(format!("{base}/api/login"))
            .json(&json!({"name": ADMIN, "password": PASSWORD}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        Self {
            base,
            http,
            token: r["token"].as_str().unwrap().to_string(),
        }
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn post_yaml(&self, path: &str, yaml: &str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .body(yaml.to_string())
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, String) {
        let r = self
            .http
            .get(format!("{}{path}", self.base))
            .bearer_auth(&self.token)
            .send()
            .await
            .unwrap();
        let status = r.status().as_u16();
        (status, r.text().await.unwrap())
    }

    /// Imports a protocol, creates its first batch and starts it.
    pub async fn launch(&self, yaml: &str) -> String {
        let (s, v) = self.post_yaml("/api/protocols", yaml).await;
        assert_eq!(s, 201, "{v}");
        let proto = v["id"].as_str().unwrap().to_string();
        let (s, v) = self
            .post("/api/batches", json!({"protocol": proto, "batch": "b"}))
            .await;
        assert_eq!(s, 201, "{v}");
        let batch = v["id"].as_str().unwrap().to_string();
        let (s, v) = self.post(&format!("/api/batches/{batch}/start"), json!({})).await;
        assert_eq!(s, 200, "{v}");
        batch
    }
}

/// A hand-driven participant socket.
pub struct Player {
    pub ws: Socket,
    pub seq: u64,
    pub player_id: String,
    pub token: Option<String>,
}

impl Player {
    pub async fn send(&mut self, kind: MessageType, body: Value) {
        self.seq += 1;
        let text = WireMessage::new(kind, self.seq, body).encode();
        self.ws.send(Message::text(text)).await.unwrap();
    }

    /// Next frame of the given kind, answering pings on the way.
    pub async fn expect(&mut self, kind: MessageType) -> WireMessage {
        loop {
            let m = tokio::time::timeout(Duration::from_secs(10), self.ws.next())
                .await
                .expect("frame within 10 s")
                .expect("socket open")
                .unwrap();
            let Message::Text(t) = m else { continue };
            let w = WireMessage::decode(t.as_str()).unwrap();
            if w.kind == kind {
                return w;
            }
            if w.kind == MessageType::Heartbeat {
                let at = w.body["at"].clone();
                self.send(MessageType::HeartbeatAck, json!({"at": at})).await;
            }
        }
    }

    pub async fn hello(url: &str, body: Value) -> Self {
        let (ws, _) = connect_async(url).await.unwrap();
        let mut p = Player {
            ws,
            seq: 0,
            player_id: String::new(),
            token: None,
        };
        p.send(MessageType::Hello, body).await;
        let w = p.expect(MessageType::Welcome).await;
        p.player_id = w.body["player_id"].as_str().unwrap().to_string();
        p.token = w.body["token"].as_str().map(str::to_string);
        p
    }

    /// Connects, consents and finishes the intro.
    pub async fn join(url: &str, identifier: &str) -> Self {
        let mut p = Self::hello(url, json!({"identifier": identifier})).await;
        p.send(MessageType::Submit, json!({"flow": "consented"})).await;
        p.send(MessageType::Submit, json!({"flow": "intro_done"})).await;
        p
    }
}
