#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use kgdialog_cli::service::{router, AppState, ServiceConfig};
use kgdialog_core::bundle::{ModelBundle, ModelKind, Responder};
use kgdialog_core::codec::TextCodec;
use kgdialog_core::corpus::KnowledgeBase;
use kgdialog_core::generative_dialogue::{GenerativeConfig, GenerativeModel};
use kgdialog_core::retriever::{IndexConfig, InvertedIndex};
use kgdialog_core::toy::toy;
use kgdialog_nn::{ParamStore, TransformerConfig};
use serde_json::{json, Value};

pub fn toy_kb_index() -> (KnowledgeBase, InvertedIndex) {
    let (kb, _) = toy().unwrap();
    let index = InvertedIndex::build(&kb, IndexConfig { bucket_count: 1 << 16, ngram_order: 2 }).unwrap();
    (kb, index)
}

/// An untrained end-to-end bundle with short beams, enough for API tests.
pub fn untrained_bundle() -> ModelBundle {
    let (kb, episodes) = toy().unwrap();
    let codec = TextCodec::train(&kb, &episodes, 300, 48).unwrap();
    let cfg = TransformerConfig {
        layers: 1,
        heads: 2,
        model_dim: 16,
        ffn_dim: 32,
        max_len: codec.max_len,
        vocab_size: codec.vocab_size(),
        dropout_rate: 0.0,
        seed: 9,
    };
    let mut store = ParamStore::new();
    GenerativeModel::init(&mut store, &cfg).unwrap();
    let gen = GenerativeConfig { beam_size: 2, max_decode_len: 8, ..Default::default() };
    ModelBundle::new(ModelKind::Generative { config: gen }, codec, cfg, store)
}

pub struct Server {
    pub base: String,
    pub client: reqwest::Client,
}

/// Binds the service to an ephemeral port on the current runtime.
pub async fn spawn(bundle: ModelBundle, cfg: ServiceConfig) -> Server {
    let (kb, index) = toy_kb_index();
    let state = Arc::new(AppState::new(Responder::new(bundle).unwrap(), kb, index, cfg));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Server { base: format!("http://{addr}"), client: reqwest::Client::new() }
}

impl Server {
    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    pub async fn create(&self, topic: &str) -> String {
        let (s, v) = self.post("/api/session", json!({ "topic": topic })).await;
        assert_eq!(s, 200, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    pub async fn say(&self, id: &str, text: &str) -> Value {
        let (s, v) = self.post(&format!("/api/session/{id}/message"), json!({ "text": text })).await;
        assert_eq!(s, 200, "{v}");
        v
    }

    pub async fn end(&self, id: &str) -> Value {
        let (s, v) = self.post(&format!("/api/session/{id}/end"), json!({})).await;
        assert_eq!(s, 200, "{v}");
        v
    }
}

pub const SCRIPT: [&str; 5] = [
    "hi, what do you know about this?",
    "how old is it?",
    "that is interesting, tell me more",
    "where does it come from?",
    "thanks, one last fact please",
];
