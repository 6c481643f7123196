//! HTTP chat service: an apprentice picks a topic and talks to the loaded
//! wizard model.
//!
//! ```text
//! GET  /api/topics                 -> {topics: [..]}
//! POST /api/session {topic}        -> {session_id, topic}
//! POST /api/session/{id}/message   -> {reply, selected_knowledge, candidate_count, latency_ms}
//! POST /api/session/{id}/end       -> {transcript, wiki_f1}
//! ```

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgdialog_core::bundle::Responder;
use kgdialog_core::corpus::{save_dialogues, CheckedSentence, DialogueEpisode, DialogueTurn, KnowledgeBase, Speaker, Split};
use kgdialog_core::metrics::wiki_f1;
use kgdialog_core::retriever::{build_knowledge_candidates, InvertedIndex};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const TOPICS_OFFERED: usize = 3;

#[derive(Clone, Debug)]
pub struct ChatSession {
    pub session_id: String,
    pub topic: String,
    pub topic_doc: String,
    pub history: Vec<DialogueTurn>,
    pub created_at: u64,
}

impl ChatSession {
    pub fn new(topic: &str, topic_doc: &str) -> Self {
        Self {
            session_id: uuid::Uuid::new_v4().to_string(),
            topic: topic.into(),
            topic_doc: topic_doc.into(),
            history: Vec::new(),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn episode(&self) -> DialogueEpisode {
        DialogueEpisode { topic: self.topic.clone(), topic_doc: self.topic_doc.clone(), turns: self.history.clone(), split: Split::Live }
    }
}

pub struct ServiceConfig {
    /// Directory for finished transcripts; none keeps them in memory only.
    pub transcripts: Option<PathBuf>,
    pub seed: u64,
}

pub struct AppState {
    responder: Responder,
    kb: KnowledgeBase,
    index: InvertedIndex,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<ChatSession>>>>,
    rng: Mutex<ChaCha8Rng>,
    transcripts: Option<PathBuf>,
}

impl AppState {
    pub fn new(responder: Responder, kb: KnowledgeBase, index: InvertedIndex, cfg: ServiceConfig) -> Self {
        Self {
            responder,
            kb,
            index,
            sessions: Mutex::new(HashMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(cfg.seed)),
            transcripts: cfg.transcripts,
        }
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<ChatSession>>, ApiError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self { status: StatusCode::NOT_FOUND, message }
    }

    fn invalid(message: &str) -> Self {
        Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Serialize, Deserialize)]
pub struct TopicsResponse {
    pub topics: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub struct CreateSession {
    pub topic: String,
}

#[derive(Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub topic: String,
}

#[derive(Serialize, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    /// `title : sentence`, or `no_passages_used`.
    pub selected_knowledge: String,
    pub candidate_count: usize,
    pub latency_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionEnded {
    pub transcript: DialogueEpisode,
    /// Over wizard utterances; null when the model never spoke.
    pub wiki_f1: Option<f64>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/topics", get(topics))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/message", post(post_message))
        .route("/api/session/{id}/end", post(end_session))
        .with_state(state)
}

async fn topics(State(st): State<Arc<AppState>>) -> Json<TopicsResponse> {
    let docs = st.kb.documents();
    let mut rng = st.rng.lock().unwrap();
    let topics = docs.choose_multiple(&mut *rng, TOPICS_OFFERED).map(|d| d.title.clone()).collect();
    Json(TopicsResponse { topics })
}

async fn create_session(State(st): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> Result<Json<SessionCreated>, ApiError> {
    let doc = st.kb.find_title(&req.topic).ok_or_else(|| ApiError::not_found(format!("unknown topic {:?}", req.topic)))?;
    let session = ChatSession::new(&doc.title, &doc.doc_id);
    let out = SessionCreated { session_id: session.session_id.clone(), topic: session.topic.clone() };
    st.sessions.lock().unwrap().insert(session.session_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    tracing::info!(session = %out.session_id, topic = %out.topic, "session created");
    Ok(Json(out))
}

async fn post_message(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PostMessage>,
) -> Result<Json<MessageReply>, ApiError> {
    if req.text.trim().is_empty() {
        return Err(ApiError::invalid("message text is empty"));
    }
    let session = st.session(&id)?.lock_owned().await;
    let state = st.clone();
    tokio::task::spawn_blocking(move || respond(&state, session, req.text))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

fn respond(st: &AppState, mut session: tokio::sync::OwnedMutexGuard<ChatSession>, text: String) -> Result<MessageReply, ApiError> {
    take_turn(&st.responder, &st.index, &st.kb, &mut session, &text).map_err(ApiError::internal)
}

/// Appends the apprentice message and the model's reply to the session.
/// The session is left untouched on error.
pub fn take_turn(
    responder: &Responder,
    index: &InvertedIndex,
    kb: &KnowledgeBase,
    session: &mut ChatSession,
    text: &str,
) -> kgdialog_core::Result<MessageReply> {
    let start = Instant::now();
    let mut history = session.history.clone();
    history.push(DialogueTurn::new(Speaker::Apprentice, text));
    let last: Vec<&str> = history.iter().rev().take(2).map(|t| t.text.as_str()).collect();
    let candidates = build_knowledge_candidates(index, kb, &session.topic, &session.topic_doc, &last)?;
    let reply = responder.reply(&session.topic, &history, &candidates)?;
    let chosen = &candidates.entries()[reply.selected];
    let checked = if chosen.is_sentinel() {
        CheckedSentence::NoSentence
    } else {
        CheckedSentence::Ref { doc_id: chosen.doc_id.clone(), sentence_index: chosen.sentence_index }
    };
    let selected_knowledge = chosen.display();
    let candidate_count = candidates.len();
    let mut turn = DialogueTurn::wizard(&reply.text, checked);
    turn.retrieved_candidates = Some(candidates);
    history.push(turn);
    session.history = history;
    Ok(MessageReply { reply: reply.text, selected_knowledge, candidate_count, latency_ms: start.elapsed().as_millis() as u64 })
}

async fn end_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionEnded>, ApiError> {
    let session = st.session(&id)?;
    let session = session.lock().await.clone();
    st.sessions.lock().unwrap().remove(&id);
    let transcript = session.episode();
    let wizard: Vec<&str> =
        transcript.turns.iter().filter(|t| t.speaker == Speaker::Wizard).map(|t| t.text.as_str()).collect();
    let wiki = if wizard.is_empty() {
        None
    } else {
        let doc = st.kb.get(&session.topic_doc).ok_or_else(|| ApiError::internal("topic document vanished"))?;
        Some(wiki_f1(&wizard, doc).map_err(ApiError::internal)?)
    };
    if let Some(dir) = &st.transcripts {
        let path = dir.join(format!("{id}.json"));
        save_dialogues(&path, std::slice::from_ref(&transcript)).map_err(ApiError::internal)?;
    }
    tracing::info!(session = %id, turns = transcript.turns.len(), "session ended");
    Ok(Json(SessionEnded { transcript, wiki_f1: wiki }))
}
