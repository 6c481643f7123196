//! Trained models on disk and the responder that turns a bundle into a
//! conversational agent.

use std::path::Path;

use kgdialog_nn::{ParamStore, TransformerConfig};
use serde::{Deserialize, Serialize};

use crate::codec::{live_example, TextCodec};
use crate::corpus::DialogueTurn;
use crate::error::{Error, Result};
use crate::generative_dialogue::{GenerativeConfig, GenerativeModel, Variant};
use crate::knowledge_selection::{EncoderKind, Selector};
use crate::retrieval_dialogue::{knowledge_input, KnowledgeMode, ResponsePool, RetrievalModel};
use crate::retriever::CandidateSet;

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Selector { encoder: EncoderKind },
    Retrieval { mode: KnowledgeMode },
    Generative { config: GenerativeConfig },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Selector { .. } => "selector",
            ModelKind::Retrieval { .. } => "retrieval",
            ModelKind::Generative { config } if config.variant == Variant::TwoStage => "two_stage",
            ModelKind::Generative { .. } => "end_to_end",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub kind: ModelKind,
    pub codec: TextCodec,
    pub transformer: TransformerConfig,
    pub params: ParamStore,
    /// The knowledge selector of a two-stage model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<Box<ModelBundle>>,
    /// Candidate utterances of a retrieval model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_pool: Option<Vec<String>>,
}

impl ModelBundle {
    pub fn new(kind: ModelKind, codec: TextCodec, transformer: TransformerConfig, params: ParamStore) -> Self {
        Self { format_version: BUNDLE_VERSION, kind, codec, transformer, params, selector: None, response_pool: None }
    }

    pub fn with_selector(mut self, selector: ModelBundle) -> Result<Self> {
        if !matches!(selector.kind, ModelKind::Selector { .. }) {
            return Err(Error::Config(format!("expected a selector bundle, got {}", selector.kind.name())));
        }
        if selector.codec != self.codec {
            return Err(Error::Config("selector and generator bundles use different tokenizers".into()));
        }
        self.selector = Some(Box::new(selector));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != BUNDLE_VERSION {
            return Err(Error::Format(format!("bundle version {} (supported: {BUNDLE_VERSION})", self.format_version)));
        }
        if self.transformer.vocab_size != self.codec.vocab_size() {
            return Err(Error::Format(format!(
                "model vocabulary {} but tokenizer has {}",
                self.transformer.vocab_size,
                self.codec.vocab_size()
            )));
        }
        if let Some(sel) = &self.selector {
            sel.validate()?;
            if sel.codec != self.codec {
                return Err(Error::Format("selector and generator bundles use different tokenizers".into()));
            }
        }
        match &self.kind {
            ModelKind::Retrieval { mode } => {
                if self.response_pool.as_ref().is_none_or(|p| p.is_empty()) {
                    return Err(Error::Format("retrieval bundle without a response pool".into()));
                }
                if *mode == KnowledgeMode::TwoStage && self.selector.is_none() {
                    return Err(Error::Format("two-stage retrieval bundle without a selector".into()));
                }
            }
            ModelKind::Generative { config } => {
                config.validate()?;
                if config.variant == Variant::TwoStage && self.selector.is_none() {
                    return Err(Error::Format("two-stage bundle without a selector".into()));
                }
            }
            ModelKind::Selector { .. } => {}
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let b: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        b.validate()?;
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    /// Index into the turn's candidates of the knowledge the model used.
    pub selected: usize,
}

enum Engine {
    Selector(Selector),
    Retrieval { model: RetrievalModel, mode: KnowledgeMode, pool: ResponsePool },
    Generative { model: GenerativeModel, config: GenerativeConfig },
}

/// A loaded bundle that answers the next wizard turn.
pub struct Responder {
    bundle: ModelBundle,
    engine: Engine,
    selector: Option<Selector>,
}

impl Responder {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let cfg = &bundle.transformer;
        let selector = match &bundle.selector {
            Some(s) => match s.kind {
                ModelKind::Selector { encoder } => Some(Selector::bind(&s.params, &s.transformer, encoder)?),
                _ => return Err(Error::Format("nested bundle is not a selector".into())),
            },
            None => None,
        };
        let engine = match &bundle.kind {
            ModelKind::Selector { encoder } => Engine::Selector(Selector::bind(&bundle.params, cfg, *encoder)?),
            ModelKind::Retrieval { mode } => {
                let model = RetrievalModel::bind(&bundle.params, cfg)?;
                let responses = bundle.response_pool.clone().unwrap_or_default();
                let pool = ResponsePool::build(&model, &bundle.params, &bundle.codec, responses)?;
                Engine::Retrieval { model, mode: *mode, pool }
            }
            ModelKind::Generative { config } => {
                Engine::Generative { model: GenerativeModel::bind(&bundle.params, cfg)?, config: config.clone() }
            }
        };
        Ok(Self { bundle, engine, selector })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn codec(&self) -> &TextCodec {
        &self.bundle.codec
    }

    fn pick_with_selector(&self, ex: &crate::codec::TurnExample) -> Result<usize> {
        let sel = self.selector.as_ref().ok_or_else(|| Error::Config("no selector in bundle".into()))?;
        let store = &self.bundle.selector.as_ref().expect("selector bundle").params;
        Ok(sel.select(store, ex)?.best_index)
    }

    /// The next wizard utterance given the history and this turn's
    /// candidates. A selector bundle answers with its chosen sentence.
    pub fn reply(&self, topic: &str, history: &[DialogueTurn], candidates: &CandidateSet) -> Result<Reply> {
        if candidates.is_empty() {
            return Err(Error::Invalid("empty candidate set".into()));
        }
        let ex = live_example(&self.bundle.codec, topic, history, candidates.clone());
        let store = &self.bundle.params;
        match &self.engine {
            Engine::Selector(sel) => {
                let best = sel.select(store, &ex)?.best_index;
                let c = &candidates.entries()[best];
                let text = if c.is_sentinel() { String::new() } else { c.sentence.clone() };
                Ok(Reply { text, selected: best })
            }
            Engine::Retrieval { model, mode, pool } => {
                let selected = match mode {
                    KnowledgeMode::TwoStage => self.pick_with_selector(&ex)?,
                    KnowledgeMode::None => 0,
                    _ => model.attention(store, &ex.context, &ex.knowledge)?.best_index,
                };
                let knowledge = match mode {
                    KnowledgeMode::TwoStage => crate::retrieval_dialogue::Knowledge::One(&ex.knowledge[selected]),
                    // no label at inference time
                    KnowledgeMode::Gold => crate::retrieval_dialogue::Knowledge::All(&ex.knowledge),
                    m => knowledge_input(&ex, *m, None)?,
                };
                let lhs = model.lhs_vector(store, &ex.context, &knowledge)?;
                let (i, _) = pool.best(&lhs)?;
                Ok(Reply { text: pool.responses[i].clone(), selected })
            }
            Engine::Generative { model, config } => {
                let selected = match config.variant {
                    Variant::EndToEnd => model.select(store, &ex.context, &ex.knowledge)?.best_index,
                    Variant::TwoStage => self.pick_with_selector(&ex)?,
                };
                let h = model.generate(store, &ex.context, &ex.knowledge[selected], config.beam())?;
                Ok(Reply { text: self.bundle.codec.decode(&h.tokens), selected })
            }
        }
    }
}
