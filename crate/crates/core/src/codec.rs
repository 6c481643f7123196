//! Turning dialogue turns into token-id examples for the models.

use kgdialog_nn::bpe::NO_KNOWLEDGE;
use kgdialog_nn::BpeTokenizer;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueEpisode, DialogueTurn, KnowledgeBase, Speaker, Split};
use crate::error::{Error, Result};
use crate::retriever::{build_knowledge_candidates, Candidate, CandidateSet, InvertedIndex};

/// Tokenizer plus the per-sequence length limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCodec {
    pub tokenizer: BpeTokenizer,
    pub max_len: usize,
}

fn speaker_tag(s: Speaker) -> &'static str {
    match s {
        Speaker::Wizard => "wizard:",
        Speaker::Apprentice => "apprentice:",
    }
}

/// Topic followed by the last two turns, each tagged with its speaker.
pub fn context_text(topic: &str, history: &[DialogueTurn]) -> String {
    let mut s = topic.to_string();
    for t in history.iter().rev().take(2).rev() {
        s.push_str(" \n ");
        s.push_str(speaker_tag(t.speaker));
        s.push(' ');
        s.push_str(&t.text);
    }
    s
}

impl TextCodec {
    /// Learns a BPE vocabulary on knowledge sentences and training
    /// utterances.
    pub fn train(kb: &KnowledgeBase, episodes: &[DialogueEpisode], merges: usize, max_len: usize) -> Result<Self> {
        let mut corpus: Vec<String> = Vec::new();
        for d in kb.documents() {
            corpus.push(d.title.clone());
            corpus.extend(d.sentences.iter().cloned());
        }
        for ep in episodes.iter().filter(|e| e.split == Split::Train) {
            corpus.push(ep.topic.clone());
            corpus.extend(ep.turns.iter().map(|t| format!("{} {}", speaker_tag(t.speaker), t.text)));
        }
        corpus.push(" : \n".into());
        Ok(Self { tokenizer: BpeTokenizer::train(&corpus, merges)?, max_len })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    /// Keeps the most recent `max_len` tokens.
    pub fn context_ids(&self, topic: &str, history: &[DialogueTurn]) -> Vec<u32> {
        let ids = self.tokenizer.encode(&context_text(topic, history));
        let cut = ids.len().saturating_sub(self.max_len);
        let mut ids = ids[cut..].to_vec();
        if ids.is_empty() {
            ids.push(NO_KNOWLEDGE);
        }
        ids
    }

    /// The title-prefixed sentence, truncated from the end.
    pub fn knowledge_ids(&self, c: &Candidate) -> Vec<u32> {
        if c.is_sentinel() {
            return vec![NO_KNOWLEDGE];
        }
        let mut ids = self.tokenizer.encode(&c.display());
        ids.truncate(self.max_len);
        ids
    }

    /// Response tokens without BOS/EOS, leaving room for one of them.
    pub fn response_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenizer.encode(text);
        ids.truncate(self.max_len - 1);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.tokenizer.decode(ids)
    }
}

/// One wizard turn ready for a model.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnExample {
    pub episode: usize,
    pub turn: usize,
    pub topic_doc: String,
    pub context_text: String,
    pub context: Vec<u32>,
    pub candidates: CandidateSet,
    pub knowledge: Vec<Vec<u32>>,
    /// Index of the gold sentence in `candidates`; `None` when retrieval
    /// missed it.
    pub gold_index: Option<usize>,
    pub response_text: String,
    pub response: Vec<u32>,
    /// Text of the turn just before this one (empty at conversation start).
    pub last_utterance: String,
}

impl TurnExample {
    pub fn gold_knowledge(&self) -> Option<&[u32]> {
        self.gold_index.map(|g| self.knowledge[g].as_slice())
    }
}

/// Candidates for turn `i` of `ep`: the cached set if present, else built
/// from the index.
pub fn turn_candidates(index: &InvertedIndex, kb: &KnowledgeBase, ep: &DialogueEpisode, i: usize) -> Result<CandidateSet> {
    if let Some(c) = &ep.turns[i].retrieved_candidates {
        return Ok(c.clone());
    }
    build_knowledge_candidates(index, kb, &ep.topic, &ep.topic_doc, &ep.last_turns(i))
}

/// An unlabeled example for the next wizard turn of a live conversation.
pub fn live_example(codec: &TextCodec, topic: &str, history: &[DialogueTurn], candidates: CandidateSet) -> TurnExample {
    TurnExample {
        episode: 0,
        turn: history.len(),
        topic_doc: String::new(),
        context_text: context_text(topic, history),
        context: codec.context_ids(topic, history),
        knowledge: candidates.entries().iter().map(|c| codec.knowledge_ids(c)).collect(),
        candidates,
        gold_index: None,
        response_text: String::new(),
        response: Vec::new(),
        last_utterance: history.last().map(|t| t.text.clone()).unwrap_or_default(),
    }
}

/// Every wizard turn of `episodes` (all splits) as an example.
pub fn prepare_examples(
    codec: &TextCodec,
    index: &InvertedIndex,
    kb: &KnowledgeBase,
    episodes: &[DialogueEpisode],
) -> Result<Vec<TurnExample>> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in ep.wizard_turns() {
            let turn = &ep.turns[t];
            let candidates = turn_candidates(index, kb, ep, t)?;
            let gold_index = turn.checked_sentence.as_ref().and_then(|c| candidates.gold_index(c));
            let response = codec.response_ids(&turn.text);
            if response.is_empty() {
                return Err(Error::Validation(format!("episode {e} turn {t}: empty response")));
            }
            out.push(TurnExample {
                episode: e,
                turn: t,
                topic_doc: ep.topic_doc.clone(),
                context_text: context_text(&ep.topic, &ep.turns[..t]),
                context: codec.context_ids(&ep.topic, &ep.turns[..t]),
                knowledge: candidates.entries().iter().map(|c| codec.knowledge_ids(c)).collect(),
                candidates,
                gold_index,
                response_text: turn.text.clone(),
                response,
                last_utterance: t.checked_sub(1).map(|p| ep.turns[p].text.clone()).unwrap_or_default(),
            });
        }
    }
    Ok(out)
}
