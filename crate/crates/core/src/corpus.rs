//! Knowledge base and dialogue dataset: types, on-disk formats, validation.
//!
//! Knowledge base: JSONL, one document per line
//! `{"id", "title", "sentences": [...], "para_breaks": [...]}`, optionally
//! preceded by a header line `{"format_version": 1}`. `para_breaks` lists the
//! sentence indices (other than 0) that start a new paragraph.
//!
//! Dialogues: a JSON object `{"format_version": 1, "episodes": [...]}`; a
//! bare array of episodes is accepted too.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::CandidateSet;
use crate::text::normalize;

pub const FORMAT_VERSION: u32 = 1;

/// Marker text for a wizard turn that used no knowledge.
pub const NO_SENTENCE: &str = "no_passages_used";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeDocument {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub title: String,
    pub sentences: Vec<String>,
    #[serde(default)]
    pub para_breaks: Vec<usize>,
}

impl KnowledgeDocument {
    pub fn new(doc_id: &str, title: &str, sentences: Vec<String>) -> Self {
        Self { doc_id: doc_id.into(), title: title.into(), sentences, para_breaks: Vec::new() }
    }

    pub fn first_paragraph(&self) -> &[String] {
        let end = self.para_breaks.first().copied().unwrap_or(self.sentences.len());
        &self.sentences[..end]
    }

    fn normalized(mut self) -> Self {
        self.doc_id = normalize(&self.doc_id);
        self.title = normalize(&self.title);
        for s in &mut self.sentences {
            *s = normalize(s);
        }
        self
    }

    fn check(&self) -> Result<()> {
        if self.doc_id.is_empty() {
            return Err(Error::Validation("document with empty id".into()));
        }
        if let Some(i) = self.sentences.iter().position(|s| s.is_empty()) {
            return Err(Error::Validation(format!("document {:?}: sentence {i} is empty", self.doc_id)));
        }
        let mut prev = 0;
        for &b in &self.para_breaks {
            if b <= prev || b >= self.sentences.len() {
                return Err(Error::Validation(format!("document {:?}: bad paragraph break {b}", self.doc_id)));
            }
            prev = b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    docs: Vec<KnowledgeDocument>,
    by_id: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KbStats {
    pub documents: usize,
    pub sentences: usize,
}

#[derive(Deserialize)]
struct KbHeader {
    format_version: u32,
}

impl KnowledgeBase {
    /// Normalizes text to NFC and validates every document.
    pub fn from_documents(docs: Vec<KnowledgeDocument>) -> Result<Self> {
        let mut kb = Self::default();
        for doc in docs {
            kb.push(doc)?;
        }
        Ok(kb)
    }

    fn push(&mut self, doc: KnowledgeDocument) -> Result<()> {
        let doc = doc.normalized();
        doc.check()?;
        if self.by_id.contains_key(&doc.doc_id) {
            return Err(Error::Validation(format!("duplicate doc_id {:?}", doc.doc_id)));
        }
        self.by_id.insert(doc.doc_id.clone(), self.docs.len());
        self.docs.push(doc);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut kb = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                what: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            };
            if i == 0 && !line.contains("\"id\"") {
                let header: KbHeader = serde_json::from_str(&line).map_err(parse_err)?;
                if header.format_version != FORMAT_VERSION {
                    return Err(Error::Format(format!("unsupported knowledge base version {}", header.format_version)));
                }
                continue;
            }
            let doc: KnowledgeDocument = serde_json::from_str(&line).map_err(parse_err)?;
            kb.push(doc).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{} line {}: {m}", path.display(), i + 1)),
                other => other,
            })?;
        }
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{{\"format_version\":{FORMAT_VERSION}}}").map_err(io)?;
        for doc in &self.docs {
            serde_json::to_writer(&mut w, doc)?;
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[KnowledgeDocument] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&KnowledgeDocument> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn sentence(&self, doc_id: &str, index: usize) -> Option<&str> {
        self.get(doc_id)?.sentences.get(index).map(String::as_str)
    }

    /// Case-insensitive title lookup; first match in load order.
    pub fn find_title(&self, title: &str) -> Option<&KnowledgeDocument> {
        let t = normalize(title).to_lowercase();
        self.docs.iter().find(|d| d.title.to_lowercase() == t)
    }

    pub fn stats(&self) -> KbStats {
        KbStats { documents: self.docs.len(), sentences: self.docs.iter().map(|d| d.sentences.len()).sum() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Wizard,
    Apprentice,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Speaker::Wizard => Speaker::Apprentice,
            Speaker::Apprentice => Speaker::Wizard,
        }
    }
}

/// The knowledge a wizard turn was grounded on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "CheckedRepr", into = "CheckedRepr")]
pub enum CheckedSentence {
    NoSentence,
    Ref { doc_id: String, sentence_index: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CheckedRepr {
    Marker(String),
    Ref { doc_id: String, sentence_index: usize },
}

impl TryFrom<CheckedRepr> for CheckedSentence {
    type Error = String;

    fn try_from(r: CheckedRepr) -> std::result::Result<Self, String> {
        match r {
            CheckedRepr::Marker(m) if m == NO_SENTENCE => Ok(CheckedSentence::NoSentence),
            CheckedRepr::Marker(m) => Err(format!("unknown checked_sentence marker {m:?}")),
            CheckedRepr::Ref { doc_id, sentence_index } => Ok(CheckedSentence::Ref { doc_id, sentence_index }),
        }
    }
}

impl From<CheckedSentence> for CheckedRepr {
    fn from(c: CheckedSentence) -> Self {
        match c {
            CheckedSentence::NoSentence => CheckedRepr::Marker(NO_SENTENCE.into()),
            CheckedSentence::Ref { doc_id, sentence_index } => CheckedRepr::Ref { doc_id, sentence_index },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checked_sentence: Option<CheckedSentence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved_candidates: Option<CandidateSet>,
}

impl DialogueTurn {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        Self { speaker, text: text.into(), checked_sentence: None, retrieved_candidates: None }
    }

    pub fn wizard(text: &str, checked: CheckedSentence) -> Self {
        Self { checked_sentence: Some(checked), ..Self::new(Speaker::Wizard, text) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
    Live,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueEpisode {
    pub topic: String,
    pub topic_doc: String,
    pub turns: Vec<DialogueTurn>,
    pub split: Split,
}

impl DialogueEpisode {
    /// `(x_t, x_{t-1})` before turn `i`: most recent first, at most two.
    pub fn last_turns(&self, i: usize) -> Vec<&str> {
        self.turns[..i].iter().rev().take(2).map(|t| t.text.as_str()).collect()
    }

    /// Indices of wizard turns.
    pub fn wizard_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns.iter().enumerate().filter(|(_, t)| t.speaker == Speaker::Wizard).map(|(i, _)| i)
    }

    fn normalize_text(&mut self) {
        self.topic = normalize(&self.topic);
        for t in &mut self.turns {
            t.text = normalize(&t.text);
        }
    }

    fn validate(&self, index: usize, kb: &KnowledgeBase) -> Result<()> {
        let at = |turn: Option<usize>, msg: String| {
            Error::Validation(match turn {
                Some(t) => format!("episode {index} turn {t}: {msg}"),
                None => format!("episode {index}: {msg}"),
            })
        };
        if kb.get(&self.topic_doc).is_none() {
            return Err(at(None, format!("topic_doc {:?} not in knowledge base", self.topic_doc)));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if i > 0 && turn.speaker == self.turns[i - 1].speaker {
                return Err(at(Some(i), "speakers do not alternate".into()));
            }
            match (&turn.checked_sentence, turn.speaker) {
                (Some(_), Speaker::Apprentice) => {
                    return Err(at(Some(i), "checked_sentence on an apprentice turn".into()));
                }
                (Some(CheckedSentence::Ref { doc_id, sentence_index }), _) => {
                    if kb.sentence(doc_id, *sentence_index).is_none() {
                        return Err(at(
                            Some(i),
                            format!("checked_sentence ({doc_id:?}, {sentence_index}) not in knowledge base"),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DialogueFile {
    format_version: u32,
    episodes: Vec<DialogueEpisode>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DialogueFileRepr {
    Versioned(DialogueFile),
    Bare(Vec<DialogueEpisode>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub dialogues: usize,
    pub utterances: usize,
}

pub fn split_counts(episodes: &[DialogueEpisode]) -> BTreeMap<Split, SplitCounts> {
    let mut out: BTreeMap<Split, SplitCounts> = BTreeMap::new();
    for ep in episodes {
        let c = out.entry(ep.split).or_default();
        c.dialogues += 1;
        c.utterances += ep.turns.len();
    }
    out
}

/// Normalizes and validates episodes against `kb`.
pub fn validate_dialogues(mut episodes: Vec<DialogueEpisode>, kb: &KnowledgeBase) -> Result<Vec<DialogueEpisode>> {
    for (i, ep) in episodes.iter_mut().enumerate() {
        ep.normalize_text();
        ep.validate(i, kb)?;
    }
    Ok(episodes)
}

pub fn parse_dialogues(json: &str, kb: &KnowledgeBase) -> Result<Vec<DialogueEpisode>> {
    let episodes = match serde_json::from_str(json)? {
        DialogueFileRepr::Versioned(f) => {
            if f.format_version != FORMAT_VERSION {
                return Err(Error::Format(format!("unsupported dialogue version {}", f.format_version)));
            }
            f.episodes
        }
        DialogueFileRepr::Bare(eps) => eps,
    };
    validate_dialogues(episodes, kb)
}

pub fn load_dialogues(path: &Path, kb: &KnowledgeBase) -> Result<Vec<DialogueEpisode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogues(&text, kb)
}

pub fn dialogues_to_json(episodes: &[DialogueEpisode]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&DialogueFile { format_version: FORMAT_VERSION, episodes: episodes.to_vec() })?)
}

pub fn save_dialogues(path: &Path, episodes: &[DialogueEpisode]) -> Result<()> {
    std::fs::write(path, dialogues_to_json(episodes)?).map_err(|e| Error::io(path, e))
}

/// Resolves a checked sentence to its text.
pub fn checked_text<'a>(kb: &'a KnowledgeBase, checked: &CheckedSentence) -> Option<&'a str> {
    match checked {
        CheckedSentence::NoSentence => Some(NO_SENTENCE),
        CheckedSentence::Ref { doc_id, sentence_index } => kb.sentence(doc_id, *sentence_index),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_documents(vec![
            KnowledgeDocument::new("a", "Alpha", vec!["First.".into(), "Second.".into()]),
            KnowledgeDocument::new("b", "Beta", vec!["Only.".into()]),
        ])
        .unwrap()
    }

    #[test]
    fn first_paragraph_stops_at_break() {
        let mut d = KnowledgeDocument::new("x", "X", vec!["a".into(), "b".into(), "c".into()]);
        assert_eq!(d.first_paragraph().len(), 3);
        d.para_breaks = vec![2];
        assert_eq!(d.first_paragraph(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn duplicate_id_rejected() {
        let docs = vec![KnowledgeDocument::new("a", "A", vec!["x".into()]), KnowledgeDocument::new("a", "B", vec!["y".into()])];
        let err = KnowledgeBase::from_documents(docs).unwrap_err().to_string();
        assert!(err.contains("\"a\""), "{err}");
    }

    #[test]
    fn blank_sentence_rejected() {
        let docs = vec![KnowledgeDocument::new("a", "A", vec!["  ".into()])];
        assert!(KnowledgeBase::from_documents(docs).is_err());
    }

    #[test]
    fn checked_sentence_json_forms() {
        let t = DialogueTurn::wizard("hi", CheckedSentence::NoSentence);
        let j = serde_json::to_string(&t).unwrap();
        assert!(j.contains("\"checked_sentence\":\"no_passages_used\""));
        let back: DialogueTurn = serde_json::from_str(&j).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<CheckedSentence>("\"other\"").is_err());
    }

    #[test]
    fn unresolved_reference_names_turn() {
        let ep = DialogueEpisode {
            topic: "Alpha".into(),
            topic_doc: "a".into(),
            turns: vec![
                DialogueTurn::new(Speaker::Apprentice, "hello"),
                DialogueTurn::wizard("x", CheckedSentence::Ref { doc_id: "zz".into(), sentence_index: 0 }),
            ],
            split: Split::Train,
        };
        let err = validate_dialogues(vec![ep], &kb()).unwrap_err().to_string();
        assert!(err.contains("episode 0 turn 1"), "{err}");
    }

    #[test]
    fn non_alternating_rejected() {
        let ep = DialogueEpisode {
            topic: "Alpha".into(),
            topic_doc: "a".into(),
            turns: vec![DialogueTurn::new(Speaker::Apprentice, "a"), DialogueTurn::new(Speaker::Apprentice, "b")],
            split: Split::Valid,
        };
        assert!(validate_dialogues(vec![ep], &kb()).is_err());
    }

    #[test]
    fn bare_array_accepted() {
        let eps = parse_dialogues("[]", &kb()).unwrap();
        assert!(eps.is_empty());
        assert!(split_counts(&eps).is_empty());
    }

    #[test]
    fn split_parses() {
        assert_eq!("test_seen".parse::<Split>().unwrap(), Split::TestSeen);
        assert!("nope".parse::<Split>().is_err());
    }
}
