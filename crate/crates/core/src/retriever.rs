//! Hashed TF-IDF inverted index over unigrams and bigrams, and the per-turn
//! knowledge candidate protocol.
//!
//! Weighting: a term with frequency `tf` in a document weighs
//! `ln(1 + tf) * idf`, where `idf = max(0, ln((N - n + 0.5) / (n + 0.5)))`
//! over `N` documents, `n` of which contain the term's bucket. Query terms
//! are weighted the same way and the score is the dot product of the two
//! weighted vectors. Terms are hashed with 64-bit FNV-1a reduced modulo
//! `bucket_count`; the unit counted is the bucket, not the string.
//!
//! A document is indexed as its title followed by its first paragraph.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{CheckedSentence, KnowledgeBase, NO_SENTENCE};
use crate::error::{Error, Result};

pub const DEFAULT_BUCKETS: u64 = 1 << 20;
pub const ARTICLES_PER_QUERY: usize = 7;
pub const TOPIC_SENTENCES: usize = 10;

pub const STOP_WORDS: [&str; 30] = [
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "he", "i", "in", "is", "it", "its",
    "of", "on", "or", "that", "the", "this", "to", "was", "were", "will", "with", "you",
];

const MAGIC: &[u8; 4] = b"KGTI";
const INDEX_VERSION: u32 = 1;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Unigrams minus stop words, then (for order 2) bigrams of the unfiltered
/// token stream joined by a space.
pub fn terms(text: &str, ngram_order: u8) -> Vec<String> {
    let toks = tokenize(text);
    let mut out: Vec<String> = toks.iter().filter(|t| !STOP_WORDS.contains(&t.as_str())).cloned().collect();
    if ngram_order >= 2 {
        out.extend(toks.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    }
    out
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket -> count for the terms of `text`.
pub fn bucket_counts(text: &str, ngram_order: u8, bucket_count: u64) -> BTreeMap<u32, u32> {
    let mut out = BTreeMap::new();
    for t in terms(text, ngram_order) {
        *out.entry((fnv1a64(t.as_bytes()) & (bucket_count - 1)) as u32).or_insert(0) += 1;
    }
    out
}

pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let (n, df) = (doc_count as f64, doc_freq as f64);
    ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
}

pub fn tf_weight(tf: u32) -> f64 {
    (tf as f64).ln_1p()
}

/// The text a document is indexed under.
pub fn indexed_text(title: &str, first_paragraph: &[String]) -> String {
    let mut s = title.to_string();
    for sent in first_paragraph {
        s.push(' ');
        s.push_str(sent);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub bucket_count: u64,
    pub ngram_order: u8,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { bucket_count: DEFAULT_BUCKETS, ngram_order: 2 }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.bucket_count.is_power_of_two() || self.bucket_count > 1 << 32 {
            return Err(Error::Config(format!("bucket_count {} is not a power of two <= 2^32", self.bucket_count)));
        }
        if !(1..=2).contains(&self.ngram_order) {
            return Err(Error::Config(format!("ngram_order {} not in {{1, 2}}", self.ngram_order)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    config: IndexConfig,
    doc_ids: Vec<String>,
    /// Non-empty buckets, ascending; postings of `buckets[i]` are
    /// `postings[offsets[i]..offsets[i + 1]]`, sorted by document.
    buckets: Vec<u32>,
    offsets: Vec<usize>,
    postings: Vec<Posting>,
    /// L2 norm of each document's weighted vector.
    doc_norms: Vec<f64>,
}

impl InvertedIndex {
    pub fn build(kb: &KnowledgeBase, config: IndexConfig) -> Result<Self> {
        config.validate()?;
        if kb.is_empty() {
            return Err(Error::Invalid("cannot index an empty knowledge base".into()));
        }
        let mut by_bucket: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(kb.len());
        for (d, doc) in kb.documents().iter().enumerate() {
            doc_ids.push(doc.doc_id.clone());
            let text = indexed_text(&doc.title, doc.first_paragraph());
            for (b, tf) in bucket_counts(&text, config.ngram_order, config.bucket_count) {
                by_bucket.entry(b).or_default().push(Posting { doc: d as u32, tf });
            }
        }
        let mut index = Self {
            config,
            doc_ids,
            buckets: Vec::with_capacity(by_bucket.len()),
            offsets: vec![0],
            postings: Vec::new(),
            doc_norms: Vec::new(),
        };
        for (b, list) in by_bucket {
            index.buckets.push(b);
            index.postings.extend(list);
            index.offsets.push(index.postings.len());
        }
        index.doc_norms = index.compute_norms();
        Ok(index)
    }

    fn compute_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.doc_ids.len()];
        for i in 0..self.buckets.len() {
            let list = &self.postings[self.offsets[i]..self.offsets[i + 1]];
            let w = idf(self.doc_count(), list.len());
            for p in list {
                sq[p.doc as usize] += (tf_weight(p.tf) * w).powi(2);
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn config(&self) -> IndexConfig {
        self.config
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_norms(&self) -> &[f64] {
        &self.doc_norms
    }

    /// Postings of one bucket (empty if none).
    pub fn postings(&self, bucket: u32) -> &[Posting] {
        match self.buckets.binary_search(&bucket) {
            Ok(i) => &self.postings[self.offsets[i]..self.offsets[i + 1]],
            Err(_) => &[],
        }
    }

    /// Non-empty buckets in ascending order.
    pub fn buckets(&self) -> &[u32] {
        &self.buckets
    }

    /// Top `k` documents by score, ties by ascending doc_id. Documents
    /// scoring 0 (no overlap, or overlap only on zero-idf terms) are left out.
    pub fn score_documents(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let q = bucket_counts(query, self.config.ngram_order, self.config.bucket_count);
        let mut acc = vec![0.0; self.doc_count()];
        for (b, qtf) in q {
            let list = self.postings(b);
            let w = idf(self.doc_count(), list.len());
            if w == 0.0 {
                continue;
            }
            let qw = tf_weight(qtf) * w;
            for p in list {
                acc[p.doc as usize] += qw * tf_weight(p.tf) * w;
            }
        }
        let mut hits: Vec<(usize, f64)> = acc.into_iter().enumerate().filter(|(_, s)| *s > 0.0).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0])));
        hits.truncate(k);
        hits.into_iter().map(|(d, s)| (self.doc_ids[d].clone(), s)).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u64::<LittleEndian>(self.config.bucket_count)?;
        w.write_u8(self.config.ngram_order)?;
        w.write_u32::<LittleEndian>(self.doc_ids.len() as u32)?;
        for id in &self.doc_ids {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
        }
        for &n in &self.doc_norms {
            w.write_f64::<LittleEndian>(n)?;
        }
        w.write_u32::<LittleEndian>(self.buckets.len() as u32)?;
        for (i, &b) in self.buckets.iter().enumerate() {
            w.write_u32::<LittleEndian>(b)?;
            w.write_u32::<LittleEndian>((self.offsets[i + 1] - self.offsets[i]) as u32)?;
        }
        for p in &self.postings {
            w.write_u32::<LittleEndian>(p.doc)?;
            w.write_u32::<LittleEndian>(p.tf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(Error::Format("wrong magic bytes".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let config = IndexConfig {
            bucket_count: r.read_u64::<LittleEndian>().map_err(fmt)?,
            ngram_order: r.read_u8().map_err(fmt)?,
        };
        config.validate()?;
        let n = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let mut doc_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(fmt)?;
            doc_ids.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut doc_norms = Vec::with_capacity(n);
        for _ in 0..n {
            doc_norms.push(r.read_f64::<LittleEndian>().map_err(fmt)?);
        }
        let nb = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let mut buckets = Vec::with_capacity(nb);
        let mut offsets = vec![0];
        for _ in 0..nb {
            let b = r.read_u32::<LittleEndian>().map_err(fmt)?;
            if buckets.last().is_some_and(|&last| last >= b) || b as u64 >= config.bucket_count {
                return Err(Error::Format("buckets out of order or out of range".into()));
            }
            buckets.push(b);
            let count = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
            offsets.push(offsets.last().unwrap() + count);
        }
        let total = *offsets.last().unwrap();
        let mut postings = Vec::with_capacity(total);
        for _ in 0..total {
            let doc = r.read_u32::<LittleEndian>().map_err(fmt)?;
            let tf = r.read_u32::<LittleEndian>().map_err(fmt)?;
            if doc as usize >= n {
                return Err(Error::Format(format!("posting for document {doc} of {n}")));
            }
            postings.push(Posting { doc, tf });
        }
        Ok(Self { config, doc_ids, buckets, offsets, postings, doc_norms })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub doc_id: String,
    pub title: String,
    pub sentences: Vec<String>,
}

/// Top `k` articles for `query`, first paragraph only.
pub fn retrieve_articles(index: &InvertedIndex, kb: &KnowledgeBase, query: &str, k: usize) -> Vec<Article> {
    index
        .score_documents(query, k)
        .into_iter()
        .filter_map(|(id, _)| kb.get(&id))
        .map(|d| Article { doc_id: d.doc_id.clone(), title: d.title.clone(), sentences: d.first_paragraph().to_vec() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub title: String,
    pub sentence: String,
    pub doc_id: String,
    pub sentence_index: usize,
}

impl Candidate {
    pub fn sentinel() -> Self {
        Self { title: String::new(), sentence: NO_SENTENCE.into(), doc_id: String::new(), sentence_index: 0 }
    }

    pub fn is_sentinel(&self) -> bool {
        self.doc_id.is_empty() && self.sentence == NO_SENTENCE
    }

    /// `"<title> : <sentence>"`, or the bare marker for the sentinel.
    pub fn display(&self) -> String {
        if self.is_sentinel() {
            NO_SENTENCE.into()
        } else {
            format!("{} : {}", self.title, self.sentence)
        }
    }
}

/// Knowledge candidates for one turn. The sentinel is always entry 0 and
/// no `(doc_id, sentence_index)` appears twice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateSetRepr", into = "CandidateSetRepr")]
pub struct CandidateSet {
    entries: Vec<Candidate>,
}

#[derive(Serialize, Deserialize)]
struct CandidateSetRepr {
    entries: Vec<Candidate>,
}

impl TryFrom<CandidateSetRepr> for CandidateSet {
    type Error = String;

    fn try_from(r: CandidateSetRepr) -> std::result::Result<Self, String> {
        let mut set = CandidateSet::new();
        let mut it = r.entries.into_iter();
        if !it.next().is_some_and(|c| c.is_sentinel()) {
            return Err("candidate set must start with the sentinel".into());
        }
        for c in it {
            if c.is_sentinel() || !set.push(c) {
                return Err("duplicate candidate".into());
            }
        }
        Ok(set)
    }
}

impl From<CandidateSet> for CandidateSetRepr {
    fn from(s: CandidateSet) -> Self {
        CandidateSetRepr { entries: s.entries }
    }
}

impl Default for CandidateSet {
    fn default() -> Self {
        Self::new()
    }
}

impl CandidateSet {
    /// The sentinel-only set.
    pub fn new() -> Self {
        Self { entries: vec![Candidate::sentinel()] }
    }

    /// Appends unless the same sentence is already present.
    pub fn push(&mut self, c: Candidate) -> bool {
        if self.index_of(&c.doc_id, c.sentence_index).is_some() {
            return false;
        }
        self.entries.push(c);
        true
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize) -> Option<&Candidate> {
        self.entries.get(i)
    }

    pub fn displays(&self) -> Vec<String> {
        self.entries.iter().map(Candidate::display).collect()
    }

    pub fn index_of(&self, doc_id: &str, sentence_index: usize) -> Option<usize> {
        self.entries.iter().skip(1).position(|c| c.doc_id == doc_id && c.sentence_index == sentence_index).map(|i| i + 1)
    }

    /// Position of a gold reference; the sentinel for the no-sentence marker.
    pub fn gold_index(&self, checked: &CheckedSentence) -> Option<usize> {
        match checked {
            CheckedSentence::NoSentence => Some(0),
            CheckedSentence::Ref { doc_id, sentence_index } => self.index_of(doc_id, *sentence_index),
        }
    }

    pub fn contains_display(&self, text: &str) -> bool {
        self.entries.iter().any(|c| c.display() == text)
    }

    /// Keeps the sentinel plus the given entries (indices into this set).
    pub fn restricted(&self, keep: &[usize]) -> Self {
        let mut s = Self::new();
        for &i in keep {
            if let Some(c) = self.entries.get(i).filter(|c| !c.is_sentinel()) {
                s.push(c.clone());
            }
        }
        s
    }
}

/// The up-to-three retrieval queries of a turn: topic, last turn, the one
/// before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySpec {
    texts: Vec<String>,
}

impl QuerySpec {
    /// `last_turns` is most recent first; extra entries beyond two are ignored.
    pub fn new(topic: &str, last_turns: &[&str]) -> Self {
        let mut texts = vec![topic.to_string()];
        texts.extend(last_turns.iter().take(2).map(|s| s.to_string()));
        Self { texts }
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }
}

/// Sentinel, then the topic article's first ten sentences, then the first
/// paragraphs of the top seven articles for each query in order, dropping
/// sentences already present.
pub fn build_knowledge_candidates(
    index: &InvertedIndex,
    kb: &KnowledgeBase,
    topic: &str,
    topic_doc: &str,
    last_turns: &[&str],
) -> Result<CandidateSet> {
    let doc = kb.get(topic_doc).ok_or_else(|| Error::NotFound(format!("topic document {topic_doc:?}")))?;
    let mut set = CandidateSet::new();
    for (i, s) in doc.sentences.iter().take(TOPIC_SENTENCES).enumerate() {
        set.push(Candidate { title: doc.title.clone(), sentence: s.clone(), doc_id: doc.doc_id.clone(), sentence_index: i });
    }
    for q in QuerySpec::new(topic, last_turns).texts() {
        for art in retrieve_articles(index, kb, q, ARTICLES_PER_QUERY) {
            for (i, s) in art.sentences.into_iter().enumerate() {
                set.push(Candidate { title: art.title.clone(), sentence: s, doc_id: art.doc_id.clone(), sentence_index: i });
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::KnowledgeDocument;

    fn kb(docs: &[(&str, &str)]) -> KnowledgeBase {
        KnowledgeBase::from_documents(docs.iter().map(|(id, text)| KnowledgeDocument::new(id, "", vec![text.to_string()])).collect())
            .unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn terms_drop_stop_words_for_unigrams_only() {
        assert_eq!(terms("The cat", 2), vec!["cat", "the cat"]);
        assert_eq!(terms("The cat", 1), vec!["cat"]);
    }

    #[test]
    fn bad_bucket_count() {
        let k = kb(&[("a", "x")]);
        assert!(InvertedIndex::build(&k, IndexConfig { bucket_count: 1000, ngram_order: 1 }).is_err());
        assert!(InvertedIndex::build(&k, IndexConfig { bucket_count: 1024, ngram_order: 3 }).is_err());
    }

    #[test]
    fn empty_query_is_empty() {
        let k = kb(&[("a", "cats sit"), ("b", "dogs run")]);
        let idx = InvertedIndex::build(&k, IndexConfig::default()).unwrap();
        assert!(idx.score_documents("", 7).is_empty());
        assert!(idx.score_documents("the of and", 7).is_empty());
    }

    #[test]
    fn binary_round_trip() {
        let k = kb(&[("a", "cats sit on mats"), ("b", "dogs run far"), ("c", "cats and dogs")]);
        let idx = InvertedIndex::build(&k, IndexConfig { bucket_count: 1 << 12, ngram_order: 2 }).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..4], b"KGTI");
        assert_eq!(InvertedIndex::read_from(&bytes[..]).unwrap(), idx);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(InvertedIndex::read_from(&bad[..]).is_err());
        assert!(InvertedIndex::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn candidate_set_dedups_and_rejects_missing_sentinel() {
        let mut s = CandidateSet::new();
        let c = Candidate { title: "T".into(), sentence: "x".into(), doc_id: "d".into(), sentence_index: 0 };
        assert!(s.push(c.clone()));
        assert!(!s.push(c.clone()));
        assert_eq!(s.len(), 2);
        assert_eq!(s.displays(), vec!["no_passages_used".to_string(), "T : x".to_string()]);
        let json = serde_json::json!({ "entries": [c] });
        assert!(serde_json::from_value::<CandidateSet>(json).is_err());
        let back: CandidateSet = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
