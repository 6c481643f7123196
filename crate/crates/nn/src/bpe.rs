//! Character-level byte-pair encoding.
//!
//! Text is cut into chunks that start at each space (the space belongs to
//! the following word), merges never cross chunk boundaries, and decoding is
//! plain concatenation of token strings. The literal `no_passages_used`
//! always maps to its own reserved id.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NO_KNOWLEDGE: u32 = 4;

/// Token string of the no-knowledge sentinel.
pub const NO_KNOWLEDGE_TEXT: &str = "no_passages_used";

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", NO_KNOWLEDGE_TEXT];

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BpeSpec {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "BpeSpec", into = "BpeSpec")]
pub struct BpeTokenizer {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
}

impl From<BpeTokenizer> for BpeSpec {
    fn from(t: BpeTokenizer) -> Self {
        BpeSpec { alphabet: t.alphabet, merges: t.merges }
    }
}

impl TryFrom<BpeSpec> for BpeTokenizer {
    type Error = NnError;

    fn try_from(spec: BpeSpec) -> Result<Self> {
        Self::from_parts(spec.alphabet, spec.merges)
    }
}

impl PartialEq for BpeTokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.alphabet == other.alphabet && self.merges == other.merges
    }
}

fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ' ' && i > start {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Splits around sentinel literals: `(piece, is_sentinel)`.
fn split_sentinel(text: &str) -> Vec<(&str, bool)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find(NO_KNOWLEDGE_TEXT) {
        if pos > 0 {
            out.push((&rest[..pos], false));
        }
        out.push((NO_KNOWLEDGE_TEXT, true));
        rest = &rest[pos + NO_KNOWLEDGE_TEXT.len()..];
    }
    if !rest.is_empty() {
        out.push((rest, false));
    }
    out
}

impl BpeTokenizer {
    fn from_parts(mut alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self> {
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, u32> = HashMap::new();
        for (i, s) in SPECIALS.iter().enumerate().skip(1) {
            // only the sentinel is reachable from text; the others are control ids
            if i as u32 == NO_KNOWLEDGE {
                ids.insert(s.to_string(), i as u32);
            }
        }
        for c in &alphabet {
            let s = c.to_string();
            if !ids.contains_key(&s) {
                ids.insert(s.clone(), vocab.len() as u32);
                vocab.push(s);
            }
        }
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            if !ids.contains_key(a) || !ids.contains_key(b) {
                return Err(NnError::Tokenizer(format!("merge ({a:?}, {b:?}) uses unknown tokens")));
            }
            let joined = format!("{a}{b}");
            if !ids.contains_key(&joined) {
                ids.insert(joined.clone(), vocab.len() as u32);
                vocab.push(joined);
            }
            ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }
        Ok(Self { alphabet, merges, vocab, ids, ranks })
    }

    /// Learns up to `merges` merge rules, greedily taking the most frequent
    /// adjacent pair (ties: lexicographically smallest pair). Stops early
    /// once no pair occurs at least twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], merges: usize) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(NnError::Tokenizer("empty training corpus".into()));
        }
        let mut alphabet = BTreeSet::new();
        let mut words: BTreeMap<&str, u64> = BTreeMap::new();
        for text in corpus {
            for (piece, sentinel) in split_sentinel(text.as_ref()) {
                if sentinel {
                    continue;
                }
                for chunk in chunks(piece) {
                    alphabet.extend(chunk.chars());
                    *words.entry(chunk).or_default() += 1;
                }
            }
        }
        let mut seqs: Vec<(Vec<String>, u64)> = words
            .into_iter()
            .map(|(w, n)| (w.chars().map(|c| c.to_string()).collect(), n))
            .collect();

        let mut learned = Vec::new();
        while learned.len() < merges {
            let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (seq, n) in &seqs {
                for pair in seq.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
                }
            }
            let best = counts
                .into_iter()
                .filter(|(_, n)| *n >= 2)
                .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let joined = format!("{a}{b}");
            for (seq, _) in &mut seqs {
                let mut i = 0;
                while i + 1 < seq.len() {
                    if seq[i] == a && seq[i + 1] == b {
                        seq[i] = joined.clone();
                        seq.remove(i + 1);
                    }
                    i += 1;
                }
            }
            learned.push((a, b));
        }
        Self::from_parts(alphabet.into_iter().collect(), learned)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<String> = chunk.chars().map(|c| c.to_string()).collect();
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(&r) = self.ranks.get(&(syms[i].clone(), syms[i + 1].clone())) {
                    if best.is_none_or(|(br, _)| r < br) {
                        best = Some((r, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut i = 0;
            while i + 1 < syms.len() {
                if &syms[i] == a && &syms[i + 1] == b {
                    syms[i] = format!("{a}{b}");
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        out.extend(syms.iter().map(|s| self.ids.get(s).copied().unwrap_or(UNK)));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for (piece, sentinel) in split_sentinel(text) {
            if sentinel {
                out.push(NO_KNOWLEDGE);
                continue;
            }
            for chunk in chunks(piece) {
                self.encode_chunk(chunk, &mut out);
            }
        }
        out
    }

    /// Concatenates token strings; control ids decode to nothing and
    /// unknown ids to U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => s.push('\u{FFFD}'),
                _ => match self.vocab.get(id as usize) {
                    Some(t) => s.push_str(t),
                    None => s.push('\u{FFFD}'),
                },
            }
        }
        s
    }
}
