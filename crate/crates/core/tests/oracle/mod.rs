//! Reference implementations written independently of the library: an
//! exhaustive TF-IDF scorer, the per-turn candidate protocol and a tabular
//! language model with exhaustive search.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use kgdialog_core::beam::StepScorer;
use kgdialog_core::corpus::{KnowledgeBase, KnowledgeDocument};
use kgdialog_core::retriever::{IndexConfig, InvertedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STOPS: &str = "a an and are as at be but by for from has he i in is it its of on or that the this to was were will with you";

fn fnv(s: &str) -> u64 {
    s.bytes().fold(14695981039346656037u64, |h, b| (h ^ u64::from(b)).wrapping_mul(1099511628211))
}

fn oracle_terms(text: &str, order: u8) -> Vec<String> {
    let stops: HashSet<&str> = STOPS.split(' ').collect();
    let mut toks = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            toks.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        toks.push(cur);
    }
    let mut out: Vec<String> = toks.iter().filter(|t| !stops.contains(t.as_str())).cloned().collect();
    if order == 2 {
        for i in 1..toks.len() {
            out.push(format!("{} {}", toks[i - 1], toks[i]));
        }
    }
    out
}

pub fn doc_text(d: &KnowledgeDocument) -> String {
    let end = d.para_breaks.first().copied().unwrap_or(d.sentences.len());
    std::iter::once(d.title.clone()).chain(d.sentences[..end].iter().cloned()).collect::<Vec<_>>().join(" ")
}

pub fn counts(text: &str, cfg: IndexConfig) -> BTreeMap<u64, u32> {
    let mut m = BTreeMap::new();
    for t in oracle_terms(text, cfg.ngram_order) {
        *m.entry(fnv(&t) % cfg.bucket_count).or_insert(0) += 1;
    }
    m
}

/// Exhaustive scorer: every document's full weighted vector against the
/// query's, no postings involved.
pub struct BruteForce<'a> {
    kb: &'a KnowledgeBase,
    cfg: IndexConfig,
    docs: Vec<BTreeMap<u64, u32>>,
}

impl<'a> BruteForce<'a> {
    pub fn new(kb: &'a KnowledgeBase, cfg: IndexConfig) -> Self {
        let docs = kb.documents().iter().map(|d| counts(&doc_text(d), cfg)).collect();
        Self { kb, cfg, docs }
    }

    fn idf(&self, b: u64) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.docs.iter().filter(|d| d.contains_key(&b)).count() as f64;
        f64::max(0.0, ((n - df + 0.5) / (df + 0.5)).ln())
    }

    /// Every document with a positive score, best first, ties by id.
    pub fn score(&self, query: &str) -> Vec<(String, f64)> {
        let q = counts(query, self.cfg);
        let idf: HashMap<u64, f64> = q.keys().map(|b| (*b, self.idf(*b))).collect();
        let mut scored: Vec<(String, f64)> = self
            .kb
            .documents()
            .iter()
            .zip(&self.docs)
            .map(|(d, dv)| {
                let s: f64 = q
                    .iter()
                    .filter_map(|(b, &qtf)| dv.get(b).map(|&tf| (1.0 + qtf as f64).ln() * (1.0 + tf as f64).ln() * idf[b].powi(2)))
                    .sum();
                (d.doc_id.clone(), s)
            })
            .filter(|(_, s)| *s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        scored
    }
}

pub fn brute_force(kb: &KnowledgeBase, cfg: IndexConfig, query: &str) -> Vec<(String, f64)> {
    BruteForce::new(kb, cfg).score(query)
}

/// Why `got` differs from `want`, if it does: order must be identical and
/// scores equal to `rel` relative error.
pub fn ranking_mismatch(got: &[(String, f64)], want: &[(String, f64)], rel: f64) -> Option<String> {
    let ids = |v: &[(String, f64)]| v.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    if ids(got) != ids(want) {
        return Some(format!("order {:?} vs {:?}", ids(got), ids(want)));
    }
    got.iter()
        .zip(want)
        .find(|(g, w)| (g.1 - w.1).abs() > rel * w.1.abs())
        .map(|(g, w)| format!("{}: {} vs {}", g.0, g.1, w.1))
}

/// Straight-line statement of the per-turn protocol, as
/// (doc_id, sentence_index, display) triples.
pub fn oracle_candidates(idx: &InvertedIndex, kb: &KnowledgeBase, topic: &str, topic_doc: &str, last: &[&str]) -> Vec<(String, usize, String)> {
    let mut out = vec![(String::new(), 0, "no_passages_used".to_string())];
    let mut seen = HashSet::new();
    let doc = kb.get(topic_doc).unwrap();
    for i in 0..doc.sentences.len().min(10) {
        if seen.insert((doc.doc_id.clone(), i)) {
            out.push((doc.doc_id.clone(), i, format!("{} : {}", doc.title, doc.sentences[i])));
        }
    }
    let mut queries = vec![topic];
    queries.extend(last.iter().take(2));
    for q in queries {
        let top = brute_force(kb, idx.config(), q);
        for (id, _) in top.iter().take(7) {
            let d = kb.get(id).unwrap();
            let end = d.para_breaks.first().copied().unwrap_or(d.sentences.len());
            for i in 0..end {
                if seen.insert((id.clone(), i)) {
                    out.push((id.clone(), i, format!("{} : {}", d.title, d.sentences[i])));
                }
            }
        }
    }
    out
}

/// Tokens {0 = EOS, 1, 2}; a fixed distribution per prefix.
pub struct ToyLm(pub HashMap<Vec<u32>, [f64; 3]>);

impl ToyLm {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = HashMap::new();
        let mut prefixes = vec![vec![]];
        for _ in 0..3 {
            let mut next = Vec::new();
            for p in &prefixes {
                let w: [f64; 3] = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
                let z: f64 = w.iter().sum();
                table.insert(p.clone(), [w[0] / z, w[1] / z, w[2] / z]);
                for t in 1..3u32 {
                    let mut q: Vec<u32> = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            prefixes = next;
        }
        Self(table)
    }

    /// Greedy opens with 1 (0.6); the best sequence is [2] then EOS,
    /// probability 0.4 * 0.9.
    pub fn hand_built() -> Self {
        let mut t = HashMap::new();
        t.insert(vec![], [0.0, 0.6, 0.4]);
        t.insert(vec![1], [0.3, 0.35, 0.35]);
        t.insert(vec![2], [0.9, 0.05, 0.05]);
        for p in [vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]] {
            t.insert(p, [0.5, 0.25, 0.25]);
        }
        for a in 1..3u32 {
            for b in 1..3u32 {
                for c in 1..3u32 {
                    t.insert(vec![a, b, c], [1.0, 0.0, 0.0]);
                }
            }
        }
        Self(t)
    }

    pub fn prob(&self, prefix: &[u32], tok: u32) -> f64 {
        self.0[prefix][tok as usize]
    }
}

impl StepScorer for ToyLm {
    fn log_probs(&self, prefix: &[u32]) -> kgdialog_core::Result<Vec<f64>> {
        Ok(self.0[prefix].iter().map(|p| p.ln()).collect())
    }
    fn eos(&self) -> u32 {
        0
    }
}

/// Every sequence of at most `max_len` tokens: EOS-terminated ones score
/// their EOS step, length-`max_len` ones are closed for free.
pub fn exhaustive_search(lm: &ToyLm, max_len: usize) -> (Vec<u32>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        if seq.len() == max_len {
            if lp > best.1 {
                best = (seq, lp);
            }
            continue;
        }
        let done = lp + lm.prob(&seq, 0).ln();
        if done > best.1 {
            best = (seq.clone(), done);
        }
        for t in 1..3u32 {
            let mut s = seq.clone();
            s.push(t);
            let l = lp + lm.prob(&seq, t).ln();
            stack.push((s, l));
        }
    }
    best
}
