//! Unigram F1, Recall@1, perplexity, Wiki F1 and report plumbing.
//!
//! Token normalization (shared by every F1 here): lowercase, delete ASCII
//! punctuation characters, split on whitespace.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::corpus::KnowledgeDocument;
use crate::error::{Error, Result};
use crate::retriever::TOPIC_SENTENCES;

pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Multiset-overlap F1 in [0, 1]; 0 when either side is empty.
pub fn unigram_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_tokens(prediction);
    let gold = normalize_tokens(gold);
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Percentage of examples whose gold item ranked first (ranks are 1-based).
pub fn recall_at_1(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("recall@1 of no examples".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Invalid("ranks are 1-based".into()));
    }
    Ok(100.0 * ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64)
}

/// `exp` of the mean per-token negative log-likelihood (nats).
pub fn perplexity(token_nlls: &[f64]) -> Result<f64> {
    if token_nlls.is_empty() {
        return Err(Error::Invalid("perplexity of no tokens".into()));
    }
    if token_nlls.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite token nll".into()));
    }
    Ok((token_nlls.iter().sum::<f64>() / token_nlls.len() as f64).exp())
}

/// Mean F1 (x100) of each utterance against the topic article's first ten
/// sentences joined together.
pub fn wiki_f1<S: AsRef<str>>(utterances: &[S], topic_doc: &KnowledgeDocument) -> Result<f64> {
    if topic_doc.sentences.is_empty() {
        return Err(Error::Invalid(format!("document {:?} has no sentences", topic_doc.doc_id)));
    }
    if utterances.is_empty() {
        return Err(Error::Invalid("wiki F1 of no utterances".into()));
    }
    let reference = topic_doc.sentences.iter().take(TOPIC_SENTENCES).cloned().collect::<Vec<_>>().join(" ");
    let total: f64 = utterances.iter().map(|u| unigram_f1(u.as_ref(), &reference)).sum();
    Ok(100.0 * total / utterances.len() as f64)
}

/// Exact (Clopper-Pearson) two-sided confidence interval for a binomial
/// proportion, `k` successes in `n` trials, level `1 - alpha`.
pub fn clopper_pearson(k: usize, n: usize, alpha: f64) -> (f64, f64) {
    assert!(n > 0 && k <= n);
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 { 0.0 } else { Beta::new(kf, nf - kf + 1.0).unwrap().inverse_cdf(alpha / 2.0) };
    let hi = if k == n { 1.0 } else { Beta::new(kf + 1.0, nf - kf).unwrap().inverse_cdf(1.0 - alpha / 2.0) };
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// One evaluation run: metric values with their example counts plus the
/// configuration that produced them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub metrics: Vec<MetricValue>,
    pub config_echo: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn new(split: &str) -> Self {
        Self { split: split.into(), ..Default::default() }
    }

    pub fn push(&mut self, metric: &str, value: f64, n: usize) {
        self.metrics.push(MetricValue { metric: metric.into(), value, n });
    }

    pub fn echo(&mut self, key: &str, value: impl Serialize) {
        self.config_echo.insert(key.into(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric).map(|m| m.value)
    }
}
