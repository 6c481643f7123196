//! Retrieval Transformer Memory Network: attend over knowledge, add the
//! result to the context encoding, rank candidate responses by cosine.

use std::collections::HashMap;

use kgdialog_nn::{Graph, ParamSource, ParamStore, TransformerConfig, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{TextCodec, TurnExample};
use crate::error::{Error, Result};
use crate::knowledge_selection::{knowledge_scores, selection_from_scores, EncoderKind, SelectionResult, SentenceEncoder, Selector};
use crate::metrics::{clopper_pearson, normalize_tokens, recall_at_1, unigram_f1};
use crate::train::{train_loop, TrainConfig, TrainLog};

/// Which knowledge the context representation attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// Soft attention over every candidate.
    Attention,
    /// No knowledge: the representation is the context encoding alone.
    None,
    /// Candidates reduced to the gold sentence.
    Gold,
    /// Candidates reduced to the hard top-1 of a separate selector.
    TwoStage,
}

/// Resolved knowledge input for one example.
pub enum Knowledge<'a> {
    None,
    All(&'a [Vec<u32>]),
    One(&'a [u32]),
}

/// Picks the knowledge input for `ex` under `mode`. Two-stage needs the
/// selector; gold mode needs a gold index.
pub fn knowledge_input<'a>(
    ex: &'a TurnExample,
    mode: KnowledgeMode,
    selector: Option<(&Selector, &ParamStore)>,
) -> Result<Knowledge<'a>> {
    Ok(match mode {
        KnowledgeMode::None => Knowledge::None,
        KnowledgeMode::Attention => Knowledge::All(&ex.knowledge),
        KnowledgeMode::Gold => {
            Knowledge::One(ex.gold_knowledge().ok_or_else(|| Error::Invalid("gold mode needs a gold sentence".into()))?)
        }
        KnowledgeMode::TwoStage => {
            let (sel, store) = selector.ok_or_else(|| Error::Config("two-stage mode needs a selector".into()))?;
            Knowledge::One(&ex.knowledge[sel.select(store, ex)?.best_index])
        }
    })
}

/// Softmax temperature of the in-batch cosine table.
pub const COSINE_SCALE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct RetrievalModel {
    pub lhs: SentenceEncoder,
    pub rhs: SentenceEncoder,
}

impl RetrievalModel {
    pub fn new(src: &mut ParamSource, cfg: &TransformerConfig) -> Result<Self> {
        Ok(Self {
            lhs: SentenceEncoder::new(src, "lhs", cfg, EncoderKind::Transformer)?,
            rhs: SentenceEncoder::new(src, "rhs", cfg, EncoderKind::Transformer)?,
        })
    }

    pub fn init(store: &mut ParamStore, cfg: &TransformerConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::new(&mut ParamSource::Init { store, rng: &mut rng }, cfg)
    }

    pub fn bind(store: &ParamStore, cfg: &TransformerConfig) -> Result<Self> {
        Self::new(&mut ParamSource::Bind(store), cfg)
    }

    /// `enc(x) + sum_i attention_i * enc(m_i)`, shape `[1, d]`.
    pub fn rep_lhs(&self, g: &mut Graph, context: &[u32], knowledge: &Knowledge) -> Result<Var> {
        let cands: Vec<&[u32]> = match knowledge {
            Knowledge::None => Vec::new(),
            Knowledge::All(k) => k.iter().map(Vec::as_slice).collect(),
            Knowledge::One(k) => vec![*k],
        };
        if matches!(knowledge, Knowledge::All(k) if k.is_empty()) {
            return Err(Error::Invalid("no knowledge candidates".into()));
        }
        let mut seqs = vec![context];
        seqs.extend(cands.iter().copied());
        let all = self.lhs.encode(g, &seqs)?;
        let ctx = g.slice_rows(all, 0, 1)?;
        if cands.is_empty() {
            return Ok(ctx);
        }
        let mem = g.slice_rows(all, 1, cands.len())?;
        let scores = g.matmul_t(ctx, mem, false, true)?;
        let att = g.softmax_rows(scores);
        let read = g.matmul(att, mem)?;
        Ok(g.add(ctx, read)?)
    }

    /// Knowledge attention of the LHS encoder for one context.
    pub fn attention(&self, store: &ParamStore, context: &[u32], knowledge: &[Vec<u32>]) -> Result<SelectionResult> {
        let mut g = Graph::new(store);
        let s = knowledge_scores(&mut g, &self.lhs, context, knowledge)?;
        Ok(selection_from_scores(g.value(s).data().to_vec(), None))
    }

    pub fn rep_rhs<S: AsRef<[u32]>>(&self, g: &mut Graph, responses: &[S]) -> Result<Var> {
        self.rhs.encode(g, responses)
    }

    pub fn lhs_vector(&self, store: &ParamStore, context: &[u32], knowledge: &Knowledge) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let v = self.rep_lhs(&mut g, context, knowledge)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn rhs_vectors<S: AsRef<[u32]>>(&self, store: &ParamStore, responses: &[S]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store);
        let v = self.rep_rhs(&mut g, responses)?;
        let a = g.value(v);
        Ok((0..a.rows()).map(|r| a.row(r).to_vec()).collect())
    }

    /// `[B, B]` table of LHS . RHS cosines times `COSINE_SCALE`, the
    /// training counterpart of `score_responses`.
    pub fn score_table(&self, g: &mut Graph, batch: &[&TurnExample], knowledge: &[Knowledge]) -> Result<Var> {
        let mut lhs = Vec::with_capacity(batch.len());
        for (ex, k) in batch.iter().zip(knowledge) {
            lhs.push(self.rep_lhs(g, &ex.context, k)?);
        }
        let l = g.concat_rows(&lhs)?;
        let responses: Vec<&[u32]> = batch.iter().map(|e| e.response.as_slice()).collect();
        let r = self.rep_rhs(g, &responses)?;
        let l = g.l2_normalize_rows(l)?;
        let r = g.l2_normalize_rows(r)?;
        let t = g.matmul_t(l, r, false, true)?;
        Ok(g.scale(t, COSINE_SCALE))
    }

    /// Softmax cross-entropy of each row of the score table against its
    /// own response (the diagonal).
    pub fn in_batch_loss(&self, g: &mut Graph, batch: &[&TurnExample], knowledge: &[Knowledge]) -> Result<Var> {
        if batch.len() < 2 {
            return Err(Error::Config("in-batch training needs at least 2 examples per batch".into()));
        }
        let table = self.score_table(g, batch, knowledge)?;
        let targets: Vec<u32> = (0..batch.len() as u32).collect();
        Ok(g.cross_entropy(table, &targets)?)
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Invalid("zero-norm representation".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Ranks pool entries by cosine with `lhs`: `(index, score)`, descending,
/// ties by lower index.
pub fn score_responses(lhs: &[f64], pool: &[Vec<f64>]) -> Result<Vec<(usize, f64)>> {
    if pool.is_empty() {
        return Err(Error::Invalid("empty response pool".into()));
    }
    let l = unit(lhs)?;
    let mut out = Vec::with_capacity(pool.len());
    for (i, r) in pool.iter().enumerate() {
        let r = unit(r)?;
        out.push((i, kgdialog_nn::array::dot(&l, &r)));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Responses with cached unit-norm RHS encodings.
#[derive(Clone, Debug, Default)]
pub struct ResponsePool {
    pub responses: Vec<String>,
    pub encodings: Vec<Vec<f64>>,
}

impl ResponsePool {
    pub fn build(model: &RetrievalModel, store: &ParamStore, codec: &TextCodec, responses: Vec<String>) -> Result<Self> {
        let mut encodings = Vec::with_capacity(responses.len());
        for chunk in responses.chunks(64) {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|r| codec.response_ids(r)).map(nonempty).collect();
            for v in model.rhs_vectors(store, &ids)? {
                encodings.push(unit(&v)?);
            }
        }
        Ok(Self { responses, encodings })
    }

    /// Best response for a context representation.
    pub fn best(&self, lhs: &[f64]) -> Result<(usize, f64)> {
        Ok(score_responses(lhs, &self.encodings)?[0])
    }
}

fn nonempty(mut ids: Vec<u32>) -> Vec<u32> {
    if ids.is_empty() {
        ids.push(kgdialog_nn::bpe::UNK);
    }
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTraining {
    pub log: TrainLog,
    pub skipped: usize,
}

/// In-batch negative training. Gold/two-stage modes skip turns whose gold
/// sentence was not retrieved.
pub fn train_retrieval(
    model: &RetrievalModel,
    store: &mut ParamStore,
    examples: &[TurnExample],
    mode: KnowledgeMode,
    cfg: &TrainConfig,
) -> Result<RetrievalTraining> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2 for in-batch negatives".into()));
    }
    if mode == KnowledgeMode::TwoStage {
        return Err(Error::Config("two-stage retrieval trains with gold knowledge; use gold mode".into()));
    }
    let usable: Vec<&TurnExample> = examples.iter().filter(|e| mode != KnowledgeMode::Gold || e.gold_index.is_some()).collect();
    let skipped = examples.len() - usable.len();
    let log = train_loop(store, usable.len(), cfg, false, |g, batch| {
        let b: Vec<&TurnExample> = batch.iter().map(|&i| usable[i]).collect();
        let k = b.iter().map(|e| knowledge_input(e, mode, None)).collect::<Result<Vec<_>>>()?;
        model.in_batch_loss(g, &b, &k)
    })?;
    Ok(RetrievalTraining { log, skipped })
}

/// Fraction (percent) of rows whose own response scores highest by cosine
/// within consecutive batches of `batch_size`.
pub fn in_batch_recall(
    model: &RetrievalModel,
    store: &ParamStore,
    examples: &[TurnExample],
    mode: KnowledgeMode,
    batch_size: usize,
) -> Result<f64> {
    let usable: Vec<&TurnExample> = examples.iter().filter(|e| mode != KnowledgeMode::Gold || e.gold_index.is_some()).collect();
    let mut ranks = Vec::new();
    for batch in usable.chunks(batch_size) {
        let responses: Vec<&[u32]> = batch.iter().map(|e| e.response.as_slice()).collect();
        let rhs = model.rhs_vectors(store, &responses)?;
        for (i, ex) in batch.iter().enumerate() {
            let lhs = model.lhs_vector(store, &ex.context, &knowledge_input(ex, mode, None)?)?;
            let ranked = score_responses(&lhs, &rhs)?;
            ranks.push(ranked.iter().position(|r| r.0 == i).unwrap() + 1);
        }
    }
    recall_at_1(&ranks)
}

/// A candidate pool of one test turn.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPool {
    pub responses: Vec<String>,
    pub gold: usize,
    /// Copies of the gold text found among the distractor source and
    /// dropped.
    pub gold_duplicates: usize,
}

/// Gold plus `size - 1` distractors sampled without replacement from the
/// distinct `utterances` whose normalized text differs from the gold; the
/// gold lands at a random position.
pub fn seeded_pool(gold: &str, utterances: &[String], size: usize, rng: &mut ChaCha8Rng) -> Result<EvalPool> {
    let key = |s: &str| normalize_tokens(s).join(" ");
    let gold_key = key(gold);
    let mut seen = std::collections::HashSet::new();
    let mut distinct = Vec::new();
    let mut gold_duplicates = 0;
    for u in utterances {
        let k = key(u);
        if k == gold_key {
            gold_duplicates += 1;
        } else if seen.insert(k) {
            distinct.push(u.as_str());
        }
    }
    if size == 0 || distinct.len() < size - 1 {
        return Err(Error::Invalid(format!("need {} distractors, only {} available", size.saturating_sub(1), distinct.len())));
    }
    let mut responses: Vec<String> =
        index::sample(rng, distinct.len(), size - 1).into_iter().map(|i| distinct[i].to_string()).collect();
    let gold_pos = rng.random_range(0..size);
    responses.insert(gold_pos, gold.to_string());
    Ok(EvalPool { responses, gold: gold_pos, gold_duplicates })
}

pub trait ResponseScorer {
    fn scores(&mut self, ex: &TurnExample, pool: &[String]) -> Result<Vec<f64>>;
}

pub struct RandomResponses(pub ChaCha8Rng);

impl ResponseScorer for RandomResponses {
    fn scores(&mut self, _ex: &TurnExample, pool: &[String]) -> Result<Vec<f64>> {
        Ok((0..pool.len()).map(|_| self.0.random::<f64>()).collect())
    }
}

/// Peeks at the gold response.
pub struct OracleResponses;

impl ResponseScorer for OracleResponses {
    fn scores(&mut self, ex: &TurnExample, pool: &[String]) -> Result<Vec<f64>> {
        Ok(pool.iter().map(|r| if *r == ex.response_text { 1.0 } else { 0.0 }).collect())
    }
}

/// The trained model, caching RHS encodings by text.
pub struct ModelResponses<'a> {
    pub model: &'a RetrievalModel,
    pub store: &'a ParamStore,
    pub codec: &'a TextCodec,
    pub mode: KnowledgeMode,
    pub selector: Option<(&'a Selector, &'a ParamStore)>,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> ModelResponses<'a> {
    pub fn new(
        model: &'a RetrievalModel,
        store: &'a ParamStore,
        codec: &'a TextCodec,
        mode: KnowledgeMode,
        selector: Option<(&'a Selector, &'a ParamStore)>,
    ) -> Self {
        Self { model, store, codec, mode, selector, cache: HashMap::new() }
    }
}

impl ResponseScorer for ModelResponses<'_> {
    fn scores(&mut self, ex: &TurnExample, pool: &[String]) -> Result<Vec<f64>> {
        let missing: Vec<&String> = pool.iter().filter(|r| !self.cache.contains_key(*r)).collect();
        if !missing.is_empty() {
            let ids: Vec<Vec<u32>> = missing.iter().map(|r| nonempty(self.codec.response_ids(r))).collect();
            for (r, v) in missing.iter().zip(self.model.rhs_vectors(self.store, &ids)?) {
                self.cache.insert((*r).clone(), v);
            }
        }
        let lhs = self.model.lhs_vector(self.store, &ex.context, &knowledge_input(ex, self.mode, self.selector)?)?;
        let encs: Vec<Vec<f64>> = pool.iter().map(|r| self.cache[r].clone()).collect();
        let mut scores = vec![0.0; pool.len()];
        for (i, s) in score_responses(&lhs, &encs)? {
            scores[i] = s;
        }
        Ok(scores)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub recall_at_1: f64,
    pub f1: f64,
    pub n: usize,
    /// 95% Clopper-Pearson interval on R@1, in percent.
    pub ci95: (f64, f64),
    pub pool_size: usize,
}

/// R@1 and F1 of the top-ranked response over seeded pools, `trials`
/// passes over `examples` (each pass draws fresh pools).
pub fn eval_retrieval(
    scorer: &mut dyn ResponseScorer,
    examples: &[TurnExample],
    utterances: &[String],
    pool_size: usize,
    seed: u64,
    trials: usize,
) -> Result<RetrievalEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ranks = Vec::new();
    let mut f1 = 0.0;
    for _ in 0..trials {
        for ex in examples {
            let pool = seeded_pool(&ex.response_text, utterances, pool_size, &mut rng)?;
            let scores = scorer.scores(ex, &pool.responses)?;
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            ranks.push(order.iter().position(|&i| i == pool.gold).unwrap() + 1);
            f1 += unigram_f1(&pool.responses[order[0]], &ex.response_text);
        }
    }
    let n = ranks.len();
    let hits = ranks.iter().filter(|&&r| r == 1).count();
    let (lo, hi) = clopper_pearson(hits, n, 0.05);
    Ok(RetrievalEval { recall_at_1: recall_at_1(&ranks)?, f1: 100.0 * f1 / n as f64, n, ci95: (100.0 * lo, 100.0 * hi), pool_size })
}
