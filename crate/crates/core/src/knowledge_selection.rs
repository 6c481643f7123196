//! Dot-product attention over knowledge candidates and the standalone
//! knowledge-selection task.

use kgdialog_nn::{argmax, softmax, Array, Encoder, Graph, Packed, ParamId, ParamSource, ParamStore, Pooling, TransformerConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TurnExample;
use crate::error::{Error, Result};
use crate::metrics::{recall_at_1, unigram_f1};
use crate::train::{mean_of, train_loop, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    pub attention: Vec<f64>,
    pub best_index: usize,
    pub gold_index: Option<usize>,
}

/// `(sum of the first `length` rows) / sqrt(length)`.
pub fn flatten_encoding(states: &Array, length: usize) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::Invalid("cannot flatten a zero-length encoding".into()));
    }
    if length > states.rows() {
        return Err(Error::Invalid(format!("length {length} exceeds {} rows", states.rows())));
    }
    let mut out = vec![0.0; states.cols()];
    for r in 0..length {
        for (o, v) in out.iter_mut().zip(states.row(r)) {
            *o += v;
        }
    }
    let s = (length as f64).sqrt();
    out.iter_mut().for_each(|o| *o /= s);
    Ok(out)
}

/// Scores are dot products with the context; attention is their softmax.
pub fn attend_knowledge(ctx: &[f64], candidates: &[Vec<f64>]) -> Result<SelectionResult> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no knowledge candidates".into()));
    }
    if candidates.iter().any(|c| c.len() != ctx.len()) {
        return Err(Error::Invalid("candidate encoding width differs from context".into()));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| kgdialog_nn::array::dot(ctx, c)).collect();
    Ok(selection_from_scores(scores, None))
}

pub fn selection_from_scores(scores: Vec<f64>, gold_index: Option<usize>) -> SelectionResult {
    let attention = softmax(&scores);
    let best_index = argmax(&scores).unwrap_or(0);
    SelectionResult { scores, attention, best_index, gold_index }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    /// Mean of token embeddings.
    Bow,
}

/// Maps token sequences to one vector each.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    kind: EncoderKind,
    embed: ParamId,
    encoder: Option<Encoder>,
    max_len: usize,
}

impl SentenceEncoder {
    pub fn new(src: &mut ParamSource, prefix: &str, cfg: &TransformerConfig, kind: EncoderKind) -> Result<Self> {
        cfg.validate()?;
        let embed = src.embedding(&format!("{prefix}.embed"), cfg.vocab_size, cfg.model_dim)?;
        let encoder = match kind {
            EncoderKind::Transformer => Some(Encoder::new(src, &format!("{prefix}.enc"), cfg, embed)?),
            EncoderKind::Bow => None,
        };
        Ok(Self { kind, embed, encoder, max_len: cfg.max_len })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    /// Per-token states of all sequences packed end to end.
    pub fn token_states(&self, g: &mut Graph, packed: &Packed) -> Result<Var> {
        match &self.encoder {
            Some(enc) => Ok(enc.forward(g, packed)?),
            None => {
                let e = g.param(self.embed);
                Ok(g.embed(e, &packed.ids)?)
            }
        }
    }

    /// `[seqs.len(), model_dim]`: sqrt-length flattening for the
    /// Transformer, plain mean for bag-of-words.
    pub fn encode<S: AsRef<[u32]>>(&self, g: &mut Graph, seqs: &[S]) -> Result<Var> {
        let seqs: Vec<&[u32]> = seqs.iter().map(|s| &s.as_ref()[..s.as_ref().len().min(self.max_len)]).collect();
        let packed = Packed::from_sequences(&seqs);
        let states = self.token_states(g, &packed)?;
        let pooling = match self.kind {
            EncoderKind::Transformer => Pooling::SqrtLen,
            EncoderKind::Bow => Pooling::Mean,
        };
        Ok(g.pool(states, &packed.segments, pooling)?)
    }
}

/// Knowledge scores `[1, K]` of one context against its candidates, both
/// encoded by `enc`.
pub fn knowledge_scores(g: &mut Graph, enc: &SentenceEncoder, context: &[u32], knowledge: &[Vec<u32>]) -> Result<Var> {
    if knowledge.is_empty() {
        return Err(Error::Invalid("no knowledge candidates".into()));
    }
    let mut seqs: Vec<&[u32]> = vec![context];
    seqs.extend(knowledge.iter().map(Vec::as_slice));
    let all = enc.encode(g, &seqs)?;
    let ctx = g.slice_rows(all, 0, 1)?;
    let cands = g.slice_rows(all, 1, knowledge.len())?;
    Ok(g.matmul_t(ctx, cands, false, true)?)
}

/// Standalone knowledge selector.
#[derive(Clone, Debug)]
pub struct Selector {
    pub encoder: SentenceEncoder,
}

impl Selector {
    pub const PREFIX: &'static str = "sel";

    pub fn new(src: &mut ParamSource, cfg: &TransformerConfig, kind: EncoderKind) -> Result<Self> {
        Ok(Self { encoder: SentenceEncoder::new(src, Self::PREFIX, cfg, kind)? })
    }

    pub fn init(store: &mut ParamStore, cfg: &TransformerConfig, kind: EncoderKind) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::new(&mut ParamSource::Init { store, rng: &mut rng }, cfg, kind)
    }

    pub fn bind(store: &ParamStore, cfg: &TransformerConfig, kind: EncoderKind) -> Result<Self> {
        Self::new(&mut ParamSource::Bind(store), cfg, kind)
    }

    pub fn scores(&self, g: &mut Graph, ex: &TurnExample) -> Result<Var> {
        knowledge_scores(g, &self.encoder, &ex.context, &ex.knowledge)
    }

    pub fn select(&self, store: &ParamStore, ex: &TurnExample) -> Result<SelectionResult> {
        let mut g = Graph::new(store);
        let s = self.scores(&mut g, ex)?;
        Ok(selection_from_scores(g.value(s).data().to_vec(), ex.gold_index))
    }

    /// Mean cross-entropy of the attention against the gold index over a
    /// batch.
    pub fn loss(&self, g: &mut Graph, batch: &[&TurnExample]) -> Result<Var> {
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let gold = ex.gold_index.ok_or_else(|| Error::Invalid("selector example without gold".into()))?;
            let s = self.scores(g, ex)?;
            parts.push(g.cross_entropy(s, &[gold as u32])?);
        }
        mean_of(g, &parts)
    }
}

/// Examples usable for selection: gold present in the candidates.
pub fn with_gold(examples: &[TurnExample]) -> (Vec<&TurnExample>, usize) {
    let usable: Vec<&TurnExample> = examples.iter().filter(|e| e.gold_index.is_some()).collect();
    let skipped = examples.len() - usable.len();
    (usable, skipped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorTraining {
    pub log: TrainLog,
    /// Turns left out because retrieval missed the gold sentence.
    pub skipped: usize,
}

pub fn train_selector(selector: &Selector, store: &mut ParamStore, examples: &[TurnExample], cfg: &TrainConfig) -> Result<SelectorTraining> {
    let (usable, skipped) = with_gold(examples);
    let log = train_loop(store, usable.len(), cfg, false, |g, batch| {
        let b: Vec<&TurnExample> = batch.iter().map(|&i| usable[i]).collect();
        selector.loss(g, &b)
    })?;
    Ok(SelectorTraining { log, skipped })
}

/// Anything that scores the candidates of a turn.
pub trait KnowledgeScorer {
    fn scores(&mut self, ex: &TurnExample) -> Result<Vec<f64>>;
}

pub struct ModelScorer<'a> {
    pub selector: &'a Selector,
    pub store: &'a ParamStore,
}

impl KnowledgeScorer for ModelScorer<'_> {
    fn scores(&mut self, ex: &TurnExample) -> Result<Vec<f64>> {
        Ok(self.selector.select(self.store, ex)?.scores)
    }
}

/// Word-overlap count between context and candidate text.
pub struct IrScorer;

impl KnowledgeScorer for IrScorer {
    fn scores(&mut self, ex: &TurnExample) -> Result<Vec<f64>> {
        let ctx: std::collections::HashSet<String> = crate::retriever::tokenize(&ex.context_text).into_iter().collect();
        Ok(ex
            .candidates
            .entries()
            .iter()
            .map(|c| {
                if c.is_sentinel() {
                    return 0.0;
                }
                crate::retriever::terms(&c.sentence, 1).iter().filter(|t| ctx.contains(*t)).count() as f64
            })
            .collect())
    }
}

pub struct RandomScorer(pub ChaCha8Rng);

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl KnowledgeScorer for RandomScorer {
    fn scores(&mut self, ex: &TurnExample) -> Result<Vec<f64>> {
        Ok((0..ex.candidates.len()).map(|_| self.0.random::<f64>()).collect())
    }
}

/// Peeks at the gold label.
pub struct OracleScorer;

impl KnowledgeScorer for OracleScorer {
    fn scores(&mut self, ex: &TurnExample) -> Result<Vec<f64>> {
        Ok((0..ex.candidates.len()).map(|i| if Some(i) == ex.gold_index { 1.0 } else { 0.0 }).collect())
    }
}

pub struct ConstantScorer;

impl KnowledgeScorer for ConstantScorer {
    fn scores(&mut self, ex: &TurnExample) -> Result<Vec<f64>> {
        Ok(vec![0.0; ex.candidates.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEval {
    pub recall_at_1: f64,
    /// Mean unigram F1 (x100) of chosen vs gold sentence, titles excluded.
    pub f1: f64,
    pub n: usize,
    pub skipped: usize,
    pub mean_candidates: f64,
}

pub fn eval_selector(scorer: &mut dyn KnowledgeScorer, examples: &[TurnExample]) -> Result<SelectionEval> {
    let (usable, skipped) = with_gold(examples);
    let mut ranks = Vec::with_capacity(usable.len());
    let mut f1 = 0.0;
    let mut cands = 0;
    for ex in &usable {
        let gold = ex.gold_index.unwrap();
        let scores = scorer.scores(ex)?;
        if scores.len() != ex.candidates.len() {
            return Err(Error::Invalid("scorer returned the wrong number of scores".into()));
        }
        let best = argmax(&scores).unwrap_or(0);
        ranks.push(if best == gold { 1 } else { 2 });
        let chosen = &ex.candidates.entries()[best].sentence;
        let truth = &ex.candidates.entries()[gold].sentence;
        f1 += unigram_f1(chosen, truth);
        cands += ex.candidates.len();
    }
    let n = usable.len();
    Ok(SelectionEval {
        recall_at_1: recall_at_1(&ranks)?,
        f1: 100.0 * f1 / n as f64,
        n,
        skipped,
        mean_candidates: cands as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_spot_cases() {
        let r = attend_knowledge(&[1.0, 2.0], &[vec![0.5, 0.5]]).unwrap();
        assert_eq!(r.attention, vec![1.0]);
        let r = attend_knowledge(&[1.0, 2.0], &[vec![0.3, 0.1], vec![0.3, 0.1]]).unwrap();
        assert_eq!(r.attention, vec![0.5, 0.5]);
        assert_eq!(r.best_index, 0);
        let r = attend_knowledge(&[0.0, 0.0], &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert!(r.attention.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        assert!(attend_knowledge(&[1.0], &[]).is_err());
    }

    #[test]
    fn flatten_spot_cases() {
        let one = Array::matrix(1, 2, vec![3.0, -1.0]).unwrap();
        assert_eq!(flatten_encoding(&one, 1).unwrap(), vec![3.0, -1.0]);
        let four = Array::matrix(4, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(flatten_encoding(&four, 4).unwrap(), vec![2.0, 4.0]);
        assert!(flatten_encoding(&four, 0).is_err());
    }
}
