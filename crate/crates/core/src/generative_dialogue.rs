//! Generative Transformer Memory Networks. The end-to-end model scores the
//! knowledge with its own encoder, picks the hard top-1 sentence, and
//! decodes from the concatenated encodings of that sentence and the
//! context. The two-stage model gets its sentence from a separate selector.

use kgdialog_nn::bpe::{BOS, EOS, NO_KNOWLEDGE};
use kgdialog_nn::{
    argmax, log_softmax, teacher_forcing, Array, Graph, Packed, ParamSource, ParamStore, Pooling, Segment, Seq2Seq,
    TransformerConfig, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{beam_decode, BeamConfig, Hypothesis, StepScorer};
use crate::codec::{TextCodec, TurnExample};
use crate::error::{Error, Result};
use crate::knowledge_selection::{selection_from_scores, SelectionResult, Selector};
use crate::metrics::{perplexity, recall_at_1, unigram_f1};
use crate::retriever::CandidateSet;
use crate::train::{mean_of, train_loop, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EndToEnd,
    TwoStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub variant: Variant,
    /// Weight of the knowledge loss in `(1 - lambda) * nll + lambda * knowledge`.
    pub lambda: f64,
    pub knowledge_dropout: f64,
    pub beam_size: usize,
    pub max_decode_len: usize,
    pub length_normalize: bool,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        Self {
            variant: Variant::EndToEnd,
            lambda: 0.5,
            knowledge_dropout: 0.5,
            beam_size: 5,
            max_decode_len: 32,
            length_normalize: false,
        }
    }
}

impl GenerativeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.knowledge_dropout) {
            return Err(Error::Config(format!("knowledge dropout {} outside [0, 1]", self.knowledge_dropout)));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig { beam_size: self.beam_size, max_len: self.max_decode_len, length_normalize: self.length_normalize }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Training-time masking of the knowledge input.
#[derive(Clone, Debug)]
pub struct KnowledgeDropout {
    p: f64,
    rng: ChaCha8Rng,
    pub draws: u64,
    pub fired: u64,
}

impl KnowledgeDropout {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("knowledge dropout {p} outside [0, 1]")));
        }
        Ok(Self { p, rng: ChaCha8Rng::seed_from_u64(seed), draws: 0, fired: 0 })
    }

    /// One Bernoulli(p) draw. Refuses to run outside training.
    pub fn draw(&mut self, phase: Phase) -> Result<bool> {
        if phase != Phase::Train {
            return Err(Error::Invalid("knowledge dropout is training-only".into()));
        }
        self.draws += 1;
        let fire = self.p >= 1.0 || (self.p > 0.0 && self.rng.random::<f64>() < self.p);
        self.fired += u64::from(fire);
        Ok(fire)
    }

    /// The candidates, or the sentinel-only set when the draw fires.
    pub fn apply(&mut self, phase: Phase, candidates: &CandidateSet) -> Result<(CandidateSet, bool)> {
        Ok(if self.draw(phase)? { (CandidateSet::new(), true) } else { (candidates.clone(), false) })
    }
}

/// How the decoder's knowledge sentence is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    /// Hard argmax of the model's knowledge scores.
    Predicted,
    Forced(usize),
}

pub struct ForwardItem<'a> {
    pub context: &'a [u32],
    pub knowledge: Vec<&'a [u32]>,
    pub choice: Choice,
    pub response: &'a [u32],
}

pub struct ForwardOutput {
    /// Mean token NLL over every response token of the batch, EOS included.
    pub nll: Var,
    /// `[tokens, 1]` per-token NLL.
    pub token_nll: Var,
    /// `[1, K_i]` per item.
    pub knowledge_scores: Vec<Var>,
    pub m_best: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub seq: Seq2Seq,
}

impl GenerativeModel {
    pub const PREFIX: &'static str = "gen";

    pub fn new(src: &mut ParamSource, cfg: &TransformerConfig) -> Result<Self> {
        Ok(Self { seq: Seq2Seq::new(src, Self::PREFIX, cfg)? })
    }

    pub fn init(store: &mut ParamStore, cfg: &TransformerConfig) -> Result<Self> {
        Ok(Self { seq: Seq2Seq::init(store, Self::PREFIX, cfg)? })
    }

    pub fn bind(store: &ParamStore, cfg: &TransformerConfig) -> Result<Self> {
        Self::new(&mut ParamSource::Bind(store), cfg)
    }

    pub fn config(&self) -> &TransformerConfig {
        self.seq.config()
    }

    fn clip<'a>(&self, ids: &'a [u32]) -> &'a [u32] {
        &ids[..ids.len().min(self.config().max_len)]
    }

    /// Teacher-forced forward over a batch: knowledge scores, hard choice,
    /// and response NLL with the decoder reading `[enc(m_best); enc(ctx)]`.
    pub fn forward(&self, g: &mut Graph, items: &[ForwardItem]) -> Result<ForwardOutput> {
        let mut packed = Packed::new();
        let mut layout = Vec::with_capacity(items.len());
        for item in items {
            if item.knowledge.is_empty() {
                return Err(Error::Invalid("no knowledge candidates".into()));
            }
            if item.response.is_empty() {
                return Err(Error::Invalid("empty gold response".into()));
            }
            let first = packed.segments.len();
            packed.push(self.clip(item.context));
            for k in &item.knowledge {
                packed.push(self.clip(k));
            }
            layout.push(first);
        }
        let states = self.seq.encoder.forward(g, &packed)?;
        let pooled = g.pool(states, &packed.segments, Pooling::SqrtLen)?;
        let mut scores = Vec::with_capacity(items.len());
        let mut m_best = Vec::with_capacity(items.len());
        let mut memories = Vec::with_capacity(items.len());
        let mut mem_segs = Vec::with_capacity(items.len());
        let mut mem_rows = 0;
        for (item, &first) in items.iter().zip(&layout) {
            let k = item.knowledge.len();
            let ctx = g.slice_rows(pooled, first, 1)?;
            let cands = g.slice_rows(pooled, first + 1, k)?;
            let s = g.matmul_t(ctx, cands, false, true)?;
            let best = match item.choice {
                Choice::Predicted => argmax(g.value(s).data()).unwrap_or(0),
                Choice::Forced(i) if i < k => i,
                Choice::Forced(i) => return Err(Error::Invalid(format!("forced knowledge {i} of {k}"))),
            };
            let kseg = packed.segments[first + 1 + best];
            let cseg = packed.segments[first];
            let kn = g.slice_rows(states, kseg.start, kseg.len)?;
            let cx = g.slice_rows(states, cseg.start, cseg.len)?;
            memories.push(g.concat_rows(&[kn, cx])?);
            mem_segs.push(Segment::new(mem_rows, kseg.len + cseg.len));
            mem_rows += kseg.len + cseg.len;
            scores.push(s);
            m_best.push(best);
        }
        let memory = g.concat_rows(&memories)?;
        let mut tgt = Packed::new();
        let mut targets = Vec::new();
        for item in items {
            let resp = &item.response[..item.response.len().min(self.config().max_len - 1)];
            let (tin, tout) = teacher_forcing(resp, BOS, EOS);
            tgt.push(&tin);
            targets.extend(tout);
        }
        let logits = self.seq.decoder.forward(g, &tgt, memory, &mem_segs)?;
        let token_nll = g.cross_entropy_grouped(logits, &targets, targets.len())?;
        let total = g.sum_all(token_nll);
        let nll = g.scale(total, 1.0 / targets.len() as f64);
        Ok(ForwardOutput { nll, token_nll, knowledge_scores: scores, m_best })
    }

    /// Knowledge scores of one turn with this model's encoder.
    pub fn select(&self, store: &ParamStore, context: &[u32], knowledge: &[Vec<u32>]) -> Result<SelectionResult> {
        let enc = &self.seq.encoder;
        let mut g = Graph::new(store);
        let mut seqs: Vec<&[u32]> = vec![self.clip(context)];
        seqs.extend(knowledge.iter().map(|k| self.clip(k)));
        let packed = Packed::from_sequences(&seqs);
        let states = enc.forward(&mut g, &packed)?;
        let pooled = g.pool(states, &packed.segments, Pooling::SqrtLen)?;
        let ctx = g.slice_rows(pooled, 0, 1)?;
        let cands = g.slice_rows(pooled, 1, knowledge.len())?;
        let s = g.matmul_t(ctx, cands, false, true)?;
        Ok(selection_from_scores(g.value(s).data().to_vec(), None))
    }

    /// Encoder states `[enc(knowledge); enc(context)]` for decoding.
    pub fn memory(&self, store: &ParamStore, context: &[u32], knowledge: &[u32]) -> Result<Array> {
        let mut g = Graph::new(store);
        let packed = Packed::from_sequences(&[self.clip(knowledge), self.clip(context)]);
        let states = self.seq.encoder.forward(&mut g, &packed)?;
        Ok(g.value(states).clone())
    }

    pub fn decoder_step<'a>(&'a self, store: &'a ParamStore, memory: Array) -> DecodeStep<'a> {
        DecodeStep { model: self, store, memory }
    }

    /// Beam-decodes a response conditioned on one knowledge sentence.
    pub fn generate(&self, store: &ParamStore, context: &[u32], knowledge: &[u32], beam: BeamConfig) -> Result<Hypothesis> {
        let mut beam = beam;
        beam.max_len = beam.max_len.min(self.config().max_len - 1);
        let step = self.decoder_step(store, self.memory(store, context, knowledge)?);
        beam_decode(&step, beam)
    }

    /// Per-token NLL of the gold response given a fixed knowledge sentence.
    pub fn token_nlls(&self, store: &ParamStore, context: &[u32], knowledge: &[u32], response: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let out = self.forward(
            &mut g,
            &[ForwardItem { context, knowledge: vec![knowledge], choice: Choice::Forced(0), response }],
        )?;
        Ok(g.value(out.token_nll).data().to_vec())
    }
}

/// Next-token distribution of the decoder over fixed encoder states.
pub struct DecodeStep<'a> {
    model: &'a GenerativeModel,
    store: &'a ParamStore,
    memory: Array,
}

impl StepScorer for DecodeStep<'_> {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.store);
        let mem = g.input(self.memory.clone());
        let mut seq = vec![BOS];
        seq.extend_from_slice(prefix);
        let tgt = Packed::from_sequences(&[seq]);
        let logits = self.model.seq.decoder.forward(&mut g, &tgt, mem, &[Segment::new(0, self.memory.rows())])?;
        let v = g.value(logits);
        Ok(log_softmax(v.row(v.rows() - 1)))
    }

    fn eos(&self) -> u32 {
        EOS
    }
}

/// Cross-entropy of each item's knowledge scores at its gold index.
pub fn knowledge_loss(g: &mut Graph, knowledge_scores: &[Var], gold: &[usize]) -> Result<Var> {
    if knowledge_scores.len() != gold.len() {
        return Err(Error::Invalid("one gold index per score row required".into()));
    }
    let mut parts = Vec::with_capacity(gold.len());
    for (&s, &t) in knowledge_scores.iter().zip(gold) {
        parts.push(g.cross_entropy(s, &[t as u32])?);
    }
    mean_of(g, &parts)
}

/// `(1 - lambda) * nll + lambda * knowledge_loss`.
pub fn combined_loss(g: &mut Graph, nll: Var, knowledge_scores: &[Var], gold: &[usize], lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let kl = knowledge_loss(g, knowledge_scores, gold)?;
    let a = g.scale(nll, 1.0 - lambda);
    let b = g.scale(kl, lambda);
    Ok(g.add(a, b)?)
}

const SENTINEL_ONLY: [u32; 1] = [NO_KNOWLEDGE];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeTraining {
    pub log: TrainLog,
    pub skipped: usize,
    pub dropout_draws: u64,
    pub dropout_fired: u64,
}

/// Trains on turns whose gold sentence was retrieved. The decoder reads
/// the gold sentence (the selection is learned through the knowledge
/// loss); with knowledge dropout the candidates collapse to the sentinel.
/// The two-stage generator sees only its gold sentence and trains on NLL.
pub fn train_generative(
    model: &GenerativeModel,
    store: &mut ParamStore,
    examples: &[TurnExample],
    gen: &GenerativeConfig,
    cfg: &TrainConfig,
) -> Result<GenerativeTraining> {
    gen.validate()?;
    let usable: Vec<&TurnExample> = examples.iter().filter(|e| e.gold_index.is_some()).collect();
    let skipped = examples.len() - usable.len();
    let mut kd = KnowledgeDropout::new(gen.knowledge_dropout, cfg.seed ^ 0x6b64)?;
    let dropout = model.config().dropout_rate > 0.0;
    let log = train_loop(store, usable.len(), cfg, dropout, |g, batch| {
        let mut items = Vec::with_capacity(batch.len());
        let mut gold = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = usable[i];
            let g_idx = ex.gold_index.unwrap();
            let (knowledge, target): (Vec<&[u32]>, usize) = if kd.draw(Phase::Train)? {
                (vec![&SENTINEL_ONLY[..]], 0)
            } else if gen.variant == Variant::TwoStage {
                (vec![ex.knowledge[g_idx].as_slice()], 0)
            } else {
                (ex.knowledge.iter().map(Vec::as_slice).collect(), g_idx)
            };
            items.push(ForwardItem { context: &ex.context, knowledge, choice: Choice::Forced(target), response: &ex.response });
            gold.push(target);
        }
        let out = model.forward(g, &items)?;
        let lambda = if gen.variant == Variant::TwoStage { 0.0 } else { gen.lambda };
        combined_loss(g, out.nll, &out.knowledge_scores, &gold, lambda)
    })?;
    Ok(GenerativeTraining { log, skipped, dropout_draws: kd.draws, dropout_fired: kd.fired })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Predicted,
    Gold,
}

/// Where predicted knowledge comes from.
pub enum Picker<'a> {
    /// The generative model's own scores.
    Own,
    Selector(&'a Selector, &'a ParamStore),
    /// Uniformly random candidate, seeded.
    Random(ChaCha8Rng),
}

impl Picker<'_> {
    pub fn pick(&mut self, model: &GenerativeModel, store: &ParamStore, ex: &TurnExample) -> Result<usize> {
        Ok(match self {
            Picker::Own => model.select(store, &ex.context, &ex.knowledge)?.best_index,
            Picker::Selector(sel, s) => sel.select(s, ex)?.best_index,
            Picker::Random(rng) => rng.random_range(0..ex.knowledge.len()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeEval {
    /// Per BPE token, EOS included.
    pub ppl: f64,
    /// Mean unigram F1 (x100) of the beam output against the gold response.
    pub f1: f64,
    pub n: usize,
    pub tokens: usize,
    /// Knowledge R@1 of the choices made.
    pub knowledge_r1: f64,
    pub skipped: usize,
}

/// PPL and F1 over turns with a retrieved gold sentence. `decode = false`
/// skips beam search (F1 reported as 0).
pub fn eval_generative(
    model: &GenerativeModel,
    store: &ParamStore,
    codec: &TextCodec,
    examples: &[TurnExample],
    source: KnowledgeSource,
    picker: &mut Picker,
    gen: &GenerativeConfig,
    decode: bool,
) -> Result<GenerativeEval> {
    let usable: Vec<&TurnExample> = examples.iter().filter(|e| e.gold_index.is_some()).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no evaluable turns".into()));
    }
    let mut nlls = Vec::new();
    let mut f1 = 0.0;
    let mut ranks = Vec::with_capacity(usable.len());
    for ex in &usable {
        let gold = ex.gold_index.unwrap();
        let k = match source {
            KnowledgeSource::Gold => gold,
            KnowledgeSource::Predicted => picker.pick(model, store, ex)?,
        };
        ranks.push(if k == gold { 1 } else { 2 });
        nlls.extend(model.token_nlls(store, &ex.context, &ex.knowledge[k], &ex.response)?);
        if decode {
            let h = model.generate(store, &ex.context, &ex.knowledge[k], gen.beam())?;
            f1 += unigram_f1(&codec.decode(&h.tokens), &ex.response_text);
        }
    }
    Ok(GenerativeEval {
        ppl: perplexity(&nlls)?,
        f1: 100.0 * f1 / usable.len() as f64,
        n: usable.len(),
        tokens: nlls.len(),
        knowledge_r1: recall_at_1(&ranks)?,
        skipped: examples.len() - usable.len(),
    })
}

/// F1 (x100) of echoing the previous utterance as the response.
pub fn repeat_last_f1(examples: &[TurnExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no turns".into()));
    }
    Ok(100.0 * examples.iter().map(|e| unigram_f1(&e.last_utterance, &e.response_text)).sum::<f64>() / examples.len() as f64)
}
