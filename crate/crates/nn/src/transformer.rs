//! Pre-LayerNorm Transformer encoder and decoder over packed batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{NnError, Result};
use crate::graph::{Graph, SegPair, Segment, Var};
use crate::params::{ParamId, ParamStore};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 64,
            ffn_dim: 128,
            max_len: 128,
            vocab_size: 2000,
            dropout_rate: 0.0,
            seed: 17,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(NnError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Several token sequences laid end to end. Positions are kept per token so
/// a sequence built from a padded row keeps its original positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Packed {
    pub ids: Vec<u32>,
    pub positions: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl Packed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut p = Self::new();
        for s in seqs {
            p.push(s.as_ref());
        }
        p
    }

    pub fn push(&mut self, seq: &[u32]) -> Segment {
        let seg = Segment::new(self.ids.len(), seq.len());
        self.ids.extend_from_slice(seq);
        self.positions.extend(0..seq.len() as u32);
        self.segments.push(seg);
        seg
    }

    /// Keeps only unmasked tokens of each padded row.
    pub fn from_padded(ids: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(NnError::Shape("mask batch size differs from ids".into()));
        }
        let mut p = Self::new();
        for (row, m) in ids.iter().zip(mask) {
            if row.len() != m.len() {
                return Err(NnError::Shape("mask row length differs from ids".into()));
            }
            let start = p.ids.len();
            for (pos, (&id, &keep)) in row.iter().zip(m).enumerate() {
                if keep {
                    p.ids.push(id);
                    p.positions.push(pos as u32);
                }
            }
            p.segments.push(Segment::new(start, p.ids.len() - start));
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn self_pairs(&self) -> Vec<SegPair> {
        self.segments.iter().map(|&s| SegPair { q: s, k: s }).collect()
    }

    /// `n` back-to-back copies of the whole batch.
    pub fn repeat(&self, n: usize) -> Self {
        let mut p = Self::new();
        for _ in 0..n {
            let off = p.ids.len();
            p.ids.extend_from_slice(&self.ids);
            p.positions.extend_from_slice(&self.positions);
            p.segments.extend(self.segments.iter().map(|s| Segment::new(s.start + off, s.len)));
        }
        p
    }

    fn check(&self, cfg: &TransformerConfig) -> Result<()> {
        for &id in &self.ids {
            if id as usize >= cfg.vocab_size {
                return Err(NnError::TokenOutOfRange { id, vocab: cfg.vocab_size });
            }
        }
        for &pos in &self.positions {
            if pos as usize >= cfg.max_len {
                return Err(NnError::TooLong { len: pos as usize + 1, max: cfg.max_len });
            }
        }
        if self.segments.iter().any(|s| s.len == 0) {
            return Err(NnError::Shape("empty sequence in batch".into()));
        }
        Ok(())
    }
}

enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Creates fresh parameters or binds to existing ones by name.
pub enum ParamSource<'a> {
    Init { store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng },
    Bind(&'a ParamStore),
}

impl ParamSource<'_> {
    fn get(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<ParamId> {
        match self {
            ParamSource::Init { store, rng } => match kind {
                InitKind::Normal => store.add_normal(name, shape, INIT_STD, *rng),
                InitKind::Zeros => store.add_filled(name, shape, 0.0),
                InitKind::Ones => store.add_filled(name, shape, 1.0),
            },
            ParamSource::Bind(store) => store.expect(name, shape),
        }
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> Result<ParamId> {
        self.get(name, &[rows, dim], InitKind::Normal)
    }
}

#[derive(Clone, Debug)]
struct LayerNormParams {
    g: ParamId,
    b: ParamId,
}

impl LayerNormParams {
    fn new(src: &mut ParamSource, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            g: src.get(&format!("{name}.g"), &[d], InitKind::Ones)?,
            b: src.get(&format!("{name}.b"), &[d], InitKind::Zeros)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gv, bv) = (g.param(self.g), g.param(self.b));
        g.layer_norm(x, gv, bv)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(src: &mut ParamSource, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: src.get(&format!("{name}.w"), &[inp, out], InitKind::Normal)?,
            b: src.get(&format!("{name}.b"), &[out], InitKind::Zeros)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Debug)]
struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    fn new(src: &mut ParamSource, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(src, &format!("{name}.q"), d, d)?,
            k: Linear::new(src, &format!("{name}.k"), d, d)?,
            v: Linear::new(src, &format!("{name}.v"), d, d)?,
            o: Linear::new(src, &format!("{name}.o"), d, d)?,
        })
    }

    fn forward(&self, g: &mut Graph, heads: usize, xq: Var, xkv: Var, pairs: &[SegPair], causal: bool) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let a = g.attention(q, k, v, heads, pairs, causal)?;
        self.o.forward(g, a)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(src: &mut ParamSource, name: &str, d: usize, f: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(src, &format!("{name}.up"), d, f)?,
            down: Linear::new(src, &format!("{name}.down"), f, d)?,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNormParams,
    attn: MultiHeadAttention,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNormParams,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNormParams,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
}

fn embed_tokens(g: &mut Graph, embed: ParamId, pos: ParamId, input: &Packed) -> Result<Var> {
    let e = g.param(embed);
    let p = g.param(pos);
    let tok = g.embed(e, &input.ids)?;
    let posv = g.embed(p, &input.positions)?;
    g.add(tok, posv)
}

/// Token encoder. The output is the residual stream of the last layer with
/// no final normalization, so untrained encodings stay near zero.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: TransformerConfig,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(src: &mut ParamSource, prefix: &str, cfg: &TransformerConfig, embed: ParamId) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let pos = src.get(&format!("{prefix}.pos"), &[cfg.max_len, d], InitKind::Normal)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("{prefix}.l{i}");
            layers.push(EncoderLayer {
                ln_attn: LayerNormParams::new(src, &format!("{n}.ln_attn"), d)?,
                attn: MultiHeadAttention::new(src, &format!("{n}.attn"), d)?,
                ln_ffn: LayerNormParams::new(src, &format!("{n}.ln_ffn"), d)?,
                ffn: FeedForward::new(src, &format!("{n}.ffn"), d, cfg.ffn_dim)?,
            });
        }
        Ok(Self { cfg: cfg.clone(), embed, pos, layers })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Every parameter the encoder reads, including the shared embedding.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.pos];
        for l in &self.layers {
            for ln in [&l.ln_attn, &l.ln_ffn] {
                ids.extend([ln.g, ln.b]);
            }
            for lin in [&l.attn.q, &l.attn.k, &l.attn.v, &l.attn.o, &l.ffn.up, &l.ffn.down] {
                ids.extend([lin.w, lin.b]);
            }
        }
        ids
    }

    /// Per-token states `[input.len(), model_dim]`.
    pub fn forward(&self, g: &mut Graph, input: &Packed) -> Result<Var> {
        input.check(&self.cfg)?;
        let pairs = input.self_pairs();
        let rate = self.cfg.dropout_rate;
        let mut x = embed_tokens(g, self.embed, self.pos, input)?;
        x = g.dropout(x, rate);
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, x)?;
            let h = layer.attn.forward(g, self.cfg.heads, h, h, &pairs, false)?;
            let h = g.dropout(h, rate);
            x = g.add(x, h)?;
            let h = layer.ln_ffn.forward(g, x)?;
            let h = layer.ffn.forward(g, h)?;
            let h = g.dropout(h, rate);
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

/// Causal decoder with cross-attention; output logits use the tied token
/// embedding.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: TransformerConfig,
    embed: ParamId,
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNormParams,
}

impl Decoder {
    pub fn new(src: &mut ParamSource, prefix: &str, cfg: &TransformerConfig, embed: ParamId) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let pos = src.get(&format!("{prefix}.pos"), &[cfg.max_len, d], InitKind::Normal)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let n = format!("{prefix}.l{i}");
            layers.push(DecoderLayer {
                ln_self: LayerNormParams::new(src, &format!("{n}.ln_self"), d)?,
                self_attn: MultiHeadAttention::new(src, &format!("{n}.self"), d)?,
                ln_cross: LayerNormParams::new(src, &format!("{n}.ln_cross"), d)?,
                cross_attn: MultiHeadAttention::new(src, &format!("{n}.cross"), d)?,
                ln_ffn: LayerNormParams::new(src, &format!("{n}.ln_ffn"), d)?,
                ffn: FeedForward::new(src, &format!("{n}.ffn"), d, cfg.ffn_dim)?,
            });
        }
        let ln_out = LayerNormParams::new(src, &format!("{prefix}.ln_out"), d)?;
        Ok(Self { cfg: cfg.clone(), embed, pos, layers, ln_out })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Next-token logits `[targets.len(), vocab]`. Target segment `i`
    /// cross-attends to `memory_segments[i]` rows of `memory`.
    pub fn forward(&self, g: &mut Graph, targets: &Packed, memory: Var, memory_segments: &[Segment]) -> Result<Var> {
        targets.check(&self.cfg)?;
        if memory_segments.len() != targets.segments.len() {
            return Err(NnError::Shape(format!(
                "{} target sequences but {} memory segments",
                targets.segments.len(),
                memory_segments.len()
            )));
        }
        if memory_segments.iter().any(|s| s.len == 0) {
            return Err(NnError::Shape("zero-length encoder states".into()));
        }
        if g.value(memory).cols() != self.cfg.model_dim {
            return Err(NnError::Shape("encoder state width differs from model_dim".into()));
        }
        let self_pairs = targets.self_pairs();
        let cross_pairs: Vec<SegPair> = targets
            .segments
            .iter()
            .zip(memory_segments)
            .map(|(&q, &k)| SegPair { q, k })
            .collect();
        let rate = self.cfg.dropout_rate;
        let heads = self.cfg.heads;
        let mut x = embed_tokens(g, self.embed, self.pos, targets)?;
        x = g.dropout(x, rate);
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, x)?;
            let h = layer.self_attn.forward(g, heads, h, h, &self_pairs, true)?;
            let h = g.dropout(h, rate);
            x = g.add(x, h)?;
            let h = layer.ln_cross.forward(g, x)?;
            let h = layer.cross_attn.forward(g, heads, h, memory, &cross_pairs, false)?;
            let h = g.dropout(h, rate);
            x = g.add(x, h)?;
            let h = layer.ln_ffn.forward(g, x)?;
            let h = layer.ffn.forward(g, h)?;
            let h = g.dropout(h, rate);
            x = g.add(x, h)?;
        }
        let h = self.ln_out.forward(g, x)?;
        let e = g.param(self.embed);
        g.matmul_t(h, e, false, true)
    }
}

/// Encoder-decoder sharing one token embedding.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub embed: ParamId,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Seq2Seq {
    pub fn new(src: &mut ParamSource, prefix: &str, cfg: &TransformerConfig) -> Result<Self> {
        let embed = src.embedding(&format!("{prefix}.embed"), cfg.vocab_size, cfg.model_dim)?;
        let encoder = Encoder::new(src, &format!("{prefix}.enc"), cfg, embed)?;
        let decoder = Decoder::new(src, &format!("{prefix}.dec"), cfg, embed)?;
        Ok(Self { embed, encoder, decoder })
    }

    /// Fresh parameters drawn from `cfg.seed`.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &TransformerConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::new(&mut ParamSource::Init { store, rng: &mut rng }, prefix, cfg)
    }

    pub fn config(&self) -> &TransformerConfig {
        self.encoder.config()
    }

    /// Logits for teacher-forced decoding of `tgt_in` given `src`, pairing
    /// sequences by index.
    pub fn logits(&self, g: &mut Graph, src: &Packed, tgt_in: &Packed) -> Result<Var> {
        let memory = self.encoder.forward(g, src)?;
        self.decoder.forward(g, tgt_in, memory, &src.segments)
    }

    /// Mean token negative log-likelihood over the batch. With `groups > 1`
    /// the result is one mean per equal block of rows.
    pub fn nll(&self, g: &mut Graph, src: &Packed, tgt_in: &Packed, targets: &[u32], groups: usize) -> Result<Var> {
        let logits = self.logits(g, src, tgt_in)?;
        g.cross_entropy_grouped(logits, targets, groups)
    }
}

/// Splits a response into decoder input `[bos, y..]` and targets `[y.., eos]`.
pub fn teacher_forcing(response: &[u32], bos: u32, eos: u32) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(response.len() + 1);
    input.push(bos);
    input.extend_from_slice(response);
    let mut target = response.to_vec();
    target.push(eos);
    (input, target)
}

/// Runs the encoder on a padded batch. Returns `(batch, seq, model_dim)`;
/// masked positions are zero and never influence unmasked ones.
pub fn encoder_forward(encoder: &Encoder, store: &ParamStore, token_ids: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Array> {
    let seq = token_ids.first().map_or(0, Vec::len);
    if token_ids.iter().any(|r| r.len() != seq) {
        return Err(NnError::Shape("token rows must share a padded length".into()));
    }
    let packed = Packed::from_padded(token_ids, mask)?;
    let mut g = Graph::new(store);
    let states = encoder.forward(&mut g, &packed)?;
    Ok(unpack(g.value(states), token_ids.len(), seq, mask))
}

/// Runs the decoder on padded targets against padded encoder states
/// `(batch, src_seq, d)`. Returns logits `(batch, tgt_seq, vocab)`; causal
/// masking is always applied.
pub fn decoder_forward(
    decoder: &Decoder,
    store: &ParamStore,
    target_ids: &[Vec<u32>],
    encoder_states: &Array,
    target_mask: &[Vec<bool>],
    source_mask: &[Vec<bool>],
) -> Result<Array> {
    let shape = encoder_states.shape();
    if shape.len() != 3 || shape[0] != target_ids.len() || shape[0] != source_mask.len() {
        return Err(NnError::Shape(format!("encoder states {shape:?} do not match batch")));
    }
    let (batch, src_len, d) = (shape[0], shape[1], shape[2]);
    if src_len == 0 {
        return Err(NnError::Shape("zero-length encoder states".into()));
    }
    let tgt_len = target_ids.first().map_or(0, Vec::len);
    let targets = Packed::from_padded(target_ids, target_mask)?;
    let mut rows = Vec::new();
    let mut segs = Vec::with_capacity(batch);
    for (b, m) in source_mask.iter().enumerate() {
        if m.len() != src_len {
            return Err(NnError::Shape("source mask length".into()));
        }
        let start = rows.len() / d;
        for (s, &keep) in m.iter().enumerate() {
            if keep {
                let off = (b * src_len + s) * d;
                rows.extend_from_slice(&encoder_states.data()[off..off + d]);
            }
        }
        segs.push(Segment::new(start, rows.len() / d - start));
    }
    let n = rows.len() / d;
    let mut g = Graph::new(store);
    let memory = g.input(Array::matrix(n, d, rows)?);
    let logits = decoder.forward(&mut g, &targets, memory, &segs)?;
    Ok(unpack(g.value(logits), batch, tgt_len, target_mask))
}

fn unpack(packed: &Array, batch: usize, seq: usize, mask: &[Vec<bool>]) -> Array {
    let d = packed.cols();
    let mut out = Array::zeros(&[batch, seq, d]);
    let mut r = 0;
    for (b, m) in mask.iter().enumerate() {
        for (s, &keep) in m.iter().enumerate() {
            if keep {
                let dst = (b * seq + s) * d;
                out.data_mut()[dst..dst + d].copy_from_slice(packed.row(r));
                r += 1;
            }
        }
    }
    out
}
