//! Central finite-difference gradient checks.
//!
//! [`finite_differences`] perturbs the parameter store directly and is meant
//! for small models. [`check_seq2seq`] evaluates many probes per forward
//! pass: the batch is replicated once per probe and each copy sees its own
//! `±eps` offset of a single parameter element (see [`Perturbation`]).

use crate::array::Array;
use crate::error::{NnError, Result};
use crate::graph::{Graph, Perturbation};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::transformer::{teacher_forcing, Packed, Seq2Seq, TransformerConfig};

/// Denominator floor for relative error, so exact zeros and gradients at
/// rounding-noise scale compare by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Numeric gradient of `loss` w.r.t. every element of every parameter.
pub fn finite_differences<F>(store: &mut ParamStore, eps: f64, mut loss: F) -> Result<Vec<Array>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut g = Array::zeros(store.value(id).shape());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = loss(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = loss(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub elements: usize,
    pub max_rel_error: f64,
    pub failures: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn from_pairs(names: Vec<String>, analytic: &[Array], numeric: &[Array], tolerance: f64) -> Self {
        let mut params = Vec::new();
        for ((name, a), n) in names.into_iter().zip(analytic).zip(numeric) {
            let mut max_rel = 0.0f64;
            let mut failures = 0;
            for (x, y) in a.data().iter().zip(n.data()) {
                let e = relative_error(*x, *y);
                max_rel = max_rel.max(e);
                if e.is_nan() || e >= tolerance {
                    failures += 1;
                }
            }
            params.push(ParamCheck { name, elements: a.len(), max_rel_error: max_rel, failures });
        }
        Self {
            elements: params.iter().map(|p| p.elements).sum(),
            max_rel_error: params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max),
            failures: params.iter().map(|p| p.failures).sum(),
            params,
            tolerance,
        }
    }
}

/// Compares analytic gradients with `finite_differences` for any loss.
pub fn check_loss<F>(store: &mut ParamStore, eps: f64, tolerance: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<crate::graph::Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let analytic = dense_grads(store, &grads);
    let numeric = finite_differences(store, eps, |s| {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    })?;
    let names = store.iter().map(|(_, p)| p.name.clone()).collect();
    Ok(GradCheckReport::from_pairs(names, &analytic, &numeric, tolerance))
}

fn dense_grads(store: &ParamStore, grads: &ParamGrads) -> Vec<Array> {
    store
        .iter()
        .map(|(id, p)| grads.get(id).cloned().unwrap_or_else(|| Array::zeros(p.value.shape())))
        .collect()
}

/// One teacher-forced training pair for the encoder-decoder check.
#[derive(Clone, Debug)]
pub struct Seq2SeqExample {
    pub source: Vec<u32>,
    pub response: Vec<u32>,
}

/// Inputs for `Seq2Seq::nll` built from one example.
fn example_batch(ex: &Seq2SeqExample) -> (Packed, Packed, Vec<u32>) {
    let (tin, tout) = teacher_forcing(&ex.response, crate::bpe::BOS, crate::bpe::EOS);
    (Packed::from_sequences(&[&ex.source]), Packed::from_sequences(&[&tin]), tout)
}

/// Analytic gradient of the mean token NLL of `ex`.
pub fn seq2seq_gradients(store: &ParamStore, model: &Seq2Seq, ex: &Seq2SeqExample) -> Result<Vec<Array>> {
    let (src, tin, tout) = example_batch(ex);
    let mut g = Graph::new(store);
    let loss = model.nll(&mut g, &src, &tin, &tout, 1)?;
    let grads = g.backward(loss)?;
    Ok(dense_grads(store, &grads))
}

/// Numeric gradients for the elements `elems` of `param`, evaluating
/// `2 * elems.len()` perturbed copies in one forward pass.
pub fn seq2seq_numeric_batch(
    store: &ParamStore,
    model: &Seq2Seq,
    ex: &Seq2SeqExample,
    param: ParamId,
    elems: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    let (src, tin, tout) = example_batch(ex);
    let copies = 2 * elems.len();
    let deltas: Vec<(usize, f64)> = elems.iter().flat_map(|&e| [(e, eps), (e, -eps)]).collect();
    let mut g = Graph::with_perturbation(store, Perturbation { param, deltas });
    let targets: Vec<u32> = tout.iter().copied().cycle().take(tout.len() * copies).collect();
    let loss = if model.encoder.param_ids().contains(&param) {
        model.nll(&mut g, &src.repeat(copies), &tin.repeat(copies), &targets, copies)?
    } else {
        // encoder output is the same for every copy: run it once and tile it
        let memory = model.encoder.forward(&mut g, &src)?;
        let memory = g.concat_rows(&vec![memory; copies])?;
        let segs = src.repeat(copies).segments;
        let logits = model.decoder.forward(&mut g, &tin.repeat(copies), memory, &segs)?;
        g.cross_entropy_grouped(logits, &targets, copies)?
    };
    if g.perturbation_hits() == 0 {
        return Err(NnError::Config(format!(
            "parameter `{}` is not reachable by perturbation",
            store.get(param).name
        )));
    }
    let l = g.value(loss).data();
    Ok((0..elems.len()).map(|i| (l[2 * i] - l[2 * i + 1]) / (2.0 * eps)).collect())
}

/// Checks every element of every parameter of an encoder-decoder built
/// from `cfg` against central differences.
pub fn check_seq2seq(cfg: &TransformerConfig, ex: &Seq2SeqExample, eps: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let model = Seq2Seq::init(&mut store, "gc", cfg)?;
    let analytic = seq2seq_gradients(&store, &model, ex)?;
    const PROBES_PER_PASS: usize = 256;
    let mut numeric = Vec::with_capacity(analytic.len());
    for (id, p) in store.iter() {
        let n = p.value.len();
        let mut g = Vec::with_capacity(n);
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(PROBES_PER_PASS) {
            g.extend(seq2seq_numeric_batch(&store, &model, ex, id, chunk, eps)?);
        }
        numeric.push(Array::new(p.value.shape().to_vec(), g)?);
    }
    let names = store.iter().map(|(_, p)| p.name.clone()).collect();
    Ok(GradCheckReport::from_pairs(names, &analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Pooling, SegPair, Segment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let ids = shapes.iter().map(|(n, sh)| s.add_normal(n, sh, 0.5, &mut rng).unwrap()).collect();
        (s, ids)
    }

    fn assert_passes(r: &GradCheckReport) {
        assert!(r.passed(), "max rel error {} ({:?})", r.max_rel_error, r.params);
    }

    #[test]
    fn matmul_layernorm_gelu_softmax() {
        let (mut s, ids) = random_store(&[("x", &[3, 4]), ("w", &[4, 5]), ("g", &[5]), ("b", &[5])], 1);
        let r = check_loss(&mut s, 1e-5, 1e-6, |g| {
            let (x, w, gg, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]), g.param(ids[3]));
            let h = g.matmul(x, w)?;
            let h = g.layer_norm(h, gg, b)?;
            let h = g.gelu(h);
            let p = g.softmax_rows(h);
            let h = g.matmul_t(p, w, false, true)?;
            let h = g.scale(h, 1.7);
            Ok(g.sum_all(h))
        })
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn attention_pooling_and_cross_entropy() {
        let (mut s, ids) = random_store(&[("q", &[5, 4]), ("k", &[6, 4]), ("v", &[6, 4]), ("row", &[4])], 2);
        let r = check_loss(&mut s, 1e-5, 1e-6, |g| {
            let (q, k, v, row) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]), g.param(ids[3]));
            let pairs = [
                SegPair { q: Segment::new(0, 3), k: Segment::new(0, 3) },
                SegPair { q: Segment::new(3, 2), k: Segment::new(3, 3) },
            ];
            let a = g.attention(q, k, v, 2, &pairs, false)?;
            let c = g.attention(k, k, v, 2, &[SegPair { q: Segment::new(0, 6), k: Segment::new(0, 6) }], true)?;
            let c = g.pool(c, &[Segment::new(0, 4), Segment::new(4, 2)], Pooling::SqrtLen)?;
            let c = g.pool(c, &[Segment::new(0, 2)], Pooling::Mean)?;
            let a = g.add_row(a, row)?;
            let a = g.add_row(a, c)?;
            let top = g.slice_rows(a, 1, 3)?;
            let both = g.concat_rows(&[top, a])?;
            g.cross_entropy(both, &[0, 1, 2, 3, 0, 1, 2, 3])
        })
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn embedding_lookup() {
        let (mut s, ids) = random_store(&[("e", &[6, 3])], 3);
        let r = check_loss(&mut s, 1e-5, 1e-6, |g| {
            let e = g.param(ids[0]);
            let x = g.embed(e, &[1, 4, 1, 5])?;
            let logits = g.matmul_t(x, e, false, true)?;
            g.cross_entropy(logits, &[2, 2, 0, 5])
        })
        .unwrap();
        assert_passes(&r);
    }

    #[test]
    fn batched_probes_match_direct_perturbation() {
        let cfg = TransformerConfig { vocab_size: 9, model_dim: 8, ffn_dim: 12, max_len: 4, ..Default::default() };
        let mut store = ParamStore::new();
        let model = Seq2Seq::init(&mut store, "m", &cfg).unwrap();
        let ex = Seq2SeqExample { source: vec![5, 6, 7], response: vec![8, 5] };
        let eps = 1e-5;
        let (src, tin, tout) = example_batch(&ex);
        for (id, name) in store.iter().map(|(i, p)| (i, p.name.clone())).collect::<Vec<_>>() {
            let n = store.value(id).len();
            let elems: Vec<usize> = (0..n).step_by(5).collect();
            let batched = seq2seq_numeric_batch(&store, &model, &ex, id, &elems, eps).unwrap();
            for (k, &e) in elems.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut s2 = store.clone();
                    s2.get_mut(id).value.data_mut()[e] += delta;
                    let mut g = Graph::new(&s2);
                    let l = model.nll(&mut g, &src, &tin, &tout, 1).unwrap();
                    g.value(l).item()
                };
                let direct = (eval(eps) - eval(-eps)) / (2.0 * eps);
                assert!(
                    (direct - batched[k]).abs() < 1e-8,
                    "{name}[{e}]: direct {direct} batched {}",
                    batched[k]
                );
            }
        }
    }

    #[test]
    fn tiny_seq2seq_passes() {
        let cfg = TransformerConfig { vocab_size: 7, model_dim: 4, ffn_dim: 6, max_len: 3, heads: 2, ..Default::default() };
        let ex = Seq2SeqExample { source: vec![5, 6, 4], response: vec![6, 5] };
        let r = check_seq2seq(&cfg, &ex, 1e-5, 1e-4).unwrap();
        assert_passes(&r);
    }
}
