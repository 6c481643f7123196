//! Tape-based reverse-mode autodiff over 2-D `f64` arrays.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Parameters enter as leaves without copying; [`Graph::backward`] consumes
//! the tape and returns per-parameter gradients that the caller accumulates
//! into the store.
//!
//! Packed sequence batches are the unit of work: rows of a `[T, d]` array
//! belong to sequences described by [`Segment`]s, and attention only mixes
//! rows inside a paired (query segment, key segment).

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::{gemm, Array};
use crate::error::{NnError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Query rows `q` attend to key rows `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegPair {
    pub q: Segment,
    pub k: Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Sum of rows divided by sqrt(len).
    SqrtLen,
    Mean,
}

/// Per-copy additive perturbation of one parameter, used to evaluate many
/// finite-difference probes in a single packed forward pass. Copy `c` owns
/// rows `[c*R/n, (c+1)*R/n)` of every array derived from the batch.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub param: ParamId,
    /// `(flat element index, delta)` per copy.
    pub deltas: Vec<(usize, f64)>,
}

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Embed { table: Var, ids: Vec<u32> },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Attention(Box<AttnSaved>),
    Pool { x: Var, segs: Vec<Segment>, kind: Pooling },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f64>, groups: usize },
    SumAll(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

struct AttnSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    pairs: Vec<SegPair>,
    causal: bool,
    /// Attention probabilities per pair and head, row-major `[q_len, k_len]`.
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Option<Array>,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
    perturb: Option<Perturbation>,
    perturb_hits: usize,
}

const LN_EPS: f64 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            perturb: None,
            perturb_hits: 0,
        }
    }

    /// Training mode enables dropout, drawing masks from a generator seeded
    /// with `seed`.
    pub fn training(store: &'p ParamStore, seed: u64) -> Self {
        let mut g = Self::new(store);
        g.training = true;
        g.rng = ChaCha8Rng::seed_from_u64(seed);
        g
    }

    pub fn with_perturbation(store: &'p ParamStore, perturb: Perturbation) -> Self {
        let mut g = Self::new(store);
        g.perturb = Some(perturb);
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Number of parameter uses that applied the active perturbation.
    pub fn perturbation_hits(&self) -> usize {
        self.perturb_hits
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let a = self.value(v);
        (a.rows(), a.cols())
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Active perturbation if `v` is the perturbed parameter.
    fn perturbation_for(&self, v: Var) -> Option<Perturbation> {
        let id = self.param_id(v)?;
        self.perturb.as_ref().filter(|p| p.param == id).cloned()
    }

    fn copy_rows(rows: usize, copies: usize) -> usize {
        assert!(copies > 0 && rows.is_multiple_of(copies), "{rows} rows do not split into {copies} copies");
        rows / copies
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        if vr.len() != c {
            return Err(NnError::Shape(format!("add_row {:?} + {:?}", va.shape(), vr.shape())));
        }
        let mut out = va.clone();
        let r = vr.data();
        for row_vals in out.data_mut().chunks_mut(c) {
            for (o, b) in row_vals.iter_mut().zip(r) {
                *o += b;
            }
        }
        if let Some(p) = self.perturbation_for(row) {
            let rows = out.rows();
            let per = Self::copy_rows(rows, p.deltas.len());
            for (copy, &(elem, delta)) in p.deltas.iter().enumerate() {
                for r in copy * per..(copy + 1) * per {
                    out.data_mut()[r * c + elem] += delta;
                }
            }
            self.perturb_hits += 1;
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = (va.rows(), va.cols());
        let (br, bc) = (vb.rows(), vb.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(NnError::Shape(format!(
                "matmul {:?}{} x {:?}{}",
                va.shape(),
                if ta { "^T" } else { "" },
                vb.shape(),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), ta, vb.data(), tb, 0.0, &mut out);
        if let (Some(p), false) = (self.perturbation_for(b), ta) {
            let per = Self::copy_rows(m, p.deltas.len());
            for (copy, &(elem, delta)) in p.deltas.iter().enumerate() {
                // b stored as [br, bc]; element (i, j)
                let (i, j) = (elem / bc, elem % bc);
                for r in copy * per..(copy + 1) * per {
                    if tb {
                        // out[r, i] += delta * a[r, j]
                        out[r * n + i] += delta * va.data()[r * ac + j];
                    } else {
                        out[r * n + j] += delta * va.data()[r * ac + i];
                    }
                }
            }
            self.perturb_hits += 1;
        }
        Ok(self.push(Array::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }))
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= rows {
                return Err(NnError::TokenOutOfRange { id, vocab: rows });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        if let Some(p) = self.perturbation_for(table) {
            let per = Self::copy_rows(ids.len(), p.deltas.len());
            for (copy, &(elem, delta)) in p.deltas.iter().enumerate() {
                let (tok, j) = (elem / d, elem % d);
                for r in copy * per..(copy + 1) * per {
                    if ids[r] as usize == tok {
                        out[r * d + j] += delta;
                    }
                }
            }
            self.perturb_hits += 1;
        }
        let value = Array::matrix(ids.len(), d, out)?;
        Ok(self.push(value, Op::Embed { table, ids: ids.to_vec() }))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if self.value(g).len() != d || self.value(b).len() != d {
            return Err(NnError::Shape("layer_norm gain/bias width".into()));
        }
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        for (pv, use_xhat) in [(g, true), (b, false)] {
            if let Some(p) = self.perturbation_for(pv) {
                let per = Self::copy_rows(rows, p.deltas.len());
                for (copy, &(j, delta)) in p.deltas.iter().enumerate() {
                    for r in copy * per..(copy + 1) * per {
                        out[r * d + j] += if use_xhat { delta * xhat[r * d + j] } else { delta };
                    }
                }
                self.perturb_hits += 1;
            }
        }
        let value = Array::matrix(rows, d, out)?;
        Ok(self.push(value, Op::LayerNorm { x, g, b, xhat, rstd }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention over segment pairs. `q`, `k`,
    /// `v` are already-projected `[rows, d]` arrays; heads split the columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pairs: &[SegPair],
        causal: bool,
    ) -> Result<Var> {
        let (qa, ka, va) = (self.value(q), self.value(k), self.value(v));
        let d = qa.cols();
        if ka.cols() != d || va.cols() != d || ka.rows() != va.rows() || heads == 0 || d % heads != 0 {
            return Err(NnError::Shape("attention operand widths".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; qa.rows() * d];
        let mut probs = Vec::with_capacity(pairs.len() * heads);
        for pair in pairs {
            if pair.k.len == 0 {
                return Err(NnError::Shape("attention over an empty key segment".into()));
            }
            if pair.q.end() > qa.rows() || pair.k.end() > ka.rows() {
                return Err(NnError::Shape("attention segment out of range".into()));
            }
            if causal && pair.q.len != pair.k.len {
                return Err(NnError::Shape("causal attention needs equal segment lengths".into()));
            }
            for h in 0..heads {
                let c0 = h * dh;
                let (lq, lk) = (pair.q.len, pair.k.len);
                let mut p = vec![0.0; lq * lk];
                for i in 0..lq {
                    let qi = &qa.row(pair.q.start + i)[c0..c0 + dh];
                    let visible = if causal { i + 1 } else { lk };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..visible {
                        let kj = &ka.row(pair.k.start + j)[c0..c0 + dh];
                        let s = crate::array::dot(qi, kj) * scale;
                        p[i * lk + j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for j in 0..visible {
                        let e = (p[i * lk + j] - max).exp();
                        p[i * lk + j] = e;
                        sum += e;
                    }
                    for j in 0..visible {
                        p[i * lk + j] /= sum;
                    }
                    let orow = &mut out[(pair.q.start + i) * d + c0..(pair.q.start + i) * d + c0 + dh];
                    for j in 0..visible {
                        let w = p[i * lk + j];
                        let vj = &va.row(pair.k.start + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let value = Array::matrix(qa.rows(), d, out)?;
        let saved = AttnSaved { q, k, v, heads, pairs: pairs.to_vec(), causal, probs };
        Ok(self.push(value, Op::Attention(Box::new(saved))))
    }

    /// Pools each segment's rows into one output row.
    pub fn pool(&mut self, x: Var, segs: &[Segment], kind: Pooling) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut out = vec![0.0; segs.len() * d];
        for (s, seg) in segs.iter().enumerate() {
            if seg.len == 0 || seg.end() > vx.rows() {
                return Err(NnError::Shape("pool over empty or out-of-range segment".into()));
            }
            let orow = &mut out[s * d..(s + 1) * d];
            for r in seg.start..seg.end() {
                for (o, v) in orow.iter_mut().zip(vx.row(r)) {
                    *o += v;
                }
            }
            let div = pool_divisor(kind, seg.len);
            orow.iter_mut().for_each(|o| *o /= div);
        }
        let value = Array::matrix(segs.len(), d, out)?;
        Ok(self.push(value, Op::Pool { x, segs: segs.to_vec(), kind }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.rows() {
            return Err(NnError::Shape("slice_rows out of range".into()));
        }
        let d = vx.cols();
        let data = vx.data()[start * d..(start + len) * d].to_vec();
        Ok(self.push(Array::matrix(len, d, data)?, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(p) => self.value(*p).cols(),
            None => return Err(NnError::Shape("concat of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let a = self.value(*p);
            if a.cols() != d {
                return Err(NnError::Shape("concat_rows width mismatch".into()));
            }
            data.extend_from_slice(a.data());
            rows += a.rows();
        }
        Ok(self.push(Array::matrix(rows, d, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..vx.rows() {
            out.extend(crate::array::softmax(vx.row(r)));
        }
        let value = Array::matrix(vx.rows(), c, out).expect("softmax shape");
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Each row divided by its Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(NnError::Shape(format!("row {r} of width {c} has norm {n}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Mean softmax cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        self.cross_entropy_grouped(logits, targets, 1)
    }

    /// Cross-entropy averaged within `groups` equal row blocks; output is
    /// `[groups, 1]`.
    pub fn cross_entropy_grouped(&mut self, logits: Var, targets: &[u32], groups: usize) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, c) = (vl.rows(), vl.cols());
        if rows != targets.len() || rows == 0 {
            return Err(NnError::Shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(NnError::Shape("cross-entropy groups must divide rows".into()));
        }
        let per = rows / groups;
        let mut probs = Vec::with_capacity(rows * c);
        let mut out = vec![0.0; groups];
        for r in 0..rows {
            let t = targets[r] as usize;
            if t >= c {
                return Err(NnError::TokenOutOfRange { id: targets[r], vocab: c });
            }
            let ls = crate::array::log_softmax(vl.row(r));
            out[r / per] -= ls[t];
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        out.iter_mut().for_each(|v| *v /= per as f64);
        let value = Array::matrix(groups, 1, out)?;
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, groups }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Array::scalar(s), Op::SumAll(x))
    }

    /// Inverted dropout; identity outside training mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<ParamGrads> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(NnError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::filled(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[idx] = Some(gy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &gy);
                    accumulate(&mut grads, *b, &gy);
                }
                Op::AddRow(a, row) => {
                    let c = gy.cols();
                    let mut gr = vec![0.0; c];
                    for r in 0..gy.rows() {
                        for (s, v) in gr.iter_mut().zip(gy.row(r)) {
                            *s += v;
                        }
                    }
                    let rshape = self.value(*row).shape().to_vec();
                    accumulate(&mut grads, *row, &Array::new(rshape, gr)?);
                    accumulate(&mut grads, *a, &gy);
                }
                Op::Scale(a, s) => {
                    let mut g = gy;
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads, *a, &g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, n) = (gy.rows(), gy.cols());
                    let k = if *ta { va.rows() } else { va.cols() };
                    // dA
                    let mut da = vec![0.0; va.len()];
                    if !*ta {
                        // dA[m,k] = dC[m,n] · op(B)^T
                        gemm(m, n, k, 1.0, gy.data(), false, vb.data(), !*tb, 0.0, &mut da);
                    } else {
                        // A stored [k,m]; dA = op(B)[k,n] · dC^T
                        gemm(k, n, m, 1.0, vb.data(), *tb, gy.data(), true, 0.0, &mut da);
                    }
                    let mut db = vec![0.0; vb.len()];
                    if !*tb {
                        // dB[k,n] = op(A)^T · dC
                        gemm(k, m, n, 1.0, va.data(), !*ta, gy.data(), false, 0.0, &mut db);
                    } else {
                        // B stored [n,k]; dB = dC^T · op(A)
                        gemm(n, m, k, 1.0, gy.data(), true, va.data(), *ta, 0.0, &mut db);
                    }
                    let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
                    accumulate(&mut grads, *a, &Array::new(sa, da)?);
                    accumulate(&mut grads, *b, &Array::new(sb, db)?);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut gt = Array::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (o, v) in dst.iter_mut().zip(gy.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, &gt);
                }
                Op::LayerNorm { x, g, b, xhat, rstd } => {
                    let (rows, d) = (gy.rows(), gy.cols());
                    let gv = self.value(*g).data();
                    let mut dx = vec![0.0; rows * d];
                    let mut dg = vec![0.0; d];
                    let mut dbv = vec![0.0; d];
                    for r in 0..rows {
                        let dy = gy.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = dy[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                            dg[j] += dy[j] * xh[j];
                            dbv[j] += dy[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = dy[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    let gshape = self.value(*g).shape().to_vec();
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *x, &Array::matrix(rows, d, dx)?);
                    accumulate(&mut grads, *g, &Array::new(gshape, dg)?);
                    accumulate(&mut grads, *b, &Array::new(bshape, dbv)?);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut g = gy;
                    for (o, xv) in g.data_mut().iter_mut().zip(vx.data()) {
                        *o *= gelu_grad(*xv);
                    }
                    accumulate(&mut grads, *x, &g);
                }
                Op::Attention(saved) => {
                    let (dq, dk, dv) = self.attention_backward(saved, &gy);
                    accumulate(&mut grads, saved.q, &dq);
                    accumulate(&mut grads, saved.k, &dk);
                    accumulate(&mut grads, saved.v, &dv);
                }
                Op::Pool { x, segs, kind } => {
                    let vx = self.value(*x);
                    let mut dx = Array::zeros(vx.shape());
                    for (s, seg) in segs.iter().enumerate() {
                        let div = pool_divisor(*kind, seg.len);
                        for r in seg.start..seg.end() {
                            for (o, v) in dx.row_mut(r).iter_mut().zip(gy.row(s)) {
                                *o += v / div;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SliceRows { x, start } => {
                    let vx = self.value(*x);
                    let d = vx.cols();
                    let mut dx = Array::zeros(vx.shape());
                    dx.data_mut()[start * d..start * d + gy.len()].copy_from_slice(gy.data());
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.value(*p).shape().to_vec();
                        let n = self.value(*p).len();
                        let g = Array::new(shape, gy.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        accumulate(&mut grads, *p, &g);
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().expect("normalize value");
                    let mut dx = gy.clone();
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(gy.row(r)).map(|(a, b)| a * b).sum();
                        for (o, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *o = (*o - yv * dot) / n;
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let c = y.cols();
                    let mut dx = Array::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gy.row(r));
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx.row_mut(r)[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::CrossEntropy { logits, targets, probs, groups } => {
                    let vl = self.value(*logits);
                    let (rows, c) = (vl.rows(), vl.cols());
                    let per = rows / groups;
                    let mut dl = probs.clone();
                    for r in 0..rows {
                        let scale = gy.data()[r / per] / per as f64;
                        let row = &mut dl[r * c..(r + 1) * c];
                        row[targets[r] as usize] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut grads, *logits, &Array::matrix(rows, c, dl)?);
                }
                Op::SumAll(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, &Array::filled(&shape, gy.item()));
                }
                Op::Dropout { x, mask } => {
                    let mut g = gy;
                    for (o, m) in g.data_mut().iter_mut().zip(mask) {
                        *o *= m;
                    }
                    accumulate(&mut grads, *x, &g);
                }
            }
        }

        let mut out: Vec<(ParamId, Array)> = Vec::new();
        for (id, var) in &self.param_vars {
            if let Some(g) = grads[var.0].take() {
                out.push((*id, g));
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(ParamGrads(out))
    }

    fn attention_backward(&self, s: &AttnSaved, gy: &Array) -> (Array, Array, Array) {
        let (qa, ka, va) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let d = qa.cols();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array::zeros(qa.shape());
        let mut dk = Array::zeros(ka.shape());
        let mut dv = Array::zeros(va.shape());
        for (pi, pair) in s.pairs.iter().enumerate() {
            for h in 0..s.heads {
                let p = &s.probs[pi * s.heads + h];
                let c0 = h * dh;
                let (lq, lk) = (pair.q.len, pair.k.len);
                for i in 0..lq {
                    let visible = if s.causal { i + 1 } else { lk };
                    let go = &gy.row(pair.q.start + i)[c0..c0 + dh];
                    // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                    let mut dp = vec![0.0; visible];
                    for j in 0..visible {
                        let vj = &va.row(pair.k.start + j)[c0..c0 + dh];
                        dp[j] = crate::array::dot(go, vj);
                        let pij = p[i * lk + j];
                        let dvj = &mut dv.row_mut(pair.k.start + j)[c0..c0 + dh];
                        for (o, g) in dvj.iter_mut().zip(go) {
                            *o += pij * g;
                        }
                    }
                    let sum: f64 = (0..visible).map(|j| p[i * lk + j] * dp[j]).sum();
                    let qi: Vec<f64> = qa.row(pair.q.start + i)[c0..c0 + dh].to_vec();
                    for j in 0..visible {
                        let ds = p[i * lk + j] * (dp[j] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj: Vec<f64> = ka.row(pair.k.start + j)[c0..c0 + dh].to_vec();
                        let dqi = &mut dq.row_mut(pair.q.start + i)[c0..c0 + dh];
                        for (o, kv) in dqi.iter_mut().zip(&kj) {
                            *o += ds * kv;
                        }
                        let dkj = &mut dk.row_mut(pair.k.start + j)[c0..c0 + dh];
                        for (o, qv) in dkj.iter_mut().zip(&qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: &Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn pool_divisor(kind: Pooling, len: usize) -> f64 {
    match kind {
        Pooling::SqrtLen => (len as f64).sqrt(),
        Pooling::Mean => len as f64,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: &[usize], data: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, Array::new(shape.to_vec(), data).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gives_all_ones() {
        let (s, id) = store_with("p", &[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(id).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let (s, id) = store_with("p", &[1, 3], vec![0.5, -1.0, 2.0]);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let h = g.gelu(p);
        let l = g.sum_all(h);
        let loss = g.scale(l, 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(id).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (s, id) = store_with("p", &[2, 2], vec![1.0; 4]);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        assert!(matches!(g.backward(p), Err(NnError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut s, id) = store_with("p", &[1, 2], vec![1.0, 2.0]);
        for _ in 0..3 {
            let grads = {
                let mut g = Graph::new(&s);
                let p = g.param(id);
                let l = g.sum_all(p);
                g.backward(l).unwrap()
            };
            s.accumulate(&grads);
        }
        assert_eq!(s.get(id).grad.data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (s, id) = store_with("p", &[2, 3], vec![0.5, -10.0, 2.0, 300.0, 0.0, 1.0]);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let y = g.softmax_rows(p);
        for r in 0..2 {
            let sum: f64 = g.value(y).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_rows_unit_norm_and_gradient() {
        let data = vec![0.5, -1.0, 2.0, 3.0, 0.2, 1.0];
        let (mut s, id) = store_with("p", &[2, 3], data);
        let w = Array::matrix(2, 3, vec![0.3, -0.7, 1.1, 0.4, 0.9, -0.2]).unwrap();
        let build = |g: &mut Graph| {
            let p = g.param(id);
            let y = g.l2_normalize_rows(p)?;
            let wv = g.input(w.clone());
            let t = g.matmul_t(y, wv, false, true)?;
            let sq = g.softmax_rows(t);
            g.cross_entropy(sq, &[0, 1])
        };
        let mut g = Graph::new(&s);
        let p = g.param(id);
        let y = g.l2_normalize_rows(p).unwrap();
        for r in 0..2 {
            let n: f64 = g.value(y).row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let report = crate::gradcheck::check_loss(&mut s, 1e-6, 1e-6, build).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let (s, id) = store_with("p", &[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new(&s);
        let p = g.param(id);
        assert!(g.l2_normalize_rows(p).is_err());
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let (s, _) = store_with("unused", &[1], vec![0.0]);
        let run = |last: f64| {
            let mut g = Graph::new(&s);
            let mut data: Vec<f64> = (0..12).map(|v| (v as f64 * 0.37).sin()).collect();
            data[8..12].iter_mut().for_each(|v| *v = last);
            let x = g.input(Array::matrix(3, 4, data).unwrap());
            let seg = Segment::new(0, 3);
            let y = g.attention(x, x, x, 2, &[SegPair { q: seg, k: seg }], true).unwrap();
            g.value(y).data()[..8].to_vec()
        };
        assert_eq!(run(0.3), run(-5.0));
    }
}
