mod common;

use kgdialog_core::beam::{beam_decode, greedy_decode, BeamConfig};
use kgdialog_core::generative_dialogue::*;
use kgdialog_core::metrics::perplexity;
use kgdialog_core::retriever::{Candidate, CandidateSet};
use kgdialog_core::train::TrainConfig;
use kgdialog_nn::{Array, Graph, ParamStore, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(vocab: usize) -> TransformerConfig {
    TransformerConfig { layers: 1, heads: 2, model_dim: 16, ffn_dim: 32, max_len: 16, vocab_size: vocab, dropout_rate: 0.0, seed: 9 }
}

fn scalar_store(nll: f64, scores: &[f64]) -> (ParamStore, kgdialog_nn::ParamId, kgdialog_nn::ParamId) {
    let mut s = ParamStore::new();
    let a = s.add("nll", Array::scalar(nll)).unwrap();
    let b = s.add("scores", Array::matrix(1, scores.len(), scores.to_vec()).unwrap()).unwrap();
    (s, a, b)
}

#[test]
fn lambda_zero_is_pure_nll_with_zero_knowledge_gradient() {
    let (s, a, b) = scalar_store(2.75, &[0.3, -1.2, 0.9]);
    let mut g = Graph::new(&s);
    let nll = g.param(a);
    let sc = g.param(b);
    let loss = combined_loss(&mut g, nll, &[sc], &[1], 0.0).unwrap();
    assert_eq!(g.value(loss).item(), 2.75);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
    assert!(grads.get(b).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn lambda_one_is_pure_knowledge_loss() {
    let scores = [0.3, -1.2, 0.9];
    let (s, a, b) = scalar_store(2.75, &scores);
    let mut g = Graph::new(&s);
    let nll = g.param(a);
    let sc = g.param(b);
    let loss = combined_loss(&mut g, nll, &[sc], &[1], 1.0).unwrap();
    let lse = scores.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
    assert!((g.value(loss).item() - (lse - scores[1])).abs() < 1e-15);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[0.0]);
    assert!(grads.get(b).unwrap().data().iter().any(|v| *v != 0.0));
}

#[test]
fn lambda_derivative_is_knowledge_minus_nll() {
    let (s, a, b) = scalar_store(1.9, &[0.1, 0.4, -0.3, 2.0]);
    let at = |lambda: f64| {
        let mut g = Graph::new(&s);
        let nll = g.param(a);
        let sc = g.param(b);
        let l = combined_loss(&mut g, nll, &[sc], &[2], lambda).unwrap();
        g.value(l).item()
    };
    let kl = {
        let mut g = Graph::new(&s);
        let sc = g.param(b);
        let k = knowledge_loss(&mut g, &[sc], &[2]).unwrap();
        g.value(k).item()
    };
    for lambda in [0.1, 0.5, 0.9] {
        let h = 1e-4;
        let fd = (at(lambda + h) - at(lambda - h)) / (2.0 * h);
        assert!((fd - (kl - 1.9)).abs() < 1e-6, "lambda {lambda}: {fd} vs {}", kl - 1.9);
    }
    let mut g = Graph::new(&s);
    let nll = g.param(a);
    let sc = g.param(b);
    assert!(combined_loss(&mut g, nll, &[sc], &[2], 1.5).is_err());
}

#[test]
fn full_model_lambda_zero_matches_nll_gradients() {
    let cfg = small_cfg(20);
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg).unwrap();
    let (ctx, k1, k2, resp) = (vec![5, 6, 7], vec![8, 9], vec![10, 11, 12], vec![13, 14]);
    let items = || vec![ForwardItem { context: &ctx, knowledge: vec![&k1, &k2], choice: Choice::Forced(1), response: &resp }];
    let run = |lambda: Option<f64>| {
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &items()).unwrap();
        let loss = match lambda {
            Some(l) => combined_loss(&mut g, out.nll, &out.knowledge_scores, &[1], l).unwrap(),
            None => out.nll,
        };
        let v = g.value(loss).item();
        (v, g.backward(loss).unwrap())
    };
    let (v0, g0) = run(Some(0.0));
    let (vn, gn) = run(None);
    assert_eq!(v0, vn);
    for id in store.ids() {
        assert_eq!(g0.get(id).map(|a| a.data().to_vec()), gn.get(id).map(|a| a.data().to_vec()));
    }
    let (_, g1) = run(Some(1.0));
    let dec_only = store.id("gen.dec.ln_out.g").unwrap();
    assert!(g1.get(dec_only).is_none_or(|a| a.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn forward_uses_hard_argmax_when_predicting() {
    let cfg = small_cfg(20);
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg).unwrap();
    let ctx = vec![5, 6, 7];
    let ks: Vec<Vec<u32>> = vec![vec![8, 9], vec![5, 6, 7], vec![10, 11, 12]];
    let resp = vec![13];
    let mut g = Graph::new(&store);
    let out = model
        .forward(&mut g, &[ForwardItem { context: &ctx, knowledge: ks.iter().map(Vec::as_slice).collect(), choice: Choice::Predicted, response: &resp }])
        .unwrap();
    let scores = g.value(out.knowledge_scores[0]).data().to_vec();
    assert_eq!(Some(out.m_best[0]), kgdialog_nn::argmax(&scores));
    let sel = model.select(&store, &ctx, &ks).unwrap();
    assert_eq!(sel.best_index, out.m_best[0]);
    // the NLL with the predicted choice equals the NLL given that sentence alone
    let alone = model.token_nlls(&store, &ctx, &ks[out.m_best[0]], &resp).unwrap();
    let joint = g.value(out.token_nll).data().to_vec();
    for (a, b) in alone.iter().zip(&joint) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_logits_give_vocab_size_perplexity() {
    let cfg = small_cfg(37);
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg).unwrap();
    let gain = store.id("gen.dec.ln_out.g").unwrap();
    store.get_mut(gain).value = Array::zeros(&[cfg.model_dim]);
    let nll = model.token_nlls(&store, &[5, 6], &[7, 8, 9], &[10, 11, 12, 13]).unwrap();
    assert_eq!(nll.len(), 5);
    let ppl = perplexity(&nll).unwrap();
    assert!((ppl - 37.0).abs() / 37.0 < 1e-12, "{ppl}");
}

#[test]
fn knowledge_dropout_rate_and_eval_guard() {
    for p in [0.0, 0.1, 0.5, 0.9, 1.0] {
        let mut kd = KnowledgeDropout::new(p, 42).unwrap();
        for _ in 0..10_000 {
            kd.draw(Phase::Train).unwrap();
        }
        let rate = kd.fired as f64 / kd.draws as f64;
        assert!((rate - p).abs() <= 0.02, "p {p} measured {rate}");
        let fired = kd.fired;
        assert!(kd.draw(Phase::Eval).is_err());
        assert_eq!(kd.fired, fired);
    }
    assert!(KnowledgeDropout::new(1.5, 0).is_err());
    let mut set = CandidateSet::new();
    set.push(Candidate { title: "T".into(), sentence: "S.".into(), doc_id: "d".into(), sentence_index: 0 });
    let mut kd = KnowledgeDropout::new(1.0, 0).unwrap();
    let (masked, fired) = kd.apply(Phase::Train, &set).unwrap();
    assert!(fired);
    assert_eq!(masked.len(), 1);
    assert!(masked.entries()[0].is_sentinel());
}

#[test]
fn beam_one_matches_greedy_on_random_contexts() {
    let cfg = small_cfg(25);
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let ctx: Vec<u32> = (0..rng.random_range(1..8)).map(|_| rng.random_range(5..25)).collect();
        let k: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(5..25)).collect();
        let step = model.decoder_step(&store, model.memory(&store, &ctx, &k).unwrap());
        let gr = greedy_decode(&step, 10).unwrap();
        let b1 = beam_decode(&step, BeamConfig { beam_size: 1, max_len: 10, length_normalize: false }).unwrap();
        assert_eq!(gr.tokens, b1.tokens);
        let b5 = beam_decode(&step, BeamConfig { beam_size: 5, max_len: 10, length_normalize: false }).unwrap();
        assert!(b5.log_prob >= gr.log_prob);
    }
}

#[test]
fn config_validation() {
    assert!(GenerativeConfig::default().validate().is_ok());
    assert!(GenerativeConfig { lambda: -0.1, ..Default::default() }.validate().is_err());
    assert!(GenerativeConfig { beam_size: 0, ..Default::default() }.validate().is_err());
}

#[test]
fn repeat_last_baseline_scores_overlap() {
    let t = common::toy_setup();
    let f1 = repeat_last_f1(&t.test).unwrap();
    assert!((0.0..100.0).contains(&f1));
}

#[test]
fn e2e_overfits_toy_dialogues() {
    let t = common::toy_setup();
    let cfg = common::model_config(&t.codec);
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg).unwrap();
    let gen = GenerativeConfig { knowledge_dropout: 0.0, ..Default::default() };
    let tr = TrainConfig { steps: 1500, batch_size: 8, lr: 3e-3, seed: 1, clip: Some(5.0), target_loss: Some(0.05) };
    let log = train_generative(&model, &mut store, &t.train, &gen, &tr).unwrap();
    assert_eq!(log.skipped, 0);
    let gold = eval_generative(&model, &store, &t.codec, &t.train, KnowledgeSource::Gold, &mut Picker::Own, &gen, true).unwrap();
    assert!(gold.ppl.ln() < 0.2, "nll {}", gold.ppl.ln());
    assert!(gold.ppl < 1.5);
    assert!(gold.f1 > 90.0, "f1 {}", gold.f1);
    let pred = eval_generative(&model, &store, &t.codec, &t.train, KnowledgeSource::Predicted, &mut Picker::Own, &gen, false).unwrap();
    assert!(gold.ppl <= pred.ppl);
}

#[test]
fn two_stage_generator_trains_on_gold_sentence() {
    let t = common::toy_setup();
    let cfg = small_cfg(t.codec.vocab_size());
    let cfg = TransformerConfig { max_len: t.codec.max_len, ..cfg };
    let mut store = ParamStore::new();
    let model = GenerativeModel::init(&mut store, &cfg).unwrap();
    let gen = GenerativeConfig { variant: Variant::TwoStage, knowledge_dropout: 0.5, ..Default::default() };
    let tr = TrainConfig { steps: 20, batch_size: 4, lr: 3e-3, ..Default::default() };
    let log = train_generative(&model, &mut store, &t.train, &gen, &tr).unwrap();
    assert_eq!(log.dropout_draws, 80);
    assert!(log.dropout_fired > 0 && log.dropout_fired < 80);
    assert!(log.log.losses.first() > log.log.losses.last());
}
