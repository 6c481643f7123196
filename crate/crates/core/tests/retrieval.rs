mod common;

use kgdialog_core::codec::TurnExample;
use kgdialog_core::retrieval_dialogue::*;
use kgdialog_core::train::TrainConfig;
use kgdialog_nn::{Array, Graph, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[test]
fn in_batch_cross_entropy_matches_row_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let store = ParamStore::new();
    for b in 2..9 {
        let table: Vec<f64> = (0..b * b).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut g = Graph::new(&store);
        let t = g.input(Array::matrix(b, b, table.clone()).unwrap());
        let targets: Vec<u32> = (0..b as u32).collect();
        let ce = g.cross_entropy(t, &targets).unwrap();
        let mut oracle = 0.0;
        for r in 0..b {
            let row = &table[r * b..(r + 1) * b];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            oracle += lse - row[r];
        }
        oracle /= b as f64;
        assert!((g.value(ce).item() - oracle).abs() < 1e-12);
    }
}

#[test]
fn score_table_is_scaled_cosine_of_representations() {
    let t = common::toy_setup();
    let cfg = common::model_config(&t.codec);
    let mut store = ParamStore::new();
    let m = RetrievalModel::init(&mut store, &cfg).unwrap();
    let batch: Vec<&TurnExample> = t.train.iter().take(5).collect();
    let know: Vec<Knowledge> = batch.iter().map(|e| knowledge_input(e, KnowledgeMode::Attention, None).unwrap()).collect();
    let mut g = Graph::new(&store);
    let table = m.score_table(&mut g, &batch, &know).unwrap();
    let tv = g.value(table).clone();
    let rhs = m.rhs_vectors(&store, &batch.iter().map(|e| e.response.clone()).collect::<Vec<_>>()).unwrap();
    for (i, ex) in batch.iter().enumerate() {
        let lhs = m.lhs_vector(&store, &ex.context, &know[i]).unwrap();
        for (j, r) in rhs.iter().enumerate() {
            assert!((tv.row(i)[j] - COSINE_SCALE * cos(&lhs, r)).abs() < 1e-9);
        }
    }
}

#[test]
fn symmetric_in_batch_loss_is_ln_b() {
    let t = common::toy_setup();
    let cfg = common::model_config(&t.codec);
    let mut store = ParamStore::new();
    let m = RetrievalModel::init(&mut store, &cfg).unwrap();
    // every row sees eight identical response columns
    let same: Vec<TurnExample> = t.train.iter().take(8).map(|e| TurnExample { response: t.train[0].response.clone(), ..e.clone() }).collect();
    let batch: Vec<&TurnExample> = same.iter().collect();
    let know: Vec<Knowledge> = batch.iter().map(|_| Knowledge::None).collect();
    let mut g = Graph::new(&store);
    let l = m.in_batch_loss(&mut g, &batch, &know).unwrap();
    let v = g.value(l).item();
    assert!((v - 8f64.ln()).abs() < 1e-12, "{v}");
    let mut g = Graph::new(&store);
    assert!(m.in_batch_loss(&mut g, &batch[..1], &know[..1]).is_err());
}

#[test]
fn lhs_knowledge_composition() {
    let t = common::toy_setup();
    let cfg = common::model_config(&t.codec);
    let mut store = ParamStore::new();
    let m = RetrievalModel::init(&mut store, &cfg).unwrap();
    let ex = &t.train[3];
    let enc = |seqs: &[&[u32]]| {
        let mut g = Graph::new(&store);
        let v = m.lhs.encode(&mut g, seqs).unwrap();
        g.value(v).clone()
    };
    let k = ex.knowledge[1].as_slice();
    let e = enc(&[&ex.context, k]);
    let one = m.lhs_vector(&store, &ex.context, &Knowledge::One(k)).unwrap();
    for j in 0..cfg.model_dim {
        assert!((one[j] - (e.row(0)[j] + e.row(1)[j])).abs() < 1e-12);
    }
    let none = m.lhs_vector(&store, &ex.context, &Knowledge::None).unwrap();
    assert_eq!(none, e.row(0).to_vec());
    let empty: Vec<Vec<u32>> = Vec::new();
    assert!(m.lhs_vector(&store, &ex.context, &Knowledge::All(&empty)).is_err());
    let gold = knowledge_input(ex, KnowledgeMode::Gold, None).unwrap();
    assert!(matches!(gold, Knowledge::One(s) if s == ex.gold_knowledge().unwrap()));
    assert!(knowledge_input(ex, KnowledgeMode::TwoStage, None).is_err());
}

proptest! {
    #[test]
    fn ranking_invariant_to_positive_scaling(
        lhs in prop::collection::vec(-2.0f64..2.0, 5),
        pool in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 1..12),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(lhs.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(pool.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let base: Vec<usize> = score_responses(&lhs, &pool).unwrap().iter().map(|r| r.0).collect();
        let l2: Vec<f64> = lhs.iter().map(|v| v * a).collect();
        let p2: Vec<Vec<f64>> = pool.iter().map(|r| r.iter().map(|v| v * b).collect()).collect();
        let scores = score_responses(&l2, &p2).unwrap();
        // near-ties may swap under rounding; compare where gaps are clear
        let orig = score_responses(&lhs, &pool).unwrap();
        for (i, (idx, _)) in scores.iter().enumerate() {
            if orig.iter().filter(|o| (o.1 - orig[i].1).abs() < 1e-9).count() == 1 {
                prop_assert_eq!(*idx, base[i]);
            }
        }
    }
}

#[test]
fn aligned_response_scores_one() {
    let lhs = vec![0.3, -0.4, 1.2];
    let pool = vec![vec![1.0, 1.0, 1.0], vec![0.6, -0.8, 2.4], vec![-0.3, 0.4, -1.2]];
    let r = score_responses(&lhs, &pool).unwrap();
    assert_eq!(r[0].0, 1);
    assert!((r[0].1 - 1.0).abs() < 1e-12);
}

fn utterances(n: usize) -> Vec<String> {
    let vocab = kgdialog_core::toy::vocabulary(300, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..n).map(|_| (0..6).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect::<Vec<_>>().join(" ")).collect()
}

#[test]
fn seeded_pool_guards() {
    let u = utterances(150);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gold = u[0].clone();
    let mut src = u.clone();
    src.push(gold.to_uppercase());
    let p = seeded_pool(&gold, &src, 100, &mut rng).unwrap();
    assert_eq!(p.responses.len(), 100);
    assert_eq!(p.responses[p.gold], gold);
    assert_eq!(p.gold_duplicates, 2);
    assert_eq!(p.responses.iter().filter(|r| r.to_lowercase() == gold.to_lowercase()).count(), 1);
    let mut r1 = ChaCha8Rng::seed_from_u64(4);
    let mut r2 = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(seeded_pool(&gold, &u, 100, &mut r1).unwrap(), seeded_pool(&gold, &u, 100, &mut r2).unwrap());
    assert!(seeded_pool(&gold, &u[..60], 100, &mut rng).is_err());
}

#[test]
fn random_and_oracle_baselines() {
    let t = common::toy_setup();
    let pool_source = utterances(400);
    let oracle = eval_retrieval(&mut OracleResponses, &t.test, &pool_source, 100, 3, 1).unwrap();
    assert_eq!(oracle.recall_at_1, 100.0);
    let random = eval_retrieval(&mut RandomResponses(ChaCha8Rng::seed_from_u64(9)), &t.test[..1], &pool_source, 100, 3, 10_000).unwrap();
    assert_eq!(random.n, 10_000);
    assert!(random.ci95.0 <= 1.0 && 1.0 <= random.ci95.1, "{:?}", random);
}

#[test]
fn retrieval_overfits_toy_dialogues() {
    let t = common::toy_setup();
    let cfg = common::model_config(&t.codec);
    let mut store = ParamStore::new();
    let m = RetrievalModel::init(&mut store, &cfg).unwrap();
    let tr = TrainConfig { steps: 1000, batch_size: 8, lr: 1e-3, seed: 1, clip: Some(5.0), target_loss: Some(0.01) };
    assert!(train_retrieval(&m, &mut store.clone(), &t.train, KnowledgeMode::Attention, &TrainConfig { batch_size: 1, ..tr.clone() }).is_err());
    train_retrieval(&m, &mut store, &t.train, KnowledgeMode::Attention, &tr).unwrap();
    assert_eq!(in_batch_recall(&m, &store, &t.train, KnowledgeMode::Attention, 8).unwrap(), 100.0);
    let pool = ResponsePool::build(&m, &store, &t.codec, t.train.iter().map(|e| e.response_text.clone()).collect()).unwrap();
    for v in &pool.encodings {
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
