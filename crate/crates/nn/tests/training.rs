use kgdialog_nn::bpe::{BOS, EOS};
use kgdialog_nn::{teacher_forcing, Adam, AdamConfig, Graph, Packed, ParamStore, Seq2Seq, TransformerConfig};

fn cfg() -> TransformerConfig {
    TransformerConfig { vocab_size: 12, model_dim: 16, ffn_dim: 32, max_len: 8, ..Default::default() }
}

fn pairs() -> Vec<(Vec<u32>, Vec<u32>)> {
    vec![(vec![5, 6, 7], vec![7, 6]), (vec![8, 9], vec![10, 11, 5]), (vec![11, 5, 10], vec![9])]
}

/// Trains on all pairs as one batch and returns the loss trajectory.
fn train(steps: usize, lr: f64) -> (Vec<f64>, ParamStore) {
    let mut store = ParamStore::new();
    let model = Seq2Seq::init(&mut store, "s", &cfg()).unwrap();
    let mut adam = Adam::new(AdamConfig { lr, ..Default::default() });
    let (mut src, mut tin, mut tout) = (Packed::new(), Packed::new(), Vec::new());
    for (s, r) in pairs() {
        let (i, o) = teacher_forcing(&r, BOS, EOS);
        src.push(&s);
        tin.push(&i);
        tout.extend(o);
    }
    let mut losses = Vec::new();
    for _ in 0..steps {
        let grads = {
            let mut g = Graph::new(&store);
            let loss = model.nll(&mut g, &src, &tin, &tout, 1).unwrap();
            losses.push(g.value(loss).item());
            g.backward(loss).unwrap()
        };
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(&mut store);
    }
    (losses, store)
}

#[test]
fn memorizes_three_pairs() {
    let (losses, _) = train(150, 3e-3);
    assert!(losses[0] > 2.0);
    assert!(*losses.last().unwrap() < 0.05, "final loss {}", losses.last().unwrap());
}

#[test]
fn fixed_seed_gives_identical_trajectory() {
    let (a, sa) = train(10, 1e-3);
    let (b, sb) = train(10, 1e-3);
    assert_eq!(a, b);
    for ((_, pa), (_, pb)) in sa.iter().zip(sb.iter()) {
        assert_eq!(pa.value, pb.value);
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let (losses, _) = train(5, 0.0);
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}
