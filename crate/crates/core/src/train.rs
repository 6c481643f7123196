//! Minibatch training loop shared by every model.

use kgdialog_nn::{clip_grad_norm, Adam, AdamConfig, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    /// Stop early once the mean loss of a full pass falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 8, lr: 1e-3, seed: 1, clip: Some(5.0), target_loss: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of every step.
    pub losses: Vec<f64>,
    /// Mean step loss of each full pass over the data.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Runs Adam for `cfg.steps` minibatches drawn from a seeded shuffle of
/// `0..n`. `build` records the loss of one batch on the given graph.
pub fn train_loop<F>(store: &mut ParamStore, n: usize, cfg: &TrainConfig, dropout: bool, mut build: F) -> Result<TrainLog>
where
    F: FnMut(&mut Graph, &[usize]) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::Invalid("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut log = TrainLog::default();
    let mut epoch = Vec::new();
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size.min(n) > n {
            if !epoch.is_empty() {
                let mean = epoch.iter().sum::<f64>() / epoch.len() as f64;
                log.epoch_losses.push(mean);
                epoch.clear();
                if cfg.target_loss.is_some_and(|t| mean < t) {
                    break;
                }
            }
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch = &order[cursor..end];
        cursor = end;
        let grads = {
            let mut g = if dropout { Graph::training(store, cfg.seed ^ (step as u64 + 1)) } else { Graph::new(store) };
            let loss = build(&mut g, batch)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Invalid(format!("loss became {value} at step {step}")));
            }
            log.losses.push(value);
            epoch.push(value);
            g.backward(loss)?
        };
        store.zero_grad();
        store.accumulate(&grads);
        if let Some(c) = cfg.clip {
            clip_grad_norm(store, c);
        }
        adam.step(store);
    }
    if !epoch.is_empty() {
        log.epoch_losses.push(epoch.iter().sum::<f64>() / epoch.len() as f64);
    }
    Ok(log)
}

/// Mean of scalar loss nodes.
pub fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = *parts.first().ok_or_else(|| Error::Invalid("mean of no losses".into()))?;
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, 1.0 / parts.len() as f64))
}
