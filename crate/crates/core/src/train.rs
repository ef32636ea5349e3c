//! Shared minibatch training loop: AdamW, plateau schedule, best-validation
//! checkpointing and a per-epoch log.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    AdamW, AdamWConfig, Graph, NumericsError, ParamStore, PlateauScheduler, Var,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage}: loss became non-finite at epoch {epoch}; parameters restored to the best checkpoint")]
    Diverged { stage: String, epoch: usize },
    #[error("{stage}: empty training set")]
    EmptyTrainingSet { stage: String },
    #[error("{stage}: {source}")]
    Numerics {
        stage: String,
        #[source]
        source: NumericsError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            epochs,
            batch_size,
            lr: 1e-4,
            weight_decay: 1e-6,
            plateau_patience: 10,
            plateau_factor: 0.1,
            seed: 0,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    /// Names of every parameter the optimizer updated.
    pub optimized: Vec<String>,
    /// What the stage consumed as inputs and targets during training.
    pub inputs: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainLog {
    /// One line per epoch: `epoch=<e> train_loss=<l> val_loss=<v> lr=<r>`.
    pub fn to_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "stage={} epoch={} train_loss={:.6} val_loss={:.6} lr={:.2e}\n",
                    self.stage, e.epoch, e.train_loss, e.val_loss, e.lr
                )
            })
            .collect()
    }
}

/// Runs minibatch training over `items` (indices into caller data; repeats allowed).
///
/// `batch_loss` builds the scalar loss for one batch on a recording graph.
/// `val_loss` evaluates the current parameters. The best-validation parameters
/// are loaded back into `store` on return, including after divergence.
pub fn fit(
    stage: &str,
    inputs: &str,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    items: &[usize],
    mut batch_loss: impl FnMut(&mut Graph, &ParamStore, &[usize]) -> Result<Var, NumericsError>,
    mut val_loss: impl FnMut(&ParamStore) -> Result<f64, NumericsError>,
) -> Result<TrainLog, TrainError> {
    let numerics = |source| TrainError::Numerics {
        stage: stage.to_string(),
        source,
    };
    if items.is_empty() {
        return Err(TrainError::EmptyTrainingSet {
            stage: stage.to_string(),
        });
    }
    let mut opt = AdamW::new(
        store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = items.to_vec();
    let mut best = store.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let optimized: Vec<String> = store
        .trainable_ids()
        .map(|id| store.name(id).to_string())
        .collect();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, store, chunk).map_err(numerics)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                store.load_from(&best).map_err(numerics)?;
                return Err(TrainError::Diverged {
                    stage: stage.to_string(),
                    epoch,
                });
            }
            let mut grads = g.backward(loss, store).map_err(numerics)?;
            for u in g.take_stat_updates() {
                u.apply(store);
            }
            if let Err(e) = opt.step(store, &mut grads) {
                store.load_from(&best).map_err(numerics)?;
                return match e {
                    NumericsError::NonFiniteGradient { .. } => Err(TrainError::Diverged {
                        stage: stage.to_string(),
                        epoch,
                    }),
                    other => Err(numerics(other)),
                };
            }
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let val = val_loss(store).map_err(numerics)?;
        if !val.is_finite() {
            store.load_from(&best).map_err(numerics)?;
            return Err(TrainError::Diverged {
                stage: stage.to_string(),
                epoch,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / seen as f64,
            val_loss: val,
            lr: opt.lr(),
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = store.clone();
        }
        sched.observe(val, &mut opt);
    }
    store.load_from(&best).map_err(numerics)?;
    Ok(TrainLog {
        stage: stage.to_string(),
        optimized,
        inputs: inputs.to_string(),
        epochs,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Evaluates `f` over `items` in chunks and returns the item-weighted mean.
pub fn batched_mean(
    items: &[usize],
    batch: usize,
    mut f: impl FnMut(&[usize]) -> Result<f64, NumericsError>,
) -> Result<f64, NumericsError> {
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in items.chunks(batch.max(1)) {
        total += f(chunk)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
