//! Class stage: optional pairwise concept interaction feeding an MLP classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{BatchNorm, Graph, Linear, Mode, NumericsError, ParamStore, Tensor, Var};
use crate::synth::oversample;
use crate::train::{batched_mean, fit, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden: usize,
    /// Hidden widths of the interaction weight network.
    pub weight_hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            weight_hidden: vec![12, 12, 12],
            train: TrainConfig::new(50, 64),
        }
    }
}

/// Maps binary-concept probabilities to non-negative pair weights.
#[derive(Debug, Clone)]
pub struct WeightNet {
    hidden: Vec<(Linear, BatchNorm)>,
    out: Linear,
}

impl WeightNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cin = width;
        for (i, &h) in hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.hidden{i}"), cin, h, rng);
            let bn = BatchNorm::new(store, &format!("{name}.hidden{i}.bn"), h);
            layers.push((lin, bn));
            cin = h;
        }
        let out = Linear::new(store, &format!("{name}.out"), cin, width, rng);
        Self {
            hidden: layers,
            out,
        }
    }

    /// `ω = relu(ε(c_b))`, shape `[b, d_b]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cb: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let mut h = cb;
        for (lin, bn) in &self.hidden {
            h = lin.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h);
        }
        let z = self.out.forward(g, store, h)?;
        Ok(g.relu(z))
    }
}

/// Per-sample outputs of the class stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Interaction weights over the binary concepts, when the module is enabled.
    pub omega: Option<Vec<f64>>,
    /// Interacted concept value.
    pub interaction: Option<f64>,
}

impl ClassOutput {
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// MLP over the input features, optionally augmented with `sqrt(c̄)` from the
/// interaction of the binary entries.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub store: ParamStore,
    pub inputs: usize,
    pub classes: usize,
    /// Binary columns feeding the interaction module; `None` disables it.
    pub binary: Option<Vec<usize>>,
    weights: Option<WeightNet>,
    hidden: Linear,
    out: Linear,
}

struct Forward {
    logits: Var,
    omega: Option<Var>,
    interaction: Option<Var>,
}

impl Predictor {
    /// `binary` selects the interaction columns; pass `None` for a plain MLP.
    pub fn new(
        inputs: usize,
        classes: usize,
        binary: Option<Vec<usize>>,
        cfg: &PredictorConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let weights = binary.as_ref().map(|b| {
            WeightNet::new(
                &mut store,
                "predictor.interaction",
                b.len(),
                &cfg.weight_hidden,
                &mut rng,
            )
        });
        let width = inputs + usize::from(binary.is_some());
        let hidden = Linear::new(&mut store, "predictor.hidden", width, cfg.hidden, &mut rng);
        let out = Linear::new(&mut store, "predictor.out", cfg.hidden, classes, &mut rng);
        Self {
            store,
            inputs,
            classes,
            binary,
            weights,
            hidden,
            out,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        c: Var,
        mode: Mode,
    ) -> Result<Forward, NumericsError> {
        let (x, omega, interaction) = match (&self.binary, &self.weights) {
            (Some(cols), Some(net)) => {
                let cb = g.select_cols(c, cols)?;
                let w = net.forward(g, store, cb, mode)?;
                let cbar = g.interaction(cb, w)?;
                let root = g.sqrt_safe(cbar);
                (g.concat(&[c, root])?, Some(w), Some(cbar))
            }
            _ => (c, None, None),
        };
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let logits = self.out.forward(g, store, h)?;
        Ok(Forward {
            logits,
            omega,
            interaction,
        })
    }

    /// Mean cross entropy of a batch.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let c = g.input(x);
        let f = self.forward(g, store, c, mode)?;
        g.cross_entropy(f.logits, labels)
    }

    /// Eval-mode outputs for `[b, inputs]` features.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<ClassOutput>, NumericsError> {
        if x.shape().len() != 2 || x.shape()[1] != self.inputs {
            return Err(NumericsError::ShapeMismatch {
                kind: "predictor",
                detail: format!("expected [b, {}], got {:?}", self.inputs, x.shape()),
            });
        }
        let mut g = Graph::inference();
        let c = g.input(x.clone());
        let f = self.forward(&mut g, &self.store, c, Mode::Eval)?;
        let b = x.shape()[0];
        let k = self.classes;
        let logits = g.value(f.logits).data().to_vec();
        let omega = f.omega.map(|w| g.value(w).data().to_vec());
        let inter = f.interaction.map(|v| g.value(v).data().to_vec());
        let db = self.binary.as_ref().map_or(0, Vec::len);
        Ok((0..b)
            .map(|i| {
                let l = logits[i * k..(i + 1) * k].to_vec();
                ClassOutput {
                    probabilities: softmax(&l),
                    logits: l,
                    omega: omega.as_ref().map(|w| w[i * db..(i + 1) * db].to_vec()),
                    interaction: inter.as_ref().map(|v| v[i]),
                }
            })
            .collect())
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.store
            .trainable_ids()
            .map(|id| self.store.get(id).len())
            .sum()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gathers rows of a `[n, k]` matrix.
pub fn rows(x: &Tensor, ids: &[usize]) -> Tensor {
    let k = x.shape()[1];
    let mut out = Vec::with_capacity(ids.len() * k);
    for &i in ids {
        out.extend_from_slice(&x.data()[i * k..(i + 1) * k]);
    }
    Tensor::new(vec![ids.len(), k], out)
}

/// Trains on `features` rows (one per item) with minority-class oversampling
/// of the training rows. The interaction module, if enabled, is optimized
/// jointly with the MLP.
#[allow(clippy::too_many_arguments)]
pub fn train_predictor(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    train: &[usize],
    val: &[usize],
    binary: Option<Vec<usize>>,
    cfg: &PredictorConfig,
    seed: u64,
    described: &str,
) -> Result<(Predictor, TrainLog), TrainError> {
    let mut model = Predictor::new(features.shape()[1], classes, binary, cfg, seed);
    let mut store = std::mem::take(&mut model.store);
    let items = oversample(train, labels, classes);
    let tcfg = cfg.train.clone().with_seed(seed ^ 0x9e37);
    let pick = |ids: &[usize]| {
        (
            rows(features, ids),
            ids.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
    };
    let log = fit(
        "predictor",
        described,
        &mut store,
        &tcfg,
        &items,
        |g, store, ids| {
            let (x, y) = pick(ids);
            model.loss(g, store, x, &y, Mode::Train)
        },
        |store| {
            batched_mean(val, 256, |ids| {
                let (x, y) = pick(ids);
                let mut g = Graph::inference();
                let l = model.loss(&mut g, store, x, &y, Mode::Eval)?;
                Ok(g.value(l).item())
            })
        },
    );
    model.store = store;
    Ok((model, log?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interaction_adds_one_input_and_parameters() {
        let cfg = PredictorConfig::default();
        let plain = Predictor::new(18, 8, None, &cfg, 0);
        let ci = Predictor::new(18, 8, Some(vec![2, 3, 4, 8]), &cfg, 0);
        assert!(ci.parameter_count() > plain.parameter_count());
        let x = Tensor::from_fn(&[3, 18], |i| (i % 7) as f64 / 7.0);
        let out = ci.predict(&x).unwrap();
        assert_eq!(out.len(), 3);
        for o in &out {
            assert_eq!(o.omega.as_ref().unwrap().len(), 4);
            assert!(o.omega.as_ref().unwrap().iter().all(|&w| w >= 0.0));
            let v = o.interaction.unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!((o.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(plain.predict(&x).unwrap()[0].omega.is_none());
        assert!(plain.predict(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn single_class_is_trivial() {
        let x = Tensor::from_fn(&[20, 3], |i| (i as f64 * 0.13).sin().abs());
        let labels = vec![0; 20];
        let ids: Vec<usize> = (0..20).collect();
        let cfg = PredictorConfig {
            hidden: 8,
            train: TrainConfig::new(2, 8),
            ..Default::default()
        };
        let (p, _) = train_predictor(&x, &labels, 1, &ids, &ids, None, &cfg, 1, "test").unwrap();
        assert!(p.predict(&x).unwrap().iter().all(|o| o.class() == 0));
    }
}
