//! Comparison models without the property bottleneck: a classifier reading the
//! masked stack directly, and an end-to-end model of the same macro-shape whose
//! Hadamard masking is replaced by a learned convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conceiver::{training_inputs, ConceiverInput, ConvEncoder, EncoderConfig};
use crate::numerics::{Conv2d, Graph, Linear, Mode, NumericsError, ParamStore, Tensor, Var};
use crate::observer::{MaskedStack, Observer};
use crate::predictor::{softmax, ClassOutput};
use crate::synth::{oversample, Dataset};
use crate::train::{batched_mean, fit, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegOnlyConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for SegOnlyConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::new(50, 64),
        }
    }
}

/// Encoder from masked stack straight to class logits.
#[derive(Debug, Clone)]
pub struct SegOnlyClassifier {
    pub store: ParamStore,
    pub encoder: ConvEncoder,
}

fn outputs_from_logits(logits: &Tensor) -> Vec<ClassOutput> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|l| ClassOutput {
            logits: l.to_vec(),
            probabilities: softmax(l),
            omega: None,
            interaction: None,
        })
        .collect()
}

impl SegOnlyClassifier {
    pub fn new(
        stack_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        cfg: &EncoderConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ConvEncoder::new(
            &mut store,
            "segonly",
            stack_channels,
            height,
            width,
            classes,
            cfg,
            &mut rng,
        );
        Self { store, encoder }
    }

    pub fn predict_stacks(
        &self,
        stacks: &[&MaskedStack],
    ) -> Result<Vec<ClassOutput>, NumericsError> {
        let t: Vec<&Tensor> = stacks.iter().map(|s| &s.data).collect();
        let mut g = Graph::inference();
        let x = g.input(Tensor::stack(&t));
        let z = self.encoder.forward(&mut g, &self.store, x, Mode::Eval)?;
        Ok(outputs_from_logits(g.value(z)))
    }
}

/// Trains on ground-truth masked stacks and class labels.
pub fn train_seg_only(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    segments: usize,
    classes: usize,
    cfg: &SegOnlyConfig,
    seed: u64,
) -> Result<(SegOnlyClassifier, TrainLog), TrainError> {
    let mut model = SegOnlyClassifier::new(
        segments * data.channels,
        data.height,
        data.width,
        classes,
        &cfg.encoder,
        seed,
    );
    let mut store = std::mem::take(&mut model.store);
    let labels = data.labels();
    let items = oversample(train, &labels, classes);
    let loss = |g: &mut Graph,
                store: &ParamStore,
                ids: &[usize],
                mode: Mode|
     -> Result<Var, NumericsError> {
        let x = g.input(training_inputs(
            data,
            ids,
            ConceiverInput::MaskedStack,
            segments,
        ));
        let z = model.encoder.forward(g, store, x, mode)?;
        let y: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
        g.cross_entropy(z, &y)
    };
    let log = fit(
        "segonly",
        "ground-truth masked stacks -> labels",
        &mut store,
        &cfg.train.clone().with_seed(seed ^ 0x5e60),
        &items,
        |g, store, ids| loss(g, store, ids, Mode::Train),
        |store| {
            batched_mean(val, 64, |ids| {
                let mut g = Graph::inference();
                let l = loss(&mut g, store, ids, Mode::Eval)?;
                Ok(g.value(l).item())
            })
        },
    );
    model.store = store;
    Ok((model, log?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardConfig {
    pub levels: usize,
    pub base_width: usize,
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for StandardConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 16,
            encoder: EncoderConfig::default(),
            hidden: 1024,
            train: TrainConfig::new(50, 16),
        }
    }
}

/// U-Net, mixing convolution, encoder and MLP trained jointly on labels only.
#[derive(Debug, Clone)]
pub struct StandardModel {
    pub store: ParamStore,
    observer: Observer,
    mix: Conv2d,
    encoder: ConvEncoder,
    hidden: Linear,
    out: Linear,
}

impl StandardModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        segments: usize,
        concepts: usize,
        classes: usize,
        cfg: &StandardConfig,
        seed: u64,
    ) -> Self {
        let mut observer = Observer::new(channels, segments, cfg.levels, cfg.base_width, seed);
        let mut store = std::mem::take(&mut observer.store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a0);
        let mix = Conv2d::new(
            &mut store,
            "standard.mix",
            segments + channels,
            segments * channels,
            3,
            1,
            1,
            &mut rng,
        );
        let encoder = ConvEncoder::new(
            &mut store,
            "standard.encoder",
            segments * channels,
            height,
            width,
            concepts,
            &cfg.encoder,
            &mut rng,
        );
        let hidden = Linear::new(
            &mut store,
            "standard.hidden",
            concepts,
            cfg.hidden,
            &mut rng,
        );
        let out = Linear::new(&mut store, "standard.out", cfg.hidden, classes, &mut rng);
        Self {
            store,
            observer,
            mix,
            encoder,
            hidden,
            out,
        }
    }

    fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let seg = self.observer.logits(g, store, x, mode)?;
        let p = g.softmax(seg)?;
        let joined = g.concat(&[p, x])?;
        let mixed = self.mix.forward(g, store, joined)?;
        let z = self.encoder.forward(g, store, mixed, mode)?;
        let c = g.sigmoid(z);
        let h = self.hidden.forward(g, store, c)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }

    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<ClassOutput>, NumericsError> {
        let mut g = Graph::inference();
        let x = g.input(Tensor::stack(images));
        let z = self.logits(&mut g, &self.store, x, Mode::Eval)?;
        Ok(outputs_from_logits(g.value(z)))
    }
}

/// End-to-end training from images to labels.
#[allow(clippy::too_many_arguments)]
pub fn train_standard(
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    segments: usize,
    concepts: usize,
    classes: usize,
    cfg: &StandardConfig,
    seed: u64,
) -> Result<(StandardModel, TrainLog), TrainError> {
    let mut model = StandardModel::new(
        data.channels,
        data.height,
        data.width,
        segments,
        concepts,
        classes,
        cfg,
        seed,
    );
    model
        .observer
        .check_input(data.height, data.width)
        .map_err(|source| TrainError::Numerics {
            stage: "standard".into(),
            source,
        })?;
    let mut store = std::mem::take(&mut model.store);
    let labels = data.labels();
    let items = oversample(train, &labels, classes);
    let loss = |g: &mut Graph,
                store: &ParamStore,
                ids: &[usize],
                mode: Mode|
     -> Result<Var, NumericsError> {
        let x = g.input(training_inputs(data, ids, ConceiverInput::Image, segments));
        let z = model.logits(g, store, x, mode)?;
        let y: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
        g.cross_entropy(z, &y)
    };
    let log = fit(
        "standard",
        "images -> labels",
        &mut store,
        &cfg.train.clone().with_seed(seed ^ 0x57a1),
        &items,
        |g, store, ids| loss(g, store, ids, Mode::Train),
        |store| {
            batched_mean(val, 32, |ids| {
                let mut g = Graph::inference();
                let l = loss(&mut g, store, ids, Mode::Eval)?;
                Ok(g.value(l).item())
            })
        },
    );
    model.store = store;
    Ok((model, log?))
}
