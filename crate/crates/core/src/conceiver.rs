//! Property stage: a strided convolutional encoder mapping a masked stack (or,
//! for the plain concept-bottleneck baseline, the raw image) to d concept
//! probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    BatchNorm, Conv2d, Graph, Linear, Mode, NumericsError, ParamStore, Tensor, Var,
};
use crate::observer::{soft_mask, MaskedStack, Provenance, SegmentationMap};
use crate::schema::{smooth_labels, ConceptSchema};
use crate::synth::Dataset;
use crate::train::{batched_mean, fit, TrainConfig, TrainError, TrainLog};

/// How the final feature map is reduced before the linear head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    GlobalAverage,
    /// Keep the spatial layout: the head sees every position of the last map.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            pooling: Pooling::GlobalAverage,
        }
    }
}

/// Stride-2 conv blocks, pooling and a linear head.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    blocks: Vec<(Conv2d, BatchNorm)>,
    head: Linear,
    pub in_channels: usize,
    pub outputs: usize,
    pub pooling: Pooling,
}

fn reduced(size: usize, blocks: usize) -> usize {
    (0..blocks).fold(size, |s, _| s.div_ceil(2))
}

impl ConvEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        height: usize,
        width: usize,
        outputs: usize,
        cfg: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let conv = Conv2d::new(
                store,
                &format!("{name}.block{i}.conv"),
                cin,
                w,
                3,
                2,
                1,
                rng,
            );
            let bn = BatchNorm::new(store, &format!("{name}.block{i}.bn"), w);
            blocks.push((conv, bn));
            cin = w;
        }
        let features = match cfg.pooling {
            Pooling::GlobalAverage => cin,
            Pooling::Flatten => {
                cin * reduced(height, cfg.widths.len()) * reduced(width, cfg.widths.len())
            }
        };
        let head = Linear::new(store, &format!("{name}.head"), features, outputs, rng);
        Self {
            blocks,
            head,
            in_channels,
            outputs,
            pooling: cfg.pooling,
        }
    }

    /// Pre-activation outputs `[b, outputs]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let mut h = x;
        for (conv, bn) in &self.blocks {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h);
        }
        let f = match self.pooling {
            Pooling::GlobalAverage => g.global_avg_pool(h)?,
            Pooling::Flatten => g.flatten(h),
        };
        self.head.forward(g, store, f)
    }
}

/// What the property stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceiverInput {
    /// Soft-masked stack with `segments * channels` planes.
    MaskedStack,
    /// The raw image (plain concept-bottleneck baseline).
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceiverConfig {
    pub encoder: EncoderConfig,
    /// Exclude padded (inapplicable) entries from the loss. Off by default:
    /// padded zeros are regular targets.
    pub mask_padding: bool,
    pub train: TrainConfig,
}

impl Default for ConceiverConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mask_padding: false,
            train: TrainConfig::new(50, 64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conceiver {
    pub store: ParamStore,
    pub encoder: ConvEncoder,
    pub input: ConceiverInput,
    binary: Vec<usize>,
    scalar: Vec<usize>,
}

impl Conceiver {
    pub fn new(
        schema: &ConceptSchema,
        input: ConceiverInput,
        channels: usize,
        height: usize,
        width: usize,
        cfg: &EncoderConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let in_ch = match input {
            ConceiverInput::MaskedStack => schema.n() * channels,
            ConceiverInput::Image => channels,
        };
        let encoder = ConvEncoder::new(
            &mut store,
            "conceiver",
            in_ch,
            height,
            width,
            schema.d(),
            cfg,
            &mut rng,
        );
        Self {
            store,
            encoder,
            input,
            binary: schema.binary_indices().to_vec(),
            scalar: schema.scalar_indices().to_vec(),
        }
    }

    /// Concept probabilities `[b, d]`.
    pub fn probabilities(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let z = self.encoder.forward(g, store, x, mode)?;
        Ok(g.sigmoid(z))
    }

    fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Tensor,
        target: &Tensor,
        mask: Option<&Tensor>,
        mode: Mode,
    ) -> Result<Var, NumericsError> {
        let x = g.input(x);
        let p = self.probabilities(g, store, x, mode)?;
        let pick = |t: &Tensor, cols: &[usize]| -> Tensor {
            let d = t.shape()[1];
            let rows = t.shape()[0];
            let mut out = Vec::with_capacity(rows * cols.len());
            for r in 0..rows {
                out.extend(cols.iter().map(|&c| t.data()[r * d + c]));
            }
            Tensor::new(vec![rows, cols.len()], out)
        };
        let mut terms = Vec::new();
        if !self.binary.is_empty() {
            let pb = g.select_cols(p, &self.binary)?;
            let m = mask.map(|m| pick(m, &self.binary));
            terms.push(g.bce_loss(pb, &pick(target, &self.binary), m.as_ref())?);
        }
        if !self.scalar.is_empty() {
            let ps = g.select_cols(p, &self.scalar)?;
            let m = mask.map(|m| pick(m, &self.scalar));
            terms.push(g.mse_loss(ps, &pick(target, &self.scalar), m.as_ref())?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(total)
    }

    /// Predicted concepts for a batch of inputs `[b, c, h, w]`, row-major `[b, d]`.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor, NumericsError> {
        let mut g = Graph::inference();
        let x = g.input(inputs.clone());
        let p = self.probabilities(&mut g, &self.store, x, Mode::Eval)?;
        Ok(g.value(p).clone())
    }

    /// Predicted concepts for masked stacks.
    pub fn predict_stacks(&self, stacks: &[&MaskedStack]) -> Result<Tensor, NumericsError> {
        let t: Vec<&Tensor> = stacks.iter().map(|s| &s.data).collect();
        self.predict(&Tensor::stack(&t))
    }
}

/// Smoothed, padded ground-truth concept targets `[ids, d]` and applicability.
pub fn concept_targets(schema: &ConceptSchema, data: &Dataset, ids: &[usize]) -> (Tensor, Tensor) {
    let d = schema.d();
    let mut t = Vec::with_capacity(ids.len() * d);
    let mut m = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        let s = &data.samples[i];
        let app = schema.applicability(s.anatomy);
        let v = smooth_labels(schema, &s.concepts, &app).expect("generated concepts are in range");
        t.extend(v.values);
        m.extend(app.iter().map(|&a| f64::from(u8::from(a))));
    }
    (
        Tensor::new(vec![ids.len(), d], t.clone()),
        Tensor::new(vec![ids.len(), d], m),
    )
}

/// Ground-truth masked stack of one sample.
pub fn ground_truth_stack(data: &Dataset, id: usize, segments: usize) -> MaskedStack {
    let s = &data.samples[id];
    let map = SegmentationMap::from_labels(&s.mask, segments, data.height, data.width);
    soft_mask(&map, &s.image).expect("dataset shapes agree")
}

/// Training inputs: ground-truth masked stacks or raw images.
pub fn training_inputs(
    data: &Dataset,
    ids: &[usize],
    input: ConceiverInput,
    segments: usize,
) -> Tensor {
    match input {
        ConceiverInput::MaskedStack => {
            let stacks: Vec<MaskedStack> = ids
                .iter()
                .map(|&i| ground_truth_stack(data, i, segments))
                .collect();
            debug_assert!(stacks
                .iter()
                .all(|s| s.provenance == Provenance::GroundTruth));
            let refs: Vec<&Tensor> = stacks.iter().map(|s| &s.data).collect();
            Tensor::stack(&refs)
        }
        ConceiverInput::Image => {
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &data.samples[i].image).collect();
            Tensor::stack(&refs)
        }
    }
}

/// Trains on ground-truth inputs and smoothed ground-truth concepts.
pub fn train_conceiver(
    schema: &ConceptSchema,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    input: ConceiverInput,
    cfg: &ConceiverConfig,
    seed: u64,
) -> Result<(Conceiver, TrainLog), TrainError> {
    let mut model = Conceiver::new(
        schema,
        input,
        data.channels,
        data.height,
        data.width,
        &cfg.encoder,
        seed,
    );
    let mut store = std::mem::take(&mut model.store);
    let n = schema.n();
    let tcfg = cfg.train.clone().with_seed(seed ^ 0xc0c0);
    let described = match input {
        ConceiverInput::MaskedStack => "ground-truth masked stacks -> ground-truth concepts",
        ConceiverInput::Image => "images -> ground-truth concepts",
    };
    let log = fit(
        "conceiver",
        described,
        &mut store,
        &tcfg,
        train,
        |g, store, ids| {
            let x = training_inputs(data, ids, input, n);
            let (t, m) = concept_targets(schema, data, ids);
            model.loss(g, store, x, &t, cfg.mask_padding.then_some(&m), Mode::Train)
        },
        |store| {
            batched_mean(val, 64, |ids| {
                let x = training_inputs(data, ids, input, n);
                let (t, m) = concept_targets(schema, data, ids);
                let mut g = Graph::inference();
                let l = model.loss(
                    &mut g,
                    store,
                    x,
                    &t,
                    cfg.mask_padding.then_some(&m),
                    Mode::Eval,
                )?;
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
    fn input_channel_counts() {
        let fetal = ConceptSchema::fetal();
        let c = Conceiver::new(
            &fetal,
            ConceiverInput::MaskedStack,
            1,
            16,
            16,
            &EncoderConfig::default(),
            0,
        );
        assert_eq!(c.encoder.in_channels, 14);
        let c = Conceiver::new(
            &fetal,
            ConceiverInput::MaskedStack,
            3,
            16,
            16,
            &EncoderConfig::default(),
            0,
        );
        assert_eq!(c.encoder.in_channels, 42);
        let geo = ConceptSchema::geoscan();
        let c = Conceiver::new(
            &geo,
            ConceiverInput::MaskedStack,
            1,
            16,
            16,
            &EncoderConfig::default(),
            0,
        );
        assert_eq!(c.encoder.in_channels, 10);
        let c = Conceiver::new(
            &geo,
            ConceiverInput::Image,
            1,
            16,
            16,
            &EncoderConfig::default(),
            0,
        );
        assert_eq!(c.encoder.in_channels, 1);
    }

    #[test]
    fn outputs_are_open_unit_interval_and_deterministic() {
        let geo = ConceptSchema::geoscan();
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            pooling: Pooling::Flatten,
        };
        let c = Conceiver::new(&geo, ConceiverInput::Image, 1, 8, 10, &cfg, 3);
        let x = Tensor::from_fn(&[2, 1, 8, 10], |i| (i as f64 * 0.37).sin());
        let a = c.predict(&x).unwrap();
        assert_eq!(a.shape(), &[2, 18]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, c.predict(&x).unwrap());
    }
}
