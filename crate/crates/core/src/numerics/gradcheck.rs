//! Central finite-difference verification of the backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// Builds a scalar loss from a store and the graph handles of the inputs.
pub type LossBuilder<'a> =
    dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var, NumericsError> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub kind: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_loss(
    store: &ParamStore,
    inputs: &[Tensor],
    build: &LossBuilder,
) -> Result<f64, NumericsError> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, store, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares the tape gradients of every trainable parameter entry and every
/// input entry against central differences.
pub fn finite_difference_check(
    kind: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    build: &LossBuilder,
    tolerance: f64,
) -> Result<GradCheckEntry, NumericsError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, store, &vars)?;
    let param_grads = g.backward(loss, store)?;
    let input_grads = g.backward_wrt(loss, &vars)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        for k in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= FD_STEP;
            let numeric = (eval_loss(&plus, inputs, build)? - eval_loss(&minus, inputs, build)?)
                / (2.0 * FD_STEP);
            worst = worst.max(relative_error(param_grads.get(id).data()[k], numeric));
            checked += 1;
        }
    }
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval_loss(store, &plus, build)? - eval_loss(store, &minus, build)?)
                / (2.0 * FD_STEP);
            worst = worst.max(relative_error(input_grads[i].data()[k], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckEntry {
        kind: kind.to_string(),
        max_rel_error: worst,
        checked,
        tolerance,
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct, well separated values so max-pool winners never tie.
fn spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.02 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals)
}

fn one_hot_labels(
    n: usize,
    classes: usize,
    plane: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    let labels: Vec<usize> = (0..n * plane)
        .map(|_| rng.random_range(0..classes))
        .collect();
    let mut t = Tensor::zeros(&[n, classes, plane]);
    for i in 0..n {
        for p in 0..plane {
            t.data_mut()[(i * classes + labels[i * plane + p]) * plane + p] = 1.0;
        }
    }
    (t, labels)
}

/// Runs [`finite_difference_check`] on one small random network per layer
/// and loss kind.
pub fn layer_kind_suite(seed: u64, tolerance: f64) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();

    let mut push = |kind: &str,
                    store: &ParamStore,
                    inputs: Vec<Tensor>,
                    build: &LossBuilder|
     -> Result<(), NumericsError> {
        report.entries.push(finite_difference_check(
            kind, store, &inputs, build, tolerance,
        )?);
        Ok(())
    };

    {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, &mut rng);
        let target = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
        push(
            "conv2d",
            &store,
            vec![uniform(&[2, 2, 5, 6], -1.0, 1.0, &mut rng)],
            &|g, s, x| {
                let y = conv.forward(g, s, x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let mut store = ParamStore::new();
        let up = ConvTranspose2d::new(&mut store, "u", 3, 2, 2, &mut rng);
        let target = uniform(&[2, 2, 6, 8], -1.0, 1.0, &mut rng);
        push(
            "transposed-conv2d",
            &store,
            vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng)],
            &|g, s, x| {
                let y = up.forward(g, s, x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
        let target = uniform(&[3, 3], -1.0, 1.0, &mut rng);
        push(
            "linear",
            &store,
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            &|g, s, x| {
                let y = lin.forward(g, s, x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    let empty = ParamStore::new();
    {
        let target = uniform(&[3, 5], -1.0, 1.0, &mut rng);
        push(
            "relu",
            &empty,
            vec![off_kink(&[3, 5], &mut rng)],
            &|g, _, x| {
                let y = g.relu(x[0]);
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[3, 5], 0.0, 1.0, &mut rng);
        push(
            "sigmoid",
            &empty,
            vec![uniform(&[3, 5], -3.0, 3.0, &mut rng)],
            &|g, _, x| {
                let y = g.sigmoid(x[0]);
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[2, 4, 2, 3], 0.0, 1.0, &mut rng);
        push(
            "softmax-over-channel",
            &empty,
            vec![uniform(&[2, 4, 2, 3], -2.0, 2.0, &mut rng)],
            &|g, _, x| {
                let y = g.softmax(x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        push(
            "max-pool",
            &empty,
            vec![spread(&[2, 2, 4, 7], &mut rng)],
            &|g, _, x| {
                let y = g.max_pool2(x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    for (kind, mode) in [("batch-norm", Mode::Train), ("batch-norm-eval", Mode::Eval)] {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store
            .get_mut(bn.gamma)
            .data_mut()
            .copy_from_slice(&[0.7, 1.3, -0.4]);
        store
            .get_mut(bn.beta)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3]);
        store
            .get_mut(bn.running_mean)
            .data_mut()
            .copy_from_slice(&[0.05, -0.1, 0.2]);
        store
            .get_mut(bn.running_var)
            .data_mut()
            .copy_from_slice(&[0.8, 1.2, 0.5]);
        let target = uniform(&[4, 3, 2, 2], -1.0, 1.0, &mut rng);
        push(
            kind,
            &store,
            vec![uniform(&[4, 3, 2, 2], -1.0, 1.0, &mut rng)],
            &|g, s, x| {
                let y = bn.forward(g, s, x[0], mode)?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[2, 5, 2, 2], -1.0, 1.0, &mut rng);
        push(
            "concat",
            &empty,
            vec![
                uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng),
                uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng),
            ],
            &|g, _, x| {
                let y = g.concat(&[x[0], x[1]])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[2, 12], -1.0, 1.0, &mut rng);
        push(
            "flatten",
            &empty,
            vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng)],
            &|g, _, x| {
                let y = g.flatten(x[0]);
                let y = g.scale(y, 1.5);
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
        push(
            "hadamard",
            &empty,
            vec![
                uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng),
                uniform(&[2, 3, 2, 2], 0.0, 1.0, &mut rng),
            ],
            &|g, _, x| {
                let y = g.hadamard(x[0], x[1])?;
                let y = g.add(y, x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[2, 3], -1.0, 1.0, &mut rng);
        push(
            "global-avg-pool",
            &empty,
            vec![uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng)],
            &|g, _, x| {
                let y = g.global_avg_pool(x[0])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[3, 2], 0.0, 1.0, &mut rng);
        push(
            "select+sqrt",
            &empty,
            vec![uniform(&[3, 4], 0.05, 1.0, &mut rng)],
            &|g, _, x| {
                let y = g.select_cols(x[0], &[3, 1])?;
                let y = g.sqrt_safe(y);
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let target = uniform(&[3, 1], 0.0, 1.0, &mut rng);
        push(
            "interaction",
            &empty,
            vec![
                uniform(&[3, 4], 0.0, 1.0, &mut rng),
                uniform(&[3, 4], 0.1, 2.0, &mut rng),
            ],
            &|g, _, x| {
                let y = g.interaction(x[0], x[1])?;
                g.mse_loss(y, &target, None)
            },
        )?;
    }
    {
        let (target, _) = one_hot_labels(2, 3, 6, &mut rng);
        let target = target.reshape(&[2, 3, 2, 3]);
        push(
            "dice",
            &empty,
            vec![uniform(&[2, 3, 2, 3], -2.0, 2.0, &mut rng)],
            &|g, _, x| {
                let p = g.softmax(x[0])?;
                g.dice_loss(p, &target, 1.0)
            },
        )?;
    }
    {
        let (_, labels) = one_hot_labels(2, 3, 6, &mut rng);
        push(
            "focal",
            &empty,
            vec![uniform(&[2, 3, 2, 3], -2.0, 2.0, &mut rng)],
            &|g, _, x| {
                let p = g.softmax(x[0])?;
                g.focal_loss(p, &labels, &[0.5, 1.0, 2.0], 2.0)
            },
        )?;
    }
    {
        let target = uniform(&[3, 4], 0.0, 1.0, &mut rng);
        let mask = Tensor::from_fn(&[3, 4], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
        push(
            "bce",
            &empty,
            vec![uniform(&[3, 4], -3.0, 3.0, &mut rng)],
            &|g, _, x| {
                let p = g.sigmoid(x[0]);
                g.bce_loss(p, &target, Some(&mask))
            },
        )?;
    }
    {
        let target = uniform(&[3, 4], -1.0, 1.0, &mut rng);
        push(
            "mse",
            &empty,
            vec![uniform(&[3, 4], -1.0, 1.0, &mut rng)],
            &|g, _, x| g.mse_loss(x[0], &target, None),
        )?;
    }
    {
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        push(
            "cross-entropy",
            &empty,
            vec![uniform(&[4, 5], -3.0, 3.0, &mut rng)],
            &|g, _, x| g.cross_entropy(x[0], &labels),
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes_for_one_seed() {
        let report = layer_kind_suite(7, 1e-4).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        assert!(report.entries.len() >= 20);
    }

    #[test]
    fn two_layer_relu_net_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 3, 6, &mut rng);
        let l2 = Linear::new(&mut store, "l2", 6, 2, &mut rng);
        let target = uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let x = off_kink(&[4, 3], &mut rng);
        let entry = finite_difference_check(
            "mlp",
            &store,
            &[x],
            &|g, s, x| {
                let h = l1.forward(g, s, x[0])?;
                let h = g.relu(h);
                let y = l2.forward(g, s, h)?;
                g.mse_loss(y, &target, None)
            },
            1e-4,
        )
        .unwrap();
        assert!(entry.passed(), "{entry:?}");
    }

    #[test]
    fn linear_only_net_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 3, 4, &mut rng);
        let l2 = Linear::new(&mut store, "l2", 4, 2, &mut rng);
        let target = uniform(&[2, 2], -1.0, 1.0, &mut rng);
        let entry = finite_difference_check(
            "linear-net",
            &store,
            &[uniform(&[2, 3], -1.0, 1.0, &mut rng)],
            &|g, s, x| {
                let h = l1.forward(g, s, x[0])?;
                let y = l2.forward(g, s, h)?;
                g.mse_loss(y, &target, None)
            },
            1e-6,
        )
        .unwrap();
        assert!(entry.passed(), "{entry:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_flagged() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.8]);
        let entry = finite_difference_check(
            "bad-square",
            &ParamStore::new(),
            &[x],
            &|g, _, x| {
                let v = g.value(x[0]).map(|a| a * a);
                // d(x^2)/dx is 2x; this rule claims 3x.
                let y = g.custom(
                    &[x[0]],
                    v,
                    Box::new(|gout, ins, _| vec![ins[0].zip_map(gout, |a, go| 3.0 * a * go)]),
                );
                let target = Tensor::zeros(&[1, 3]);
                g.mse_loss(y, &target, None)
            },
            1e-4,
        )
        .unwrap();
        assert!(!entry.passed());
    }
}
