//! Desk-scale training bench: Gaussian cluster datasets, a small ReLU MLP
//! with a softmax head, plain SGD, and deterministic evaluation.
//!
//! Everything is seeded, so a (seed, config) pair reproduces datasets,
//! initializations, and whole training runs bit-for-bit.
//!
//! The classifier is bias-free: layer `l` maps its input `X_l` to the
//! pre-activation `A_l = W_l * X_l`. That keeps the probing identity
//! `delta A = delta W * X` exact at every layer (see [`crate::probe`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointMeta, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Fraction of samples reserved for the heldout split.
const HELDOUT_FRACTION: f64 = 0.25;

/// Spread of the class means relative to the unit within-class noise.
/// Chosen so the default bench task is learnable but not separable: the
/// loss keeps descending noisily through the early snapshots instead of
/// collapsing within a handful of steps.
const CLASS_MEAN_SCALE: f64 = 1.0;

/// Salt separating the shuffle stream from the init stream under one seed.
const SHUFFLE_SALT: u64 = 0x5157_u64;

// ---------------------------------------------------------------- dataset

/// Samples as columns of `x` (shape d_in x n) with integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub whitened: bool,
}

impl Dataset {
    pub fn d_in(&self) -> usize {
        self.x.rows()
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which split of a dataset an operation should see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// Draws `n` samples from `classes` Gaussian clusters in `d_in` dimensions,
/// assigning labels round-robin and splitting train/heldout by a seeded
/// shuffle.
///
/// With `whitened` set, the sample columns are orthogonalized and rescaled
/// so that `X^T X = d_in * I` holds for the whole column block; this
/// requires `n <= d_in` and is rejected with `InvalidShape` otherwise.
pub fn make_dataset(
    d_in: usize,
    classes: usize,
    n: usize,
    seed: u64,
    whitened: bool,
) -> Result<Dataset> {
    if d_in == 0 || n == 0 {
        return Err(Error::InvalidShape(format!("degenerate dataset {d_in}x{n}")));
    }
    if classes < 2 {
        return Err(Error::InvalidShape(format!("need at least 2 classes, got {classes}")));
    }
    if whitened && n > d_in {
        return Err(Error::InvalidShape(format!(
            "whitened batch needs n <= d_in, got n={n} d_in={d_in}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d_in).map(|_| CLASS_MEAN_SCALE * normal(&mut rng)).collect())
        .collect();

    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &label in &y {
        let col: Vec<f64> = means[label].iter().map(|m| m + normal(&mut rng)).collect();
        cols.push(col);
    }

    if whitened {
        orthogonalize_columns(&mut cols, &mut rng)?;
        let target = (d_in as f64).sqrt();
        for col in &mut cols {
            let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in col.iter_mut() {
                *v *= target / nrm;
            }
        }
    }

    let mut data = vec![0.0; d_in * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    let x = Matrix::from_vec(d_in, n, data)?;

    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let heldout = ((n as f64 * HELDOUT_FRACTION) as usize).min(n.saturating_sub(1));
    let split_at = n - heldout;
    let mut train_idx = order[..split_at].to_vec();
    let mut heldout_idx = order[split_at..].to_vec();
    train_idx.sort_unstable();
    heldout_idx.sort_unstable();

    Ok(Dataset { x, y, train_idx, heldout_idx, classes, seed, whitened })
}

/// Makes the columns mutually orthogonal in place (two-pass Gram-Schmidt),
/// redrawing any column that collapses onto the span of the earlier ones.
fn orthogonalize_columns(cols: &mut [Vec<f64>], rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cols[0].len();
    let floor = 1e-6 * (d as f64).sqrt();
    for j in 0..cols.len() {
        let mut attempts = 0;
        loop {
            let (done, rest) = cols.split_at_mut(j);
            let col = &mut rest[0];
            for _pass in 0..2 {
                for prev in done.iter() {
                    let prev_sq: f64 = prev.iter().map(|v| v * v).sum();
                    let coef: f64 =
                        col.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() / prev_sq;
                    for (c, p) in col.iter_mut().zip(prev) {
                        *c -= coef * p;
                    }
                }
            }
            let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > floor {
                break;
            }
            attempts += 1;
            if attempts > 64 {
                return Err(Error::InsufficientData(
                    "could not draw linearly independent whitening columns".into(),
                ));
            }
            for v in col.iter_mut() {
                *v = normal(rng);
            }
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ model

/// Layer widths `[d_in, hidden.., classes]` of the bias-free MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub widths: Vec<usize>,
}

impl ModelArch {
    /// Widths must list input, at least one hidden layer, and the head,
    /// each of size two or more.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidShape(format!(
                "architecture needs input, hidden, and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w < 2) {
            return Err(Error::InvalidShape(format!("layer widths must be >= 2: {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Compact string form stored in checkpoint metadata, e.g. `mlp:16x32x4`.
    pub fn descriptor(&self) -> String {
        let dims: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("mlp:{}", dims.join("x"))
    }
}

fn layer_name(index: usize) -> String {
    format!("layers.{index}.weight")
}

/// Weight matrices of a checkpointed model, in feed-forward order.
///
/// Layers are discovered by name (`layers.<i>.weight`); indices must be
/// contiguous from zero and consecutive shapes must chain.
pub fn layer_weights(model: &Checkpoint) -> Result<Vec<(String, Matrix)>> {
    let mut found: BTreeMap<usize, (String, Matrix)> = BTreeMap::new();
    for (name, tensor) in model.iter() {
        let Some(idx) = name
            .strip_prefix("layers.")
            .and_then(|rest| rest.strip_suffix(".weight"))
            .and_then(|mid| mid.parse::<usize>().ok())
        else {
            continue;
        };
        let Tensor::Matrix(m) = tensor else {
            return Err(Error::InvalidShape(format!("{name} is not 2-D")));
        };
        found.insert(idx, (name.to_string(), m.clone()));
    }
    if found.is_empty() {
        return Err(Error::Empty("model has no layers.<i>.weight tensors".into()));
    }
    let layers: Vec<(String, Matrix)> = found.into_values().collect();
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[1].1.cols() != pair[0].1.rows() {
            return Err(Error::ShapeMismatch(format!(
                "layer {} outputs {} but layer {} consumes {}",
                i,
                pair[0].1.rows(),
                i + 1,
                pair[1].1.cols()
            )));
        }
    }
    Ok(layers)
}

/// Deterministic Gaussian init, entries scaled by 1/sqrt(fan_in).
pub fn init_model(arch: &ModelArch, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        step: 0,
        seed,
        arch: arch.descriptor(),
        tag: "init".into(),
    });
    for l in 0..arch.widths.len() - 1 {
        let fan_in = arch.widths[l];
        let fan_out = arch.widths[l + 1];
        let scale = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| scale * normal(&mut rng)).collect();
        ckpt.insert(layer_name(l), Tensor::Matrix(Matrix::from_vec(fan_out, fan_in, data)?))?;
    }
    Ok(ckpt)
}

/// Per-layer record of one forward pass: the input each layer saw and the
/// pre-activation `W * X` it produced. The last pre-activation is the logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layer_names: Vec<String>,
    pub inputs: Vec<Matrix>,
    pub linear: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.linear.last().expect("at least one layer")
    }
}

/// Runs the model on a batch (columns are samples), recording layer inputs
/// and pre-activations. ReLU is applied between layers, never after the last.
pub fn forward_trace(model: &Checkpoint, x: &Matrix) -> Result<ForwardTrace> {
    let layers = layer_weights(model)?;
    if x.rows() != layers[0].1.cols() {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features but the first layer consumes {}",
            x.rows(),
            layers[0].1.cols()
        )));
    }
    let mut inputs = vec![x.clone()];
    let mut linear = Vec::with_capacity(layers.len());
    let mut names = Vec::with_capacity(layers.len());
    for (i, (name, w)) in layers.iter().enumerate() {
        let a = w.matmul(inputs.last().unwrap())?;
        if i + 1 < layers.len() {
            inputs.push(relu(&a));
        }
        linear.push(a);
        names.push(name.clone());
    }
    Ok(ForwardTrace { layer_names: names, inputs, linear })
}

fn relu(m: &Matrix) -> Matrix {
    let data: Vec<f64> = m.as_slice().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Matrix::from_vec(m.rows(), m.cols(), data).expect("shape preserved")
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(logits: &Matrix) -> Matrix {
    let (c, n) = logits.shape();
    let mut out = Matrix::zeros(c, n).expect("positive dims");
    for j in 0..n {
        let col = logits.col(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for i in 0..c {
            out.set(i, j, exps[i] / sum);
        }
    }
    out
}

/// Mean cross-entropy of logits against integer labels, computed via
/// log-sum-exp for stability.
pub fn mean_cross_entropy(logits: &Matrix, y: &[usize]) -> Result<f64> {
    let (c, n) = logits.shape();
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} logit columns vs {} labels", y.len())));
    }
    let mut total = 0.0;
    for (j, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidShape(format!("label {label} out of {c} classes")));
        }
        let col = logits.col(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - col[label];
    }
    Ok(total / n as f64)
}

// --------------------------------------------------------------- training

/// Per-layer byproducts of one SGD step.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    /// Gradient of the mean loss with respect to the layer weights.
    pub grad: Matrix,
    /// Error signal E = dL/dA at the layer's pre-activation, shape out x n.
    pub error: Matrix,
    /// The input X the layer consumed, shape in x n.
    pub input: Matrix,
}

/// Gradients, error signals, and layer inputs from a single step.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub layers: BTreeMap<String, LayerGrad>,
    /// Mean cross-entropy of the batch before the update.
    pub loss: f64,
}

/// One SGD step on a batch. Returns the updated checkpoint (step advanced by
/// one) and the gradient record. Every layer gradient is formed as
/// `E * X^T`, and the update applies `W - eta * grad` entrywise.
pub fn sgd_step(
    model: &Checkpoint,
    x: &Matrix,
    y: &[usize],
    eta: f64,
) -> Result<(Checkpoint, GradientRecord)> {
    if !eta.is_finite() {
        return Err(Error::NonFinite("learning rate".into()));
    }
    if x.cols() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} columns vs {} labels",
            x.cols(),
            y.len()
        )));
    }
    let trace = forward_trace(model, x)?;
    let loss = mean_cross_entropy(trace.logits(), y)?;
    let n = x.cols();
    let layer_count = trace.linear.len();

    // Softmax head: E = (P - Y) / n.
    let probs = softmax_columns(trace.logits());
    let classes = probs.rows();
    let mut error = Matrix::zeros(classes, n)?;
    for j in 0..n {
        for i in 0..classes {
            let target = if y[j] == i { 1.0 } else { 0.0 };
            error.set(i, j, (probs.get(i, j) - target) / n as f64);
        }
    }

    let weights = layer_weights(model)?;
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(layer_count);
    let mut e = error;
    for l in (0..layer_count).rev() {
        let grad = e.matmul(&trace.inputs[l].transpose())?;
        grads.push(LayerGrad { grad, error: e.clone(), input: trace.inputs[l].clone() });
        if l > 0 {
            // Backpropagate through the ReLU: gradient flows only where the
            // previous pre-activation was strictly positive.
            let back = weights[l].1.transpose().matmul(&e)?;
            let mask = &trace.linear[l - 1];
            let mut masked = Matrix::zeros(back.rows(), back.cols())?;
            for i in 0..back.rows() {
                for j in 0..back.cols() {
                    if mask.get(i, j) > 0.0 {
                        masked.set(i, j, back.get(i, j));
                    }
                }
            }
            e = masked;
        }
    }
    grads.reverse();

    let mut updated = Checkpoint::new(CheckpointMeta {
        step: model.meta.step + 1,
        ..model.meta.clone()
    });
    let mut record = GradientRecord { layers: BTreeMap::new(), loss };
    for ((name, w), lg) in weights.into_iter().zip(grads) {
        let new_w = w.sub(&lg.grad.scale(eta))?;
        updated.insert(name.clone(), Tensor::Matrix(new_w))?;
        record.layers.insert(name, lg);
    }
    Ok((updated, record))
}

/// Knobs for [`train`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: u64,
    pub snapshot_every: u64,
    pub batch: usize,
    pub seed: u64,
}

/// A completed training run: periodic snapshots plus the per-step losses.
#[derive(Debug)]
pub struct TrainRun {
    pub snapshots: Vec<Checkpoint>,
    /// (step, mean batch loss before the update) for every step taken.
    pub step_losses: Vec<(u64, f64)>,
}

/// Trains from a fresh seeded init, snapshotting every `snapshot_every`
/// steps (step numbering starts at 1). Train-split indices are reshuffled
/// each epoch; a trailing partial batch is dropped so every step sees
/// exactly `cfg.batch` samples.
pub fn train(arch: &ModelArch, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    if arch.d_in() != dataset.d_in() {
        return Err(Error::ShapeMismatch(format!(
            "architecture consumes {} features, dataset provides {}",
            arch.d_in(),
            dataset.d_in()
        )));
    }
    if arch.classes() < dataset.classes {
        return Err(Error::InvalidShape(format!(
            "{} output classes cannot cover {} dataset classes",
            arch.classes(),
            dataset.classes
        )));
    }
    if cfg.batch == 0 || cfg.snapshot_every == 0 {
        return Err(Error::InvalidShape("batch and snapshot_every must be positive".into()));
    }
    if dataset.train_idx.len() < cfg.batch {
        return Err(Error::InsufficientData(format!(
            "train split holds {} samples, batch needs {}",
            dataset.train_idx.len(),
            cfg.batch
        )));
    }

    let mut model = init_model(arch, cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order = dataset.train_idx.clone();
    shuffle(&mut order, &mut shuffle_rng);
    let mut cursor = 0usize;

    let mut snapshots = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        if cursor + cfg.batch > order.len() {
            shuffle(&mut order, &mut shuffle_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + cfg.batch];
        cursor += cfg.batch;

        let xb = dataset.x.select_cols(idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| dataset.y[i]).collect();
        let (next, record) = sgd_step(&model, &xb, &yb, cfg.eta)?;
        step_losses.push((step, record.loss));
        model = next;
        model.meta.step = step;

        if step % cfg.snapshot_every == 0 {
            let mut snap = model.clone();
            snap.meta.tag = "snapshot".into();
            snapshots.push(snap);
        }
    }
    Ok(TrainRun { snapshots, step_losses })
}

/// Loss and accuracy over one split. Argmax ties resolve to the lowest
/// class index, so evaluation is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(model: &Checkpoint, dataset: &Dataset, split: Split) -> Result<EvalMetrics> {
    let idx = match split {
        Split::Train => &dataset.train_idx,
        Split::Heldout => &dataset.heldout_idx,
    };
    if idx.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let x = dataset.x.select_cols(idx)?;
    let y: Vec<usize> = idx.iter().map(|&i| dataset.y[i]).collect();
    let trace = forward_trace(model, &x)?;
    let loss = mean_cross_entropy(trace.logits(), &y)?;

    let logits = trace.logits();
    let mut correct = 0usize;
    for (j, &label) in y.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = logits.get(0, j);
        for i in 1..logits.rows() {
            let v = logits.get(i, j);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(EvalMetrics { loss, accuracy: correct as f64 / y.len() as f64 })
}

// ------------------------------------------------------------------- rng

/// Standard normal draw via Box-Muller; consumes exactly two uniforms.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates with the given rng.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        make_dataset(6, 2, 64, 3, false).unwrap()
    }

    #[test]
    fn dataset_is_deterministic_per_seed() {
        let a = make_dataset(8, 3, 30, 5, false).unwrap();
        let b = make_dataset(8, 3, 30, 5, false).unwrap();
        assert!(a.x.bit_eq(&b.x));
        assert_eq!(a.y, b.y);
        assert_eq!(a.train_idx, b.train_idx);
        let c = make_dataset(8, 3, 30, 6, false).unwrap();
        assert!(!a.x.bit_eq(&c.x));
    }

    #[test]
    fn whitened_batch_has_orthogonal_equal_norm_columns() {
        let d_in = 16;
        let ds = make_dataset(d_in, 4, 4, 9, true).unwrap();
        let gram = ds.x.transpose().matmul(&ds.x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { d_in as f64 } else { 0.0 };
                assert!(
                    (gram.get(i, j) - expect).abs() < 1e-10,
                    "gram[{i}][{j}] = {}",
                    gram.get(i, j)
                );
            }
        }
    }

    #[test]
    fn whitened_batch_larger_than_dimension_is_rejected() {
        assert!(matches!(
            make_dataset(16, 4, 20, 1, true),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn init_model_shapes_follow_architecture() {
        let arch = ModelArch::new(vec![8, 5, 4]).unwrap();
        let m = init_model(&arch, 2).unwrap();
        let layers = layer_weights(&m).unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].1.shape(), (5, 8));
        assert_eq!(layers[1].1.shape(), (4, 5));
        assert_eq!(m.meta.arch, "mlp:8x5x4");
    }

    #[test]
    fn init_model_differs_across_seeds() {
        let arch = ModelArch::new(vec![4, 3, 2]).unwrap();
        let a = init_model(&arch, 1).unwrap();
        let b = init_model(&arch, 2).unwrap();
        assert!(!a.bit_eq(&b));
        let a2 = init_model(&arch, 1).unwrap();
        assert!(a.bit_eq(&a2));
    }

    #[test]
    fn arch_requires_hidden_layer_and_min_widths() {
        assert!(ModelArch::new(vec![4, 2]).is_err());
        assert!(ModelArch::new(vec![4, 1, 2]).is_err());
        assert!(ModelArch::new(vec![4, 3, 2]).is_ok());
    }

    #[test]
    fn zero_logit_softmax_error_signal_is_half_half() {
        // Single linear layer with zero weights: logits are zero, so the
        // softmax is uniform and E = p - onehot = [-0.5, 0.5] for class 0.
        let mut model = Checkpoint::new(CheckpointMeta::default());
        model
            .insert("layers.0.weight", Tensor::Matrix(Matrix::zeros(2, 3).unwrap()))
            .unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let (_, record) = sgd_step(&model, &x, &[0], 0.1).unwrap();
        let e = &record.layers["layers.0.weight"].error;
        assert_eq!(e.as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn gradient_is_error_times_input_transpose_bitwise() {
        let arch = ModelArch::new(vec![6, 5, 3]).unwrap();
        let model = init_model(&arch, 11).unwrap();
        let ds = tiny_dataset();
        let xb = ds.x.select_cols(&[0, 1, 2, 3]).unwrap();
        let yb: Vec<usize> = (0..4).map(|i| ds.y[i]).collect();
        let (_, record) = sgd_step(&model, &xb, &yb, 0.05).unwrap();
        for lg in record.layers.values() {
            let recomputed = lg.error.matmul(&lg.input.transpose()).unwrap();
            assert!(recomputed.bit_eq(&lg.grad));
        }
    }

    #[test]
    fn update_equals_minus_eta_grad_bitwise() {
        let arch = ModelArch::new(vec![6, 4, 2]).unwrap();
        let model = init_model(&arch, 4).unwrap();
        let ds = tiny_dataset();
        let xb = ds.x.select_cols(&[0, 1, 2]).unwrap();
        let yb: Vec<usize> = (0..3).map(|i| ds.y[i]).collect();
        let eta = 0.05;
        let (after, record) = sgd_step(&model, &xb, &yb, eta).unwrap();
        for (name, lg) in &record.layers {
            let w = model.get(name).unwrap().as_matrix().unwrap();
            let expect = w.sub(&lg.grad.scale(eta)).unwrap();
            assert!(after.get(name).unwrap().as_matrix().unwrap().bit_eq(&expect));
        }
    }

    #[test]
    fn training_snapshots_and_determinism() {
        let arch = ModelArch::new(vec![6, 8, 2]).unwrap();
        let ds = tiny_dataset();
        let cfg = TrainConfig { eta: 0.05, steps: 30, snapshot_every: 10, batch: 8, seed: 21 };
        let run1 = train(&arch, &ds, &cfg).unwrap();
        let run2 = train(&arch, &ds, &cfg).unwrap();
        assert_eq!(run1.snapshots.len(), 3);
        assert_eq!(
            run1.snapshots.iter().map(|c| c.meta.step).collect::<Vec<_>>(),
            vec![10, 20, 30]
        );
        assert_eq!(run1.step_losses.len(), 30);
        for (a, b) in run1.snapshots.iter().zip(&run2.snapshots) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn training_reduces_heldout_loss() {
        let arch = ModelArch::new(vec![6, 8, 2]).unwrap();
        let ds = tiny_dataset();
        let cfg = TrainConfig { eta: 0.05, steps: 60, snapshot_every: 10, batch: 8, seed: 1 };
        let run = train(&arch, &ds, &cfg).unwrap();
        let early = evaluate(&run.snapshots[0], &ds, Split::Heldout).unwrap();
        let late = evaluate(run.snapshots.last().unwrap(), &ds, Split::Heldout).unwrap();
        assert!(late.loss < early.loss, "late {} vs early {}", late.loss, early.loss);
    }

    #[test]
    fn uniform_logits_cost_ln_two_on_two_classes() {
        let mut model = Checkpoint::new(CheckpointMeta::default());
        model
            .insert("layers.0.weight", Tensor::Matrix(Matrix::zeros(2, 6).unwrap()))
            .unwrap();
        let ds = tiny_dataset();
        let m = evaluate(&model, &ds, Split::Heldout).unwrap();
        assert!((m.loss - std::f64::consts::LN_2).abs() < 1e-9);
        // All-zero logits tie; the argmax rule picks class 0.
        let zero_fraction = ds
            .heldout_idx
            .iter()
            .filter(|&&i| ds.y[i] == 0)
            .count() as f64
            / ds.heldout_idx.len() as f64;
        assert_eq!(m.accuracy, zero_fraction);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let arch = ModelArch::new(vec![6, 8, 2]).unwrap();
        let ds = tiny_dataset();
        let model = init_model(&arch, 5).unwrap();
        let a = evaluate(&model, &ds, Split::Heldout).unwrap();
        let b = evaluate(&model, &ds, Split::Heldout).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    }

    #[test]
    fn finite_difference_gradient_check() {
        // Central differences on a 3-layer model, away from ReLU kinks.
        let arch = ModelArch::new(vec![5, 6, 5, 3]).unwrap();
        let ds = make_dataset(5, 3, 12, 17, false).unwrap();
        let model = init_model(&arch, 23).unwrap();
        let x = ds.x.select_cols(&[0, 1, 2, 3, 4, 5]).unwrap();
        let y: Vec<usize> = (0..6).map(|i| ds.y[i]).collect();

        // Verify the batch is off-kink so the loss is differentiable here.
        let trace = forward_trace(&model, &x).unwrap();
        let min_preact = trace
            .linear
            .iter()
            .take(trace.linear.len() - 1)
            .flat_map(|m| m.as_slice().iter())
            .fold(f64::INFINITY, |acc, &v| acc.min(v.abs()));
        assert!(min_preact > 1e-3, "kink margin too small: {min_preact}");

        let (_, record) = sgd_step(&model, &x, &y, 0.05).unwrap();
        let h = 1e-5;
        for (name, lg) in &record.layers {
            let w = model.get(name).unwrap().as_matrix().unwrap().clone();
            let mut num = Matrix::zeros(w.rows(), w.cols()).unwrap();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let loss_at = |delta: f64| {
                        let mut perturbed = model.clone();
                        let mut wp = w.clone();
                        wp.set(i, j, w.get(i, j) + delta);
                        perturbed.insert(name.clone(), Tensor::Matrix(wp)).unwrap();
                        let t = forward_trace(&perturbed, &x).unwrap();
                        mean_cross_entropy(t.logits(), &y).unwrap()
                    };
                    num.set(i, j, (loss_at(h) - loss_at(-h)) / (2.0 * h));
                }
            }
            let diff = num.sub(&lg.grad).unwrap().frobenius_norm().unwrap();
            let scale = lg.grad.frobenius_norm().unwrap();
            assert!(diff <= 1e-4 * scale.max(1e-8), "layer {name}: {diff} vs scale {scale}");
        }
    }
}
