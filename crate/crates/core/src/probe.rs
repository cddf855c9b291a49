//! Activation probing: calibration batches, per-layer activations, and the
//! rotations extracted from activation deltas.
//!
//! For two models sharing one architecture, the probe computes per layer
//!
//! ```text
//! delta A = (W_cand - W_ref) * X
//! ```
//!
//! where `X` is the input that layer sees when the *reference* model runs
//! the calibration batch. The left singular factor of `delta A` is the
//! rotation used by the activation-guided merge operator. Because the bench
//! models are bias-free, `delta A` is exactly the difference of the two
//! models' pre-activations under the reference's hidden states.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{full_svd, Matrix};
use crate::toybench::{forward_trace, layer_weights, shuffle, Dataset};

/// One calibration batch: which dataset columns it holds and the assembled
/// sample block (d_in x batch_size).
#[derive(Debug, Clone)]
pub struct CalibBatch {
    pub batch_id: usize,
    pub indices: Vec<usize>,
    pub x: Matrix,
}

/// Splits the whole dataset into seeded, shuffled batches of exactly
/// `batch_size` columns. A trailing remainder is dropped; if not even one
/// full batch fits, the calibration set is too small.
pub fn partition_calibration(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<CalibBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidShape("calibration batch size must be positive".into()));
    }
    let n = dataset.len();
    if n < batch_size {
        return Err(Error::InsufficientData(format!(
            "calibration set holds {n} samples, one batch needs {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut order, &mut rng);

    let mut batches = Vec::with_capacity(n / batch_size);
    for (batch_id, chunk) in order.chunks_exact(batch_size).enumerate() {
        let indices = chunk.to_vec();
        let x = dataset.x.select_cols(&indices)?;
        batches.push(CalibBatch { batch_id, indices, x });
    }
    Ok(batches)
}

/// Pre-activations `A_l = W_l * X_l` of a model on one batch, by layer name.
pub fn collect_activations(model: &Checkpoint, batch: &CalibBatch) -> Result<Vec<(String, Matrix)>> {
    let trace = forward_trace(model, &batch.x)?;
    Ok(trace.layer_names.into_iter().zip(trace.linear).collect())
}

/// Per-layer activation deltas `(W_cand - W_ref) * X_l`, with `X_l` taken
/// from the reference model's forward pass on the batch.
pub fn activation_delta(
    candidate: &Checkpoint,
    reference: &Checkpoint,
    batch: &CalibBatch,
) -> Result<Vec<(String, Matrix)>> {
    reference.require_compatible(candidate, "activation delta")?;
    let trace = forward_trace(reference, &batch.x)?;
    let cand = layer_weights(candidate)?;
    let refw = layer_weights(reference)?;
    let mut deltas = Vec::with_capacity(cand.len());
    for (((name, wc), (_, wr)), x) in cand.into_iter().zip(refw).zip(&trace.inputs) {
        let dw = wc.sub(&wr)?;
        deltas.push((name, dw.matmul(x)?));
    }
    Ok(deltas)
}

/// Rotation extracted from one layer's activation delta.
#[derive(Debug, Clone)]
pub struct LayerRotation {
    /// Orthogonal d x d factor; identity when the delta was degenerate.
    pub u: Matrix,
    /// Singular values of the activation delta, descending.
    pub singular_values: Vec<f64>,
    /// Set when the delta was numerically zero and no direction could be
    /// trusted; the merge falls back to the plain task-vector update.
    pub degenerate: bool,
}

/// Rotations for every layer of a model pair, keyed by layer name.
#[derive(Debug, Clone)]
pub struct RotationSet {
    pub layers: BTreeMap<String, LayerRotation>,
}

/// Frobenius floor below which an activation delta carries no direction.
/// Scales with the entry count so the cutoff is per-entry.
pub fn degenerate_floor(rows: usize, cols: usize) -> f64 {
    1e-12 * ((rows * cols) as f64).sqrt()
}

/// Left singular factor of an activation delta, or the identity (flagged)
/// when the delta sits below `tol`.
pub fn rotation_from_delta_tol(delta_a: &Matrix, tol: f64) -> Result<LayerRotation> {
    let d = delta_a.rows();
    if delta_a.frobenius_norm()? < tol {
        return Ok(LayerRotation {
            u: Matrix::identity(d)?,
            singular_values: vec![0.0; d.min(delta_a.cols())],
            degenerate: true,
        });
    }
    let svd = full_svd(delta_a)?;
    Ok(LayerRotation { u: svd.u, singular_values: svd.s, degenerate: false })
}

/// [`rotation_from_delta_tol`] with the default floor for the delta's shape.
pub fn rotation_from_delta(delta_a: &Matrix) -> Result<LayerRotation> {
    rotation_from_delta_tol(delta_a, degenerate_floor(delta_a.rows(), delta_a.cols()))
}

/// Extracts rotations for all layers of a candidate/reference pair on one
/// calibration batch. Layer factorizations are independent, so they run in
/// parallel; results are keyed by name and therefore deterministic.
pub fn rotations_for(
    candidate: &Checkpoint,
    reference: &Checkpoint,
    batch: &CalibBatch,
) -> Result<RotationSet> {
    let deltas = activation_delta(candidate, reference, batch)?;
    let layers: BTreeMap<String, LayerRotation> = deltas
        .into_par_iter()
        .map(|(name, da)| rotation_from_delta(&da).map(|rot| (name, rot)))
        .collect::<Result<_>>()?;
    Ok(RotationSet { layers })
}
