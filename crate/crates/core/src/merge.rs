//! Merge operators over checkpoints: plain task-vector averaging, magnitude
//! trimming with sign election, random drop-and-rescale, and the
//! rotation-guided variant built on [`crate::probe`].
//!
//! Every operator is expressed through one additive kernel,
//! `base + scale * delta`, applied entrywise. Operators differ only in how
//! they prepare the delta. This keeps deliberate bit-level equivalences
//! intact: a rotation set that is degenerate on every layer prepares the
//! exact same deltas as the plain operator, so both paths produce identical
//! bytes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::probe::RotationSet;
use crate::tensor::{cosine_similarity, Matrix};

/// Entrywise difference between a candidate and a reference checkpoint,
/// keyed by tensor name.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub tensors: BTreeMap<String, Tensor>,
}

impl TaskVector {
    /// Concatenation of all entries in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.tensors.values() {
            out.extend_from_slice(t.values());
        }
        out
    }
}

fn zip_tensors(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    match (a, b) {
        (Tensor::Matrix(x), Tensor::Matrix(y)) => {
            if x.shape() != y.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            let data: Vec<f64> =
                x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| f(p, q)).collect();
            Ok(Tensor::Matrix(Matrix::from_vec(x.rows(), x.cols(), data)?))
        }
        (Tensor::Vector(x), Tensor::Vector(y)) => {
            if x.len() != y.len() {
                return Err(Error::ShapeMismatch(format!("{} vs {}", x.len(), y.len())));
            }
            Ok(Tensor::Vector(x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()))
        }
        _ => Err(Error::ShapeMismatch("matrix paired with vector".into())),
    }
}

/// `candidate - reference`, tensor by tensor.
pub fn task_vector(candidate: &Checkpoint, reference: &Checkpoint) -> Result<TaskVector> {
    reference.require_compatible(candidate, "task vector")?;
    let mut tensors = BTreeMap::new();
    for (name, rt) in reference.iter() {
        let ct = candidate.get(name).expect("compatibility checked");
        tensors.insert(name.to_string(), zip_tensors(ct, rt, |c, r| c - r)?);
    }
    Ok(TaskVector { tensors })
}

/// Entrywise sum, accumulated in slice order starting from a clone of the
/// first element. With a single delta the result is that delta, bit for bit.
pub fn sum_deltas(deltas: &[TaskVector]) -> Result<TaskVector> {
    let first = deltas.first().ok_or_else(|| Error::Empty("delta list".into()))?;
    let mut acc = first.clone();
    for d in &deltas[1..] {
        for (name, t) in &mut acc.tensors {
            let other = d
                .tensors
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("delta missing tensor {name}")))?;
            *t = zip_tensors(t, other, |a, b| a + b)?;
        }
        if d.tensors.len() != acc.tensors.len() {
            return Err(Error::ShapeMismatch("delta tensor sets differ".into()));
        }
    }
    Ok(acc)
}

/// `base + scale * delta` entrywise. A zero scale returns the base
/// unchanged, bit for bit, so a zero blend weight is a true identity.
pub fn apply_delta(base: &Checkpoint, delta: &TaskVector, scale: f64) -> Result<Checkpoint> {
    if !scale.is_finite() {
        return Err(Error::NonFinite("delta scale".into()));
    }
    if scale == 0.0 {
        return Ok(base.clone());
    }
    let mut out = Checkpoint::new(base.meta.clone());
    for (name, bt) in base.iter() {
        let dt = delta
            .tensors
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("delta missing tensor {name}")))?;
        out.insert(name.to_string(), zip_tensors(bt, dt, |w, d| w + scale * d)?)?;
    }
    Ok(out)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("blend weight must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Plain task-vector merge: `ref + (lambda / N) * sum_i (W_i - ref)`.
pub fn merge_ta(reference: &Checkpoint, candidates: &[Checkpoint], lambda: f64) -> Result<Checkpoint> {
    check_lambda(lambda)?;
    if candidates.is_empty() {
        return Err(Error::Empty("merge candidates".into()));
    }
    let deltas: Vec<TaskVector> =
        candidates.iter().map(|c| task_vector(c, reference)).collect::<Result<_>>()?;
    let total = sum_deltas(&deltas)?;
    apply_delta(reference, &total, lambda / candidates.len() as f64)
}

// ------------------------------------------------------------------- TIES

fn check_fraction(value: f64, what: &str, upper_inclusive: bool) -> Result<()> {
    let ok = value.is_finite()
        && value > 0.0
        && if upper_inclusive { value <= 1.0 } else { value < 1.0 };
    if !ok {
        let range = if upper_inclusive { "(0, 1]" } else { "(0, 1)" };
        return Err(Error::Config(format!("{what} must lie in {range}, got {value}")));
    }
    Ok(())
}

fn trim_values(values: &[f64], keep: usize) -> Vec<f64> {
    let mut ranked: Vec<usize> = (0..values.len()).collect();
    // Largest magnitude first; equal magnitudes keep the earlier index.
    ranked.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite values")
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in ranked.iter().take(keep) {
        out[i] = values[i];
    }
    out
}

/// Zeroes everything outside the top `ceil(topk * len)` magnitudes of each
/// tensor, per tensor.
pub fn ties_trim(delta: &TaskVector, topk: f64) -> Result<TaskVector> {
    check_fraction(topk, "trim fraction", true)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in &delta.tensors {
        let values = t.values();
        let keep = ((topk * values.len() as f64).ceil() as usize).min(values.len());
        let trimmed = trim_values(values, keep);
        let out = match t {
            Tensor::Matrix(m) => Tensor::Matrix(Matrix::from_vec(m.rows(), m.cols(), trimmed)?),
            Tensor::Vector(_) => Tensor::Vector(trimmed),
        };
        tensors.insert(name.clone(), out);
    }
    Ok(TaskVector { tensors })
}

/// Entrywise sign election and disjoint mean over trimmed deltas.
///
/// Per entry, the sign with the larger summed magnitude wins (a tie goes
/// positive); the result is the mean of the values that carry the winning
/// sign. Trimmed-away zeros never vote and never enter the mean.
pub fn ties_elect(trimmed: &[TaskVector]) -> Result<TaskVector> {
    let first = trimmed.first().ok_or_else(|| Error::Empty("trimmed delta list".into()))?;
    let mut tensors = BTreeMap::new();
    for (name, proto) in &first.tensors {
        let len = proto.values().len();
        let mut elected = vec![0.0; len];
        for i in 0..len {
            let mut pos = 0.0;
            let mut neg = 0.0;
            for tv in trimmed {
                let v = tv
                    .tensors
                    .get(name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("delta missing tensor {name}")))?
                    .values()[i];
                if v > 0.0 {
                    pos += v;
                } else if v < 0.0 {
                    neg += -v;
                }
            }
            let sign = if pos >= neg { 1.0 } else { -1.0 };
            let mut total = 0.0;
            let mut count = 0usize;
            for tv in trimmed {
                let v = tv.tensors[name].values()[i];
                if v * sign > 0.0 {
                    total += v;
                    count += 1;
                }
            }
            if count > 0 {
                elected[i] = total / count as f64;
            }
        }
        let out = match proto {
            Tensor::Matrix(m) => Tensor::Matrix(Matrix::from_vec(m.rows(), m.cols(), elected)?),
            Tensor::Vector(_) => Tensor::Vector(elected),
        };
        tensors.insert(name.clone(), out);
    }
    Ok(TaskVector { tensors })
}

/// Trim every delta, then elect: the combined delta a trim-elect merge adds
/// to the reference (scaled by the blend weight alone, no 1/N).
pub fn ties_prepare(deltas: &[TaskVector], topk: f64) -> Result<TaskVector> {
    let trimmed: Vec<TaskVector> =
        deltas.iter().map(|d| ties_trim(d, topk)).collect::<Result<_>>()?;
    ties_elect(&trimmed)
}

/// Trim-elect merge: `ref + lambda * elect(trim(deltas))`.
pub fn merge_ties(
    reference: &Checkpoint,
    candidates: &[Checkpoint],
    lambda: f64,
    topk: f64,
) -> Result<Checkpoint> {
    check_lambda(lambda)?;
    if candidates.is_empty() {
        return Err(Error::Empty("merge candidates".into()));
    }
    let deltas: Vec<TaskVector> =
        candidates.iter().map(|c| task_vector(c, reference)).collect::<Result<_>>()?;
    let elected = ties_prepare(&deltas, topk)?;
    apply_delta(reference, &elected, lambda)
}

// ------------------------------------------------------------------- DARE

/// Drops each entry with probability `drop` and rescales survivors by
/// `1 / (1 - drop)`, which keeps the delta unbiased in expectation. The
/// mask stream is seeded and walks tensors in name order, so one
/// (delta, seed) pair always produces the same mask.
pub fn dare_prepare(delta: &TaskVector, drop: f64, seed: u64) -> Result<TaskVector> {
    if !drop.is_finite() || !(0.0..1.0).contains(&drop) {
        return Err(Error::Config(format!("drop probability must lie in [0, 1), got {drop}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rescale = 1.0 / (1.0 - drop);
    let mut tensors = BTreeMap::new();
    for (name, t) in &delta.tensors {
        let masked: Vec<f64> = t
            .values()
            .iter()
            .map(|&v| if rng.gen::<f64>() < drop { 0.0 } else { v * rescale })
            .collect();
        let out = match t {
            Tensor::Matrix(m) => Tensor::Matrix(Matrix::from_vec(m.rows(), m.cols(), masked)?),
            Tensor::Vector(_) => Tensor::Vector(masked),
        };
        tensors.insert(name.clone(), out);
    }
    Ok(TaskVector { tensors })
}

/// Drop-and-rescale merge: `ref + (lambda / N) * sum_i mask_i(W_i - ref)`.
/// Candidate `i` draws its mask from `seed + i`.
pub fn merge_dare(
    reference: &Checkpoint,
    candidates: &[Checkpoint],
    lambda: f64,
    drop: f64,
    seed: u64,
) -> Result<Checkpoint> {
    check_lambda(lambda)?;
    if candidates.is_empty() {
        return Err(Error::Empty("merge candidates".into()));
    }
    let mut masked = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let delta = task_vector(c, reference)?;
        masked.push(dare_prepare(&delta, drop, seed.wrapping_add(i as u64))?);
    }
    let total = sum_deltas(&masked)?;
    apply_delta(reference, &total, lambda / candidates.len() as f64)
}

// -------------------------------------------------------------- rotations

/// Per-layer bookkeeping of what a rotation did to one task vector.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerMergeDiag {
    pub layer: String,
    /// Frobenius norm of the raw weight delta.
    pub frob_delta: f64,
    /// Frobenius norm after rotation; equal to `frob_delta` up to roundoff
    /// because the rotation is orthogonal.
    pub frob_rot_delta: f64,
    /// Cosine between the flattened delta before and after rotation.
    pub cos_before_after: f64,
    /// Leading singular values of the activation delta, at most eight.
    pub sv_top: Vec<f64>,
    pub degenerate: bool,
}

/// How many singular values a merge diagnostic retains per layer.
const DIAG_SV_KEEP: usize = 8;

/// Task vector with each 2-D layer delta rotated by its layer's factor:
/// `U * (W_cand - W_ref)`. Degenerate layers and 1-D tensors pass through
/// untouched, so a fully degenerate rotation set reduces this to
/// [`task_vector`] exactly.
pub fn rotated_task_vector(
    candidate: &Checkpoint,
    reference: &Checkpoint,
    rotations: &RotationSet,
) -> Result<(TaskVector, Vec<LayerMergeDiag>)> {
    let plain = task_vector(candidate, reference)?;
    let mut tensors = BTreeMap::new();
    let mut diags = Vec::new();
    for (name, t) in &plain.tensors {
        match (t, rotations.layers.get(name)) {
            (Tensor::Matrix(dw), Some(rot)) if !rot.degenerate => {
                if rot.u.rows() != dw.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "rotation for {name} is {}x{} but the delta has {} rows",
                        rot.u.rows(),
                        rot.u.cols(),
                        dw.rows()
                    )));
                }
                let rotated = rot.u.matmul(dw)?;
                let frob_delta = dw.frobenius_norm()?;
                let frob_rot_delta = rotated.frobenius_norm()?;
                let cos_before_after = if frob_delta == 0.0 {
                    1.0
                } else {
                    cosine_similarity(dw.as_slice(), rotated.as_slice())?
                };
                diags.push(LayerMergeDiag {
                    layer: name.clone(),
                    frob_delta,
                    frob_rot_delta,
                    cos_before_after,
                    sv_top: rot.singular_values.iter().copied().take(DIAG_SV_KEEP).collect(),
                    degenerate: false,
                });
                tensors.insert(name.clone(), Tensor::Matrix(rotated));
            }
            _ => {
                if let Some(rot) = rotations.layers.get(name) {
                    let frob = match t {
                        Tensor::Matrix(m) => m.frobenius_norm()?,
                        Tensor::Vector(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    };
                    diags.push(LayerMergeDiag {
                        layer: name.clone(),
                        frob_delta: frob,
                        frob_rot_delta: frob,
                        cos_before_after: 1.0,
                        sv_top: rot.singular_values.iter().copied().take(DIAG_SV_KEEP).collect(),
                        degenerate: rot.degenerate,
                    });
                }
                tensors.insert(name.clone(), t.clone());
            }
        }
    }
    Ok((TaskVector { tensors }, diags))
}

/// Rotation-guided two-model merge:
/// `ref + lambda * U (W_cand - W_ref)` per layer.
pub fn merge_arm_single(
    reference: &Checkpoint,
    candidate: &Checkpoint,
    rotations: &RotationSet,
    lambda: f64,
) -> Result<(Checkpoint, Vec<LayerMergeDiag>)> {
    check_lambda(lambda)?;
    let (delta, diags) = rotated_task_vector(candidate, reference, rotations)?;
    Ok((apply_delta(reference, &delta, lambda)?, diags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::CheckpointMeta;
    use crate::probe::{partition_calibration, rotations_for, LayerRotation};
    use crate::toybench::{init_model, make_dataset, ModelArch};

    fn scalar_ckpt(v: f64) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta::default());
        c.insert("w", Tensor::Vector(vec![v])).unwrap();
        c
    }

    fn scalar_of(c: &Checkpoint) -> f64 {
        c.get("w").unwrap().values()[0]
    }

    #[test]
    fn ta_merge_on_scalars() {
        let reference = scalar_ckpt(1.0);
        let candidates = vec![scalar_ckpt(3.0), scalar_ckpt(5.0)];
        let merged = merge_ta(&reference, &candidates, 0.7).unwrap();
        assert!((scalar_of(&merged) - 3.1).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_returns_reference_bitwise() {
        let arch = ModelArch::new(vec![4, 5, 3]).unwrap();
        let reference = init_model(&arch, 1).unwrap();
        let candidates = vec![init_model(&arch, 2).unwrap(), init_model(&arch, 3).unwrap()];
        let merged = merge_ta(&reference, &candidates, 0.0).unwrap();
        assert!(merged.bit_eq(&reference));
    }

    #[test]
    fn unit_lambda_single_candidate_returns_candidate_on_exact_values() {
        // Integer-valued tensors make w + (c - w) exact.
        let mut reference = Checkpoint::new(CheckpointMeta::default());
        reference
            .insert("w", Tensor::Matrix(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()))
            .unwrap();
        let mut candidate = Checkpoint::new(CheckpointMeta::default());
        candidate
            .insert("w", Tensor::Matrix(Matrix::from_vec(2, 2, vec![5.0, -2.0, 0.0, 7.0]).unwrap()))
            .unwrap();
        let merged = merge_ta(&reference, &[candidate.clone()], 1.0).unwrap();
        assert!(merged.bit_eq(&candidate));
    }

    #[test]
    fn lambda_outside_range_is_rejected() {
        let reference = scalar_ckpt(0.0);
        let c = vec![scalar_ckpt(1.0)];
        assert!(matches!(merge_ta(&reference, &c, 1.5), Err(Error::Config(_))));
        assert!(matches!(merge_ta(&reference, &c, -0.1), Err(Error::Config(_))));
        assert!(matches!(merge_ta(&reference, &[], 0.5), Err(Error::Empty(_))));
    }

    #[test]
    fn ties_sign_election_on_scalars() {
        // Candidates pull +2 and -1; positive mass wins, mean over the
        // agreeing side is 2.
        let reference = scalar_ckpt(0.0);
        let candidates = vec![scalar_ckpt(2.0), scalar_ckpt(-1.0)];
        let merged = merge_ties(&reference, &candidates, 1.0, 1.0).unwrap();
        assert_eq!(scalar_of(&merged), 2.0);
    }

    #[test]
    fn ties_trim_keeps_top_half_by_magnitude() {
        let tv = TaskVector {
            tensors: [(
                "w".to_string(),
                Tensor::Vector(vec![4.0, 0.1, -0.2, 3.0]),
            )]
            .into_iter()
            .collect(),
        };
        let trimmed = ties_trim(&tv, 0.5).unwrap();
        assert_eq!(trimmed.tensors["w"].values(), &[4.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn ties_trim_tie_breaks_toward_earlier_index() {
        let tv = TaskVector {
            tensors: [("w".to_string(), Tensor::Vector(vec![1.0, -1.0, 1.0]))]
                .into_iter()
                .collect(),
        };
        let trimmed = ties_trim(&tv, 0.34).unwrap();
        // ceil(0.34 * 3) = 2 entries survive; equal magnitudes keep the
        // earliest indices.
        assert_eq!(trimmed.tensors["w"].values(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn ties_zeros_do_not_vote() {
        // One candidate trimmed to zero at an entry must not drag the mean.
        let a = TaskVector {
            tensors: [("w".to_string(), Tensor::Vector(vec![0.0, 6.0]))].into_iter().collect(),
        };
        let b = TaskVector {
            tensors: [("w".to_string(), Tensor::Vector(vec![4.0, 2.0]))].into_iter().collect(),
        };
        let elected = ties_elect(&[a, b]).unwrap();
        assert_eq!(elected.tensors["w"].values(), &[4.0, 4.0]);
    }

    #[test]
    fn dare_zero_drop_is_identity() {
        let arch = ModelArch::new(vec![4, 4, 2]).unwrap();
        let reference = init_model(&arch, 5).unwrap();
        let candidate = init_model(&arch, 6).unwrap();
        let delta = task_vector(&candidate, &reference).unwrap();
        let kept = dare_prepare(&delta, 0.0, 11).unwrap();
        for (name, t) in &delta.tensors {
            assert!(t.bit_eq(&kept.tensors[name]));
        }
    }

    #[test]
    fn dare_is_seeded_and_seed_sensitive() {
        let delta = TaskVector {
            tensors: [("w".to_string(), Tensor::Vector(vec![1.0; 256]))].into_iter().collect(),
        };
        let a = dare_prepare(&delta, 0.9, 1).unwrap();
        let b = dare_prepare(&delta, 0.9, 1).unwrap();
        let c = dare_prepare(&delta, 0.9, 2).unwrap();
        assert_eq!(a.tensors["w"].values(), b.tensors["w"].values());
        assert_ne!(a.tensors["w"].values(), c.tensors["w"].values());
        // Survivors carry the 10x rescale.
        assert!(a.tensors["w"].values().iter().all(|&v| v == 0.0 || (v - 10.0).abs() < 1e-12));
    }

    #[test]
    fn dare_is_unbiased_in_expectation() {
        // Monte Carlo over a frozen seed range; the mean of the masked
        // entry must sit within 1% of the raw value.
        let delta = TaskVector {
            tensors: [("w".to_string(), Tensor::Vector(vec![1.0]))].into_iter().collect(),
        };
        let trials = 200_000u64;
        let mut total = 0.0;
        for seed in 0..trials {
            total += dare_prepare(&delta, 0.9, seed).unwrap().tensors["w"].values()[0];
        }
        let mean = total / trials as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn rotation_preserves_delta_norm() {
        let arch = ModelArch::new(vec![6, 7, 4]).unwrap();
        let reference = init_model(&arch, 1).unwrap();
        let candidate = init_model(&arch, 2).unwrap();
        let ds = make_dataset(6, 4, 32, 3, false).unwrap();
        let batch = &partition_calibration(&ds, 16, 4).unwrap()[0];
        let rots = rotations_for(&candidate, &reference, batch).unwrap();
        let (_, diags) = rotated_task_vector(&candidate, &reference, &rots).unwrap();
        assert_eq!(diags.len(), 2);
        for d in &diags {
            assert!(!d.degenerate);
            assert!(
                (d.frob_delta - d.frob_rot_delta).abs() <= 1e-10 * d.frob_delta.max(1.0),
                "{}: {} vs {}",
                d.layer,
                d.frob_delta,
                d.frob_rot_delta
            );
            assert!(d.cos_before_after.abs() <= 1.0);
        }
    }

    #[test]
    fn degenerate_rotations_reduce_to_plain_task_vector() {
        let arch = ModelArch::new(vec![5, 6, 3]).unwrap();
        let reference = init_model(&arch, 7).unwrap();
        let candidate = init_model(&arch, 8).unwrap();
        // Degenerate rotation on every layer.
        let layers = crate::toybench::layer_weights(&reference)
            .unwrap()
            .into_iter()
            .map(|(name, w)| {
                let d = w.rows();
                (
                    name,
                    LayerRotation {
                        u: Matrix::identity(d).unwrap(),
                        singular_values: vec![0.0; d],
                        degenerate: true,
                    },
                )
            })
            .collect();
        let rots = RotationSet { layers };
        let (rotated, diags) = rotated_task_vector(&candidate, &reference, &rots).unwrap();
        let plain = task_vector(&candidate, &reference).unwrap();
        for (name, t) in &plain.tensors {
            assert!(t.bit_eq(&rotated.tensors[name]));
        }
        assert!(diags.iter().all(|d| d.degenerate && d.cos_before_after == 1.0));

        // And the merged checkpoints agree bit for bit with the plain path.
        let (merged, _) = merge_arm_single(&reference, &candidate, &rots, 0.6).unwrap();
        let ta = merge_ta(&reference, &[candidate.clone()], 0.6).unwrap();
        assert!(merged.bit_eq(&ta));
    }

    #[test]
    fn arm_zero_lambda_is_identity() {
        let arch = ModelArch::new(vec![4, 5, 2]).unwrap();
        let reference = init_model(&arch, 3).unwrap();
        let candidate = init_model(&arch, 4).unwrap();
        let ds = make_dataset(4, 2, 16, 5, false).unwrap();
        let batch = &partition_calibration(&ds, 8, 6).unwrap()[0];
        let rots = rotations_for(&candidate, &reference, batch).unwrap();
        let (merged, _) = merge_arm_single(&reference, &candidate, &rots, 0.0).unwrap();
        assert!(merged.bit_eq(&reference));
    }

    #[test]
    fn vector_tensors_merge_arithmetically_under_rotation() {
        let mut reference = Checkpoint::new(CheckpointMeta::default());
        reference.insert("layers.0.weight", Tensor::Matrix(Matrix::identity(2).unwrap())).unwrap();
        reference.insert("scale", Tensor::Vector(vec![1.0, 2.0])).unwrap();
        let mut candidate = Checkpoint::new(CheckpointMeta::default());
        candidate
            .insert(
                "layers.0.weight",
                Tensor::Matrix(Matrix::from_vec(2, 2, vec![2.0, 1.0, 0.0, 1.0]).unwrap()),
            )
            .unwrap();
        candidate.insert("scale", Tensor::Vector(vec![3.0, 6.0])).unwrap();

        let rots = RotationSet {
            layers: [(
                "layers.0.weight".to_string(),
                LayerRotation {
                    u: Matrix::identity(2).unwrap(),
                    singular_values: vec![1.0, 1.0],
                    degenerate: false,
                },
            )]
            .into_iter()
            .collect(),
        };
        let (merged, _) = merge_arm_single(&reference, &candidate, &rots, 0.5).unwrap();
        // 1-D tensor: plain interpolation halfway.
        assert_eq!(merged.get("scale").unwrap().values(), &[2.0, 4.0]);
    }
}
