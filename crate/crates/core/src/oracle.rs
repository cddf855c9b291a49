//! Closed-form verification oracles.
//!
//! Every routine here recomputes a quantity the engine produces along an
//! *independent* route: scalar recurrences iterated by brute force against
//! their fixed-point formulas, backprop gradients against central finite
//! differences, whitened update identities against the raw weight deltas,
//! and hull membership via an orthonormal basis built from scratch. None of
//! these call into [`crate::stream`] internals, so agreement between the
//! two routes is evidence, not circularity.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merge::rotated_task_vector;
use crate::probe::{rotations_for, CalibBatch};
use crate::tensor::{cosine_similarity, full_svd, Matrix};
use crate::toybench::{
    forward_trace, make_dataset, mean_cross_entropy, sgd_step, ModelArch,
};

/// Whether a failed check should fail the run or merely be flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    Assert,
    Report,
}

/// One verified quantity: what was measured, what the closed form expects,
/// and how much slack the comparison allows.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub measured: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub mode: CheckMode,
}

impl CheckRecord {
    fn assert_abs(name: &str, measured: f64, expected: f64, tolerance: f64) -> Self {
        CheckRecord {
            name: name.to_string(),
            measured,
            expected,
            tolerance,
            pass: (measured - expected).abs() <= tolerance,
            mode: CheckMode::Assert,
        }
    }

    fn report(name: &str, measured: f64) -> Self {
        CheckRecord {
            name: name.to_string(),
            measured,
            expected: f64::NAN,
            tolerance: f64::NAN,
            pass: true,
            mode: CheckMode::Report,
        }
    }
}

// ------------------------------------------------------- flat vector sums

fn vec_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn vec_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_lambda_open(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda <= 0.0 || lambda > 1.0 {
        return Err(Error::Config(format!("blend weight must lie in (0, 1], got {lambda}")));
    }
    Ok(())
}

// --------------------------------------------------- two-member recurrence

/// Fixed point of the two-member sliding window,
/// `[(1 - lambda) w0 + w1] / (2 - lambda)`.
pub fn window2_limit(w0: &[f64], w1: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda_open(lambda)?;
    if w0.len() != w1.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", w0.len(), w1.len())));
    }
    Ok(w0
        .iter()
        .zip(w1)
        .map(|(&a, &b)| ((1.0 - lambda) * a + b) / (2.0 - lambda))
        .collect())
}

/// Transient coefficient of the same recurrence: the deviation from the
/// fixed point after `t` steps is exactly `A * (lambda - 1)^t` with
/// `A = (w0 - w1) / (2 - lambda)`.
pub fn window2_transient_coeff(w0: &[f64], w1: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda_open(lambda)?;
    if w0.len() != w1.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", w0.len(), w1.len())));
    }
    Ok(w0.iter().zip(w1).map(|(&a, &b)| (a - b) / (2.0 - lambda)).collect())
}

/// Brute-force iteration of `w_t = (1 - lambda) w_{t-2} + lambda w_{t-1}`,
/// returning the `steps` new iterates in order. This is the independent
/// route the engine's window phase is checked against.
pub fn iterate_window2(w0: &[f64], w1: &[f64], lambda: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    check_lambda_open(lambda)?;
    if w0.len() != w1.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", w0.len(), w1.len())));
    }
    let mut prev2 = w0.to_vec();
    let mut prev1 = w1.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next: Vec<f64> = prev2
            .iter()
            .zip(&prev1)
            .map(|(&a, &b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        prev2 = std::mem::replace(&mut prev1, next.clone());
        let _ = prev2;
        out.push(next);
    }
    Ok(out)
}

// ------------------------------------------------------------- anchoring

/// Arithmetic mean of the anchors, the fixed point of the anchor phase.
pub fn anchor_mean(anchors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = anchors.first().ok_or_else(|| Error::Empty("anchor list".into()))?;
    let mut mean = vec![0.0; first.len()];
    for a in anchors {
        if a.len() != first.len() {
            return Err(Error::ShapeMismatch(format!("{} vs {}", a.len(), first.len())));
        }
        for (m, &v) in mean.iter_mut().zip(a) {
            *m += v;
        }
    }
    let k = anchors.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    Ok(mean)
}

/// Brute-force anchoring with a per-step blend weight:
/// `w <- w + (lambda_s / k) * sum_i (a_i - w)`. Returns every new iterate.
pub fn iterate_anchoring(
    start: &[f64],
    anchors: &[Vec<f64>],
    lambdas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if anchors.is_empty() {
        return Err(Error::Empty("anchor list".into()));
    }
    let mut w = start.to_vec();
    let mut out = Vec::with_capacity(lambdas.len());
    let k = anchors.len() as f64;
    for &lambda in lambdas {
        check_lambda_open(lambda)?;
        let mut pull = vec![0.0; w.len()];
        for a in anchors {
            if a.len() != w.len() {
                return Err(Error::ShapeMismatch(format!("{} vs {}", a.len(), w.len())));
            }
            for (p, (&av, &wv)) in pull.iter_mut().zip(a.iter().zip(&w)) {
                *p += av - wv;
            }
        }
        for (wv, p) in w.iter_mut().zip(&pull) {
            *wv += lambda / k * p;
        }
        out.push(w.clone());
    }
    Ok(out)
}

/// Residual contraction factor after a blend schedule: the deviation from
/// the anchor mean shrinks by `(1 - lambda_s)` per step, so after the whole
/// schedule it carries the product of those factors.
pub fn alpha_product(lambdas: &[f64]) -> f64 {
    lambdas.iter().map(|l| 1.0 - l).product()
}

// -------------------------------------------------------------- gradients

/// Central-difference estimate of one layer's loss gradient. This route
/// never touches backprop: it re-runs the forward pass per perturbed entry.
pub fn fd_layer_gradient(
    model: &Checkpoint,
    layer: &str,
    x: &Matrix,
    y: &[usize],
    h: f64,
) -> Result<Matrix> {
    let w = model
        .get(layer)
        .and_then(|t| t.as_matrix())
        .ok_or_else(|| Error::Empty(format!("layer {layer} not found or not 2-D")))?
        .clone();
    let mut grad = Matrix::zeros(w.rows(), w.cols())?;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let loss_at = |delta: f64| -> Result<f64> {
                let mut perturbed = model.clone();
                let mut wp = w.clone();
                wp.set(i, j, w.get(i, j) + delta);
                perturbed.insert(layer.to_string(), crate::checkpoint::Tensor::Matrix(wp))?;
                let trace = forward_trace(&perturbed, x)?;
                mean_cross_entropy(trace.logits(), y)
            };
            grad.set(i, j, (loss_at(h)? - loss_at(-h)?) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Smallest absolute hidden pre-activation of the model on a batch. Finite
/// differences are only trustworthy when this margin keeps the perturbation
/// away from the ReLU kinks.
pub fn kink_margin(model: &Checkpoint, x: &Matrix) -> Result<f64> {
    let trace = forward_trace(model, x)?;
    let hidden = trace.linear.len().saturating_sub(1);
    let mut margin = f64::INFINITY;
    for a in trace.linear.iter().take(hidden) {
        for &v in a.as_slice() {
            margin = margin.min(v.abs());
        }
    }
    Ok(margin)
}

/// Verifies the backprop identities on a seeded model and batch:
/// the stored gradient equals `E * X^T` bit for bit, the weight update
/// equals `W - eta * grad` bit for bit, and central differences agree with
/// backprop to relative 1e-4 on every layer.
pub fn verify_gradient_identity(seed: u64) -> Result<Vec<CheckRecord>> {
    let arch = ModelArch::new(vec![5, 6, 3])?;
    let ds = make_dataset(5, 3, 48, seed, false)?;
    let model = crate::toybench::init_model(&arch, seed.wrapping_add(1))?;

    // Walk the dataset in batch strides until the batch sits away from
    // every ReLU kink; finite differences need the margin.
    let batch_size = 6;
    let mut chosen = None;
    for start in (0..ds.len() - batch_size).step_by(batch_size) {
        let idx: Vec<usize> = (start..start + batch_size).collect();
        let x = ds.x.select_cols(&idx)?;
        if kink_margin(&model, &x)? > 1e-3 {
            let y: Vec<usize> = idx.iter().map(|&i| ds.y[i]).collect();
            chosen = Some((x, y));
            break;
        }
    }
    let (x, y) = chosen.ok_or_else(|| {
        Error::InsufficientData("no batch clears the kink margin for finite differences".into())
    })?;

    let (after, record) = sgd_step(&model, &x, &y, 0.05)?;
    let mut out = Vec::new();

    let mut max_form_diff = 0.0f64;
    let mut max_update_diff = 0.0f64;
    let mut max_fd_rel = 0.0f64;
    for (name, lg) in &record.layers {
        let recomputed = lg.error.matmul(&lg.input.transpose())?;
        for (a, b) in recomputed.as_slice().iter().zip(lg.grad.as_slice()) {
            if a.to_bits() != b.to_bits() {
                max_form_diff = max_form_diff.max((a - b).abs().max(f64::MIN_POSITIVE));
            }
        }

        let w = model.get(name).and_then(|t| t.as_matrix()).expect("layer exists");
        let expect = w.sub(&lg.grad.scale(0.05))?;
        let got = after.get(name).and_then(|t| t.as_matrix()).expect("layer exists");
        for (a, b) in got.as_slice().iter().zip(expect.as_slice()) {
            if a.to_bits() != b.to_bits() {
                max_update_diff = max_update_diff.max((a - b).abs().max(f64::MIN_POSITIVE));
            }
        }

        let fd = fd_layer_gradient(&model, name, &x, &y, 1e-5)?;
        let diff = fd.sub(&lg.grad)?.frobenius_norm()?;
        let scale = lg.grad.frobenius_norm()?.max(1e-12);
        max_fd_rel = max_fd_rel.max(diff / scale);
    }
    out.push(CheckRecord::assert_abs("gradient/error-times-input-bitwise", max_form_diff, 0.0, 0.0));
    out.push(CheckRecord::assert_abs("gradient/update-rule-bitwise", max_update_diff, 0.0, 0.0));
    out.push(CheckRecord::assert_abs("gradient/finite-difference-rel", max_fd_rel, 0.0, 1e-4));
    Ok(out)
}

// -------------------------------------------------------- whitened update

/// Cosines of the principal angles between the left singular subspaces of
/// `a` and `b`. Subspace ranks are cut at `rank_tol` times the top singular
/// value; the comparison uses the smaller of the two ranks.
pub fn principal_angle_cosines(a: &Matrix, b: &Matrix, rank_tol: f64) -> Result<Vec<f64>> {
    let sa = full_svd(a)?;
    let sb = full_svd(b)?;
    let rank = |s: &[f64]| -> usize {
        let top = s.first().copied().unwrap_or(0.0);
        s.iter().filter(|&&v| v > rank_tol * top).count()
    };
    let r = rank(&sa.s).min(rank(&sb.s));
    if r == 0 {
        return Err(Error::InsufficientData("both factors are numerically zero".into()));
    }
    let ua: Vec<usize> = (0..r).collect();
    let m = sa.u.select_cols(&ua)?.transpose().matmul(&sb.u.select_cols(&ua)?)?;
    let cos = full_svd(&m)?.s;
    Ok(cos.into_iter().map(|c| c.min(1.0)).collect())
}

/// Verifies the one-step whitened identity on the first layer: with input
/// satisfying `X^T X = c I` (c = d_in), one SGD step moves the layer's
/// pre-activation by exactly `-c * eta * E`, and the left subspace of that
/// activation delta coincides with the error signal's.
pub fn verify_whitened_delta(seed: u64) -> Result<Vec<CheckRecord>> {
    let d_in = 16;
    let arch = ModelArch::new(vec![d_in, 8, 4])?;
    let ds = make_dataset(d_in, 4, d_in, seed, true)?;
    let model = crate::toybench::init_model(&arch, seed.wrapping_add(1))?;
    let eta = 0.05;

    let all: Vec<usize> = (0..ds.len()).collect();
    let x = ds.x.select_cols(&all)?;
    let y = ds.y.clone();
    let (after, record) = sgd_step(&model, &x, &y, eta)?;

    let layer = "layers.0.weight";
    let before_w = model.get(layer).and_then(|t| t.as_matrix()).expect("first layer");
    let after_w = after.get(layer).and_then(|t| t.as_matrix()).expect("first layer");
    let delta_w = after_w.sub(before_w)?;
    let delta_a = delta_w.matmul(&x)?;

    let e = &record.layers[layer].error;
    let c = d_in as f64;
    let predicted = e.scale(-c * eta);

    let diff = delta_a.sub(&predicted)?.frobenius_norm()?;
    let scale = predicted.frobenius_norm()?;
    let mut out = vec![CheckRecord::assert_abs(
        "whitened/delta-activation-rel",
        diff / scale,
        0.0,
        1e-10,
    )];

    let cosines = principal_angle_cosines(&delta_a, e, 1e-8)?;
    let worst = cosines.iter().cloned().fold(f64::INFINITY, f64::min);
    out.push(CheckRecord::assert_abs("whitened/principal-angle-cos", worst, 1.0, 1e-8));
    out.push(CheckRecord::report("whitened/subspace-rank", cosines.len() as f64));
    Ok(out)
}

// ----------------------------------------------------------- hull & sweep

/// Relative distance from `point` to the affine hull of `basis`, computed
/// by projecting onto an orthonormal frame of the hull's directions. The
/// frame comes from two-pass Gram-Schmidt over `b_i - b_0`, so the check
/// shares nothing with the merge operators it audits.
pub fn affine_hull_residual(point: &Checkpoint, basis: &[Checkpoint]) -> Result<f64> {
    let first = basis.first().ok_or_else(|| Error::Empty("hull basis".into()))?;
    let origin = first.flatten();
    let p = point.flatten();
    if p.len() != origin.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", p.len(), origin.len())));
    }

    let mut frame: Vec<Vec<f64>> = Vec::new();
    for b in &basis[1..] {
        let mut dir = vec_sub(&b.flatten(), &origin);
        let original = vec_norm(&dir);
        for _pass in 0..2 {
            for q in &frame {
                let coef: f64 = dir.iter().zip(q).map(|(a, b)| a * b).sum();
                for (d, qv) in dir.iter_mut().zip(q) {
                    *d -= coef * qv;
                }
            }
        }
        let nrm = vec_norm(&dir);
        // Directions swallowed by the earlier ones add nothing to the hull.
        if nrm > 1e-12 * original.max(1.0) {
            for d in &mut dir {
                *d /= nrm;
            }
            frame.push(dir);
        }
    }

    let mut resid = vec_sub(&p, &origin);
    for q in &frame {
        let coef: f64 = resid.iter().zip(q).map(|(a, b)| a * b).sum();
        for (r, qv) in resid.iter_mut().zip(q) {
            *r -= coef * qv;
        }
    }
    Ok(vec_norm(&resid) / vec_norm(&p).max(f64::MIN_POSITIVE))
}

/// One row of the calibration-size sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub calib_n: usize,
    pub layer: String,
    /// Cosine between the raw and rotated weight delta.
    pub cos_before_after: f64,
    /// Largest singular value of the activation delta.
    pub top_singular: f64,
    pub degenerate: bool,
}

/// Sweeps the calibration batch size and records what the rotation does to
/// each layer's task vector. Batch columns are drawn from a seeded shuffle
/// of the dataset, so the sweep is reproducible.
pub fn rotation_cosine_sweep(
    candidate: &Checkpoint,
    reference: &Checkpoint,
    dataset: &crate::toybench::Dataset,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    crate::toybench::shuffle(&mut order, &mut rng);

    let mut rows = Vec::new();
    for (si, &n) in sizes.iter().enumerate() {
        if n == 0 || n > dataset.len() {
            return Err(Error::InsufficientData(format!(
                "sweep size {n} outside the dataset's {} samples",
                dataset.len()
            )));
        }
        let indices: Vec<usize> = order[..n].to_vec();
        let batch = CalibBatch { batch_id: si, indices: indices.clone(), x: dataset.x.select_cols(&indices)? };
        let rots = rotations_for(candidate, reference, &batch)?;
        let (_, diags) = rotated_task_vector(candidate, reference, &rots)?;
        for d in diags {
            let top = rots.layers[&d.layer]
                .singular_values
                .first()
                .copied()
                .unwrap_or(0.0);
            rows.push(SweepRow {
                calib_n: n,
                layer: d.layer,
                cos_before_after: d.cos_before_after,
                top_singular: top,
                degenerate: d.degenerate,
            });
        }
    }
    Ok(rows)
}

/// Per-iterate trajectory summary used by run reports.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryPoint {
    pub iter: u64,
    /// Frobenius norm of the flattened iterate.
    pub norm: f64,
    /// Cosine against the previous iterate; absent for the first.
    pub cos_to_prev: Option<f64>,
    /// Flat distance to the final iterate.
    pub dist_to_final: f64,
    /// Relative distance to the affine hull of the initial checkpoints.
    pub hull_residual: f64,
}

/// Summarizes a stream trajectory against its initial checkpoints.
pub fn trajectory_diagnostics(
    initials: &[Checkpoint],
    iterates: &[Checkpoint],
) -> Result<Vec<TrajectoryPoint>> {
    let last = iterates.last().ok_or_else(|| Error::Empty("iterate list".into()))?;
    let final_flat = last.flatten();
    let mut prev: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(iterates.len());
    for it in iterates {
        let flat = it.flatten();
        let cos_to_prev = match &prev {
            Some(p) => Some(cosine_similarity(p, &flat)?),
            None => None,
        };
        out.push(TrajectoryPoint {
            iter: it.meta.step,
            norm: vec_norm(&flat),
            cos_to_prev,
            dist_to_final: vec_norm(&vec_sub(&flat, &final_flat)),
            hull_residual: affine_hull_residual(it, initials)?,
        });
        prev = Some(flat);
    }
    Ok(out)
}

// ------------------------------------------------------------- full suite

/// Runs the standard oracle suite. Deterministic for a given seed; every
/// `Assert` record that fails marks a broken invariant.
pub fn run_all(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();

    // Two-member window: brute-force iteration against the fixed point.
    let w0 = vec![0.0, 2.0, -1.0];
    let w1 = vec![1.0, 0.0, 3.0];
    let lambda = 0.7;
    let limit = window2_limit(&w0, &w1, lambda)?;
    let coeff = window2_transient_coeff(&w0, &w1, lambda)?;
    let iterates = iterate_window2(&w0, &w1, lambda, 60)?;
    let final_diff = vec_norm(&vec_sub(iterates.last().unwrap(), &limit));
    out.push(CheckRecord::assert_abs("window2/limit-convergence", final_diff, 0.0, 1e-10));

    let mut max_transient_err = 0.0f64;
    for (t, wt) in iterates.iter().enumerate().take(20) {
        // First returned iterate is w_2, whose deviation carries power t+2.
        let power = (lambda - 1.0f64).powi(t as i32 + 2);
        for ((&w, &l), &a) in wt.iter().zip(&limit).zip(&coeff) {
            max_transient_err = max_transient_err.max(((w - l) - a * power).abs());
        }
    }
    out.push(CheckRecord::assert_abs("window2/transient-closed-form", max_transient_err, 0.0, 1e-8));

    // Anchoring: fixed-blend contraction and the telescoping 1/t schedule.
    let anchors = vec![vec![1.0, -2.0], vec![3.0, 0.0], vec![5.0, 4.0]];
    let mean = anchor_mean(&anchors)?;
    let start = vec![10.0, 10.0];
    let fixed = vec![0.7; 8];
    let path = iterate_anchoring(&start, &anchors, &fixed)?;
    let mut max_ratio_err = 0.0f64;
    let mut prev_dev = vec_norm(&vec_sub(&start, &mean));
    for w in &path {
        let dev = vec_norm(&vec_sub(w, &mean));
        max_ratio_err = max_ratio_err.max((dev - 0.3 * prev_dev).abs() / prev_dev.max(1e-30));
        prev_dev = dev;
    }
    out.push(CheckRecord::assert_abs("anchor/contraction-ratio", max_ratio_err, 0.0, 1e-10));

    let t_final = 32usize;
    let schedule: Vec<f64> = (2..=t_final).map(|t| 1.0 / t as f64).collect();
    let alpha = alpha_product(&schedule);
    out.push(CheckRecord::assert_abs(
        "anchor/adaptive-alpha-telescopes",
        alpha,
        1.0 / t_final as f64,
        1e-12,
    ));
    let adaptive = iterate_anchoring(&start, &anchors, &schedule)?;
    let mut max_tel_err = 0.0f64;
    for ((&w, &m), &s) in adaptive.last().unwrap().iter().zip(&mean).zip(&start) {
        max_tel_err = max_tel_err.max(((w - m) - (s - m) / t_final as f64).abs());
    }
    out.push(CheckRecord::assert_abs("anchor/adaptive-final-residual", max_tel_err, 0.0, 1e-12));

    // Backprop and the whitened one-step identity.
    out.extend(verify_gradient_identity(seed)?);
    out.extend(verify_whitened_delta(seed.wrapping_add(17))?);

    // Calibration sweep stays finite across batch sizes.
    let arch = ModelArch::new(vec![6, 8, 4])?;
    let reference = crate::toybench::init_model(&arch, seed.wrapping_add(2))?;
    let candidate = crate::toybench::init_model(&arch, seed.wrapping_add(3))?;
    let ds = make_dataset(6, 4, 96, seed.wrapping_add(4), false)?;
    let rows = rotation_cosine_sweep(&candidate, &reference, &ds, &[4, 16, 64], seed)?;
    let all_finite = rows
        .iter()
        .all(|r| r.cos_before_after.is_finite() && r.top_singular.is_finite());
    out.push(CheckRecord::assert_abs(
        "sweep/rows-finite",
        if all_finite { 0.0 } else { 1.0 },
        0.0,
        0.0,
    ));
    out.push(CheckRecord::report("sweep/row-count", rows.len() as f64));

    // Hull membership: the plain operator cannot leave the initial hull,
    // the rotation-guided one can.
    let initials = vec![reference.clone(), candidate.clone()];
    let base_cfg = crate::stream::StreamConfig {
        lambda: 0.7,
        window_n: 2,
        anchor_rounds: 3,
        max_iters: 6,
        cos_tol: 1e-13,
        calib_batch_size: 16,
        operator: crate::stream::Operator::Ta,
        convention: crate::stream::WindowConvention::Appendix,
        rotation_scope: Default::default(),
        ties_topk: 0.2,
        dare_drop: 0.9,
        seed,
    };
    let quiet = |_: &Checkpoint| Ok(crate::toybench::EvalMetrics { loss: 0.0, accuracy: 0.0 });
    let ta_run = crate::stream::run_stream(&initials, &ds, &base_cfg, quiet)?;
    let ta_worst = ta_run
        .iterates
        .iter()
        .map(|it| affine_hull_residual(it, &initials))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    out.push(CheckRecord::assert_abs("hull/plain-stays-inside", ta_worst, 0.0, 1e-8));

    let arm_cfg = crate::stream::StreamConfig {
        operator: crate::stream::Operator::Arm,
        ..base_cfg
    };
    let arm_run = crate::stream::run_stream(&initials, &ds, &arm_cfg, quiet)?;
    let arm_best = arm_run
        .iterates
        .iter()
        .map(|it| affine_hull_residual(it, &initials))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    out.push(CheckRecord {
        name: "hull/rotated-escapes".into(),
        measured: arm_best,
        expected: 1e-6,
        tolerance: 0.0,
        pass: arm_best > 1e-6,
        mode: CheckMode::Assert,
    });

    Ok(out)
}
