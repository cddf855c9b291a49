//! Streaming merge engine.
//!
//! The stream consumes an ordered list of initial checkpoints and runs a
//! hybrid schedule: a few *anchor* iterations that pull the current iterate
//! toward the fixed initials, then *sliding-window* iterations over the most
//! recent iterates. Each iteration applies one merge operator and the run
//! stops early once consecutive iterates become numerically parallel.
//!
//! Update rules, with `U` the rotation (identity for the plain operator):
//!
//! ```text
//! anchor:  W_t = W_{t-1} + (lambda / k) * sum_i U_i (A_i - W_{t-1})
//! window:  W_t = W_ref   + (lambda / m) * sum_i U_i (W_i - W_ref)
//! ```
//!
//! where the window reference `W_ref` is the oldest window member and `m`
//! counts either the non-reference members or the whole window, depending
//! on the configured convention. The trim-elect operator replaces the
//! averaged sum with a single elected delta scaled by `lambda` alone.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::merge::{
    apply_delta, dare_prepare, rotated_task_vector, sum_deltas, task_vector, ties_prepare,
    LayerMergeDiag, TaskVector,
};
use crate::probe::{partition_calibration, rotations_for, CalibBatch};
use crate::tensor::cosine_similarity;
use crate::toybench::{layer_weights, Dataset, EvalMetrics};

/// Which merge operator the stream applies at every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// Uniform task-vector averaging.
    Ta,
    /// Magnitude trim plus sign election.
    Ties,
    /// Random drop with rescale.
    Dare,
    /// Rotation-guided averaging driven by activation deltas.
    Arm,
}

/// Denominator convention for the window update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum WindowConvention {
    /// Average over every window member; the reference contributes a zero
    /// self-delta, so the effective pull shrinks with the window.
    #[serde(rename = "eq1")]
    PerEq1,
    /// Average over the non-reference members only. The two-member window
    /// then obeys `W_t = (1 - lambda) W_ref + lambda W_prev` exactly.
    #[serde(rename = "appendix")]
    Appendix,
}

/// Which weight matrices the rotation operator may turn.
///
/// The last matrix of a classifier maps features onto class logits; its
/// output coordinates carry fixed meaning, so mixing them degrades the
/// merge rather than aligning it. Hidden-feature layers have no such
/// pinned coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationScope {
    /// Rotate every 2-D weight tensor, the classifier head included.
    All,
    /// Rotate hidden-feature layers only; the head merges arithmetically.
    Hidden,
}

impl Default for RotationScope {
    fn default() -> Self {
        RotationScope::Hidden
    }
}

/// Phase a given iteration ran in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Anchor,
    Window,
}

/// Full parameterization of a streaming run.
#[derive(Debug, Clone)]
pub struct StreamConfig {
    /// Blend weight in (0, 1].
    pub lambda: f64,
    /// Window length for the sliding phase, at least 2.
    pub window_n: usize,
    /// Leading iterations merged against the fixed initials.
    pub anchor_rounds: u64,
    /// Hard iteration cap, at least `anchor_rounds`.
    pub max_iters: u64,
    /// Early-stop threshold: stop once cos(W_t, W_{t-1}) >= 1 - cos_tol.
    pub cos_tol: f64,
    /// Samples per calibration batch.
    pub calib_batch_size: usize,
    pub operator: Operator,
    pub convention: WindowConvention,
    /// Layer eligibility rule for the rotation operator.
    pub rotation_scope: RotationScope,
    /// Trim fraction for the trim-elect operator.
    pub ties_topk: f64,
    /// Drop probability for the drop-rescale operator.
    pub dare_drop: f64,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 || self.lambda > 1.0 {
            return Err(Error::Config(format!(
                "blend weight must lie in (0, 1], got {}",
                self.lambda
            )));
        }
        if self.window_n < 2 {
            return Err(Error::Config(format!("window needs >= 2 members, got {}", self.window_n)));
        }
        if self.max_iters == 0 || self.anchor_rounds > self.max_iters {
            return Err(Error::Config(format!(
                "iteration budget {} cannot cover {} anchor rounds",
                self.max_iters, self.anchor_rounds
            )));
        }
        if !(self.cos_tol.is_finite() && self.cos_tol > 0.0) {
            return Err(Error::Config(format!("cosine tolerance must be positive, got {}", self.cos_tol)));
        }
        if self.calib_batch_size == 0 {
            return Err(Error::Config("calibration batch size must be positive".into()));
        }
        Ok(())
    }
}

/// What one iteration did, in emit order.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iter: u64,
    pub mode: StepMode,
    /// Cosine between the flattened new and previous iterate.
    pub cosine_prev: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Per-layer, per-candidate rotation bookkeeping for this iteration.
    pub merge_diags: Vec<LayerMergeDiag>,
    /// Wall-clock cost of the merge step. Excluded from serialized records
    /// so replays of the same run emit identical bytes.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Result of a full streaming run.
#[derive(Debug)]
pub struct StreamOutcome {
    pub final_checkpoint: Checkpoint,
    pub records: Vec<IterationRecord>,
    /// Merged output of every iteration, in order.
    pub iterates: Vec<Checkpoint>,
    /// Whether the cosine test stopped the run before `max_iters`.
    pub converged: bool,
}

/// Combined delta the configured operator extracts from `candidates`
/// against `reference`, plus the denominator the caller must fold into the
/// blend scale. `iter` seeds the drop-rescale masks.
fn prepare_delta(
    reference: &Checkpoint,
    candidates: &[&Checkpoint],
    denom: usize,
    batch: &CalibBatch,
    cfg: &StreamConfig,
    iter: u64,
) -> Result<(TaskVector, f64, Vec<LayerMergeDiag>)> {
    if candidates.is_empty() {
        return Err(Error::Empty("merge candidates".into()));
    }
    let mut diags = Vec::new();
    let deltas: Vec<TaskVector> = match cfg.operator {
        Operator::Ta => candidates
            .iter()
            .map(|c| task_vector(c, reference))
            .collect::<Result<_>>()?,
        Operator::Arm => {
            let head = match cfg.rotation_scope {
                RotationScope::All => None,
                RotationScope::Hidden => {
                    layer_weights(reference)?.pop().map(|(name, _)| name)
                }
            };
            let mut out = Vec::with_capacity(candidates.len());
            for c in candidates {
                let mut rots = rotations_for(c, reference, batch)?;
                if let Some(name) = &head {
                    rots.layers.remove(name);
                }
                let (tv, d) = rotated_task_vector(c, reference, &rots)?;
                diags.extend(d);
                out.push(tv);
            }
            out
        }
        Operator::Dare => {
            let mut out = Vec::with_capacity(candidates.len());
            for (i, c) in candidates.iter().enumerate() {
                let tv = task_vector(c, reference)?;
                let mask_seed = cfg
                    .seed
                    .wrapping_add(iter.wrapping_mul(0x9E37_79B9))
                    .wrapping_add(i as u64);
                out.push(dare_prepare(&tv, cfg.dare_drop, mask_seed)?);
            }
            out
        }
        Operator::Ties => {
            let tvs: Vec<TaskVector> = candidates
                .iter()
                .map(|c| task_vector(c, reference))
                .collect::<Result<_>>()?;
            let elected = ties_prepare(&tvs, cfg.ties_topk)?;
            // Election already combines the candidates into one delta.
            return Ok((elected, cfg.lambda, diags));
        }
    };
    let total = sum_deltas(&deltas)?;
    Ok((total, cfg.lambda / denom as f64, diags))
}

/// One anchor-phase update of `current` against the fixed `anchors`.
pub fn anchor_step(
    current: &Checkpoint,
    anchors: &[Checkpoint],
    batch: &CalibBatch,
    cfg: &StreamConfig,
    iter: u64,
) -> Result<(Checkpoint, Vec<LayerMergeDiag>)> {
    let refs: Vec<&Checkpoint> = anchors.iter().collect();
    let (delta, scale, diags) = prepare_delta(current, &refs, anchors.len(), batch, cfg, iter)?;
    Ok((apply_delta(current, &delta, scale)?, diags))
}

/// One sliding-window update. The window lists iterates oldest first; the
/// oldest member is the reference the others are merged into.
pub fn window_step(
    window: &[Checkpoint],
    batch: &CalibBatch,
    cfg: &StreamConfig,
    iter: u64,
) -> Result<(Checkpoint, Vec<LayerMergeDiag>)> {
    if window.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "window holds {} iterates, need at least 2",
            window.len()
        )));
    }
    let reference = &window[0];
    let candidates: Vec<&Checkpoint> = window[1..].iter().collect();
    let denom = match cfg.convention {
        WindowConvention::Appendix => window.len() - 1,
        WindowConvention::PerEq1 => window.len(),
    };
    let (delta, scale, diags) = prepare_delta(reference, &candidates, denom, batch, cfg, iter)?;
    Ok((apply_delta(reference, &delta, scale)?, diags))
}

/// Cosine between two checkpoints' flattened tensors and whether it clears
/// the early-stop threshold.
pub fn convergence_check(prev: &Checkpoint, next: &Checkpoint, cos_tol: f64) -> Result<(f64, bool)> {
    let cos = cosine_similarity(&prev.flatten(), &next.flatten())?;
    Ok((cos, cos >= 1.0 - cos_tol))
}

/// Runs the full hybrid schedule.
///
/// Iteration `t` starts at 1. The first `anchor_rounds` iterations anchor
/// the running iterate (initialized to the last initial checkpoint) against
/// all initials; later iterations slide a window over the history formed by
/// the initials followed by every merged output. Calibration batches are
/// taken round-robin, reshuffling with a fresh seed on each pass over the
/// dataset. `evaluator` is called on every new iterate and its metrics are
/// recorded alongside the convergence cosine.
pub fn run_stream<F>(
    initials: &[Checkpoint],
    calib: &Dataset,
    cfg: &StreamConfig,
    evaluator: F,
) -> Result<StreamOutcome>
where
    F: Fn(&Checkpoint) -> Result<EvalMetrics>,
{
    cfg.validate()?;
    if initials.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "streaming needs at least 2 initial checkpoints, got {}",
            initials.len()
        )));
    }
    for (i, c) in initials.iter().enumerate().skip(1) {
        initials[0].require_compatible(c, &format!("initial checkpoint {i}"))?;
    }

    let mut epoch = 0u64;
    let mut batches = partition_calibration(calib, cfg.calib_batch_size, cfg.seed)?;
    let mut batch_cursor = 0usize;

    let mut history: Vec<Checkpoint> = initials.to_vec();
    let mut current = initials.last().expect("checked non-empty").clone();
    let mut records = Vec::new();
    let mut iterates = Vec::new();
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        if batch_cursor == batches.len() {
            epoch += 1;
            batches = partition_calibration(calib, cfg.calib_batch_size, cfg.seed.wrapping_add(epoch))?;
            batch_cursor = 0;
        }
        let batch = &batches[batch_cursor];
        batch_cursor += 1;

        let started = std::time::Instant::now();
        let mode = if iter <= cfg.anchor_rounds { StepMode::Anchor } else { StepMode::Window };
        let (mut next, diags) = match mode {
            StepMode::Anchor => anchor_step(&current, initials, batch, cfg, iter)?,
            StepMode::Window => {
                let take = cfg.window_n.min(history.len());
                let window = &history[history.len() - take..];
                window_step(window, batch, cfg, iter)?
            }
        };
        let wall_time_ms = started.elapsed().as_secs_f64() * 1e3;

        next.meta.step = iter;
        next.meta.seed = cfg.seed;
        next.meta.tag = match mode {
            StepMode::Anchor => "stream-anchor".into(),
            StepMode::Window => "stream-window".into(),
        };

        let (cosine_prev, stop) = convergence_check(&current, &next, cfg.cos_tol)?;
        let metrics = evaluator(&next)?;
        records.push(IterationRecord {
            iter,
            mode,
            cosine_prev,
            eval_loss: metrics.loss,
            eval_accuracy: metrics.accuracy,
            merge_diags: diags,
            wall_time_ms,
        });

        history.push(next.clone());
        iterates.push(next.clone());
        current = next;
        if stop {
            converged = true;
            break;
        }
    }

    Ok(StreamOutcome { final_checkpoint: current, records, iterates, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{CheckpointMeta, Tensor};
    use crate::toybench::{init_model, make_dataset, ModelArch};

    fn scalar_ckpt(v: f64) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta::default());
        c.insert("w", Tensor::Vector(vec![v])).unwrap();
        c
    }

    fn scalar_of(c: &Checkpoint) -> f64 {
        c.get("w").unwrap().values()[0]
    }

    fn base_cfg() -> StreamConfig {
        StreamConfig {
            lambda: 0.5,
            window_n: 2,
            anchor_rounds: 3,
            max_iters: 6,
            cos_tol: 1e-4,
            calib_batch_size: 8,
            operator: Operator::Ta,
            convention: WindowConvention::Appendix,
            rotation_scope: Default::default(),
            ties_topk: 0.2,
            dare_drop: 0.9,
            seed: 7,
        }
    }

    fn dummy_batch() -> CalibBatch {
        CalibBatch {
            batch_id: 0,
            indices: vec![0],
            x: crate::tensor::Matrix::identity(1).unwrap(),
        }
    }

    #[test]
    fn anchor_step_on_scalars() {
        let cfg = base_cfg();
        let anchors = vec![scalar_ckpt(0.0), scalar_ckpt(2.0)];
        let current = scalar_ckpt(4.0);
        let (next, _) = anchor_step(&current, &anchors, &dummy_batch(), &cfg, 1).unwrap();
        // 4 + (0.5/2) * ((0-4) + (2-4)) = 2.5
        assert_eq!(scalar_of(&next), 2.5);
    }

    #[test]
    fn window_step_respects_denominator_convention() {
        let mut cfg = base_cfg();
        cfg.lambda = 0.7;
        let window = vec![scalar_ckpt(0.0), scalar_ckpt(1.0)];

        cfg.convention = WindowConvention::Appendix;
        let (next, _) = window_step(&window, &dummy_batch(), &cfg, 4).unwrap();
        assert!((scalar_of(&next) - 0.7).abs() < 1e-15);

        cfg.convention = WindowConvention::PerEq1;
        let (next, _) = window_step(&window, &dummy_batch(), &cfg, 4).unwrap();
        assert!((scalar_of(&next) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn anchor_contraction_toward_anchor_mean() {
        // Distance to the anchor mean shrinks by exactly (1 - lambda) per
        // anchor iteration, up to roundoff.
        let cfg = StreamConfig { lambda: 0.7, ..base_cfg() };
        let anchors = vec![scalar_ckpt(1.0), scalar_ckpt(3.0)];
        let mean = 2.0;
        let mut current = scalar_ckpt(10.0);
        for iter in 1..=8 {
            let (next, _) = anchor_step(&current, &anchors, &dummy_batch(), &cfg, iter).unwrap();
            let before = (scalar_of(&current) - mean).abs();
            let after = (scalar_of(&next) - mean).abs();
            assert!(
                (after - 0.3 * before).abs() <= 1e-12 * before.max(1.0),
                "iter {iter}: {after} vs {}",
                0.3 * before
            );
            current = next;
        }
    }

    #[test]
    fn identical_initials_terminate_immediately() {
        let arch = ModelArch::new(vec![4, 5, 3]).unwrap();
        let model = init_model(&arch, 9).unwrap();
        let initials = vec![model.clone(), model.clone()];
        let calib = make_dataset(4, 3, 32, 2, false).unwrap();
        let cfg = base_cfg();
        let out = run_stream(&initials, &calib, &cfg, |_| {
            Ok(EvalMetrics { loss: 0.0, accuracy: 0.0 })
        })
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].cosine_prev >= 1.0 - cfg.cos_tol);
        assert!(out.final_checkpoint.tensors_bit_eq(&model));
    }

    #[test]
    fn stream_runs_full_schedule_and_is_deterministic() {
        let arch = ModelArch::new(vec![6, 8, 3]).unwrap();
        let initials = vec![init_model(&arch, 1).unwrap(), init_model(&arch, 2).unwrap()];
        let calib = make_dataset(6, 3, 64, 3, false).unwrap();
        let mut cfg = base_cfg();
        cfg.operator = Operator::Arm;
        cfg.cos_tol = 1e-12;
        cfg.calib_batch_size = 16;

        let run = |cfg: &StreamConfig| {
            run_stream(&initials, &calib, cfg, |_| {
                Ok(EvalMetrics { loss: 0.0, accuracy: 0.0 })
            })
            .unwrap()
        };
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a.records.len(), b.records.len());
        assert!(a.records.len() <= cfg.max_iters as usize);
        assert!(a.final_checkpoint.tensors_bit_eq(&b.final_checkpoint));
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.cosine_prev.to_bits(), rb.cosine_prev.to_bits());
            assert_eq!(ra.iter, rb.iter);
        }
        // First three iterations anchor, the rest slide the window.
        for r in &a.records {
            let expect = if r.iter <= 3 { StepMode::Anchor } else { StepMode::Window };
            assert_eq!(r.mode, expect);
        }
    }

    #[test]
    fn window_phase_follows_two_member_recurrence() {
        // No anchor rounds, window of two, plain operator: the engine must
        // reproduce W_t = (1 - lambda) W_{t-2} + lambda W_{t-1}.
        let initials = vec![scalar_ckpt(0.0), scalar_ckpt(1.0)];
        let calib = make_dataset(1, 2, 8, 4, false).unwrap();
        let cfg = StreamConfig {
            lambda: 0.7,
            anchor_rounds: 0,
            max_iters: 5,
            cos_tol: 1e-15,
            calib_batch_size: 2,
            ..base_cfg()
        };
        let out = run_stream(&initials, &calib, &cfg, |_| {
            Ok(EvalMetrics { loss: 0.0, accuracy: 0.0 })
        })
        .unwrap();

        let mut w = vec![0.0, 1.0];
        for it in &out.iterates {
            let t = w.len();
            let expect = (1.0 - 0.7) * w[t - 2] + 0.7 * w[t - 1];
            assert!((scalar_of(it) - expect).abs() < 1e-15, "{} vs {expect}", scalar_of(it));
            w.push(scalar_of(it));
        }
    }

    #[test]
    fn too_few_initials_are_rejected() {
        let calib = make_dataset(1, 2, 8, 4, false).unwrap();
        let cfg = base_cfg();
        let out = run_stream(&[scalar_ckpt(1.0)], &calib, &cfg, |_| {
            Ok(EvalMetrics { loss: 0.0, accuracy: 0.0 })
        });
        assert!(matches!(out, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn config_validation_rejects_bad_knobs() {
        let mut cfg = base_cfg();
        cfg.lambda = 0.0;
        assert!(cfg.validate().is_err());
        cfg = base_cfg();
        cfg.window_n = 1;
        assert!(cfg.validate().is_err());
        cfg = base_cfg();
        cfg.anchor_rounds = 9;
        assert!(cfg.validate().is_err());
        cfg = base_cfg();
        cfg.cos_tol = 0.0;
        assert!(cfg.validate().is_err());
        assert!(base_cfg().validate().is_ok());
    }

    #[test]
    fn record_serialization_omits_wall_time() {
        let rec = IterationRecord {
            iter: 2,
            mode: StepMode::Window,
            cosine_prev: 0.5,
            eval_loss: 1.0,
            eval_accuracy: 0.25,
            merge_diags: vec![],
            wall_time_ms: 123.0,
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"mode\":\"window\""));
        assert!(!json.contains("wall_time"));
    }
}
