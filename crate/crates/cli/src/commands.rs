//! Subcommand implementations. Each returns the process exit code: zero on
//! success, one when a verification step (oracle assertion, replay
//! comparison) ran to completion but found a discrepancy. Hard failures
//! propagate as errors and are mapped to exit codes in `main`.

use std::fs;
use std::path::{Path, PathBuf};

use mergestream::checkpoint::{self, Checkpoint};
use mergestream::merge::{
    apply_delta, merge_arm_single, merge_dare, merge_ta, merge_ties, rotated_task_vector,
    sum_deltas, LayerMergeDiag, TaskVector,
};
use mergestream::oracle::{rotation_cosine_sweep, run_all, trajectory_diagnostics};
use mergestream::probe::partition_calibration;
use mergestream::probe::rotations_for;
use mergestream::stream::{run_stream, Operator, RotationScope};
use mergestream::toybench::{
    evaluate, layer_weights, make_dataset, train, Dataset, ModelArch, Split, TrainConfig,
};
use mergestream::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{self, MANIFEST_NAME};

/// Calibration sizes the report sweep walks through.
const SWEEP_SIZES: [usize; 3] = [4, 16, 64];

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.io.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn train_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let t = &cfg.train;
    make_dataset(t.d_in, t.classes, t.n, t.seed, false)
}

fn calib_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let t = &cfg.train;
    let c = &cfg.calib;
    make_dataset(t.d_in, t.classes, c.n, c.seed, c.whitened)
}

/// Loads `[stream] inputs`, requiring at least `min` existing files. A
/// missing path is a configuration error, not an io error: the run was
/// asked to start from checkpoints that are not there.
fn load_inputs(cfg: &RunConfig, min: usize) -> Result<Vec<Checkpoint>> {
    let paths = &cfg.stream.inputs;
    if paths.len() < min {
        return Err(Error::Config(format!(
            "command needs at least {min} checkpoints in [stream] inputs, got {}",
            paths.len()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let path = Path::new(p);
        if !path.is_file() {
            return Err(Error::Config(format!("input checkpoint {p} does not exist")));
        }
        out.push(checkpoint::load(path)?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::FormatViolation(format!("jsonl row: {e}")))?;
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::FormatViolation(format!("summary row: {e}")))?;
    println!("{line}");
    Ok(())
}

fn print_verification_failure(message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": message, "kind": "verification", "exit": 1 })
    );
}

// ------------------------------------------------------------------ train

#[derive(Serialize)]
struct StepLoss {
    step: u64,
    loss: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let ds = train_dataset(cfg)?;
    let arch = ModelArch::new(cfg.arch_widths())?;
    let t = &cfg.train;
    let run = train(
        &arch,
        &ds,
        &TrainConfig {
            eta: t.eta,
            steps: t.steps,
            snapshot_every: t.snapshot_every,
            batch: t.batch,
            seed: t.seed,
        },
    )?;

    let mut artifacts = Vec::new();
    for snap in &run.snapshots {
        let name = format!("snap_{:04}.ckpt", snap.meta.step);
        checkpoint::save(snap, &out.join(&name))?;
        artifacts.push(name);
    }
    let log: Vec<StepLoss> =
        run.step_losses.iter().map(|&(step, loss)| StepLoss { step, loss }).collect();
    write_jsonl(&out.join("train_log.jsonl"), &log)?;
    artifacts.push("train_log.jsonl".into());

    manifest::write(&out, "train", cfg, &artifacts)?;
    print_json(&serde_json::json!({
        "command": "train",
        "snapshots": run.snapshots.len(),
        "final_train_loss": log.last().map(|l| l.loss),
    }))?;
    Ok(0)
}

// ------------------------------------------------------------------ merge

/// Name of the classifier head when the rotation scope excludes it.
fn head_to_skip(reference: &Checkpoint, scope: RotationScope) -> Result<Option<String>> {
    Ok(match scope {
        RotationScope::All => None,
        RotationScope::Hidden => layer_weights(reference)?.pop().map(|(name, _)| name),
    })
}

pub fn cmd_merge(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let inputs = load_inputs(cfg, 2)?;
    let reference = &inputs[0];
    let candidates = &inputs[1..];
    let s = &cfg.stream;

    let (merged, diags): (Checkpoint, Vec<LayerMergeDiag>) = match s.operator {
        Operator::Ta => (merge_ta(reference, candidates, s.lambda)?, Vec::new()),
        Operator::Ties => (merge_ties(reference, candidates, s.lambda, s.ties_topk)?, Vec::new()),
        Operator::Dare => {
            (merge_dare(reference, candidates, s.lambda, s.dare_drop, s.seed)?, Vec::new())
        }
        Operator::Arm => {
            let calib = calib_dataset(cfg)?;
            let batches = partition_calibration(&calib, s.calib_batch_size, s.seed)?;
            let batch = &batches[0];
            let head = head_to_skip(reference, s.rotation_scope)?;
            if candidates.len() == 1 {
                let mut rots = rotations_for(&candidates[0], reference, batch)?;
                if let Some(name) = &head {
                    rots.layers.remove(name);
                }
                merge_arm_single(reference, &candidates[0], &rots, s.lambda)?
            } else {
                let mut deltas: Vec<TaskVector> = Vec::with_capacity(candidates.len());
                let mut diags = Vec::new();
                for c in candidates {
                    let mut rots = rotations_for(c, reference, batch)?;
                    if let Some(name) = &head {
                        rots.layers.remove(name);
                    }
                    let (tv, d) = rotated_task_vector(c, reference, &rots)?;
                    deltas.push(tv);
                    diags.extend(d);
                }
                let total = sum_deltas(&deltas)?;
                let scale = s.lambda / candidates.len() as f64;
                (apply_delta(reference, &total, scale)?, diags)
            }
        }
    };

    checkpoint::save(&merged, &out.join("merged.ckpt"))?;
    write_jsonl(&out.join("merge_diag.jsonl"), &diags)?;
    manifest::write(&out, "merge", cfg, &["merged.ckpt".into(), "merge_diag.jsonl".into()])?;
    print_json(&serde_json::json!({
        "command": "merge",
        "operator": s.operator,
        "candidates": candidates.len(),
        "rotated_layers": diags.iter().filter(|d| !d.degenerate).count(),
    }))?;
    Ok(0)
}

// ----------------------------------------------------------------- stream

#[derive(Serialize)]
struct RotationRow<'a> {
    iter: u64,
    layer: &'a str,
    cos_before_after: f64,
    sv_top: &'a [f64],
    degenerate: bool,
}

pub fn cmd_stream(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let initials = load_inputs(cfg, 2)?;
    let eval_ds = train_dataset(cfg)?;
    let calib = calib_dataset(cfg)?;
    let sc = cfg.stream_config();

    let outcome = run_stream(&initials, &calib, &sc, |c| evaluate(c, &eval_ds, Split::Heldout))?;

    let mut artifacts = vec!["stream.jsonl".to_string(), "rotations.jsonl".to_string()];
    write_jsonl(&out.join("stream.jsonl"), &outcome.records)?;

    let rot_rows: Vec<RotationRow> = outcome
        .records
        .iter()
        .flat_map(|rec| {
            rec.merge_diags.iter().map(move |d| RotationRow {
                iter: rec.iter,
                layer: &d.layer,
                cos_before_after: d.cos_before_after,
                sv_top: &d.sv_top,
                degenerate: d.degenerate,
            })
        })
        .collect();
    write_jsonl(&out.join("rotations.jsonl"), &rot_rows)?;

    fs::create_dir_all(out.join("iterates"))?;
    for (rec, ckpt) in outcome.records.iter().zip(&outcome.iterates) {
        let name = format!("iterates/iter_{:03}.ckpt", rec.iter);
        checkpoint::save(ckpt, &out.join(&name))?;
        artifacts.push(name);
    }
    checkpoint::save(&outcome.final_checkpoint, &out.join("final.ckpt"))?;
    artifacts.push("final.ckpt".into());

    manifest::write(&out, "stream", cfg, &artifacts)?;
    let last = outcome.records.last();
    print_json(&serde_json::json!({
        "command": "stream",
        "iterations": outcome.records.len(),
        "converged": outcome.converged,
        "final_heldout_loss": last.map(|r| r.eval_loss),
        "final_heldout_accuracy": last.map(|r| r.eval_accuracy),
    }))?;
    Ok(0)
}

// ------------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalOut {
    split: String,
    loss: f64,
    accuracy: f64,
}

pub fn cmd_eval(cfg: &RunConfig, positional: Option<&Path>) -> Result<i32> {
    let resolved: PathBuf = match positional {
        Some(p) => p.to_path_buf(),
        None if !cfg.eval.checkpoint.is_empty() => PathBuf::from(&cfg.eval.checkpoint),
        None => {
            return Err(Error::Config(
                "eval needs a checkpoint: pass one as the positional argument or set [eval] checkpoint"
                    .into(),
            ))
        }
    };
    if !resolved.is_file() {
        return Err(Error::Config(format!(
            "checkpoint {} does not exist",
            resolved.display()
        )));
    }

    let out = out_dir(cfg)?;
    let model = checkpoint::load(&resolved)?;
    let ds = train_dataset(cfg)?;
    let metrics = evaluate(&model, &ds, cfg.eval_split()?)?;
    let payload = EvalOut {
        split: cfg.eval.split.clone(),
        loss: metrics.loss,
        accuracy: metrics.accuracy,
    };
    let text = serde_json::to_string_pretty(&payload)
        .map_err(|e| Error::FormatViolation(format!("metrics: {e}")))?;
    fs::write(out.join("metrics.json"), text + "\n")?;

    // Record the checkpoint actually scored so a replay needs no positional.
    let mut cfg_used = cfg.clone();
    cfg_used.eval.checkpoint = resolved.display().to_string();
    manifest::write(&out, "eval", &cfg_used, &["metrics.json".into()])?;
    print_json(&payload)?;
    Ok(0)
}

// ----------------------------------------------------------------- oracle

pub fn cmd_oracle(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let checks = run_all(cfg.stream.seed)?;
    let passed = checks.iter().all(|c| c.pass);
    let failed: Vec<&str> =
        checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();

    let report = serde_json::json!({ "passed": passed, "checks": checks });
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::FormatViolation(format!("oracle report: {e}")))?;
    fs::write(out.join("oracle_report.json"), text + "\n")?;
    manifest::write(&out, "oracle", cfg, &["oracle_report.json".into()])?;

    print_json(&serde_json::json!({
        "command": "oracle",
        "passed": passed,
        "checks": checks.len(),
        "failed": failed,
    }))?;
    if !passed {
        print_verification_failure("oracle assertions failed");
        return Ok(1);
    }
    Ok(0)
}

// ----------------------------------------------------------------- report

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + 1 + rows.iter().map(|r| r.len() + 1).sum::<usize>());
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn json_field<'v>(row: &'v serde_json::Value, key: &str, line: usize) -> Result<&'v serde_json::Value> {
    row.get(key).ok_or_else(|| {
        Error::FormatViolation(format!("stream.jsonl line {line} lacks field {key:?}"))
    })
}

pub fn cmd_report(cfg: &RunConfig) -> Result<i32> {
    let out = out_dir(cfg)?;
    let log_path = out.join("stream.jsonl");
    if !log_path.is_file() {
        return Err(Error::Config(format!(
            "{} has no stream.jsonl; run `stream` into this directory first",
            out.display()
        )));
    }

    // Loss and convergence per iteration, straight from the stream log.
    let mut loss_rows = Vec::new();
    for (i, line) in fs::read_to_string(&log_path)?.lines().enumerate() {
        let row: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::FormatViolation(format!("stream.jsonl line {}: {e}", i + 1)))?;
        loss_rows.push(format!(
            "{},{},{},{},{}",
            json_field(&row, "iter", i + 1)?,
            json_field(&row, "mode", i + 1)?.as_str().unwrap_or(""),
            json_field(&row, "cosine_prev", i + 1)?,
            json_field(&row, "eval_loss", i + 1)?,
            json_field(&row, "eval_accuracy", i + 1)?,
        ));
    }
    write_csv(
        &out.join("loss_vs_iteration.csv"),
        "iter,mode,cosine_prev,eval_loss,eval_accuracy",
        &loss_rows,
    )?;

    // Trajectory geometry needs the initial checkpoints and every iterate.
    let initials = load_inputs(cfg, 2)?;
    let iter_dir = out.join("iterates");
    let mut names: Vec<String> = Vec::new();
    if iter_dir.is_dir() {
        for entry in fs::read_dir(&iter_dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.starts_with("iter_") && name.ends_with(".ckpt") {
                names.push(name);
            }
        }
    }
    names.sort();
    let iterates = names
        .iter()
        .map(|n| checkpoint::load(&iter_dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let points = trajectory_diagnostics(&initials, &iterates)?;
    let traj_rows: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{}",
                p.iter,
                p.norm,
                fmt_opt(p.cos_to_prev),
                p.dist_to_final,
                p.hull_residual
            )
        })
        .collect();
    write_csv(
        &out.join("trajectory.csv"),
        "iter,norm,cos_to_prev,dist_to_final,hull_residual",
        &traj_rows,
    )?;

    // Rotation response across calibration sizes for the run's endpoints.
    let calib = calib_dataset(cfg)?;
    let reference = &initials[0];
    let candidate = initials.last().expect("at least two inputs");
    let sweep = rotation_cosine_sweep(candidate, reference, &calib, &SWEEP_SIZES, cfg.stream.seed)?;
    let sweep_rows: Vec<String> = sweep
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.calib_n, r.layer, r.cos_before_after, r.top_singular, r.degenerate
            )
        })
        .collect();
    write_csv(
        &out.join("cosine_sweep.csv"),
        "calib_n,layer,cos_before_after,top_singular,degenerate",
        &sweep_rows,
    )?;

    manifest::write(
        &out,
        "report",
        cfg,
        &[
            "loss_vs_iteration.csv".into(),
            "trajectory.csv".into(),
            "cosine_sweep.csv".into(),
        ],
    )?;
    print_json(&serde_json::json!({
        "command": "report",
        "tables": 3,
        "iterations": loss_rows.len(),
        "sweep_rows": sweep_rows.len(),
    }))?;
    Ok(0)
}

// ----------------------------------------------------------------- replay

pub fn cmd_replay(manifest_path: &Path) -> Result<i32> {
    let original_bytes = fs::read(manifest_path).map_err(|e| {
        Error::Config(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?;
    let recorded = manifest::load(manifest_path)?;
    let run_dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut cfg = recorded.config.clone();
    cfg.io.out_dir = run_dir.display().to_string();

    match recorded.command.as_str() {
        "train" => cmd_train(&cfg)?,
        "merge" => cmd_merge(&cfg)?,
        "stream" => cmd_stream(&cfg)?,
        "eval" => cmd_eval(&cfg, None)?,
        "oracle" => cmd_oracle(&cfg)?,
        "report" => cmd_report(&cfg)?,
        other => {
            return Err(Error::FormatViolation(format!(
                "manifest names unknown command {other:?}"
            )))
        }
    };

    let mut bad = manifest::verify(run_dir, &recorded);
    let new_bytes = fs::read(run_dir.join(MANIFEST_NAME))?;
    if new_bytes != original_bytes {
        bad.push(MANIFEST_NAME.to_string());
    }

    if !bad.is_empty() {
        print_verification_failure(&format!("replay mismatch: {}", bad.join(", ")));
        return Ok(1);
    }
    print_json(&serde_json::json!({
        "command": "replay",
        "replayed": recorded.command,
        "artifacts": recorded.artifacts.len(),
        "matched": true,
    }))?;
    Ok(0)
}
