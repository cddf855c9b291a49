//! End-to-end flows across modules: train on the bench, persist snapshots,
//! reload them, and stream-merge with each operator.

use mergestream::checkpoint::{load, save, Checkpoint};
use mergestream::merge::task_vector;
use mergestream::oracle::{affine_hull_residual, trajectory_diagnostics};
use mergestream::stream::{run_stream, Operator, StreamConfig, WindowConvention};
use mergestream::toybench::{
    evaluate, make_dataset, train, Dataset, EvalMetrics, ModelArch, Split, TrainConfig,
};

fn bench_setup() -> (ModelArch, Dataset, Vec<Checkpoint>) {
    let arch = ModelArch::new(vec![8, 12, 3]).unwrap();
    let ds = make_dataset(8, 3, 256, 11, false).unwrap();
    let cfg = TrainConfig { eta: 0.05, steps: 20, snapshot_every: 10, batch: 16, seed: 5 };
    let run = train(&arch, &ds, &cfg).unwrap();
    assert_eq!(run.snapshots.len(), 2);
    (arch, ds, run.snapshots)
}

fn stream_cfg(operator: Operator) -> StreamConfig {
    StreamConfig {
        lambda: 0.7,
        window_n: 2,
        anchor_rounds: 3,
        max_iters: 6,
        cos_tol: 1e-4,
        calib_batch_size: 32,
        operator,
        convention: WindowConvention::Appendix,
        rotation_scope: Default::default(),
        ties_topk: 0.2,
        dare_drop: 0.9,
        seed: 13,
    }
}

#[test]
fn task_vector_flatten_is_flat_difference() {
    let (_, _, snaps) = bench_setup();
    let tv = task_vector(&snaps[1], &snaps[0]).unwrap();
    let a = snaps[1].flatten();
    let b = snaps[0].flatten();
    let direct: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    assert_eq!(tv.flatten(), direct);
}

#[test]
fn every_operator_completes_the_schedule() {
    let (_, ds, snaps) = bench_setup();
    for operator in [Operator::Ta, Operator::Ties, Operator::Dare, Operator::Arm] {
        let cfg = stream_cfg(operator);
        let out = run_stream(&snaps, &ds, &cfg, |c| evaluate(c, &ds, Split::Heldout)).unwrap();
        assert!(!out.records.is_empty());
        assert!(out.records.len() <= cfg.max_iters as usize);
        for r in &out.records {
            assert!(r.cosine_prev.is_finite());
            assert!(r.eval_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.eval_accuracy));
        }
        assert!(out.final_checkpoint.flatten().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn streaming_from_reloaded_snapshots_is_bit_identical() {
    let (_, ds, snaps) = bench_setup();
    let dir = tempfile::tempdir().unwrap();
    let mut reloaded = Vec::new();
    for (i, s) in snaps.iter().enumerate() {
        let path = dir.path().join(format!("snap_{i}.ckpt"));
        save(s, &path).unwrap();
        reloaded.push(load(&path).unwrap());
    }

    let cfg = stream_cfg(Operator::Arm);
    let eval = |c: &Checkpoint| evaluate(c, &ds, Split::Heldout);
    let from_memory = run_stream(&snaps, &ds, &cfg, eval).unwrap();
    let from_disk = run_stream(&reloaded, &ds, &cfg, eval).unwrap();
    assert!(from_memory.final_checkpoint.bit_eq(&from_disk.final_checkpoint));
    assert_eq!(from_memory.records.len(), from_disk.records.len());
    for (a, b) in from_memory.records.iter().zip(&from_disk.records) {
        assert_eq!(a.cosine_prev.to_bits(), b.cosine_prev.to_bits());
        assert_eq!(a.eval_loss.to_bits(), b.eval_loss.to_bits());
    }
}

#[test]
fn plain_stream_stays_in_hull_while_rotated_leaves() {
    let (_, ds, snaps) = bench_setup();
    let quiet = |_: &Checkpoint| Ok(EvalMetrics { loss: 0.0, accuracy: 0.0 });

    let mut cfg = stream_cfg(Operator::Ta);
    cfg.cos_tol = 1e-13;
    let ta = run_stream(&snaps, &ds, &cfg, quiet).unwrap();
    for it in &ta.iterates {
        assert!(affine_hull_residual(it, &snaps).unwrap() <= 1e-8);
    }

    cfg.operator = Operator::Arm;
    let arm = run_stream(&snaps, &ds, &cfg, quiet).unwrap();
    let max_resid = arm
        .iterates
        .iter()
        .map(|it| affine_hull_residual(it, &snaps).unwrap())
        .fold(0.0f64, f64::max);
    assert!(max_resid > 1e-6, "rotated run never left the hull: {max_resid}");
}

#[test]
fn trajectory_diagnostics_track_the_stream() {
    let (_, ds, snaps) = bench_setup();
    let mut cfg = stream_cfg(Operator::Ta);
    cfg.cos_tol = 1e-13;
    let out = run_stream(&snaps, &ds, &cfg, |c| evaluate(c, &ds, Split::Heldout)).unwrap();
    let points = trajectory_diagnostics(&snaps, &out.iterates).unwrap();
    assert_eq!(points.len(), out.iterates.len());
    assert_eq!(points.last().unwrap().dist_to_final, 0.0);
    for p in &points {
        assert!(p.norm.is_finite());
        assert!(p.hull_residual <= 1e-8);
    }
}
