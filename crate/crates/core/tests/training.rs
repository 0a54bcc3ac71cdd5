mod common;

use fm_core::layer::LayerConfig;
use fm_core::model::{loss_so_far, MixerKind, ModelConfig, SEP};
use fm_core::train::corpus::tokens;
use fm_core::train::experiments::{sweep_memory, Variant};
use fm_core::train::{ingest, train, Corpus, RunConfig};
use fm_core::{Execution, ForwardMode, ForwardOptions, Precision};

#[test]
fn ingest_orders_by_file_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.txt"), "cd").unwrap();
    std::fs::write(dir.path().join("a.txt"), "ab").unwrap();
    let once = ingest(dir.path()).unwrap();
    assert_eq!(once, vec![b'a', b'b', SEP, b'c', b'd', SEP]);
    assert_eq!(ingest(dir.path()).unwrap(), once);
}

#[test]
fn megabyte_split_is_disjoint_and_proportional() {
    let n = 1 << 20;
    let c = Corpus::new(vec![b'x'; n], 0.9).unwrap();
    let (train, test) = (c.train_range(), c.test_range());
    assert!(train.end <= test.start);
    assert_eq!(train.len() + test.len(), n);
    assert!((train.len() as f64 - 0.9 * n as f64).abs() <= 1.0);
    assert!((test.len() as f64 - 0.1 * n as f64).abs() <= 1.0);
}

fn tiny_run(ctx: usize, steps: usize) -> RunConfig {
    let model = ModelConfig::new(
        1,
        LayerConfig::dense(4, 8, 8).with_k(2),
        MixerKind::FactorizationMemory,
        ctx,
    );
    let mut run = RunConfig::new(model, 2, steps);
    run.eval_every = steps;
    run
}

#[test]
fn double_precision_trajectories_are_identical() {
    let mut run = tiny_run(16, 6);
    run.precision = Precision::Double;
    run.eval_every = 2;
    let corpus = Corpus::new(common::synthetic_text(10, 400), 0.9).unwrap();
    let a = train(&run, &corpus, Execution::Parallel, None).unwrap();
    let b = train(&run, &corpus, Execution::Sequential, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics_text(), b.metrics_text());
}

#[test]
fn fixed_k_at_full_width_equals_dense() {
    let run = tiny_run(16, 4);
    let corpus = Corpus::new(common::synthetic_text(10, 400), 0.9).unwrap();
    let t = sweep_memory(
        &run,
        &corpus,
        &[4],
        &[Variant::Dense, Variant::FixedK],
        &[1.0],
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows[0].k, t.rows[1].k);
    assert!((t.rows[0].loss - t.rows[1].loss).abs() < 1e-6);
}

#[test]
fn fm_evaluates_past_its_training_context() {
    let run = tiny_run(256, 3);
    let corpus = Corpus::new(common::synthetic_text(4, 3000), 0.5).unwrap();
    let out = train(&run, &corpus, Execution::Parallel, None).unwrap();
    let doc = tokens(&corpus.test()[..1025]);
    let opts = ForwardOptions::new(ForwardMode::Scan, false);
    let lsf = loss_so_far(&out.params, &run.model, &doc, &[256, 1024], &opts)
        .unwrap()
        .unwrap();
    assert!(lsf.loss.iter().all(|l| l.is_finite()), "{:?}", lsf.loss);
}
