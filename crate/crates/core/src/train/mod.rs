//! Optimisation loop, corpus handling, checkpoints and experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod experiments;
pub mod optim;

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::CheckpointMeta;
pub use config::{LrSchedule, RunConfig};
pub use corpus::{ingest, Corpus};
pub use optim::{clip_global_norm, AdamW};

use crate::error::{FmError, Result};
use crate::grad::batch_loss_and_grads;
use crate::layer::{ForwardMode, ForwardOptions};
use crate::model::{lm_loss, ModelConfig, ModelParams};
use crate::par::{self, Execution};
use crate::tensor::{Precision, Scalar};

pub const METRICS_HEADER: &str = "step\tloss\tlr\ttok_per_s\ttouched_rows";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based count of optimizer steps taken.
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub tok_per_s: Option<f64>,
    /// Memory rows written since the start of the run.
    pub touched_rows: u64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{:.6}\t{:.6e}\t", self.step, self.loss, self.lr);
        match self.tok_per_s {
            Some(v) => write!(s, "{v:.1}").expect("write to String"),
            None => s.push('-'),
        }
        write!(s, "\t{}", self.touched_rows).expect("write to String");
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f64>,
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    /// Predicted tokens consumed: steps × batch × train_ctx.
    pub tokens: u64,
    pub touched_rows: u64,
    pub test_loss: f64,
}

impl TrainOutcome {
    pub fn metrics_text(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }
}

/// Seeded streams for one run: parameters and data order draw from separate
/// streams, so changing the model shape leaves the batch sequence intact.
pub fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(1);
    (init, data)
}

/// Mean loss over `n` fixed test windows of `train_ctx + 1` tokens.
pub fn evaluate(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    corpus: &Corpus,
    n: usize,
    precision: Precision,
    mode: ForwardMode,
    exec: Execution,
) -> Result<f64> {
    let windows = corpus.test_windows(n.max(1), cfg.train_ctx + 1)?;
    match precision {
        Precision::Single => eval_windows(&params.cast::<f32>(cfg), cfg, &windows, mode, exec),
        Precision::Double => eval_windows(params, cfg, &windows, mode, exec),
    }
}

fn eval_windows<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    windows: &[Vec<u32>],
    mode: ForwardMode,
    exec: Execution,
) -> Result<f64> {
    let opts = ForwardOptions::new(mode, false);
    let losses = par::map(exec, windows, |w| lm_loss(params, cfg, w, &opts, None).map(|r| r.0));
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn batch_step(
    params: &ModelParams<f64>,
    run: &RunConfig,
    batch: &[Vec<u32>],
    exec: Execution,
) -> Result<crate::grad::BatchGrads> {
    match run.precision {
        Precision::Single => batch_loss_and_grads(&params.cast::<f32>(&run.model), &run.model, batch, run.mode, exec),
        Precision::Double => batch_loss_and_grads(params, &run.model, batch, run.mode, exec),
    }
}

fn first_bad(params: &ModelParams<f64>) -> Option<String> {
    params
        .tensors()
        .into_iter()
        .find(|(_, _, d)| d.iter().any(|v| !v.is_finite()))
        .map(|t| t.0)
}

/// Trains from a fresh initialisation. Metrics go to `log` as they are produced
/// (header first), one line per `eval_every` steps plus the final step.
pub fn train(run: &RunConfig, corpus: &Corpus, exec: Execution, log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    run.validate()?;
    let (mut init_rng, _) = run_rngs(run.seed);
    let params = ModelParams::init(&run.model, &mut init_rng)?;
    train_from(run, corpus, params, exec, log)
}

pub fn train_from(
    run: &RunConfig,
    corpus: &Corpus,
    mut params: ModelParams<f64>,
    exec: Execution,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    run.validate()?;
    params.check(&run.model)?;
    let (_, mut data_rng) = run_rngs(run.seed);
    let mut opt = AdamW::new(&run.model, run.betas, run.eps, run.weight_decay);
    let len = run.train_ctx() + 1;
    let per_step = (run.batch_size * run.train_ctx()) as u64;

    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    let mut records = Vec::new();
    let mut tokens = 0u64;
    let mut touched = 0u64;
    let mut window_loss = 0.0;
    let mut window_steps = 0usize;
    let mut window_start = Instant::now();
    let mut window_tokens = 0u64;

    for step in 0..run.total_steps {
        let batch = corpus.sample_train(&mut data_rng, run.batch_size, len)?;
        let mut out = batch_step(&params, run, &batch, exec).map_err(|e| match e {
            FmError::NonFinite { what } => FmError::Diverged { step, layer: what },
            other => other,
        })?;
        if let Some(name) = first_bad(&out.grads) {
            return Err(FmError::Diverged {
                step,
                layer: format!("gradient of {name}"),
            });
        }
        clip_global_norm(&mut out.grads, run.grad_clip);
        let lr = run.lr_at(step);
        opt.update(&mut params, &out.grads, lr);
        if let Some(name) = first_bad(&params) {
            return Err(FmError::Diverged { step, layer: name });
        }

        tokens += per_step;
        touched += out.counters.rows_written;
        window_loss += out.loss;
        window_steps += 1;
        window_tokens += per_step;
        let done = step + 1;
        if done % run.eval_every == 0 || done == run.total_steps {
            let rec = MetricsRecord {
                step: done,
                loss: window_loss / window_steps as f64,
                lr,
                tok_per_s: run
                    .record_throughput
                    .then(|| window_tokens as f64 / window_start.elapsed().as_secs_f64().max(1e-9)),
                touched_rows: touched,
            };
            log::info!("step {done} loss {:.4} lr {lr:.3e}", rec.loss);
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", rec.to_line())?;
                w.flush()?;
            }
            records.push(rec);
            window_loss = 0.0;
            window_steps = 0;
            window_tokens = 0;
            window_start = Instant::now();
        }
    }
    debug_assert_eq!(tokens, run.token_budget());
    let test_loss = evaluate(
        &params,
        &run.model,
        corpus,
        run.eval_batches,
        run.precision,
        run.mode,
        exec,
    )?;
    Ok(TrainOutcome {
        params,
        records,
        steps: run.total_steps,
        tokens,
        touched_rows: touched,
        test_loss,
    })
}
