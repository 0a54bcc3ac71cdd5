//! Memory-size sweeps and long-context (loss-so-far) evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};
use crate::layer::{ForwardMode, ForwardOptions};
use crate::model::{loss_so_far, MixerKind, ModelConfig, ModelParams};
use crate::par::{self, Execution};
use crate::tensor::{Precision, Scalar};

use super::{train, Corpus, RunConfig};

pub const FIXED_K: usize = 4;
pub const TAU_GRID: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    /// `k = min(4, m)` whatever `m` is.
    FixedK,
    /// A quarter of the rows, at least one.
    ProportionalK,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dense, Variant::FixedK, Variant::ProportionalK];

    pub fn k(self, m: usize) -> usize {
        match self {
            Variant::Dense => m,
            Variant::FixedK => FIXED_K.min(m),
            Variant::ProportionalK => (m / 4).max(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::FixedK => "fixed_k",
            Variant::ProportionalK => "proportional_k",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FmError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub variant: Variant,
    pub k: usize,
    pub tau: f64,
    /// Final test loss.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const HEADER: &'static str = "m\tvariant\tk\ttau\tloss";

    /// Lowest-loss τ for every `(m, variant)`, ties to the larger τ.
    pub fn best(&self) -> Vec<SweepRow> {
        let mut best: BTreeMap<(usize, Variant), SweepRow> = BTreeMap::new();
        for r in &self.rows {
            best.entry((r.m, r.variant))
                .and_modify(|b| {
                    if r.loss < b.loss {
                        *b = *r;
                    }
                })
                .or_insert(*r);
        }
        best.into_values().collect()
    }

    pub fn to_tsv(&self) -> String {
        rows_tsv(Self::HEADER, &self.rows)
    }

    pub fn best_tsv(&self) -> String {
        rows_tsv(Self::HEADER, &self.best())
    }
}

fn rows_tsv(header: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{}\t{:.6}", r.m, r.variant, r.k, r.tau, r.loss).expect("write to String");
    }
    s
}

/// The run configs of a sweep, in table order. Every run keeps the base seed,
/// so all of them see the same batches in the same order.
pub fn sweep_runs(
    base: &RunConfig,
    ms: &[usize],
    variants: &[Variant],
    taus: &[f64],
) -> Result<Vec<(SweepRow, RunConfig)>> {
    if base.model.mixer != MixerKind::FactorizationMemory {
        return Err(FmError::InvalidArgument("memory sweeps need the fm mixer".into()));
    }
    if ms.is_empty() || variants.is_empty() || taus.is_empty() {
        return Err(FmError::InvalidArgument("sweep grid has an empty axis".into()));
    }
    let mut out = Vec::new();
    for &m in ms {
        for &variant in variants {
            for &tau in taus {
                let mut run = base.clone();
                run.model.layer.m = m;
                run.model.layer.k = variant.k(m);
                run.model.layer.tau = tau;
                run.validate()?;
                let row = SweepRow {
                    m,
                    variant,
                    k: run.model.layer.k,
                    tau,
                    loss: f64::NAN,
                };
                out.push((row, run));
            }
        }
    }
    Ok(out)
}

/// Trains every `(m, variant, τ)` combination and records its test loss.
/// Runs fan out under `exec`; each one trains single-threaded.
pub fn sweep_memory(
    base: &RunConfig,
    corpus: &Corpus,
    ms: &[usize],
    variants: &[Variant],
    taus: &[f64],
    exec: Execution,
) -> Result<SweepTable> {
    let runs = sweep_runs(base, ms, variants, taus)?;
    let rows = par::map(exec, &runs, |(row, run)| -> Result<SweepRow> {
        let out = train(run, corpus, Execution::Sequential, None)?;
        log::info!(
            "sweep m={} {} tau={} loss {:.4}",
            row.m,
            row.variant,
            row.tau,
            out.test_loss
        );
        Ok(SweepRow {
            loss: out.test_loss,
            ..*row
        })
    });
    Ok(SweepTable {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtrapolationRow {
    pub cutoff: usize,
    pub model: String,
    pub loss: f64,
    /// Documents long enough to contribute.
    pub docs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExtrapolationTable {
    pub rows: Vec<ExtrapolationRow>,
}

impl ExtrapolationTable {
    pub const HEADER: &'static str = "cutoff\tmodel\tloss\tdocs";

    pub fn loss(&self, model: &str, cutoff: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.cutoff == cutoff)
            .map(|r| r.loss)
    }

    /// `L(to) - L(from)` for one model.
    pub fn delta(&self, model: &str, from: usize, to: usize) -> Option<f64> {
        Some(self.loss(model, to)? - self.loss(model, from)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{:.6}\t{}", r.cutoff, r.model, r.loss, r.docs).expect("write to String");
        }
        s
    }
}

/// A named trained model for evaluation.
#[derive(Debug, Clone)]
pub struct NamedModel {
    pub name: String,
    pub cfg: ModelConfig,
    pub params: ModelParams<f64>,
}

/// Long test documents of at least `min_len` tokens. When the test split has
/// no document that long, evenly spaced windows of the split stand in.
pub fn long_documents(corpus: &Corpus, min_len: usize, max_docs: usize) -> Result<Vec<Vec<u32>>> {
    let mut docs: Vec<Vec<u32>> = corpus
        .test_documents()
        .into_iter()
        .filter(|d| d.len() >= min_len)
        .take(max_docs)
        .collect();
    if docs.is_empty() {
        log::warn!("no test document has {min_len} tokens; using windows of the test split");
        docs = corpus.test_windows(max_docs, min_len)?;
    }
    Ok(docs)
}

fn mean_loss_so_far<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    docs: &[Vec<u32>],
    cutoffs: &[usize],
    opts: &ForwardOptions,
    exec: Execution,
) -> Result<(Vec<f64>, usize)> {
    let per_doc = par::map(exec, docs, |d| loss_so_far(params, cfg, d, cutoffs, opts));
    let mut sums = vec![0.0; cutoffs.len()];
    let mut n = 0;
    for r in per_doc {
        if let Some(l) = r? {
            for (s, v) in sums.iter_mut().zip(&l.loss) {
                *s += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        let max = cutoffs.iter().max().copied().unwrap_or(0);
        return Err(FmError::InvalidArgument(format!(
            "no document is longer than the largest cutoff {max}"
        )));
    }
    Ok((sums.into_iter().map(|s| s / n as f64).collect(), n))
}

/// Loss-so-far per cutoff per model, averaged over `docs`.
pub fn eval_extrapolation(
    models: &[NamedModel],
    docs: &[Vec<u32>],
    cutoffs: &[usize],
    precision: Precision,
    mode: ForwardMode,
    exec: Execution,
) -> Result<ExtrapolationTable> {
    let opts = ForwardOptions::new(mode, false);
    let mut rows = Vec::new();
    for m in models {
        let (loss, n) = match precision {
            Precision::Single => mean_loss_so_far(&m.params.cast::<f32>(&m.cfg), &m.cfg, docs, cutoffs, &opts, exec)?,
            Precision::Double => mean_loss_so_far(&m.params, &m.cfg, docs, cutoffs, &opts, exec)?,
        };
        for (&cutoff, loss) in cutoffs.iter().zip(loss) {
            rows.push(ExtrapolationRow {
                cutoff,
                model: m.name.clone(),
                loss,
                docs: n,
            });
        }
    }
    Ok(ExtrapolationTable { rows })
}

/// The FM-versus-attention comparison for one seed.
#[derive(Debug, Clone)]
pub struct ExtrapolationSeed {
    pub seed: u64,
    pub table: ExtrapolationTable,
    /// `L(4·ctx) - L(ctx)`.
    pub fm_delta4: f64,
    pub attention_delta4: f64,
    /// `L(8·ctx) - L(ctx)`.
    pub attention_delta8: f64,
}

impl ExtrapolationSeed {
    pub fn fm_extrapolates_better(&self) -> bool {
        self.fm_delta4 <= self.attention_delta4
    }
}

/// Trains an FM model and an attention model from the same run settings at
/// each seed, then evaluates loss-so-far at 1, 2, 4 and 8 times the training
/// context on the same long documents.
pub fn extrapolation_study(
    fm_run: &RunConfig,
    attention_run: &RunConfig,
    corpus: &Corpus,
    seeds: &[u64],
    n_docs: usize,
    exec: Execution,
) -> Result<Vec<ExtrapolationSeed>> {
    let ctx = fm_run.train_ctx();
    if attention_run.train_ctx() != ctx
        || attention_run.total_steps != fm_run.total_steps
        || attention_run.batch_size != fm_run.batch_size
    {
        return Err(FmError::InvalidArgument(
            "both models must train at the same context and budget".into(),
        ));
    }
    if attention_run.model.max_positions() < 8 * ctx {
        return Err(FmError::InvalidArgument(format!(
            "attention position table has {} rows, evaluation needs {}",
            attention_run.model.max_positions(),
            8 * ctx
        )));
    }
    let cutoffs = [ctx, 2 * ctx, 4 * ctx, 8 * ctx];
    let docs = long_documents(corpus, 8 * ctx + 1, n_docs)?;
    let mut out = Vec::new();
    for &seed in seeds {
        let mut models = Vec::new();
        for (name, base) in [("fm", fm_run), ("attention", attention_run)] {
            let mut run = base.clone();
            run.seed = seed;
            let trained = train(&run, corpus, exec, None)?;
            models.push(NamedModel {
                name: name.to_string(),
                cfg: run.model,
                params: trained.params,
            });
        }
        let table = eval_extrapolation(&models, &docs, &cutoffs, fm_run.precision, fm_run.mode, exec)?;
        let d = |m: &str, to| table.delta(m, ctx, to).expect("cutoff evaluated");
        out.push(ExtrapolationSeed {
            seed,
            fm_delta4: d("fm", 4 * ctx),
            attention_delta4: d("attention", 4 * ctx),
            attention_delta8: d("attention", 8 * ctx),
            table,
        });
    }
    Ok(out)
}
