use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fm_core::bench::{bench_generation, standard_variants, BenchOptions};
use fm_core::flops::flops_per_token;
use fm_core::grad::{gradcheck_model, GradCheckPreset};
use fm_core::model::{generate, Decoding, MixerKind, ModelParams};
use fm_core::par::{self, Execution};
use fm_core::report::{emit_plots, PlotKind};
use fm_core::train::checkpoint::{self, CheckpointMeta};
use fm_core::train::experiments::{eval_extrapolation, long_documents, sweep_memory, NamedModel, Variant, TAU_GRID};
use fm_core::train::{evaluate, ingest, train, Corpus, LrSchedule, RunConfig};
use fm_core::{FmError, ForwardMode, LayerConfig, Precision};

mod manifest;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "fm", version, about = "Factorization Memory language-model harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (TOML). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// single or double
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// sequential or scan
    #[arg(long, global = true)]
    mode: Option<ForwardMode>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Concatenate a file or a directory tree into `corpus.bin`.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
    },
    /// Train a model; writes metrics.tsv and checkpoint.fmck.
    Train(TrainArgs),
    /// Test loss of one or more checkpoints.
    Eval(EvalArgs),
    /// Loss-so-far table over long test documents.
    LossSoFar(LossSoFarArgs),
    /// Memory-size sweep over m, variant and temperature.
    Sweep(SweepArgs),
    /// Token-by-token generation benchmark.
    Bench(BenchArgs),
    /// Analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value = "fm")]
        mixer: MixerKind,
    },
    /// Per-token FLOPS of one layer.
    Flops {
        #[arg(long)]
        d_model: usize,
        #[arg(long)]
        d_memory: usize,
        #[arg(long)]
        m: usize,
        /// Active rows; defaults to m.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Sample text from a checkpoint.
    Generate(GenerateArgs),
    /// Plot-ready data files from result tables.
    Plots {
        #[arg(long)]
        loss_so_far: Option<PathBuf>,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        generation: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// File or directory to ingest, or a `.bin` stream from `fm ingest`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test windows to average over; defaults to the run's eval_batches.
    #[arg(long)]
    windows: Option<usize>,
}

#[derive(Args)]
struct LossSoFarArgs {
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to 1, 2, 4 and 8 times the first model's training context.
    #[arg(long, value_delimiter = ',')]
    cutoffs: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    docs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
    ms: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values = ["dense", "fixed_k", "proportional_k"])]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = TAU_GRID.to_vec())]
    taus: Vec<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    m: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    prompt_len: usize,
    #[arg(long, default_value_t = 4096)]
    gen_len: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    tokens: usize,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f64>,
}

/// A check that ran and failed on the numbers.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| {
        e.downcast_ref::<FmError>().is_some_and(FmError::is_numeric) || e.downcast_ref::<CheckFailed>().is_some()
    });
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Caps the worker pool from `FM_THREADS`, or at `default` when unset.
fn threads(default: Option<usize>) -> Result<()> {
    let n = match std::env::var("FM_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| anyhow!("FM_THREADS must be a positive integer, got {v:?}"))?,
        ),
        Err(_) => default,
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("FM_THREADS must be at least 1");
        }
        par::init_threads(n);
    }
    Ok(())
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

fn load_run(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
    let mut run = RunConfig::load(path)?;
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if let Some(p) = common.precision {
        run.precision = p;
    }
    if let Some(m) = common.mode {
        run.mode = m;
    }
    Ok(run)
}

/// `.bin` files are pre-ingested streams; anything else is ingested now.
fn load_corpus(path: &Path, train_fraction: f64) -> Result<Corpus> {
    let bytes = if path.is_file() && path.extension().is_some_and(|e| e == "bin") {
        std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?
    } else {
        ingest(path)?
    };
    Ok(Corpus::new(bytes, train_fraction)?)
}

fn data_path(flag: &Option<PathBuf>, run: Option<&RunConfig>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| run.and_then(|r| r.data.clone()))
        .ok_or_else(|| anyhow!("no corpus: pass --data or set `data` in the config"))
}

fn model_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "checkpoint" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<(CheckpointMeta, NamedModel)>> {
    paths
        .iter()
        .map(|p| {
            let (meta, params) = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let model = NamedModel {
                name: model_name(p),
                cfg: meta.run.model,
                params,
            };
            Ok((meta, model))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    let out = common.out.clone();
    match cli.command {
        Cmd::Ingest { input, train_fraction } => {
            let bytes = ingest(&input)?;
            let corpus = Corpus::new(bytes, train_fraction)?;
            prepare_out(&out)?;
            std::fs::write(out.join("corpus.bin"), corpus.bytes())?;
            let mut m = Manifest::new("ingest");
            m.set("input", input.display().to_string());
            m.set("bytes", corpus.len() as i64);
            m.set("train_bytes", corpus.train().len() as i64);
            m.set("test_bytes", corpus.test().len() as i64);
            m.write(&out)?;
            println!(
                "{} bytes (train {}, test {}) -> {}",
                corpus.len(),
                corpus.train().len(),
                corpus.test().len(),
                out.join("corpus.bin").display()
            );
        }
        Cmd::Train(a) => {
            threads(None)?;
            let mut run = load_run(&common)?;
            if let Some(v) = a.steps {
                run.total_steps = v;
            }
            if let Some(v) = a.lr {
                run.lr = v;
            }
            if let Some(v) = a.lr_schedule {
                run.lr_schedule = v;
            }
            if let Some(v) = a.warmup_steps {
                run.warmup_steps = Some(v);
            }
            if let Some(v) = a.weight_decay {
                run.weight_decay = v;
            }
            if let Some(v) = a.batch_size {
                run.batch_size = v;
            }
            if let Some(v) = a.eval_every {
                run.eval_every = v;
            }
            run.data = Some(data_path(&a.data, Some(&run))?);
            run.validate()?;
            let corpus = load_corpus(run.data.as_deref().expect("set above"), run.train_fraction)?;
            let text = run.to_toml()?;
            prepare_out(&out)?;
            std::fs::write(out.join("run.toml"), &text)?;
            let mut manifest = Manifest::new("train");
            manifest.seed(run.seed);
            manifest.config(&text);

            let mut log = BufWriter::new(File::create(out.join("metrics.tsv"))?);
            let result = train(&run, &corpus, Execution::Parallel, Some(&mut log));
            drop(log);
            let outcome = result?;
            let meta = CheckpointMeta {
                step: outcome.steps,
                run: run.clone(),
            };
            checkpoint::save(&out.join("checkpoint.fmck"), &meta, &outcome.params)?;
            let summary = format!(
                "steps = {}\ntokens = {}\ntouched_rows = {}\nparams = {}\ntest_loss = {}\n",
                outcome.steps,
                outcome.tokens,
                outcome.touched_rows,
                outcome.params.num_params(),
                outcome.test_loss
            );
            std::fs::write(out.join("summary.toml"), &summary)?;
            manifest.set("test_loss", outcome.test_loss);
            manifest.write(&out)?;
            print!("{summary}");
        }
        Cmd::Eval(a) => {
            threads(None)?;
            let models = load_checkpoints(&a.checkpoint)?;
            let first = &models[0].0.run;
            let corpus = load_corpus(&data_path(&a.data, Some(first))?, first.train_fraction)?;
            let mut table = String::from("model\ttest_loss\n");
            for (meta, m) in &models {
                let n = a.windows.unwrap_or(meta.run.eval_batches);
                let precision = common.precision.unwrap_or(meta.run.precision);
                let mode = common.mode.unwrap_or(meta.run.mode);
                let loss = evaluate(&m.params, &m.cfg, &corpus, n, precision, mode, Execution::Parallel)?;
                writeln!(table, "{}\t{loss:.6}", m.name)?;
            }
            prepare_out(&out)?;
            std::fs::write(out.join("eval.tsv"), &table)?;
            Manifest::new("eval").write(&out)?;
            print!("{table}");
        }
        Cmd::LossSoFar(a) => {
            threads(None)?;
            let models = load_checkpoints(&a.checkpoint)?;
            let first = &models[0].0.run;
            let corpus = load_corpus(&data_path(&a.data, Some(first))?, first.train_fraction)?;
            let ctx = first.train_ctx();
            let cutoffs = if a.cutoffs.is_empty() {
                vec![ctx, 2 * ctx, 4 * ctx, 8 * ctx]
            } else {
                a.cutoffs.clone()
            };
            let max = cutoffs.iter().copied().max().unwrap_or(0);
            let docs = long_documents(&corpus, max + 1, a.docs)?;
            let precision = common.precision.unwrap_or(first.precision);
            let mode = common.mode.unwrap_or(first.mode);
            let named: Vec<NamedModel> = models.into_iter().map(|m| m.1).collect();
            let table = eval_extrapolation(&named, &docs, &cutoffs, precision, mode, Execution::Parallel)?;
            prepare_out(&out)?;
            std::fs::write(out.join("loss_so_far.tsv"), table.to_tsv())?;
            Manifest::new("loss-so-far").write(&out)?;
            print!("{}", table.to_tsv());
        }
        Cmd::Sweep(a) => {
            threads(None)?;
            let run = load_run(&common)?;
            let corpus = load_corpus(&data_path(&a.data, Some(&run))?, run.train_fraction)?;
            let text = run.to_toml()?;
            prepare_out(&out)?;
            let mut manifest = Manifest::new("sweep");
            manifest.seed(run.seed);
            manifest.config(&text);
            let table = sweep_memory(&run, &corpus, &a.ms, &a.variants, &a.taus, Execution::Parallel)?;
            std::fs::write(out.join("sweep.tsv"), table.to_tsv())?;
            std::fs::write(out.join("sweep_best.tsv"), table.best_tsv())?;
            manifest.write(&out)?;
            print!("{}", table.best_tsv());
        }
        Cmd::Bench(a) => {
            threads(Some(1))?;
            let opts = BenchOptions {
                prompt_len: a.prompt_len,
                gen_len: a.gen_len,
                repeats: a.repeats,
                probes: vec![a.prompt_len, a.prompt_len + a.gen_len - 1],
                ..BenchOptions::default()
            };
            let seed = common.seed.unwrap_or(0);
            let variants = standard_variants(a.d_model, a.m, a.layers, a.prompt_len + a.gen_len, seed)?;
            let report = bench_generation(&variants, &opts)?;
            prepare_out(&out)?;
            std::fs::write(out.join("bench.tsv"), report.to_tsv())?;
            std::fs::write(out.join("bench_profile.tsv"), report.profile_tsv())?;
            std::fs::write(out.join("bench.toml"), report.to_toml()?)?;
            let mut m = Manifest::new("bench");
            m.seed(seed);
            m.write(&out)?;
            print!("{}", report.to_tsv());
            let (from, to) = (opts.probes[0], opts.probes[1]);
            for v in &report.variants {
                if let Some(r) = v.latency_ratio(from, to) {
                    println!("{}: latency at {to} / at {from} = {r:.3}", v.variant);
                }
            }
        }
        Cmd::Gradcheck { preset, mixer } => {
            if preset != "tiny" {
                bail!("unknown preset {preset:?} (available: tiny)");
            }
            let seed = common.seed.unwrap_or(1);
            let report = gradcheck_model(&GradCheckPreset::tiny(mixer), seed)?;
            prepare_out(&out)?;
            std::fs::write(out.join("gradcheck.toml"), toml::to_string(&report)?)?;
            let mut m = Manifest::new("gradcheck");
            m.seed(seed);
            m.write(&out)?;
            for t in &report.tensors {
                println!("{:<24} {:>4} coords  max rel {:.3e}", t.name, t.checked, t.max_rel);
            }
            let max = report.max_rel();
            println!("max rel err {max:.3e}");
            if report.passes(1e-6) {
                println!("PASS");
            } else {
                println!("FAIL");
                return Err(CheckFailed(format!("max relative error {max:.3e} is not below 1e-6")).into());
            }
        }
        Cmd::Flops {
            d_model,
            d_memory,
            m,
            k,
        } => {
            let cfg = LayerConfig::dense(m, d_model, d_memory).with_k(k.unwrap_or(m));
            cfg.validate()?;
            let f = flops_per_token(&cfg);
            prepare_out(&out)?;
            std::fs::write(out.join("flops.toml"), toml::to_string(&f)?)?;
            Manifest::new("flops").write(&out)?;
            for (name, v) in f.parts() {
                println!("{name:<12} {v}");
            }
            println!("total {}", f.total);
            println!("savings {}", f.sparse_savings);
            println!("sparse_total {}", f.sparse_total());
        }
        Cmd::Generate(a) => {
            let (meta, params) = checkpoint::load(&a.checkpoint)?;
            let cfg = meta.run.model;
            if a.prompt.is_empty() {
                bail!("--prompt must not be empty");
            }
            let prompt: Vec<u32> = a.prompt.bytes().map(u32::from).collect();
            let decoding = match a.temperature {
                Some(t) => Decoding::Temperature {
                    temperature: t,
                    seed: common.seed.unwrap_or(0),
                },
                None => Decoding::Greedy,
            };
            let gen = match common.precision.unwrap_or(meta.run.precision) {
                Precision::Single => generate(&params.cast::<f32>(&cfg), &cfg, &prompt, a.tokens, decoding, None)?,
                Precision::Double => generate(&ModelParams::clone(&params), &cfg, &prompt, a.tokens, decoding, None)?,
            };
            let bytes: Vec<u8> = gen.tokens.iter().map(|&t| t.min(255) as u8).collect();
            prepare_out(&out)?;
            std::fs::write(out.join("generation.txt"), &bytes)?;
            Manifest::new("generate").write(&out)?;
            println!("{}{}", a.prompt, String::from_utf8_lossy(&bytes));
            if let Some(b) = gen.state_bytes.last() {
                println!("state bytes {b}");
            }
        }
        Cmd::Plots {
            loss_so_far,
            sweep,
            generation,
        } => {
            let inputs: Vec<(PlotKind, PathBuf)> = [
                (PlotKind::LossSoFar, loss_so_far),
                (PlotKind::Sweep, sweep),
                (PlotKind::Generation, generation),
            ]
            .into_iter()
            .filter_map(|(k, p)| p.map(|p| (k, p)))
            .collect();
            let files = emit_plots(&inputs, &out)?;
            Manifest::new("plots").write(&out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}
