//! Token-by-token generation benchmark: per-position latency, throughput and
//! inference-state size for FM and attention models.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{FmError, Result};
use crate::flops::TouchCounters;
use crate::layer::LayerConfig;
use crate::model::{step_token, MixerKind, ModelConfig, ModelParams, SequenceStates};

pub const REPORT_VERSION: &str = "# fm-bench v1";

#[derive(Debug, Clone)]
pub struct BenchVariant {
    pub name: String,
    pub cfg: ModelConfig,
    pub params: ModelParams<f32>,
}

impl BenchVariant {
    pub fn new(name: &str, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::<f64>::init(&cfg, &mut rng)?.cast(&cfg);
        Ok(Self {
            name: name.to_string(),
            cfg,
            params,
        })
    }
}

/// FM dense, FM sparse (a quarter of the rows) and attention at one width.
/// The attention position table covers `positions`.
pub fn standard_variants(
    d_model: usize,
    m: usize,
    n_layers: usize,
    positions: usize,
    seed: u64,
) -> Result<Vec<BenchVariant>> {
    let layer = LayerConfig::dense(m, d_model, d_model);
    let fm = |k| ModelConfig::new(n_layers, layer.with_k(k), MixerKind::FactorizationMemory, positions);
    let mut attention = ModelConfig::new(n_layers, layer, MixerKind::Attention, positions);
    attention.max_positions = Some(positions);
    Ok(vec![
        BenchVariant::new("fm_dense", fm(m), seed)?,
        BenchVariant::new("fm_sparse", fm((m / 4).max(1)), seed)?,
        BenchVariant::new("attention", attention, seed)?,
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOptions {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub repeats: usize,
    /// Stream positions reported individually.
    pub probes: Vec<usize>,
    /// Positions pooled around each profile row when taking its median
    /// latency. Probes are instead replayed this many times per repeat.
    pub window: usize,
    /// Spacing of the per-position profile rows.
    pub stride: usize,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            prompt_len: 64,
            gen_len: 4096,
            repeats: 3,
            probes: vec![64, 4096],
            window: 64,
            stride: 64,
            warmup: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSample {
    pub position: usize,
    pub latency_us: f64,
    pub state_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub variant: String,
    pub mixer: String,
    pub m: usize,
    pub k: usize,
    pub tokens_per_s: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    /// Memory rows written per token across all layers (0 for attention).
    pub rows_written_per_token: f64,
    pub rows_written: u64,
    pub probes: Vec<ProbeSample>,
    pub profile: Vec<ProbeSample>,
}

impl VariantReport {
    pub fn probe(&self, position: usize) -> Option<&ProbeSample> {
        self.probes.iter().find(|p| p.position == position)
    }

    /// Latency at `to` over latency at `from`.
    pub fn latency_ratio(&self, from: usize, to: usize) -> Option<f64> {
        Some(self.probe(to)?.latency_us / self.probe(from)?.latency_us)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub options: BenchOptions,
    pub threads: usize,
    pub variants: Vec<VariantReport>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

fn prompt_token(i: usize) -> u32 {
    (b'a' as usize + i % 26) as u32
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

type Snapshot = (SequenceStates<f32>, u32);

/// One pass over the stream; returns per-position latency (ns) and state bytes.
/// The state and input token just before each position in `snap_at` are saved.
fn run_once(
    v: &BenchVariant,
    len: usize,
    prompt_len: usize,
    counters: Option<&mut TouchCounters>,
    snap_at: &[usize],
    snaps: &mut Vec<Snapshot>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut states = SequenceStates::new(&v.cfg);
    let mut lat = Vec::with_capacity(len);
    let mut bytes = Vec::with_capacity(len);
    let mut next = prompt_token(0);
    let mut counters = counters;
    for pos in 0..len {
        let tok = if pos < prompt_len { prompt_token(pos) } else { next };
        if snap_at.contains(&pos) {
            snaps.push((states.clone(), tok));
        }
        let start = Instant::now();
        let logits = step_token(&v.params, &v.cfg, &mut states, tok, counters.as_deref_mut())?;
        lat.push(start.elapsed().as_nanos() as f64);
        next = argmax(&logits);
        bytes.push(states.bytes());
    }
    Ok((lat, bytes))
}

/// Runs every variant through a prompt and a greedy continuation, timing each
/// `step_token` call. Variants run one after another on the calling thread.
pub fn bench_generation(variants: &[BenchVariant], opts: &BenchOptions) -> Result<BenchReport> {
    if opts.repeats == 0 || opts.prompt_len == 0 || opts.gen_len == 0 {
        return Err(FmError::InvalidArgument(
            "prompt_len, gen_len and repeats must be positive".into(),
        ));
    }
    let len = opts.prompt_len + opts.gen_len;
    if let Some(&p) = opts.probes.iter().find(|&&p| p >= len) {
        return Err(FmError::InvalidArgument(format!(
            "probe position {p} is past the stream end {len}"
        )));
    }
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        run_once(v, opts.warmup.min(len), opts.prompt_len, None, &[], &mut Vec::new())?;
        let mut counters = TouchCounters::new();
        let mut runs = Vec::with_capacity(opts.repeats);
        let mut snaps = Vec::with_capacity(opts.probes.len());
        for r in 0..opts.repeats {
            let c = (r == 0).then_some(&mut counters);
            let at: &[usize] = if r == 0 { &opts.probes } else { &[] };
            runs.push(run_once(v, len, opts.prompt_len, c, at, &mut snaps)?);
        }
        let bytes = &runs[0].1;
        // Probe latency: replay one step from each saved state, alternating
        // between probes, so slow drift in machine speed hits all of them alike.
        let mut probe_lat = vec![Vec::new(); snaps.len()];
        for _ in 0..opts.repeats * opts.window.max(1) {
            for ((snap, tok), out) in snaps.iter().zip(&mut probe_lat) {
                let mut states = snap.clone();
                let start = Instant::now();
                step_token(&v.params, &v.cfg, &mut states, *tok, None)?;
                out.push(start.elapsed().as_nanos() as f64);
            }
        }
        let mut sorted_probes: Vec<usize> = opts.probes.clone();
        sorted_probes.sort_unstable();
        sorted_probes.dedup();
        let pooled = |lo: usize, hi: usize| -> f64 {
            median(runs.iter().flat_map(|(l, _)| l[lo..hi].iter().copied()).collect()) / 1e3
        };
        let sample = |p: usize| {
            let lo = p.saturating_sub(opts.window / 2);
            let hi = (lo + opts.window.max(1)).min(len);
            ProbeSample {
                position: p,
                latency_us: pooled(lo, hi),
                state_bytes: bytes[p],
            }
        };
        let mut gen: Vec<f64> = runs
            .iter()
            .flat_map(|(l, _)| l[opts.prompt_len..].iter().copied())
            .collect();
        let total_ns: f64 = gen.iter().sum();
        gen.sort_by(f64::total_cmp);
        reports.push(VariantReport {
            variant: v.name.clone(),
            mixer: v.cfg.mixer.to_string(),
            m: if v.cfg.is_fm() { v.cfg.layer.m } else { 0 },
            k: if v.cfg.is_fm() { v.cfg.layer.k } else { 0 },
            tokens_per_s: gen.len() as f64 / (total_ns / 1e9),
            p50_us: percentile(&gen, 0.5) / 1e3,
            p95_us: percentile(&gen, 0.95) / 1e3,
            rows_written_per_token: counters.rows_written as f64 / len as f64,
            rows_written: counters.rows_written,
            probes: opts
                .probes
                .iter()
                .map(|&p| {
                    let i = sorted_probes.binary_search(&p).expect("probe was snapshotted");
                    ProbeSample {
                        position: p,
                        latency_us: median(probe_lat[i].clone()) / 1e3,
                        state_bytes: bytes[p],
                    }
                })
                .collect(),
            profile: (0..len).step_by(opts.stride.max(1)).map(sample).collect(),
        });
    }
    Ok(BenchReport {
        options: opts.clone(),
        threads: 1,
        variants: reports,
    })
}

impl BenchReport {
    /// Summary table: one row per variant, in input order.
    pub fn to_tsv(&self) -> String {
        let mut s =
            format!("{REPORT_VERSION}\nvariant\tmixer\tm\tk\ttokens_per_s\tp50_us\tp95_us\trows_written_per_token");
        for p in &self.options.probes {
            write!(s, "\tstate_bytes@{p}\tlatency_us@{p}").expect("write to String");
        }
        s.push('\n');
        for v in &self.variants {
            write!(
                s,
                "{}\t{}\t{}\t{}\t{:.1}\t{:.3}\t{:.3}\t{}",
                v.variant, v.mixer, v.m, v.k, v.tokens_per_s, v.p50_us, v.p95_us, v.rows_written_per_token
            )
            .expect("write to String");
            for p in &v.probes {
                write!(s, "\t{}\t{:.3}", p.state_bytes, p.latency_us).expect("write to String");
            }
            s.push('\n');
        }
        s
    }

    /// Per-position table: `position variant latency_us state_bytes`.
    pub fn profile_tsv(&self) -> String {
        let mut s = format!("{REPORT_VERSION}\nposition\tvariant\tlatency_us\tstate_bytes\n");
        for v in &self.variants {
            for p in &v.profile {
                writeln!(
                    s,
                    "{}\t{}\t{:.3}\t{}",
                    p.position, v.variant, p.latency_us, p.state_bytes
                )
                .expect("write to String");
            }
        }
        s
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FmError::Config(e.to_string()))
    }

    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_schema_is_stable() {
        let variants = standard_variants(8, 8, 1, 40, 0).unwrap();
        let opts = BenchOptions {
            prompt_len: 8,
            gen_len: 24,
            repeats: 2,
            probes: vec![8, 30],
            window: 4,
            stride: 8,
            warmup: 4,
        };
        let a = bench_generation(&variants, &opts).unwrap();
        let b = bench_generation(&variants, &opts).unwrap();
        let head = |r: &BenchReport| {
            r.to_tsv()
                .lines()
                .map(|l| l.split('\t').take(4).collect::<Vec<_>>().join("\t"))
                .collect::<Vec<_>>()
        };
        assert_eq!(head(&a), head(&b));
        assert_eq!(
            head(&a),
            vec![
                "# fm-bench v1",
                "variant\tmixer\tm\tk",
                "fm_dense\tfm\t8\t8",
                "fm_sparse\tfm\t8\t2",
                "attention\tattention\t0\t0",
            ]
        );
        let dense = a.variant("fm_dense").unwrap();
        let sparse = a.variant("fm_sparse").unwrap();
        assert_eq!(dense.rows_written, 4 * sparse.rows_written);
        assert_eq!(
            dense.probe(8).unwrap().state_bytes,
            dense.probe(30).unwrap().state_bytes
        );
        let att = a.variant("attention").unwrap();
        assert_eq!(
            att.probe(30).unwrap().state_bytes - att.probe(8).unwrap().state_bytes,
            22 * 2 * 8 * 4
        );
        assert_eq!(a.profile_tsv().lines().count(), 2 + 3 * 4);
        assert!(a.to_toml().is_ok());
    }

    #[test]
    fn rejects_probe_past_end() {
        let variants = standard_variants(8, 4, 1, 16, 0).unwrap();
        let opts = BenchOptions {
            prompt_len: 4,
            gen_len: 4,
            probes: vec![8],
            ..BenchOptions::default()
        };
        assert!(bench_generation(&variants, &opts).is_err());
    }
}
