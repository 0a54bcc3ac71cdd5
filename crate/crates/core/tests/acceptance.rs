//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 are directional training studies; they report without
//! failing the run. Pass criterion numbers as arguments to run a subset, and
//! set `FM_FULL_BUDGET=1` to run criterion 8 at its full token budget.

mod common;

use std::cell::Cell;
use std::ops::{Add, Div, Mul, Sub};
use std::time::Instant;

use fm_core::flops::{flops_per_token, FlopsBreakdown, TouchCounters};
use fm_core::grad::{backward_sequence, gradcheck_model, GradCheckPreset};
use fm_core::layer::{forward_sequence, step, step_dense};
use fm_core::model::{generate, Decoding, MixerKind, ModelConfig, ModelParams};
use fm_core::train::experiments::{extrapolation_study, sweep_memory, Variant};
use fm_core::train::{checkpoint, evaluate, run_rngs, train, CheckpointMeta, Corpus, RunConfig};
use fm_core::{Execution, ForwardMode, ForwardOptions, LayerConfig, LayerParams, MemoryState, Precision, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<(bool, String), String>;

struct Criterion {
    id: u32,
    name: &'static str,
    /// Soft criteria print FAIL but do not fail the binary.
    hard: bool,
    run: Check,
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion {
            id: 1,
            name: "mode equivalence",
            hard: true,
            run: mode_equivalence,
        },
        Criterion {
            id: 2,
            name: "gradient correctness",
            hard: true,
            run: gradient_correctness,
        },
        Criterion {
            id: 3,
            name: "dense/sparse degeneracy",
            hard: true,
            run: dense_sparse_degeneracy,
        },
        Criterion {
            id: 4,
            name: "sparsity accounting",
            hard: true,
            run: sparsity_accounting,
        },
        Criterion {
            id: 5,
            name: "flops transcription",
            hard: true,
            run: flops_transcription,
        },
        Criterion {
            id: 6,
            name: "constant-state inference",
            hard: true,
            run: constant_state,
        },
        Criterion {
            id: 7,
            name: "smoke learning",
            hard: true,
            run: smoke_learning,
        },
        Criterion {
            id: 8,
            name: "memory scaling",
            hard: false,
            run: memory_scaling,
        },
        Criterion {
            id: 9,
            name: "context extrapolation",
            hard: false,
            run: extrapolation,
        },
        Criterion {
            id: 10,
            name: "determinism",
            hard: true,
            run: determinism,
        },
    ];
    let mut hard_failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let (pass, detail) = match (c.run)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        let tag = if pass { "PASS" } else { "FAIL" };
        let soft = if !pass && !c.hard { " (report only)" } else { "" };
        println!("{tag} {:>2} {}{soft} [{secs:.1}s]: {detail}", c.id, c.name);
        if !pass && c.hard {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_layer(rng: &mut ChaCha8Rng, max_m: usize, max_d: usize) -> LayerConfig {
    let m = rng.random_range(1..=max_m);
    let k = rng.random_range(1..=m);
    let tau = [1.0, 0.5, 2.0][rng.random_range(0..3)];
    LayerConfig::dense(m, rng.random_range(1..=max_d), rng.random_range(1..=max_d))
        .with_k(k)
        .with_tau(tau)
}

/// Projections at a scale that keeps routing decisive, plus live gates.
fn random_params(cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> LayerParams<f64> {
    let mut p = LayerParams::<f64>::init(cfg, 0.5, rng);
    for w in p.w_eta.iter_mut().chain(p.w_mu.iter_mut()) {
        *w = rng.random_range(-1.0..1.0);
    }
    p
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2<f64> {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn to_f32(p: &LayerParams<f64>) -> LayerParams<f32> {
    LayerParams {
        w_alpha: p.w_alpha.cast(),
        w_eta: p.w_eta.iter().map(|&v| v as f32).collect(),
        w_mu: p.w_mu.iter().map(|&v| v as f32).collect(),
        w_in: p.w_in.cast(),
        w_out: p.w_out.cast(),
    }
}

fn mode_equivalence() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let cfg = random_layer(&mut rng, 8, 16);
        let t = rng.random_range(1..=256);
        let p = random_params(&cfg, &mut rng);
        let xs = random_tensor(t, cfg.d_model, &mut rng);
        let h0 = MemoryState {
            h: random_tensor(cfg.m, cfg.d_memory, &mut rng),
        };

        let run = |mode| forward_sequence(&p, &cfg, h0.clone(), &xs, &ForwardOptions::new(mode, false), None);
        let a = run(ForwardMode::Sequential).map_err(err)?;
        let b = run(ForwardMode::Scan).map_err(err)?;
        worst64 = worst64
            .max(a.ys.max_abs_diff(&b.ys))
            .max(a.state.h.max_abs_diff(&b.state.h));

        let p32 = to_f32(&p);
        let xs32 = xs.cast::<f32>();
        let h32 = MemoryState { h: h0.h.cast::<f32>() };
        let run = |mode| forward_sequence(&p32, &cfg, h32.clone(), &xs32, &ForwardOptions::new(mode, false), None);
        let a = run(ForwardMode::Sequential).map_err(err)?;
        let b = run(ForwardMode::Scan).map_err(err)?;
        worst32 = worst32.max(a.ys.max_abs_diff(&b.ys));
    }
    Ok((
        worst64 < 1e-12 && worst32 < 1e-5,
        format!("100 configs, max abs diff {worst64:.2e} (double), {worst32:.2e} (single)"),
    ))
}

fn gradient_correctness() -> Result<(bool, String), String> {
    let preset = GradCheckPreset::tiny(MixerKind::FactorizationMemory);
    let cfg = preset.model;
    if (
        cfg.n_layers,
        cfg.layer.m,
        cfg.layer.k,
        cfg.layer.d_model,
        preset.seq_len,
    ) != (2, 4, 2, 8, 8)
    {
        return Err(format!("preset drifted from the required shape: {cfg:?}"));
    }
    let report = gradcheck_model(&preset, 1).map_err(err)?;
    let shapes = ModelParams::<f64>::zeros(&cfg);
    let mut short = Vec::new();
    for (name, _, data) in shapes.tensors() {
        let t = report
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| format!("tensor {name} was not checked"))?;
        if t.checked < data.len().min(64) {
            short.push(format!("{name} {}/{}", t.checked, data.len().min(64)));
        }
    }
    let max = report.max_rel();
    let mut detail = format!(
        "{} tensors, {} coords, max rel err {max:.2e}",
        report.tensors.len(),
        report.checked()
    );
    if !short.is_empty() {
        detail.push_str(&format!("; under-sampled: {}", short.join(", ")));
    }
    Ok((max < 1e-6 && short.is_empty(), detail))
}

fn dense_sparse_degeneracy() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut cfg = random_layer(&mut rng, 8, 16);
        cfg.k = cfg.m;
        let p = random_params(&cfg, &mut rng);
        let h0 = random_tensor(cfg.m, cfg.d_memory, &mut rng);
        let mut sparse = MemoryState { h: h0.clone() };
        let mut dense = MemoryState { h: h0 };
        for _ in 0..rng.random_range(1..=32) {
            let x: Vec<f64> = (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = step(&p, &cfg, &mut sparse, &x, None).map_err(err)?;
            let b = step_dense(&p, &cfg, &mut dense, &x).map_err(err)?;
            let d = a.y.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            worst = worst.max(d).max(sparse.h.max_abs_diff(&dense.h));
        }
    }
    Ok((worst == 0.0, format!("20 configs, max abs diff {worst:e}")))
}

fn sparsity_accounting() -> Result<(bool, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    for i in 0..20 {
        let cfg = random_layer(&mut rng, 16, 16);
        let t = rng.random_range(1..=64);
        let p = random_params(&cfg, &mut rng);
        let xs = random_tensor(t, cfg.d_model, &mut rng);
        let mode = if i % 2 == 0 {
            ForwardMode::Sequential
        } else {
            ForwardMode::Scan
        };

        let mut fwd = TouchCounters::recording();
        let out = forward_sequence(
            &p,
            &cfg,
            MemoryState::zeros(&cfg),
            &xs,
            &ForwardOptions::new(mode, true),
            Some(&mut fwd),
        )
        .map_err(err)?;
        let tape = out.tape.ok_or("forward kept no tape")?;
        let mut bwd = TouchCounters::recording();
        let g_ys = random_tensor(t, cfg.d_model, &mut rng);
        let mut g_h = Tensor2::zeros(cfg.m, cfg.d_memory);
        let mut grads = LayerParams::<f64>::zeros(&cfg);
        backward_sequence(&p, &cfg, &tape, &g_ys, &mut g_h, &mut grads, Some(&mut bwd)).map_err(err)?;

        let expected = (t * cfg.k) as u64;
        let taped: std::collections::BTreeSet<_> = tape
            .steps
            .iter()
            .enumerate()
            .flat_map(|(pos, s)| s.selected.iter().map(move |&r| (0, pos, r)))
            .collect();
        let ok = fwd.rows_written == expected
            && bwd.rows_written == expected
            && fwd.touched() == Some(&taped)
            && bwd.touched() == fwd.touched();
        if !ok {
            bad.push(format!(
                "m={} k={} T={t} ({mode:?}): wrote {} / {expected}",
                cfg.m, cfg.k, fwd.rows_written
            ));
        }
    }
    let detail = if bad.is_empty() {
        "20 configs, rows_written == T·k, backward row set == forward row set".to_string()
    } else {
        bad.join("; ")
    };
    Ok((bad.is_empty(), detail))
}

// --- criterion 5: an independent recount of the FLOPS lines ---------------

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

/// A float that counts every arithmetic operation applied to it.
#[derive(Clone, Copy)]
struct Counted(f64);

fn tick() {
    OPS.with(|o| o.set(o.get() + 1));
}

impl Add for Counted {
    type Output = Counted;
    fn add(self, o: Counted) -> Counted {
        tick();
        Counted(self.0 + o.0)
    }
}

impl Sub for Counted {
    type Output = Counted;
    fn sub(self, o: Counted) -> Counted {
        tick();
        Counted(self.0 - o.0)
    }
}

impl Mul for Counted {
    type Output = Counted;
    fn mul(self, o: Counted) -> Counted {
        tick();
        Counted(self.0 * o.0)
    }
}

impl Div for Counted {
    type Output = Counted;
    fn div(self, o: Counted) -> Counted {
        tick();
        Counted(self.0 / o.0)
    }
}

impl Counted {
    fn sqrt(self) -> Counted {
        tick();
        Counted(self.0.sqrt())
    }
}

fn counted<T>(f: impl FnOnce() -> T) -> (T, u64) {
    OPS.with(|o| o.set(0));
    let r = f();
    (r, OPS.with(|o| o.get()))
}

fn dot_c(a: &[Counted], b: &[Counted]) -> Counted {
    let mut acc = a[0] * b[0];
    for (&x, &y) in a.iter().zip(b).skip(1) {
        acc = acc + x * y;
    }
    acc
}

fn matvec_c(w: &[Vec<Counted>], x: &[Counted]) -> Vec<Counted> {
    w.iter().map(|row| dot_c(row, x)).collect()
}

/// Each line of the per-token cost model, run as a literal kernel on data of
/// the right shape with every operation counted.
fn recount(cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> FlopsBreakdown {
    let mut v = || Counted(rng.random_range(-1.0..1.0));
    let mut mat = |r: usize, c: usize| -> Vec<Vec<Counted>> { (0..r).map(|_| (0..c).map(|_| v()).collect()).collect() };
    let (dm, dh, m) = (cfg.d_model, cfg.d_memory, cfg.m);
    let w_in = mat(dh, dm);
    let w_alpha = mat(m, dm);
    let w_rates = mat(2, dm);
    let w_out = mat(dm, dh);
    let h = mat(m, dh);
    let x = mat(1, dm).remove(0);
    let alpha = mat(1, m).remove(0);
    let gain = mat(1, dh).remove(0);

    let (_, input_proj) = counted(|| matvec_c(&w_in, &x));
    let (_, affinity) = counted(|| matvec_c(&w_alpha, &x));
    let ((theta, phi), rates) = counted(|| {
        let eta = dot_c(&w_rates[0], &x);
        let mu = dot_c(&w_rates[1], &x);
        let theta: Vec<Counted> = alpha.iter().map(|&a| eta * a).collect();
        let phi: Vec<Counted> = alpha.iter().map(|&a| mu * a).collect();
        (theta, phi)
    });
    let _ = theta;
    let (normed, norm) = counted(|| {
        h.iter()
            .map(|row| {
                let ss = dot_c(row, row);
                let mean = ss / Counted(dh as f64);
                let rms = (mean + Counted(1e-6)).sqrt();
                let inv = Counted(1.0) / rms;
                row.iter().zip(&gain).map(|(&r, &g)| (r * inv) * g).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    });
    let (merged, merge) = counted(|| {
        let weighted: Vec<Vec<Counted>> = normed
            .iter()
            .zip(&phi)
            .map(|(row, &p)| row.iter().map(|&r| p * r).collect())
            .collect();
        (0..dh)
            .map(|j| {
                let mut acc = weighted[0][j];
                for w in &weighted[1..] {
                    acc = acc + w[j];
                }
                acc
            })
            .collect::<Vec<_>>()
    });
    let (_, output_proj) = counted(|| matvec_c(&w_out, &merged));

    let total = input_proj + affinity + rates + norm + merge + output_proj;
    let k = cfg.k as u64;
    // Per dropped row: its rate products, the update (1 - θ, two products and
    // a sum per element), its norm and its share of the merge.
    let per_row = {
        let row = &h[0];
        let (_, update) = counted(|| {
            let t = Counted(0.5);
            let keep = Counted(1.0) - t;
            row.iter().map(|&r| keep * r + t * r).collect::<Vec<_>>()
        });
        let rate_products = 2;
        let norm_row = norm / m as u64;
        let merge_row = 2 * dh as u64;
        update - 1 + rate_products + norm_row + merge_row
    };
    FlopsBreakdown {
        input_proj,
        affinity,
        rates,
        norm,
        merge,
        output_proj,
        total,
        sparse_savings: (m as u64 - k) * per_row,
    }
}

fn flops_transcription() -> Result<(bool, String), String> {
    let reference = flops_per_token(&LayerConfig::dense(4, 8, 8));
    let parts: Vec<u64> = reference.parts().iter().map(|p| p.1).collect();
    let savings = flops_per_token(&LayerConfig::dense(4, 8, 8).with_k(1)).sparse_savings;
    let mut ok = parts == [120, 60, 38, 140, 56, 120] && reference.total == 534 && savings == 231;
    let mut detail = format!("total {} savings {savings}", reference.total);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let m = rng.random_range(1..=32);
        let cfg =
            LayerConfig::dense(m, rng.random_range(1..=64), rng.random_range(1..=64)).with_k(rng.random_range(1..=m));
        let calc = flops_per_token(&cfg);
        let counted = recount(&cfg, &mut rng);
        if calc != counted {
            ok = false;
            detail.push_str(&format!("; mismatch at {cfg:?}: {calc:?} vs {counted:?}"));
        }
    }
    if ok {
        detail.push_str("; 5 random configs match the op-counted recount");
    }
    Ok((ok, detail))
}

fn constant_state() -> Result<(bool, String), String> {
    let n = 4096;
    let fm_cfg = ModelConfig::new(
        2,
        LayerConfig::dense(16, 16, 16).with_k(4),
        MixerKind::FactorizationMemory,
        64,
    );
    let mut att_cfg = ModelConfig::new(2, LayerConfig::dense(16, 16, 16), MixerKind::Attention, 64);
    att_cfg.max_positions = Some(n + 1);
    let build = |cfg: &ModelConfig| -> Result<ModelParams<f32>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        Ok(ModelParams::<f64>::init(cfg, &mut rng).map_err(err)?.cast(cfg))
    };

    let mut counters = TouchCounters::new();
    let fm = generate(
        &build(&fm_cfg)?,
        &fm_cfg,
        &[b'a' as u32],
        n,
        Decoding::Greedy,
        Some(&mut counters),
    )
    .map_err(err)?;
    let fm_flat = fm.state_bytes[63] == fm.state_bytes[n - 1] && fm.state_bytes.iter().all(|&b| b == fm.state_bytes[0]);
    let rows_ok = counters.rows_written == (n as u64) * 4 * 2;

    let att = generate(&build(&att_cfg)?, &att_cfg, &[b'a' as u32], n, Decoding::Greedy, None).map_err(err)?;
    let per_token = 2 * 2 * 16 * std::mem::size_of::<f32>();
    // The final token is emitted but never fed back, so its entry repeats.
    let linear = att.state_bytes[..n - 1].windows(2).all(|w| w[1] - w[0] == per_token);
    Ok((
        fm_flat && rows_ok && linear,
        format!(
            "fm state {} B at token 64 and {} B at token 4096, {} rows written; attention cache {} -> {} B (+{per_token} B/token)",
            fm.state_bytes[63],
            fm.state_bytes[n - 1],
            counters.rows_written,
            att.state_bytes[63],
            att.state_bytes[n - 1]
        ),
    ))
}

fn smoke_run(steps: usize) -> RunConfig {
    let mut model = ModelConfig::new(
        2,
        LayerConfig::dense(8, 32, 32).with_k(4),
        MixerKind::FactorizationMemory,
        32,
    );
    model.init_std = 1e-3;
    let mut run = RunConfig::new(model, 4, steps);
    run.lr = 1e-2;
    run.eval_every = 20;
    run
}

fn smoke_learning() -> Result<(bool, String), String> {
    let run = smoke_run(200);
    let corpus = Corpus::new(vec![b'a'; 8192], 0.9).map_err(err)?;
    let (mut init_rng, _) = run_rngs(run.seed);
    let init = ModelParams::init(&run.model, &mut init_rng).map_err(err)?;
    let start = evaluate(
        &init,
        &run.model,
        &corpus,
        4,
        run.precision,
        run.mode,
        Execution::Parallel,
    )
    .map_err(err)?;
    let out = train(&run, &corpus, Execution::Parallel, None).map_err(err)?;
    let last = out.records.last().ok_or("no metrics records")?.loss;
    let ln256 = 256f64.ln();
    Ok((
        (start - ln256).abs() <= 0.05 && last < 0.1 && out.test_loss < 0.1,
        format!(
            "start {start:.4} (ln 256 = {ln256:.4}), final train {last:.2e}, test {:.2e} after {} steps",
            out.test_loss, out.steps
        ),
    ))
}

fn scaling_run(full_budget: bool) -> RunConfig {
    if full_budget {
        // About 1M parameters and 20M tokens per run.
        let model = ModelConfig::new(5, LayerConfig::dense(4, 128, 128), MixerKind::FactorizationMemory, 128);
        let mut run = RunConfig::new(model, 16, 9766);
        run.lr = 2e-3;
        run.eval_every = 500;
        run.eval_batches = 64;
        run
    } else {
        let model = ModelConfig::new(2, LayerConfig::dense(4, 32, 32), MixerKind::FactorizationMemory, 32);
        let mut run = RunConfig::new(model, 8, 400);
        run.lr = 3e-3;
        run.eval_every = 400;
        run.eval_batches = 32;
        run
    }
}

fn memory_scaling() -> Result<(bool, String), String> {
    let full = std::env::var("FM_FULL_BUDGET").is_ok_and(|v| v == "1");
    let corpus = Corpus::new(common::synthetic_text(400, 1500), 0.9).map_err(err)?;
    let ms = [4, 16, 64];
    let mut mean = [0.0; 3];
    let mut tokens = 0;
    let mut params = 0;
    for seed in 0..3 {
        let mut run = scaling_run(full);
        run.seed = seed;
        tokens = run.token_budget();
        let mut m64 = run.model;
        m64.layer.m = 64;
        m64.layer.k = 64;
        params = ModelParams::<f64>::zeros(&m64).num_params();
        let table = sweep_memory(&run, &corpus, &ms, &[Variant::Dense], &[1.0], Execution::Parallel).map_err(err)?;
        for row in &table.rows {
            let i = ms.iter().position(|&m| m == row.m).ok_or("unexpected m")?;
            mean[i] += row.loss / 3.0;
        }
    }
    let monotone = mean.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let losses = format!(
        "mean test loss m=4 {:.4}, m=16 {:.4}, m=64 {:.4}",
        mean[0], mean[1], mean[2]
    );
    if full {
        Ok((
            monotone,
            format!("{losses} ({params} params, {tokens} tokens/run, 3 seeds)"),
        ))
    } else {
        Ok((
            false,
            format!(
                "full budget (~1M params, ~20M tokens, 3 seeds) not run; reduced analog ({params} params, {tokens} tokens/run): {losses}, non-increasing within 0.02: {monotone}"
            ),
        ))
    }
}

fn extrapolation() -> Result<(bool, String), String> {
    let corpus = Corpus::new(common::synthetic_text(200, 1500), 0.9).map_err(err)?;
    let run = |mixer| {
        let mut model = ModelConfig::new(2, LayerConfig::dense(8, 32, 32), mixer, 32);
        model.n_heads = 2;
        let mut r = RunConfig::new(model, 8, 1500);
        r.lr = 3e-3;
        r.eval_every = 1500;
        r
    };
    let seeds = extrapolation_study(
        &run(MixerKind::FactorizationMemory),
        &run(MixerKind::Attention),
        &corpus,
        &[0, 1, 2],
        8,
        Execution::Parallel,
    )
    .map_err(err)?;
    let better = seeds.iter().filter(|s| s.fm_extrapolates_better()).count();
    let blowup = seeds.iter().all(|s| s.attention_delta8 > 0.5);
    let per_seed: Vec<String> = seeds
        .iter()
        .map(|s| {
            format!(
                "seed {}: fm Δ4 {:+.3}, attention Δ4 {:+.3} Δ8 {:+.3}",
                s.seed, s.fm_delta4, s.attention_delta4, s.attention_delta8
            )
        })
        .collect();
    Ok((
        better >= 2 && blowup,
        format!("fm better on {better}/3; {}", per_seed.join("; ")),
    ))
}

fn determinism() -> Result<(bool, String), String> {
    let mut run = smoke_run(40);
    run.eval_every = 10;
    run.precision = Precision::Single;
    let corpus = Corpus::new(common::synthetic_text(20, 800), 0.9).map_err(err)?;
    let once = || -> Result<(String, Vec<u8>), String> {
        let out = train(&run, &corpus, Execution::Parallel, None).map_err(err)?;
        let meta = CheckpointMeta {
            step: out.steps,
            run: run.clone(),
        };
        Ok((out.metrics_text(), checkpoint::encode(&meta, &out.params).map_err(err)?))
    };
    let (m1, c1) = once()?;
    let (m2, c2) = once()?;
    Ok((
        m1 == m2 && c1 == c2,
        format!(
            "metrics identical: {}, checkpoints identical: {} ({} bytes)",
            m1 == m2,
            c1 == c2,
            c1.len()
        ),
    ))
}
