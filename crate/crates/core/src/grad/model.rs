//! Reverse pass through the whole language model.

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::attention_backward;
use crate::error::{FmError, Result};
use crate::flops::TouchCounters;
use crate::grad::check::{finite_diff_check, FdOptions, GradCheckReport, Probe};
use crate::grad::dd::Dd;
use crate::grad::layer::backward_sequence;
use crate::layer::{ForwardMode, ForwardOptions, LayerConfig};
use crate::model::{lm_loss, lm_loss_native, MixerKind, MixerParams, MixerTape, ModelConfig, ModelParams, ModelTape};
use crate::par::{self, Execution};
use crate::tensor::{accumulate_outer, axpy_wide, matmul_nn, rms_norm_backward, silu_grad, Scalar, Tensor2};

/// Backward of `out = gain ⊙ n`, `n = v / r`. Adds into `g_gain` and `g_v`.
fn norm_backward<S: Scalar>(
    g_out: &Tensor2<S>,
    normed: &Tensor2<S>,
    r: &[S],
    gain: &[S],
    g_gain: &mut [f64],
    g_v: &mut Tensor2<S>,
) {
    let mut g_n = vec![S::zero(); gain.len()];
    for t in 0..g_out.rows() {
        let n = normed.row(t);
        for (j, ((gn, &go), &g)) in g_n.iter_mut().zip(g_out.row(t)).zip(gain).enumerate() {
            g_gain[j] += (go * n[j]).as_f64();
            *gn = go * g;
        }
        rms_norm_backward(n, r[t], &g_n, g_v.row_mut(t));
    }
}

fn gained<S: Scalar>(normed: &Tensor2<S>, gain: &[S]) -> Tensor2<S> {
    let mut out = normed.clone();
    for t in 0..out.rows() {
        for (v, &g) in out.row_mut(t).iter_mut().zip(gain) {
            *v *= g;
        }
    }
    out
}

/// Adds `loss_scale · ∂(mean nll)/∂θ` into `grads`.
pub fn model_backward<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tape: &ModelTape<S>,
    loss_scale: f64,
    grads: &mut ModelParams<f64>,
    mut counters: Option<&mut TouchCounters>,
) -> Result<()> {
    if tape.blocks.len() != params.blocks.len() {
        return Err(FmError::InvalidArgument(
            "backward needs a tape recorded with keep_tape".into(),
        ));
    }
    grads.check(cfg)?;
    let n = tape.targets.len();
    let c = S::of(loss_scale / n as f64);

    // head
    let mut g_logits = tape.probs.clone();
    for (t, &y) in tape.targets.iter().enumerate() {
        let row = g_logits.row_mut(t);
        row[y as usize] -= S::one();
        for v in row {
            *v *= c;
        }
    }
    accumulate_outer(grads.embed.data_mut(), &g_logits, &tape.hidden);
    let g_hidden = matmul_nn(&g_logits, &params.embed)?;
    let mut g_x = Tensor2::zeros(g_hidden.rows(), g_hidden.cols());
    norm_backward(
        &g_hidden,
        &tape.nf,
        &tape.rf,
        &params.final_norm,
        &mut grads.final_norm,
        &mut g_x,
    );

    for (i, (bt, bp)) in tape.blocks.iter().zip(&params.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[i];
        // MLP branch
        accumulate_outer(gb.mlp_down.data_mut(), &g_x, &bt.s);
        let mut g_a = matmul_nn(&g_x, &bp.mlp_down)?;
        for (g, &a) in g_a.data_mut().iter_mut().zip(bt.a.data()) {
            *g *= silu_grad(a);
        }
        accumulate_outer(gb.mlp_up.data_mut(), &g_a, &gained(&bt.n2, &bp.norm2));
        let g_n2g = matmul_nn(&g_a, &bp.mlp_up)?;
        let mut g_u = g_x;
        norm_backward(&g_n2g, &bt.n2, &bt.r2, &bp.norm2, &mut gb.norm2, &mut g_u);

        // mixer branch
        let g_n1g = match (&bp.mixer, &bt.mixer, &mut gb.mixer) {
            (MixerParams::Fm(p), MixerTape::Fm(t), MixerParams::Fm(g)) => {
                let mut g_h = Tensor2::zeros(cfg.layer.m, cfg.layer.d_memory);
                let counters = counters.as_deref_mut().map(|c| c.at(i, 0));
                backward_sequence(p, &cfg.layer, t, &g_u, &mut g_h, g, counters)?
            }
            (MixerParams::Attention(p), MixerTape::Attention(t), MixerParams::Attention(g)) => {
                attention_backward(p, cfg.n_heads, t, &g_u, g)?
            }
            _ => {
                return Err(FmError::InvalidArgument(
                    "tape and parameters disagree on the mixer".into(),
                ))
            }
        };
        g_x = g_u;
        norm_backward(&g_n1g, &bt.n1, &bt.r1, &bp.norm1, &mut gb.norm1, &mut g_x);
    }

    for (t, &tok) in tape.inputs.iter().enumerate() {
        let row = tok as usize;
        let d = grads.embed.cols();
        axpy_wide(1.0, g_x.row(t), &mut grads.embed.data_mut()[row * d..(row + 1) * d]);
        if let Some(pos) = grads.pos.as_mut() {
            axpy_wide(1.0, g_x.row(t), pos.row_mut(t));
        }
    }
    Ok(())
}

/// Fingerprint of every top-k support in the tape.
pub fn route_fingerprint<S>(tape: &ModelTape<S>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for b in &tape.blocks {
        if let MixerTape::Fm(t) = &b.mixer {
            for st in &t.steps {
                st.selected.hash(&mut h);
            }
        }
    }
    h.finish()
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    /// Mean over sequences of each sequence's mean nll.
    pub loss: f64,
    pub grads: ModelParams<f64>,
    pub counters: TouchCounters,
}

/// Loss and gradients over a batch. Sequences run independently (in parallel
/// under `Execution::Parallel`) and are reduced in a canonical order that does
/// not depend on their position in `batch`.
pub fn batch_loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    batch: &[Vec<u32>],
    mode: ForwardMode,
    exec: Execution,
) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(FmError::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let opts = ForwardOptions::new(mode, true);
    let per_seq = par::map(
        exec,
        batch,
        |tokens| -> Result<(f64, ModelParams<f64>, TouchCounters)> {
            let mut counters = TouchCounters::new();
            let (loss, tape) = lm_loss(params, cfg, tokens, &opts, Some(&mut counters))?;
            let mut g = ModelParams::zeros(cfg);
            model_backward(params, cfg, &tape.expect("tape requested"), scale, &mut g, None)?;
            Ok((loss, g, counters))
        },
    );
    let per_seq: Vec<_> = per_seq.into_iter().collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        per_seq[a]
            .0
            .total_cmp(&per_seq[b].0)
            .then_with(|| batch[a].cmp(&batch[b]))
    });

    let mut loss = 0.0;
    let mut grads = ModelParams::zeros(cfg);
    let mut counters = TouchCounters::new();
    for i in order {
        let (l, g, c) = &per_seq[i];
        loss += l;
        grads.add_scaled(g, 1.0);
        counters.merge(c);
    }
    Ok(BatchGrads {
        loss: loss * scale,
        grads,
        counters,
    })
}

/// Fixed settings for the model-level gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckPreset {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub fd: FdOptions,
}

impl GradCheckPreset {
    /// Two FM layers, `m = 4`, `k = 2`, `d = 8`, eight tokens.
    ///
    /// The numeric side is evaluated in double-double, so round-off is far
    /// below any gradient entry and the step can be small enough that
    /// truncation stays under 1e-9 relative.
    pub fn tiny(mixer: MixerKind) -> Self {
        let mut model = ModelConfig::new(2, LayerConfig::dense(4, 8, 8).with_k(2), mixer, 8);
        model.n_heads = 2;
        model.init_std = 0.5;
        Self {
            model,
            seq_len: 8,
            fd: FdOptions {
                step: 1e-7,
                coords_per_tensor: 64,
                seed: 0,
            },
        }
    }
}

/// Runs the preset in double precision: random gates, random tokens, analytic
/// gradient against central differences on the same loss.
pub fn gradcheck_model(preset: &GradCheckPreset, seed: u64) -> Result<GradCheckReport> {
    let cfg = preset.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng)?;
    for b in &mut params.blocks {
        if let MixerParams::Fm(p) = &mut b.mixer {
            for w in p.w_eta.iter_mut().chain(p.w_mu.iter_mut()) {
                *w = rng.random_range(-1.0..1.0);
            }
        }
        for g in b.norm1.iter_mut().chain(b.norm2.iter_mut()) {
            *g = rng.random_range(0.5..1.5);
        }
    }
    let tokens: Vec<u32> = (0..preset.seq_len + 1)
        .map(|_| rng.random_range(0..cfg.vocab as u32))
        .collect();
    let opts = ForwardOptions::new(ForwardMode::Scan, true);

    let (_, tape) = lm_loss(&params, &cfg, &tokens, &opts, None)?;
    let mut grads = ModelParams::zeros(&cfg);
    model_backward(&params, &cfg, &tape.expect("tape requested"), 1.0, &mut grads, None)?;

    // The numeric side runs in double-double so round-off in the loss stays
    // far below the smallest gradient entries being checked.
    let loss = |p: &ModelParams<f64>| -> Result<Probe<Dd>> {
        let (loss, tape) = lm_loss_native(&p.cast::<Dd>(&cfg), &cfg, &tokens, &opts)?;
        Ok(Probe {
            loss,
            route: route_fingerprint(&tape.expect("tape requested")),
        })
    };
    let fd = FdOptions {
        seed: seed ^ 0x5eed,
        ..preset.fd
    };
    finite_diff_check(&mut params, &grads, loss, &fd)
}
