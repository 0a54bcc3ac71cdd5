use crate::attention::{attention_forward, AttentionTape};
use crate::error::{FmError, Result};
use crate::flops::TouchCounters;
use crate::layer::{forward_sequence, ForwardOptions, LayerTape, MemoryState};
use crate::tensor::{log_sum_exp, matmul_nt, rms_norm_into, silu, Scalar, Tensor2, RMS_EPS};

use super::{check_tokens, BlockParams, MixerParams, ModelConfig, ModelParams};

#[derive(Debug, Clone)]
pub enum MixerTape<S> {
    Fm(LayerTape<S>),
    Attention(AttentionTape<S>),
}

/// Everything one block's backward pass needs.
#[derive(Debug, Clone)]
pub struct BlockTape<S> {
    pub x: Tensor2<S>,
    /// Normalised rows before the gain, and their rms.
    pub n1: Tensor2<S>,
    pub r1: Vec<S>,
    pub mixer: MixerTape<S>,
    pub u: Tensor2<S>,
    pub n2: Tensor2<S>,
    pub r2: Vec<S>,
    /// MLP pre-activation and activation.
    pub a: Tensor2<S>,
    pub s: Tensor2<S>,
}

#[derive(Debug, Clone)]
pub struct ModelTape<S> {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub blocks: Vec<BlockTape<S>>,
    pub nf: Tensor2<S>,
    pub rf: Vec<S>,
    /// Gain-scaled final hidden states fed to the head.
    pub hidden: Tensor2<S>,
    /// Softmax over the vocabulary, one row per position.
    pub probs: Tensor2<S>,
}

/// Row-wise `gain ⊙ v / rms(v)`. Returns `(out, normed, rms)`.
pub(crate) fn norm_rows<S: Scalar>(x: &Tensor2<S>, gain: &[S]) -> (Tensor2<S>, Tensor2<S>, Vec<S>) {
    let (t, d) = x.shape();
    let mut normed = Tensor2::zeros(t, d);
    let mut out = Tensor2::zeros(t, d);
    let mut r = Vec::with_capacity(t);
    let eps = S::of(RMS_EPS);
    for i in 0..t {
        r.push(rms_norm_into(x.row(i), eps, normed.row_mut(i)));
        for ((o, &n), &g) in out.row_mut(i).iter_mut().zip(normed.row(i)).zip(gain) {
            *o = g * n;
        }
    }
    (out, normed, r)
}

pub(crate) fn norm_vec<S: Scalar>(x: &[S], gain: &[S]) -> Vec<S> {
    let mut n = vec![S::zero(); x.len()];
    rms_norm_into(x, S::of(RMS_EPS), &mut n);
    for (v, &g) in n.iter_mut().zip(gain) {
        *v *= g;
    }
    n
}

/// Prefixes errors raised inside a block with the block's name.
pub(crate) fn in_block(i: usize, e: FmError) -> FmError {
    match e {
        FmError::NonFinite { what } => FmError::NonFinite {
            what: format!("block {i} {what}"),
        },
        other => other,
    }
}

pub(crate) fn embed_rows<S: Scalar>(params: &ModelParams<S>, cfg: &ModelConfig, inputs: &[u32]) -> Result<Tensor2<S>> {
    check_tokens(cfg, inputs)?;
    let d = cfg.d_model();
    let mut x = Tensor2::zeros(inputs.len(), d);
    for (t, &tok) in inputs.iter().enumerate() {
        x.row_mut(t).copy_from_slice(params.embed.row(tok as usize));
    }
    if let Some(pos) = &params.pos {
        if inputs.len() > pos.rows() {
            return Err(FmError::InvalidArgument(format!(
                "sequence of {} tokens exceeds the learned position table ({} positions)",
                inputs.len(),
                pos.rows()
            )));
        }
        for t in 0..inputs.len() {
            for (a, &b) in x.row_mut(t).iter_mut().zip(pos.row(t)) {
                *a += b;
            }
        }
    }
    Ok(x)
}

fn block_forward<S: Scalar>(
    i: usize,
    block: &BlockParams<S>,
    cfg: &ModelConfig,
    x: Tensor2<S>,
    opts: &ForwardOptions,
    counters: Option<&mut TouchCounters>,
) -> Result<(Tensor2<S>, Option<BlockTape<S>>)> {
    let (n1g, n1, r1) = norm_rows(&x, &block.norm1);
    let (mix, mixer_tape) = match &block.mixer {
        MixerParams::Fm(p) => {
            let counters = counters.map(|c| c.at(i, 0));
            let out = forward_sequence(p, &cfg.layer, MemoryState::zeros(&cfg.layer), &n1g, opts, counters)?;
            (out.ys, out.tape.map(MixerTape::Fm))
        }
        MixerParams::Attention(p) => {
            let (ys, tape) = attention_forward(p, cfg.n_heads, &n1g, opts.keep_tape)?;
            (ys, tape.map(MixerTape::Attention))
        }
    };
    let mut u = x.clone();
    for (a, &b) in u.data_mut().iter_mut().zip(mix.data()) {
        *a += b;
    }
    let (n2g, n2, r2) = norm_rows(&u, &block.norm2);
    let a = matmul_nt(&n2g, &block.mlp_up)?;
    let mut s = a.clone();
    for v in s.data_mut() {
        *v = silu(*v);
    }
    let m = matmul_nt(&s, &block.mlp_down)?;
    let mut out = u.clone();
    for (o, &b) in out.data_mut().iter_mut().zip(m.data()) {
        *o += b;
    }
    if !out.is_finite() {
        return Err(FmError::non_finite("output"));
    }
    let tape = opts.keep_tape.then(|| BlockTape {
        x,
        n1,
        r1,
        mixer: mixer_tape.expect("tape requested"),
        u,
        n2,
        r2,
        a,
        s,
    });
    Ok((out, tape))
}

pub(crate) struct Hidden<S> {
    pub blocks: Vec<BlockTape<S>>,
    pub nf: Tensor2<S>,
    pub rf: Vec<S>,
    pub hidden: Tensor2<S>,
}

pub(crate) fn run_blocks<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    inputs: &[u32],
    opts: &ForwardOptions,
    mut counters: Option<&mut TouchCounters>,
) -> Result<Hidden<S>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(FmError::InvalidArgument("empty token sequence".into()));
    }
    let mut x = embed_rows(params, cfg, inputs)?;
    let mut tapes = Vec::new();
    for (i, block) in params.blocks.iter().enumerate() {
        let (out, tape) = block_forward(i, block, cfg, x, opts, counters.as_deref_mut()).map_err(|e| in_block(i, e))?;
        x = out;
        tapes.extend(tape);
    }
    let (hidden, nf, rf) = norm_rows(&x, &params.final_norm);
    Ok(Hidden {
        blocks: tapes,
        nf,
        rf,
        hidden,
    })
}

/// Final hidden states (after the last norm and gain), one row per input token.
pub fn forward_hidden<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    inputs: &[u32],
    opts: &ForwardOptions,
) -> Result<Tensor2<S>> {
    let opts = ForwardOptions {
        keep_tape: false,
        ..*opts
    };
    Ok(run_blocks(params, cfg, inputs, &opts, None)?.hidden)
}

fn split(tokens: &[u32]) -> Result<(&[u32], &[u32])> {
    if tokens.len() < 2 {
        return Err(FmError::InvalidArgument(format!(
            "language-model loss needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    Ok((&tokens[..tokens.len() - 1], &tokens[1..]))
}

fn head<S: Scalar>(params: &ModelParams<S>, hidden: &Tensor2<S>) -> Result<Tensor2<S>> {
    let logits = matmul_nt(hidden, &params.embed)?;
    if !logits.is_finite() {
        return Err(FmError::non_finite("head logits"));
    }
    Ok(logits)
}

/// Next-token negative log-likelihood (nats) at every position.
pub fn token_nll<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tokens: &[u32],
    opts: &ForwardOptions,
) -> Result<Vec<f64>> {
    let (inputs, targets) = split(tokens)?;
    check_tokens(cfg, targets)?;
    let hidden = forward_hidden(params, cfg, inputs, opts)?;
    let logits = head(params, &hidden)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            (log_sum_exp(row) - row[y as usize]).as_f64()
        })
        .collect())
}

/// Mean next-token cross-entropy, plus the tape when `opts.keep_tape` is set.
/// The mean is accumulated in `f64` whatever `S` is.
pub fn lm_loss<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tokens: &[u32],
    opts: &ForwardOptions,
    counters: Option<&mut TouchCounters>,
) -> Result<(f64, Option<ModelTape<S>>)> {
    let (nll, tape) = nll_terms(params, cfg, tokens, opts, counters)?;
    let loss = nll.iter().map(|v| v.as_f64()).sum::<f64>() / nll.len() as f64;
    if !loss.is_finite() {
        return Err(FmError::non_finite("loss"));
    }
    Ok((loss, tape))
}

/// `lm_loss` with the mean kept in `S`, for evaluations that need more than
/// `f64` resolution.
pub fn lm_loss_native<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tokens: &[u32],
    opts: &ForwardOptions,
) -> Result<(S, Option<ModelTape<S>>)> {
    let (nll, tape) = nll_terms(params, cfg, tokens, opts, None)?;
    let n = S::of(nll.len() as f64);
    Ok((nll.into_iter().fold(S::zero(), |a, b| a + b) / n, tape))
}

fn nll_terms<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    tokens: &[u32],
    opts: &ForwardOptions,
    counters: Option<&mut TouchCounters>,
) -> Result<(Vec<S>, Option<ModelTape<S>>)> {
    let (inputs, targets) = split(tokens)?;
    check_tokens(cfg, targets)?;
    let h = run_blocks(params, cfg, inputs, opts, counters)?;
    let logits = head(params, &h.hidden)?;
    let mut nll = Vec::with_capacity(targets.len());
    let mut probs = if opts.keep_tape {
        Tensor2::zeros(logits.rows(), logits.cols())
    } else {
        Tensor2::zeros(0, 0)
    };
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        let lse = log_sum_exp(row);
        nll.push(lse - row[y as usize]);
        if opts.keep_tape {
            for (p, &z) in probs.row_mut(t).iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
    }
    let tape = opts.keep_tape.then(|| ModelTape {
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        blocks: h.blocks,
        nf: h.nf,
        rf: h.rf,
        hidden: h.hidden,
        probs,
    });
    Ok((nll, tape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSoFar {
    pub cutoffs: Vec<usize>,
    /// Mean nll over the first `cutoff` predicted tokens.
    pub loss: Vec<f64>,
}

/// Loss-so-far at each cutoff from a single forward pass. Returns `None` (and
/// logs a warning) when the document is too short for the largest cutoff.
pub fn loss_so_far<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    doc: &[u32],
    cutoffs: &[usize],
    opts: &ForwardOptions,
) -> Result<Option<LossSoFar>> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(FmError::InvalidArgument(
            "cutoffs must be non-empty and positive".into(),
        ));
    }
    let max = *cutoffs.iter().max().expect("non-empty");
    if doc.len() < max + 1 {
        log::warn!("skipping document of {} tokens, shorter than cutoff {max}", doc.len());
        return Ok(None);
    }
    let nll = token_nll(params, cfg, &doc[..max + 1], opts)?;
    let mut prefix = Vec::with_capacity(nll.len() + 1);
    prefix.push(0.0);
    for v in &nll {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    Ok(Some(LossSoFar {
        cutoffs: cutoffs.to_vec(),
        loss: cutoffs.iter().map(|&c| prefix[c] / c as f64).collect(),
    }))
}
