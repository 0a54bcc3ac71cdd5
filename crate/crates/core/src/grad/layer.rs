//! Reverse pass of the Factorization Memory layer.
//!
//! The top-k support is a constant of the forward pass. On that support
//! `ᾱ` is a softmax of the selected logits, so gradients never reach the
//! logits (or any state row) outside the support.

use crate::error::{FmError, Result};
use crate::flops::TouchCounters;
use crate::layer::{LayerConfig, LayerParams, LayerTape, StepIntermediates};
use crate::tensor::{accumulate_outer, axpy, axpy_wide, dot, matmul_nn, rms_norm_backward, Scalar, Tensor2};

/// Per-token gradients that feed the input-side projections.
struct TokenGrads<S> {
    g_x_bar: Vec<S>,
    /// Gradient w.r.t. the raw affinity logits (already divided by τ).
    g_logits: Vec<S>,
    g_eta_pre: S,
    g_mu_pre: S,
}

/// Reverse of the recurrence, the rms norm and the gates for one token.
/// `g_merged` is the gradient at the vector fed to `W_o`; `g_h` holds the
/// gradient w.r.t. the state after this token and is turned into the gradient
/// w.r.t. the state before it.
fn token_backward<S: Scalar>(
    cfg: &LayerConfig,
    st: &StepIntermediates<S>,
    g_merged: &[S],
    g_h: &mut Tensor2<S>,
) -> TokenGrads<S> {
    let d = cfg.d_memory;
    let mut g_x_bar = vec![S::zero(); d];
    let mut g_alpha_bar = vec![S::zero(); cfg.m];
    let mut g_eta = S::zero();
    let mut g_mu = S::zero();
    let mut g_n = vec![S::zero(); d];
    let mut g_new = vec![S::zero(); d];

    for (slot, &i) in st.selected.iter().enumerate() {
        let n = st.normed_rows.row(slot);
        let g_phi = dot(g_merged, n);
        let phi = st.phi[i];
        for (gn, &gm) in g_n.iter_mut().zip(g_merged) {
            *gn = phi * gm;
        }
        g_new.copy_from_slice(g_h.row(i));
        rms_norm_backward(n, st.row_rms[slot], &g_n, &mut g_new);

        let prev = st.prev_rows.row(slot);
        let mut g_theta = S::zero();
        for ((&g, &xb), &p) in g_new.iter().zip(&st.x_bar).zip(prev) {
            g_theta += g * (xb - p);
        }
        let theta = st.theta[i];
        axpy(theta, &g_new, &mut g_x_bar);
        let keep = S::one() - theta;
        for (gh, &g) in g_h.row_mut(i).iter_mut().zip(&g_new) {
            *gh = keep * g;
        }

        g_alpha_bar[i] = st.eta * g_theta + st.mu * g_phi;
        g_eta += g_theta * st.alpha_bar[i];
        g_mu += g_phi * st.alpha_bar[i];
    }

    let mut proj = S::zero();
    for &i in &st.selected {
        proj += g_alpha_bar[i] * st.alpha_bar[i];
    }
    let inv_tau = S::one() / S::of(cfg.tau);
    let mut g_logits = vec![S::zero(); cfg.m];
    for &i in &st.selected {
        g_logits[i] = st.alpha_bar[i] * (g_alpha_bar[i] - proj) * inv_tau;
    }

    TokenGrads {
        g_x_bar,
        g_logits,
        g_eta_pre: g_eta * st.eta * (S::one() - st.eta),
        g_mu_pre: g_mu * st.mu * (S::one() - st.mu),
    }
}

fn backward_tokens<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    xs: &Tensor2<S>,
    steps: &[StepIntermediates<S>],
    g_ys: &Tensor2<S>,
    g_h: &mut Tensor2<S>,
    grads: &mut LayerParams<f64>,
    mut counters: Option<&mut TouchCounters>,
) -> Result<Tensor2<S>> {
    let t_len = steps.len();
    if xs.rows() != t_len || g_ys.rows() != t_len {
        return Err(FmError::shape("layer backward", t_len, (xs.rows(), g_ys.rows())));
    }
    if g_ys.cols() != cfg.d_model {
        return Err(FmError::shape("layer backward g_y", cfg.d_model, g_ys.cols()));
    }
    if g_h.shape() != (cfg.m, cfg.d_memory) {
        return Err(FmError::shape("layer backward g_h", (cfg.m, cfg.d_memory), g_h.shape()));
    }
    params.check(cfg)?;
    grads.check(cfg)?;

    // output projection
    let merged = Tensor2::from_vec(
        t_len,
        cfg.d_memory,
        steps.iter().flat_map(|s| s.merged.iter().copied()).collect(),
    )?;
    let g_merged = matmul_nn(g_ys, &params.w_out)?;
    accumulate_outer(grads.w_out.data_mut(), g_ys, &merged);

    // recurrence, newest token first
    let mut g_x_bar = Tensor2::zeros(t_len, cfg.d_memory);
    let mut g_logits = Tensor2::zeros(t_len, cfg.m);
    let mut g_eta_pre = vec![S::zero(); t_len];
    let mut g_mu_pre = vec![S::zero(); t_len];
    let base = counters.as_ref().map_or(0, |c| c.cursor);
    for t in (0..t_len).rev() {
        let tg = token_backward(cfg, &steps[t], g_merged.row(t), g_h);
        if let Some(c) = counters.as_deref_mut() {
            c.cursor = base + t;
            c.touch_rows(&steps[t].selected);
        }
        g_x_bar.row_mut(t).copy_from_slice(&tg.g_x_bar);
        g_logits.row_mut(t).copy_from_slice(&tg.g_logits);
        g_eta_pre[t] = tg.g_eta_pre;
        g_mu_pre[t] = tg.g_mu_pre;
    }

    // input-side projections
    accumulate_outer(grads.w_in.data_mut(), &g_x_bar, xs);
    accumulate_outer(grads.w_alpha.data_mut(), &g_logits, xs);
    for t in 0..t_len {
        axpy_wide(g_eta_pre[t].as_f64(), xs.row(t), &mut grads.w_eta);
        axpy_wide(g_mu_pre[t].as_f64(), xs.row(t), &mut grads.w_mu);
    }
    let mut g_xs = matmul_nn(&g_x_bar, &params.w_in)?;
    let from_logits = matmul_nn(&g_logits, &params.w_alpha)?;
    for t in 0..t_len {
        let row = g_xs.row_mut(t);
        for (g, &v) in row.iter_mut().zip(from_logits.row(t)) {
            *g += v;
        }
        axpy(g_eta_pre[t], &params.w_eta, row);
        axpy(g_mu_pre[t], &params.w_mu, row);
    }
    Ok(g_xs)
}

/// Reverse of a single `step`. `g_h` goes in as the gradient w.r.t. the state
/// after the step and comes out as the gradient w.r.t. the state before it.
/// Parameter gradients are added into `grads`; the input gradient is returned.
pub fn backward_step<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    x: &[S],
    inter: &StepIntermediates<S>,
    g_h: &mut Tensor2<S>,
    g_y: &[S],
    grads: &mut LayerParams<f64>,
) -> Result<Vec<S>> {
    let xs = Tensor2::from_vec(1, x.len(), x.to_vec())?;
    let g_ys = Tensor2::from_vec(1, g_y.len(), g_y.to_vec())?;
    let g_xs = backward_tokens(params, cfg, &xs, std::slice::from_ref(inter), &g_ys, g_h, grads, None)?;
    Ok(g_xs.into_vec())
}

/// Reverse pass over a whole taped sequence. `g_h` is the gradient w.r.t. the
/// final state (zero when the state is discarded) and holds the gradient
/// w.r.t. the initial state afterwards.
pub fn backward_sequence<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    tape: &LayerTape<S>,
    g_ys: &Tensor2<S>,
    g_h: &mut Tensor2<S>,
    grads: &mut LayerParams<f64>,
    counters: Option<&mut TouchCounters>,
) -> Result<Tensor2<S>> {
    if tape.is_empty() {
        return Err(FmError::InvalidArgument("backward over an empty tape".into()));
    }
    backward_tokens(params, cfg, &tape.xs, &tape.steps, g_ys, g_h, grads, counters)
}
