//! The Factorization Memory layer.
//!
//! Per token `x` the layer routes the input over `m` memory rows with a
//! temperature softmax, keeps the `k` best rows, and renormalises the
//! affinities on that support (`ᾱ`). Two scalar sigmoid gates, the update rate
//! `η` and the merge rate `μ`, scale `ᾱ` into write weights `θ = η ᾱ` and read
//! weights `φ = μ ᾱ`. Each selected row is moved towards the projected input,
//! `h[i] = (1 - θ_i) h[i] + θ_i W_i x`, and the output is
//! `W_o Σ_i φ_i rms_norm(h[i])` over the same rows. With `k = m` this is the
//! dense layer.
//!
//! Rows outside the top-k are neither read nor written. The sequence forward
//! has two execution modes that compute the same function: a token-by-token
//! loop and a scan over the per-token affine maps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};
use crate::flops::TouchCounters;
use crate::par::{self, Execution};
use crate::scan::{scan_inclusive, scan_sparse, ScanElement, ScanPlan, SparseStep};
use crate::tensor::{
    dot, matmul_nt, matvec, matvec_into, rms_norm_into, rows_dot, sigmoid, softmax_into, Scalar, Tensor2, RMS_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Number of memory rows.
    pub m: usize,
    /// Rows selected per token; `k == m` is the dense layer.
    pub k: usize,
    /// Affinity temperature.
    pub tau: f64,
    pub d_model: usize,
    pub d_memory: usize,
}

impl LayerConfig {
    pub fn dense(m: usize, d_model: usize, d_memory: usize) -> Self {
        Self {
            m,
            k: m,
            tau: 1.0,
            d_model,
            d_memory,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn is_dense(&self) -> bool {
        self.k == self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d_model == 0 || self.d_memory == 0 {
            return Err(FmError::InvalidArgument(format!("layer dims must be >= 1: {self:?}")));
        }
        if self.k == 0 || self.k > self.m {
            return Err(FmError::InvalidArgument(format!(
                "need 1 <= k <= m, got k={} m={}",
                self.k, self.m
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(FmError::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Trainable tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    /// `m × d_model`
    pub w_alpha: Tensor2<S>,
    pub w_eta: Vec<S>,
    pub w_mu: Vec<S>,
    /// `d_memory × d_model`
    pub w_in: Tensor2<S>,
    /// `d_model × d_memory`
    pub w_out: Tensor2<S>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn zeros(cfg: &LayerConfig) -> Self {
        Self {
            w_alpha: Tensor2::zeros(cfg.m, cfg.d_model),
            w_eta: vec![S::zero(); cfg.d_model],
            w_mu: vec![S::zero(); cfg.d_model],
            w_in: Tensor2::zeros(cfg.d_memory, cfg.d_model),
            w_out: Tensor2::zeros(cfg.d_model, cfg.d_memory),
        }
    }

    /// Projections drawn from `N(0, std²)`; the gate vectors start at zero.
    pub fn init<R: Rng + ?Sized>(cfg: &LayerConfig, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut draw = |r, c| Tensor2::from_fn(r, c, |_, _| S::of(normal.sample(rng)));
        let w_alpha = draw(cfg.m, cfg.d_model);
        let w_in = draw(cfg.d_memory, cfg.d_model);
        let w_out = draw(cfg.d_model, cfg.d_memory);
        Self {
            w_alpha,
            w_eta: vec![S::zero(); cfg.d_model],
            w_mu: vec![S::zero(); cfg.d_model],
            w_in,
            w_out,
        }
    }

    pub fn check(&self, cfg: &LayerConfig) -> Result<()> {
        let want = [
            ("w_alpha", (cfg.m, cfg.d_model), self.w_alpha.shape()),
            ("w_eta", (cfg.d_model, 1), (self.w_eta.len(), 1)),
            ("w_mu", (cfg.d_model, 1), (self.w_mu.len(), 1)),
            ("w_in", (cfg.d_memory, cfg.d_model), self.w_in.shape()),
            ("w_out", (cfg.d_model, cfg.d_memory), self.w_out.shape()),
        ];
        for (name, expected, got) in want {
            if expected != got {
                return Err(FmError::Shape {
                    op: "LayerParams",
                    lhs: format!("{name} expected {expected:?}"),
                    rhs: format!("{got:?}"),
                });
            }
        }
        Ok(())
    }

    /// Named views in a fixed order: `(name, dims, data)`.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[S])> {
        vec![
            (
                "w_alpha",
                vec![self.w_alpha.rows(), self.w_alpha.cols()],
                self.w_alpha.data(),
            ),
            ("w_eta", vec![self.w_eta.len()], &self.w_eta),
            ("w_mu", vec![self.w_mu.len()], &self.w_mu),
            ("w_in", vec![self.w_in.rows(), self.w_in.cols()], self.w_in.data()),
            ("w_out", vec![self.w_out.rows(), self.w_out.cols()], self.w_out.data()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [S])> {
        vec![
            ("w_alpha", self.w_alpha.data_mut()),
            ("w_eta", &mut self.w_eta),
            ("w_mu", &mut self.w_mu),
            ("w_in", self.w_in.data_mut()),
            ("w_out", self.w_out.data_mut()),
        ]
    }
}

/// The `m × d_memory` recurrent state of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<S> {
    pub h: Tensor2<S>,
}

impl<S: Scalar> MemoryState<S> {
    pub fn zeros(cfg: &LayerConfig) -> Self {
        Self {
            h: Tensor2::zeros(cfg.m, cfg.d_memory),
        }
    }

    pub fn scalars(&self) -> usize {
        self.h.data().len()
    }

    pub fn bytes(&self) -> usize {
        self.scalars() * std::mem::size_of::<S>()
    }
}

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing<S> {
    pub alpha: Vec<S>,
    /// Selected rows in ascending order.
    pub selected: Vec<usize>,
    /// Renormalised affinities, zero off the support.
    pub alpha_bar: Vec<S>,
    pub eta: S,
    pub mu: S,
}

/// Everything the backward pass needs about one token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepIntermediates<S> {
    pub alpha: Vec<S>,
    pub selected: Vec<usize>,
    pub alpha_bar: Vec<S>,
    pub eta: S,
    pub mu: S,
    /// `η ᾱ`, zero off the support.
    pub theta: Vec<S>,
    /// `μ ᾱ`, zero off the support.
    pub phi: Vec<S>,
    pub x_bar: Vec<S>,
    /// Selected rows before the update, `k × d_memory` in `selected` order.
    pub prev_rows: Tensor2<S>,
    /// Selected rows after the update.
    pub new_rows: Tensor2<S>,
    /// `rms_norm_row` of `new_rows`.
    pub normed_rows: Tensor2<S>,
    /// The rms each new row was divided by.
    pub row_rms: Vec<S>,
    /// `Σ φ_i normed_i`, the vector fed to `W_o`.
    pub merged: Vec<S>,
}

impl<S: Scalar> StepIntermediates<S> {
    /// The 0/1 top-k mask.
    pub fn gamma(&self) -> Vec<S> {
        let mut g = vec![S::zero(); self.alpha.len()];
        for &i in &self.selected {
            g[i] = S::one();
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<S> {
    pub y: Vec<S>,
    pub inter: StepIntermediates<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    Sequential,
    #[default]
    Scan,
}

impl std::str::FromStr for ForwardMode {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ForwardMode::Sequential),
            "scan" => Ok(ForwardMode::Scan),
            other => Err(FmError::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    pub mode: ForwardMode,
    pub keep_tape: bool,
    pub plan: ScanPlan,
}

impl ForwardOptions {
    pub fn new(mode: ForwardMode, keep_tape: bool) -> Self {
        Self {
            mode,
            keep_tape,
            plan: ScanPlan::default(),
        }
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.plan.exec = exec;
        self
    }
}

/// Cached forward of one layer over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape<S> {
    pub xs: Tensor2<S>,
    pub steps: Vec<StepIntermediates<S>>,
}

impl<S: Scalar> LayerTape<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput<S> {
    /// `T × d_model`
    pub ys: Tensor2<S>,
    pub state: MemoryState<S>,
    pub tape: Option<LayerTape<S>>,
}

fn check_input<S: Scalar>(cfg: &LayerConfig, x: &[S]) -> Result<()> {
    if x.len() != cfg.d_model {
        return Err(FmError::shape("layer input", cfg.d_model, x.len()));
    }
    Ok(())
}

fn ensure_finite<S: Scalar>(what: &str, v: &[S]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FmError::non_finite(what))
    }
}

/// `softmax(W_α x / τ)`
pub fn affinity<S: Scalar>(params: &LayerParams<S>, cfg: &LayerConfig, x: &[S]) -> Result<Vec<S>> {
    cfg.validate()?;
    params.check(cfg)?;
    check_input(cfg, x)?;
    let logits = matvec(&params.w_alpha, x)?;
    let mut alpha = vec![S::zero(); cfg.m];
    softmax_into(&logits, S::of(cfg.tau), &mut alpha);
    ensure_finite("alpha", &alpha)?;
    Ok(alpha)
}

/// Indices of the `k` largest entries, ascending. Ties go to the lower index.
pub fn topk_indices<S: Scalar>(alpha: &[S], k: usize) -> Result<Vec<usize>> {
    let m = alpha.len();
    if k == 0 || k > m {
        return Err(FmError::InvalidArgument(format!(
            "top-k needs 1 <= k <= m, got k={k} m={m}"
        )));
    }
    if alpha.iter().any(|a| a.is_nan()) {
        return Err(FmError::non_finite("alpha"));
    }
    if k == m {
        return Ok((0..m).collect());
    }
    let mut idx: Vec<usize> = (0..m).collect();
    let order = |a: &usize, b: &usize| {
        alpha[*b]
            .partial_cmp(&alpha[*a])
            .expect("NaN rejected above")
            .then(a.cmp(b))
    };
    idx.select_nth_unstable_by(k - 1, order);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// The 0/1 top-k mask.
pub fn topk_mask<S: Scalar>(alpha: &[S], k: usize) -> Result<Vec<S>> {
    let mut mask = vec![S::zero(); alpha.len()];
    for i in topk_indices(alpha, k)? {
        mask[i] = S::one();
    }
    Ok(mask)
}

/// `(γ ⊙ α) / (γ·α)`. An all-ones mask returns `α` untouched.
pub fn renormalize<S: Scalar>(alpha: &[S], gamma: &[S]) -> Result<Vec<S>> {
    if alpha.len() != gamma.len() {
        return Err(FmError::shape("renormalize", alpha.len(), gamma.len()));
    }
    let selected: Vec<usize> = gamma
        .iter()
        .enumerate()
        .filter(|(_, &g)| g != S::zero())
        .map(|(i, _)| i)
        .collect();
    renormalize_selected(alpha, &selected)
}

pub(crate) fn renormalize_selected<S: Scalar>(alpha: &[S], selected: &[usize]) -> Result<Vec<S>> {
    if selected.len() == alpha.len() {
        return Ok(alpha.to_vec());
    }
    let mut mass = S::zero();
    for &i in selected {
        mass += alpha[i];
    }
    if !(mass > S::zero()) {
        return Err(FmError::InvalidArgument(
            "renormalize: selected affinity mass is zero".into(),
        ));
    }
    let mut out = vec![S::zero(); alpha.len()];
    for &i in selected {
        out[i] = alpha[i] / mass;
    }
    Ok(out)
}

/// `ᾱ` straight from the selected logits. Equal to renormalizing `α` over the
/// support, but unselected logits cannot leak in through the normalizer, so
/// `ᾱ` (and the loss) is bitwise independent of them.
fn selected_softmax<S: Scalar>(logits: &[S], tau: f64, alpha: &[S], selected: &[usize]) -> Vec<S> {
    if selected.len() == alpha.len() {
        return alpha.to_vec();
    }
    let z: Vec<S> = selected.iter().map(|&i| logits[i]).collect();
    let mut p = vec![S::zero(); z.len()];
    softmax_into(&z, S::of(tau), &mut p);
    let mut out = vec![S::zero(); alpha.len()];
    for (&i, v) in selected.iter().zip(p) {
        out[i] = v;
    }
    out
}

/// Routing from the raw projections of one token.
pub(crate) fn route<S: Scalar>(cfg: &LayerConfig, logits: &[S], eta_pre: S, mu_pre: S) -> Result<Routing<S>> {
    let mut alpha = vec![S::zero(); cfg.m];
    softmax_into(logits, S::of(cfg.tau), &mut alpha);
    ensure_finite("alpha", &alpha)?;
    let selected = topk_indices(&alpha, cfg.k)?;
    let alpha_bar = selected_softmax(logits, cfg.tau, &alpha, &selected);
    ensure_finite("alpha", &alpha_bar)?;
    let eta = sigmoid(eta_pre);
    let mu = sigmoid(mu_pre);
    if !eta.is_finite() {
        return Err(FmError::non_finite("eta"));
    }
    if !mu.is_finite() {
        return Err(FmError::non_finite("mu"));
    }
    Ok(Routing {
        alpha,
        selected,
        alpha_bar,
        eta,
        mu,
    })
}

/// Gates, rms norm and merge for one token whose selected rows are known
/// before and after the update.
fn finish_step<S: Scalar>(
    cfg: &LayerConfig,
    routing: Routing<S>,
    x_bar: Vec<S>,
    prev_rows: Tensor2<S>,
    new_rows: Tensor2<S>,
) -> Result<StepIntermediates<S>> {
    let (theta, phi) = gate_weights(cfg, &routing);
    let k = routing.selected.len();
    let eps = S::of(RMS_EPS);
    let mut normed_rows = Tensor2::zeros(k, cfg.d_memory);
    let mut row_rms = vec![S::zero(); k];
    let mut merged = vec![S::zero(); cfg.d_memory];
    for (slot, &i) in routing.selected.iter().enumerate() {
        row_rms[slot] = rms_norm_into(new_rows.row(slot), eps, normed_rows.row_mut(slot));
        let p = phi[i];
        for (mv, &nv) in merged.iter_mut().zip(normed_rows.row(slot)) {
            *mv += p * nv;
        }
    }
    ensure_finite("merged state", &merged)?;
    Ok(StepIntermediates {
        alpha: routing.alpha,
        selected: routing.selected,
        alpha_bar: routing.alpha_bar,
        eta: routing.eta,
        mu: routing.mu,
        theta,
        phi,
        x_bar,
        prev_rows,
        new_rows,
        normed_rows,
        row_rms,
        merged,
    })
}

fn gate_weights<S: Scalar>(cfg: &LayerConfig, routing: &Routing<S>) -> (Vec<S>, Vec<S>) {
    let mut theta = vec![S::zero(); cfg.m];
    let mut phi = vec![S::zero(); cfg.m];
    for &i in &routing.selected {
        theta[i] = routing.eta * routing.alpha_bar[i];
        phi[i] = routing.mu * routing.alpha_bar[i];
    }
    (theta, phi)
}

#[inline]
fn update_row<S: Scalar>(prev: &[S], x_bar: &[S], theta: S, out: &mut [S]) {
    let keep = S::one() - theta;
    for ((o, &p), &xb) in out.iter_mut().zip(prev).zip(x_bar) {
        *o = keep * p + theta * xb;
    }
}

/// One token. Updates the `k` selected rows of `state` in place and returns the
/// output with its intermediates.
pub fn step<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    state: &mut MemoryState<S>,
    x: &[S],
    counters: Option<&mut TouchCounters>,
) -> Result<StepOutput<S>> {
    cfg.validate()?;
    params.check(cfg)?;
    check_input(cfg, x)?;
    if state.h.shape() != (cfg.m, cfg.d_memory) {
        return Err(FmError::shape("memory state", (cfg.m, cfg.d_memory), state.h.shape()));
    }
    step_unchecked(params, cfg, state, x, counters)
}

pub(crate) fn step_unchecked<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    state: &mut MemoryState<S>,
    x: &[S],
    counters: Option<&mut TouchCounters>,
) -> Result<StepOutput<S>> {
    let mut logits = vec![S::zero(); cfg.m];
    matvec_into(&params.w_alpha, x, &mut logits);
    let eta_pre = dot(&params.w_eta, x);
    let mu_pre = dot(&params.w_mu, x);
    let mut x_bar = vec![S::zero(); cfg.d_memory];
    matvec_into(&params.w_in, x, &mut x_bar);
    ensure_finite("x_bar", &x_bar)?;

    let routing = route(cfg, &logits, eta_pre, mu_pre)?;
    let k = routing.selected.len();
    let mut prev_rows = Tensor2::zeros(k, cfg.d_memory);
    let mut new_rows = Tensor2::zeros(k, cfg.d_memory);
    for (slot, &i) in routing.selected.iter().enumerate() {
        let theta = routing.eta * routing.alpha_bar[i];
        let row = state.h.row_mut(i);
        prev_rows.row_mut(slot).copy_from_slice(row);
        update_row(prev_rows.row(slot), &x_bar, theta, new_rows.row_mut(slot));
        row.copy_from_slice(new_rows.row(slot));
    }
    if let Some(c) = counters {
        c.touch_rows(&routing.selected);
    }
    let inter = finish_step(cfg, routing, x_bar, prev_rows, new_rows)?;
    let mut y = vec![S::zero(); cfg.d_model];
    matvec_into(&params.w_out, &inter.merged, &mut y);
    ensure_finite("layer output", &y)?;
    Ok(StepOutput { y, inter })
}

/// The dense formulation, written without any selection: every row is updated
/// with `θ = η α` and merged with `φ = μ α`. Equals `step` when `k = m`.
pub fn step_dense<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    state: &mut MemoryState<S>,
    x: &[S],
) -> Result<Vec<S>> {
    params.check(cfg)?;
    check_input(cfg, x)?;
    let alpha = affinity(params, cfg, x)?;
    let eta = sigmoid(dot(&params.w_eta, x));
    let mu = sigmoid(dot(&params.w_mu, x));
    let x_bar = matvec(&params.w_in, x)?;
    let eps = S::of(RMS_EPS);
    let mut merged = vec![S::zero(); cfg.d_memory];
    let mut normed = vec![S::zero(); cfg.d_memory];
    let mut new_row = vec![S::zero(); cfg.d_memory];
    for (i, &a) in alpha.iter().enumerate() {
        let theta = eta * a;
        update_row(state.h.row(i), &x_bar, theta, &mut new_row);
        state.h.row_mut(i).copy_from_slice(&new_row);
        rms_norm_into(&new_row, eps, &mut normed);
        let phi = mu * a;
        for (mv, &nv) in merged.iter_mut().zip(&normed) {
            *mv += phi * nv;
        }
    }
    matvec(&params.w_out, &merged)
}

/// Runs the layer over `xs` (`T × d_model`) starting from `h0`.
pub fn forward_sequence<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    h0: MemoryState<S>,
    xs: &Tensor2<S>,
    opts: &ForwardOptions,
    counters: Option<&mut TouchCounters>,
) -> Result<SequenceOutput<S>> {
    cfg.validate()?;
    params.check(cfg)?;
    if xs.rows() == 0 {
        return Err(FmError::InvalidArgument(
            "forward_sequence needs at least one token".into(),
        ));
    }
    if xs.cols() != cfg.d_model {
        return Err(FmError::shape("forward_sequence input", cfg.d_model, xs.cols()));
    }
    if h0.h.shape() != (cfg.m, cfg.d_memory) {
        return Err(FmError::shape("memory state", (cfg.m, cfg.d_memory), h0.h.shape()));
    }
    match opts.mode {
        ForwardMode::Sequential => forward_sequential(params, cfg, h0, xs, opts.keep_tape, counters),
        ForwardMode::Scan => forward_scan(params, cfg, h0, xs, opts, counters),
    }
}

fn forward_sequential<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    mut state: MemoryState<S>,
    xs: &Tensor2<S>,
    keep_tape: bool,
    mut counters: Option<&mut TouchCounters>,
) -> Result<SequenceOutput<S>> {
    let t_len = xs.rows();
    let mut ys = Tensor2::zeros(t_len, cfg.d_model);
    let mut steps = Vec::with_capacity(if keep_tape { t_len } else { 0 });
    let base = counters.as_ref().map_or(0, |c| c.cursor);
    for t in 0..t_len {
        let c = counters.as_deref_mut().map(|c| {
            c.cursor = base + t;
            c
        });
        let out = step_unchecked(params, cfg, &mut state, xs.row(t), c)?;
        ys.row_mut(t).copy_from_slice(&out.y);
        if keep_tape {
            steps.push(out.inter);
        }
    }
    let tape = keep_tape.then(|| LayerTape { xs: xs.clone(), steps });
    Ok(SequenceOutput { ys, state, tape })
}

fn forward_scan<S: Scalar>(
    params: &LayerParams<S>,
    cfg: &LayerConfig,
    state: MemoryState<S>,
    xs: &Tensor2<S>,
    opts: &ForwardOptions,
    counters: Option<&mut TouchCounters>,
) -> Result<SequenceOutput<S>> {
    let exec = opts.plan.exec;
    let t_len = xs.rows();
    let d = cfg.d_memory;

    // Everything except the recurrence is a function of x_t alone.
    let logits = matmul_nt(xs, &params.w_alpha)?;
    let eta_pre = rows_dot(xs, &params.w_eta)?;
    let mu_pre = rows_dot(xs, &params.w_mu)?;
    let x_bar = matmul_nt(xs, &params.w_in)?;
    if !x_bar.is_finite() {
        return Err(FmError::non_finite("x_bar"));
    }
    let routings: Vec<Routing<S>> = par::map_range(exec, t_len, |t| route(cfg, logits.row(t), eta_pre[t], mu_pre[t]))
        .into_iter()
        .collect::<Result<_>>()?;

    let h0 = state.h;
    // (prev_rows, new_rows) per token, for the selected rows only.
    let (rows, final_h): (Vec<(Tensor2<S>, Tensor2<S>)>, Tensor2<S>) = if cfg.is_dense() {
        let elems: Vec<ScanElement<S>> = par::map_range(exec, t_len, |t| {
            let r = &routings[t];
            let mut a = Tensor2::zeros(cfg.m, d);
            let mut b = Tensor2::zeros(cfg.m, d);
            for i in 0..cfg.m {
                let theta = r.eta * r.alpha_bar[i];
                a.row_mut(i).iter_mut().for_each(|v| *v = S::one() - theta);
                for (bv, &xb) in b.row_mut(i).iter_mut().zip(x_bar.row(t)) {
                    *bv = theta * xb;
                }
            }
            ScanElement { a, b }
        });
        let mut states = scan_inclusive(&elems, &h0, &opts.plan)?;
        let final_h = states.last().cloned().expect("non-empty");
        let mut prev = h0.clone();
        let mut rows = Vec::with_capacity(t_len);
        for h in states.drain(..) {
            rows.push((std::mem::replace(&mut prev, h.clone()), h));
        }
        (rows, final_h)
    } else {
        let steps: Vec<SparseStep<S>> = par::map_range(exec, t_len, |t| {
            let r = &routings[t];
            let k = r.selected.len();
            let mut decay = Vec::with_capacity(k);
            let mut inject = Tensor2::zeros(k, d);
            for (slot, &i) in r.selected.iter().enumerate() {
                let theta = r.eta * r.alpha_bar[i];
                decay.push(S::one() - theta);
                for (bv, &xb) in inject.row_mut(slot).iter_mut().zip(x_bar.row(t)) {
                    *bv = theta * xb;
                }
            }
            SparseStep {
                rows: r.selected.clone(),
                decay,
                inject,
            }
        });
        let scan = scan_sparse(&steps, &h0, exec)?;
        let rows = par::map_range(exec, t_len, |t| {
            let sel = &routings[t].selected;
            let mut prev = Tensor2::zeros(sel.len(), d);
            let mut new = Tensor2::zeros(sel.len(), d);
            for (slot, &i) in sel.iter().enumerate() {
                prev.row_mut(slot)
                    .copy_from_slice(scan.row_before(t, i).expect("in range"));
                new.row_mut(slot).copy_from_slice(scan.value(t, slot));
            }
            (prev, new)
        });
        (rows, scan.final_state())
    };

    if let Some(c) = counters {
        let base = c.cursor;
        for (t, r) in routings.iter().enumerate() {
            c.cursor = base + t;
            c.touch_rows(&r.selected);
        }
    }

    let inputs: Vec<(usize, Routing<S>, (Tensor2<S>, Tensor2<S>))> = routings
        .into_iter()
        .zip(rows)
        .enumerate()
        .map(|(t, (r, p))| (t, r, p))
        .collect();
    let steps: Vec<StepIntermediates<S>> = par::map_owned(exec, inputs, |(t, routing, (prev, new))| {
        finish_step(cfg, routing, x_bar.row(t).to_vec(), prev, new)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let merged = Tensor2::from_vec(t_len, d, steps.iter().flat_map(|s| s.merged.iter().copied()).collect())?;
    let ys = matmul_nt(&merged, &params.w_out)?;
    if !ys.is_finite() {
        return Err(FmError::non_finite("layer output"));
    }
    let tape = opts.keep_tape.then(|| LayerTape { xs: xs.clone(), steps });
    Ok(SequenceOutput {
        ys,
        state: MemoryState { h: final_h },
        tape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(m: usize, k: usize, d_model: usize, d_memory: usize) -> LayerConfig {
        LayerConfig {
            m,
            k,
            tau: 1.0,
            d_model,
            d_memory,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(4, 0, 3, 3).validate().is_err());
        assert!(cfg(4, 5, 3, 3).validate().is_err());
        assert!(cfg(4, 2, 3, 3).with_tau(0.0).validate().is_err());
        assert!(cfg(4, 4, 3, 3).validate().is_ok());
    }

    #[test]
    fn zero_affinity_weights_give_uniform() {
        let c = cfg(5, 5, 3, 2);
        let p = LayerParams::<f64>::zeros(&c);
        let a = affinity(&p, &c, &[1.0, -2.0, 0.5]).unwrap();
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn affinity_ratio_and_temperature() {
        let c = cfg(2, 2, 1, 1);
        let mut p = LayerParams::<f64>::zeros(&c);
        p.w_alpha = Tensor2::from_rows(&[vec![3.0f64.ln()], vec![0.0]]).unwrap();
        let a = affinity(&p, &c, &[1.0]).unwrap();
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);

        let c = c.with_tau(0.5);
        let mut p = LayerParams::<f32>::zeros(&c);
        p.w_alpha = Tensor2::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let a = affinity(&p, &c, &[1.0]).unwrap();
        let want = [0.880_797_077_977_882_4, 0.119_202_922_022_117_56];
        for (g, w) in a.iter().zip(want) {
            assert!(((*g as f64) - w).abs() / w < 1e-6);
        }
    }

    #[test]
    fn affinity_shape_error() {
        let c = cfg(2, 2, 3, 1);
        let p = LayerParams::<f32>::zeros(&c);
        assert!(matches!(affinity(&p, &c, &[1.0]), Err(FmError::Shape { .. })));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_mask(&[0.5f64, 0.3, 0.2], 2).unwrap(), vec![1.0, 1.0, 0.0]);
        assert_eq!(topk_mask(&[0.25f64; 4], 2).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(topk_mask(&[0.1f64, 0.6, 0.3], 3).unwrap(), vec![1.0; 3]);
        assert_eq!(topk_indices(&[0.1f64, 0.2, 0.2, 0.5], 2).unwrap(), vec![1, 3]);
        assert!(topk_mask(&[0.5f64, 0.5], 0).is_err());
        assert!(topk_mask(&[0.5f64, 0.5], 3).is_err());
    }

    #[test]
    fn renormalize_examples() {
        let r = renormalize(&[0.5f64, 0.3, 0.2], &[1.0, 1.0, 0.0]).unwrap();
        assert!((r[0] - 0.625).abs() < 1e-15 && (r[1] - 0.375).abs() < 1e-15 && r[2] == 0.0);
        let alpha = [0.5f64, 0.3, 0.2];
        assert_eq!(renormalize(&alpha, &[1.0; 3]).unwrap(), alpha.to_vec());
        assert_eq!(
            renormalize(&[0.7f64, 0.2, 0.1], &[0.0, 0.0, 1.0]).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert!(renormalize(&[0.5f64, 0.5], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn scalar_convex_combination() {
        let c = cfg(1, 1, 1, 2);
        let mut p = LayerParams::<f64>::zeros(&c);
        p.w_in = Tensor2::from_rows(&[vec![4.0], vec![4.0]]).unwrap();
        p.w_out = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        // w_eta = 0 gives eta = 0.5
        let mut state = MemoryState {
            h: Tensor2::filled(1, 2, 2.0),
        };
        let out = step(&p, &c, &mut state, &[1.0], None).unwrap();
        assert_eq!(state.h.data(), &[3.0, 3.0]);
        assert_eq!(out.inter.theta, vec![0.5]);
    }

    #[test]
    fn closed_update_gate_freezes_state() {
        let c = cfg(4, 2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = LayerParams::<f64>::init(&c, 0.5, &mut rng);
        p.w_eta = vec![-40.0, 0.0, 0.0];
        let h = Tensor2::from_fn(4, 3, |i, j| (i as f64) - (j as f64) * 0.5);
        let mut state = MemoryState { h: h.clone() };
        let out = step(&p, &c, &mut state, &[1.0, 0.2, -0.3], None).unwrap();
        assert!(out.inter.eta < 1e-7);
        assert!(state.h.max_abs_diff(&h) < 1e-6);
    }

    #[test]
    fn step_touches_only_selected_rows() {
        let c = cfg(6, 2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = LayerParams::<f64>::init(&c, 0.5, &mut rng);
        let h = Tensor2::from_fn(6, 3, |i, j| (i * 3 + j) as f64);
        let mut state = MemoryState { h: h.clone() };
        let mut counters = TouchCounters::new();
        let out = step(&p, &c, &mut state, &[0.3, -0.1, 0.8, 0.0], Some(&mut counters)).unwrap();
        assert_eq!(out.inter.selected.len(), 2);
        assert_eq!(counters.rows_written, 2);
        for i in 0..6 {
            if !out.inter.selected.contains(&i) {
                assert_eq!(state.h.row(i), h.row(i));
                assert_eq!(out.inter.theta[i], 0.0);
                assert_eq!(out.inter.phi[i], 0.0);
            }
        }
        let s: f64 = out.inter.alpha_bar.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_step_equals_full_support_step() {
        let c = cfg(5, 5, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = LayerParams::<f64>::init(&c, 0.7, &mut rng);
        let mut s1 = MemoryState::zeros(&c);
        let mut s2 = MemoryState::zeros(&c);
        for t in 0..10 {
            let x: Vec<f64> = (0..4).map(|j| ((t * 4 + j) as f64 * 0.37).sin()).collect();
            let y1 = step(&p, &c, &mut s1, &x, None).unwrap().y;
            let y2 = step_dense(&p, &c, &mut s2, &x).unwrap();
            assert_eq!(y1, y2);
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn forward_rejects_empty_and_misshaped() {
        let c = cfg(2, 1, 3, 2);
        let p = LayerParams::<f32>::zeros(&c);
        let opts = ForwardOptions::default();
        assert!(forward_sequence(&p, &c, MemoryState::zeros(&c), &Tensor2::zeros(0, 3), &opts, None).is_err());
        assert!(forward_sequence(&p, &c, MemoryState::zeros(&c), &Tensor2::zeros(2, 4), &opts, None).is_err());
    }

    #[test]
    fn nan_input_is_named() {
        let c = cfg(3, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LayerParams::<f32>::init(&c, 0.5, &mut rng);
        let mut st = MemoryState::zeros(&c);
        let err = step(&p, &c, &mut st, &[f32::NAN, 0.0], None).unwrap_err();
        assert!(err.to_string().contains("x_bar"), "{err}");
    }
}
