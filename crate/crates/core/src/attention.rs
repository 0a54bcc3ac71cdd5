//! Exact causal softmax attention, the comparison baseline.
//!
//! Queries are scaled by `1/sqrt(d_head)` at projection time, so each head
//! computes `softmax(Q Kᵀ) V` on the scaled queries.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FmError, Result};
use crate::tensor::{accumulate_outer, axpy, dot, matmul_nn, matmul_nt, matvec, softmax_into, Scalar, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S> {
    /// All four are `d_model × d_model`.
    pub w_q: Tensor2<S>,
    pub w_k: Tensor2<S>,
    pub w_v: Tensor2<S>,
    pub w_o: Tensor2<S>,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            w_q: Tensor2::zeros(d_model, d_model),
            w_k: Tensor2::zeros(d_model, d_model),
            w_v: Tensor2::zeros(d_model, d_model),
            w_o: Tensor2::zeros(d_model, d_model),
        }
    }

    pub fn init<R: Rng + ?Sized>(d_model: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut draw = || Tensor2::from_fn(d_model, d_model, |_, _| S::of(normal.sample(rng)));
        Self {
            w_q: draw(),
            w_k: draw(),
            w_v: draw(),
            w_o: draw(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[S])> {
        let d = self.d_model();
        vec![
            ("w_q", vec![d, d], self.w_q.data()),
            ("w_k", vec![d, d], self.w_k.data()),
            ("w_v", vec![d, d], self.w_v.data()),
            ("w_o", vec![d, d], self.w_o.data()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [S])> {
        vec![
            ("w_q", self.w_q.data_mut()),
            ("w_k", self.w_k.data_mut()),
            ("w_v", self.w_v.data_mut()),
            ("w_o", self.w_o.data_mut()),
        ]
    }
}

fn head_dim(d_model: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(FmError::InvalidArgument(format!(
            "d_model {d_model} is not divisible into {n_heads} heads"
        )));
    }
    Ok(d_model / n_heads)
}

#[derive(Debug, Clone)]
pub struct AttentionTape<S> {
    pub xs: Tensor2<S>,
    /// Scaled queries.
    pub q: Tensor2<S>,
    pub k: Tensor2<S>,
    pub v: Tensor2<S>,
    /// `probs[t][h]` has `t + 1` entries.
    pub probs: Vec<Vec<Vec<S>>>,
    /// Concatenated head outputs before `W_o`.
    pub ctx: Tensor2<S>,
}

/// Causal self-attention over a whole sequence.
pub fn attention_forward<S: Scalar>(
    params: &AttentionParams<S>,
    n_heads: usize,
    xs: &Tensor2<S>,
    keep_tape: bool,
) -> Result<(Tensor2<S>, Option<AttentionTape<S>>)> {
    let d = params.d_model();
    let dh = head_dim(d, n_heads)?;
    if xs.cols() != d {
        return Err(FmError::shape("attention input", d, xs.cols()));
    }
    let t_len = xs.rows();
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut q = matmul_nt(xs, &params.w_q)?;
    for v in q.data_mut() {
        *v *= scale;
    }
    let k = matmul_nt(xs, &params.w_k)?;
    let v = matmul_nt(xs, &params.w_v)?;

    let mut ctx = Tensor2::zeros(t_len, d);
    let mut probs = Vec::with_capacity(if keep_tape { t_len } else { 0 });
    let mut scores = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut per_head = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qt = &q.row(t)[cols.clone()];
            scores.clear();
            scores.extend((0..=t).map(|j| dot(qt, &k.row(j)[cols.clone()])));
            let mut p = vec![S::zero(); t + 1];
            softmax_into(&scores, S::one(), &mut p);
            let out = &mut ctx.row_mut(t)[cols.clone()];
            for (j, &pj) in p.iter().enumerate() {
                axpy(pj, &v.row(j)[cols.clone()], out);
            }
            per_head.push(p);
        }
        if keep_tape {
            probs.push(per_head);
        }
    }
    let ys = matmul_nt(&ctx, &params.w_o)?;
    let tape = keep_tape.then(|| AttentionTape {
        xs: xs.clone(),
        q,
        k,
        v,
        probs,
        ctx,
    });
    Ok((ys, tape))
}

/// Reverse of `attention_forward`; adds parameter gradients into `grads` and
/// returns the input gradient.
pub fn attention_backward<S: Scalar>(
    params: &AttentionParams<S>,
    n_heads: usize,
    tape: &AttentionTape<S>,
    g_ys: &Tensor2<S>,
    grads: &mut AttentionParams<f64>,
) -> Result<Tensor2<S>> {
    let d = params.d_model();
    let dh = head_dim(d, n_heads)?;
    let t_len = tape.xs.rows();
    if g_ys.shape() != (t_len, d) {
        return Err(FmError::shape("attention backward", (t_len, d), g_ys.shape()));
    }
    accumulate_outer(grads.w_o.data_mut(), g_ys, &tape.ctx);
    let g_ctx = matmul_nn(g_ys, &params.w_o)?;

    let mut g_q = Tensor2::zeros(t_len, d);
    let mut g_k = Tensor2::zeros(t_len, d);
    let mut g_v = Tensor2::zeros(t_len, d);
    let mut g_p = Vec::with_capacity(t_len);
    for t in 0..t_len {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &tape.probs[t][h];
            let gc = &g_ctx.row(t)[cols.clone()];
            g_p.clear();
            g_p.extend((0..=t).map(|j| dot(gc, &tape.v.row(j)[cols.clone()])));
            let mut proj = S::zero();
            for (&pj, &gj) in p.iter().zip(&g_p) {
                proj += pj * gj;
            }
            for j in 0..=t {
                axpy(p[j], gc, &mut g_v.row_mut(j)[cols.clone()]);
                let gs = p[j] * (g_p[j] - proj);
                axpy(gs, &tape.k.row(j)[cols.clone()], &mut g_q.row_mut(t)[cols.clone()]);
                axpy(gs, &tape.q.row(t)[cols.clone()], &mut g_k.row_mut(j)[cols.clone()]);
            }
        }
    }
    let scale = S::one() / S::of(dh as f64).sqrt();
    for v in g_q.data_mut() {
        *v *= scale;
    }
    accumulate_outer(grads.w_q.data_mut(), &g_q, &tape.xs);
    accumulate_outer(grads.w_k.data_mut(), &g_k, &tape.xs);
    accumulate_outer(grads.w_v.data_mut(), &g_v, &tape.xs);
    let mut g_xs = matmul_nn(&g_q, &params.w_q)?;
    for part in [matmul_nn(&g_k, &params.w_k)?, matmul_nn(&g_v, &params.w_v)?] {
        for (a, &b) in g_xs.data_mut().iter_mut().zip(part.data()) {
            *a += b;
        }
    }
    Ok(g_xs)
}

/// Keys and values of every past position for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<S> {
    d_model: usize,
    keys: Vec<S>,
    values: Vec<S>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.d_model
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Stored scalars: `2 · d_head · n_heads` per cached position.
    pub fn scalars(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    pub fn bytes(&self) -> usize {
        self.scalars() * std::mem::size_of::<S>()
    }
}

/// One generation step: appends this position to the cache and attends over
/// everything cached so far.
pub fn attention_step<S: Scalar>(
    params: &AttentionParams<S>,
    n_heads: usize,
    cache: &mut KvCache<S>,
    x: &[S],
) -> Result<Vec<S>> {
    let d = params.d_model();
    let dh = head_dim(d, n_heads)?;
    if cache.d_model != d {
        return Err(FmError::shape("kv cache", d, cache.d_model));
    }
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut q = matvec(&params.w_q, x)?;
    for v in &mut q {
        *v *= scale;
    }
    cache.keys.extend(matvec(&params.w_k, x)?);
    cache.values.extend(matvec(&params.w_v, x)?);
    let n = cache.len();
    let mut ctx = vec![S::zero(); d];
    let mut scores = Vec::with_capacity(n);
    let mut p = vec![S::zero(); n];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        scores.clear();
        scores.extend((0..n).map(|j| dot(&q[cols.clone()], &cache.keys[j * d..(j + 1) * d][cols.clone()])));
        softmax_into(&scores, S::one(), &mut p);
        for (j, &pj) in p.iter().enumerate() {
            axpy(
                pj,
                &cache.values[j * d..(j + 1) * d][cols.clone()],
                &mut ctx[cols.clone()],
            );
        }
    }
    matvec(&params.w_o, &ctx)
}
