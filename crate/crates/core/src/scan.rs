//! Prefix-scan evaluation of the diagonal affine recurrence
//! `h_t = a_t ⊙ h_{t-1} + b_t`.
//!
//! `scan_inclusive` is the blocked two-pass scan used by the dense parallel
//! path. `scan_sparse` handles the top-k case, where each step only carries a
//! decay/injection for its selected rows and every other row has `a = 1, b = 0`:
//! each row then only needs a scan over the steps that selected it.

use crate::error::{FmError, Result};
use crate::par::{self, Execution};
use crate::tensor::{Scalar, Tensor2};

/// One affine map `h ↦ a ⊙ h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement<S> {
    pub a: Tensor2<S>,
    pub b: Tensor2<S>,
}

impl<S: Scalar> ScanElement<S> {
    pub fn new(a: Tensor2<S>, b: Tensor2<S>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(FmError::shape("ScanElement::new", a.shape(), b.shape()));
        }
        Ok(Self { a, b })
    }

    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            a: Tensor2::filled(rows, cols, S::one()),
            b: Tensor2::zeros(rows, cols),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }

    /// `a ⊙ h + b`
    pub fn apply(&self, h: &Tensor2<S>) -> Result<Tensor2<S>> {
        if h.shape() != self.shape() {
            return Err(FmError::shape("ScanElement::apply", self.shape(), h.shape()));
        }
        let mut out = h.clone();
        apply_in_place(self, &mut out);
        Ok(out)
    }
}

#[inline]
fn apply_in_place<S: Scalar>(e: &ScanElement<S>, h: &mut Tensor2<S>) {
    for ((hv, &a), &b) in h.data_mut().iter_mut().zip(e.a.data()).zip(e.b.data()) {
        *hv = a * *hv + b;
    }
}

/// Composition with `e1` applied first in time.
pub fn combine<S: Scalar>(e1: &ScanElement<S>, e2: &ScanElement<S>) -> Result<ScanElement<S>> {
    if e1.shape() != e2.shape() {
        return Err(FmError::shape("combine", e1.shape(), e2.shape()));
    }
    let (r, c) = e1.shape();
    let mut a = Tensor2::zeros(r, c);
    let mut b = Tensor2::zeros(r, c);
    let a1 = e1.a.data();
    let b1 = e1.b.data();
    let a2 = e2.a.data();
    let b2 = e2.b.data();
    for (i, (av, bv)) in a.data_mut().iter_mut().zip(b.data_mut()).enumerate() {
        *av = a1[i] * a2[i];
        *bv = a2[i] * b1[i] + b2[i];
    }
    Ok(ScanElement { a, b })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanPlan {
    pub chunk_len: usize,
    pub exec: Execution,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self {
            chunk_len: 32,
            exec: Execution::default(),
        }
    }
}

/// All states `h_1 … h_T`.
///
/// Chunks are reduced to a summary element in parallel, the summaries are
/// applied to the carried state in order, and each chunk is then replayed from
/// its carry-in. The result depends only on `chunk_len`, never on threading.
pub fn scan_inclusive<S: Scalar>(
    elems: &[ScanElement<S>],
    h0: &Tensor2<S>,
    plan: &ScanPlan,
) -> Result<Vec<Tensor2<S>>> {
    if elems.is_empty() {
        return Err(FmError::InvalidArgument("scan over an empty sequence".into()));
    }
    if plan.chunk_len == 0 {
        return Err(FmError::InvalidArgument("scan chunk_len must be >= 1".into()));
    }
    for e in elems {
        if e.shape() != h0.shape() || e.b.shape() != h0.shape() {
            return Err(FmError::shape("scan_inclusive", h0.shape(), e.shape()));
        }
    }

    let chunks: Vec<&[ScanElement<S>]> = elems.chunks(plan.chunk_len).collect();

    // up-sweep: one summary per chunk
    let summaries: Vec<ScanElement<S>> = par::map(plan.exec, &chunks[..chunks.len() - 1], |chunk| {
        let mut acc = chunk[0].clone();
        for e in &chunk[1..] {
            acc = combine(&acc, e).expect("shapes checked");
        }
        acc
    });

    // ordered carry across chunk summaries
    let mut carries = Vec::with_capacity(chunks.len());
    let mut carry = h0.clone();
    carries.push(carry.clone());
    for s in &summaries {
        apply_in_place(s, &mut carry);
        carries.push(carry.clone());
    }

    // down-sweep: replay each chunk from its carry-in
    let per_chunk: Vec<Vec<Tensor2<S>>> = par::map_range(plan.exec, chunks.len(), |c| {
        let mut h = carries[c].clone();
        let mut out = Vec::with_capacity(chunks[c].len());
        for e in chunks[c] {
            apply_in_place(e, &mut h);
            out.push(h.clone());
        }
        out
    });
    Ok(per_chunk.into_iter().flatten().collect())
}

/// One step of the sparse recurrence: only `rows` change, each by
/// `h[row] = decay[slot] * h[row] + inject[slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseStep<S> {
    pub rows: Vec<usize>,
    pub decay: Vec<S>,
    pub inject: Tensor2<S>,
}

/// Result of `scan_sparse`: the new value of every selected row at every step.
/// Rows are materialised lazily for other `(t, row)` pairs.
#[derive(Debug, Clone)]
pub struct SparseScan<S> {
    h0: Tensor2<S>,
    /// Per step, per slot: the updated row.
    values: Vec<Tensor2<S>>,
    step_rows: Vec<Vec<usize>>,
    /// Per row: the `(t, slot)` events that updated it, in time order.
    events: Vec<Vec<(usize, usize)>>,
    row_steps: u64,
}

impl<S: Scalar> SparseScan<S> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-steps actually processed; `T·k` for a run with support size `k`.
    pub fn row_steps(&self) -> u64 {
        self.row_steps
    }

    pub fn step_rows(&self, t: usize) -> &[usize] {
        &self.step_rows[t]
    }

    /// The updated value of the `slot`-th selected row of step `t`.
    pub fn value(&self, t: usize, slot: usize) -> &[S] {
        self.values[t].row(slot)
    }

    /// Value of `row` after step `t`. Rows not selected at `t` carry their
    /// last update (or the initial state).
    pub fn row_at(&self, t: usize, row: usize) -> Result<&[S]> {
        if t >= self.values.len() || row >= self.events.len() {
            return Err(FmError::InvalidArgument(format!(
                "query ({t}, {row}) outside a scan of {} steps over {} rows",
                self.values.len(),
                self.events.len()
            )));
        }
        let ev = &self.events[row];
        let n = ev.partition_point(|&(et, _)| et <= t);
        Ok(match n {
            0 => self.h0.row(row),
            _ => {
                let (et, slot) = ev[n - 1];
                self.values[et].row(slot)
            }
        })
    }

    /// Value of `row` just before step `t`.
    pub fn row_before(&self, t: usize, row: usize) -> Result<&[S]> {
        if t == 0 {
            if row >= self.events.len() {
                return Err(FmError::InvalidArgument(format!("row {row} out of range")));
            }
            return Ok(self.h0.row(row));
        }
        self.row_at(t - 1, row)
    }

    pub fn final_state(&self) -> Tensor2<S> {
        let mut h = self.h0.clone();
        for (row, ev) in self.events.iter().enumerate() {
            if let Some(&(t, slot)) = ev.last() {
                h.row_mut(row).copy_from_slice(self.values[t].row(slot));
            }
        }
        h
    }
}

pub fn scan_sparse<S: Scalar>(steps: &[SparseStep<S>], h0: &Tensor2<S>, exec: Execution) -> Result<SparseScan<S>> {
    if steps.is_empty() {
        return Err(FmError::InvalidArgument("scan over an empty sequence".into()));
    }
    let (m, d) = h0.shape();
    let mut events: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
    for (t, st) in steps.iter().enumerate() {
        if st.decay.len() != st.rows.len() || st.inject.shape() != (st.rows.len(), d) {
            return Err(FmError::shape(
                "scan_sparse",
                (st.rows.len(), d),
                (st.decay.len(), st.inject.shape()),
            ));
        }
        for (slot, &r) in st.rows.iter().enumerate() {
            if r >= m {
                return Err(FmError::InvalidArgument(format!("row {r} out of range at step {t}")));
            }
            if events[r].last().is_some_and(|&(et, _)| et == t) {
                return Err(FmError::InvalidArgument(format!("row {r} selected twice at step {t}")));
            }
            events[r].push((t, slot));
        }
    }

    // Each row is an independent scan over the steps that selected it.
    let per_row: Vec<Vec<S>> = par::map_range(exec, m, |row| {
        let ev = &events[row];
        let mut h = h0.row(row).to_vec();
        let mut out = Vec::with_capacity(ev.len() * d);
        for &(t, slot) in ev {
            let a = steps[t].decay[slot];
            let b = steps[t].inject.row(slot);
            for (hv, &bv) in h.iter_mut().zip(b) {
                *hv = a * *hv + bv;
            }
            out.extend_from_slice(&h);
        }
        out
    });

    let mut values: Vec<Tensor2<S>> = steps.iter().map(|st| Tensor2::zeros(st.rows.len(), d)).collect();
    let mut row_steps = 0u64;
    for (row, ev) in events.iter().enumerate() {
        for (n, &(t, slot)) in ev.iter().enumerate() {
            values[t]
                .row_mut(slot)
                .copy_from_slice(&per_row[row][n * d..(n + 1) * d]);
            row_steps += 1;
        }
    }

    Ok(SparseScan {
        h0: h0.clone(),
        values,
        step_rows: steps.iter().map(|s| s.rows.clone()).collect(),
        events,
        row_steps,
    })
}
