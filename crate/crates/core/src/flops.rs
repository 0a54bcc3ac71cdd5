//! Per-token FLOPS model of one Factorization Memory layer and the row-access
//! counters used to check that the sparse path only touches `k` states.
//!
//! The calculator reproduces the analytical line items as published, even
//! where the kernels here do slightly different work (the merge line, for
//! instance, counts a weighted sum and ignores the rms multiply). The
//! counters, in contrast, report what the implementation actually touched.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::layer::LayerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub input_proj: u64,
    pub affinity: u64,
    pub rates: u64,
    pub norm: u64,
    pub merge: u64,
    pub output_proj: u64,
    /// Dense total: sum of the six parts.
    pub total: u64,
    /// Work dropped by the top-k path: `(m - k)(9 d_memory + 5)`.
    pub sparse_savings: u64,
}

impl FlopsBreakdown {
    pub fn sparse_total(&self) -> u64 {
        self.total - self.sparse_savings
    }

    pub fn parts(&self) -> [(&'static str, u64); 6] {
        [
            ("input_proj", self.input_proj),
            ("affinity", self.affinity),
            ("rates", self.rates),
            ("norm", self.norm),
            ("merge", self.merge),
            ("output_proj", self.output_proj),
        ]
    }
}

pub fn flops_per_token(cfg: &LayerConfig) -> FlopsBreakdown {
    let dm = cfg.d_model as u64;
    let dh = cfg.d_memory as u64;
    let m = cfg.m as u64;
    let k = cfg.k.min(cfg.m) as u64;

    let input_proj = dh * (2 * dm - 1);
    let affinity = m * (2 * dm - 1);
    let rates = 2 * (2 * dm - 1) + 2 * m;
    let norm = m * (4 * dh + 3);
    let merge = m * dh + dh * (m - 1);
    let output_proj = dm * (2 * dh - 1);
    let total = input_proj + affinity + rates + norm + merge + output_proj;
    FlopsBreakdown {
        input_proj,
        affinity,
        rates,
        norm,
        merge,
        output_proj,
        total,
        sparse_savings: (m - k) * (9 * dh + 5),
    }
}

/// Row-access counters for one run handle.
///
/// Callers set `layer` and `cursor` (the token position) before handing the
/// counters to the layer; every token processed bumps `cursor`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TouchCounters {
    pub rows_read: u64,
    pub rows_written: u64,
    pub tokens_processed: u64,
    pub layer: usize,
    pub cursor: usize,
    record: Option<BTreeSet<(usize, usize, usize)>>,
}

impl TouchCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counters that also remember every `(layer, position, row)` touched.
    pub fn recording() -> Self {
        Self {
            record: Some(BTreeSet::new()),
            ..Self::default()
        }
    }

    pub fn at(&mut self, layer: usize, cursor: usize) -> &mut Self {
        self.layer = layer;
        self.cursor = cursor;
        self
    }

    /// One token's worth of state access: each row is read once and written once.
    pub fn touch_rows(&mut self, rows: &[usize]) {
        self.rows_read += rows.len() as u64;
        self.rows_written += rows.len() as u64;
        self.tokens_processed += 1;
        if let Some(rec) = self.record.as_mut() {
            for &r in rows {
                rec.insert((self.layer, self.cursor, r));
            }
        }
        self.cursor += 1;
    }

    pub fn touched(&self) -> Option<&BTreeSet<(usize, usize, usize)>> {
        self.record.as_ref()
    }

    pub fn merge(&mut self, other: &TouchCounters) {
        self.rows_read += other.rows_read;
        self.rows_written += other.rows_written;
        self.tokens_processed += other.tokens_processed;
        if let (Some(a), Some(b)) = (self.record.as_mut(), other.record.as_ref()) {
            a.extend(b.iter().copied());
        }
    }
}
