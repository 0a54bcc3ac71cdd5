use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_step, KvCache};
use crate::error::{FmError, Result};
use crate::flops::TouchCounters;
use crate::layer::{step, MemoryState};
use crate::tensor::{matvec, silu, softmax, Scalar};

use super::forward::{in_block, norm_vec};
use super::{check_tokens, MixerParams, ModelConfig, ModelParams};

/// Per-layer inference state of one stream.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<S> {
    Fm(MemoryState<S>),
    Attention(KvCache<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceStates<S> {
    pub layers: Vec<LayerState<S>>,
    /// Tokens consumed so far.
    pub position: usize,
}

impl<S: Scalar> SequenceStates<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|_| {
                if cfg.is_fm() {
                    LayerState::Fm(MemoryState::zeros(&cfg.layer))
                } else {
                    LayerState::Attention(KvCache::new(cfg.d_model()))
                }
            })
            .collect();
        Self { layers, position: 0 }
    }

    pub fn scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Fm(m) => m.scalars(),
                LayerState::Attention(c) => c.scalars(),
            })
            .sum()
    }

    pub fn bytes(&self) -> usize {
        self.scalars() * std::mem::size_of::<S>()
    }
}

/// Feeds one token through the stack and returns next-token logits.
/// FM layers run their single-step recurrence.
pub fn step_token<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    states: &mut SequenceStates<S>,
    token: u32,
    mut counters: Option<&mut TouchCounters>,
) -> Result<Vec<S>> {
    check_tokens(cfg, &[token])?;
    let mut x = params.embed.row(token as usize).to_vec();
    if let Some(pos) = &params.pos {
        if states.position >= pos.rows() {
            return Err(FmError::InvalidArgument(format!(
                "position {} is beyond the learned position table ({} positions)",
                states.position,
                pos.rows()
            )));
        }
        for (a, &b) in x.iter_mut().zip(pos.row(states.position)) {
            *a += b;
        }
    }
    for (i, (block, state)) in params.blocks.iter().zip(states.layers.iter_mut()).enumerate() {
        let n1 = norm_vec(&x, &block.norm1);
        let y = match (&block.mixer, state) {
            (MixerParams::Fm(p), LayerState::Fm(h)) => {
                let c = counters.as_deref_mut().map(|c| c.at(i, states.position));
                step(p, &cfg.layer, h, &n1, c).map_err(|e| in_block(i, e))?.y
            }
            (MixerParams::Attention(p), LayerState::Attention(cache)) => attention_step(p, cfg.n_heads, cache, &n1)?,
            _ => return Err(FmError::InvalidArgument("state kind does not match the mixer".into())),
        };
        for (a, &b) in x.iter_mut().zip(&y) {
            *a += b;
        }
        let n2 = norm_vec(&x, &block.norm2);
        let mut a = matvec(&block.mlp_up, &n2)?;
        for v in &mut a {
            *v = silu(*v);
        }
        let m = matvec(&block.mlp_down, &a)?;
        for (o, &b) in x.iter_mut().zip(&m) {
            *o += b;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FmError::non_finite(format!("block {i} output")));
        }
    }
    states.position += 1;
    let h = norm_vec(&x, &params.final_norm);
    matvec(&params.embed, &h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Inference-state bytes after each generated token.
    pub state_bytes: Vec<usize>,
}

fn argmax<S: Scalar>(v: &[S]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Consumes `prompt`, then produces `n_tokens` new tokens.
pub fn generate<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    prompt: &[u32],
    n_tokens: usize,
    decoding: Decoding,
    mut counters: Option<&mut TouchCounters>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(FmError::InvalidArgument("generation needs a non-empty prompt".into()));
    }
    let mut rng = match decoding {
        Decoding::Greedy => None,
        Decoding::Temperature { temperature, seed } => {
            if !(temperature > 0.0) {
                return Err(FmError::InvalidArgument(format!(
                    "temperature must be > 0, got {temperature}"
                )));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
    };
    let mut states = SequenceStates::new(cfg);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = step_token(params, cfg, &mut states, t, counters.as_deref_mut())?;
    }
    let mut tokens = Vec::with_capacity(n_tokens);
    let mut state_bytes = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let next = match (&decoding, rng.as_mut()) {
            (Decoding::Temperature { temperature, .. }, Some(rng)) => {
                let p = softmax(&logits, S::of(*temperature))?;
                let w: Vec<f64> = p.iter().map(|v| v.as_f64()).collect();
                let dist = WeightedIndex::new(&w).map_err(|e| FmError::non_finite(format!("sampling weights: {e}")))?;
                dist.sample(rng) as u32
            }
            _ => argmax(&logits),
        };
        tokens.push(next);
        if i + 1 < n_tokens {
            logits = step_token(params, cfg, &mut states, next, counters.as_deref_mut())?;
        }
        state_bytes.push(states.bytes());
    }
    Ok(Generation { tokens, state_bytes })
}
