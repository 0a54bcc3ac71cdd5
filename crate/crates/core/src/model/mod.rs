//! Byte-level decoder-only language model: token embedding, pre-norm residual
//! blocks (mixer then MLP), a final rms norm and a head tied to the embedding.

mod forward;
mod generate;

pub use forward::{
    forward_hidden, lm_loss, lm_loss_native, loss_so_far, token_nll, BlockTape, LossSoFar, MixerTape, ModelTape,
};
pub use generate::{generate, step_token, Decoding, Generation, LayerState, SequenceStates};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{FmError, Result};
use crate::layer::{LayerConfig, LayerParams};
use crate::tensor::{Scalar, Tensor2};

/// 256 byte values plus one pad id.
pub const BYTE_VOCAB: usize = 257;
pub const PAD: u32 = 256;
/// Document separator inside a corpus stream.
pub const SEP: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    #[default]
    #[serde(alias = "fm")]
    FactorizationMemory,
    Attention,
}

impl std::str::FromStr for MixerKind {
    type Err = FmError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fm" | "factorization_memory" => Ok(MixerKind::FactorizationMemory),
            "attention" | "attn" => Ok(MixerKind::Attention),
            other => Err(FmError::InvalidArgument(format!("unknown mixer {other:?}"))),
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixerKind::FactorizationMemory => "fm",
            MixerKind::Attention => "attention",
        })
    }
}

fn default_vocab() -> usize {
    BYTE_VOCAB
}

fn default_heads() -> usize {
    4
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub n_layers: usize,
    /// FM settings; `layer.d_model` is the model width for either mixer.
    pub layer: LayerConfig,
    /// Defaults to `4 · d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub mixer: MixerKind,
    pub train_ctx: usize,
    /// Attention heads (attention mixer only).
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Rows of the learned position table (attention only); defaults to `8 · train_ctx`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_positions: Option<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(n_layers: usize, layer: LayerConfig, mixer: MixerKind, train_ctx: usize) -> Self {
        Self {
            vocab: BYTE_VOCAB,
            n_layers,
            layer,
            mlp_hidden: None,
            mixer,
            train_ctx,
            n_heads: default_heads(),
            max_positions: None,
            init_std: default_init_std(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.layer.d_model
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.layer.d_model)
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions.unwrap_or(8 * self.train_ctx)
    }

    pub fn is_fm(&self) -> bool {
        self.mixer == MixerKind::FactorizationMemory
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(FmError::InvalidArgument("n_layers must be at least 1".into()));
        }
        if self.train_ctx == 0 {
            return Err(FmError::InvalidArgument("train_ctx must be at least 1".into()));
        }
        if self.vocab < 2 {
            return Err(FmError::InvalidArgument(format!("vocab {} is too small", self.vocab)));
        }
        if self.mlp_hidden() == 0 {
            return Err(FmError::InvalidArgument("mlp_hidden must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(FmError::InvalidArgument(format!(
                "init_std {} is invalid",
                self.init_std
            )));
        }
        match self.mixer {
            MixerKind::FactorizationMemory => self.layer.validate(),
            MixerKind::Attention => {
                let d = self.layer.d_model;
                if d == 0 || self.n_heads == 0 || d % self.n_heads != 0 {
                    return Err(FmError::InvalidArgument(format!(
                        "d_model {d} is not divisible into {} heads",
                        self.n_heads
                    )));
                }
                if self.max_positions() == 0 {
                    return Err(FmError::InvalidArgument("max_positions must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Scalars of recurrent state carried by one FM generation stream.
    pub fn fm_state_scalars(&self) -> usize {
        self.n_layers * self.layer.m * self.layer.d_memory
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixerParams<S> {
    Fm(LayerParams<S>),
    Attention(AttentionParams<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub norm1: Vec<S>,
    pub mixer: MixerParams<S>,
    pub norm2: Vec<S>,
    /// `mlp_hidden × d_model`
    pub mlp_up: Tensor2<S>,
    /// `d_model × mlp_hidden`
    pub mlp_down: Tensor2<S>,
}

/// All trainable tensors. `ModelParams<f64>` doubles as the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    /// `vocab × d_model`, shared with the output head.
    pub embed: Tensor2<S>,
    /// Learned absolute positions, attention models only.
    pub pos: Option<Tensor2<S>>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_norm: Vec<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model();
        let hidden = cfg.mlp_hidden();
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                norm1: vec![S::zero(); d],
                mixer: match cfg.mixer {
                    MixerKind::FactorizationMemory => MixerParams::Fm(LayerParams::zeros(&cfg.layer)),
                    MixerKind::Attention => MixerParams::Attention(AttentionParams::zeros(d)),
                },
                norm2: vec![S::zero(); d],
                mlp_up: Tensor2::zeros(hidden, d),
                mlp_down: Tensor2::zeros(d, hidden),
            })
            .collect();
        Self {
            embed: Tensor2::zeros(cfg.vocab, d),
            pos: (!cfg.is_fm()).then(|| Tensor2::zeros(cfg.max_positions(), d)),
            blocks,
            final_norm: vec![S::zero(); d],
        }
    }

    /// Projections and embeddings from `N(0, init_std²)`, norm gains at one,
    /// FM gate vectors at zero.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model();
        let hidden = cfg.mlp_hidden();
        let std = cfg.init_std;
        let normal = Normal::new(0.0, std).map_err(|e| FmError::InvalidArgument(e.to_string()))?;
        let draw = |rng: &mut R, r, c| Tensor2::from_fn(r, c, |_, _| S::of(normal.sample(rng)));
        let embed = draw(rng, cfg.vocab, d);
        let pos = if cfg.is_fm() {
            None
        } else {
            Some(draw(rng, cfg.max_positions(), d))
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mixer = match cfg.mixer {
                MixerKind::FactorizationMemory => MixerParams::Fm(LayerParams::init(&cfg.layer, std, rng)),
                MixerKind::Attention => MixerParams::Attention(AttentionParams::init(d, std, rng)),
            };
            blocks.push(BlockParams {
                norm1: vec![S::one(); d],
                mixer,
                norm2: vec![S::one(); d],
                mlp_up: draw(rng, hidden, d),
                mlp_down: draw(rng, d, hidden),
            });
        }
        Ok(Self {
            embed,
            pos,
            blocks,
            final_norm: vec![S::one(); d],
        })
    }

    /// Named views in a fixed order: `(name, dims, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = vec![(
            "embed".to_string(),
            vec![self.embed.rows(), self.embed.cols()],
            self.embed.data(),
        )];
        if let Some(p) = &self.pos {
            out.push(("pos".to_string(), vec![p.rows(), p.cols()], p.data()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm1"), vec![b.norm1.len()], &b.norm1));
            match &b.mixer {
                MixerParams::Fm(p) => {
                    for (n, dims, data) in p.tensors() {
                        out.push((format!("blocks.{i}.fm.{n}"), dims, data));
                    }
                }
                MixerParams::Attention(p) => {
                    for (n, dims, data) in p.tensors() {
                        out.push((format!("blocks.{i}.attn.{n}"), dims, data));
                    }
                }
            }
            out.push((format!("blocks.{i}.norm2"), vec![b.norm2.len()], &b.norm2));
            out.push((
                format!("blocks.{i}.mlp_up"),
                vec![b.mlp_up.rows(), b.mlp_up.cols()],
                b.mlp_up.data(),
            ));
            out.push((
                format!("blocks.{i}.mlp_down"),
                vec![b.mlp_down.rows(), b.mlp_down.cols()],
                b.mlp_down.data(),
            ));
        }
        out.push(("final_norm".to_string(), vec![self.final_norm.len()], &self.final_norm));
        out
    }

    /// Same order as `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out: Vec<(String, &mut [S])> = vec![("embed".to_string(), self.embed.data_mut())];
        if let Some(p) = &mut self.pos {
            out.push(("pos".to_string(), p.data_mut()));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.norm1"), &mut b.norm1));
            match &mut b.mixer {
                MixerParams::Fm(p) => {
                    for (n, data) in p.tensors_mut() {
                        out.push((format!("blocks.{i}.fm.{n}"), data));
                    }
                }
                MixerParams::Attention(p) => {
                    for (n, data) in p.tensors_mut() {
                        out.push((format!("blocks.{i}.attn.{n}"), data));
                    }
                }
            }
            out.push((format!("blocks.{i}.norm2"), &mut b.norm2));
            out.push((format!("blocks.{i}.mlp_up"), b.mlp_up.data_mut()));
            out.push((format!("blocks.{i}.mlp_down"), b.mlp_down.data_mut()));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion into another precision.
    pub fn cast<T: Scalar>(&self, cfg: &ModelConfig) -> ModelParams<T> {
        let mut out = ModelParams::<T>::zeros(cfg);
        for ((_, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::of(s.as_f64());
            }
        }
        out
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = ModelParams::<S>::zeros(cfg);
        let a = self.tensors();
        let b = want.tensors();
        if a.len() != b.len() {
            return Err(FmError::shape("ModelParams tensor count", b.len(), a.len()));
        }
        for ((na, da, _), (nb, db, _)) in a.iter().zip(&b) {
            if na != nb || da != db {
                return Err(FmError::Shape {
                    op: "ModelParams",
                    lhs: format!("{nb} {db:?}"),
                    rhs: format!("{na} {da:?}"),
                });
            }
        }
        Ok(())
    }
}

impl ModelParams<f64> {
    /// `self += scale · other`, tensor by tensor in a fixed order.
    pub fn add_scaled(&mut self, other: &ModelParams<f64>, scale: f64) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.2.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= s;
            }
        }
    }
}

impl crate::grad::FlatParams for ModelParams<f64> {
    fn flat_tensors(&self) -> Vec<(String, &[f64])> {
        self.tensors().into_iter().map(|(n, _, d)| (n, d)).collect()
    }

    fn flat_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.tensors_mut()
    }
}

/// Token ids must index the vocabulary.
pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(FmError::InvalidArgument(format!(
            "token id {t} is outside the vocabulary of {}",
            cfg.vocab
        )));
    }
    Ok(())
}
