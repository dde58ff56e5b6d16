//! Causal speech encoder, duplex decoder with timing head, latent feedback
//! and the bidirectional expert.
//!
//! The same weights are evaluated two ways: on the autodiff tape over packed
//! batches (training, teacher forcing) and frame by frame with key/value
//! caches (inference). Both paths share the row kernels in
//! [`crate::numerics::kernels`].

mod checkpoint;
mod forward;
mod step;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, ParamSet, Tensor};
use crate::schema::{AudioToken, TextToken};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ModelMode};
pub use forward::{Batch, Binder, DecoderOut, ExpertOut, ForwardMode, ForwardOut};
pub use step::{LayerCache, Phase, StepOutput, StepState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Decoder layers.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Causal attention window in frames for encoder and decoder; 0 = unlimited.
    pub window: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub enc_layers: usize,
    pub expert_layers: usize,
    /// Latent temperature τ.
    pub tau: f32,
    /// Timing threshold θ_g.
    pub theta_g: f32,
    pub max_frames: usize,
    pub ffn_mult: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            window: 0,
            text_vocab: TextToken::VOCAB_SIZE,
            audio_vocab: AudioToken::VOCAB_SIZE,
            enc_layers: 2,
            expert_layers: 2,
            tau: 1.0,
            theta_g: 0.5,
            max_frames: 1024,
            ffn_mult: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("model config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("head dimension must be even for rotary positions");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.theta_g > 0.0 && self.theta_g < 1.0) {
            return bad("theta_g must lie in (0, 1)");
        }
        if self.text_vocab < 4 || self.audio_vocab < 1 || self.max_frames == 0 || self.ffn_mult == 0 {
            return bad("vocabulary sizes, max_frames and ffn_mult must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Parameter indices of one pre-norm transformer block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockIdx {
    pub norm1: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub norm2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub audio_emb: usize,
    pub enc: Vec<BlockIdx>,
    pub enc_norm: usize,
    pub adapter_w: usize,
    pub adapter_b: usize,
    pub text_emb: usize,
    pub dec: Vec<BlockIdx>,
    pub dec_norm: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub exp_pos: usize,
    pub exp: Vec<BlockIdx>,
    pub exp_norm: usize,
    pub exp_w: usize,
    pub exp_b: usize,
}

/// Prefix of every expert parameter name.
pub const EXPERT_PREFIX: &str = "expert.";
/// Prefix of every decoder-side parameter name (decoder blocks, head, timing head).
pub const DECODER_PREFIXES: [&str; 3] = ["decoder.", "head.", "timing."];

struct Init<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn randn(&mut self, name: String, shape: &[usize], std: f32) -> usize {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.params.push(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f32) -> usize {
        let n = shape.iter().product();
        self.params
            .push(name, Tensor::new(shape.to_vec(), vec![v; n]).expect("shape"))
    }

    fn linear(&mut self, name: String, din: usize, dout: usize, gain: f32) -> usize {
        self.randn(name, &[din, dout], gain / (din as f32).sqrt())
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, depth: usize) -> BlockIdx {
        let (d, f) = (cfg.d_model, cfg.d_ff());
        let out_gain = 1.0 / (2.0 * depth.max(1) as f32).sqrt();
        BlockIdx {
            norm1: self.fill(format!("{prefix}.norm1"), &[d], 1.0),
            wq: self.linear(format!("{prefix}.wq"), d, d, 1.0),
            wk: self.linear(format!("{prefix}.wk"), d, d, 1.0),
            wv: self.linear(format!("{prefix}.wv"), d, d, 1.0),
            wo: self.linear(format!("{prefix}.wo"), d, d, out_gain),
            norm2: self.fill(format!("{prefix}.norm2"), &[d], 1.0),
            w1: self.linear(format!("{prefix}.w1"), d, f, 1.0),
            b1: self.fill(format!("{prefix}.b1"), &[f], 0.0),
            w2: self.linear(format!("{prefix}.w2"), f, d, out_gain),
            b2: self.fill(format!("{prefix}.b2"), &[d], 0.0),
        }
    }
}

impl Layout {
    fn build(cfg: &ModelConfig, params: &mut ParamSet, seed: u64) -> Layout {
        let mut it = Init {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = cfg.d_model;
        let audio_emb = it.randn("encoder.audio_emb".into(), &[cfg.audio_vocab, d], 1.0);
        let enc = (0..cfg.enc_layers)
            .map(|l| it.block(&format!("encoder.{l}"), cfg, cfg.enc_layers))
            .collect();
        let enc_norm = it.fill("encoder.norm".into(), &[d], 1.0);
        let adapter_w = it.linear("encoder.adapter_w".into(), d, d, 1.0);
        let adapter_b = it.fill("encoder.adapter_b".into(), &[d], 0.0);
        let text_emb = it.randn("text_emb".into(), &[cfg.text_vocab, d], 1.0);
        let dec = (0..cfg.n_layers)
            .map(|l| it.block(&format!("decoder.{l}"), cfg, cfg.n_layers))
            .collect();
        let dec_norm = it.fill("decoder.norm".into(), &[d], 1.0);
        let head_w = it.linear("head.w".into(), d, cfg.text_vocab, 1.0);
        let head_b = it.fill("head.b".into(), &[cfg.text_vocab], 0.0);
        let time_w1 = it.linear("timing.w1".into(), d, d, 1.0);
        let time_b1 = it.fill("timing.b1".into(), &[d], 0.0);
        let time_w2 = it.linear("timing.w2".into(), d, 1, 1.0);
        let time_b2 = it.fill("timing.b2".into(), &[1], 0.0);
        let exp_pos = it.randn("expert.pos".into(), &[cfg.max_frames, d], 0.1);
        let exp = (0..cfg.expert_layers)
            .map(|l| it.block(&format!("expert.{l}"), cfg, cfg.expert_layers))
            .collect();
        let exp_norm = it.fill("expert.norm".into(), &[d], 1.0);
        let exp_w = it.linear("expert.proj_w".into(), d, cfg.text_vocab, 1.0);
        let exp_b = it.fill("expert.proj_b".into(), &[cfg.text_vocab], 0.0);
        Layout {
            audio_emb,
            enc,
            enc_norm,
            adapter_w,
            adapter_b,
            text_emb,
            dec,
            dec_norm,
            head_w,
            head_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            exp_pos,
            exp,
            exp_norm,
            exp_w,
            exp_b,
        }
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub(crate) layout: Layout,
}

impl Model {
    /// Fresh weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut params = ParamSet::new();
        let layout = Layout::build(&config, &mut params, config.init_seed);
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model around loaded tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        let reference = Model::new(config)?;
        if reference.params.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in reference.params.iter().enumerate() {
            let idx = params
                .index_of(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if idx != i || params.get(idx).shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected shape {:?} at position {i}, found {:?} at {idx}",
                    t.shape(),
                    params.get(idx).shape()
                )));
            }
        }
        Ok(Model { params, ..reference })
    }

    /// Row `tok` of the vocabulary embedding matrix E.
    pub fn embed(&self, tok: usize) -> &[f32] {
        self.params.get(self.layout.text_emb).row(tok)
    }

    pub fn text_embedding(&self) -> &Tensor {
        self.params.get(self.layout.text_emb)
    }

    /// Indices of all expert parameters.
    pub fn expert_param_indices(&self) -> Vec<usize> {
        self.indices_with_prefix(&[EXPERT_PREFIX])
    }

    pub fn decoder_param_indices(&self) -> Vec<usize> {
        self.indices_with_prefix(&DECODER_PREFIXES)
    }

    fn indices_with_prefix(&self, prefixes: &[&str]) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| prefixes.iter().any(|p| self.params.name(i).starts_with(p)))
            .collect()
    }

    /// `Z = softmax(y/τ)ᵀ E` with this model's E and τ.
    pub fn latent_feedback(&self, logits: &[f32]) -> Vec<f32> {
        latent_feedback(logits, self.text_embedding(), self.config.tau)
    }
}

/// Vocabulary-weighted mixture `softmax(y/τ)ᵀ E` of embedding rows.
pub fn latent_feedback(logits: &[f32], e: &Tensor, tau: f32) -> Vec<f32> {
    let mut w: Vec<f32> = logits.iter().map(|&y| y / tau).collect();
    kernels::softmax_in_place(&mut w);
    let d = e.cols();
    let mut z = vec![0.0; d];
    for (v, &p) in w.iter().enumerate() {
        kernels::axpy(p, e.row(v), &mut z);
    }
    z
}
