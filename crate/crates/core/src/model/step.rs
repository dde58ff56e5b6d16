use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{BlockIdx, Model};
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, gemm};
use crate::numerics::Tensor;
use crate::schema::TextToken;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Listening,
    Speaking,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Listening => "LISTENING",
            Phase::Speaking => "SPEAKING",
        }
    }
}

/// Rotated keys and values of one attention layer, oldest first.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    keys: VecDeque<Vec<f32>>,
    values: VecDeque<Vec<f32>>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Incremental decoding state of one stream.
#[derive(Clone, Debug)]
pub struct StepState {
    pub enc: Vec<LayerCache>,
    pub dec: Vec<LayerCache>,
    /// Frames consumed by the encoder.
    pub enc_t: usize,
    /// Frames consumed by the decoder.
    pub t: usize,
    /// Carry-in `C` for the next decoder frame.
    pub carry: Vec<f32>,
    pub phase: Phase,
}

impl StepState {
    /// Longest key/value memory over all layers.
    pub fn memory_len(&self) -> usize {
        self.enc.iter().chain(&self.dec).map(LayerCache::len).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub hidden: Vec<f32>,
    pub logits: Vec<f32>,
    /// Timing probability ĝ.
    pub g: f32,
}

fn linear_row(x: &[f32], w: &Tensor, b: Option<&Tensor>) -> Vec<f32> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; dout];
    gemm(1, din, dout, x, false, w.data(), false, &mut out, false);
    if let Some(b) = b {
        for (o, bb) in out.iter_mut().zip(b.data()) {
            *o += bb;
        }
    }
    out
}

fn norm_row(x: &[f32], gain: &Tensor) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    kernels::rms_norm_row(x, gain.data(), &mut out);
    out
}

impl Model {
    pub fn new_state(&self) -> StepState {
        StepState {
            enc: vec![LayerCache::default(); self.config.enc_layers],
            dec: vec![LayerCache::default(); self.config.n_layers],
            enc_t: 0,
            t: 0,
            carry: self.embed(TextToken::SIL.id()).to_vec(),
            phase: Phase::Listening,
        }
    }

    fn block_step(&self, blk: &BlockIdx, cache: &mut LayerCache, x: &mut [f32], pos: usize) {
        let p = &self.params;
        let cfg = &self.config;
        let (heads, hd) = (cfg.n_heads, cfg.head_dim());
        let inv_freq = kernels::rope_inv_freq(hd);
        let h = norm_row(x, p.get(blk.norm1));
        let mut q = linear_row(&h, p.get(blk.wq), None);
        let mut k = linear_row(&h, p.get(blk.wk), None);
        let v = linear_row(&h, p.get(blk.wv), None);
        kernels::rope_row(&mut q, pos, heads, &inv_freq, false);
        kernels::rope_row(&mut k, pos, heads, &inv_freq, false);
        cache.keys.push_back(k);
        cache.values.push_back(v);
        if cfg.window > 0 {
            while cache.keys.len() > cfg.window {
                cache.keys.pop_front();
                cache.values.pop_front();
            }
        }
        let scale = 1.0 / (hd as f32).sqrt();
        let mut att = vec![0.0; cfg.d_model];
        let mut scores = Vec::with_capacity(cache.len());
        for hh in 0..heads {
            let col = hh * hd;
            let qi = &q[col..col + hd];
            scores.clear();
            scores.extend(cache.keys.iter().map(|kj| kernels::dot(qi, &kj[col..col + hd]) * scale));
            kernels::softmax_in_place(&mut scores);
            let oi = &mut att[col..col + hd];
            for (pr, vj) in scores.iter().zip(&cache.values) {
                kernels::axpy(*pr, &vj[col..col + hd], oi);
            }
        }
        let o = linear_row(&att, p.get(blk.wo), None);
        for (xi, oi) in x.iter_mut().zip(&o) {
            *xi += oi;
        }
        let h = norm_row(x, p.get(blk.norm2));
        let mut f = linear_row(&h, p.get(blk.w1), Some(p.get(blk.b1)));
        for v in f.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let f = linear_row(&f, p.get(blk.w2), Some(p.get(blk.b2)));
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
    }

    /// Extends the encoder by one audio frame and returns `X_t`.
    pub fn encode_step(&self, state: &mut StepState, audio: usize) -> Result<Vec<f32>> {
        if audio >= self.config.audio_vocab {
            return Err(Error::UnknownToken(format!("audio id {audio}")));
        }
        if state.enc_t >= self.config.max_frames {
            return Err(Error::FrameBudget(self.config.max_frames));
        }
        let l = &self.layout;
        let mut x = self.params.get(l.audio_emb).row(audio).to_vec();
        for (blk, cache) in l.enc.iter().zip(state.enc.iter_mut()) {
            self.block_step(blk, cache, &mut x, state.enc_t);
        }
        let x = norm_row(&x, self.params.get(l.enc_norm));
        state.enc_t += 1;
        Ok(linear_row(
            &x,
            self.params.get(l.adapter_w),
            Some(self.params.get(l.adapter_b)),
        ))
    }

    /// One causal decoder frame on `H_in[t]`.
    pub fn decoder_step(&self, state: &mut StepState, h_in: &[f32]) -> Result<StepOutput> {
        if h_in.len() != self.config.d_model {
            return Err(Error::Shape(format!("decoder_step input of length {}", h_in.len())));
        }
        if state.t >= self.config.max_frames {
            return Err(Error::FrameBudget(self.config.max_frames));
        }
        let l = &self.layout;
        let p = &self.params;
        let mut h = h_in.to_vec();
        for (blk, cache) in l.dec.iter().zip(state.dec.iter_mut()) {
            self.block_step(blk, cache, &mut h, state.t);
        }
        let hidden = norm_row(&h, p.get(l.dec_norm));
        let logits = linear_row(&hidden, p.get(l.head_w), Some(p.get(l.head_b)));
        let mut t = linear_row(&hidden, p.get(l.time_w1), Some(p.get(l.time_b1)));
        for v in t.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let t = linear_row(&t, p.get(l.time_w2), Some(p.get(l.time_b2)));
        state.t += 1;
        Ok(StepOutput {
            hidden,
            logits,
            g: kernels::sigmoid(t[0]),
        })
    }
}
