use std::rc::Rc;

use super::{BlockIdx, Model};
use crate::error::{Error, Result};
use crate::numerics::{AttnSpec, Packing, ParamSet, Tape, Tensor, Var};
use crate::schema::{validate, DuplexRecord, TextToken};

/// Which carry-in the decoder sees while listening during teacher forcing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Conventional duplex: the `<SIL>` embedding.
    Pretrain,
    /// The expert's latent label `Z`.
    Latent,
}

/// Records packed row-wise for one teacher-forced pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub packing: Rc<Packing>,
    pub audio: Vec<usize>,
    pub agent: Vec<usize>,
    pub g: Vec<u8>,
    /// Per record.
    pub snr_db: Vec<Option<f32>>,
}

impl Batch {
    pub fn new(records: &[&DuplexRecord], max_frames: usize) -> Result<Batch> {
        if records.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut lengths = Vec::with_capacity(records.len());
        let (mut audio, mut agent, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for r in records {
            if let Some(v) = validate(r).first() {
                return Err(Error::Layout(format!("record {}: {v}", r.seed)));
            }
            if r.is_empty() {
                return Err(Error::Invalid(format!("record {} is empty", r.seed)));
            }
            if r.len() > max_frames {
                return Err(Error::FrameBudget(max_frames));
            }
            lengths.push(r.len());
            audio.extend(r.user.iter().map(|a| a.id()));
            agent.extend(r.agent.iter().map(|t| t.id()));
            g.extend_from_slice(&r.g);
        }
        Ok(Batch {
            packing: Rc::new(Packing::new(&lengths)),
            audio,
            agent,
            g,
            snr_db: records.iter().map(|r| r.snr_db).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.agent.len()
    }
}

/// Maps parameter indices to tape variables, creating each once per tape.
/// Frozen parameters enter the tape as constants.
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl Binder {
    pub fn new(params: &ParamSet) -> Binder {
        Binder {
            vars: vec![None; params.len()],
            trainable: vec![true; params.len()],
        }
    }

    /// Every parameter enters as a constant.
    pub fn frozen(params: &ParamSet) -> Binder {
        Binder {
            vars: vec![None; params.len()],
            trainable: vec![false; params.len()],
        }
    }

    pub fn set_trainable(&mut self, indices: &[usize], on: bool) {
        for &i in indices {
            self.trainable[i] = on;
        }
    }

    pub fn var(&mut self, tape: &mut Tape, params: &ParamSet, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = if self.trainable[i] {
            tape.param(i, params.get(i))
        } else {
            tape.constant(params.get(i).clone())
        };
        self.vars[i] = Some(v);
        v
    }

    /// Tape variable of parameter `i` if it was used.
    pub fn get(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertOut {
    pub hidden: Var,
    pub logits: Var,
    /// `W^e`, rows on the simplex.
    pub weights: Var,
    /// `Z = W^e E`.
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOut {
    pub hidden: Var,
    pub logits: Var,
    /// Timing probabilities, one per row.
    pub g_hat: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub x: Var,
    pub h_in: Var,
    pub expert: Option<ExpertOut>,
    pub decoder: DecoderOut,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        x: Var,
        blk: &BlockIdx,
        packing: &Rc<Packing>,
        spec: AttnSpec,
        rope: bool,
    ) -> Result<Var> {
        let p = &self.params;
        let n1 = b.var(tape, p, blk.norm1);
        let h = tape.rms_norm(x, n1)?;
        let (wq, wk, wv, wo) = (
            b.var(tape, p, blk.wq),
            b.var(tape, p, blk.wk),
            b.var(tape, p, blk.wv),
            b.var(tape, p, blk.wo),
        );
        let mut q = tape.linear(h, wq, None)?;
        let mut k = tape.linear(h, wk, None)?;
        let v = tape.linear(h, wv, None)?;
        if rope {
            q = tape.rope(q, packing, spec.heads)?;
            k = tape.rope(k, packing, spec.heads)?;
        }
        let a = tape.attention(q, k, v, packing, spec)?;
        let o = tape.linear(a, wo, None)?;
        let x = tape.add(x, o)?;
        let n2 = b.var(tape, p, blk.norm2);
        let h = tape.rms_norm(x, n2)?;
        let (w1, b1, w2, b2) = (
            b.var(tape, p, blk.w1),
            b.var(tape, p, blk.b1),
            b.var(tape, p, blk.w2),
            b.var(tape, p, blk.b2),
        );
        let f = tape.linear(h, w1, Some(b1))?;
        let f = tape.gelu(f);
        let f = tape.linear(f, w2, Some(b2))?;
        tape.add(x, f)
    }

    fn causal_spec(&self) -> AttnSpec {
        AttnSpec {
            heads: self.config.n_heads,
            causal: true,
            window: self.config.window,
        }
    }

    /// Streaming speech encoder: audio ids to `X`.
    pub fn encode(&self, tape: &mut Tape, b: &mut Binder, batch: &Batch) -> Result<Var> {
        let p = &self.params;
        let l = &self.layout;
        if let Some(&bad) = batch.audio.iter().find(|&&a| a >= self.config.audio_vocab) {
            return Err(Error::UnknownToken(format!("audio id {bad}")));
        }
        let table = b.var(tape, p, l.audio_emb);
        let mut x = tape.gather(table, &batch.audio)?;
        for blk in &l.enc {
            x = self.block(tape, b, x, blk, &batch.packing, self.causal_spec(), true)?;
        }
        let n = b.var(tape, p, l.enc_norm);
        let x = tape.rms_norm(x, n)?;
        let (w, bias) = (b.var(tape, p, l.adapter_w), b.var(tape, p, l.adapter_b));
        tape.linear(x, w, Some(bias))
    }

    /// Bidirectional expert over `X + H^txt` with learned absolute positions.
    pub fn expert(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        batch: &Batch,
        x: Var,
        h_txt: Var,
    ) -> Result<ExpertOut> {
        let p = &self.params;
        let l = &self.layout;
        if batch.packing.positions.iter().any(|&t| t >= self.config.max_frames) {
            return Err(Error::FrameBudget(self.config.max_frames));
        }
        let pos_table = b.var(tape, p, l.exp_pos);
        let pos = tape.gather(pos_table, &batch.packing.positions)?;
        let s = tape.add(x, h_txt)?;
        let mut h = tape.add(s, pos)?;
        let spec = AttnSpec {
            heads: self.config.n_heads,
            causal: false,
            window: 0,
        };
        for blk in &l.exp {
            h = self.block(tape, b, h, blk, &batch.packing, spec, false)?;
        }
        let n = b.var(tape, p, l.exp_norm);
        let hidden = tape.rms_norm(h, n)?;
        let (w, bias) = (b.var(tape, p, l.exp_w), b.var(tape, p, l.exp_b));
        let logits = tape.linear(hidden, w, Some(bias))?;
        let scaled = if self.config.tau == 1.0 {
            logits
        } else {
            tape.scale(logits, 1.0 / self.config.tau)
        };
        let weights = tape.softmax_rows(scaled);
        let e = b.var(tape, p, l.text_emb);
        let z = tape.matmul(weights, e)?;
        Ok(ExpertOut {
            hidden,
            logits,
            weights,
            z,
        })
    }

    /// Causal decoder over `H_in`, with output head and timing head.
    pub fn decode(&self, tape: &mut Tape, b: &mut Binder, batch: &Batch, h_in: Var) -> Result<DecoderOut> {
        let p = &self.params;
        let l = &self.layout;
        let mut h = h_in;
        for blk in &l.dec {
            h = self.block(tape, b, h, blk, &batch.packing, self.causal_spec(), true)?;
        }
        let n = b.var(tape, p, l.dec_norm);
        let hidden = tape.rms_norm(h, n)?;
        let (hw, hb) = (b.var(tape, p, l.head_w), b.var(tape, p, l.head_b));
        let logits = tape.linear(hidden, hw, Some(hb))?;
        let (w1, b1) = (b.var(tape, p, l.time_w1), b.var(tape, p, l.time_b1));
        let (w2, b2) = (b.var(tape, p, l.time_w2), b.var(tape, p, l.time_b2));
        let t = tape.linear(hidden, w1, Some(b1))?;
        let t = tape.gelu(t);
        let t = tape.linear(t, w2, Some(b2))?;
        let g_hat = tape.sigmoid(t);
        Ok(DecoderOut {
            hidden,
            logits,
            g_hat,
        })
    }

    /// Builds `H_in = X + C` from an encoded `X` and runs the decoder.
    pub fn forward_from_x(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        batch: &Batch,
        x: Var,
        mode: ForwardMode,
    ) -> Result<ForwardOut> {
        if let Some(&bad) = batch.agent.iter().find(|&&t| t >= self.config.text_vocab) {
            return Err(Error::UnknownToken(format!("text id {bad}")));
        }
        let e = b.var(tape, &self.params, self.layout.text_emb);
        let n = batch.rows();
        let sil = TextToken::SIL.id();
        let mut prev_tok = vec![sil; n];
        let mut prev_row = vec![0; n];
        let mut use_tok = vec![true; n];
        for &(s, len) in &batch.packing.segments {
            for r in s + 1..s + len {
                prev_row[r] = r - 1;
                if batch.g[r - 1] == 1 {
                    prev_tok[r] = batch.agent[r - 1];
                } else {
                    use_tok[r] = false;
                }
            }
        }
        let (c, expert) = match mode {
            ForwardMode::Pretrain => (tape.gather(e, &prev_tok)?, None),
            ForwardMode::Latent => {
                let h_txt = tape.gather(e, &batch.agent)?;
                let ex = self.expert(tape, b, batch, x, h_txt)?;
                let tok = tape.gather(e, &prev_tok)?;
                let lat = tape.gather(ex.z, &prev_row)?;
                (tape.blend_rows(tok, lat, &use_tok)?, Some(ex))
            }
        };
        let h_in = tape.add(x, c)?;
        let decoder = self.decode(tape, b, batch, h_in)?;
        Ok(ForwardOut {
            x,
            h_in,
            expert,
            decoder,
        })
    }

    pub fn teacher_forced_forward(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        batch: &Batch,
        mode: ForwardMode,
    ) -> Result<ForwardOut> {
        let x = self.encode(tape, b, batch)?;
        self.forward_from_x(tape, b, batch, x, mode)
    }

    /// Expert outputs `(h^e, W^e, Z)` for a single sequence given `X` and
    /// unshifted label embeddings.
    pub fn expert_forward(&self, x: &Tensor, h_txt: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        if x.shape() != h_txt.shape() || x.shape().len() != 2 || x.cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "expert_forward: X {:?} vs H {:?}",
                x.shape(),
                h_txt.shape()
            )));
        }
        let t = x.rows();
        let batch = Batch {
            packing: Rc::new(Packing::new(&[t])),
            audio: vec![0; t],
            agent: vec![0; t],
            g: vec![0; t],
            snr_db: vec![None],
        };
        let mut tape = Tape::new();
        let mut b = Binder::frozen(&self.params);
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h_txt.clone());
        let out = self.expert(&mut tape, &mut b, &batch, xv, hv)?;
        Ok((
            tape.value(out.hidden).clone(),
            tape.value(out.weights).clone(),
            tape.value(out.z).clone(),
        ))
    }
}
