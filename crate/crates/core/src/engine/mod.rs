//! Frame-synchronous streaming inference: one agent emission per user frame.

mod protocol;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use protocol::{ClientMsg, ServerMsg, VocabInfo};

use crate::error::{Error, Result};
use crate::model::{Model, ModelMode, Phase, StepState};
use crate::schema::{AudioToken, TextToken};

/// Irregular emissions the gating rule lets through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anomaly {
    /// Gate open while listening with a control token other than `<BOS>`.
    ControlWhileListening,
    /// Gate open while listening with a content token.
    ContentWithoutBos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub t: usize,
    pub user: AudioToken,
    pub agent: TextToken,
    pub g: f32,
    /// Phase after the step.
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<Anomaly>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionOutput {
    pub agent: TextToken,
    pub g: f32,
    pub phase: Phase,
    pub end_of_turn: bool,
    pub anomaly: Option<Anomaly>,
}

/// One live dialogue over shared read-only parameters.
#[derive(Clone, Debug)]
pub struct Session {
    model: Arc<Model>,
    mode: ModelMode,
    state: StepState,
    /// Set by `<EOS>`; only a gated `<BOS>` clears it.
    awaiting_bos: bool,
    trace: Option<Vec<TraceFrame>>,
}

impl Session {
    pub fn new(model: Arc<Model>, mode: ModelMode) -> Session {
        let state = model.new_state();
        Session {
            model,
            mode,
            state,
            awaiting_bos: false,
            trace: Some(Vec::new()),
        }
    }

    /// A session that does not keep its per-frame history.
    pub fn without_trace(model: Arc<Model>, mode: ModelMode) -> Session {
        Session {
            trace: None,
            ..Session::new(model, mode)
        }
    }

    pub fn reset(&mut self) {
        self.state = self.model.new_state();
        self.awaiting_bos = false;
        if let Some(tr) = self.trace.as_mut() {
            tr.clear();
        }
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn state(&self) -> &StepState {
        &self.state
    }

    pub fn trace(&self) -> &[TraceFrame] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<TraceFrame> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Consumes one user frame and emits one agent token.
    pub fn step(&mut self, user: AudioToken) -> Result<SessionOutput> {
        let m = &*self.model;
        if self.state.t >= m.config.max_frames {
            return Err(Error::FrameBudget(m.config.max_frames));
        }
        let x = m.encode_step(&mut self.state, user.id())?;
        let h_in: Vec<f32> = x.iter().zip(&self.state.carry).map(|(a, b)| a + b).collect();
        let out = m.decoder_step(&mut self.state, &h_in)?;
        let argmax = argmax(&out.logits);
        let best = TextToken::from_id(argmax)?;
        let gate = out.g >= m.config.theta_g;
        let listening = self.state.phase == Phase::Listening;

        let mut anomaly = None;
        let emitted = if self.awaiting_bos {
            if gate && best == TextToken::BOS {
                self.awaiting_bos = false;
                Some(best)
            } else {
                None
            }
        } else if gate {
            if listening && best.is_control() && best != TextToken::BOS && best != TextToken::SIL {
                anomaly = Some(Anomaly::ControlWhileListening);
            } else if listening && !best.is_control() {
                anomaly = Some(Anomaly::ContentWithoutBos);
            }
            Some(best)
        } else {
            None
        };

        let (agent, phase) = match emitted {
            Some(tok) => {
                self.state.carry = m.embed(tok.id()).to_vec();
                if tok == TextToken::EOS {
                    self.awaiting_bos = true;
                    (tok, Phase::Listening)
                } else {
                    (tok, Phase::Speaking)
                }
            }
            None => {
                self.state.carry = match self.mode {
                    ModelMode::Latent => m.latent_feedback(&out.logits),
                    ModelMode::Baseline => m.embed(TextToken::SIL.id()).to_vec(),
                };
                (TextToken::SIL, Phase::Listening)
            }
        };
        self.state.phase = phase;
        if let Some(tr) = self.trace.as_mut() {
            tr.push(TraceFrame {
                t: self.state.t - 1,
                user,
                agent,
                g: out.g,
                phase,
                anomaly,
            });
        }
        Ok(SessionOutput {
            agent,
            g: out.g,
            phase,
            end_of_turn: agent == TextToken::EOS,
            anomaly,
        })
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-frame record of a whole dialogue.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub frames: Vec<TraceFrame>,
}

impl EventTrace {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn agent(&self) -> Vec<TextToken> {
        self.frames.iter().map(|f| f.agent).collect()
    }

    pub fn frames_with(&self, tok: TextToken) -> Vec<usize> {
        self.frames.iter().filter(|f| f.agent == tok).map(|f| f.t).collect()
    }

    pub fn bos_frames(&self) -> Vec<usize> {
        self.frames_with(TextToken::BOS)
    }

    pub fn eos_frames(&self) -> Vec<usize> {
        self.frames_with(TextToken::EOS)
    }

    pub fn anomalies(&self) -> impl Iterator<Item = (usize, Anomaly)> + '_ {
        self.frames.iter().filter_map(|f| f.anomaly.map(|a| (f.t, a)))
    }
}

/// Folds `Session::step` over a complete user stream.
pub fn run_dialogue(model: &Arc<Model>, mode: ModelMode, user: &[AudioToken]) -> Result<EventTrace> {
    if user.is_empty() {
        return Err(Error::Invalid("empty user stream".into()));
    }
    let mut s = Session::new(model.clone(), mode);
    for &u in user {
        s.step(u)?;
    }
    Ok(EventTrace {
        frames: s.take_trace(),
    })
}
