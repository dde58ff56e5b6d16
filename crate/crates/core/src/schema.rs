//! Vocabularies, the synchronized two-channel frame layout, timing labels and
//! the one-step carry-in alignment shared by training and inference.
//!
//! The agent channel of every record follows the layout
//! `<SIL>×L, <BOS>, r1..rn, <PAD>×p, <EOS>, <SIL>…`, with the timing label
//! `g = 1` from each `<BOS>` through its `<EOS>` inclusive.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of content words shared by the text and audio vocabularies.
pub const N_WORDS: usize = 16;

const TEXT_SURFACES: [&str; 4 + 10 + N_WORDS] = [
    "<SIL>", "<BOS>", "<EOS>", "<PAD>", "d0", "d1", "d2", "d3", "d4", "d5", "d6", "d7", "d8", "d9",
    "w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9", "w10", "w11", "w12", "w13", "w14",
    "w15",
];

const AUDIO_SURFACES: [&str; 1 + 10 + 5 + 1 + N_WORDS] = [
    "<USIL>", "a0", "a1", "a2", "a3", "a4", "a5", "a6", "a7", "a8", "a9", "q_sum", "q_rev",
    "q_max", "q_par", "q_copy", "q_end", "f0", "f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8",
    "f9", "f10", "f11", "f12", "f13", "f14", "f15",
];

/// The algorithmic query families of the QA corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Copy,
    Rev,
    Sum,
    Max,
    Par,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Copy, Task::Rev, Task::Sum, Task::Max, Task::Par];

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Rev => "rev",
            Task::Sum => "sum",
            Task::Max => "max",
            Task::Par => "par",
        }
    }

    pub fn from_name(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Task {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Task {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Task::from_name(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown task {s:?}")))
    }
}

/// Agent-channel token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TextToken(pub u16);

impl TextToken {
    pub const SIL: TextToken = TextToken(0);
    pub const BOS: TextToken = TextToken(1);
    pub const EOS: TextToken = TextToken(2);
    pub const PAD: TextToken = TextToken(3);
    pub const VOCAB_SIZE: usize = TEXT_SURFACES.len();

    pub fn digit(d: u8) -> TextToken {
        assert!(d < 10);
        TextToken(4 + d as u16)
    }

    pub fn word(k: usize) -> TextToken {
        assert!(k < N_WORDS);
        TextToken(14 + k as u16)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn from_id(id: usize) -> Result<TextToken> {
        if id < Self::VOCAB_SIZE {
            Ok(TextToken(id as u16))
        } else {
            Err(Error::UnknownToken(format!("text id {id}")))
        }
    }

    pub fn is_control(self) -> bool {
        self.0 < 4
    }

    pub fn as_digit(self) -> Option<u8> {
        (4..14).contains(&self.0).then(|| (self.0 - 4) as u8)
    }

    pub fn as_word(self) -> Option<usize> {
        (self.0 >= 14 && self.id() < Self::VOCAB_SIZE).then(|| (self.0 - 14) as usize)
    }

    pub fn surface(self) -> &'static str {
        TEXT_SURFACES[self.id()]
    }

    pub fn parse(s: &str) -> Result<TextToken> {
        TEXT_SURFACES
            .iter()
            .position(|&x| x == s)
            .map(|i| TextToken(i as u16))
            .ok_or_else(|| Error::UnknownToken(s.to_string()))
    }
}

/// User-channel symbol id (a separate index space from [`TextToken`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AudioToken(pub u16);

impl AudioToken {
    pub const USIL: AudioToken = AudioToken(0);
    pub const Q_END: AudioToken = AudioToken(16);
    pub const VOCAB_SIZE: usize = AUDIO_SURFACES.len();

    pub fn digit(d: u8) -> AudioToken {
        assert!(d < 10);
        AudioToken(1 + d as u16)
    }

    pub fn marker(task: Task) -> AudioToken {
        AudioToken(match task {
            Task::Sum => 11,
            Task::Rev => 12,
            Task::Max => 13,
            Task::Par => 14,
            Task::Copy => 15,
        })
    }

    pub fn filler(k: usize) -> AudioToken {
        assert!(k < N_WORDS);
        AudioToken(17 + k as u16)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn from_id(id: usize) -> Result<AudioToken> {
        if id < Self::VOCAB_SIZE {
            Ok(AudioToken(id as u16))
        } else {
            Err(Error::UnknownToken(format!("audio id {id}")))
        }
    }

    pub fn as_digit(self) -> Option<u8> {
        (1..11).contains(&self.0).then(|| (self.0 - 1) as u8)
    }

    pub fn as_marker(self) -> Option<Task> {
        match self.0 {
            11 => Some(Task::Sum),
            12 => Some(Task::Rev),
            13 => Some(Task::Max),
            14 => Some(Task::Par),
            15 => Some(Task::Copy),
            _ => None,
        }
    }

    pub fn as_filler(self) -> Option<usize> {
        (self.0 >= 17 && self.id() < Self::VOCAB_SIZE).then(|| (self.0 - 17) as usize)
    }

    pub fn surface(self) -> &'static str {
        AUDIO_SURFACES[self.id()]
    }

    pub fn parse(s: &str) -> Result<AudioToken> {
        AUDIO_SURFACES
            .iter()
            .position(|&x| x == s)
            .map(|i| AudioToken(i as u16))
            .ok_or_else(|| Error::UnknownToken(s.to_string()))
    }
}

macro_rules! surface_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.surface())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                <$t>::parse(&s).map_err(serde::de::Error::custom)
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.surface())
            }
        }
    };
}

surface_serde!(TextToken);
surface_serde!(AudioToken);

/// All text surface forms in index order.
pub fn text_vocab() -> &'static [&'static str] {
    &TEXT_SURFACES
}

/// All audio surface forms in index order.
pub fn audio_vocab() -> &'static [&'static str] {
    &AUDIO_SURFACES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpan {
    /// Frame of the task marker.
    pub start: usize,
    /// Frame of `q_end`.
    pub end: usize,
    pub task: Task,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSpan {
    pub bos: usize,
    pub eos: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interrupted_at: Option<usize>,
}

impl TurnSpan {
    pub fn len(&self) -> usize {
        self.eos - self.bos + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Events {
    pub queries: Vec<QuerySpan>,
    /// Expected answer per query, in query order.
    pub answers: Vec<Vec<TextToken>>,
    pub turns: Vec<TurnSpan>,
    /// Onset of the first interruption, if any.
    #[serde(default)]
    pub interruption_onset: Option<usize>,
}

/// One synchronized dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplexRecord {
    pub user: Vec<AudioToken>,
    pub agent: Vec<TextToken>,
    pub g: Vec<u8>,
    pub events: Events,
    pub task: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f32>,
}

impl DuplexRecord {
    pub fn len(&self) -> usize {
        self.agent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agent.is_empty()
    }

    /// Every frame whose onset of interruption is recorded on a turn.
    pub fn interruptions(&self) -> impl Iterator<Item = (usize, &TurnSpan)> {
        self.events
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.interrupted_at.is_some())
    }
}

/// `[<SIL>×listen_len, <BOS>, response…, <PAD>×pad_len, <EOS>]`.
pub fn build_agent_stream(
    listen_len: usize,
    response: &[TextToken],
    pad_len: usize,
) -> Result<Vec<TextToken>> {
    if response.is_empty() {
        return Err(Error::Invalid("agent response must not be empty".into()));
    }
    if let Some(t) = response.iter().find(|t| t.is_control()) {
        return Err(Error::Invalid(format!("control token {t} inside response")));
    }
    let mut out = Vec::with_capacity(listen_len + response.len() + pad_len + 2);
    out.extend(std::iter::repeat_n(TextToken::SIL, listen_len));
    out.push(TextToken::BOS);
    out.extend_from_slice(response);
    out.extend(std::iter::repeat_n(TextToken::PAD, pad_len));
    out.push(TextToken::EOS);
    Ok(out)
}

/// Timing labels: 1 from each `<BOS>` through its `<EOS>` inclusive.
pub fn g_labels(agent: &[TextToken]) -> Result<Vec<u8>> {
    let mut g = Vec::with_capacity(agent.len());
    let mut open: Option<usize> = None;
    for (i, &tok) in agent.iter().enumerate() {
        match tok {
            TextToken::BOS => {
                if let Some(b) = open {
                    return Err(Error::Layout(format!("<BOS> at {i} while turn from {b} is open")));
                }
                open = Some(i);
                g.push(1);
            }
            TextToken::EOS => {
                if open.take().is_none() {
                    return Err(Error::Layout(format!("<EOS> at {i} without <BOS>")));
                }
                g.push(1);
            }
            _ => g.push(u8::from(open.is_some())),
        }
    }
    if let Some(b) = open {
        return Err(Error::Layout(format!("<BOS> at {b} never closed")));
    }
    Ok(g)
}

/// `(bos, eos)` pairs of a well-formed agent stream.
pub fn turn_spans(agent: &[TextToken]) -> Result<Vec<(usize, usize)>> {
    g_labels(agent)?;
    let mut spans = Vec::new();
    let mut bos = 0;
    for (i, &t) in agent.iter().enumerate() {
        if t == TextToken::BOS {
            bos = i;
        } else if t == TextToken::EOS {
            spans.push((bos, i));
        }
    }
    Ok(spans)
}

/// Where the decoder input at frame `t` takes its carry-in embedding from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarrySource {
    Token(TextToken),
    /// The latent mixture produced at the given frame.
    Latent(usize),
}

/// One-step-shift alignment: frame 0 carries `<SIL>`; afterwards the previous
/// frame's token while the agent speaks, and its latent otherwise.
pub fn carry_source(agent: &[TextToken], g: &[u8], t: usize) -> CarrySource {
    if t == 0 {
        CarrySource::Token(TextToken::SIL)
    } else if g[t - 1] == 1 {
        CarrySource::Token(agent[t - 1])
    } else {
        CarrySource::Latent(t - 1)
    }
}

/// Carry-in embedding `C[t]` for a record.
pub fn carry_in<L, E>(record: &DuplexRecord, t: usize, latent_at: L, embed: E) -> Vec<f32>
where
    L: Fn(usize) -> Vec<f32>,
    E: Fn(TextToken) -> Vec<f32>,
{
    match carry_source(&record.agent, &record.g, t) {
        CarrySource::Token(tok) => embed(tok),
        CarrySource::Latent(s) => latent_at(s),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "[{}] at {}: {}", self.rule, i, self.detail),
            None => write!(f, "[{}] {}", self.rule, self.detail),
        }
    }
}

fn violation(index: Option<usize>, rule: &'static str, detail: impl Into<String>) -> Violation {
    Violation {
        index,
        rule,
        detail: detail.into(),
    }
}

#[derive(PartialEq)]
enum Seg {
    Outside,
    Content,
    Padding,
}

/// Checks every record invariant; an empty list means the record is valid.
pub fn validate(record: &DuplexRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let t = record.agent.len();
    if record.user.len() != t || record.g.len() != t {
        out.push(violation(
            None,
            "length",
            format!(
                "user {} / agent {} / g {} frames",
                record.user.len(),
                t,
                record.g.len()
            ),
        ));
        return out;
    }

    let mut state = Seg::Outside;
    let mut spans = Vec::new();
    let mut bos = 0;
    for (i, (&tok, &g)) in record.agent.iter().zip(&record.g).enumerate() {
        let inside = state != Seg::Outside || tok == TextToken::BOS;
        if g > 1 {
            out.push(violation(Some(i), "g", format!("label {g} is not 0/1")));
        } else if (g == 1) != inside {
            out.push(violation(
                Some(i),
                "g",
                format!("label {g} but frame is {} a turn", if inside { "inside" } else { "outside" }),
            ));
        }
        match (&state, tok) {
            (Seg::Outside, TextToken::BOS) => {
                state = Seg::Content;
                bos = i;
            }
            (Seg::Outside, TextToken::SIL) => {}
            (Seg::Outside, other) => {
                out.push(violation(Some(i), "outside", format!("{other} outside a turn")))
            }
            (_, TextToken::EOS) => {
                if i == bos + 1 {
                    out.push(violation(Some(i), "empty", "turn without content"));
                }
                spans.push((bos, i));
                state = Seg::Outside;
            }
            (_, TextToken::BOS) => out.push(violation(Some(i), "nested", "<BOS> inside a turn")),
            (_, TextToken::SIL) => out.push(violation(Some(i), "silence", "<SIL> inside a turn")),
            (_, TextToken::PAD) => {
                if i == bos + 1 {
                    out.push(violation(Some(i), "empty", "padding before content"));
                }
                state = Seg::Padding;
            }
            (Seg::Padding, other) => {
                out.push(violation(Some(i), "padding", format!("{other} after <PAD>")))
            }
            (_, _) => {}
        }
    }
    if state != Seg::Outside {
        out.push(violation(Some(bos), "unclosed", "<BOS> never closed"));
    }

    let ev = &record.events;
    let recorded: Vec<(usize, usize)> = ev.turns.iter().map(|s| (s.bos, s.eos)).collect();
    if recorded != spans {
        out.push(violation(
            None,
            "events.turns",
            format!("recorded {recorded:?}, stream has {spans:?}"),
        ));
    }
    if ev.answers.len() != ev.queries.len() {
        out.push(violation(None, "events.answers", "one answer per query expected"));
    }
    for q in &ev.queries {
        if q.start > q.end || q.end >= t {
            out.push(violation(Some(q.start), "events.queries", "span out of range"));
            continue;
        }
        if record.user[q.start].as_marker() != Some(q.task) {
            out.push(violation(Some(q.start), "events.queries", "span does not start at its task marker"));
        }
        if record.user[q.end] != AudioToken::Q_END {
            out.push(violation(Some(q.end), "events.queries", "span does not end at q_end"));
        }
    }
    let first_onset = ev.turns.iter().find_map(|s| s.interrupted_at);
    if first_onset != ev.interruption_onset {
        out.push(violation(
            ev.interruption_onset,
            "events.interruption_onset",
            "does not match the first interrupted turn",
        ));
    }
    for s in &ev.turns {
        if let Some(on) = s.interrupted_at {
            if on <= s.bos || on >= s.eos {
                out.push(violation(Some(on), "events.turns", "onset outside its turn"));
            }
        }
    }
    out
}
