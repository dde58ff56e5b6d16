//! Response accuracy, turn-taking and barge-in metrics over engine traces,
//! paired A/B reports and embedding export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{run_dialogue, Anomaly, EventTrace};
use crate::error::{Error, Result};
use crate::model::{Model, ModelMode};
use crate::schema::{DuplexRecord, TextToken};

pub const FRAME_RATE_HZ: f64 = 12.5;
pub const RESPONSE_WINDOW: usize = 40;
pub const BARGE_IN_WINDOW: usize = 25;

/// Windows of the turn-taking and barge-in metrics, in frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub response_window: usize,
    pub barge_in_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            response_window: RESPONSE_WINDOW,
            barge_in_window: BARGE_IN_WINDOW,
        }
    }
}

pub fn frames_to_seconds(frames: f64) -> f64 {
    frames / FRAME_RATE_HZ
}

fn check_pair(trace: &EventTrace, record: &DuplexRecord) -> Result<()> {
    if trace.len() != record.len() {
        return Err(Error::Invalid(format!(
            "trace has {} frames, record has {}",
            trace.len(),
            record.len()
        )));
    }
    for (i, (f, &u)) in trace.frames.iter().zip(&record.user).enumerate() {
        if f.t != i || f.user != u {
            return Err(Error::Invalid(format!("trace frame {i} does not match the record")));
        }
    }
    Ok(())
}

/// Content tokens after the `<BOS>` at `bos`, up to the first `<PAD>`,
/// `<EOS>` or new `<BOS>`. Emitted `<SIL>` frames are skipped.
pub fn extract_answer(agent: &[TextToken], bos: usize) -> Vec<TextToken> {
    agent[bos + 1..]
        .iter()
        .take_while(|&&t| t != TextToken::PAD && t != TextToken::EOS && t != TextToken::BOS)
        .filter(|&&t| t != TextToken::SIL)
        .copied()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundAnswer {
    pub expected: Vec<TextToken>,
    pub extracted: Option<Vec<TextToken>>,
    pub correct: bool,
    /// Interrupted rounds carry a truncated reference and are not scored.
    pub scored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    /// All scored rounds correct (false when nothing was scored).
    pub correct: bool,
    pub rounds: Vec<RoundAnswer>,
    pub anomalies: Vec<String>,
}

/// Round `i` is answered by the first `<BOS>` in `[start_i, start_{i+1})`.
fn round_window(record: &DuplexRecord, i: usize) -> (usize, usize) {
    let q = &record.events.queries;
    let end = q.get(i + 1).map_or(record.len(), |n| n.start);
    (q[i].start, end)
}

pub fn response_accuracy(trace: &EventTrace, record: &DuplexRecord) -> Result<AccuracyResult> {
    check_pair(trace, record)?;
    let ev = &record.events;
    if ev.queries.len() != ev.answers.len() {
        return Err(Error::Invalid("record has unpaired queries and answers".into()));
    }
    let agent = trace.agent();
    let bos = trace.bos_frames();
    let mut rounds = Vec::with_capacity(ev.queries.len());
    let mut anomalies = Vec::new();
    for (i, expected) in ev.answers.iter().enumerate() {
        let (lo, hi) = round_window(record, i);
        let extracted = bos
            .iter()
            .find(|&&b| b >= lo && b < hi)
            .map(|&b| extract_answer(&agent, b));
        let scored = ev.turns.get(i).is_none_or(|t| t.interrupted_at.is_none());
        if extracted.is_none() {
            anomalies.push("no_response".to_string());
        }
        let correct = extracted.as_ref() == Some(expected);
        rounds.push(RoundAnswer {
            expected: expected.clone(),
            extracted,
            correct,
            scored,
        });
    }
    let scored: Vec<_> = rounds.iter().filter(|r| r.scored).collect();
    Ok(AccuracyResult {
        correct: !scored.is_empty() && scored.iter().all(|r| r.correct),
        rounds,
        anomalies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTiming {
    pub query_end: usize,
    pub bos: Option<usize>,
    /// `bos − query_end`; negative for a turn taken before the query ended.
    pub latency: Option<i64>,
    /// A `<BOS>` within `[query_end, query_end + window]`.
    pub taken: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnTakingResult {
    pub rounds: Vec<RoundTiming>,
    pub anomalies: Vec<String>,
}

pub fn turn_taking(trace: &EventTrace, record: &DuplexRecord, window: usize) -> Result<TurnTakingResult> {
    check_pair(trace, record)?;
    let bos = trace.bos_frames();
    let mut rounds = Vec::new();
    let mut anomalies = Vec::new();
    for (i, q) in record.events.queries.iter().enumerate() {
        let (lo, hi) = round_window(record, i);
        let first = bos.iter().copied().find(|&b| b >= lo && b < hi && b <= q.end + window);
        let mut timing = RoundTiming {
            query_end: q.end,
            bos: first,
            latency: first.map(|b| b as i64 - q.end as i64),
            taken: false,
        };
        match timing.latency {
            Some(l) if l < 0 => anomalies.push("premature_turn".to_string()),
            Some(_) => timing.taken = true,
            None => {}
        }
        rounds.push(timing);
    }
    Ok(TurnTakingResult { rounds, anomalies })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BargeInResult {
    pub onset: usize,
    pub eos: Option<usize>,
    pub latency: Option<usize>,
    pub success: bool,
}

/// One entry per interrupted turn of the record.
pub fn barge_in(trace: &EventTrace, record: &DuplexRecord, window: usize) -> Result<Vec<BargeInResult>> {
    check_pair(trace, record)?;
    let onsets: Vec<usize> = record.events.turns.iter().filter_map(|t| t.interrupted_at).collect();
    if onsets.is_empty() {
        return Err(Error::Invalid("record has no interruption".into()));
    }
    let eos = trace.eos_frames();
    Ok(onsets
        .into_iter()
        .map(|onset| {
            let hit = eos.iter().copied().find(|&e| e >= onset && e <= onset + window);
            BargeInResult {
                onset,
                eos: hit,
                latency: hit.map(|e| e - onset),
                success: hit.is_some(),
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub dialogues: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dialogues: usize,
    /// Dialogues with at least one scored round.
    pub scored_dialogues: usize,
    pub accuracy: f64,
    pub rounds: usize,
    pub tor: f64,
    pub turn_latency_mean_frames: Option<f64>,
    pub turn_latency_median_frames: Option<f64>,
    pub turn_latency_mean_s: Option<f64>,
    pub turn_latency_median_s: Option<f64>,
    pub barge_ins: usize,
    pub barge_in_success_rate: Option<f64>,
    pub barge_in_latency_mean_frames: Option<f64>,
    pub barge_in_latency_median_frames: Option<f64>,
    pub barge_in_latency_mean_s: Option<f64>,
    pub barge_in_latency_median_s: Option<f64>,
    pub anomalies: BTreeMap<String, usize>,
    pub per_task: BTreeMap<String, TaskAccuracy>,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Midpoint median.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates metrics over `(trace, record)` pairs.
pub fn aggregate(pairs: &[(EventTrace, &DuplexRecord)], cfg: &EvalConfig) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let mut r = MetricsReport {
        dialogues: pairs.len(),
        ..MetricsReport::default()
    };
    let (mut correct, mut taken) = (0, 0);
    let (mut lat, mut blat) = (Vec::new(), Vec::new());
    let mut bsucc = 0;
    for (trace, rec) in pairs {
        let acc = response_accuracy(trace, rec)?;
        let tt = turn_taking(trace, rec, cfg.response_window)?;
        let has_scored = acc.rounds.iter().any(|x| x.scored);
        if has_scored {
            r.scored_dialogues += 1;
            correct += acc.correct as usize;
            let task = r.per_task.entry(rec.task.clone()).or_default();
            task.dialogues += 1;
            task.correct += acc.correct as usize;
        }
        r.rounds += tt.rounds.len();
        for t in &tt.rounds {
            if t.taken {
                taken += 1;
                lat.push(t.latency.expect("taken rounds have a latency") as f64);
            }
        }
        if rec.events.turns.iter().any(|t| t.interrupted_at.is_some()) {
            for b in barge_in(trace, rec, cfg.barge_in_window)? {
                r.barge_ins += 1;
                if let Some(l) = b.latency {
                    bsucc += 1;
                    blat.push(l as f64);
                }
            }
        }
        for a in acc.anomalies.into_iter().chain(tt.anomalies) {
            *r.anomalies.entry(a).or_default() += 1;
        }
        for (_, a) in trace.anomalies() {
            let key = match a {
                Anomaly::ControlWhileListening => "control_while_listening",
                Anomaly::ContentWithoutBos => "content_without_bos",
            };
            *r.anomalies.entry(key.to_string()).or_default() += 1;
        }
    }
    for t in r.per_task.values_mut() {
        t.accuracy = ratio(t.correct, t.dialogues);
    }
    r.accuracy = ratio(correct, r.scored_dialogues);
    r.tor = ratio(taken, r.rounds);
    r.turn_latency_mean_frames = mean(&lat);
    r.turn_latency_median_frames = median(&lat);
    r.turn_latency_mean_s = r.turn_latency_mean_frames.map(frames_to_seconds);
    r.turn_latency_median_s = r.turn_latency_median_frames.map(frames_to_seconds);
    r.barge_in_success_rate = (r.barge_ins > 0).then(|| ratio(bsucc, r.barge_ins));
    r.barge_in_latency_mean_frames = mean(&blat);
    r.barge_in_latency_median_frames = median(&blat);
    r.barge_in_latency_mean_s = r.barge_in_latency_mean_frames.map(frames_to_seconds);
    r.barge_in_latency_median_s = r.barge_in_latency_median_frames.map(frames_to_seconds);
    Ok(r)
}

pub fn run_traces(model: &Arc<Model>, mode: ModelMode, records: &[DuplexRecord]) -> Result<Vec<EventTrace>> {
    records.iter().map(|r| run_dialogue(model, mode, &r.user)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub accuracy: f64,
    pub tor: f64,
    pub turn_latency_median_frames: Option<f64>,
    pub barge_in_success_rate: Option<f64>,
    pub barge_in_latency_median_frames: Option<f64>,
    pub per_task: BTreeMap<String, f64>,
}

/// Latent model report, optional baseline report and their difference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub latent: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<MetricsDelta>,
}

fn opt_sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

pub fn delta(a: &MetricsReport, b: &MetricsReport) -> MetricsDelta {
    MetricsDelta {
        accuracy: a.accuracy - b.accuracy,
        tor: a.tor - b.tor,
        turn_latency_median_frames: opt_sub(a.turn_latency_median_frames, b.turn_latency_median_frames),
        barge_in_success_rate: opt_sub(a.barge_in_success_rate, b.barge_in_success_rate),
        barge_in_latency_median_frames: opt_sub(
            a.barge_in_latency_median_frames,
            b.barge_in_latency_median_frames,
        ),
        per_task: a
            .per_task
            .iter()
            .filter_map(|(k, ta)| b.per_task.get(k).map(|tb| (k.clone(), ta.accuracy - tb.accuracy)))
            .collect(),
    }
}

/// Runs every record's user channel through the engine and scores the traces.
pub fn evaluate(
    model: &Arc<Model>,
    mode: ModelMode,
    records: &[DuplexRecord],
    baseline: Option<(&Arc<Model>, ModelMode)>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let score = |m: &Arc<Model>, mode| -> Result<MetricsReport> {
        let traces = run_traces(m, mode, records)?;
        let pairs: Vec<_> = traces.into_iter().zip(records).collect();
        aggregate(&pairs, cfg)
    };
    let latent = score(model, mode)?;
    let baseline = baseline.map(|(m, mode)| score(m, mode)).transpose()?;
    let delta = baseline.as_ref().map(|b| delta(&latent, b));
    Ok(EvalReport {
        latent,
        baseline,
        delta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Audio,
    Latent,
    TargetText,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Audio => "audio",
            EmbeddingKind::Latent => "latent",
            EmbeddingKind::TargetText => "target_text",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub audio: usize,
    pub latent: usize,
    pub target_text: usize,
}

impl ExportSummary {
    pub fn rows(&self) -> usize {
        self.audio + self.latent + self.target_text
    }
}

/// Embedding rows of one dialogue. The decoder is driven with the record's
/// own timing: speaking frames carry the label embedding, listening frames
/// carry the decoder's latent feedback.
pub fn dialogue_embeddings(model: &Model, record: &DuplexRecord) -> Result<Vec<(usize, EmbeddingKind, Vec<f32>)>> {
    let mut st = model.new_state();
    let mut rows = Vec::new();
    for t in 0..record.len() {
        let x = model.encode_step(&mut st, record.user[t].id())?;
        let h_in: Vec<f32> = x.iter().zip(&st.carry).map(|(a, b)| a + b).collect();
        let out = model.decoder_step(&mut st, &h_in)?;
        rows.push((t, EmbeddingKind::Audio, x));
        let tok = record.agent[t];
        if record.g[t] == 0 {
            let z = model.latent_feedback(&out.logits);
            rows.push((t, EmbeddingKind::Latent, z.clone()));
            st.carry = z;
        } else {
            st.carry = model.embed(tok.id()).to_vec();
            if !tok.is_control() {
                rows.push((t, EmbeddingKind::TargetText, st.carry.clone()));
            }
        }
    }
    Ok(rows)
}

/// CSV `dialogue,frame,kind,e0,…` over `records`, numbered by position.
pub fn export_embeddings(model: &Model, records: &[DuplexRecord], out: &Path) -> Result<ExportSummary> {
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(out, e);
    let d = model.config.d_model;
    let header: Vec<String> = ["dialogue", "frame", "kind"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|i| format!("e{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut summary = ExportSummary::default();
    for (i, rec) in records.iter().enumerate() {
        for (t, kind, v) in dialogue_embeddings(model, rec)? {
            match kind {
                EmbeddingKind::Audio => summary.audio += 1,
                EmbeddingKind::Latent => summary.latent += 1,
                EmbeddingKind::TargetText => summary.target_text += 1,
            }
            write!(w, "{i},{t},{}", kind.as_str()).map_err(io)?;
            for x in v {
                write!(w, ",{x}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(summary)
}
