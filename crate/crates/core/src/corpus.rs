//! Synthetic duplex dialogues: algorithmic QA rounds, pseudo-continuation
//! pretraining chatter, interruption splicing and noise plans.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{
    g_labels, turn_spans, validate, AudioToken, DuplexRecord, Events, QuerySpan, Task, TextToken,
    TurnSpan, N_WORDS,
};

/// Relative sampling weights of the five query families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskMix {
    pub copy: f64,
    pub rev: f64,
    pub sum: f64,
    pub max: f64,
    pub par: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            copy: 1.0,
            rev: 1.0,
            sum: 1.0,
            max: 1.0,
            par: 1.0,
        }
    }
}

impl TaskMix {
    pub fn only(task: Task) -> Self {
        let mut m = Self {
            copy: 0.0,
            rev: 0.0,
            sum: 0.0,
            max: 0.0,
            par: 0.0,
        };
        *m.weight_mut(task) = 1.0;
        m
    }

    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::Copy => self.copy,
            Task::Rev => self.rev,
            Task::Sum => self.sum,
            Task::Max => self.max,
            Task::Par => self.par,
        }
    }

    fn weight_mut(&mut self, task: Task) -> &mut f64 {
        match task {
            Task::Copy => &mut self.copy,
            Task::Rev => &mut self.rev,
            Task::Sum => &mut self.sum,
            Task::Max => &mut self.max,
            Task::Par => &mut self.par,
        }
    }
}

/// Generation parameters. Ranges are inclusive `[lo, hi]`; durations are in
/// frames at 12.5 Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub task_mix: TaskMix,
    /// Digits per query.
    pub query_len: [usize; 2],
    /// QA rounds per dialogue.
    pub rounds: [usize; 2],
    /// Silent frames before each round and after the last one.
    pub silence: [usize; 2],
    /// `<BOS>` frame minus `q_end` frame.
    pub gap: [usize; 2],
    /// Probability that a query asks for a long-form answer (a filler symbol
    /// before `q_end`), answered with a padding overhang drawn from `long_pad`.
    pub long_turn_prob: f64,
    pub long_pad: [usize; 2],
    pub interruption_prob: f64,
    pub onset_frac: [f64; 2],
    pub post_onset_delay: usize,
    /// Turns must span more than this many frames to be interruptible.
    pub min_interruptible: usize,
    pub single_sentence_prob: f64,
    pub continuation_decay: f64,
    pub max_turn_words: usize,
    /// Sentences per continuation dialogue.
    pub sentences: [usize; 2],
    pub sentence_words: [usize; 2],
    pub noise_prob: f64,
    pub snr_db: [f64; 2],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            task_mix: TaskMix::default(),
            query_len: [1, 5],
            rounds: [1, 4],
            silence: [1, 4],
            gap: [1, 3],
            long_turn_prob: 0.2,
            long_pad: [48, 64],
            interruption_prob: 0.10,
            onset_frac: [0.2, 0.8],
            post_onset_delay: 8,
            min_interruptible: 50,
            single_sentence_prob: 0.8,
            continuation_decay: 0.5,
            max_turn_words: 200,
            sentences: [2, 8],
            sentence_words: [2, 10],
            noise_prob: 0.5,
            snr_db: [0.0, 60.0],
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Invalid(format!("{name}: empty range {r:?}")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("{name}: {p} is not a probability")));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("query_len", &self.query_len)?;
        check_range("rounds", &self.rounds)?;
        check_range("silence", &self.silence)?;
        check_range("gap", &self.gap)?;
        check_range("long_pad", &self.long_pad)?;
        check_range("onset_frac", &self.onset_frac)?;
        check_range("sentences", &self.sentences)?;
        check_range("sentence_words", &self.sentence_words)?;
        check_range("snr_db", &self.snr_db)?;
        check_prob("long_turn_prob", self.long_turn_prob)?;
        check_prob("interruption_prob", self.interruption_prob)?;
        check_prob("single_sentence_prob", self.single_sentence_prob)?;
        check_prob("noise_prob", self.noise_prob)?;
        check_prob("continuation_decay", self.continuation_decay)?;
        if self.query_len[0] == 0 || self.rounds[0] == 0 || self.gap[0] == 0 {
            return Err(Error::Invalid("query_len, rounds and gap must start at 1".into()));
        }
        if self.sentence_words[0] == 0 {
            return Err(Error::Invalid("sentences need at least one word".into()));
        }
        if !(self.onset_frac[0] > 0.0 && self.onset_frac[1] < 1.0) {
            return Err(Error::Invalid("onset_frac must lie inside (0, 1)".into()));
        }
        if self.snr_db[0] < 0.0 {
            return Err(Error::Invalid("snr_db must be nonnegative".into()));
        }
        let w: Vec<f64> = Task::ALL.iter().map(|&t| self.task_mix.weight(t)).collect();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Invalid("task_mix needs nonnegative weights with a positive sum".into()));
        }
        Ok(())
    }

    fn task_sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(Task::ALL.iter().map(|&t| self.task_mix.weight(t)))
            .expect("validated task mix")
    }
}

/// A query and its expected answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: Task,
    pub digits: Vec<u8>,
    pub answer: Vec<TextToken>,
}

impl TaskInstance {
    pub fn new(task: Task, digits: Vec<u8>) -> Result<Self> {
        if digits.is_empty() || digits.iter().any(|&d| d > 9) {
            return Err(Error::Invalid(format!("bad digit sequence {digits:?}")));
        }
        let answer: Vec<u8> = match task {
            Task::Copy => digits.clone(),
            Task::Rev => digits.iter().rev().copied().collect(),
            Task::Sum => vec![(digits.iter().map(|&d| d as u32).sum::<u32>() % 10) as u8],
            Task::Max => vec![*digits.iter().max().unwrap()],
            Task::Par => vec![(digits.iter().map(|&d| d as u32).sum::<u32>() % 2) as u8],
        };
        Ok(Self {
            task,
            digits,
            answer: answer.into_iter().map(TextToken::digit).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Self {
        let task = Task::ALL[cfg.task_sampler().sample(rng)];
        let n = rng.random_range(cfg.query_len[0]..=cfg.query_len[1]);
        let digits = (0..n).map(|_| rng.random_range(0..10u8)).collect();
        Self::new(task, digits).expect("sampled digits are valid")
    }

    /// User-channel symbols `[marker, digits…, (filler), q_end]`.
    pub fn user_symbols(&self, long_form: Option<usize>) -> Vec<AudioToken> {
        let mut s = Vec::with_capacity(self.digits.len() + 3);
        s.push(AudioToken::marker(self.task));
        s.extend(self.digits.iter().map(|&d| AudioToken::digit(d)));
        if let Some(k) = long_form {
            s.push(AudioToken::filler(k));
        }
        s.push(AudioToken::Q_END);
        s
    }
}

/// Appends frames to both channels in lock step.
#[derive(Default)]
struct Builder {
    user: Vec<AudioToken>,
    agent: Vec<TextToken>,
    queries: Vec<QuerySpan>,
    answers: Vec<Vec<TextToken>>,
}

impl Builder {
    fn len(&self) -> usize {
        self.agent.len()
    }

    fn silence(&mut self, n: usize) {
        self.user.extend(std::iter::repeat_n(AudioToken::USIL, n));
        self.agent.extend(std::iter::repeat_n(TextToken::SIL, n));
    }

    fn user_speech(&mut self, symbols: &[AudioToken]) {
        self.user.extend_from_slice(symbols);
        self.agent.extend(std::iter::repeat_n(TextToken::SIL, symbols.len()));
    }

    fn query(&mut self, inst: &TaskInstance, long_form: Option<usize>) -> usize {
        let start = self.len();
        self.user_speech(&inst.user_symbols(long_form));
        let end = self.len() - 1;
        self.queries.push(QuerySpan {
            start,
            end,
            task: inst.task,
        });
        self.answers.push(inst.answer.clone());
        end
    }

    fn agent_turn(&mut self, response: &[TextToken], pad: usize) {
        self.agent.push(TextToken::BOS);
        self.agent.extend_from_slice(response);
        self.agent.extend(std::iter::repeat_n(TextToken::PAD, pad));
        self.agent.push(TextToken::EOS);
        let n = response.len() + pad + 2;
        self.user.extend(std::iter::repeat_n(AudioToken::USIL, n));
    }

    fn finish(self, task: String, seed: u64) -> Result<DuplexRecord> {
        let g = g_labels(&self.agent)?;
        let turns = turn_spans(&self.agent)?
            .into_iter()
            .map(|(bos, eos)| TurnSpan {
                bos,
                eos,
                interrupted_at: None,
            })
            .collect();
        Ok(DuplexRecord {
            user: self.user,
            agent: self.agent,
            g,
            events: Events {
                queries: self.queries,
                answers: self.answers,
                turns,
                interruption_onset: None,
            },
            task,
            seed,
            snr_db: None,
        })
    }
}

fn range<R: Rng + ?Sized>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn task_label(queries: &[QuerySpan]) -> String {
    match queries.first() {
        Some(q) if queries.iter().all(|x| x.task == q.task) => q.task.name().to_string(),
        Some(_) => "mixed".to_string(),
        None => "none".to_string(),
    }
}

/// One QA dialogue of 1–4 rounds; a pure function of `(cfg, seed)`.
pub fn gen_dialogue(cfg: &GenConfig, seed: u64) -> Result<DuplexRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::default();
    let rounds = range(&mut rng, cfg.rounds);
    for _ in 0..rounds {
        b.silence(range(&mut rng, cfg.silence));
        let inst = TaskInstance::sample(cfg, &mut rng);
        let long_form = rng
            .random_bool(cfg.long_turn_prob)
            .then(|| rng.random_range(0..N_WORDS));
        b.query(&inst, long_form);
        b.silence(range(&mut rng, cfg.gap) - 1);
        let pad = match long_form {
            Some(_) => range(&mut rng, cfg.long_pad),
            None => rng.random_range(0..=inst.answer.len()),
        };
        b.agent_turn(&inst.answer, pad);
    }
    b.silence(range(&mut rng, cfg.silence));
    let task = task_label(&b.queries);
    let record = b.finish(task, seed)?;
    let mut record = inject_interruption(&record, cfg, &mut rng)?;
    noise_plan(&mut record, cfg, &mut rng);
    Ok(record)
}

/// Groups consecutive sentences into turns. Roles alternate between the
/// returned ranges, starting with the user.
pub fn segment_turns<R: Rng + ?Sized>(
    sentence_lengths: &[usize],
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<Vec<Range<usize>>> {
    if sentence_lengths.is_empty() {
        return Err(Error::Invalid("no sentences to segment".into()));
    }
    let mut turns = Vec::new();
    let (mut start, mut k, mut words) = (0, 0i32, 0usize);
    for (i, &len) in sentence_lengths.iter().enumerate() {
        k += 1;
        words += len;
        let p_more = (1.0 - cfg.single_sentence_prob) * cfg.continuation_decay.powi(k - 1);
        let close = words > cfg.max_turn_words || !rng.random_bool(p_more.clamp(0.0, 1.0));
        if close || i + 1 == sentence_lengths.len() {
            turns.push(start..i + 1);
            start = i + 1;
            k = 0;
            words = 0;
        }
    }
    Ok(turns)
}

/// Pseudo-dialogue of random word sentences for pretraining. With
/// `swap_roles` the same content is produced with user and agent exchanged.
pub fn gen_continuation_dialogue(
    cfg: &GenConfig,
    seed: u64,
    swap_roles: bool,
) -> Result<DuplexRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = range(&mut rng, cfg.sentences);
    let sentences: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let len = range(&mut rng, cfg.sentence_words);
            (0..len).map(|_| rng.random_range(0..N_WORDS)).collect()
        })
        .collect();
    let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
    let turns = segment_turns(&lengths, cfg, &mut rng)?;

    let mut b = Builder::default();
    for (i, turn) in turns.iter().enumerate() {
        let words: Vec<usize> = sentences[turn.clone()].concat();
        b.silence(range(&mut rng, cfg.gap));
        let pad = rng.random_range(0..=words.len());
        let agent_speaks = (i % 2 == 1) != swap_roles;
        if agent_speaks {
            let response: Vec<TextToken> = words.iter().map(|&w| TextToken::word(w)).collect();
            b.agent_turn(&response, pad);
        } else {
            let speech: Vec<AudioToken> = words.iter().map(|&w| AudioToken::filler(w)).collect();
            b.user_speech(&speech);
        }
    }
    b.silence(range(&mut rng, cfg.silence));
    let mut record = b.finish("continuation".into(), seed)?;
    noise_plan(&mut record, cfg, &mut rng);
    Ok(record)
}

/// A fully specified interruption of one agent turn.
#[derive(Clone, Debug)]
pub struct Interruption {
    pub turn: usize,
    pub onset_frac: f64,
    pub query: TaskInstance,
    /// `<BOS>` of the reply minus `q_end` of the interrupting query (lower bound).
    pub gap: usize,
    pub pad: usize,
    /// Silent frames between the reply and the rest of the original dialogue.
    pub trailing: usize,
}

/// Splices a barge-in into `record`: the user starts a new query at the onset,
/// the agent keeps its original tokens for `delay` frames, closes with `<EOS>`,
/// stays silent, and answers the new query in an inserted turn. The original
/// remainder of the dialogue follows.
pub fn interrupt_turn(record: &DuplexRecord, plan: &Interruption, delay: usize) -> Result<DuplexRecord> {
    let old = record
        .events
        .turns
        .get(plan.turn)
        .ok_or_else(|| Error::Invalid(format!("no turn {}", plan.turn)))?
        .clone();
    if old.interrupted_at.is_some() {
        return Err(Error::Invalid(format!("turn {} is already interrupted", plan.turn)));
    }
    let onset = old.bos + (plan.onset_frac * old.len() as f64).floor() as usize;
    let eos = onset + delay;
    if onset <= old.bos || eos >= old.eos {
        return Err(Error::Invalid("onset window does not fit the turn".into()));
    }

    let mut user = record.user[..onset].to_vec();
    let mut agent = record.agent[..onset].to_vec();
    let symbols = plan.query.user_symbols(None);
    let q_end = onset + symbols.len() - 1;
    let bos = (eos + 2).max(q_end + plan.gap);
    let reply_end = bos + plan.query.answer.len() + plan.pad + 1;
    let block_end = reply_end + 1 + plan.trailing;
    for f in onset..block_end {
        user.push(symbols.get(f - onset).copied().unwrap_or(AudioToken::USIL));
        agent.push(if f < eos {
            record.agent[f]
        } else if f == eos {
            TextToken::EOS
        } else if f == bos {
            TextToken::BOS
        } else if f > bos && f <= bos + plan.query.answer.len() {
            plan.query.answer[f - bos - 1]
        } else if f > bos && f < reply_end {
            TextToken::PAD
        } else if f == reply_end {
            TextToken::EOS
        } else {
            TextToken::SIL
        });
    }
    user.extend_from_slice(&record.user[old.eos + 1..]);
    agent.extend_from_slice(&record.agent[old.eos + 1..]);
    let shift = block_end as isize - (old.eos + 1) as isize;
    let remap = |i: usize| if i > old.eos { (i as isize + shift) as usize } else { i };

    let ev = &record.events;
    let mut queries = Vec::with_capacity(ev.queries.len() + 1);
    let mut answers = Vec::with_capacity(ev.queries.len() + 1);
    let mut inserted = false;
    let owner = ev.queries.iter().rposition(|q| q.end < old.bos);
    for (qi, (q, a)) in ev.queries.iter().zip(&ev.answers).enumerate() {
        if !inserted && q.start > old.eos {
            queries.push(QuerySpan {
                start: onset,
                end: q_end,
                task: plan.query.task,
            });
            answers.push(plan.query.answer.clone());
            inserted = true;
        }
        let mut a = a.clone();
        if Some(qi) == owner {
            // the answer of the interrupted turn is whatever was said before <EOS>
            a = record.agent[old.bos + 1..eos]
                .iter()
                .copied()
                .take_while(|t| !t.is_control())
                .collect();
        }
        queries.push(QuerySpan {
            start: remap(q.start),
            end: remap(q.end),
            task: q.task,
        });
        answers.push(a);
    }
    if !inserted {
        queries.push(QuerySpan {
            start: onset,
            end: q_end,
            task: plan.query.task,
        });
        answers.push(plan.query.answer.clone());
    }

    let mut onsets: Vec<usize> = ev
        .turns
        .iter()
        .filter_map(|t| t.interrupted_at)
        .map(remap)
        .collect();
    onsets.push(onset);
    let turns: Vec<TurnSpan> = turn_spans(&agent)?
        .into_iter()
        .map(|(bos, eos)| TurnSpan {
            bos,
            eos,
            interrupted_at: onsets.iter().copied().find(|&o| o > bos && o < eos),
        })
        .collect();
    let g = g_labels(&agent)?;
    let interruption_onset = turns.iter().find_map(|t| t.interrupted_at);
    Ok(DuplexRecord {
        user,
        agent,
        g,
        events: Events {
            queries,
            answers,
            turns,
            interruption_onset,
        },
        task: record.task.clone(),
        seed: record.seed,
        snr_db: record.snr_db,
    })
}

/// Turns longer than `cfg.min_interruptible` frames are interrupted with
/// probability `cfg.interruption_prob`. Short turns are never touched.
pub fn inject_interruption<R: Rng + ?Sized>(
    record: &DuplexRecord,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<DuplexRecord> {
    let mut out = record.clone();
    // later turns first so earlier turn indices stay valid
    for i in (0..record.events.turns.len()).rev() {
        let turn = &record.events.turns[i];
        if turn.len() <= cfg.min_interruptible || turn.interrupted_at.is_some() {
            continue;
        }
        if !rng.random_bool(cfg.interruption_prob) {
            continue;
        }
        let plan = Interruption {
            turn: i,
            onset_frac: rng.random_range(cfg.onset_frac[0]..=cfg.onset_frac[1]),
            query: TaskInstance::sample(cfg, rng),
            gap: range(rng, cfg.gap),
            pad: 0,
            trailing: range(rng, cfg.silence),
        };
        let plan = Interruption {
            pad: rng.random_range(0..=plan.query.answer.len()),
            ..plan
        };
        match interrupt_turn(&out, &plan, cfg.post_onset_delay) {
            Ok(r) => out = r,
            Err(Error::Invalid(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// With probability `cfg.noise_prob` attaches an SNR drawn from `cfg.snr_db`.
pub fn noise_plan<R: Rng + ?Sized>(
    record: &mut DuplexRecord,
    cfg: &GenConfig,
    rng: &mut R,
) -> Option<f32> {
    record.snr_db = rng
        .random_bool(cfg.noise_prob)
        .then(|| rng.random_range(cfg.snr_db[0]..=cfg.snr_db[1]) as f32);
    record.snr_db
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Qa,
    Continuation,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(CorpusKind::Qa),
            "continuation" => Ok(CorpusKind::Continuation),
            _ => Err(Error::Invalid(format!("unknown corpus kind {s:?}"))),
        }
    }
}

/// `n` records with seeds `cfg.seed + i`. Continuation records alternate the
/// role swap by index.
pub fn generate(cfg: &GenConfig, kind: CorpusKind, n: usize) -> Result<Vec<DuplexRecord>> {
    if n == 0 {
        return Err(Error::Invalid("record count must be positive".into()));
    }
    (0..n as u64)
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            match kind {
                CorpusKind::Qa => gen_dialogue(cfg, seed),
                CorpusKind::Continuation => gen_continuation_dialogue(cfg, seed, i % 2 == 1),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub frames: usize,
    pub mean_len: f64,
    pub turns: usize,
    pub eligible_turns: usize,
    pub interrupted_turns: usize,
    pub interruption_rate: f64,
    pub noisy_records: usize,
    pub noise_rate: f64,
}

pub fn corpus_stats(records: &[DuplexRecord], cfg: &GenConfig) -> CorpusStats {
    let mut s = CorpusStats {
        records: records.len(),
        ..CorpusStats::default()
    };
    for r in records {
        s.frames += r.len();
        s.turns += r.events.turns.len();
        for t in &r.events.turns {
            if t.interrupted_at.is_some() {
                s.interrupted_turns += 1;
                s.eligible_turns += 1;
            } else if t.len() > cfg.min_interruptible {
                s.eligible_turns += 1;
            }
        }
        s.noisy_records += usize::from(r.snr_db.is_some());
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    s.mean_len = ratio(s.frames, s.records);
    s.interruption_rate = ratio(s.interrupted_turns, s.eligible_turns);
    s.noise_rate = ratio(s.noisy_records, s.records);
    s
}

pub fn write_jsonl(records: &[DuplexRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a corpus; any malformed line is reported with its
/// 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<DuplexRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let record: DuplexRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(v) = validate(&record).first() {
            return Err(parse_err(v.to_string()));
        }
        out.push(record);
    }
    Ok(out)
}
