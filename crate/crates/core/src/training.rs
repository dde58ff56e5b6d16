//! Loss terms, noise augmentation and the staged training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::read_jsonl;
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, Batch, Binder, CheckpointMeta, ForwardMode, Model,
    ModelConfig, ModelMode,
};
use crate::numerics::{
    adamw_step, clip_grad_norm, lr_schedule, AdamWConfig, OptimizerState, Tape, Tensor, Var,
};
use crate::schema::{DuplexRecord, TextToken};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft1,
    Sft2,
    Baseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft1 => "sft1",
            Stage::Sft2 => "sft2",
            Stage::Baseline => "baseline",
        }
    }

    pub fn forward_mode(self) -> ForwardMode {
        match self {
            Stage::Pretrain | Stage::Baseline => ForwardMode::Pretrain,
            Stage::Sft1 | Stage::Sft2 => ForwardMode::Latent,
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Stage::Sft1 | Stage::Sft2)
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "sft1" => Ok(Stage::Sft1),
            "sft2" => Ok(Stage::Sft2),
            "baseline" => Ok(Stage::Baseline),
            _ => Err(Error::Invalid(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub alpha: f32,
    pub beta: f32,
    pub bos_scale: f32,
    pub eos_scale: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub peak_lr: f32,
    pub warmup: u64,
    pub grad_clip: f32,
    pub seed: u64,
    /// Keep decoder-side weights fixed during the SFT stages.
    pub freeze_decoder: bool,
    /// Realize the records' SNR plans as encoder-output noise.
    pub noise: bool,
    pub log_every: u64,
}

impl StageConfig {
    pub fn new(stage: Stage) -> StageConfig {
        let (steps, peak_lr, warmup) = match stage {
            Stage::Pretrain | Stage::Baseline => (3000, 3e-4, 100),
            Stage::Sft1 => (1000, 5e-5, 50),
            Stage::Sft2 => (2000, 5e-5, 50),
        };
        StageConfig {
            stage,
            alpha: 3.0,
            beta: 5.0,
            bos_scale: 20.0,
            eos_scale: 10.0,
            batch_size: 16,
            steps,
            peak_lr,
            warmup,
            grad_clip: 1.0,
            seed: 0,
            freeze_decoder: false,
            noise: true,
            log_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Invalid("alpha and beta must be nonnegative".into()));
        }
        if self.bos_scale < 1.0 || self.eos_scale < 1.0 {
            return Err(Error::Invalid("BOS/EOS scales must be at least 1".into()));
        }
        if self.batch_size == 0 || self.log_every == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Invalid("batch_size, log_every and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Loss values of one step. `elbo = reco + alpha·regu + beta·time`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reco: f32,
    pub regu: f32,
    pub time: f32,
    pub elbo: f32,
    pub alpha: f32,
    pub beta: f32,
    /// Positions with G = 1.
    pub speaking: usize,
    /// Positions with G = 0.
    pub listening: usize,
}

/// Per-position weights for the reconstruction term: `scale(label)` where
/// `mask` is set, 0 elsewhere.
pub fn position_weights(labels: &[usize], mask: impl Fn(usize) -> bool, bos: f32, eos: f32) -> Vec<f32> {
    labels
        .iter()
        .enumerate()
        .map(|(t, &l)| {
            if !mask(t) {
                0.0
            } else if l == TextToken::BOS.id() {
                bos
            } else if l == TextToken::EOS.id() {
                eos
            } else {
                1.0
            }
        })
        .collect()
}

/// Weighted next-token loss over the speaking span, normalized by the weight sum.
pub fn loss_reco(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    g: &[u8],
    bos_scale: f32,
    eos_scale: f32,
) -> Result<Var> {
    if labels.len() != g.len() {
        return Err(Error::Shape("loss_reco: labels vs G".into()));
    }
    let w = position_weights(labels, |t| g[t] == 1, bos_scale, eos_scale);
    tape.weighted_cross_entropy(logits, labels, &w)
}

/// Mean `KL(sg[W^e] ‖ softmax(y))` over listening positions.
pub fn loss_regu(tape: &mut Tape, expert_weights: Var, logits: Var, g: &[u8]) -> Result<Var> {
    let target = tape.stop_gradient(expert_weights);
    let w: Vec<f32> = g.iter().map(|&x| f32::from(1 - x.min(1))).collect();
    tape.kl_rows(target, logits, &w)
}

/// Mean binary cross-entropy of the timing head.
pub fn loss_time(tape: &mut Tape, g_hat: Var, g: &[u8]) -> Result<Var> {
    let targets: Vec<f32> = g.iter().map(|&x| x as f32).collect();
    tape.binary_cross_entropy(g_hat, &targets)
}

/// `X + η` with `η ~ N(0, σ²)`, `σ = rms(X)·10^(−snr/20)`.
pub fn apply_noise<R: Rng + ?Sized>(x: &Tensor, snr_db: Option<f32>, rng: &mut R) -> Tensor {
    let Some(snr) = snr_db else {
        return x.clone();
    };
    let mut out = x.clone();
    let noise = noise_like(x.data(), snr, rng);
    for (o, n) in out.data_mut().iter_mut().zip(noise) {
        *o += n;
    }
    out
}

fn noise_like<R: Rng + ?Sized>(x: &[f32], snr_db: f32, rng: &mut R) -> Vec<f32> {
    let rms = (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let sigma = rms * 10f64.powf(-snr_db as f64 / 20.0);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    x.iter().map(|_| normal.sample(rng) as f32).collect()
}

/// Model, optimizer and stage settings for a run of steps.
pub struct Trainer {
    pub model: Model,
    pub opt: OptimizerState,
    pub cfg: StageConfig,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f32,
    pub grad_norm: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub stage: Stage,
    pub reco: f32,
    pub regu: f32,
    pub time: f32,
    pub elbo: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

impl Trainer {
    pub fn new(model: Model, cfg: StageConfig) -> Result<Trainer> {
        cfg.validate()?;
        let opt = OptimizerState::new(
            &model.params,
            AdamWConfig {
                peak_lr: cfg.peak_lr,
                warmup_steps: cfg.warmup,
                ..AdamWConfig::default()
            },
        );
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_65);
        Ok(Trainer {
            model,
            opt,
            cfg,
            rng,
        })
    }

    fn binder(&self) -> Binder {
        let mut b = Binder::new(&self.model.params);
        match self.cfg.stage {
            Stage::Pretrain | Stage::Baseline => {
                b.set_trainable(&self.model.expert_param_indices(), false)
            }
            Stage::Sft1 | Stage::Sft2 if self.cfg.freeze_decoder => {
                b.set_trainable(&self.model.decoder_param_indices(), false)
            }
            _ => {}
        }
        b
    }

    /// Builds the stage loss on a fresh tape without updating anything.
    pub fn loss_graph(&mut self, records: &[&DuplexRecord]) -> Result<LossGraph> {
        let batch = Batch::new(records, self.model.config.max_frames)?;
        let mut tape = Tape::new();
        let mut b = self.binder();
        let m = &self.model;
        let mut x = m.encode(&mut tape, &mut b, &batch)?;
        if self.cfg.noise && batch.snr_db.iter().any(Option::is_some) {
            let xv = tape.value(x);
            let d = xv.cols();
            let mut noise = vec![0.0; xv.len()];
            for (&(s, len), snr) in batch.packing.segments.iter().zip(&batch.snr_db) {
                if let Some(snr) = *snr {
                    let rows = &xv.data()[s * d..(s + len) * d];
                    let n = noise_like(rows, snr, &mut self.rng);
                    noise[s * d..(s + len) * d].copy_from_slice(&n);
                }
            }
            let eta = tape.constant(Tensor::new(xv.shape().to_vec(), noise)?);
            x = tape.add(x, eta)?;
        }
        let out = m.forward_from_x(&mut tape, &mut b, &batch, x, self.cfg.stage.forward_mode())?;
        let c = &self.cfg;
        let g = &batch.g;
        let speaking = g.iter().filter(|&&v| v == 1).count();
        let mut br = LossBreakdown {
            alpha: c.alpha,
            beta: c.beta,
            speaking,
            listening: g.len() - speaking,
            ..LossBreakdown::default()
        };
        let logits = out.decoder.logits;
        let (main, regu) = match c.stage {
            Stage::Pretrain | Stage::Baseline => {
                let w = vec![1.0; batch.agent.len()];
                let reco = tape.weighted_cross_entropy(logits, &batch.agent, &w)?;
                let time = loss_time(&mut tape, out.decoder.g_hat, g)?;
                br.reco = tape.value(reco).item();
                br.time = tape.value(time).item();
                br.alpha = 0.0;
                (tape.lin_comb(&[(reco, 1.0), (time, c.beta)])?, None)
            }
            Stage::Sft1 => {
                let reco = loss_reco(&mut tape, logits, &batch.agent, g, c.bos_scale, c.eos_scale)?;
                br.reco = tape.value(reco).item();
                br.alpha = 0.0;
                br.beta = 0.0;
                (reco, None)
            }
            Stage::Sft2 => {
                let ex = out.expert.expect("latent mode runs the expert");
                let reco = loss_reco(&mut tape, logits, &batch.agent, g, c.bos_scale, c.eos_scale)?;
                let regu = loss_regu(&mut tape, ex.weights, logits, g)?;
                let time = loss_time(&mut tape, out.decoder.g_hat, g)?;
                br.reco = tape.value(reco).item();
                br.regu = tape.value(regu).item();
                br.time = tape.value(time).item();
                (tape.lin_comb(&[(reco, 1.0), (time, c.beta)])?, Some(regu))
            }
        };
        br.elbo = br.reco + br.alpha * br.regu + br.beta * br.time;
        if !br.elbo.is_finite() {
            return Err(Error::Diverged(format!(
                "{} step {}: non-finite loss {br:?}",
                c.stage.name(),
                self.opt.step() + 1
            )));
        }
        Ok(LossGraph {
            tape,
            binder: b,
            main,
            regu,
            alpha: c.alpha,
            expert: self.model.expert_param_indices(),
            n_params: self.model.params.len(),
            breakdown: br,
        })
    }

    /// One optimizer step on `records`.
    pub fn train_step(&mut self, records: &[&DuplexRecord]) -> Result<StepReport> {
        let graph = self.loss_graph(records)?;
        let mut flat = graph.gradients()?;
        let br = graph.breakdown;
        let grad_norm = clip_grad_norm(&mut flat, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged(format!(
                "{} step {}: gradient norm {grad_norm}",
                self.cfg.stage.name(),
                self.opt.step() + 1
            )));
        }
        let step = self.opt.step() + 1;
        let lr = lr_schedule(step, self.cfg.peak_lr, self.cfg.warmup);
        adamw_step(&mut self.model.params, &flat, &mut self.opt, lr)?;
        Ok(StepReport {
            step,
            loss: br,
            lr,
            grad_norm,
        })
    }
}

/// A recorded stage loss. The regularizer is kept apart from the rest so that
/// none of its gradient reaches expert parameters, whichever path it takes.
pub struct LossGraph {
    pub tape: Tape,
    pub binder: Binder,
    /// Everything except `alpha·regu`.
    pub main: Var,
    pub regu: Option<Var>,
    pub alpha: f32,
    expert: Vec<usize>,
    n_params: usize,
    pub breakdown: LossBreakdown,
}

impl LossGraph {
    fn flat(&self, loss: Var, skip: &[usize], scale: f32, into: &mut [Option<Vec<f32>>]) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for (i, g) in grads.params() {
            if skip.contains(&i) {
                continue;
            }
            match &mut into[i] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += scale * v),
                slot => *slot = Some(g.iter().map(|&v| scale * v).collect()),
            }
        }
        Ok(())
    }

    /// Per-parameter gradient of the full stage loss as the optimizer sees it.
    pub fn gradients(&self) -> Result<Vec<Option<Vec<f32>>>> {
        let mut out = vec![None; self.n_params];
        self.flat(self.main, &[], 1.0, &mut out)?;
        if let Some(regu) = self.regu {
            self.flat(regu, &self.expert, self.alpha, &mut out)?;
        }
        Ok(out)
    }

    /// Per-parameter gradient contributed by the regularizer alone.
    pub fn regu_gradients(&self) -> Result<Vec<Option<Vec<f32>>>> {
        let mut out = vec![None; self.n_params];
        if let Some(regu) = self.regu {
            self.flat(regu, &self.expert, 1.0, &mut out)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: u64,
    pub seconds: f64,
    /// Mean elbo over steps 1..=10.
    pub initial_elbo: f32,
    /// Mean elbo over the last tenth of the run (at least 10 steps).
    pub final_elbo: f32,
    pub history: Vec<StepReport>,
}

/// Runs `cfg.steps` steps over `records` with seeded epoch shuffling and
/// calls `log` every `cfg.log_every` steps.
pub fn train_stage(
    model: Model,
    records: &[DuplexRecord],
    cfg: &StageConfig,
    mut log: impl FnMut(&LogEntry),
) -> Result<(Model, StageSummary)> {
    if records.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let started = Instant::now();
    let mut tr = Trainer::new(model, cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(records.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&records[order[cursor]]);
            cursor += 1;
        }
        let rep = tr.train_step(&batch)?;
        if rep.step % cfg.log_every == 0 || rep.step == cfg.steps {
            log(&LogEntry {
                step: rep.step,
                stage: cfg.stage,
                reco: rep.loss.reco,
                regu: rep.loss.regu,
                time: rep.loss.time,
                elbo: rep.loss.elbo,
                lr: rep.lr,
                grad_norm: rep.grad_norm,
            });
        }
        history.push(rep);
    }
    let mean = |s: &[StepReport]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|r| r.loss.elbo as f64).sum::<f64>() as f32 / s.len() as f32
        }
    };
    let tail = (history.len() / 10).max(10).min(history.len());
    let summary = StageSummary {
        stage: cfg.stage,
        steps: cfg.steps,
        seconds: started.elapsed().as_secs_f64(),
        initial_elbo: mean(&history[..history.len().min(10)]),
        final_elbo: mean(&history[history.len() - tail..]),
        history,
    };
    Ok((tr.model, summary))
}

/// File-level driver: reads the corpus, loads or creates the model, trains,
/// writes the checkpoint and a JSON-lines log.
pub fn run_stage(
    corpus: &Path,
    cfg: &StageConfig,
    model_cfg: &ModelConfig,
    in_ckpt: Option<&Path>,
    out_ckpt: &Path,
    log_path: Option<&Path>,
) -> Result<StageSummary> {
    let model = match in_ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None if cfg.stage.needs_checkpoint() => {
            return Err(Error::Invalid(format!(
                "stage {} needs an input checkpoint",
                cfg.stage.name()
            )))
        }
        None => Model::new(model_cfg.clone())?,
    };
    let records = read_jsonl(corpus)?;
    let mut writer = match log_path {
        Some(p) => Some((
            BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?),
            p,
        )),
        None => None,
    };
    let mut io_err = None;
    let (model, summary) = train_stage(model, &records, cfg, |entry| {
        if let Some((w, p)) = writer.as_mut() {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            if let Err(e) = writeln!(w, "{line}") {
                io_err.get_or_insert(Error::io(*p, e));
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let meta = CheckpointMeta {
        mode: match cfg.stage {
            Stage::Pretrain | Stage::Baseline => ModelMode::Baseline,
            Stage::Sft1 | Stage::Sft2 => ModelMode::Latent,
        },
        stage: cfg.stage.name().to_string(),
        steps: cfg.steps,
    };
    save_checkpoint(&model, &meta, out_ckpt)?;
    Ok(summary)
}
