mod config;
mod fail;
mod jsonlog;
mod render;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use duplex_latent::corpus::{corpus_stats, generate, read_jsonl, write_jsonl, CorpusKind};
use duplex_latent::engine::run_dialogue;
use duplex_latent::evalsuite::{evaluate, export_embeddings, MetricsReport};
use duplex_latent::model::{load_checkpoint, Checkpoint};
use duplex_latent::training::{run_stage, Stage};
use duplex_server::{ServerState, MAX_FRAME_MS, MIN_FRAME_MS};
use serde_json::json;

use config::RunConfig;
use fail::Fail;

#[derive(Parser)]
#[command(name = "duplex", version, about = "Full-duplex latent reasoning on a symbolic two-channel stream")]
struct Cli {
    /// JSON config file; sections model, stage, generation, engine, eval.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.d_model=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// JSON-lines log file.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Qa,
    Continuation,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Sft1,
    Sft2,
    Baseline,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Sft1 => Stage::Sft1,
            StageArg::Sft2 => Stage::Sft2,
            StageArg::Baseline => Stage::Baseline,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus as JSON lines.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        n: usize,
        /// Overrides generation.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        in_ckpt: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Evaluate a checkpoint, optionally paired with a baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write audio, latent and target-text embeddings as CSV.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve live sessions over WebSocket.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        /// host:port; defaults to engine.bind.
        #[arg(long)]
        bind: Option<String>,
        /// Defaults to engine.frame_ms.
        #[arg(long)]
        frame_ms: Option<u64>,
    },
    /// Run one record through the engine and print the duplex trace.
    Replay {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Print the trace as JSON instead.
        #[arg(long)]
        json: bool,
    },
}

fn load(path: &Path) -> Result<Checkpoint, Fail> {
    load_checkpoint(path).map_err(Fail::from)
}

fn cmd_gen(cfg: &RunConfig, out: &Path, kind: Kind, n: usize, seed: Option<u64>) -> Result<(), Fail> {
    if n == 0 {
        return Err(Fail::Usage("--n must be positive".into()));
    }
    let mut g = cfg.generation.clone();
    if let Some(s) = seed {
        g.seed = s;
    }
    let kind = match kind {
        Kind::Qa => CorpusKind::Qa,
        Kind::Continuation => CorpusKind::Continuation,
    };
    let records = generate(&g, kind, n)?;
    write_jsonl(&records, out)?;
    let s = corpus_stats(&records, &g);
    println!("wrote {} records to {}", s.records, out.display());
    println!("mean length        {:.1} frames", s.mean_len);
    println!("turns              {}", s.turns);
    println!(
        "interruption rate  {:.3} ({} of {} eligible turns)",
        s.interruption_rate, s.interrupted_turns, s.eligible_turns
    );
    println!("noise rate         {:.3}", s.noise_rate);
    jsonlog::event("gen", json!({ "out": out, "stats": s }));
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    stage: Stage,
    data: &Path,
    in_ckpt: Option<&Path>,
    out_ckpt: &Path,
    log: Option<&Path>,
) -> Result<(), Fail> {
    if stage.needs_checkpoint() && in_ckpt.is_none() {
        return Err(Fail::Usage(format!("stage {} needs --in-ckpt", stage.name())));
    }
    let sc = cfg.stage.stage_config(stage);
    sc.validate()?;
    let s = run_stage(data, &sc, &cfg.model, in_ckpt, out_ckpt, log)?;
    let resolved = serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes");
    std::fs::write(out_ckpt.join("run_config.json"), resolved)
        .map_err(|e| Fail::Runtime(format!("{}: {e}", out_ckpt.display())))?;
    println!("stage {} finished {} steps in {:.1} s", stage.name(), s.steps, s.seconds);
    println!("elbo  {:.4} (first 10 steps) -> {:.4} (final)", s.initial_elbo, s.final_elbo);
    println!("checkpoint {}", out_ckpt.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.3}"))
}

fn report_rows(r: &MetricsReport) -> Vec<(String, String)> {
    let mut rows = vec![
        ("dialogues".into(), r.dialogues.to_string()),
        ("accuracy".into(), format!("{:.3}", r.accuracy)),
        ("tor".into(), format!("{:.3}", r.tor)),
        ("turn latency median (frames)".into(), fmt_opt(r.turn_latency_median_frames)),
        ("turn latency median (s)".into(), fmt_opt(r.turn_latency_median_s)),
        ("barge-ins".into(), r.barge_ins.to_string()),
        ("barge-in success".into(), fmt_opt(r.barge_in_success_rate)),
        ("barge-in latency median (frames)".into(), fmt_opt(r.barge_in_latency_median_frames)),
    ];
    for (task, a) in &r.per_task {
        rows.push((format!("accuracy[{task}]"), format!("{:.3}", a.accuracy)));
    }
    for (k, n) in &r.anomalies {
        rows.push((format!("anomaly[{k}]"), n.to_string()));
    }
    rows
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, baseline: Option<&Path>, data: &Path, report: &Path) -> Result<(), Fail> {
    let main = load(ckpt)?;
    let base = baseline.map(load).transpose()?;
    let records = read_jsonl(data)?;
    let model = Arc::new(main.model);
    let base_model = base.map(|b| (Arc::new(b.model), b.meta.mode));
    let rep = evaluate(
        &model,
        main.meta.mode,
        &records,
        base_model.as_ref().map(|(m, mode)| (m, *mode)),
        &cfg.eval,
    )?;
    let text = serde_json::to_string_pretty(&rep).expect("report serializes");
    std::fs::write(report, text).map_err(|e| Fail::Runtime(format!("{}: {e}", report.display())))?;

    let left = report_rows(&rep.latent);
    let right = rep.baseline.as_ref().map(report_rows);
    let width = left.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    match &right {
        Some(_) => println!("{:<width$}  {:>10}  {:>10}", "metric", "latent", "baseline"),
        None => println!("{:<width$}  {:>10}", "metric", "value"),
    }
    for (k, v) in &left {
        match &right {
            Some(r) => {
                let b = r.iter().find(|(bk, _)| bk == k).map_or("-", |x| x.1.as_str());
                println!("{k:<width$}  {v:>10}  {b:>10}");
            }
            None => println!("{k:<width$}  {v:>10}"),
        }
    }
    if let Some(d) = &rep.delta {
        println!("delta accuracy {:+.3}, delta tor {:+.3}", d.accuracy, d.tor);
    }
    println!("report {}", report.display());
    jsonlog::event("eval", json!({ "ckpt": ckpt, "report": report, "accuracy": rep.latent.accuracy }));
    Ok(())
}

fn cmd_export(ckpt: &Path, data: &Path, out: &Path) -> Result<(), Fail> {
    let c = load(ckpt)?;
    let records = read_jsonl(data)?;
    let s = export_embeddings(&c.model, &records, out)?;
    println!(
        "wrote {} rows ({} audio, {} latent, {} target_text) to {}",
        s.rows(),
        s.audio,
        s.latent,
        s.target_text,
        out.display()
    );
    jsonlog::event("export", json!({ "out": out, "summary": s }));
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, ckpt: &Path, bind: Option<&str>, frame_ms: Option<u64>) -> Result<(), Fail> {
    let c = load(ckpt)?;
    let bind = bind.unwrap_or(&cfg.engine.bind);
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| Fail::Usage(format!("--bind {bind:?}: {e}")))?;
    let ms = frame_ms.unwrap_or(cfg.engine.frame_ms);
    if !(MIN_FRAME_MS..=MAX_FRAME_MS).contains(&ms) {
        return Err(Fail::Usage(format!("--frame-ms must lie in [{MIN_FRAME_MS}, {MAX_FRAME_MS}]")));
    }
    let state = ServerState::new(Arc::new(c.model), c.meta.mode, ms);
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Fail::Runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Fail::Runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Fail::Runtime(e.to_string()))?;
        println!("serving {} on ws://{local} at {ms} ms per frame", ckpt.display());
        jsonlog::event("serve", json!({ "addr": local.to_string(), "frame_ms": ms }));
        duplex_server::serve(listener, state)
            .await
            .map_err(|e| Fail::Runtime(format!("server stopped: {e}")))
    })
}

fn cmd_replay(ckpt: &Path, record: &Path, index: usize, as_json: bool) -> Result<(), Fail> {
    let c = load(ckpt)?;
    let records = read_jsonl(record)?;
    let rec = records.get(index).ok_or_else(|| {
        Fail::Data(format!(
            "index {index} out of range: {} holds {} records",
            record.display(),
            records.len()
        ))
    })?;
    let trace = run_dialogue(&Arc::new(c.model), c.meta.mode, &rec.user)?;
    if as_json {
        println!("{}", serde_json::to_string(&trace).expect("trace serializes"));
        return Ok(());
    }
    println!("record {index} of {} ({} mode, task {})", record.display(), json!(c.meta.mode), rec.task);
    print!("{}", render::render_trace(&trace, 16));
    println!(
        "frames {}  bos {:?}  eos {:?}  anomalies {}",
        trace.len(),
        trace.bos_frames(),
        trace.eos_frames(),
        trace.anomalies().count()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Fail> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let train_log = matches!(cli.cmd, Cmd::Train { .. });
    let sink = if train_log { None } else { cli.log.as_deref() };
    jsonlog::init(sink).map_err(|e| Fail::Usage(format!("--log: {e}")))?;
    println!("config {}", cfg.hash());
    jsonlog::event("config", json!({ "hash": cfg.hash(), "config": cfg.to_json() }));
    match cli.cmd {
        Cmd::Gen { out, kind, n, seed } => cmd_gen(&cfg, &out, kind, n, seed),
        Cmd::Train {
            stage,
            data,
            in_ckpt,
            out_ckpt,
        } => cmd_train(&cfg, stage.into(), &data, in_ckpt.as_deref(), &out_ckpt, cli.log.as_deref()),
        Cmd::Eval {
            ckpt,
            baseline_ckpt,
            data,
            report,
        } => cmd_eval(&cfg, &ckpt, baseline_ckpt.as_deref(), &data, &report),
        Cmd::Export { ckpt, data, out } => cmd_export(&ckpt, &data, &out),
        Cmd::Serve { ckpt, bind, frame_ms } => cmd_serve(&cfg, &ckpt, bind.as_deref(), frame_ms),
        Cmd::Replay {
            ckpt,
            record,
            index,
            json,
        } => cmd_replay(&ckpt, &record, index, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            jsonlog::event("error", json!({ "code": f.code(), "reason": f.to_string() }));
            eprintln!("error: {f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
