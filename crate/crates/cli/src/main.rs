use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bitprune::bitloss::Scheme;
use bitprune::config::RunConfig;
use bitprune::costmodel::{cost_report, AcceleratorModel};
use bitprune::data::DataError;
use bitprune::models::model_facts;
use bitprune::persistence::{self, Checkpoint, CheckpointError};
use bitprune::training::{EpochRecord, RunSummary, Session};
use bitprune::{Error, Granularity};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bitprune",
    version,
    about = "Learned-bitlength quantization-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the bitlength learning phase (and any pretrain phase before it).
    Train(Common),
    /// Replace every bitlength by its ceiling and freeze it.
    Round(Common),
    /// Train the weights at the rounded bitlengths.
    Finetune(Common),
    /// Print accuracy on the evaluation split.
    Eval(Common),
    /// Footprint, bit-op and accelerator proxy estimates for a checkpoint.
    Estimate(Common),
    /// Summary tables for a run directory.
    Report(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML). Defaults to the resolved config stored next
    /// to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = ["equal", "footprint", "macs"])]
    scheme: Option<String>,
    #[arg(long)]
    footprint_batch_size: Option<usize>,
    #[arg(long, value_parser = ["tensor", "channel"])]
    granularity: Option<String>,
    /// Epochs of the phase this subcommand runs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output (run) directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate at the ceilings of the learned bitlengths.
    #[arg(long)]
    integer_bits: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Io { .. }
        | Error::Data(DataError::Io { .. })
        | Error::Checkpoint(
            CheckpointError::Io { .. }
            | CheckpointError::BadMagic(_)
            | CheckpointError::Truncated { .. }
            | CheckpointError::Checksum { .. }
            | CheckpointError::Header { .. }
            | CheckpointError::VersionMismatch { .. },
        ) => 4,
        Error::Data(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> bitprune::Result<()> {
    match cmd {
        Command::Train(a) => train(&a),
        Command::Round(a) => round(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Eval(a) => eval(&a),
        Command::Estimate(a) => estimate(&a),
        Command::Report(a) => report(&a),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Learn,
    Finetune,
}

/// Loads the config and applies command-line overrides.
fn resolve_config(a: &Common, stage: Stage) -> bitprune::Result<RunConfig> {
    let path = match (&a.config, &a.checkpoint) {
        (Some(p), _) => p.clone(),
        (None, Some(ckpt)) => ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join("resolved_config.toml"),
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    let mut cfg = RunConfig::from_file(&path)?;
    if let Some(g) = a.gamma {
        cfg.bitloss.gamma = g;
    }
    if let Some(s) = &a.scheme {
        cfg.bitloss.scheme = s.parse::<Scheme>()?;
    }
    if let Some(b) = a.footprint_batch_size {
        cfg.bitloss.footprint_batch_size = b;
    }
    if let Some(g) = &a.granularity {
        cfg.granularity = g.parse::<Granularity>()?;
    }
    if let Some(e) = a.epochs {
        match stage {
            Stage::Learn => cfg.schedule.learn_epochs = e,
            Stage::Finetune => cfg.schedule.finetune_epochs = e,
        }
    }
    if let Some(lr) = a.lr {
        cfg.schedule.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.set_seed(s);
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_checkpoint(a: &Common) -> bitprune::Result<&Path> {
    a.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn run_dir(a: &Common, cfg: &RunConfig, ckpt: &Path) -> PathBuf {
    a.out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn resume(cfg: &RunConfig, ckpt: &Checkpoint, dir: &Path) -> bitprune::Result<Session> {
    ckpt.check_config_hash(&cfg.config_hash())?;
    let (train, eval) = cfg.load_data()?;
    let mut s = Session::resume(ckpt, cfg.schedule.to_schedule(cfg.seed)?, train, eval)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    s.out_dir = Some(dir.to_path_buf());
    Ok(s)
}

fn print_epochs(records: &[EpochRecord]) {
    for r in records {
        println!("{}", epoch_line(r));
    }
}

fn epoch_line(r: &EpochRecord) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    format!(
        "{:<9} {:>4} {:>10.6} {:>8.4} {:>8} {:>8} {:>8}",
        r.phase,
        r.global_epoch,
        r.task_loss,
        r.bit_loss,
        opt(r.val_accuracy),
        opt(r.mean_weight_bits),
        opt(r.mean_activation_bits)
    )
}

fn learn_phases_done(s: &Session) -> bool {
    s.current_phase()
        .is_none_or(|p| p.round_before || s.state.rounded)
}

fn train(a: &Common) -> bitprune::Result<()> {
    let cfg = resolve_config(a, Stage::Learn)?;
    let mut session = match &a.checkpoint {
        Some(p) => {
            let ckpt = persistence::load(p)?;
            let dir = run_dir(a, &cfg, p);
            resume(&cfg, &ckpt, &dir)?
        }
        None => cfg.session()?,
    };
    let before = session.state.records.len();
    while !learn_phases_done(&session) {
        session.run_epoch()?;
    }
    print_epochs(&session.state.records[before..]);
    session.write_summary()?;
    Ok(())
}

fn round(a: &Common) -> bitprune::Result<()> {
    let ckpt_path = require_checkpoint(a)?;
    let cfg = resolve_config(a, Stage::Learn)?;
    let ckpt = persistence::load(ckpt_path)?;
    let dir = run_dir(a, &cfg, ckpt_path);
    let mut session = resume(&cfg, &ckpt, &dir)?;
    if session.plan.is_none() {
        return Err(Error::Config(
            "checkpoint has no quantization groups to round".into(),
        ));
    }
    let ev = session
        .round()?
        .cloned()
        .expect("quantized session records rounding");
    persistence::save(&session.checkpoint(), &dir.join("rounded.ckpt"))?;
    session.write_summary()?;
    for (g, n) in &ev.after {
        println!("{g:<24} {:>8.4} -> {n}", ev.before[g]);
    }
    println!(
        "mean bitlength {:.4} -> {:.4}; accuracy {:.4} -> {:.4}",
        ev.mean_before, ev.mean_after, ev.accuracy_real, ev.accuracy_rounded
    );
    Ok(())
}

fn finetune(a: &Common) -> bitprune::Result<()> {
    let ckpt_path = require_checkpoint(a)?;
    let cfg = resolve_config(a, Stage::Finetune)?;
    let ckpt = persistence::load(ckpt_path)?;
    if ckpt.plan.is_some() && !ckpt.state.rounded {
        return Err(Error::Config(format!(
            "{} is not rounded; run `bitprune round` first",
            ckpt_path.display()
        )));
    }
    let dir = run_dir(a, &cfg, ckpt_path);
    let mut session = resume(&cfg, &ckpt, &dir)?;
    let before = session.state.records.len();
    session.run()?;
    print_epochs(&session.state.records[before..]);
    session.write_summary()?;
    Ok(())
}

fn eval(a: &Common) -> bitprune::Result<()> {
    let ckpt_path = require_checkpoint(a)?;
    let cfg = resolve_config(a, Stage::Learn)?;
    let ckpt = persistence::load(ckpt_path)?;
    ckpt.check_config_hash(&cfg.config_hash())?;
    let (_, eval) = cfg.load_data()?;
    let (model, plan) = ckpt.restore_model()?;
    let acc = bitprune::training::evaluate(&model, plan.as_ref(), &eval, a.integer_bits)?;
    let mode = if a.integer_bits {
        "integer bitlengths"
    } else {
        "learned bitlengths"
    };
    println!("accuracy {acc:.4} ({mode}, {} samples)", eval.len());
    Ok(())
}

fn estimate(a: &Common) -> bitprune::Result<()> {
    let ckpt_path = require_checkpoint(a)?;
    let ckpt = persistence::load(ckpt_path)?;
    let (model, plan) = ckpt.restore_model()?;
    let plan = plan.ok_or_else(|| Error::Config("checkpoint has no quantization groups".into()))?;
    let batch = a
        .footprint_batch_size
        .unwrap_or(ckpt.bitloss.footprint_batch_size);
    let facts = model_facts(&model, &plan, batch);
    let report = cost_report(
        &facts,
        &plan.bits(model.params()),
        batch,
        &AcceleratorModel::all(),
    )?;
    print!("{}", report.render_text());
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    persistence::write_json(&dir.join("cost.json"), &report)?;
    Ok(())
}

fn report(a: &Common) -> bitprune::Result<()> {
    let dir = match (&a.out, &a.checkpoint) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.parent().unwrap_or(Path::new(".")).to_path_buf(),
        (None, None) => return Err(Error::Config("--out (run directory) is required".into())),
    };
    let text = std::fs::read_to_string(dir.join("summary.json")).map_err(|e| Error::Io {
        path: dir.join("summary.json").display().to_string(),
        source: e,
    })?;
    let summary: RunSummary = serde_json::from_str(&text)?;
    let records: Vec<EpochRecord> =
        persistence::read_jsonl(&dir.join("records.jsonl")).unwrap_or_default();
    print!("{}", render_report(&summary, &records));
    Ok(())
}

fn render_report(s: &RunSummary, records: &[EpochRecord]) -> String {
    let mut out = String::new();
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    let _ = writeln!(
        out,
        "Run {} ({})",
        s.config_hash,
        if s.quantized { "quantized" } else { "float" }
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<10} {:>6} {:>9} {:>22} {:>22}",
        "phase", "epochs", "accuracy", "Weights # of bits", "Activations # of bits"
    );
    for p in &s.phases {
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>9.4} {:>22} {:>22}",
            p.name,
            p.epochs,
            p.final_accuracy,
            opt(p.mean_weight_bits),
            opt(p.mean_activation_bits)
        );
    }
    if let Some(r) = &s.rounding {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "rounding: mean bitlength {:.4} -> {:.4}, accuracy {:.4} (non-integer) -> {:.4} (rounded integer)",
            r.mean_before, r.mean_after, r.accuracy_real, r.accuracy_rounded
        );
    }
    if !s.bits.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>8}", "group", "bits");
        for (g, n) in &s.bits {
            let _ = writeln!(out, "{g:<24} {n:>8.4}");
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<24} {:>8}",
            "Weights # of bits",
            opt(s.mean_weight_bits)
        );
        let _ = writeln!(
            out,
            "{:<24} {:>8}",
            "Activations # of bits",
            opt(s.mean_activation_bits)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "final accuracy {}  best {} (epoch {})",
        opt(s.final_accuracy),
        opt(s.best_accuracy),
        s.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    if !records.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<9} {:>4} {:>10} {:>8} {:>8} {:>8} {:>8}",
            "phase", "ep", "task", "bitloss", "acc", "W bits", "A bits"
        );
        for r in records {
            let _ = writeln!(out, "{}", epoch_line(r));
        }
    }
    out
}
