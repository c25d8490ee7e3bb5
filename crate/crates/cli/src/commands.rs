//! Subcommand dispatch and the run-directory contract.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dias_core::checkpoint::{load_checkpoint, save_checkpoint, weights_digest, CheckpointMeta};
use dias_core::data::{
    build_index, load_example, load_probability_png, load_sequence, load_split, load_vessel_mask, save_label_map,
    save_sequence, DatasetIndex, Example, Split, LABEL_FILE, SCRIBBLE_FILE,
};
use dias_core::eval::{evaluate_maps, evaluate_model, EvalReport};
use dias_core::model::Model;
use dias_core::selftrain::rpst_train;
use dias_core::tools::{generate_rdfa, project, synthesize_sequence, ProjectionMode};
use dias_core::train::{train_fss, train_wss, EpochRecord};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};
use crate::plot::{render_curves, write_overlay};
use crate::{logging, CliError};

#[derive(Debug, Parser)]
#[command(name = "dias", version, about = "Vessel segmentation of angiography sequences")]
pub struct Cli {
    /// TOML config file; every key has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seeds are stored in TOML, whose integers are signed 64-bit.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub device: Option<String>,

    /// Dotted-path override such as `train.epochs=5` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fully-supervised training with Dice+CE.
    TrainFss,
    /// Scribble-supervised training (pCE or SSCR, see `wss.variant`).
    TrainWss,
    /// Teacher-student self-training with mixed patch batches.
    Rpst {
        #[arg(long)]
        labeled_count: Option<usize>,
        #[arg(long)]
        unlabeled_count: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Metrics for a checkpoint or for precomputed probability maps.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        csv: bool,
    },
    /// Writes a synthetic dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        labeled: Option<usize>,
        #[arg(long)]
        unlabeled: Option<usize>,
    },
    /// Writes RDFA scribbles for every labeled sequence.
    GenScribble {
        #[arg(long)]
        keep_fraction: Option<f64>,
    },
    /// Writes a dataset copy with every sequence temporally projected.
    Project {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ProjectionMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Renders curves and overlays for a finished run.
    Plot {
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown split `{s}`"))
}

fn parse_mode(s: &str) -> Result<ProjectionMode, String> {
    s.parse::<ProjectionMode>().map_err(|e| e.to_string())
}

fn quoted(p: &Path) -> String {
    toml::Value::String(p.to_string_lossy().into_owned()).to_string()
}

impl Cli {
    /// Subcommand flags expressed as overrides; they win over `--override`.
    fn flag_overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(d) = &self.device {
            o.push(format!("device={}", toml::Value::String(d.clone())));
        }
        match &self.command {
            Command::Rpst {
                labeled_count,
                unlabeled_count,
                iterations,
                p,
            } => {
                if let Some(v) = labeled_count {
                    o.push(format!("data.labeled_count={v}"));
                }
                if let Some(v) = unlabeled_count {
                    o.push(format!("data.unlabeled_count={v}"));
                }
                if let Some(v) = iterations {
                    o.push(format!("rpst.iterations={v}"));
                }
                if let Some(v) = p {
                    o.push(format!("rpst.p={v:?}"));
                }
            }
            Command::Eval {
                checkpoint,
                predictions,
                split,
                csv,
            } => {
                if let Some(c) = checkpoint {
                    o.push(format!("eval.checkpoint={}", quoted(c)));
                }
                if let Some(pr) = predictions {
                    o.push(format!("eval.predictions={}", quoted(pr)));
                }
                if let Some(s) = split {
                    o.push(format!("eval.split={}", serde_json::to_string(s).expect("split serialises")));
                }
                if *csv {
                    o.push("eval.csv=true".into());
                }
            }
            Command::Synth { out, labeled, unlabeled } => {
                if let Some(p) = out {
                    o.push(format!("synth.out={}", quoted(p)));
                }
                if let Some(v) = labeled {
                    o.push(format!("synth.labeled={v}"));
                }
                if let Some(v) = unlabeled {
                    o.push(format!("synth.unlabeled={v}"));
                }
            }
            Command::GenScribble { keep_fraction } => {
                if let Some(k) = keep_fraction {
                    o.push(format!("rdfa.keep_fraction={k:?}"));
                }
            }
            Command::Project { mode, out } => {
                if let Some(m) = mode {
                    o.push(format!("project.mode={}", serde_json::to_string(m).expect("mode serialises")));
                }
                if let Some(p) = out {
                    o.push(format!("project.out={}", quoted(p)));
                }
            }
            Command::Plot { run } => {
                if let Some(r) = run {
                    o.push(format!("plot.run={}", quoted(r)));
                }
            }
            Command::TrainFss | Command::TrainWss => {}
        }
        o
    }

    pub fn resolve_config(&self) -> Result<RunConfig, ConfigError> {
        let mut overrides = self.overrides.clone();
        overrides.extend(self.flag_overrides());
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        cfg.check_device()?;
        Ok(cfg)
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::TrainFss => "train-fss",
        Command::TrainWss => "train-wss",
        Command::Rpst { .. } => "rpst",
        Command::Eval { .. } => "eval",
        Command::Synth { .. } => "synth",
        Command::GenScribble { .. } => "gen-scribble",
        Command::Project { .. } => "project",
        Command::Plot { .. } => "plot",
    }
}

/// A `runs/<timestamp>-<name>/` directory.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    fn create(cfg: &RunConfig) -> Result<Self, CliError> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = cfg.runs_dir.join(format!("{stamp}-{}", cfg.name));
        let mut path = base.clone();
        let mut k = 1;
        while path.exists() {
            k += 1;
            path = PathBuf::from(format!("{}-{k}", base.display()));
        }
        for sub in ["checkpoints", "plots"] {
            let d = path.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        let snap = path.join("config.snapshot");
        std::fs::write(&snap, cfg.to_toml()).map_err(|e| CliError::io(&snap, e))?;
        let logs = path.join("logs.txt");
        logging::set_log_file(&logs).map_err(|e| CliError::io(&logs, e))?;
        Ok(Self { path })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join("checkpoints").join(name)
    }

    fn write_metrics(&self, metrics: &Value) -> Result<(), CliError> {
        let p = self.path.join("metrics.json");
        let text = serde_json::to_string_pretty(metrics)?;
        std::fs::write(&p, text + "\n").map_err(|e| CliError::io(&p, e))
    }
}

/// Parses arguments already split by the shell and runs one command.
/// Returns the run directory when the command creates one.
pub fn execute(cli: &Cli) -> Result<Option<PathBuf>, CliError> {
    logging::init();
    let cfg = cli.resolve_config()?;
    if let Command::Plot { .. } = cli.command {
        plot_run(&cfg)?;
        return Ok(None);
    }
    preflight(&cfg, &cli.command)?;
    let run = RunDir::create(&cfg)?;
    log::info!("{} -> {}", command_name(&cli.command), run.path.display());
    let metrics = match &cli.command {
        Command::TrainFss => cmd_train_fss(&cfg, &run),
        Command::TrainWss => cmd_train_wss(&cfg, &run),
        Command::Rpst { .. } => cmd_rpst(&cfg, &run),
        Command::Eval { .. } => cmd_eval(&cfg, &run),
        Command::Synth { .. } => cmd_synth(&cfg),
        Command::GenScribble { .. } => cmd_gen_scribble(&cfg),
        Command::Project { .. } => cmd_project(&cfg),
        Command::Plot { .. } => unreachable!("handled above"),
    };
    let metrics = match metrics {
        Ok(m) => m,
        Err(e) => {
            log::error!("{e}");
            logging::close_log_file();
            return Err(e);
        }
    };
    let mut full = json!({
        "command": command_name(&cli.command),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    });
    if let (Value::Object(dst), Value::Object(src)) = (&mut full, metrics) {
        dst.extend(src);
    }
    run.write_metrics(&full)?;
    logging::close_log_file();
    Ok(Some(run.path))
}

/// Config errors that would otherwise surface after the run directory exists.
fn preflight(cfg: &RunConfig, command: &Command) -> Result<(), ConfigError> {
    match command {
        Command::Synth { .. } if cfg.synth.out.is_some() => Ok(()),
        Command::Eval { .. } if cfg.eval.checkpoint.is_none() && cfg.eval.predictions.is_none() => {
            Err(ConfigError::Missing {
                key: "eval.checkpoint".into(),
            })
        }
        Command::Project { .. } if cfg.project.out.is_none() => Err(ConfigError::Missing {
            key: "project.out".into(),
        }),
        _ => cfg.data_root().map(|_| ()),
    }
}

struct Splits {
    train: Vec<Example>,
    val: Vec<Example>,
    eval: Vec<Example>,
}

fn index(cfg: &RunConfig) -> Result<DatasetIndex, CliError> {
    let root = cfg.data_root()?;
    Ok(build_index(&root, &cfg.data.split)?)
}

fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let idx = index(cfg)?;
    let frames = cfg.model.seq_len;
    let mut train = load_split(&idx, Split::Train, frames)?;
    if let Some(n) = cfg.data.labeled_count {
        train.truncate(n);
    }
    let val = load_split(&idx, Split::Val, frames)?;
    let eval = load_split(&idx, cfg.eval.split, frames)?;
    log::info!("data: {} train, {} val, {} eval sequences", train.len(), val.len(), eval.len());
    Ok(Splits { train, val, eval })
}

fn save_model(run: &RunDir, name: &str, model: &Model, cfg: &RunConfig, epoch: usize, val_dsc: Option<f64>) -> Result<(), CliError> {
    let meta = CheckpointMeta {
        architecture: model.config().clone(),
        config_hash: cfg.hash(),
        epoch,
        val_dsc,
    };
    save_checkpoint(&run.checkpoint(name), model, &meta)?;
    Ok(())
}

fn eval_report(cfg: &RunConfig, model: &Model, examples: &[Example]) -> Result<Option<EvalReport>, CliError> {
    if examples.is_empty() {
        return Ok(None);
    }
    let per = evaluate_model(model, examples, cfg.train.tile)?;
    Ok(Some(EvalReport::from_sequences(per, &cfg.hash(), &weights_digest(model))))
}

fn history_json(h: &[EpochRecord]) -> Value {
    serde_json::to_value(h).expect("history serialises")
}

fn cmd_train_fss(cfg: &RunConfig, run: &RunDir) -> Result<Value, CliError> {
    let s = load_splits(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = train_fss(&cfg.model, &s.train, &s.val, &cfg.train, &mut rng)?;
    save_model(run, "best.ckpt", &out.model, cfg, out.best_epoch, out.best_val_dsc)?;
    let report = eval_report(cfg, &out.model, &s.eval)?;
    Ok(json!({
        "best_epoch": out.best_epoch,
        "best_val_dsc": out.best_val_dsc,
        "history": history_json(&out.history),
        "eval": report,
    }))
}

fn cmd_train_wss(cfg: &RunConfig, run: &RunDir) -> Result<Value, CliError> {
    let s = load_splits(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = train_wss(&cfg.model, &s.train, &s.val, &cfg.train, &cfg.wss, &mut rng)?;
    let o = &out.outcome;
    save_model(run, "best.ckpt", &o.model, cfg, o.best_epoch, o.best_val_dsc)?;
    if let Some(b) = &out.net_b {
        save_model(run, "net_b.ckpt", b, cfg, cfg.train.epochs, None)?;
    }
    let report = eval_report(cfg, &o.model, &s.eval)?;
    Ok(json!({
        "variant": cfg.wss.variant,
        "best_epoch": o.best_epoch,
        "best_val_dsc": o.best_val_dsc,
        "history": history_json(&o.history),
        "eval": report,
    }))
}

fn cmd_rpst(cfg: &RunConfig, run: &RunDir) -> Result<Value, CliError> {
    let s = load_splits(cfg)?;
    let idx = index(cfg)?;
    let mut unlabeled = load_split(&idx, Split::Unlabeled, cfg.model.seq_len)?;
    if let Some(n) = cfg.data.unlabeled_count {
        unlabeled.truncate(n);
    }
    log::info!("rpst: {} labeled, {} unlabeled", s.train.len(), unlabeled.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out = rpst_train(&cfg.model, &s.train, &unlabeled, &s.val, &cfg.train, &cfg.rpst, &mut rng)?;
    let t = &out.teacher;
    save_model(run, "teacher.ckpt", &t.model, cfg, t.best_epoch, t.best_val_dsc)?;
    for (k, st) in out.students.iter().enumerate() {
        save_model(run, &format!("student_{}.ckpt", k + 1), &st.model, cfg, st.best_epoch, st.best_val_dsc)?;
    }
    let last = out.students.last().expect("at least one student");
    save_model(run, "best.ckpt", &last.model, cfg, last.best_epoch, last.best_val_dsc)?;
    let report = eval_report(cfg, out.model(), &s.eval)?;
    Ok(json!({
        "teacher_val_dsc": out.teacher_val_dsc,
        "student_val_dsc": out.student_val_dsc,
        "generations": out.generation(),
        "pool_generations": out.pool_generations,
        "history": history_json(&last.history),
        "teacher_history": history_json(&t.history),
        "student_histories": out.students.iter().map(|s| history_json(&s.history)).collect::<Vec<_>>(),
        "eval": report,
    }))
}

fn cmd_eval(cfg: &RunConfig, run: &RunDir) -> Result<Value, CliError> {
    let idx = index(cfg)?;
    let report = if let Some(ckpt) = &cfg.eval.checkpoint {
        let (model, _) = load_checkpoint(ckpt)?;
        let examples = load_split(&idx, cfg.eval.split, model.config().seq_len)?;
        let per = evaluate_model(&model, &examples, cfg.train.tile)?;
        EvalReport::from_sequences(per, &cfg.hash(), &weights_digest(&model))
    } else if let Some(dir) = &cfg.eval.predictions {
        let mut maps = Vec::new();
        for e in idx.split(cfg.eval.split) {
            let id = e.sequence_id();
            let label = e.label_path.as_deref().ok_or_else(|| ConfigError::Invalid {
                key: "eval.split".into(),
                message: format!("{id} has no label"),
            })?;
            let probs = load_probability_png(&dir.join(format!("{id}.png")))?;
            maps.push((id, probs, load_vessel_mask(label)?));
        }
        let per = evaluate_maps(maps.iter().map(|(id, p, g)| (id.clone(), p, g)))?;
        EvalReport::from_sequences(per, &cfg.hash(), "predictions")
    } else {
        return Err(ConfigError::Missing {
            key: "eval.checkpoint".into(),
        }
        .into());
    };
    if cfg.eval.csv {
        let p = run.path.join("metrics.csv");
        std::fs::write(&p, report.to_csv()).map_err(|e| CliError::io(&p, e))?;
    }
    log::info!("mean dsc {:.4} over {} sequences", report.mean.dsc, report.per_sequence.len());
    Ok(serde_json::to_value(report)?)
}

fn cmd_synth(cfg: &RunConfig) -> Result<Value, CliError> {
    let out = match &cfg.synth.out {
        Some(p) => p.clone(),
        None => cfg.data_root()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = &cfg.synth.spec;
    let mut labeled = Vec::new();
    for i in 0..cfg.synth.labeled {
        let id = format!("p{i:03}/s000");
        let dir = out.join("labeled").join(&id);
        let (seq, mask) = synthesize_sequence(&id, spec, &mut rng)?;
        save_sequence(&dir, &seq)?;
        save_label_map(&dir.join(LABEL_FILE), mask.as_map())?;
        let annotated = if cfg.synth.scribbles {
            let s = generate_rdfa(&mask, &cfg.rdfa, &mut rng)?;
            save_label_map(&dir.join(SCRIBBLE_FILE), s.as_map())?;
            Some(s.annotated_count())
        } else {
            None
        };
        labeled.push(json!({
            "sequence_id": id,
            "vessel_pixels": mask.foreground_count(),
            "scribble_pixels": annotated,
        }));
    }
    let mut unlabeled = Vec::new();
    for i in 0..cfg.synth.unlabeled {
        let id = format!("u{i:03}/s000");
        let (seq, mask) = synthesize_sequence(&id, spec, &mut rng)?;
        save_sequence(&out.join("unlabeled").join(&id), &seq)?;
        unlabeled.push(json!({ "sequence_id": id, "vessel_pixels": mask.foreground_count() }));
    }
    log::info!("wrote {} labeled and {} unlabeled sequences to {}", labeled.len(), unlabeled.len(), out.display());
    Ok(json!({ "labeled": labeled, "unlabeled": unlabeled }))
}

fn cmd_gen_scribble(cfg: &RunConfig) -> Result<Value, CliError> {
    let idx = index(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for e in &idx.entries {
        let Some(label) = &e.label_path else { continue };
        let mask = load_vessel_mask(label)?;
        let s = generate_rdfa(&mask, &cfg.rdfa, &mut rng)?;
        save_label_map(&e.sequence_path.join(SCRIBBLE_FILE), s.as_map())?;
        rows.push(json!({ "sequence_id": e.sequence_id(), "scribble_pixels": s.annotated_count() }));
    }
    Ok(json!({ "keep_fraction": cfg.rdfa.keep_fraction, "sequences": rows }))
}

fn cmd_project(cfg: &RunConfig) -> Result<Value, CliError> {
    let root = cfg.data_root()?;
    let out = cfg.project.out.clone().ok_or_else(|| ConfigError::Missing {
        key: "project.out".into(),
    })?;
    let idx = build_index(&root, &cfg.data.split)?;
    let mut count = 0;
    let mut frames = 0;
    for e in &idx.entries {
        let rel = e.sequence_path.strip_prefix(&root).unwrap_or(&e.sequence_path);
        let dst = out.join(rel);
        let p = project(&load_sequence(&e.sequence_path)?, cfg.project.mode)?;
        save_sequence(&dst, &p)?;
        for (src, name) in [(&e.label_path, LABEL_FILE), (&e.scribble_path, SCRIBBLE_FILE)] {
            if let Some(src) = src {
                let to = dst.join(name);
                std::fs::copy(src, &to).map_err(|err| CliError::io(&to, err))?;
            }
        }
        count += 1;
        frames = p.num_frames();
    }
    Ok(json!({ "mode": cfg.project.mode, "sequences": count, "frames": frames }))
}

fn newest_run(runs_dir: &Path) -> Result<PathBuf, CliError> {
    let mut runs: Vec<PathBuf> = std::fs::read_dir(runs_dir)
        .map_err(|e| CliError::io(runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    runs.sort();
    runs.pop().ok_or_else(|| {
        ConfigError::Missing {
            key: "plot.run".into(),
        }
        .into()
    })
}

fn curve(history: &Value, field: &str) -> Vec<(f64, f64)> {
    history
        .as_array()
        .map(|rows| {
            rows.iter()
                .filter_map(|r| Some((r.get("epoch")?.as_f64()?, r.get(field)?.as_f64()?)))
                .collect()
        })
        .unwrap_or_default()
}

fn plot_run(cfg: &RunConfig) -> Result<(), CliError> {
    let run = match &cfg.plot.run {
        Some(r) => r.clone(),
        None => newest_run(&cfg.runs_dir)?,
    };
    let metrics_path = run.join("metrics.json");
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let metrics: Value = serde_json::from_str(&text)?;
    let plots = run.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| CliError::io(&plots, e))?;
    if let Some(h) = metrics.get("history") {
        let loss = curve(h, "train_loss");
        let dsc = curve(h, "val_dsc");
        if !loss.is_empty() {
            render_curves(&plots.join("loss.svg"), "training loss", &[("train loss".into(), loss)])?;
        }
        if !dsc.is_empty() {
            let mut series = vec![("val DSC".to_string(), dsc)];
            if let Some(t) = metrics.get("teacher_history") {
                series.push(("teacher val DSC".into(), curve(t, "val_dsc")));
            }
            render_curves(&plots.join("val_dsc.svg"), "validation DSC", &series)?;
        }
    }
    let ckpt = run.join("checkpoints").join("best.ckpt");
    if cfg.plot.overlays == 0 || !ckpt.is_file() {
        return Ok(());
    }
    let idx = match index(cfg) {
        Ok(i) => i,
        Err(e) => {
            log::warn!("skipping overlays: {e}");
            return Ok(());
        }
    };
    let (model, _) = load_checkpoint(&ckpt)?;
    for e in idx.split(cfg.eval.split).take(cfg.plot.overlays) {
        let ex = load_example(e, model.config().seq_len)?;
        let probs = model.predict(&ex.sequence, cfg.train.tile)?;
        let base = project(&ex.sequence, ProjectionMode::Min)?;
        let name = format!("overlay_{}.png", e.sequence_id().replace('/', "_"));
        write_overlay(&plots.join(name), base.frames().data(), &probs.binarize(0.5), ex.label.as_ref())?;
    }
    Ok(())
}
