use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use nmrf::checkpoint::{self, Checkpoint};
use nmrf::config::{DisparityFormat, PairFiles, RunConfig};
use nmrf::data::io::{write_disparity, DisparityMap};
use nmrf::data::metrics::{MetricsAccumulator, MetricsReport};
use nmrf::data::viz::{save_disparity_png, save_error_png};
use nmrf::model::{NmrfModel, StageTimings};
use nmrf::report::{
    mean_timings, validate_report, EvalReport, ImageReport, ProposeReport, TrainReport, EVAL_SCHEMA, PROPOSE_SCHEMA,
    TRAIN_SCHEMA,
};
use nmrf::supervision::losses::supervised_mask;
use nmrf::train::{build_split, evaluate, full_res_candidates, Trainer, TrainingSample};

#[derive(Parser)]
#[command(name = "nmrf", version, about = "Neural MRF stereo matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a loss log and a report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data split or a single pair.
    Eval(EvalArgs),
    /// Predict disparity for one stereo pair.
    Infer(InferArgs),
    /// Dump candidate disparities and their recall.
    Propose(EvalArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config; `preset` and `include` keys are honoured.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset (`toy` or `full`) used when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    /// Override any config path, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory receiving every output of the run.
    #[arg(long)]
    run_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "eval")]
    split: Split,
    /// Evaluate a single pair instead of a split.
    #[arg(long, requires = "right")]
    left: Option<String>,
    #[arg(long, requires = "left")]
    right: Option<String>,
    #[arg(long)]
    disparity: Option<String>,
    /// Succeed even when no pixel has valid ground truth.
    #[arg(long)]
    allow_empty: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value = "pfm")]
    format: DisparityFormat,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a, false),
        Command::Propose(a) => cmd_eval(a, true),
        Command::Infer(a) => cmd_infer(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let mut o = args.overrides.clone();
            if let Some(p) = &args.preset {
                o.insert(0, format!("preset=\"{p}\""));
            }
            RunConfig::load(path, &o)?
        }
        (None, Some(p)) => RunConfig::from_preset(p, &args.overrides)?,
        (None, None) => RunConfig::from_preset("toy", &args.overrides)?,
    };
    Ok(cfg)
}

/// The checkpoint's config, or an explicitly given one that must describe the
/// same architecture.
fn resolve_for_checkpoint(args: &ConfigArgs, ck: &Checkpoint) -> Result<RunConfig> {
    if args.config.is_some() || args.preset.is_some() {
        let cfg = resolve(args)?;
        ck.check_compatible(&cfg)?;
        return Ok(cfg);
    }
    let cfg = ck.config.with_overrides(&args.overrides)?;
    ck.check_compatible(&cfg)?;
    Ok(cfg)
}

fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    validate_report(&text).context("report failed its own schema check")?;
    fs::write(path, text)?;
    Ok(())
}

fn set_determinism(cfg: &RunConfig) {
    if cfg.train.deterministic && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        // Single-threaded kernels keep reduction order, and thus every bit,
        // fixed across runs.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.config)?;
    set_determinism(&cfg);
    prepare_run_dir(&args.run_dir, &cfg)?;
    let ck_dir = args.run_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let mut trainer = match &args.resume {
        Some(p) => checkpoint::load(p)?.trainer(cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    info!(
        "model {} with {} parameters, starting at step {}",
        cfg.model_hash(),
        trainer.model.store.num_parameters(),
        trainer.step
    );
    let train = build_split(&cfg, true)?;
    info!("{} training pairs", train.len());
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(args.run_dir.join("log.jsonl"))?;
    let started = Instant::now();
    let mut last = None;
    while trainer.step < cfg.train.steps {
        let entry = match trainer.train_step(&train) {
            Ok(e) => e,
            Err(e @ nmrf::Error::Diverged { .. }) => {
                let path = args.run_dir.join("diverged.txt");
                fs::write(&path, format!("{e}\n"))?;
                bail!("{e} (diagnostics in {})", path.display());
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(log, "{}", serde_json::to_string(&entry)?)?;
        if entry.step % cfg.train.log_every.max(1) == 0 {
            info!(
                "step {:>5} lr {:.2e} loss {:.4} (init {:.4} prop {:.4} coarse {:.4} refine {:.4}) {:.2}s",
                entry.step, entry.lr, entry.total, entry.init, entry.proposal, entry.coarse, entry.refine, entry.seconds
            );
        }
        last = Some(entry);
        if cfg.train.checkpoint_every > 0 && trainer.step % cfg.train.checkpoint_every == 0 {
            let p = ck_dir.join(format!("step_{:06}.safetensors", trainer.step));
            checkpoint::save(&p, &cfg, &trainer.model, Some(&trainer.optimizer), trainer.step)?;
        }
    }
    let final_path = args.run_dir.join("final.safetensors");
    checkpoint::save(&final_path, &cfg, &trainer.model, Some(&trainer.optimizer), trainer.step)?;
    let train_eval = evaluate(&trainer.model, &train)?;
    let held_out = build_split(&cfg, false)?;
    let eval = evaluate(&trainer.model, &held_out)?;
    println!("training split");
    print_table(&train_eval.metrics);
    println!("held-out split");
    print_table(&eval.metrics);
    let report = TrainReport {
        schema: TRAIN_SCHEMA.into(),
        model_hash: cfg.model_hash(),
        steps: trainer.step,
        seconds: started.elapsed().as_secs_f64(),
        last,
        train_metrics: Some(train_eval.metrics),
        eval_metrics: Some(eval.metrics),
    };
    write_json(&args.run_dir.join("train_report.json"), &report)?;
    println!("checkpoint: {}", final_path.display());
    Ok(ExitCode::SUCCESS)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.3}"))
}

fn print_table(m: &MetricsReport) {
    println!("  {:<14}{}", "valid pixels", m.pixels);
    for (name, v) in [
        ("EPE", m.epe),
        ("Bad-1.0 %", m.bad_1),
        ("Bad-2.0 %", m.bad_2),
        ("Bad-3.0 %", m.bad_3),
        ("D1 %", m.d1),
        ("recall-3 %", m.recall_3),
        ("recall-8 %", m.recall_8),
        ("recall-16 %", m.recall_16),
        ("proposal EPE", m.proposal_epe),
    ] {
        println!("  {name:<14}{}", fmt(v));
    }
}

fn print_timings(t: &StageTimings) {
    for (name, s) in t.stages() {
        println!("  {name:<20}{:>9.1} ms", s * 1e3);
    }
    println!("  {:<20}{:>9.1} ms", "total", t.total() * 1e3);
}

fn load_samples(args: &EvalArgs, cfg: &RunConfig) -> Result<Vec<(String, TrainingSample)>> {
    if let (Some(l), Some(r)) = (&args.left, &args.right) {
        let files = PairFiles {
            left: l.clone(),
            right: r.clone(),
            disparity: args.disparity.clone(),
            format: None,
            segments: None,
        };
        return Ok(vec![("pair".into(), TrainingSample::load(&files, &cfg.data.segmenter)?)]);
    }
    let train = matches!(args.split, Split::Train);
    let name = if train { "train" } else { "eval" };
    Ok(build_split(cfg, train)?
        .into_iter()
        .enumerate()
        .map(|(n, s)| (format!("{name}_{n:03}"), s))
        .collect())
}

fn cmd_eval(args: EvalArgs, proposals_only: bool) -> Result<ExitCode> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let cfg = resolve_for_checkpoint(&args.config, &ck)?;
    set_determinism(&cfg);
    prepare_run_dir(&args.run_dir, &cfg)?;
    let model = ck.model()?;
    let named = load_samples(&args, &cfg)?;
    let samples: Vec<TrainingSample> = named.iter().map(|(_, s)| s.clone()).collect();
    let result = evaluate(&model, &samples)?;
    let zmax = cfg.model.max_disparity as f32;
    let mut images = Vec::new();
    for (((name, s), p), m) in named.iter().zip(&result.predictions).zip(&result.per_image) {
        let mask = supervised_mask(&s.disparity, &s.valid, zmax);
        if proposals_only {
            let cands = full_res_candidates(p);
            let dump: Vec<Vec<f32>> = cands.chunks(p.k).map(|c| c.to_vec()).collect();
            fs::write(
                args.run_dir.join(format!("{name}_candidates.json")),
                serde_json::to_string(&serde_json::json!({
                    "height": p.height, "width": p.width, "k": p.k, "candidates": dump
                }))?,
            )?;
        } else {
            save_disparity_png(&args.run_dir.join(format!("{name}_disparity.png")), &p.disparity, p.height, p.width, zmax)?;
            save_error_png(&args.run_dir.join(format!("{name}_error.png")), &p.disparity, &s.disparity, &mask, p.height, p.width)?;
        }
        let mut metrics = m.clone();
        if proposals_only {
            let mut acc = MetricsAccumulator::default();
            acc.add(&p.coarse, &s.disparity, &mask, Some((&full_res_candidates(p), p.k)))?;
            metrics = acc.finish();
        }
        images.push(ImageReport {
            name: name.clone(),
            height: p.height,
            width: p.width,
            metrics,
            timings: p.timings,
        });
    }
    let timings: Vec<StageTimings> = result.predictions.iter().map(|p| p.timings).collect();
    let aggregate = result.metrics.clone();
    if proposals_only {
        let agg = result.coarse_metrics.clone();
        let report = ProposeReport {
            schema: PROPOSE_SCHEMA.into(),
            model_hash: cfg.model_hash(),
            k: cfg.model.k,
            aggregate: agg.clone(),
            images,
        };
        write_json(&args.run_dir.join("propose_report.json"), &report)?;
        println!("candidates (k = {})", cfg.model.k);
        for (name, v) in [
            ("recall-3 %", agg.recall_3),
            ("recall-8 %", agg.recall_8),
            ("recall-16 %", agg.recall_16),
            ("proposal EPE", agg.proposal_epe),
        ] {
            println!("  {name:<14}{}", fmt(v));
        }
    } else {
        let report = EvalReport {
            schema: EVAL_SCHEMA.into(),
            model_hash: cfg.model_hash(),
            step: ck.step,
            aggregate: aggregate.clone(),
            coarse: result.coarse_metrics.clone(),
            mean_timings: mean_timings(&timings),
            images,
        };
        write_json(&args.run_dir.join("eval_report.json"), &report)?;
        print_table(&aggregate);
        println!("mean stage timings");
        print_timings(&report.mean_timings);
    }
    if !aggregate.defined {
        if args.allow_empty {
            println!("no valid ground-truth pixels: metrics are undefined");
        } else {
            bail!("no valid ground-truth pixels: metrics are undefined (pass --allow-empty to accept)");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode> {
    let ck = checkpoint::load(&args.checkpoint)?;
    set_determinism(&ck.config);
    prepare_run_dir(&args.run_dir, &ck.config)?;
    let model: NmrfModel = ck.model()?;
    let left = nmrf::data::io::read_rgb(&args.left)?;
    let right = nmrf::data::io::read_rgb(&args.right)?;
    let p = model.predict(&left, &right)?;
    let ext = match args.format {
        DisparityFormat::Pfm => "pfm",
        DisparityFormat::KittiPng16 => "png",
    };
    let out = args.run_dir.join(format!("disparity.{ext}"));
    write_disparity(&out, &DisparityMap::new(p.height, p.width, p.disparity.clone()), args.format)?;
    let preview = args.run_dir.join("disparity_preview.png");
    save_disparity_png(&preview, &p.disparity, p.height, p.width, ck.config.model.max_disparity as f32)?;
    println!("wrote {} and {}", out.display(), preview.display());
    println!("stage timings");
    print_timings(&p.timings);
    Ok(ExitCode::SUCCESS)
}
