use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use anyshot::alignment::AlignmentModel;
use anyshot::config::{ConfigBuilder, ExperimentConfig};
use anyshot::detector::write_detections_csv;
use anyshot::eval::{detect_scenes, report_from_detections, summary_row, write_report_json, EvalMode, SUMMARY_HEADER};
use anyshot::experiment::{base_model, prepare, run_sweep, second_stage, supported_modes, sweep_table, Prepared};
use anyshot::loss::{grad_check, loss_curve, write_curve_csv, CurveReference, GradCheckGrid, LossConfig};
use anyshot::semantics::Partition;
use anyshot::synthdata::{load_bundle, save_bundle};
use anyshot::trainer::TrainReport;

/// Any-shot detection experiments on a synthetic benchmark.
#[derive(Debug, Parser)]
#[command(name = "anyshot", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override a config key, e.g. `--set beta=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world and its splits.
    Synth,
    /// Train the base model on seen classes.
    TrainBase,
    /// Second stage: fine-tune on the few-shot split, or self-tune when there
    /// are no few-shot classes.
    FineTune,
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Modes to evaluate; all modes the split supports by default.
        #[arg(long = "mode")]
        modes: Vec<EvalMode>,
        #[arg(long, value_enum, default_value_t = StageArg::Tuned)]
        stage: StageArg,
    },
    /// Compare analytic loss gradients with finite differences.
    GradCheck {
        /// Scale analytic gradients by `1 + FACTOR` before comparing.
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Write loss and gradient curves.
    LossCurve,
    /// Fine-tune over a beta by lambda grid and report novel mAP.
    Sweep,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Base,
    Tuned,
}

impl StageArg {
    fn name(self) -> &'static str {
        match self {
            StageArg::Base => "base",
            StageArg::Tuned => "tuned",
        }
    }
}

fn load_config(args: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut builder = ConfigBuilder::default();
    if let Some(path) = &args.config {
        builder = builder.file(path)?;
    }
    builder = builder.env(std::env::vars());
    for s in &args.sets {
        builder = builder.set(s)?;
    }
    let mut cfg = builder.build()?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed-{seed}"))
}

fn bundle_dir(run: &Path) -> PathBuf {
    run.join("bundle")
}

fn checkpoint_path(run: &Path, stage: StageArg) -> PathBuf {
    run.join(format!("{}.ckpt.json", stage.name()))
}

/// SHA-256 over the sorted file names and contents of a flat directory.
fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.is_file());
    names.sort();
    let mut hasher = Sha256::new();
    for path in names {
        hasher.update(path.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update([0]);
        hasher.update(fs::read(&path)?);
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn load_prepared(run: &Path) -> Result<Prepared> {
    let dir = bundle_dir(run);
    if !dir.join("world.json").exists() {
        bail!("no dataset bundle in {}; run `anyshot synth` first", dir.display());
    }
    let loaded = load_bundle(&dir).with_context(|| format!("loading bundle from {}", dir.display()))?;
    Ok(Prepared {
        world: loaded.world,
        bundle: loaded.bundle,
    })
}

fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

fn for_each_seed<F>(cfg: &ExperimentConfig, f: F) -> Result<()>
where
    F: Fn(u64, &Path) -> Result<String> + Sync,
{
    let lines: Vec<String> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = run_dir(cfg, seed);
            fs::create_dir_all(&run)?;
            f(seed, &run).with_context(|| format!("seed {seed}"))
        })
        .collect::<Result<_>>()?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let world = cfg.world();
    let sizes = cfg.sizes();
    for_each_seed(cfg, |seed, run| {
        let prep = prepare(&world, &sizes, cfg.shots, seed)?;
        let dir = bundle_dir(run);
        save_bundle(&dir, &prep.world, &sizes, &prep.bundle)?;
        let sem = prep.semantics();
        let b = &prep.bundle;
        let ft = if b.d_ft.is_empty() {
            "d_ft absent".to_string()
        } else {
            format!(
                "d_ft {} scenes, {} few-shot boxes",
                b.d_ft.len(),
                b.box_count(&b.d_ft, Partition::FewShot, sem)
            )
        };
        Ok(format!(
            "seed {seed}: {} S={} F={} U={} k={}; d_tr {} scenes; {ft}; d_ts {} scenes; digest {}",
            world.setting(),
            sem.seen_count(),
            sem.few_count(),
            sem.unseen_count(),
            b.shots,
            b.d_tr.len(),
            b.d_ts.len(),
            dir_digest(&dir)?
        ))
    })
}

fn last_loss(report: &TrainReport) -> f64 {
    report.epoch_losses.last().copied().unwrap_or(f64::NAN)
}

fn cmd_train_base(cfg: &ExperimentConfig) -> Result<()> {
    for_each_seed(cfg, |seed, run| {
        let prep = load_prepared(run)?;
        let (model, report) = base_model(&prep, &cfg.train(seed)?)?;
        model.save(&checkpoint_path(run, StageArg::Base))?;
        write_train_report(&run.join("base_report.json"), &report)?;
        Ok(format!(
            "seed {seed}: base training done, {} epochs, final loss {:.6}",
            report.epoch_losses.len(),
            last_loss(&report)
        ))
    })
}

fn cmd_fine_tune(cfg: &ExperimentConfig) -> Result<()> {
    for_each_seed(cfg, |seed, run| {
        let base = checkpoint_path(run, StageArg::Base);
        if !base.exists() {
            bail!("base checkpoint {} not found; run `anyshot train-base` first", base.display());
        }
        let prep = load_prepared(run)?;
        let mut model = AlignmentModel::load(&base)?;
        let report = second_stage(&mut model, &prep, &cfg.train(seed)?)?;
        model.save(&checkpoint_path(run, StageArg::Tuned))?;
        write_train_report(&run.join("tune_report.json"), &report)?;
        Ok(format!(
            "seed {seed}: {} done, {} epochs, final loss {:.6}",
            report.stage,
            report.epoch_losses.len(),
            last_loss(&report)
        ))
    })
}

fn cmd_eval(cfg: &ExperimentConfig, modes: &[EvalMode], stage: StageArg) -> Result<()> {
    let thresholds = cfg.thresholds()?;
    for_each_seed(cfg, |seed, run| {
        let ckpt = checkpoint_path(run, stage);
        if !ckpt.exists() {
            bail!("checkpoint {} not found", ckpt.display());
        }
        let prep = load_prepared(run)?;
        let model = AlignmentModel::load(&ckpt)?;
        let sem = prep.semantics();
        let modes = if modes.is_empty() { supported_modes(sem) } else { modes.to_vec() };
        let dir = run.join("eval");
        fs::create_dir_all(&dir)?;
        let mut summary = format!("{SUMMARY_HEADER}\n");
        let mut lines = vec![format!("seed {seed} ({}):", stage.name())];
        for mode in modes {
            mode.check(sem)?;
            let subset = mode.scored_classes(sem);
            let dets = detect_scenes(&model, &prep.bundle.d_ts, sem, &subset, &thresholds)?;
            let report = report_from_detections(&dets, &prep.bundle.d_ts, sem, mode, &thresholds)?;
            let stem = format!("{}-{mode}", stage.name());
            let mut json = BufWriter::new(fs::File::create(dir.join(format!("{stem}.json")))?);
            write_report_json(&mut json, &report)?;
            json.write_all(b"\n")?;
            json.flush()?;
            let row = summary_row(&report);
            fs::write(dir.join(format!("{stem}.csv")), format!("{SUMMARY_HEADER}\n{row}\n"))?;
            let rows: Vec<_> = dets.into_iter().enumerate().collect();
            let mut out = BufWriter::new(fs::File::create(dir.join(format!("{stem}-detections.csv")))?);
            write_detections_csv(&mut out, &rows, sem.class_names())?;
            out.flush()?;
            summary.push_str(&row);
            summary.push('\n');
            lines.push(format!("  {row}"));
        }
        fs::write(dir.join(format!("{}-summary.csv", stage.name())), summary)?;
        Ok(lines.join("\n"))
    })
}

fn cmd_grad_check(cfg: &ExperimentConfig, corrupt: Option<f64>) -> Result<()> {
    let grid = GradCheckGrid::default();
    let scale = corrupt.map(|f| move |g: f64| g * (1.0 + f));
    let hook = scale.as_ref().map(|f| f as &dyn Fn(f64) -> f64);
    let rows = grad_check(&grid, &cfg.loss()?, hook)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut out = BufWriter::new(fs::File::create(cfg.out_dir.join("gradcheck.csv"))?);
    writeln!(out, "p,p_star,beta,gamma,alpha,positive,analytic,numeric,closed_form,rel_error,passed")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.p, r.p_star, r.beta, r.gamma, r.alpha, r.positive, r.analytic, r.numeric, r.closed_form, r.rel_error, r.passed
        )?;
    }
    out.flush()?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    println!(
        "{} points, {failed} failed, max relative error {worst:.3e} (tolerance {:e})",
        rows.len(),
        grid.tolerance
    );
    if failed > 0 {
        bail!("gradient check failed at {failed} points");
    }
    Ok(())
}

fn cmd_loss_curve(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.out_dir.join("curves");
    fs::create_dir_all(&dir)?;
    let refs = [
        ("pstar-1", CurveReference::Fixed(1.0)),
        ("pstar-0.5", CurveReference::Fixed(0.5)),
        ("pstar-dynamic", CurveReference::Dynamic { competitor: 0.5 }),
    ];
    let base = cfg.loss()?;
    let mut written = 0;
    for &beta in &cfg.curve_betas {
        let loss = LossConfig {
            alpha: cfg.curve_alpha,
            gamma: cfg.curve_gamma,
            beta,
            ..base
        };
        loss.validate()?;
        for (tag, reference) in refs {
            let curve = loss_curve(&loss, reference, cfg.curve_samples)?;
            let mut out = BufWriter::new(fs::File::create(dir.join(format!("beta-{beta}_{tag}.csv")))?);
            write_curve_csv(&mut out, &curve)?;
            out.flush()?;
            written += 1;
        }
    }
    println!("wrote {written} curves to {}", dir.display());
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let settings = cfg.settings()?;
    let cells = run_sweep(&settings, &cfg.seeds, &cfg.sweep_betas, &cfg.sweep_lambdas)?;
    let table = sweep_table(&cells, &cfg.sweep_betas, &cfg.sweep_lambdas);
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("sweep.csv"), &table)?;
    fs::write(cfg.out_dir.join("sweep.json"), serde_json::to_string_pretty(&cells)? + "\n")?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::TrainBase => cmd_train_base(&cfg),
        Command::FineTune => cmd_fine_tune(&cfg),
        Command::Eval { modes, stage } => cmd_eval(&cfg, &modes, stage),
        Command::GradCheck { corrupt } => cmd_grad_check(&cfg, corrupt),
        Command::LossCurve => cmd_loss_curve(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
