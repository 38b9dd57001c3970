use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsdet_core::dump;
use fsdet_core::harness::ablation::{format_table, run_ablation, write_rows_jsonl};
use fsdet_core::harness::fixtures::write_fixtures;
use fsdet_core::harness::gradsuite::run_grad_suite;
use fsdet_core::harness::reparam::verify_reparam;
use fsdet_core::harness::train::{
    eval_scenes, predict_all, scene_ap, train_toy, training_scenes, write_curve_csv,
};
use fsdet_core::harness::{evaluate_ap, read_boxsets_csv, write_boxsets_csv, BoxSet, RunConfig};
use fsdet_core::Result;

#[derive(Parser)]
#[command(
    name = "fsdet",
    version,
    about = "Gradient checks, toy training and ablations for the fsdet detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes the line-delimited report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains on synthetic scenes and writes curve, predictions and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Runs the six toggle combinations over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Also writes one JSON record per row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average precision of predictions against ground truth (CSV files).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Merged versus multi-branch outputs on random re-parameterizable blocks.
    ReparamVerify {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes the golden cross-domain block tensors.
    DumpFixtures { dir: PathBuf },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_csv(path: &Path) -> Result<Vec<BoxSet>> {
    read_boxsets_csv(BufReader::new(File::open(path)?))
}

fn gradcheck(config: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<bool> {
    let cfg = load_config(config)?;
    let report = run_grad_suite(&cfg)?;
    let mut w = writer(out)?;
    report.write_jsonl(&mut w)?;
    w.flush()?;
    for (op, err) in report.worst_by_op() {
        let verdict = if err < cfg.grad_tol { "ok" } else { "FAIL" };
        eprintln!("{op:<22} max rel err {err:.3e}  {verdict}");
    }
    for (eps, g) in report.sweep_geomean() {
        eprintln!("eps {eps:e}: geometric-mean error {g:.3e}");
    }
    Ok(report.passed())
}

fn train(config: &Option<PathBuf>, out: &Path) -> Result<bool> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out.join("checkpoint"))?;
    fs::create_dir_all(out.join("scenes"))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;

    let outcome = train_toy(&cfg)?;
    write_curve_csv(
        BufWriter::new(File::create(out.join("curve.csv"))?),
        &outcome.curve,
    )?;
    for e in outcome.store.entries() {
        dump::save(
            out.join("checkpoint").join(format!("{}.fsd", e.name)),
            &e.value,
        )?;
    }

    let scenes = training_scenes(&cfg)?;
    for (i, s) in scenes.iter().enumerate() {
        dump::save(out.join("scenes").join(format!("scene{i}.fsd")), &s.image)?;
    }
    let preds = predict_all(&outcome.pipeline, &outcome.store, &scenes)?;
    let gts: Vec<BoxSet> = scenes.iter().map(|s| s.gt.clone()).collect();
    write_boxsets_csv(
        BufWriter::new(File::create(out.join("predictions.csv"))?),
        &preds,
    )?;
    write_boxsets_csv(BufWriter::new(File::create(out.join("gt.csv"))?), &gts)?;

    let w = cfg.smooth_window;
    let (first, last) = (outcome.initial_smoothed(w), outcome.final_smoothed(w));
    println!(
        "steps {}  params {}",
        outcome.curve.len(),
        outcome.param_count
    );
    println!(
        "smoothed loss {first:.4} -> {last:.4} (ratio {:.3})",
        last / first
    );
    println!(
        "train AP {:.4}  held-out AP {:.4}",
        scene_ap(&outcome, &scenes)?,
        scene_ap(&outcome, &eval_scenes(&cfg)?)?
    );
    println!("outputs in {}", out.display());
    Ok(true)
}

fn ablate(config: &Option<PathBuf>, seeds: usize, out: &Option<PathBuf>) -> Result<bool> {
    let cfg = load_config(config)?;
    let rows = run_ablation(&cfg, seeds)?;
    print!("{}", format_table(&rows));
    if let Some(p) = out {
        write_rows_jsonl(BufWriter::new(File::create(p)?), &rows)?;
    }
    Ok(true)
}

fn eval(pred: &Path, gt: &Path, iou: f64) -> Result<bool> {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(fsdet_core::Error::InvalidArgument(format!(
            "IoU threshold must be in (0, 1], got {iou}"
        )));
    }
    let (p, g) = (read_csv(pred)?, read_csv(gt)?);
    println!("AP@{iou} = {:.6}", evaluate_ap(&p, &g, iou));
    Ok(true)
}

fn reparam_verify(trials: usize, seed: u64) -> Result<bool> {
    let records = verify_reparam(trials, seed)?;
    let worst = records.iter().fold(0.0f64, |m, r| m.max(r.max_abs_diff));
    let failed = records.iter().filter(|r| !r.passed).count();
    println!("{trials} trials, worst max-norm gap {worst:.3e}, {failed} failed");
    Ok(failed == 0)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Gradcheck { config, out } => gradcheck(config, out),
        Command::Train { config, out } => train(config, out),
        Command::Ablate { config, seeds, out } => ablate(config, *seeds, out),
        Command::Eval { pred, gt, iou } => eval(pred, gt, *iou),
        Command::ReparamVerify { trials, seed } => reparam_verify(*trials, *seed),
        Command::DumpFixtures { dir } => {
            let paths = write_fixtures(dir)?;
            println!("wrote {} files to {}", paths.len(), dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
