use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowtrack::config::RunConfig;
use flowtrack::eval::{
    cv_all, format_report, read_track_result, score_by_class, track_all, write_track_result, TrackResult,
};
use flowtrack::model::FlowTrackNet;
use flowtrack::par::Execution;
use flowtrack::seqio::{load_dataset, load_sequence, save_dataset};
use flowtrack::synth::{generate_dataset, Sequence};
use flowtrack::training::{checkpoint, train as train_model};

#[derive(Parser)]
#[command(name = "flowtrack", version, about = "Point-level flow tracker for synthetic LiDAR scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the selected stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `model.ftk` plus `train_log.csv`.
    Train {
        /// Dataset directory written by `generate`.
        data: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Largest number of history frames sampled during training.
        #[arg(long)]
        history: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every sequence and write one result CSV per sequence.
    Track {
        /// Dataset directory or a single sequence directory.
        data: PathBuf,
        /// Trained checkpoint. Required unless `--cv` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the constant-velocity baseline instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        cv: bool,
        #[command(flatten)]
        common: Common,
        /// History frames fed to the model.
        #[arg(long)]
        history: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score result CSVs and print Success and Precision per class.
    Eval {
        /// Result files or directories of them.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Also write the report to `<out>/report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in gradient, geometry and metric checks.
    Selftest,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn execution(cfg: &RunConfig) -> Execution {
    if cfg.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

fn load_sequences(path: &Path) -> Result<Vec<Sequence>> {
    let seqs = if path.join("meta.json").is_file() {
        vec![load_sequence(path)?]
    } else {
        load_dataset(path)?
    };
    Ok(seqs)
}

fn generate(common: &Common, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let d = &cfg.data;
    let seqs = generate_dataset(&d.classes, d.sequences, d.frames, d.seed, execution(&cfg))?;
    save_dataset(&seqs, out)?;
    log::info!("wrote {} sequences of {} frames to {}", seqs.len(), d.frames, out.display());
    Ok(())
}

fn train(data: &Path, common: &Common, history: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = history {
        cfg.train.history = n;
    }
    cfg.train.validate()?;
    let seqs = load_sequences(data)?;
    fs::create_dir_all(out)?;
    let mut log_file = std::io::BufWriter::new(fs::File::create(out.join("train_log.csv"))?);
    let start = Instant::now();
    let (net, rows) = train_model(&cfg.train, &seqs, execution(&cfg), Some(&mut log_file))?;
    std::io::Write::flush(&mut log_file)?;
    checkpoint::save(&net.store, &out.join("model.ftk"))?;
    log::info!(
        "trained {} steps in {:.1}s, final loss {:.4}",
        rows.len(),
        start.elapsed().as_secs_f64(),
        rows.last().map_or(f64::NAN, |r| r.loss.total)
    );
    Ok(())
}

fn track(
    data: &Path,
    checkpoint_path: Option<&Path>,
    cv: bool,
    common: &Common,
    history: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let seqs = load_sequences(data)?;
    let exec = execution(&cfg);
    let (name, results) = if cv {
        ("cv", cv_all(&seqs, exec)?)
    } else {
        let Some(path) = checkpoint_path else {
            bail!("either --checkpoint or --cv is required");
        };
        let mut net = FlowTrackNet::new(cfg.train.model.clone())?;
        checkpoint::load_into(&mut net.store, path)
            .with_context(|| "checkpoint does not match the configured model; pass the training --config")?;
        let n = history.unwrap_or(cfg.track_history);
        ("model", track_all(&net, &seqs, n, exec)?)
    };
    fs::create_dir_all(out)?;
    for r in &results {
        write_track_result(r, &out.join(format!("{}.csv", r.sequence)))?;
    }
    print!("{}", format_report(name, &score_by_class(&results)));
    Ok(())
}

fn collect_results(paths: &[PathBuf]) -> Result<Vec<TrackResult>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no result files found");
    }
    files.iter().map(|f| Ok(read_track_result(f)?)).collect()
}

fn eval(results: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let rs = collect_results(results)?;
    let report = format_report("results", &score_by_class(&rs));
    print!("{report}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), &report)?;
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let checks = flowtrack::selftest::run_all()?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {:<48} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { common, out } => generate(&common, &out),
        Command::Train { data, common, history, out } => train(&data, &common, history, &out),
        Command::Track { data, checkpoint, cv, common, history, out } => {
            track(&data, checkpoint.as_deref(), cv, &common, history, &out)
        }
        Command::Eval { results, out } => eval(&results, out.as_deref()),
        Command::Selftest => selftest(),
    }
}
