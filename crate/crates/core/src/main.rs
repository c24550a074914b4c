use clap::{Parser, Subcommand, ValueEnum};
use dropback::checkpoint::Checkpoint;
use dropback::data::{self, Dataset};
use dropback::harness::{self, RunRecord};
use dropback::metrics;
use dropback::{nn, Error, Result, RunConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dropback", version, about = "Weight-budgeted training with seed-regenerated weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its record, metrics and best checkpoint.
    Train {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Classification error of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// MNIST directory, or a run config whose validation set is used.
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Tabulate several run records.
    Compare {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Fit a joint PCA over the runs' weight snapshots and write it here.
        #[arg(long)]
        pca: Option<PathBuf>,
    },
    /// Per-tensor retention of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Validation,
    Test,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output_dir } => train(&config, output_dir),
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => eval(&checkpoint, &dataset, split),
        Command::Compare { records, csv, pca } => compare(&records, csv.as_deref(), pca.as_deref()),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn train(config: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_string_lossy().into_owned();
    }
    let record = harness::train_run(&cfg)?;
    for e in &record.epochs {
        println!(
            "epoch {:>3}  lr {:.4}  loss {:.4}  val err {:.2}%  tracked {}{}",
            e.epoch,
            e.lr,
            e.train_loss,
            100.0 * e.validation_error,
            e.tracked,
            if e.frozen { " (frozen)" } else { "" }
        );
    }
    println!(
        "best epoch {}  val err {:.2}%  stored {} / {}  ({:.2}x)",
        record.best_epoch,
        100.0 * record.best_validation_error,
        record.stored_weights,
        record.total_params,
        record.weight_reduction()
    );
    if let Some(d) = &record.diverged {
        eprintln!("{}", d.message);
        return Err(d.to_error());
    }
    Ok(())
}

fn load_eval_set(dataset: &Path, split: Split) -> Result<Dataset> {
    if dataset.is_dir() {
        return match split {
            Split::Test => data::load_mnist_test(dataset),
            Split::Train => Ok(data::load_mnist_split(dataset)?.0),
            Split::Validation => Ok(data::load_mnist_split(dataset)?.1),
        };
    }
    let cfg = RunConfig::load(dataset)?;
    let (train, val) = cfg.load_datasets()?;
    Ok(match split {
        Split::Train => train,
        Split::Validation | Split::Test => val,
    })
}

fn eval(checkpoint: &Path, dataset: &Path, split: Split) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_eval_set(dataset, split)?;
    let err = nn::evaluate(&ck.header.network, &ck.optimizer, &ds)?;
    println!(
        "{} samples  error {:.4}%  ({} epoch {})",
        ds.len(),
        100.0 * err,
        ck.header.payload,
        ck.header.epoch
    );
    Ok(())
}

fn compare(paths: &[PathBuf], csv: Option<&Path>, pca: Option<&Path>) -> Result<()> {
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rows = harness::compare_runs(&records)?;
    print!("{}", harness::comparison_table(&rows));
    if let Some(path) = csv {
        std::fs::write(path, harness::comparison_csv(&rows)).map_err(|e| Error::io(path, e))?;
    }
    if let Some(out) = pca {
        let mut runs = Vec::new();
        let mut ids = Vec::new();
        for (path, rec) in paths.iter().zip(&records) {
            let Some(file) = rec.metric_files.get("snapshots") else {
                continue;
            };
            let dir = path.parent().unwrap_or(Path::new("."));
            runs.push(harness::read_snapshots(&dir.join(file), rec.total_params)?);
            ids.push(rec.name.clone());
        }
        let proj = metrics::pca_project(&runs)?;
        metrics::write_pca_csv(out, &ids, &proj)?;
        println!("PCA over {} runs written to {}", ids.len(), out.display());
    }
    Ok(())
}

fn inspect(checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let h = &ck.header;
    let spec = &h.network;
    println!(
        "{}  seed {}  k {}  frozen {}  steps {}  epoch {}",
        h.payload, h.seed.0, h.k, h.frozen, h.steps, h.epoch
    );
    let retained = ck.optimizer.layer_retention();
    let total: usize = retained.iter().sum();
    println!("{:<12} {:>10} {:>10} {:>9} {:>9}", "tensor", "size", "stored", "of tensor", "of set");
    for (t, &n) in retained.iter().enumerate() {
        let size = spec.layout.tensor(t).len;
        println!(
            "{:<12} {:>10} {:>10} {:>8.2}% {:>8.2}%",
            spec.tensor_name(t),
            size,
            n,
            100.0 * n as f64 / size as f64,
            if total > 0 { 100.0 * n as f64 / total as f64 } else { 0.0 }
        );
    }
    Ok(())
}
