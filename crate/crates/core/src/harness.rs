//! Experiment orchestration: the training loop, learning-rate schedule,
//! freezing, early stopping, metric wiring and result persistence.

use crate::baselines::{DenseOptState, MagnitudePruneState};
use crate::checkpoint::Checkpoint;
use crate::config::{OptimizerChoice, RunConfig};
use crate::data::{BatchPlan, Dataset};
use crate::dropback::{StepStats, TrackedSet};
use crate::error::{Error, Result};
use crate::init::Seed;
use crate::metrics::{self, AccessCounts, AccessLedger, CsvWriter, DiffusionSample};
use crate::nn::{self, NetworkSpec, ParamView};
use crate::optim::Optimizer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// `lr0` times every multiplier whose epoch is `<= epoch`.
pub fn lr_at(schedule: &[(usize, f64)], lr0: f64, epoch: usize) -> f64 {
    schedule
        .iter()
        .filter(|(e, _)| *e <= epoch)
        .fold(lr0, |lr, (_, m)| lr * m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based: the state after this many passes over the training set.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub validation_error: f64,
    pub tracked: usize,
    pub frozen: bool,
    pub admitted: u64,
    pub evicted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config: RunConfig,
    pub optimizer: String,
    pub network_digest: String,
    pub total_params: usize,
    /// Weight budget: `k` for Dropback, the keep count for magnitude pruning, `|W|` for SGD.
    pub stored_weights: usize,
    pub initial_validation_error: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch was trained.
    pub best_epoch: usize,
    pub best_validation_error: f64,
    pub freeze_epoch: Option<usize>,
    pub final_tracked: usize,
    pub stopped_early: bool,
    /// Set when training was aborted; the record then holds the partial history.
    pub diverged: Option<Divergence>,
    pub steps: u64,
    /// Stored weights per tensor at the best epoch.
    pub layer_retention: Vec<usize>,
    pub access: AccessCounts,
    pub energy_pj: f64,
    /// Metric name to file path, relative to the output directory.
    pub metric_files: BTreeMap<String, String>,
    pub checkpoint: Option<String>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// `total_params / stored_weights`; 1 for dense runs.
    pub fn weight_reduction(&self) -> f64 {
        self.total_params as f64 / self.stored_weights as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Copy with wall-clock fields cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// 1-based epoch in which training stopped.
    pub epoch: usize,
    pub step: u64,
    /// Mini-batch loss at the abort (non-finite for gradient failures).
    pub loss: f64,
    pub message: String,
}

impl Divergence {
    pub fn to_error(&self) -> Error {
        Error::Divergence {
            epoch: self.epoch,
            step: self.step,
            loss: self.loss,
        }
    }
}

/// Everything a run produced, including in-memory series.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub step_stats: Vec<StepStats>,
    pub diffusion: Vec<DiffusionSample>,
    /// Optimizer state at the best epoch (the untrained state if no epoch ran).
    pub best_state: Optimizer,
    pub final_state: Optimizer,
}

fn shuffle_seed(seed: Seed) -> Seed {
    Seed(seed.0.rotate_left(16) ^ 0x85EB_CA6B)
}

pub fn build_optimizer(choice: OptimizerChoice, seed: Seed, spec: &NetworkSpec) -> Result<Optimizer> {
    Ok(match choice {
        OptimizerChoice::Sgd => Optimizer::Sgd(DenseOptState::new(seed, &spec.layout)),
        OptimizerChoice::Dropback { k } => {
            Optimizer::Dropback(TrackedSet::new(k, seed, spec.layout.clone())?)
        }
        OptimizerChoice::Magnitude { keep } => {
            Optimizer::Magnitude(MagnitudePruneState::new(seed, &spec.layout, keep)?)
        }
    })
}

fn layer_macs(spec: &NetworkSpec) -> (u64, u64) {
    let all: u64 = spec.layers.iter().map(|l| (l.in_dim * l.out_dim) as u64).sum();
    let first = (spec.layers[0].in_dim * spec.layers[0].out_dim) as u64;
    (all, all - first)
}

/// Counts weight traffic and arithmetic for one training step.
///
/// Forward: a tracked (or dense) weight is one DRAM read, an untracked weight
/// one regeneration. Optimizer: one read and one write per stored weight.
/// Flops: 2 per MAC forward, 2 per MAC for input gradients past layer 1, and
/// 2 per batch row for every weight gradient that is needed (all of them
/// unless frozen, then only the tracked ones).
fn account_step(
    ledger: &AccessLedger,
    spec: &NetworkSpec,
    opt_before: (usize, bool),
    opt_after: usize,
    dense: bool,
    rows: usize,
) {
    let total = spec.num_params() as u64;
    let (tracked, frozen) = (opt_before.0 as u64, opt_before.1);
    let rows = rows as u64;
    let (macs, macs_past_first) = layer_macs(spec);
    if dense {
        ledger.add_reads(2 * total);
        ledger.add_writes(total);
    } else {
        ledger.add_reads(2 * tracked);
        ledger.add_regens(total - tracked);
        ledger.add_writes(opt_after as u64);
    }
    let weight_grads = if frozen { tracked } else { total };
    ledger.add_flops(2 * rows * macs + 2 * rows * macs_past_first + 2 * rows * weight_grads);
}

struct Outputs {
    dir: PathBuf,
    steps: Option<CsvWriter>,
    diffusion: CsvWriter,
    snapshots: Option<std::io::BufWriter<std::fs::File>>,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        let steps = if cfg.log_steps {
            files.insert("steps".into(), "steps.csv".into());
            Some(CsvWriter::create(
                &dir.join("steps.csv"),
                &["step", "epoch", "loss", "admitted", "evicted", "lambda", "tracked"],
            )?)
        } else {
            None
        };
        files.insert("diffusion".into(), "diffusion.csv".into());
        let diffusion = CsvWriter::create(&dir.join("diffusion.csv"), &["step", "l2_from_init"])?;
        let snapshots = if cfg.snapshot_every > 0 {
            files.insert("snapshots".into(), "snapshots.bin".into());
            let p = dir.join("snapshots.bin");
            Some(std::io::BufWriter::new(
                std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?,
            ))
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            steps,
            diffusion,
            snapshots,
            files,
        })
    }
}

/// Appends one snapshot record: `u64 step` then `|W|` f32 values, little-endian.
fn write_snapshot(out: &mut impl Write, step: u64, view: &impl ParamView<f32>, spec: &NetworkSpec) -> std::io::Result<()> {
    out.write_all(&step.to_le_bytes())?;
    for t in 0..spec.layout.num_tensors() {
        for w in view.tensor(t).iter() {
            out.write_all(&w.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a snapshot file written during training.
pub fn read_snapshots(path: &Path, num_params: usize) -> Result<Vec<metrics::TrajectorySnapshot>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = 8 + 4 * num_params;
    if bytes.len() % rec != 0 {
        return Err(Error::Config(format!(
            "{}: size is not a multiple of the {rec}-byte snapshot record",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|c| metrics::TrajectorySnapshot {
            step: u64::from_le_bytes(c[..8].try_into().expect("8")),
            weights: c[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
                .collect(),
        })
        .collect())
}

/// Trains per `cfg`, persisting results when `cfg.output_dir` is set.
pub fn train_run(cfg: &RunConfig) -> Result<RunRecord> {
    train_run_detailed(cfg).map(|o| o.record)
}

pub fn train_run_detailed(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, val) = cfg.load_datasets()?;
    train_run_on(cfg, &train, &val)
}

/// Like [`train_run_detailed`] with the datasets supplied by the caller.
pub fn train_run_on(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<RunOutcome> {
    let started = Instant::now();
    let spec = cfg.network_spec()?;
    spec.check()?;
    for ds in [train, val] {
        if ds.dims != spec.input_dim() {
            return Err(Error::Dimension {
                expected: spec.input_dim(),
                actual: ds.dims,
            });
        }
    }
    let seed = cfg.seed();
    let choice = cfg.optimizer_choice(spec.num_params())?;
    let mut opt = build_optimizer(choice, seed, &spec)?;
    let dense = !matches!(opt, Optimizer::Dropback(_));
    let freeze_at = cfg.effective_freeze_epoch();
    let momentum = cfg.momentum as f32;
    let ledger = AccessLedger::new();

    let mut outputs = match cfg.output_path() {
        Some(dir) => Some(Outputs::create(&dir, cfg)?),
        None => None,
    };

    let initial_validation_error = nn::evaluate(&spec, &opt, val)?;
    let mut best_state = opt.clone();
    let mut best_epoch = 0;
    let mut best_error = initial_validation_error;
    let mut epochs = Vec::new();
    let mut step_stats = Vec::new();
    let mut diffusion = vec![DiffusionSample {
        step: 0,
        l2_from_init: 0.0,
    }];
    let mut step: u64 = 0;
    let mut first_loss: Option<f64> = None;
    let mut diverged = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    if let Some(out) = outputs.as_mut() {
        out.diffusion.row(&["0", "0"])?;
        if let Some(snap) = out.snapshots.as_mut() {
            write_snapshot(snap, 0, &opt, &spec).map_err(|e| Error::io(&out.dir, e))?;
        }
    }

    'epochs: for epoch in 0..cfg.epochs {
        if freeze_at == Some(epoch) {
            opt.freeze();
        }
        let lr_f64 = lr_at(&cfg.lr_schedule, cfg.lr0, epoch);
        let lr = lr_f64 as f32;
        let plan = BatchPlan::new(train.len(), cfg.batch_size.min(train.len()), shuffle_seed(seed), epoch);
        let mut loss_sum = 0.0f64;
        let (mut admitted, mut evicted) = (0u64, 0u64);

        for rows in plan.index_batches() {
            let (x, y) = train.gather(rows);
            let (logits, cache) = nn::forward(&spec, &opt, &x)?;
            let (loss, dlogits) = nn::loss_softmax_ce(&logits, &y);
            let loss = loss as f64;
            let reference = *first_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > cfg.divergence_factor * reference {
                let message = Error::Divergence {
                    epoch: epoch + 1,
                    step,
                    loss,
                }
                .to_string();
                diverged = Some(Divergence {
                    epoch: epoch + 1,
                    step,
                    loss,
                    message,
                });
                break 'epochs;
            }
            let grads = nn::backward(&spec, &cache, &dlogits);
            drop(cache);

            let before = (opt.tracked_count(), opt.is_frozen());
            let stats = match opt.step(&grads, lr, momentum) {
                Ok(s) => s,
                Err(e @ Error::NonFiniteGradient { .. }) => {
                    diverged = Some(Divergence {
                        epoch: epoch + 1,
                        step,
                        loss,
                        message: e.to_string(),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            step += 1;
            account_step(&ledger, &spec, before, opt.tracked_count(), dense, rows.len());
            loss_sum += loss * rows.len() as f64;

            if let Some(s) = stats {
                admitted += s.admitted as u64;
                evicted += s.evicted as u64;
                step_stats.push(s);
            }
            if let Some(out) = outputs.as_mut() {
                if let Some(w) = out.steps.as_mut() {
                    let (a, e, lam, tr) = stats.map_or((0, 0, 0.0, opt.tracked_count()), |s| {
                        (s.admitted, s.evicted, s.lambda, s.tracked)
                    });
                    w.row(&[
                        step.to_string(),
                        (epoch + 1).to_string(),
                        loss.to_string(),
                        a.to_string(),
                        e.to_string(),
                        lam.to_string(),
                        tr.to_string(),
                    ])?;
                }
            }
            if cfg.diffusion_every > 0 && step.is_multiple_of(cfg.diffusion_every) {
                let sample = DiffusionSample {
                    step,
                    l2_from_init: opt.diffusion(&spec, seed),
                };
                diffusion.push(sample);
                if let Some(out) = outputs.as_mut() {
                    out.diffusion
                        .row(&[step.to_string(), sample.l2_from_init.to_string()])?;
                }
            }
            if cfg.snapshot_every > 0 && step.is_multiple_of(cfg.snapshot_every) {
                if let Some(out) = outputs.as_mut() {
                    if let Some(snap) = out.snapshots.as_mut() {
                        write_snapshot(snap, step, &opt, &spec).map_err(|e| Error::io(&out.dir, e))?;
                    }
                }
            }
        }

        let validation_error = nn::evaluate(&spec, &opt, val)?;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr: lr_f64,
            train_loss: loss_sum / train.len() as f64,
            validation_error,
            tracked: opt.tracked_count(),
            frozen: opt.is_frozen(),
            admitted,
            evicted,
        });
        if best_epoch == 0 || validation_error < best_error {
            best_epoch = epoch + 1;
            best_error = validation_error;
            best_state = opt.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }

    let access = ledger.counts();
    let mut record = RunRecord {
        name: cfg.name.clone(),
        config: cfg.clone(),
        optimizer: opt.kind().to_string(),
        network_digest: spec.digest(),
        total_params: spec.num_params(),
        stored_weights: opt.stored_weights(),
        initial_validation_error,
        epochs,
        best_epoch,
        best_validation_error: best_error,
        freeze_epoch: freeze_at,
        final_tracked: opt.tracked_count(),
        stopped_early,
        diverged,
        steps: step,
        layer_retention: best_state.layer_retention(),
        access,
        energy_pj: cfg.energy_model().estimate(&access),
        metric_files: BTreeMap::new(),
        checkpoint: None,
        wall_time_secs: 0.0,
    };

    if let Some(out) = outputs {
        let Outputs {
            dir,
            steps,
            diffusion: diff_writer,
            snapshots,
            mut files,
        } = out;
        if let Some(w) = steps {
            w.finish()?;
        }
        diff_writer.finish()?;
        if let Some(mut s) = snapshots {
            s.flush().map_err(|e| Error::io(&dir, e))?;
        }

        let mut ew = CsvWriter::create(
            &dir.join("epochs.csv"),
            &["epoch", "lr", "train_loss", "validation_error", "tracked", "frozen", "admitted", "evicted"],
        )?;
        for e in &record.epochs {
            ew.row(&[
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.validation_error.to_string(),
                e.tracked.to_string(),
                (e.frozen as u8).to_string(),
                e.admitted.to_string(),
                e.evicted.to_string(),
            ])?;
        }
        ew.finish()?;
        files.insert("epochs".into(), "epochs.csv".into());

        let deltas = best_state.accumulated_deltas(&spec, seed);
        let reach = deltas.iter().fold(0.0f64, |m, d| m.max(d.abs() as f64));
        let reach = if reach > 0.0 { reach } else { 1.0 };
        let edges = metrics::linear_edges(-reach, reach, cfg.histogram_bins);
        let counts = metrics::gradient_histogram(&deltas, &edges)?;
        let mut hw = CsvWriter::create(&dir.join("histogram.csv"), &["bin_lo", "bin_hi", "count"])?;
        for (i, c) in counts.iter().enumerate() {
            hw.row(&[edges[i].to_string(), edges[i + 1].to_string(), c.to_string()])?;
        }
        hw.finish()?;
        files.insert("histogram".into(), "histogram.csv".into());

        let mut rw = CsvWriter::create(&dir.join("retention.csv"), &["tensor", "name", "stored", "share"])?;
        let total_stored: usize = record.layer_retention.iter().sum();
        for (t, &n) in record.layer_retention.iter().enumerate() {
            let share = if total_stored > 0 { n as f64 / total_stored as f64 } else { 0.0 };
            rw.row(&[t.to_string(), spec.tensor_name(t), n.to_string(), share.to_string()])?;
        }
        rw.finish()?;
        files.insert("retention".into(), "retention.csv".into());

        let mut aw = CsvWriter::create(
            &dir.join("access.csv"),
            &["dram_weight_reads", "dram_weight_writes", "regen_events", "flop_count", "energy_pj"],
        )?;
        aw.row(&[
            access.dram_weight_reads.to_string(),
            access.dram_weight_writes.to_string(),
            access.regen_events.to_string(),
            access.flop_count.to_string(),
            record.energy_pj.to_string(),
        ])?;
        aw.finish()?;
        files.insert("access".into(), "access.csv".into());

        let ck = Checkpoint::new(&spec, seed, &best_state, best_epoch, Some(best_error));
        ck.save(&dir.join("best.ckpt"))?;
        record.checkpoint = Some("best.ckpt".into());
        record.metric_files = files;
        record.wall_time_secs = started.elapsed().as_secs_f64();
        record.save(&dir.join("record.json"))?;
    } else {
        record.wall_time_secs = started.elapsed().as_secs_f64();
    }

    Ok(RunOutcome {
        record,
        step_stats,
        diffusion,
        best_state,
        final_state: opt,
    })
}

/// One row of a run comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub optimizer: String,
    pub total_params: usize,
    pub stored_weights: usize,
    pub validation_error: f64,
    pub weight_reduction: f64,
    pub best_epoch: usize,
    pub freeze_epoch: Option<usize>,
}

/// Rows sorted by descending stored-weight count (stable for ties).
pub fn compare_runs(records: &[RunRecord]) -> Result<Vec<ComparisonRow>> {
    if records.is_empty() {
        return Err(Error::Config("compare needs at least one record".into()));
    }
    let mut rows: Vec<ComparisonRow> = records
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            optimizer: r.optimizer.clone(),
            total_params: r.total_params,
            stored_weights: r.stored_weights,
            validation_error: r.best_validation_error,
            weight_reduction: r.weight_reduction(),
            best_epoch: r.best_epoch,
            freeze_epoch: r.freeze_epoch,
        })
        .collect();
    rows.sort_by_key(|r| std::cmp::Reverse(r.stored_weights));
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(
        "name,optimizer,total_params,stored_weights,validation_error,weight_reduction,best_epoch,freeze_epoch\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.name,
            r.optimizer,
            r.total_params,
            r.stored_weights,
            r.validation_error,
            r.weight_reduction,
            r.best_epoch,
            r.freeze_epoch.map_or(String::new(), |f| f.to_string())
        ));
    }
    s
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<28} {:>10} {:>10} {:>10} {:>10} {:>6}\n",
        "run", "stored", "val err", "reduction", "best ep", "freeze"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>10} {:>9.2}% {:>9.2}x {:>10} {:>6}\n",
            r.name,
            r.stored_weights,
            100.0 * r.validation_error,
            r.weight_reduction,
            r.best_epoch,
            r.freeze_epoch.map_or("N/A".to_string(), |f| f.to_string())
        ));
    }
    s.push_str("reduction = total parameters / stored weights (dense runs are 1x)\n");
    s
}
