//! Analysis instrumentation: accumulated-gradient histograms, diffusion
//! distance, joint PCA of weight trajectories, and the memory-access energy
//! estimator.

use crate::error::{Error, Result};
use crate::init::{self, ParamLayout, Seed};
use crate::nn::ParamView;
use serde::{Deserialize, Serialize};
use std::ops::Add;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts of `values` per bin. Bin `i` is `[edges[i], edges[i+1])`, the last
/// bin is closed; values outside the edges fall into the first or last bin so
/// the counts always sum to `values.len()`.
pub fn gradient_histogram(values: &[f32], edges: &[f64]) -> Result<Vec<u64>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(
            "histogram needs at least two strictly increasing edges".into(),
        ));
    }
    let bins = edges.len() - 1;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let v = v as f64;
        // number of edges <= v, minus one, clamped into range
        let idx = edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(counts)
}

/// `n + 1` evenly spaced edges over `[lo, hi]`.
pub fn linear_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSample {
    pub step: u64,
    pub l2_from_init: f64,
}

/// `||w - w0||` over every parameter, regenerating `w0` from the seed.
pub fn diffusion_full(view: &impl ParamView<f32>, layout: &ParamLayout, seed: Seed) -> f64 {
    let mut sum = 0.0f64;
    for t in 0..layout.num_tensors() {
        let current = view.tensor(t);
        let initial = init::regen_tensor(seed, layout, t);
        for (&w, &w0) in current.iter().zip(&initial) {
            let d = (w - w0) as f64;
            sum += d * d;
        }
    }
    sum.sqrt()
}

/// Weight vector of one run at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySnapshot {
    pub step: u64,
    pub weights: Vec<f32>,
}

/// A joint 3-component PCA fit.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// Per run, per snapshot: `(step, [c1, c2, c3])`, translated so each run starts at the origin.
    pub trajectories: Vec<Vec<(u64, [f64; 3])>>,
    /// Unit principal directions in parameter space (zero where the data has lower rank).
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component (eigenvalues of the centered Gram matrix).
    pub eigenvalues: [f64; 3],
}

const PCA_COMPONENTS: usize = 3;

/// Fits one PCA over the union of all runs' snapshots using the `T x T` Gram
/// matrix of centered snapshots, so no `|W| x |W|` matrix is ever formed.
pub fn pca_project(runs: &[Vec<TrajectorySnapshot>]) -> Result<PcaProjection> {
    let all: Vec<&TrajectorySnapshot> = runs.iter().flatten().collect();
    let needed = PCA_COMPONENTS + 1;
    if all.len() < needed {
        return Err(Error::TooFewSnapshots {
            needed,
            got: all.len(),
        });
    }
    let dim = all[0].weights.len();
    if all.iter().any(|s| s.weights.len() != dim) {
        return Err(Error::Config("snapshots differ in length".into()));
    }
    let n = all.len();

    let mut mean = vec![0.0f64; dim];
    for s in &all {
        for (m, &w) in mean.iter_mut().zip(&s.weights) {
            *m += w as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = all
        .iter()
        .map(|s| s.weights.iter().zip(&mean).map(|(&w, &m)| w as f64 - m).collect())
        .collect();

    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = d;
            gram[j * n + i] = d;
        }
    }
    let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (values, vectors) = jacobi_eigen(gram, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let tol = scale * 1e-10 * n as f64;
    let mut eigenvalues = [0.0; 3];
    let mut coords = vec![[0.0f64; 3]; n];
    let mut components = Vec::with_capacity(PCA_COMPONENTS);
    for (c, &idx) in order.iter().take(PCA_COMPONENTS).enumerate() {
        let lambda = values[idx];
        let mut u: Vec<f64> = (0..n).map(|r| vectors[r * n + idx]).collect();
        // sign convention: the largest-magnitude entry is positive
        let pivot = u
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        if lambda > tol {
            eigenvalues[c] = lambda;
            let root = lambda.sqrt();
            for r in 0..n {
                coords[r][c] = root * u[r];
            }
            let mut v = vec![0.0f64; dim];
            for (r, row) in centered.iter().enumerate() {
                let a = u[r] / root;
                for (vi, &x) in v.iter_mut().zip(row) {
                    *vi += a * x;
                }
            }
            components.push(v);
        } else {
            components.push(vec![0.0; dim]);
        }
    }

    let mut trajectories = Vec::with_capacity(runs.len());
    let mut r = 0;
    for run in runs {
        let origin = run.first().map(|_| coords[r]);
        let mut traj = Vec::with_capacity(run.len());
        for s in run {
            let o = origin.expect("non-empty run");
            let c = coords[r];
            traj.push((s.step, [c[0] - o[0], c[1] - o[1], c[2] - o[2]]));
            r += 1;
        }
        trajectories.push(traj);
    }

    Ok(PcaProjection {
        trajectories,
        components,
        eigenvalues,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` row-major matrix.
/// Returns eigenvalues and the eigenvector matrix (eigenvectors in columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off <= total * 1e-30 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Plain counter values of an [`AccessLedger`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounts {
    pub dram_weight_reads: u64,
    pub dram_weight_writes: u64,
    pub regen_events: u64,
    pub flop_count: u64,
}

impl Add for AccessCounts {
    type Output = AccessCounts;
    fn add(self, o: AccessCounts) -> AccessCounts {
        AccessCounts {
            dram_weight_reads: self.dram_weight_reads + o.dram_weight_reads,
            dram_weight_writes: self.dram_weight_writes + o.dram_weight_writes,
            regen_events: self.regen_events + o.regen_events,
            flop_count: self.flop_count + o.flop_count,
        }
    }
}

/// Monotone access counters; safe to bump from several threads.
#[derive(Debug, Default)]
pub struct AccessLedger {
    dram_weight_reads: AtomicU64,
    dram_weight_writes: AtomicU64,
    regen_events: AtomicU64,
    flop_count: AtomicU64,
}

impl AccessLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_reads(&self, n: u64) {
        self.dram_weight_reads.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_writes(&self, n: u64) {
        self.dram_weight_writes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_regens(&self, n: u64) {
        self.regen_events.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_flops(&self, n: u64) {
        self.flop_count.fetch_add(n, Ordering::Relaxed);
    }

    pub fn counts(&self) -> AccessCounts {
        AccessCounts {
            dram_weight_reads: self.dram_weight_reads.load(Ordering::Relaxed),
            dram_weight_writes: self.dram_weight_writes.load(Ordering::Relaxed),
            regen_events: self.regen_events.load(Ordering::Relaxed),
            flop_count: self.flop_count.load(Ordering::Relaxed),
        }
    }
}

/// Per-event energy in picojoules (45 nm figures by default).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub dram_access_pj: f64,
    pub flop_pj: f64,
    pub regen_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            dram_access_pj: 640.0,
            flop_pj: 0.9,
            regen_pj: 1.5,
        }
    }
}

impl EnergyModel {
    pub fn estimate(&self, c: &AccessCounts) -> f64 {
        self.dram_access_pj * (c.dram_weight_reads + c.dram_weight_writes) as f64
            + self.flop_pj * c.flop_count as f64
            + self.regen_pj * c.regen_events as f64
    }

    /// How many regenerations cost as much as one DRAM access.
    pub fn regen_advantage(&self) -> f64 {
        self.dram_access_pj / self.regen_pj
    }
}

/// Energy of `counts` under the default constants, in pJ.
pub fn energy_estimate(counts: &AccessCounts) -> f64 {
    EnergyModel::default().estimate(counts)
}

/// CSV output: header row first, then one row per call.
pub struct CsvWriter {
    out: csv::Writer<std::fs::File>,
    path: std::path::PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut w = Self {
            out,
            path: path.to_path_buf(),
        };
        w.row(header)?;
        Ok(w)
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        self.out
            .write_record(fields.iter().map(AsRef::as_ref))
            .map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let io = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    Error::io(path, io)
}

/// Writes a PCA projection as `run_id,step,c1,c2,c3`.
pub fn write_pca_csv(path: &Path, run_ids: &[String], pca: &PcaProjection) -> Result<()> {
    let mut w = CsvWriter::create(path, &["run_id", "step", "c1", "c2", "c3"])?;
    for (id, traj) in run_ids.iter().zip(&pca.trajectories) {
        for (step, c) in traj {
            w.row(&[
                id.clone(),
                step.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
            ])?;
        }
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_partitions_values() {
        let edges = linear_edges(-1.0, 1.0, 4);
        let values = [-5.0, -0.75, -0.1, 0.0, 0.2, 0.99, 1.0, 7.0];
        let counts = gradient_histogram(&values, &edges).unwrap();
        assert_eq!(counts, vec![2, 1, 2, 3]);
        assert_eq!(counts.iter().sum::<u64>(), values.len() as u64);
    }

    #[test]
    fn untrained_mass_sits_in_zero_bin() {
        let edges = linear_edges(-0.5, 0.5, 5);
        let counts = gradient_histogram(&[0.0; 100], &edges).unwrap();
        assert_eq!(counts, vec![0, 0, 100, 0, 0]);
    }

    #[test]
    fn histogram_rejects_bad_edges() {
        assert!(gradient_histogram(&[0.0], &[0.0]).is_err());
        assert!(gradient_histogram(&[0.0], &[0.0, 0.0]).is_err());
        assert!(gradient_histogram(&[0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn energy_constants() {
        assert_eq!(energy_estimate(&AccessCounts::default()), 0.0);
        let read = AccessCounts {
            dram_weight_reads: 1,
            ..Default::default()
        };
        assert_eq!(energy_estimate(&read), 640.0);
        let regen = AccessCounts {
            regen_events: 1,
            ..Default::default()
        };
        assert_eq!(energy_estimate(&regen), 1.5);
        assert!((EnergyModel::default().regen_advantage() - 426.666_666).abs() < 1e-3);
    }

    #[test]
    fn ledger_counts_concurrently() {
        let ledger = AccessLedger::new();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        ledger.add_reads(1);
                        ledger.add_regens(2);
                    }
                });
            }
        });
        let c = ledger.counts();
        assert_eq!(c.dram_weight_reads, 4000);
        assert_eq!(c.regen_events, 8000);
    }

    #[test]
    fn pca_needs_four_snapshots() {
        let snaps: Vec<_> = (0..3)
            .map(|i| TrajectorySnapshot {
                step: i,
                weights: vec![i as f32; 5],
            })
            .collect();
        assert!(matches!(
            pca_project(&[snaps]),
            Err(Error::TooFewSnapshots { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn identical_snapshots_project_to_origin() {
        let run: Vec<_> = (0..6)
            .map(|i| TrajectorySnapshot {
                step: i,
                weights: vec![0.3, -1.0, 2.0],
            })
            .collect();
        let pca = pca_project(&[run]).unwrap();
        assert!(pca.trajectories[0].iter().all(|(_, c)| c.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn collinear_snapshots_have_one_component() {
        let dir = [0.5f32, -1.0, 2.0, 0.25];
        let run: Vec<_> = (0..8)
            .map(|i| TrajectorySnapshot {
                step: i * 100,
                weights: dir.iter().map(|d| 1.0 + d * i as f32 * 0.3).collect(),
            })
            .collect();
        let pca = pca_project(&[run]).unwrap();
        let spread = pca.trajectories[0]
            .iter()
            .map(|(_, c)| c[0].abs())
            .fold(0.0, f64::max);
        assert!(spread > 1.0);
        for (_, c) in &pca.trajectories[0] {
            assert!(c[1].abs() < 1e-6 * spread && c[2].abs() < 1e-6 * spread);
        }
        assert_eq!(pca.trajectories[0][0].1, [0.0; 3]);
    }

    #[test]
    fn jacobi_diagonalizes_small_matrix() {
        let a = vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 1.0];
        let (vals, vecs) = jacobi_eigen(a.clone(), 3);
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a[r * 3 + k] * vecs[k * 3 + c]).sum();
                assert!((av - vals[c] * vecs[r * 3 + c]).abs() < 1e-10);
            }
        }
        let trace: f64 = vals.iter().sum();
        assert!((trace - 8.0).abs() < 1e-10);
    }
}
