use dropback::init::XorShift32;
use dropback::metrics::{pca_project, TrajectorySnapshot};
use dropback::Seed;
use nalgebra::{DMatrix, SymmetricEigen};

const DIM: usize = 50;

/// Three anisotropic random walks in 50 dimensions from a shared start.
fn toy_runs() -> Vec<Vec<TrajectorySnapshot>> {
    let mut rng = XorShift32::keyed(Seed(2024), 1);
    let scale: Vec<f64> = (0..DIM).map(|d| 1.0 / (1.0 + d as f64)).collect();
    (0..3)
        .map(|_| {
            let mut w: Vec<f64> = vec![0.0; DIM];
            (0..12)
                .map(|s| {
                    for (wi, sc) in w.iter_mut().zip(&scale) {
                        *wi += sc * rng.next_normal();
                    }
                    TrajectorySnapshot {
                        step: 100 * s,
                        weights: w.iter().map(|&x| x as f32).collect(),
                    }
                })
                .collect()
        })
        .collect()
}

fn centered_matrix(runs: &[Vec<TrajectorySnapshot>]) -> DMatrix<f64> {
    let rows: Vec<&TrajectorySnapshot> = runs.iter().flatten().collect();
    let mut m = DMatrix::from_fn(rows.len(), DIM, |r, c| rows[r].weights[c] as f64);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    m
}

#[test]
fn matches_covariance_eigendecomposition() {
    let runs = toy_runs();
    let pca = pca_project(&runs).unwrap();
    let x = centered_matrix(&runs);
    let eig = SymmetricEigen::new(x.transpose() * &x);
    let mut order: Vec<usize> = (0..DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &idx) in order.iter().take(3).enumerate() {
        let want = eig.eigenvalues[idx];
        let got = pca.eigenvalues[c];
        assert!((got - want).abs() <= 1e-8 * want, "component {c}: {got} vs {want}");
        let v = eig.eigenvectors.column(idx);
        let dot: f64 = pca.components[c].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6, "component {c}: |cos| = {}", dot.abs());
    }
}

#[test]
fn components_are_orthonormal() {
    let pca = pca_project(&toy_runs()).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-6, "<v{i}, v{j}> = {d}");
        }
    }
}

#[test]
fn coordinates_are_projections_translated_to_origin() {
    let runs = toy_runs();
    let pca = pca_project(&runs).unwrap();
    let x = centered_matrix(&runs);
    let mut r = 0;
    for (run, traj) in runs.iter().zip(&pca.trajectories) {
        assert_eq!(traj.len(), run.len());
        assert_eq!(traj[0].1, [0.0; 3]);
        let proj = |row: usize, c: usize| -> f64 {
            x.row(row).iter().zip(&pca.components[c]).map(|(a, b)| a * b).sum()
        };
        let first = r;
        for (s, (step, coords)) in run.iter().zip(traj) {
            assert_eq!(s.step, *step);
            for (c, &got) in coords.iter().enumerate() {
                let want = proj(r, c) - proj(first, c);
                assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()));
            }
            r += 1;
        }
    }
}

#[test]
fn top_three_beat_random_projections() {
    let runs = toy_runs();
    let pca = pca_project(&runs).unwrap();
    let x = centered_matrix(&runs);
    let best: f64 = pca.eigenvalues.iter().sum();
    let mut rng = XorShift32::keyed(Seed(7), 3);
    for _ in 0..300 {
        let q = DMatrix::from_fn(DIM, 3, |_, _| rng.next_normal()).qr().q();
        let captured = (&x * q).norm_squared();
        assert!(captured <= best * (1.0 + 1e-9), "{captured} > {best}");
    }
}
