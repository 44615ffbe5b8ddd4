//! Brute-force oracle for the calibration program, shared by test targets.

use fedsel_core::linalg::RowMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn objective(q: &[f64]) -> f64 {
    let u = 1.0 / q.len() as f64;
    q.iter().map(|v| (v - u) * (v - u)).sum()
}

/// Best objective over a grid of the feasible affine set `{q : Aq = c}`
/// intersected with `q ≥ 0`, parametrized through an SVD null-space basis.
pub fn grid_qp(b: &RowMatrix, target: &[f64], step: f64) -> Option<(f64, Vec<f64>)> {
    let n = b.rows();
    let k = b.cols() + 1;
    let mut a = DMatrix::zeros(k, n);
    for i in 0..n {
        a[(0, i)] = 1.0;
        for j in 0..b.cols() {
            a[(j + 1, i)] = b.row(i)[j];
        }
    }
    let mut c = vec![1.0];
    c.extend_from_slice(target);
    let svd = a.clone().svd(true, true);
    let origin = svd.solve(&DVector::from_vec(c), 1e-12).unwrap();
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
    // null space of A = zero eigenspace of AᵀA
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    for (idx, val) in eig.eigenvalues.iter().enumerate() {
        if val.abs() < 1e-10 {
            basis.push(eig.eigenvectors.column(idx).iter().copied().collect());
        }
    }
    assert_eq!(basis.len(), n - rank);
    let dims = basis.len();
    let steps = (3.0 / step) as i64;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx = vec![-steps; dims];
    loop {
        let mut q: Vec<f64> = origin.iter().copied().collect();
        for (d, &t) in idx.iter().enumerate() {
            for i in 0..n {
                q[i] += t as f64 * step * basis[d][i];
            }
        }
        if q.iter().all(|&v| v >= 0.0) {
            let f = objective(&q);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, q));
            }
        }
        // odometer increment
        let mut d = 0;
        loop {
            if d == dims {
                return best;
            }
            idx[d] += 1;
            if idx[d] > steps {
                idx[d] = -steps;
                d += 1;
            } else {
                break;
            }
        }
    }
}

/// Gaussian rows and a random convex combination of them as target.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, q: usize) -> (RowMatrix, Vec<f64>) {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..q).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    // target = random convex combination, so it lies in the hull
    let mut mix: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = mix.iter().sum();
    mix.iter_mut().for_each(|m| *m /= s);
    let target = (0..q)
        .map(|k| rows.iter().zip(&mix).map(|(r, m)| r[k] * m).sum())
        .collect();
    (RowMatrix::from_rows(&rows).unwrap(), target)
}
