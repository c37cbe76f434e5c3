//! Covariance and principal axes over row-major sample matrices.

use nalgebra::{DMatrix, SymmetricEigen};

/// Principal axes sorted by decreasing variance.
#[derive(Debug, Clone)]
pub struct PrincipalAxes {
    pub mean: Vec<f64>,
    /// Eigenvalues of the sample covariance, descending.
    pub variances: Vec<f64>,
    /// Unit eigenvectors, one per entry of `variances`.
    pub axes: Vec<Vec<f64>>,
}

impl PrincipalAxes {
    /// `rows` yields `dim`-length samples. Returns `None` for fewer than two rows.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Option<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut scatter = DMatrix::<f64>::zeros(dim, dim);
        // Welford-style accumulation keeps the covariance accurate for offset data.
        let mut delta = vec![0.0; dim];
        for row in rows {
            n += 1;
            for d in 0..dim {
                delta[d] = row[d] - mean[d];
                mean[d] += delta[d] / n as f64;
            }
            for i in 0..dim {
                let di = row[i] - mean[i];
                for j in 0..dim {
                    scatter[(i, j)] += delta[j] * di;
                }
            }
        }
        if n < 2 {
            return None;
        }
        let cov = (scatter.clone() + scatter.transpose()) * (0.5 / (n - 1) as f64);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let variances = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes = order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        Some(Self {
            mean,
            variances,
            axes,
        })
    }

    pub fn project(&self, row: &[f64], component: usize) -> f64 {
        self.axes[component]
            .iter()
            .zip(row.iter().zip(&self.mean))
            .map(|(a, (x, m))| a * (x - m))
            .sum()
    }
}
