//! Diagonal-covariance Gaussian mixture estimation.
//!
//! Fitting runs EM with k-means initialization; responsibilities are computed
//! in log space with log-sum-exp, and variances are floored so degenerate
//! components never abort a fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmConfig {
    pub components: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 50,
            max_iter: 200,
            rel_tol: 1e-6,
            seed: 0,
        }
    }
}

/// A fitted mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub feature_dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// log p(x) via log-sum-exp over the weighted component densities.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_dim {
            return Err(Error::DimMismatch(format!(
                "query has {} entries, model expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        let terms: Vec<f64> = (0..self.components())
            .map(|i| self.weights[i].ln() + log_normal_diag(x, &self.means[i], &self.variances[i]))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Mean log-density over a dataset.
    pub fn mean_log_density(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut acc = 0.0;
        for row in data {
            acc += self.log_density(row)?;
        }
        Ok(acc / data.len() as f64)
    }

    /// Structural invariants: weights sum to one, variances floored, shapes agree.
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::MalformedMetadata("gmm model shape".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::MalformedMetadata(format!(
                "gmm weights sum to {sum}"
            )));
        }
        for i in 0..k {
            if self.means[i].len() != self.feature_dim || self.variances[i].len() != self.feature_dim
            {
                return Err(Error::MalformedMetadata("gmm component shape".into()));
            }
            if self.means[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gmm means"));
            }
            if self.variances[i].iter().any(|&v| !v.is_finite() || v < VARIANCE_FLOOR * 0.999) {
                return Err(Error::MalformedMetadata("gmm variance below floor".into()));
            }
        }
        Ok(())
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..x.len() {
        let diff = x[d] - mean[d];
        acc -= 0.5 * (LN_2PI + var[d].ln() + diff * diff / var[d]);
    }
    acc
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

/// Lloyd's algorithm: runs until the assignment fixpoint or 100 iterations,
/// reseeding empty clusters to the point farthest from its centroid.
pub fn kmeans_init(
    data: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let n = data.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let dim = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, k);
    let mut centroids: Vec<Vec<f64>> = picks.iter().map(|i| data[i].clone()).collect();
    let mut assignments = vec![usize::MAX; n];

    for _ in 0..100 {
        let mut next = vec![0usize; n];
        for (p, row) in data.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            next[p] = best;
        }

        // Reseed empty clusters before recomputing the means.
        let mut sizes = vec![0usize; k];
        for &a in &next {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far_point = 0usize;
            let mut far_d = -1.0;
            for (p, row) in data.iter().enumerate() {
                if sizes[next[p]] <= 1 {
                    continue;
                }
                let d = squared_distance(row, &centroids[next[p]]);
                if d > far_d {
                    far_d = d;
                    far_point = p;
                }
            }
            sizes[next[far_point]] -= 1;
            next[far_point] = c;
            sizes[c] = 1;
        }

        if next == assignments {
            break;
        }
        assignments = next;

        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for (p, row) in data.iter().enumerate() {
                if assignments[p] == c {
                    for d in 0..dim {
                        mean[d] += row[d];
                    }
                }
            }
            for v in &mut mean {
                *v /= sizes[c] as f64;
            }
            centroids[c] = mean;
        }
    }
    Ok((centroids, assignments))
}

/// Fit by EM and also return the per-iteration mean log-likelihood trace.
pub fn em_fit_trace(data: &[Vec<f64>], config: &GmmConfig) -> Result<(GmmModel, Vec<f64>)> {
    let n = data.len();
    let k = config.components;
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let dim = data[0].len();

    let (centroids, assignments) = kmeans_init(data, k, config.seed)?;
    let mut weights = vec![0.0f64; k];
    let mut means = centroids;
    let mut variances = vec![vec![0.0f64; dim]; k];
    {
        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        // Global per-dim variance as the fallback spread for tiny clusters.
        let mut global_mean = vec![0.0; dim];
        for row in data {
            for d in 0..dim {
                global_mean[d] += row[d];
            }
        }
        for v in &mut global_mean {
            *v /= n as f64;
        }
        let mut global_var = vec![0.0; dim];
        for row in data {
            for d in 0..dim {
                let diff = row[d] - global_mean[d];
                global_var[d] += diff * diff;
            }
        }
        for v in &mut global_var {
            *v = (*v / n as f64).max(VARIANCE_FLOOR);
        }

        for c in 0..k {
            weights[c] = (sizes[c] as f64 / n as f64).max(1e-12);
            if sizes[c] < 2 {
                variances[c] = global_var.clone();
                continue;
            }
            let mut var = vec![0.0; dim];
            for (p, row) in data.iter().enumerate() {
                if assignments[p] == c {
                    for d in 0..dim {
                        let diff = row[d] - means[c][d];
                        var[d] += diff * diff;
                    }
                }
            }
            for v in &mut var {
                *v = (*v / sizes[c] as f64).max(VARIANCE_FLOOR);
            }
            variances[c] = var;
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }

    let mut trace = Vec::new();
    let mut resp = vec![vec![0.0f64; k]; n];
    for _ in 0..config.max_iter {
        // E step.
        let mut ll_sum = 0.0;
        for (p, row) in data.iter().enumerate() {
            let terms: Vec<f64> = (0..k)
                .map(|c| weights[c].ln() + log_normal_diag(row, &means[c], &variances[c]))
                .collect();
            let lse = log_sum_exp(&terms);
            ll_sum += lse;
            for c in 0..k {
                resp[p][c] = (terms[c] - lse).exp();
            }
        }
        let mean_ll = ll_sum / n as f64;
        let converged = trace.last().map_or(false, |&prev: &f64| {
            (mean_ll - prev).abs() / f64::max(prev.abs(), 1e-10) < config.rel_tol
        });
        trace.push(mean_ll);
        if converged {
            break;
        }

        // M step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|p| resp[p][c]).sum::<f64>().max(1e-32);
            weights[c] = nk / n as f64;
            let mut mean = vec![0.0; dim];
            for (p, row) in data.iter().enumerate() {
                let r = resp[p][c];
                for d in 0..dim {
                    mean[d] += r * row[d];
                }
            }
            for v in &mut mean {
                *v /= nk;
            }
            let mut var = vec![0.0; dim];
            for (p, row) in data.iter().enumerate() {
                let r = resp[p][c];
                for d in 0..dim {
                    let diff = row[d] - mean[d];
                    var[d] += r * diff * diff;
                }
            }
            for v in &mut var {
                *v = (*v / nk).max(VARIANCE_FLOOR);
            }
            means[c] = mean;
            variances[c] = var;
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }

    let model = GmmModel {
        feature_dim: dim,
        weights,
        means,
        variances,
    };
    Ok((model, trace))
}

pub fn em_fit(data: &[Vec<f64>], config: &GmmConfig) -> Result<GmmModel> {
    em_fit_trace(data, config).map(|(model, _)| model)
}
