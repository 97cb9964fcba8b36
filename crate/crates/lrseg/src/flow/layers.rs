//! Per-dimension affine normalization and LU-parameterized linear mixing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension affine layer: `y = exp(log_scale) * x + bias`.
///
/// The scale is stored in log space so the layer stays invertible for every
/// parameter value; the log-determinant is simply the sum of `log_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ActNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            log_scale: vec![0.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.log_scale.len()
    }

    pub fn param_len(&self) -> usize {
        2 * self.dim()
    }

    /// Data-dependent init: after this call the layer maps the batch to
    /// per-dimension mean 0 and standard deviation 1 (std floored at 1e-6).
    pub fn init_from_batch(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let dim = self.dim();
        for d in 0..dim {
            let mean = batch.iter().map(|row| row[d]).sum::<f64>() / n;
            let var = batch.iter().map(|row| (row[d] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-6);
            self.log_scale[d] = -std.ln();
            self.bias[d] = -mean / std;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) -> f64 {
        out.clear();
        out.extend(
            x.iter()
                .zip(&self.log_scale)
                .zip(&self.bias)
                .map(|((&v, &ls), &b)| ls.exp() * v + b),
        );
        self.log_scale.iter().sum()
    }

    pub fn inverse(&self, y: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            y.iter()
                .zip(&self.log_scale)
                .zip(&self.bias)
                .map(|((&v, &ls), &b)| (v - b) * (-ls).exp()),
        );
    }

    /// `grads` layout: `[log_scale, bias]`.
    pub fn backward(&self, x: &[f64], gy: &[f64], glogdet: f64, grads: &mut [f64]) -> Vec<f64> {
        let dim = self.dim();
        let (gls, gb) = grads.split_at_mut(dim);
        let mut gx = vec![0.0; dim];
        for d in 0..dim {
            let s = self.log_scale[d].exp();
            gx[d] = gy[d] * s;
            gls[d] += gy[d] * s * x[d] + glogdet;
            gb[d] += gy[d];
        }
        gx
    }
}

/// Invertible linear mixing `z = P L U x` with a fixed permutation, a
/// unit-diagonal lower factor, and an upper factor whose diagonal is
/// `sign * exp(log_diag)` (signs fixed at init). The log-determinant is the
/// sum of `log_diag`, so invertibility holds for every parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LuLinear {
    pub dim: usize,
    /// `output[i] = mixed[perm[i]]`.
    pub perm: Vec<usize>,
    /// Strict lower triangle, packed rows: entry `(i, j)`, `i > j`.
    pub lower: Vec<f64>,
    /// Strict upper triangle, packed rows: entry `(i, j)`, `j > i`.
    pub upper: Vec<f64>,
    pub log_diag: Vec<f64>,
    pub diag_sign: Vec<f64>,
}

#[inline]
fn lower_idx(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

#[inline]
fn upper_idx(dim: usize, i: usize, j: usize) -> usize {
    i * (dim - 1) - i * (i - 1) / 2 + (j - i - 1)
}

impl LuLinear {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            perm: (0..dim).collect(),
            lower: vec![0.0; dim * (dim - 1) / 2],
            upper: vec![0.0; dim * (dim - 1) / 2],
            log_diag: vec![0.0; dim],
            diag_sign: vec![1.0; dim],
        }
    }

    pub fn param_len(&self) -> usize {
        self.lower.len() + self.upper.len() + self.dim
    }

    fn diag(&self, i: usize) -> f64 {
        self.diag_sign[i] * self.log_diag[i].exp()
    }

    /// Returns `(z, u)` where `u = U x` is kept for the backward pass,
    /// plus the (input-independent) log-determinant.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let dim = self.dim;
        let mut u = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = self.diag(i) * x[i];
            for j in i + 1..dim {
                acc += self.upper[upper_idx(dim, i, j)] * x[j];
            }
            u[i] = acc;
        }
        let mut l = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = u[i];
            for j in 0..i {
                acc += self.lower[lower_idx(i, j)] * u[j];
            }
            l[i] = acc;
        }
        let z: Vec<f64> = self.perm.iter().map(|&p| l[p]).collect();
        (z, u, self.log_diag.iter().sum())
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        let dim = self.dim;
        let mut l = vec![0.0; dim];
        for i in 0..dim {
            l[self.perm[i]] = z[i];
        }
        // Forward substitution through the unit-lower factor.
        let mut u = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = l[i];
            for j in 0..i {
                acc -= self.lower[lower_idx(i, j)] * u[j];
            }
            u[i] = acc;
        }
        // Back substitution through the upper factor.
        let mut x = vec![0.0; dim];
        for i in (0..dim).rev() {
            let mut acc = u[i];
            for j in i + 1..dim {
                acc -= self.upper[upper_idx(dim, i, j)] * x[j];
            }
            x[i] = acc / self.diag(i);
        }
        x
    }

    /// `grads` layout: `[lower, upper, log_diag]`. Needs the forward
    /// intermediates `x` and `u`.
    pub fn backward(
        &self,
        x: &[f64],
        u: &[f64],
        gz: &[f64],
        glogdet: f64,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let dim = self.dim;
        let (glower, rest) = grads.split_at_mut(self.lower.len());
        let (gupper, glogd) = rest.split_at_mut(self.upper.len());

        let mut gl = vec![0.0; dim];
        for i in 0..dim {
            gl[self.perm[i]] = gz[i];
        }
        let mut gu = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = gl[i];
            for j in i + 1..dim {
                acc += self.lower[lower_idx(j, i)] * gl[j];
            }
            gu[i] = acc;
        }
        for i in 0..dim {
            for j in 0..i {
                glower[lower_idx(i, j)] += gl[i] * u[j];
            }
        }
        let mut gx = vec![0.0; dim];
        for i in 0..dim {
            let mut acc = self.diag(i) * gu[i];
            for j in 0..i {
                acc += self.upper[upper_idx(dim, j, i)] * gu[j];
            }
            gx[i] = acc;
        }
        for i in 0..dim {
            for j in i + 1..dim {
                gupper[upper_idx(dim, i, j)] += gu[i] * x[j];
            }
            glogd[i] += gu[i] * x[i] * self.diag(i) + glogdet;
        }
        gx
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim;
        let tri = dim * (dim - 1) / 2;
        if self.perm.len() != dim
            || self.lower.len() != tri
            || self.upper.len() != tri
            || self.log_diag.len() != dim
            || self.diag_sign.len() != dim
        {
            return Err(Error::MalformedMetadata("lu linear shape".into()));
        }
        let mut seen = vec![false; dim];
        for &p in &self.perm {
            if p >= dim || seen[p] {
                return Err(Error::MalformedMetadata("lu permutation".into()));
            }
            seen[p] = true;
        }
        if self.diag_sign.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::MalformedMetadata("lu diag sign".into()));
        }
        for i in 0..dim {
            if !self.log_diag[i].is_finite() || self.diag(i).abs() < 1e-8 {
                return Err(Error::MalformedMetadata("lu diagonal underflow".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lu(dim: usize, seed: u64) -> LuLinear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = LuLinear::identity(dim);
        let mut perm: Vec<usize> = (0..dim).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        layer.perm = perm;
        layer.lower.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        layer.upper.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        layer.log_diag.iter_mut().for_each(|v| *v = rng.gen_range(-0.4..0.4));
        layer
            .diag_sign
            .iter_mut()
            .for_each(|v| *v = if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        layer
    }

    #[test]
    fn actnorm_init_standardizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch: Vec<Vec<f64>> = (0..64)
            .map(|_| vec![5.0 + 2.0 * rng.gen_range(-1.0..1.0f64), rng.gen_range(0.0..0.1f64)])
            .collect();
        let mut layer = ActNorm::identity(2);
        layer.init_from_batch(&batch).unwrap();
        let mut out = Vec::new();
        let transformed: Vec<Vec<f64>> = batch
            .iter()
            .map(|row| {
                layer.forward(row, &mut out);
                out.clone()
            })
            .collect();
        for d in 0..2 {
            let n = transformed.len() as f64;
            let mean = transformed.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = transformed.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-4, "std {}", var.sqrt());
        }
    }

    #[test]
    fn actnorm_known_statistics() {
        // mean 5, std 2 per dimension: scale 0.5, bias -2.5.
        let batch = vec![vec![3.0], vec![7.0]];
        let mut layer = ActNorm::identity(1);
        layer.init_from_batch(&batch).unwrap();
        assert!((layer.log_scale[0].exp() - 0.5).abs() < 1e-12);
        assert!((layer.bias[0] + 2.5).abs() < 1e-12);
    }

    #[test]
    fn actnorm_constant_batch_floors_std() {
        let batch = vec![vec![4.0]; 10];
        let mut layer = ActNorm::identity(1);
        layer.init_from_batch(&batch).unwrap();
        assert!(layer.log_scale[0].is_finite());
        assert!((layer.log_scale[0].exp() - 1e6).abs() / 1e6 < 1e-9);
    }

    #[test]
    fn actnorm_empty_batch_rejected() {
        let mut layer = ActNorm::identity(1);
        assert!(matches!(
            layer.init_from_batch(&[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn lu_round_trip_and_logdet() {
        for seed in 0..20 {
            let dim = 2 + (seed as usize % 7);
            let layer = random_lu(dim, seed);
            layer.validate().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (z, _, logdet) = layer.forward(&x);
            let back = layer.inverse(&z);
            for d in 0..dim {
                assert!((back[d] - x[d]).abs() < 1e-10);
            }
            assert!((logdet - layer.log_diag.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_gradients_match_finite_differences() {
        let dim = 4;
        let layer = random_lu(dim, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gz: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gld = rng.gen_range(-1.0..1.0);
        let eval = |layer: &LuLinear| {
            let (z, _, logdet) = layer.forward(&x);
            z.iter().zip(&gz).map(|(a, b)| a * b).sum::<f64>() + gld * logdet
        };

        let (_, u, _) = layer.forward(&x);
        let mut grads = vec![0.0; layer.param_len()];
        let gx = layer.backward(&x, &u, &gz, gld, &mut grads);

        let eps = 1e-6;
        let check = |a: f64, fd: f64, what: &str| {
            assert!(
                (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                "{what}: analytic {a} fd {fd}"
            );
        };
        for p in 0..layer.lower.len() {
            let mut lp = layer.clone();
            lp.lower[p] += eps;
            let mut lm = layer.clone();
            lm.lower[p] -= eps;
            check(grads[p], (eval(&lp) - eval(&lm)) / (2.0 * eps), "lower");
        }
        for p in 0..layer.upper.len() {
            let mut lp = layer.clone();
            lp.upper[p] += eps;
            let mut lm = layer.clone();
            lm.upper[p] -= eps;
            check(
                grads[layer.lower.len() + p],
                (eval(&lp) - eval(&lm)) / (2.0 * eps),
                "upper",
            );
        }
        for p in 0..dim {
            let mut lp = layer.clone();
            lp.log_diag[p] += eps;
            let mut lm = layer.clone();
            lm.log_diag[p] -= eps;
            check(
                grads[2 * layer.lower.len() + p],
                (eval(&lp) - eval(&lm)) / (2.0 * eps),
                "log_diag",
            );
        }
        for d in 0..dim {
            let mut xp = x.clone();
            xp[d] += eps;
            let mut xm = x.clone();
            xm[d] -= eps;
            let f = |xv: &[f64]| {
                let (z, _, logdet) = layer.forward(xv);
                z.iter().zip(&gz).map(|(a, b)| a * b).sum::<f64>() + gld * logdet
            };
            check(gx[d], (f(&xp) - f(&xm)) / (2.0 * eps), "input");
        }
    }
}
