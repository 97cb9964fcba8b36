//! Maximum-likelihood flow training with adaptive per-parameter step sizes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 256,
            step_size: 1e-3,
        }
    }
}

/// First/second-moment adaptive updates (beta 0.9 / 0.999).
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Fits a flow by stochastic minimization of the mean negative
/// log-likelihood. The affine layers are initialized on the first batch;
/// with zero epochs the initialized model is returned unchanged.
pub fn train_flow(
    data: &[Vec<f64>],
    config: &FlowConfig,
    train: &TrainConfig,
) -> Result<FlowModel> {
    if data.len() < 2 {
        return Err(Error::EmptyData);
    }
    let c = data[0].len();
    for (i, row) in data.iter().enumerate() {
        if row.len() != c {
            return Err(Error::DimMismatch(format!(
                "training row {i} has {} entries, expected {c}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow training data"));
        }
    }

    let mut model = FlowModel::init_for_training(c, config.clone(), train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = data.len();
    let batch_size = train.batch_size.clamp(1, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let first_batch: Vec<Vec<f64>> = order[..batch_size].iter().map(|&i| data[i].clone()).collect();
    model.initialize_actnorm(&first_batch)?;

    let mut adam = Adam::new(model.num_params(), train.step_size);
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (nll, grads) = model.nll_grad(&batch)?;
            if !nll.is_finite() {
                return Err(Error::NonFinite("flow training loss"));
            }
            let mut params = model.params();
            adam.step(&mut params, &grads);
            model.set_params(&params);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn small_config() -> FlowConfig {
        FlowConfig {
            hidden_width: 16,
            ..FlowConfig::default()
        }
    }

    fn gaussian_data(n: usize, c: usize, mean: f64, std: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mean, std).unwrap();
        (0..n)
            .map(|_| (0..c).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let data = gaussian_data(64, 2, 1.0, 2.0, 3);
        let cfg = small_config();
        let tc = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let trained = train_flow(&data, &cfg, &tc).unwrap();
        let mut expect = FlowModel::init_for_training(2, cfg.clone(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9 ^ 0x9e37_79b9_7f4a_7c15);
        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut rng);
        let first: Vec<Vec<f64>> = order[..64].iter().map(|&i| data[i].clone()).collect();
        expect.initialize_actnorm(&first).unwrap();
        assert_eq!(trained, expect);
    }

    #[test]
    fn rejects_tiny_and_ragged_data() {
        let cfg = small_config();
        let tc = TrainConfig::default();
        assert!(matches!(
            train_flow(&[vec![0.0]], &cfg, &tc),
            Err(Error::EmptyData)
        ));
        assert!(matches!(
            train_flow(&[vec![0.0], vec![0.0, 1.0]], &cfg, &tc),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn standard_normal_data_reaches_entropy_bound() {
        // Mean log-density of N(0,1) data under the true model is
        // -0.5 ln(2 pi e) = -1.4189 nats per dimension.
        let data = gaussian_data(600, 2, 0.0, 1.0, 4);
        let cfg = small_config();
        let tc = TrainConfig {
            epochs: 20,
            batch_size: 128,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = train_flow(&data, &cfg, &tc).unwrap();
        let holdout = gaussian_data(400, 2, 0.0, 1.0, 99);
        let per_dim = model.mean_log_density(&holdout).unwrap() / 2.0;
        assert!(
            (per_dim + 1.4189).abs() <= 0.2,
            "per-dim log-density {per_dim}"
        );
    }

    #[test]
    fn training_improves_held_out_density_on_bimodal_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let c = if rng.gen_bool(0.5) { 3.0 } else { -3.0 };
            vec![c + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]
        };
        let data: Vec<Vec<f64>> = (0..600).map(|_| sample(&mut rng)).collect();
        let holdout: Vec<Vec<f64>> = (0..200).map(|_| sample(&mut rng)).collect();
        let cfg = small_config();
        let init = train_flow(
            &data,
            &cfg,
            &TrainConfig {
                epochs: 0,
                seed: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let trained = train_flow(
            &data,
            &cfg,
            &TrainConfig {
                epochs: 30,
                batch_size: 128,
                seed: 5,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let before = init.mean_log_density(&holdout).unwrap();
        let after = trained.mean_log_density(&holdout).unwrap();
        assert!(
            after >= before,
            "held-out log-density fell from {before} to {after}"
        );
    }

    #[test]
    fn one_dim_trained_density_integrates_to_one() {
        let data = gaussian_data(400, 1, 0.5, 1.5, 8);
        let cfg = small_config();
        let model = train_flow(
            &data,
            &cfg,
            &TrainConfig {
                epochs: 10,
                batch_size: 128,
                seed: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let step = 1e-2;
        let mut mass = 0.0;
        let mut x = -20.0;
        while x < 20.0 {
            mass += model.log_density(&[x + 0.5 * step]).unwrap().exp() * step;
            x += step;
        }
        assert!((mass - 1.0).abs() <= 5e-3, "mass {mass}");
    }

    #[test]
    fn deterministic_under_seed() {
        let data = gaussian_data(100, 2, 0.0, 1.0, 6);
        let cfg = small_config();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 32,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train_flow(&data, &cfg, &tc).unwrap();
        let b = train_flow(&data, &cfg, &tc).unwrap();
        assert_eq!(a, b);
    }
}
