//! Spline-flow density estimator.
//!
//! The flow is a fixed stack of blocks, each applying per-dimension affine
//! normalization, an invertible LU-parameterized linear mix, and a monotone
//! rational-quadratic spline coupling whose parameters come from a
//! fully-connected conditioner on the untransformed half of the dimensions.
//! Mapping data to a standard Gaussian base distribution gives exact log
//! densities; training maximizes likelihood with hand-derived reverse-mode
//! gradients (see `train`).

pub mod layers;
pub mod mlp;
pub mod spline;
mod train;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use layers::{ActNorm, LuLinear};
use mlp::{Mlp, MlpTrace};
use spline::SplineKnots;

pub use train::{train_flow, TrainConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub blocks: usize,
    pub spline_bins: usize,
    pub tail_bound: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            spline_bins: 8,
            tail_bound: 3.0,
            hidden_width: 64,
            hidden_layers: 4,
        }
    }
}

/// Spline coupling: the first `ceil(C/2)` dimensions pass through unchanged
/// and condition the transform of the remaining dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBlock {
    pub actnorm: ActNorm,
    pub linear: LuLinear,
    pub coupling: Coupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub feature_dim: usize,
    pub config: FlowConfig,
    pub blocks: Vec<FlowBlock>,
}

/// Forward intermediates for one block, kept for the backward pass.
struct BlockTrace {
    actnorm_in: Vec<f64>,
    linear_in: Vec<f64>,
    linear_u: Vec<f64>,
    coupling_in: Vec<f64>,
    mlp_trace: MlpTrace,
    knots: Vec<SplineKnots>,
}

fn split_point(dim: usize) -> usize {
    dim.div_ceil(2)
}

impl FlowModel {
    fn make_blocks(
        feature_dim: usize,
        config: &FlowConfig,
        mut customize: impl FnMut(usize, &mut FlowBlock),
    ) -> Vec<FlowBlock> {
        let ca = split_point(feature_dim);
        let ct = feature_dim - ca;
        (0..config.blocks)
            .map(|b| {
                let mut block = FlowBlock {
                    actnorm: ActNorm::identity(feature_dim),
                    linear: LuLinear::identity(feature_dim),
                    coupling: Coupling {
                        mlp: Mlp::zeroed(
                            ca,
                            config.hidden_width,
                            config.hidden_layers,
                            ct * spline::param_len(config.spline_bins),
                        ),
                    },
                };
                customize(b, &mut block);
                block
            })
            .collect()
    }

    /// Exact identity map: unit scales, identity mixing, zeroed conditioners.
    pub fn identity(feature_dim: usize, config: FlowConfig) -> Self {
        let blocks = Self::make_blocks(feature_dim, &config, |_, _| {});
        Self {
            feature_dim,
            config,
            blocks,
        }
    }

    /// Identity couplings and mixing, but with a random channel permutation
    /// per block and randomized hidden conditioner layers; the conditioner
    /// output layer starts at zero so training begins from the identity.
    pub fn init_for_training(feature_dim: usize, config: FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = Self::make_blocks(feature_dim, &config, |_, block| {
            block.linear.perm.shuffle(&mut rng);
            block.coupling.mlp.randomize(&mut rng, true);
        });
        Self {
            feature_dim,
            config,
            blocks,
        }
    }

    /// Fully randomized model (all parameter tensors populated); used by
    /// round-trip and gradient tests where every path must be exercised.
    pub fn random(feature_dim: usize, config: FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = Self::make_blocks(feature_dim, &config, |_, block| {
            block.linear.perm.shuffle(&mut rng);
            for v in &mut block.linear.lower {
                *v = rng.gen_range(-0.4..0.4);
            }
            for v in &mut block.linear.upper {
                *v = rng.gen_range(-0.4..0.4);
            }
            for v in &mut block.linear.log_diag {
                *v = rng.gen_range(-0.4..0.4);
            }
            for v in &mut block.linear.diag_sign {
                *v = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
            for v in &mut block.actnorm.log_scale {
                *v = rng.gen_range(-0.4..0.4);
            }
            for v in &mut block.actnorm.bias {
                *v = rng.gen_range(-0.4..0.4);
            }
            block.coupling.mlp.randomize(&mut rng, false);
            // Shrink the output layer so spline parameters stay moderate.
            let last = block.coupling.mlp.layers.last_mut().unwrap();
            for w in &mut last.weight {
                *w *= 0.5;
            }
            for b in &mut last.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        });
        Self {
            feature_dim,
            config,
            blocks,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::DimMismatch(format!(
                "input has {} entries, flow expects {}",
                x.len(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    fn coupling_forward(
        &self,
        coupling: &Coupling,
        v: &[f64],
        mut traced: Option<(&mut MlpTrace, &mut Vec<SplineKnots>)>,
    ) -> (Vec<f64>, f64) {
        let ca = split_point(self.feature_dim);
        let bins = self.config.spline_bins;
        let tail = self.config.tail_bound;
        let plen = spline::param_len(bins);
        let theta = if let Some((trace_slot, _)) = traced.as_mut() {
            let (theta, trace) = coupling.mlp.forward_traced(&v[..ca]);
            **trace_slot = trace;
            theta
        } else {
            coupling.mlp.forward(&v[..ca])
        };
        let mut out = v.to_vec();
        let mut logdet = 0.0;
        for (i, value) in v[ca..].iter().enumerate() {
            let knots = spline::constrain(&theta[i * plen..(i + 1) * plen], bins, tail);
            let (y, ld) = spline::forward(*value, &knots);
            out[ca + i] = y;
            logdet += ld;
            if let Some((_, knot_store)) = traced.as_mut() {
                knot_store.push(knots);
            }
        }
        (out, logdet)
    }

    /// Maps a data point to the base space; returns `(z, log|det J|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut v = x.to_vec();
        let mut logdet = 0.0;
        let mut buf = Vec::with_capacity(self.feature_dim);
        for block in &self.blocks {
            logdet += block.actnorm.forward(&v, &mut buf);
            let (z, _, ld) = block.linear.forward(&buf);
            logdet += ld;
            let (out, ld) = self.coupling_forward(&block.coupling, &z, None);
            logdet += ld;
            v = out;
        }
        Ok((v, logdet))
    }

    fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, f64, Vec<BlockTrace>) {
        let mut v = x.to_vec();
        let mut logdet = 0.0;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let actnorm_in = v.clone();
            let mut normed = Vec::with_capacity(self.feature_dim);
            logdet += block.actnorm.forward(&v, &mut normed);
            let (mixed, u, ld) = block.linear.forward(&normed);
            logdet += ld;
            let mut mlp_trace = MlpTrace { acts: Vec::new() };
            let mut knots = Vec::new();
            let (out, ld) =
                self.coupling_forward(&block.coupling, &mixed, Some((&mut mlp_trace, &mut knots)));
            logdet += ld;
            traces.push(BlockTrace {
                actnorm_in,
                linear_in: normed,
                linear_u: u,
                coupling_in: mixed,
                mlp_trace,
                knots,
            });
            v = out;
        }
        (v, logdet, traces)
    }

    /// Maps a base-space point back to data space.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.inverse_with_logdet(z).map(|(x, _)| x)
    }

    /// Inverse map together with its own log|det J| (the negative of the
    /// forward log-determinant at the recovered point).
    pub fn inverse_with_logdet(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(z)?;
        let ca = split_point(self.feature_dim);
        let bins = self.config.spline_bins;
        let tail = self.config.tail_bound;
        let plen = spline::param_len(bins);
        let mut v = z.to_vec();
        let mut logdet = 0.0;
        let mut buf = Vec::with_capacity(self.feature_dim);
        for block in self.blocks.iter().rev() {
            let theta = block.coupling.mlp.forward(&v[..ca]);
            for i in 0..self.feature_dim - ca {
                let knots = spline::constrain(&theta[i * plen..(i + 1) * plen], bins, tail);
                let x = spline::inverse(v[ca + i], &knots);
                let (_, ld) = spline::forward(x, &knots);
                logdet -= ld;
                v[ca + i] = x;
            }
            let unmixed = block.linear.inverse(&v);
            logdet -= block.linear.log_diag.iter().sum::<f64>();
            block.actnorm.inverse(&unmixed, &mut buf);
            logdet -= block.actnorm.log_scale.iter().sum::<f64>();
            v = buf.clone();
        }
        Ok((v, logdet))
    }

    /// log p(x) under the standard Gaussian base distribution.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        let sq: f64 = z.iter().map(|v| v * v).sum();
        Ok(-0.5 * self.feature_dim as f64 * LN_2PI - 0.5 * sq + logdet)
    }

    pub fn mean_log_density(&self, data: &[Vec<f64>]) -> Result<f64> {
        let mut acc = 0.0;
        for row in data {
            acc += self.log_density(row)?;
        }
        Ok(acc / data.len() as f64)
    }

    // Parameter flattening. Canonical order per block:
    // actnorm log_scale, actnorm bias, lower, upper, log_diag, then the
    // conditioner layers as [weight, bias] pairs. Fixed permutations and
    // diagonal signs are not trainable and are excluded.
    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.actnorm.param_len() + b.linear.param_len() + b.coupling.mlp.param_len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for block in &self.blocks {
            out.extend_from_slice(&block.actnorm.log_scale);
            out.extend_from_slice(&block.actnorm.bias);
            out.extend_from_slice(&block.linear.lower);
            out.extend_from_slice(&block.linear.upper);
            out.extend_from_slice(&block.linear.log_diag);
            for layer in &block.coupling.mlp.layers {
                out.extend_from_slice(&layer.weight);
                out.extend_from_slice(&layer.bias);
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut at = 0;
        let take = |dst: &mut [f64], at: &mut usize| {
            dst.copy_from_slice(&p[*at..*at + dst.len()]);
            *at += dst.len();
        };
        for block in &mut self.blocks {
            take(&mut block.actnorm.log_scale, &mut at);
            take(&mut block.actnorm.bias, &mut at);
            take(&mut block.linear.lower, &mut at);
            take(&mut block.linear.upper, &mut at);
            take(&mut block.linear.log_diag, &mut at);
            for layer in &mut block.coupling.mlp.layers {
                take(&mut layer.weight, &mut at);
                take(&mut layer.bias, &mut at);
            }
        }
    }

    /// Mean negative log-likelihood over a batch and its gradient with
    /// respect to the flattened parameters.
    pub fn nll_grad(&self, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut grads = vec![0.0; self.num_params()];
        let mut nll_sum = 0.0;
        for row in batch {
            self.check_dim(row)?;
            let (z, logdet, traces) = self.forward_traced(row);
            let sq: f64 = z.iter().map(|v| v * v).sum();
            nll_sum += 0.5 * self.feature_dim as f64 * LN_2PI + 0.5 * sq - logdet;
            // d nll / dz = z; d nll / d logdet = -1.
            let mut g: Vec<f64> = z;
            let glogdet = -1.0;
            let mut offset = grads.len();
            for (block, trace) in self.blocks.iter().zip(&traces).rev() {
                let len = block.actnorm.param_len()
                    + block.linear.param_len()
                    + block.coupling.mlp.param_len();
                offset -= len;
                g = self.backward_block(block, trace, g, glogdet, &mut grads[offset..offset + len]);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        nll_sum *= scale;
        for g in &mut grads {
            *g *= scale;
        }
        Ok((nll_sum, grads))
    }

    fn backward_block(
        &self,
        block: &FlowBlock,
        trace: &BlockTrace,
        g: Vec<f64>,
        glogdet: f64,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let ca = split_point(self.feature_dim);
        let ct = self.feature_dim - ca;
        let plen = spline::param_len(self.config.spline_bins);
        let an_len = block.actnorm.param_len();
        let lin_len = block.linear.param_len();
        let (an_grads, rest) = grads.split_at_mut(an_len);
        let (lin_grads, mlp_grads) = rest.split_at_mut(lin_len);

        // Coupling backward.
        let mut gtheta = vec![0.0; ct * plen];
        let mut g_coupling_in = vec![0.0; self.feature_dim];
        for i in 0..ct {
            g_coupling_in[ca + i] = spline::backward(
                trace.coupling_in[ca + i],
                &trace.knots[i],
                g[ca + i],
                glogdet,
                &mut gtheta[i * plen..(i + 1) * plen],
            );
        }
        let gcond = block
            .coupling
            .mlp
            .backward(&trace.mlp_trace, &gtheta, mlp_grads);
        for i in 0..ca {
            g_coupling_in[i] = g[i] + gcond[i];
        }

        let g_linear_in = block.linear.backward(
            &trace.linear_in,
            &trace.linear_u,
            &g_coupling_in,
            glogdet,
            lin_grads,
        );
        block
            .actnorm
            .backward(&trace.actnorm_in, &g_linear_in, glogdet, an_grads)
    }

    /// Data-dependent initialization: each block's affine layer is set from
    /// the statistics of the activations reaching it.
    pub fn initialize_actnorm(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rows: Vec<Vec<f64>> = batch.to_vec();
        for b in 0..self.blocks.len() {
            self.blocks[b].actnorm.init_from_batch(&rows)?;
            let block = &self.blocks[b];
            let mut buf = Vec::with_capacity(self.feature_dim);
            for row in &mut rows {
                block.actnorm.forward(row, &mut buf);
                let (mixed, _, _) = block.linear.forward(&buf);
                let (out, _) = self.coupling_forward(&block.coupling, &mixed, None);
                *row = out;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != self.config.blocks || self.feature_dim == 0 {
            return Err(Error::MalformedMetadata("flow model shape".into()));
        }
        let ca = split_point(self.feature_dim);
        let ct = self.feature_dim - ca;
        let out_dim = ct * spline::param_len(self.config.spline_bins);
        for block in &self.blocks {
            if block.actnorm.dim() != self.feature_dim || block.linear.dim != self.feature_dim {
                return Err(Error::MalformedMetadata("flow layer dims".into()));
            }
            block.linear.validate()?;
            if block.coupling.mlp.layers.len() != self.config.hidden_layers + 1
                || block.coupling.mlp.out_dim() != out_dim
            {
                return Err(Error::MalformedMetadata("flow conditioner shape".into()));
            }
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow parameters"));
        }
        Ok(())
    }
}
