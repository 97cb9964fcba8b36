//! Fully-connected conditioner network with tanh hidden activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeroed(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weight[i * self.in_dim..(i + 1) * self.in_dim];
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }

    /// Accumulates weight/bias gradients into `grads` (weights then biases)
    /// and returns the gradient with respect to the layer input.
    fn backward(&self, input: &[f64], gout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grads.split_at_mut(self.weight.len());
        let mut gin = vec![0.0; self.in_dim];
        for i in 0..self.out_dim {
            let g = gout[i];
            gb[i] += g;
            let row = &self.weight[i * self.in_dim..(i + 1) * self.in_dim];
            let grow = &mut gw[i * self.in_dim..(i + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grow[j] += g * input[j];
                gin[j] += g * row[j];
            }
        }
        gin
    }
}

/// `hidden_layers` tanh layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations saved by the traced forward pass:
/// `acts[0]` is the input, `acts[l]` the output of layer `l - 1`.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeroed(in_dim: usize, hidden_width: usize, hidden_layers: usize, out_dim: usize) -> Self {
        assert!(hidden_layers >= 1);
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        layers.push(Dense::zeroed(hidden_width, in_dim));
        for _ in 1..hidden_layers {
            layers.push(Dense::zeroed(hidden_width, hidden_width));
        }
        layers.push(Dense::zeroed(out_dim, hidden_width));
        Self { layers }
    }

    /// Xavier-style init for the hidden stack. The output layer is zeroed
    /// when `zero_output` is set so the downstream transform starts as the
    /// identity; otherwise it gets small random weights.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, zero_output: bool) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if l == last && zero_output {
                layer.weight.iter_mut().for_each(|w| *w = 0.0);
                layer.bias.iter_mut().for_each(|b| *b = 0.0);
                continue;
            }
            let scale = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-scale..scale);
            }
            for b in &mut layer.bias {
                *b = 0.0;
            }
        }
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(Dense::param_len).sum()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.apply(&a);
            if l != last {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        a
    }

    pub fn forward_traced(&self, x: &[f64]) -> (Vec<f64>, MlpTrace) {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.apply(acts.last().unwrap());
            if l != last {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(a);
        }
        (acts.last().unwrap().clone(), MlpTrace { acts })
    }

    /// Backward through the whole stack. `grads` is this network's
    /// contiguous parameter-gradient region in layer order.
    pub fn backward(&self, trace: &MlpTrace, gout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_len();
        }
        let mut g = gout.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l != last {
                // Through tanh: output activation is cached in acts[l + 1].
                let a = &trace.acts[l + 1];
                for (gv, av) in g.iter_mut().zip(a) {
                    *gv *= 1.0 - av * av;
                }
            }
            let layer = &self.layers[l];
            let region = &mut grads[offsets[l]..offsets[l] + layer.param_len()];
            g = layer.backward(&trace.acts[l], &g, region);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_network_outputs_zero() {
        let mlp = Mlp::zeroed(3, 8, 4, 5);
        assert_eq!(mlp.forward(&[1.0, -2.0, 0.5]), vec![0.0; 5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::zeroed(3, 6, 4, 2);
        mlp.randomize(&mut rng, false);
        let x = [0.3, -0.8, 1.1];
        // Objective: weighted sum of outputs.
        let wts = [0.7, -1.3];
        let eval = |m: &Mlp| -> f64 {
            m.forward(&x).iter().zip(&wts).map(|(o, w)| o * w).sum()
        };

        let (_, trace) = mlp.forward_traced(&x);
        let mut grads = vec![0.0; mlp.param_len()];
        let gin = mlp.backward(&trace, &wts, &mut grads);

        let eps = 1e-6;
        // Check every parameter via central differences.
        let mut flat_idx = 0;
        for l in 0..mlp.layers.len() {
            let nparam = mlp.layers[l].param_len();
            for p in 0..nparam {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                let (wlen, _) = (plus.layers[l].weight.len(), 0);
                if p < wlen {
                    plus.layers[l].weight[p] += eps;
                    minus.layers[l].weight[p] -= eps;
                } else {
                    plus.layers[l].bias[p - wlen] += eps;
                    minus.layers[l].bias[p - wlen] -= eps;
                }
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = grads[flat_idx + p];
                assert!(
                    (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                    "layer {l} param {p}: {a} vs {fd}"
                );
            }
            flat_idx += nparam;
        }
        // And the input gradient.
        for d in 0..x.len() {
            let mut xp = x;
            xp[d] += eps;
            let mut xm = x;
            xm[d] -= eps;
            let f = |xv: &[f64; 3]| -> f64 {
                mlp.forward(xv).iter().zip(&wts).map(|(o, w)| o * w).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((gin[d] - fd).abs() <= 1e-6 * gin[d].abs().max(fd.abs()).max(1.0));
        }
    }
}
