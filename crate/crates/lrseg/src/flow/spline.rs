//! Monotone rational-quadratic spline transforms.
//!
//! Each transform is parameterized by an unconstrained vector of length
//! `3 * bins - 1`: raw bin widths, raw bin heights, and raw interior knot
//! derivatives. Widths and heights pass through a softmax with a minimum bin
//! fraction; derivatives pass through an offset softplus with a minimum
//! slope, so the spline is strictly increasing on `[-tail, tail]` for every
//! raw parameter value. Outside that interval the transform is the identity
//! with zero log-derivative, and boundary knot derivatives are pinned to 1
//! so the spline meets the linear tails smoothly.
//!
//! The all-zero raw vector yields the identity map: uniform bins and unit
//! derivatives at every knot.

pub const MIN_BIN_FRACTION: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Constrained knots plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct SplineKnots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ds: Vec<f64>,
    width_softmax: Vec<f64>,
    height_softmax: Vec<f64>,
    deriv_sigmoid: Vec<f64>,
    tail: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Offset added to raw derivatives so a raw value of 0 maps to slope 1.
fn derivative_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|&r| (r - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn knot_positions(fractions: &[f64], tail: f64) -> Vec<f64> {
    let span = 2.0 * tail;
    let factor = 1.0 - MIN_BIN_FRACTION * fractions.len() as f64;
    let mut xs = Vec::with_capacity(fractions.len() + 1);
    let mut acc = -tail;
    xs.push(acc);
    for &f in fractions {
        acc += span * (MIN_BIN_FRACTION + factor * f);
        xs.push(acc);
    }
    xs
}

/// Raw parameter vector length for one transformed dimension.
pub fn param_len(bins: usize) -> usize {
    3 * bins - 1
}

pub fn constrain(theta: &[f64], bins: usize, tail: f64) -> SplineKnots {
    debug_assert_eq!(theta.len(), param_len(bins));
    let width_softmax = softmax(&theta[..bins]);
    let height_softmax = softmax(&theta[bins..2 * bins]);
    let xs = knot_positions(&width_softmax, tail);
    let ys = knot_positions(&height_softmax, tail);
    let offset = derivative_offset();
    let mut ds = Vec::with_capacity(bins + 1);
    let mut deriv_sigmoid = Vec::with_capacity(bins - 1);
    ds.push(1.0);
    for &raw in &theta[2 * bins..] {
        ds.push(MIN_DERIVATIVE + softplus(raw + offset));
        deriv_sigmoid.push(sigmoid(raw + offset));
    }
    ds.push(1.0);
    SplineKnots {
        xs,
        ys,
        ds,
        width_softmax,
        height_softmax,
        deriv_sigmoid,
        tail,
    }
}

fn locate(knots: &[f64], v: f64) -> usize {
    let bins = knots.len() - 1;
    knots.partition_point(|&t| t <= v).saturating_sub(1).min(bins - 1)
}

/// Returns `(y, log dy/dx)`.
pub fn forward(x: f64, knots: &SplineKnots) -> (f64, f64) {
    if x < -knots.tail || x > knots.tail {
        return (x, 0.0);
    }
    let k = locate(&knots.xs, x);
    let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
    let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
    let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let xi = ((x - x0) / w).clamp(0.0, 1.0);
    let q = xi * (1.0 - xi);
    let d_sum = d1 + d0 - 2.0 * s;
    let denom = s + d_sum * q;
    let y = y0 + h * (s * xi * xi + d0 * q) / denom;
    let num = d1 * xi * xi + 2.0 * s * q + d0 * (1.0 - xi) * (1.0 - xi);
    let log_deriv = 2.0 * s.ln() + num.ln() - 2.0 * denom.ln();
    (y, log_deriv)
}

/// Analytic inverse: solves the quadratic in the bin fraction directly.
pub fn inverse(y: f64, knots: &SplineKnots) -> f64 {
    if y < -knots.tail || y > knots.tail {
        return y;
    }
    let k = locate(&knots.ys, y);
    let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
    let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
    let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let dy = y - y0;
    let d_sum = d1 + d0 - 2.0 * s;
    let a = h * (s - d0) + dy * d_sum;
    let b = h * d0 - dy * d_sum;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
    x0 + xi * w
}

/// Reverse-mode step for one spline evaluation.
///
/// `gy` and `glogd` are the objective gradients with respect to the output
/// and the log-derivative term. Parameter gradients accumulate into
/// `gtheta`; the return value is the gradient with respect to `x`.
pub fn backward(
    x: f64,
    knots: &SplineKnots,
    gy: f64,
    glogd: f64,
    gtheta: &mut [f64],
) -> f64 {
    if x < -knots.tail || x > knots.tail {
        return gy;
    }
    let bins = knots.xs.len() - 1;
    let k = locate(&knots.xs, x);
    let (x0, x1) = (knots.xs[k], knots.xs[k + 1]);
    let (y0, y1) = (knots.ys[k], knots.ys[k + 1]);
    let (d0, d1) = (knots.ds[k], knots.ds[k + 1]);

    // Recompute the forward intermediates for this bin.
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let xi = ((x - x0) / w).clamp(0.0, 1.0);
    let q = xi * (1.0 - xi);
    let d_sum = d1 + d0 - 2.0 * s;
    let denom = s + d_sum * q;
    let numer = h * (s * xi * xi + d0 * q);
    let deriv_num = d1 * xi * xi + 2.0 * s * q + d0 * (1.0 - xi) * (1.0 - xi);

    // Adjoints, processed in exact reverse order of the forward assignments.
    let mut gs = 0.0;
    let mut gxi = 0.0;
    let mut gq = 0.0;
    let mut gd0 = 0.0;
    let mut gd1 = 0.0;
    let mut gh = 0.0;
    let mut gw = 0.0;
    let mut gx0 = 0.0;
    let mut gx1 = 0.0;
    let mut gy0 = 0.0;
    let mut gy1 = 0.0;
    let mut gdenom = 0.0;

    // log_deriv = 2 ln s + ln deriv_num - 2 ln denom
    gs += glogd * 2.0 / s;
    let gnum = glogd / deriv_num;
    gdenom += glogd * (-2.0) / denom;

    // deriv_num = d1 xi^2 + 2 s q + d0 (1 - xi)^2
    gd1 += gnum * xi * xi;
    gxi += gnum * 2.0 * d1 * xi;
    gs += gnum * 2.0 * q;
    gq += gnum * 2.0 * s;
    gd0 += gnum * (1.0 - xi) * (1.0 - xi);
    gxi -= gnum * 2.0 * d0 * (1.0 - xi);

    // y = y0 + numer / denom
    gy0 += gy;
    let gnumer = gy / denom;
    gdenom -= gy * numer / (denom * denom);

    // numer = h (s xi^2 + d0 q)
    gh += gnumer * (s * xi * xi + d0 * q);
    gs += gnumer * h * xi * xi;
    gxi += gnumer * h * 2.0 * s * xi;
    gd0 += gnumer * h * q;
    gq += gnumer * h * d0;

    // denom = s + d_sum q
    gs += gdenom;
    let gdsum = gdenom * q;
    gq += gdenom * d_sum;

    // d_sum = d1 + d0 - 2 s
    gd1 += gdsum;
    gd0 += gdsum;
    gs -= 2.0 * gdsum;

    // q = xi (1 - xi)
    gxi += gq * (1.0 - 2.0 * xi);

    // xi = (x - x0) / w
    let gx = gxi / w;
    gx0 -= gxi / w;
    gw -= gxi * xi / w;

    // s = h / w
    gh += gs / w;
    gw -= gs * s / w;

    // h = y1 - y0;  w = x1 - x0
    gy1 += gh;
    gy0 -= gh;
    gx1 += gw;
    gx0 -= gw;

    // Knot positions are cumulative sums of bin widths/heights:
    // xs[k] depends on widths 0..k, xs[k+1] on widths 0..=k.
    let span = 2.0 * knots.tail;
    let factor = 1.0 - MIN_BIN_FRACTION * bins as f64;
    let mut gwidth_softmax = vec![0.0; bins];
    let mut gheight_softmax = vec![0.0; bins];
    for j in 0..k {
        gwidth_softmax[j] += (gx0 + gx1) * span * factor;
        gheight_softmax[j] += (gy0 + gy1) * span * factor;
    }
    gwidth_softmax[k] += gx1 * span * factor;
    gheight_softmax[k] += gy1 * span * factor;

    // Softmax backward: gr_i = p_i (v_i - sum_j v_j p_j).
    let dotw: f64 = gwidth_softmax
        .iter()
        .zip(&knots.width_softmax)
        .map(|(v, p)| v * p)
        .sum();
    for i in 0..bins {
        gtheta[i] += knots.width_softmax[i] * (gwidth_softmax[i] - dotw);
    }
    let doth: f64 = gheight_softmax
        .iter()
        .zip(&knots.height_softmax)
        .map(|(v, p)| v * p)
        .sum();
    for i in 0..bins {
        gtheta[bins + i] += knots.height_softmax[i] * (gheight_softmax[i] - doth);
    }

    // Interior derivatives: ds[i] = MIN_DERIVATIVE + softplus(raw + offset).
    if k > 0 {
        gtheta[2 * bins + (k - 1)] += gd0 * knots.deriv_sigmoid[k - 1];
    }
    if k + 1 < bins {
        gtheta[2 * bins + k] += gd1 * knots.deriv_sigmoid[k];
    }

    gx
}
