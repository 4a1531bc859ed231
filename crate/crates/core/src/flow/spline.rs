//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.

use ndarray::Array2;

use crate::autodiff::{sigmoid, CustomBackward};
use crate::error::{Error, Result};

pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Knot positions and derivatives of one spline.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineKnots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ds: Vec<f64>,
}

/// Raw parameters per transformed dimension: `K` width logits, `K` height
/// logits and `K - 1` interior derivative pre-activations.
pub fn raw_params_per_dim(bins: usize) -> usize {
    3 * bins - 1
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Offset making a zero pre-activation produce derivative exactly one.
fn derivative_offset() -> f64 {
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Knots plus the intermediate quantities needed to differentiate them.
struct Built {
    knots: SplineKnots,
    sm_w: Vec<f64>,
    sm_h: Vec<f64>,
    /// Sigmoid of each interior derivative pre-activation.
    sig_d: Vec<f64>,
}

fn cumulative_knots(sm: &[f64], min: f64, bound: f64) -> Vec<f64> {
    let k = sm.len();
    let mut out = Vec::with_capacity(k + 1);
    out.push(-bound);
    let mut acc = 0.0;
    for &p in &sm[..k - 1] {
        acc += min + (1.0 - k as f64 * min) * p;
        out.push(-bound + 2.0 * bound * acc);
    }
    out.push(bound);
    out
}

fn build(raw: &[f64], bins: usize, bound: f64) -> Built {
    let mut sm_w = vec![0.0; bins];
    let mut sm_h = vec![0.0; bins];
    softmax_into(&raw[..bins], &mut sm_w);
    softmax_into(&raw[bins..2 * bins], &mut sm_h);
    let offset = derivative_offset();
    let mut ds = Vec::with_capacity(bins + 1);
    let mut sig_d = Vec::with_capacity(bins - 1);
    ds.push(1.0);
    for &u in &raw[2 * bins..] {
        ds.push(MIN_DERIVATIVE + softplus(u + offset));
        sig_d.push(sigmoid(u + offset));
    }
    ds.push(1.0);
    Built {
        knots: SplineKnots {
            xs: cumulative_knots(&sm_w, MIN_BIN_WIDTH, bound),
            ys: cumulative_knots(&sm_h, MIN_BIN_HEIGHT, bound),
            ds,
        },
        sm_w,
        sm_h,
        sig_d,
    }
}

impl SplineKnots {
    /// The identity map with `bins` equal bins.
    pub fn identity(bins: usize, bound: f64) -> Self {
        Self::from_raw(&vec![0.0; raw_params_per_dim(bins)], bins, bound)
    }

    /// Knots from unconstrained parameters; always valid.
    pub fn from_raw(raw: &[f64], bins: usize, bound: f64) -> Self {
        assert_eq!(raw.len(), raw_params_per_dim(bins), "raw spline parameter count");
        build(raw, bins, bound).knots
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn bound(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.xs.len();
        if k < 2 || self.ys.len() != k || self.ds.len() != k {
            return Err(Error::InvalidParams("knot arrays must share a length of at least 2".into()));
        }
        let ok_edges = self.xs[0] == self.ys[0] && self.xs[k - 1] == self.ys[k - 1] && self.xs[0] < 0.0;
        if !ok_edges {
            return Err(Error::InvalidParams("knots must span the same interval [-B, B]".into()));
        }
        if self.xs.windows(2).any(|w| !(w[1] > w[0])) || self.ys.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams("knots must be strictly increasing".into()));
        }
        if self.ds.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidParams("knot derivatives must be positive and finite".into()));
        }
        Ok(())
    }

    fn bin_of(xs: &[f64], x: f64) -> usize {
        // partition_point gives the first knot > x; clamp the right edge into the last bin.
        (xs.partition_point(|&k| k <= x).max(1) - 1).min(xs.len() - 2)
    }
}

/// Local quantities of one bin evaluation.
struct Piece {
    xi: f64,
    s: f64,
    h: f64,
    w: f64,
    dk: f64,
    dk1: f64,
    p: f64,
    d: f64,
    q: f64,
}

fn piece(kn: &SplineKnots, k: usize, x: f64) -> Piece {
    let w = kn.xs[k + 1] - kn.xs[k];
    let h = kn.ys[k + 1] - kn.ys[k];
    let s = h / w;
    let xi = (x - kn.xs[k]) / w;
    let (dk, dk1) = (kn.ds[k], kn.ds[k + 1]);
    let e = xi * (1.0 - xi);
    Piece {
        xi,
        s,
        h,
        w,
        dk,
        dk1,
        p: s * xi * xi + dk * e,
        d: s + (dk1 + dk - 2.0 * s) * e,
        q: dk1 * xi * xi + 2.0 * s * e + dk * (1.0 - xi) * (1.0 - xi),
    }
}

fn forward_unchecked(x: f64, kn: &SplineKnots) -> (f64, f64) {
    let bound = kn.bound();
    if !(-bound..=bound).contains(&x) {
        return (x, 0.0);
    }
    let k = SplineKnots::bin_of(&kn.xs, x);
    let pc = piece(kn, k, x);
    let y = kn.ys[k] + pc.h * pc.p / pc.d;
    let logdet = 2.0 * pc.s.ln() + pc.q.ln() - 2.0 * pc.d.ln();
    (y, logdet)
}

fn inverse_unchecked(y: f64, kn: &SplineKnots) -> (f64, f64) {
    let bound = kn.bound();
    if !(-bound..=bound).contains(&y) {
        return (y, 0.0);
    }
    let k = SplineKnots::bin_of(&kn.ys, y);
    let w = kn.xs[k + 1] - kn.xs[k];
    let h = kn.ys[k + 1] - kn.ys[k];
    let s = h / w;
    let (dk, dk1) = (kn.ds[k], kn.ds[k + 1]);
    let dy = y - kn.ys[k];
    let sum = dk1 + dk - 2.0 * s;
    let a = h * (s - dk) + dy * sum;
    let b = h * dk - dy * sum;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
    let x = kn.xs[k] + xi * w;
    let pc = piece(kn, k, x);
    let logdet = 2.0 * pc.s.ln() + pc.q.ln() - 2.0 * pc.d.ln();
    (x, -logdet)
}

/// Applies the spline to `x`, returning `(y, log dy/dx)`.
pub fn rqs_forward(x: f64, knots: &SplineKnots) -> Result<(f64, f64)> {
    knots.validate()?;
    Ok(forward_unchecked(x, knots))
}

/// Inverts the spline at `y`, returning `(x, log dx/dy)`.
pub fn rqs_inverse(y: f64, knots: &SplineKnots) -> Result<(f64, f64)> {
    knots.validate()?;
    Ok(inverse_unchecked(y, knots))
}

/// Partials of `y` and `log dy/dx` with respect to the bin primitives
/// `(x, x_k, x_{k+1}, y_k, y_{k+1}, d_k, d_{k+1})`, each already weighted by
/// the upstream gradients `gy` and `gl`.
struct Partials {
    x: f64,
    xk: f64,
    xk1: f64,
    yk: f64,
    yk1: f64,
    dk: f64,
    dk1: f64,
}

fn bin_partials(pc: &Piece, gy: f64, gl: f64) -> Partials {
    let Piece { xi, s, h, w, dk, dk1, p, d, q } = *pc;
    let e = xi * (1.0 - xi);
    let de = 1.0 - 2.0 * xi;
    let sum = dk1 + dk - 2.0 * s;

    let p_xi = 2.0 * s * xi + dk * de;
    let p_s = xi * xi;
    let p_dk = e;
    let d_xi = sum * de;
    let d_s = 1.0 - 2.0 * e;
    let d_dk = e;
    let d_dk1 = e;
    let q_xi = 2.0 * dk1 * xi + 2.0 * s * de - 2.0 * dk * (1.0 - xi);
    let q_s = 2.0 * e;
    let q_dk = (1.0 - xi) * (1.0 - xi);
    let q_dk1 = xi * xi;

    let d2 = d * d;
    let y_xi = h * (p_xi * d - p * d_xi) / d2;
    let y_s = h * (p_s * d - p * d_s) / d2;
    let y_dk = h * (p_dk * d - p * d_dk) / d2;
    let y_dk1 = h * (-p * d_dk1) / d2;
    let y_h = p / d;

    let l_xi = q_xi / q - 2.0 * d_xi / d;
    let l_s = 2.0 / s + q_s / q - 2.0 * d_s / d;
    let l_dk = q_dk / q - 2.0 * d_dk / d;
    let l_dk1 = q_dk1 / q - 2.0 * d_dk1 / d;

    let g_xi = gy * y_xi + gl * l_xi;
    let g_s = gy * y_s + gl * l_s;
    let g_h = gy * y_h + g_s / w;
    let g_w = -g_xi * xi / w - g_s * s / w;
    let g_xk = -g_xi / w;
    Partials {
        x: g_xi / w,
        xk: g_xk - g_w,
        xk1: g_w,
        yk: gy - g_h,
        yk1: g_h,
        dk: gy * y_dk + gl * l_dk,
        dk1: gy * y_dk1 + gl * l_dk1,
    }
}

/// Adds the gradient of knot `i` (value `g`) to the softmax logits behind it.
fn knot_to_logits(g: f64, i: usize, sm: &[f64], min: f64, bound: f64, out: &mut [f64]) {
    let k = sm.len();
    if i == 0 || i == k || g == 0.0 {
        return;
    }
    let c = 2.0 * bound * (1.0 - k as f64 * min) * g;
    let s_i: f64 = sm[..i].iter().sum();
    for (j, o) in out.iter_mut().enumerate() {
        let below = if j < i { 1.0 } else { 0.0 };
        *o += c * sm[j] * (below - s_i);
    }
}

/// Batched spline transform recorded as one tape node.
///
/// Inputs are `x` (`n × d`) and raw parameters (`n × d(3K-1)`); the output
/// is `n × (d + 1)`: the transformed values followed by the row-wise sum of
/// log-derivatives.
pub(crate) struct SplineOp {
    pub bins: usize,
    pub bound: f64,
    x: Array2<f64>,
    raw: Array2<f64>,
}

impl SplineOp {
    pub fn forward(x: &Array2<f64>, raw: &Array2<f64>, bins: usize, bound: f64) -> (Array2<f64>, Self) {
        let (n, d) = x.dim();
        let per = raw_params_per_dim(bins);
        assert_eq!(raw.dim(), (n, d * per), "raw spline parameter shape");
        let raw = raw.as_standard_layout().into_owned();
        let mut out = Array2::zeros((n, d + 1));
        for r in 0..n {
            let row = raw.row(r);
            let row = row.as_slice().expect("row-major raw parameters");
            let mut total = 0.0;
            for j in 0..d {
                let kn = SplineKnots::from_raw(&row[j * per..(j + 1) * per], bins, bound);
                let (y, ld) = forward_unchecked(x[[r, j]], &kn);
                out[[r, j]] = y;
                total += ld;
            }
            out[[r, d]] = total;
        }
        let op = Self {
            bins,
            bound,
            x: x.clone(),
            raw,
        };
        (out, op)
    }
}

impl CustomBackward for SplineOp {
    fn backward(&self, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let (n, d) = self.x.dim();
        let (bins, bound) = (self.bins, self.bound);
        let per = raw_params_per_dim(bins);
        let mut gx = Array2::zeros((n, d));
        let mut graw = Array2::zeros(self.raw.raw_dim());
        for r in 0..n {
            let gl = grad[[r, d]];
            let row = self.raw.row(r);
            let row = row.as_slice().expect("row-major raw parameters");
            for j in 0..d {
                let gy = grad[[r, j]];
                let x = self.x[[r, j]];
                if !(-bound..=bound).contains(&x) {
                    gx[[r, j]] = gy;
                    continue;
                }
                let built = build(&row[j * per..(j + 1) * per], bins, bound);
                let kn = &built.knots;
                let k = SplineKnots::bin_of(&kn.xs, x);
                let pt = bin_partials(&piece(kn, k, x), gy, gl);
                gx[[r, j]] = pt.x;

                let mut out = vec![0.0; per];
                let (w_part, rest) = out.split_at_mut(bins);
                let (h_part, d_part) = rest.split_at_mut(bins);
                knot_to_logits(pt.xk, k, &built.sm_w, MIN_BIN_WIDTH, bound, w_part);
                knot_to_logits(pt.xk1, k + 1, &built.sm_w, MIN_BIN_WIDTH, bound, w_part);
                knot_to_logits(pt.yk, k, &built.sm_h, MIN_BIN_HEIGHT, bound, h_part);
                knot_to_logits(pt.yk1, k + 1, &built.sm_h, MIN_BIN_HEIGHT, bound, h_part);
                if k >= 1 {
                    d_part[k - 1] += pt.dk * built.sig_d[k - 1];
                }
                if k + 1 < bins {
                    d_part[k] += pt.dk1 * built.sig_d[k];
                }
                for (t, v) in out.into_iter().enumerate() {
                    graw[[r, j * per + t]] = v;
                }
            }
        }
        vec![gx, graw]
    }
}

/// Row-wise inverse of [`SplineOp`]: returns the pre-images and the sum of
/// inverse log-derivatives per row.
pub(crate) fn inverse_batch(y: &Array2<f64>, raw: &Array2<f64>, bins: usize, bound: f64) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = y.dim();
    let per = raw_params_per_dim(bins);
    let raw = raw.as_standard_layout();
    let mut x = Array2::zeros((n, d));
    let mut logdet = vec![0.0; n];
    for r in 0..n {
        let row = raw.row(r);
        let row = row.as_slice().expect("row-major raw parameters");
        for j in 0..d {
            let kn = SplineKnots::from_raw(&row[j * per..(j + 1) * per], bins, bound);
            let (xv, ld) = inverse_unchecked(y[[r, j]], &kn);
            x[[r, j]] = xv;
            logdet[r] += ld;
        }
    }
    (x, logdet)
}
