//! Clamped cubic splines and unit arc-length resampling for branching paths.

use super::types::Point;

/// Cubic spline through `points`, parameterized by cumulative chord length,
/// with the start tangent clamped to `start_dir` and a natural end.
pub struct ClampedSpline {
    knots: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    mx: Vec<f64>,
    my: Vec<f64>,
}

impl ClampedSpline {
    pub fn new(points: &[Point], start_dir: Point) -> Self {
        assert!(points.len() >= 2, "spline needs at least two points");
        let mut knots = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            assert!(d > 0.0, "spline control points must be distinct");
            knots.push(knots.last().unwrap() + d);
        }
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
        let norm = start_dir[0].hypot(start_dir[1]);
        let mx = second_derivatives(&knots, &xs, start_dir[0] / norm);
        let my = second_derivatives(&knots, &ys, start_dir[1] / norm);
        Self { knots, xs, ys, mx, my }
    }

    pub fn length_param(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn eval(&self, u: f64) -> Point {
        let n = self.knots.len() - 1;
        let i = match self.knots.iter().rposition(|&k| k <= u) {
            Some(i) if i < n => i,
            Some(_) => n - 1,
            None => 0,
        };
        [
            eval_segment(&self.knots, &self.xs, &self.mx, i, u),
            eval_segment(&self.knots, &self.ys, &self.my, i, u),
        ]
    }
}

fn eval_segment(knots: &[f64], f: &[f64], m: &[f64], i: usize, u: f64) -> f64 {
    let h = knots[i + 1] - knots[i];
    let a = knots[i + 1] - u;
    let b = u - knots[i];
    m[i] * a.powi(3) / (6.0 * h)
        + m[i + 1] * b.powi(3) / (6.0 * h)
        + (f[i] / h - m[i] * h / 6.0) * a
        + (f[i + 1] / h - m[i + 1] * h / 6.0) * b
}

// Tridiagonal solve for the second derivatives: clamped start, natural end.
fn second_derivatives(knots: &[f64], f: &[f64], start_slope: f64) -> Vec<f64> {
    let n = knots.len() - 1;
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sub = vec![0.0; n + 1];
    let mut diag = vec![0.0; n + 1];
    let mut sup = vec![0.0; n + 1];
    let mut rhs = vec![0.0; n + 1];
    diag[0] = 2.0 * h[0];
    sup[0] = h[0];
    rhs[0] = 6.0 * ((f[1] - f[0]) / h[0] - start_slope);
    for i in 1..n {
        sub[i] = h[i - 1];
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        sup[i] = h[i];
        rhs[i] = 6.0 * ((f[i + 1] - f[i]) / h[i] - (f[i] - f[i - 1]) / h[i - 1]);
    }
    diag[n] = 1.0;
    rhs[n] = 0.0;
    // Thomas algorithm.
    for i in 1..=n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut m = vec![0.0; n + 1];
    m[n] = rhs[n] / diag[n];
    for i in (0..n).rev() {
        m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
    }
    m
}

/// Points at arc lengths `1, 2, ..., count` along the spline, measured from
/// its start. Past the end of the spline the path continues straight along
/// the final direction.
pub fn resample_unit_steps(spline: &ClampedSpline, count: usize) -> Vec<Point> {
    const DENSE_PER_UNIT: f64 = 200.0;
    let total = spline.length_param();
    let n_dense = ((total * DENSE_PER_UNIT).ceil() as usize).max(2);
    let dense: Vec<Point> = (0..=n_dense)
        .map(|i| spline.eval(total * i as f64 / n_dense as f64))
        .collect();

    let mut out = Vec::with_capacity(count);
    let mut target = 1.0;
    let mut walked = 0.0;
    for w in dense.windows(2) {
        let seg = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        while out.len() < count && walked + seg >= target {
            let t = (target - walked) / seg;
            out.push([w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
            target += 1.0;
        }
        walked += seg;
    }
    if out.len() < count {
        let a = dense[dense.len() - 2];
        let b = dense[dense.len() - 1];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        let mut last = out.last().copied().unwrap_or(b);
        while out.len() < count {
            last = [last[0] + dir[0], last[1] + dir[1]];
            out.push(last);
        }
    }
    out
}
