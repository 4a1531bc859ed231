//! Linear and GRU layers recorded on a [`Graph`].
//!
//! Layers own [`ParamId`]s; `bind` loads their current values onto a graph
//! once so that recurrent steps reuse the same parameter nodes.

use ndarray::{s, Array2, Axis, Zip};

use crate::autodiff::{sigmoid, CustomBackward, Graph, ParamId, ParamStore, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, rng),
            b: store.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng),
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: store.add_zeros(format!("{name}.weight"), out_dim, in_dim),
            b: store.add_zeros(format!("{name}.bias"), 1, out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            w: g.param(store, self.w),
            b: g.param(store, self.b),
        }
    }
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

/// One GRU layer (PyTorch gate layout: reset, update, new).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGruLayer {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_ih: store.add_uniform(format!("{name}.weight_ih"), 3 * hidden, input, hidden, rng),
            w_hh: store.add_uniform(format!("{name}.weight_hh"), 3 * hidden, hidden, hidden, rng),
            b_ih: store.add_uniform(format!("{name}.bias_ih"), 1, 3 * hidden, hidden, rng),
            b_hh: store.add_uniform(format!("{name}.bias_hh"), 1, 3 * hidden, hidden, rng),
            input,
            hidden,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundGruLayer {
        BoundGruLayer {
            w_ih: g.param(store, self.w_ih),
            w_hh: g.param(store, self.w_hh),
            b_ih: g.param(store, self.b_ih),
            b_hh: g.param(store, self.b_hh),
            hidden: self.hidden,
        }
    }
}

impl BoundGruLayer {
    /// One step: `h' = (1 - z) ⊙ n + z ⊙ h`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let xv = g.value(x).clone();
        let hv = g.value(h).clone();
        let w_ih = g.value(self.w_ih).clone();
        let w_hh = g.value(self.w_hh).clone();
        let mut gi = xv.dot(&w_ih.t());
        gi += g.value(self.b_ih);
        let mut gh = hv.dot(&w_hh.t());
        gh += g.value(self.b_hh);

        let mut r = &gi.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd]);
        r.mapv_inplace(sigmoid);
        let mut z = &gi.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd]);
        z.mapv_inplace(sigmoid);
        let gh_n = gh.slice(s![.., 2 * hd..]).to_owned();
        let mut n = &gi.slice(s![.., 2 * hd..]) + &(&r * &gh_n);
        n.mapv_inplace(f64::tanh);
        let mut out = n.clone();
        Zip::from(&mut out)
            .and(&z)
            .and(&hv)
            .for_each(|o, &z, &h| *o = (1.0 - z) * *o + z * h);

        let rule = GruStep {
            x: xv,
            h: hv,
            w_ih,
            w_hh,
            r,
            z,
            n,
            gh_n,
        };
        g.custom(&[x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh], out, Box::new(rule))
    }
}

struct GruStep {
    x: Array2<f64>,
    h: Array2<f64>,
    w_ih: Array2<f64>,
    w_hh: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
}

impl CustomBackward for GruStep {
    fn backward(&self, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let (batch, hd) = self.h.dim();
        let mut d_gi = Array2::zeros((batch, 3 * hd));
        let mut d_gh = Array2::zeros((batch, 3 * hd));
        let mut d_h = Array2::zeros((batch, hd));
        for b in 0..batch {
            for j in 0..hd {
                let (g, r, z, n, h) = (grad[[b, j]], self.r[[b, j]], self.z[[b, j]], self.n[[b, j]], self.h[[b, j]]);
                let dn = g * (1.0 - z);
                let dz = g * (h - n);
                d_h[[b, j]] = g * z;
                let da_n = dn * (1.0 - n * n);
                let dr = da_n * self.gh_n[[b, j]];
                let da_z = dz * z * (1.0 - z);
                let da_r = dr * r * (1.0 - r);
                d_gi[[b, j]] = da_r;
                d_gi[[b, hd + j]] = da_z;
                d_gi[[b, 2 * hd + j]] = da_n;
                d_gh[[b, j]] = da_r;
                d_gh[[b, hd + j]] = da_z;
                d_gh[[b, 2 * hd + j]] = da_n * r;
            }
        }
        let d_x = d_gi.dot(&self.w_ih);
        d_h += &d_gh.dot(&self.w_hh);
        let d_w_ih = d_gi.t().dot(&self.x);
        let d_w_hh = d_gh.t().dot(&self.h);
        let d_b_ih = d_gi.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_b_hh = d_gh.sum_axis(Axis(0)).insert_axis(Axis(0));
        vec![d_x, d_h, d_w_ih, d_w_hh, d_b_ih, d_b_hh]
    }
}

/// Stack of GRU layers; the output of each layer feeds the next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

pub struct BoundGru {
    layers: Vec<BoundGruLayer>,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, num_layers: usize, rng: &mut Rng) -> Self {
        let layers = (0..num_layers)
            .map(|l| GruLayer::new(store, &format!("{name}.l{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundGru {
        BoundGru {
            layers: self.layers.iter().map(|l| l.bind(g, store)).collect(),
        }
    }
}

impl BoundGru {
    /// Zero hidden state for every layer.
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> Vec<Var> {
        self.layers
            .iter()
            .map(|l| g.input(Array2::zeros((batch, l.hidden))))
            .collect()
    }

    /// Advances every layer by one step, updating `state` in place; returns
    /// the top layer's new hidden state.
    pub fn step(&self, g: &mut Graph, x: Var, state: &mut [Var]) -> Var {
        let mut input = x;
        for (layer, h) in self.layers.iter().zip(state.iter_mut()) {
            *h = layer.step(g, input, *h);
            input = *h;
        }
        input
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng::substream;

    #[test]
    fn gru_stack_matches_finite_differences() {
        let mut rng = substream(21, "gru-check");
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 2, 3, 3, &mut rng);
        let head = Linear::new(&mut store, "head", 3, 1, &mut rng);
        let xs: Vec<Array2<f64>> = (0..4)
            .map(|t| Array2::from_shape_fn((2, 2), |(b, j)| ((t * 3 + b * 2 + j) as f64 * 0.71).sin()))
            .collect();
        let loss_of = |store: &ParamStore, g: &mut Graph| {
            let bound = gru.bind(g, store);
            let out = head.bind(g, store);
            let mut state = bound.zero_state(g, 2);
            let mut top = state[0];
            for x in &xs {
                let xin = g.input(x.clone());
                top = bound.step(g, xin, &mut state);
            }
            let y = out.forward(g, top);
            let y = g.square(y);
            g.mean_all(y)
        };
        let mut g = Graph::new();
        let loss = loss_of(&store, &mut g);
        g.backward(loss, &mut store).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let l = loss_of(s, &mut g);
                g.scalar(l)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gru_input_gradient() {
        let mut rng = substream(22, "gru-input");
        let mut store = ParamStore::new();
        let layer = GruLayer::new(&mut store, "g", 2, 2, &mut rng);
        let x0 = ndarray::array![[0.3, -0.8]];
        let h0 = ndarray::array![[0.1, 0.5]];
        let f = |x: &[f64], store: &ParamStore| {
            let mut g = Graph::new();
            let b = layer.bind(&mut g, store);
            let xi = g.input(Array2::from_shape_vec((1, 2), x.to_vec()).unwrap());
            let hi = g.input(h0.clone());
            let h = b.step(&mut g, xi, hi);
            let s = g.sum_cols(h);
            (g, xi, s)
        };
        let (g, xi, s) = f(x0.as_slice().unwrap(), &store);
        let grads = g.backward(s, &mut store).unwrap();
        let numeric = crate::autodiff::central_difference(
            |x| {
                let (g, _, s) = f(x, &store);
                g.scalar(s)
            },
            x0.as_slice().unwrap(),
            1e-6,
        );
        for (a, n) in grads.wrt(xi).unwrap().iter().zip(numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }
}
