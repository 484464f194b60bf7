//! LSTM layer maths. Gate order in the stacked weight matrices is input,
//! forget, cell candidate, output.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    Input,
    Forget,
    Cell,
    Output,
}

impl Gate {
    fn block(self) -> usize {
        match self {
            Gate::Input => 0,
            Gate::Forget => 1,
            Gate::Cell => 2,
            Gate::Output => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// 4H × input
    pub w_x: Array2<f64>,
    /// 4H × H
    pub w_h: Array2<f64>,
    /// 4H
    pub b: Array1<f64>,
}

impl LstmLayer {
    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input(&self) -> usize {
        self.w_x.ncols()
    }

    pub(crate) fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((4 * hidden, input)),
            w_h: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept for the backward pass over one chunk.
pub(crate) struct LayerCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// post-activation gates, T × 4H
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Runs a layer over `x` (T × input) from state `(h0, c0)`. Returns the
/// hidden outputs (T × H), the final state and the cache.
pub(crate) fn layer_forward(
    layer: &LstmLayer,
    x: ArrayView2<'_, f64>,
    h0: ArrayView1<'_, f64>,
    c0: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>, LayerCache) {
    let t_len = x.nrows();
    let hd = layer.hidden();
    let mut gates = x.dot(&layer.w_x.t());
    gates += &layer.b;
    let mut h_out = Array2::zeros((t_len, hd));
    let mut h_prev = Array2::zeros((t_len, hd));
    let mut c_prev = Array2::zeros((t_len, hd));
    let mut tanh_c = Array2::zeros((t_len, hd));
    let mut h = h0.to_owned();
    let mut c = c0.to_owned();
    for t in 0..t_len {
        h_prev.row_mut(t).assign(&h);
        c_prev.row_mut(t).assign(&c);
        let mut z = gates.row_mut(t);
        z += &layer.w_h.dot(&h);
        for k in 0..hd {
            let i = sigmoid(z[k]);
            let f = sigmoid(z[hd + k]);
            let g = z[2 * hd + k].tanh();
            let o = sigmoid(z[3 * hd + k]);
            z[k] = i;
            z[hd + k] = f;
            z[2 * hd + k] = g;
            z[3 * hd + k] = o;
            c[k] = f * c[k] + i * g;
            let tc = c[k].tanh();
            tanh_c[[t, k]] = tc;
            h[k] = o * tc;
        }
        h_out.row_mut(t).assign(&h);
    }
    let cache = LayerCache {
        x: x.to_owned(),
        h_prev,
        c_prev,
        gates,
        tanh_c,
    };
    (h_out, h, c, cache)
}

/// Backward pass over one chunk. `dh` is the gradient w.r.t. the layer's
/// outputs (T × H). Accumulates parameter gradients into `grad` and returns
/// the gradient w.r.t. the layer input. Gradients do not flow into the
/// carried initial state.
pub(crate) fn layer_backward(
    layer: &LstmLayer,
    cache: &LayerCache,
    dh: ArrayView2<'_, f64>,
    grad: &mut LstmLayer,
    fault: Option<Gate>,
) -> Array2<f64> {
    let t_len = dh.nrows();
    let hd = layer.hidden();
    let mut dz = Array2::zeros((t_len, 4 * hd));
    let mut dh_next = Array1::<f64>::zeros(hd);
    let mut dc_next = Array1::<f64>::zeros(hd);
    for t in (0..t_len).rev() {
        let g = cache.gates.row(t);
        let mut row = dz.row_mut(t);
        for k in 0..hd {
            let (i, f, gg, o) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[[t, k]];
            let dht = dh[[t, k]] + dh_next[k];
            let dc = dht * o * (1.0 - tc * tc) + dc_next[k];
            row[k] = dc * gg * i * (1.0 - i);
            row[hd + k] = dc * cache.c_prev[[t, k]] * f * (1.0 - f);
            row[2 * hd + k] = dc * i * (1.0 - gg * gg);
            row[3 * hd + k] = dht * tc * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        if let Some(gate) = fault {
            // negative control for gradient checking
            let b = gate.block() * hd;
            row.slice_mut(s![b..b + hd]).mapv_inplace(|v| v * 0.5);
        }
        dh_next = layer.w_h.t().dot(&row);
    }
    grad.w_x += &dz.t().dot(&cache.x);
    grad.w_h += &dz.t().dot(&cache.h_prev);
    grad.b += &dz.sum_axis(Axis(0));
    dz.dot(&layer.w_x)
}
