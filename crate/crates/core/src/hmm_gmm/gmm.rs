use ndarray::{Array1, Array2, ArrayView2, Axis};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    weights: Vec<f64>,
    means: Array2<f64>,
    vars: Array2<f64>,
    log_consts: Array1<f64>,
    inv_vars: Array2<f64>,
    scaled_means: Array2<f64>,
}

impl DiagGmm {
    /// `means` and `vars` are components × dims.
    ///
    /// # Panics
    /// On shape mismatch or non-positive variances.
    pub fn new(weights: Vec<f64>, means: Array2<f64>, vars: Array2<f64>) -> Self {
        assert_eq!(weights.len(), means.nrows());
        assert_eq!(means.dim(), vars.dim());
        assert!(vars.iter().all(|&v| v > 0.0), "variances must be positive");
        let mut g = Self {
            weights,
            means,
            vars,
            log_consts: Array1::zeros(0),
            inv_vars: Array2::zeros((0, 0)),
            scaled_means: Array2::zeros((0, 0)),
        };
        g.refresh();
        g
    }

    pub fn single(mean: Array1<f64>, var: Array1<f64>) -> Self {
        let d = mean.len();
        Self::new(
            vec![1.0],
            mean.into_shape_with_order((1, d)).expect("1×d"),
            var.into_shape_with_order((1, d)).expect("1×d"),
        )
    }

    fn refresh(&mut self) {
        self.inv_vars = self.vars.mapv(|v| 1.0 / v);
        self.scaled_means = &self.means * &self.inv_vars;
        self.log_consts = Array1::from_iter(self.weights.iter().enumerate().map(|(m, &w)| {
            let log_det: f64 = self.vars.row(m).iter().map(|v| v.ln()).sum();
            let quad: f64 = self.means.row(m).iter().zip(self.inv_vars.row(m)).map(|(u, iv)| u * u * iv).sum();
            w.ln() - 0.5 * (self.dims() as f64 * LN_2PI + log_det + quad)
        }));
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn vars(&self) -> &Array2<f64> {
        &self.vars
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dims(&self) -> usize {
        self.means.ncols()
    }

    /// Per-frame, per-component joint log-densities `ln w_m + ln N(x | m)`.
    pub fn component_log_densities(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let sq = x.mapv(|v| v * v);
        let mut out = sq.dot(&self.inv_vars.t()) * -0.5;
        out += &x.dot(&self.scaled_means.t());
        out += &self.log_consts;
        out
    }

    /// Log-likelihood of every row of `x`.
    pub fn log_likelihoods(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let dens = self.component_log_densities(x);
        dens.map_axis(Axis(1), |row| log_sum_exp(row.iter().copied()))
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("one row");
        self.log_likelihoods(x)[0]
    }

    /// One EM update on `x`. Returns the updated mixture and the data
    /// log-likelihood under `self` (before the update).
    pub(crate) fn em_step(&self, x: ArrayView2<'_, f64>, var_floor: &Array1<f64>) -> (Self, f64) {
        let mut dens = self.component_log_densities(x);
        let mut total = 0.0;
        for mut row in dens.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            total += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let gamma = dens;
        let n = x.nrows() as f64;
        let occ = gamma.sum_axis(Axis(0));
        let first = gamma.t().dot(&x);
        let second = gamma.t().dot(&x.mapv(|v| v * v));

        let mut weights = self.weights.clone();
        let mut means = self.means.clone();
        let mut vars = self.vars.clone();
        for m in 0..self.components() {
            weights[m] = occ[m] / n;
            if occ[m] < 1e-10 {
                continue;
            }
            for d in 0..self.dims() {
                let mu = first[[m, d]] / occ[m];
                means[[m, d]] = mu;
                vars[[m, d]] = (second[[m, d]] / occ[m] - mu * mu).max(var_floor[d]);
            }
        }
        (Self::new(weights, means, vars), total)
    }

    /// Splits the `count` heaviest components in two, moving the means by
    /// `±perturb·σ` and halving the weights.
    pub(crate) fn split(&self, count: usize, perturb: f64) -> Self {
        let mut order: Vec<usize> = (0..self.components()).collect();
        // stable: equal weights keep index order
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]));
        let mut weights = self.weights.clone();
        let mut means: Vec<Array1<f64>> = self.means.rows().into_iter().map(|r| r.to_owned()).collect();
        let mut vars: Vec<Array1<f64>> = self.vars.rows().into_iter().map(|r| r.to_owned()).collect();
        for &m in order.iter().take(count) {
            let sd = self.vars.row(m).mapv(f64::sqrt) * perturb;
            weights[m] /= 2.0;
            weights.push(weights[m]);
            means.push(&self.means.row(m) - &sd);
            means[m] = &self.means.row(m) + &sd;
            vars.push(self.vars.row(m).to_owned());
        }
        let stack = |rows: Vec<Array1<f64>>| {
            let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal dims")
        };
        Self::new(weights, stack(means), stack(vars))
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sample mean and (biased) variance of the rows of `x`.
pub(crate) fn moments(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let var = x.var_axis(Axis(0), 0.0);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_log_density(g: &DiagGmm, x: &[f64]) -> f64 {
        let p: f64 = (0..g.components())
            .map(|m| {
                let mut p = g.weights()[m];
                for (d, &xd) in x.iter().enumerate() {
                    let v = g.vars()[[m, d]];
                    let u = g.means()[[m, d]];
                    p *= (-(xd - u).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p
            })
            .sum();
        p.ln()
    }

    #[test]
    fn log_likelihood_matches_direct_density() {
        let g = DiagGmm::new(
            vec![0.3, 0.7],
            array![[0.0, 1.0], [2.0, -1.0]],
            array![[1.0, 0.5], [2.0, 0.25]],
        );
        for x in [[0.1, 0.2], [1.5, -0.5], [-2.0, 3.0]] {
            assert!((g.log_likelihood(&x) - brute_log_density(&g, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn split_preserves_total_weight() {
        let g = DiagGmm::single(array![0.0, 0.0], array![4.0, 1.0]);
        let s = g.split(1, 0.1).split(2, 0.1);
        assert_eq!(s.components(), 4);
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let g2 = g.split(1, 0.1);
        assert_eq!(g2.means().row(0).to_vec(), vec![0.2, 0.1]);
        assert_eq!(g2.means().row(1).to_vec(), vec![-0.2, -0.1]);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp([f64::NEG_INFINITY; 3].into_iter()), f64::NEG_INFINITY);
        assert!((log_sum_exp([0.0, f64::NEG_INFINITY].into_iter())).abs() < 1e-15);
        assert!((log_sum_exp([1000.0, 1000.0].into_iter()) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
