//! Independent reference implementations. None of them call the code under
//! test except to read parameter values.

use ndarray::{array, Array1, Array2, Axis};
use stylebook_core::attention::MultiHeadAttention;
use stylebook_core::diffusion::DiffusionSchedule;
use stylebook_core::nn::Linear;
use stylebook_core::ParamStore;

fn project(store: &ParamStore<f64>, l: &Linear, x: &Array2<f64>) -> Vec<Vec<f64>> {
    let w = store.value(l.weight());
    let b = store.value(l.bias());
    (0..x.nrows())
        .map(|i| {
            (0..l.out_dim)
                .map(|o| {
                    let mut acc = b[[0, o]];
                    for k in 0..l.in_dim {
                        acc += x[[i, k]] * w[[k, o]];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Multi-head attention with explicit loops per head, query and key.
pub fn reference_mha(
    store: &ParamStore<f64>,
    layer: &MultiHeadAttention,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Array2<f64> {
    let qp = project(store, layer.query_proj(), q);
    let kp = project(store, layer.key_proj(), k);
    let vp = project(store, layer.value_proj(), v);
    let hd = layer.head_dim();
    let mut concat = Array2::zeros((q.nrows(), layer.model_dim));
    for h in 0..layer.num_heads {
        for i in 0..q.nrows() {
            let scores: Vec<f64> = (0..k.nrows())
                .map(|j| (0..hd).map(|d| qp[i][h * hd + d] * kp[j][h * hd + d]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..hd {
                concat[[i, h * hd + d]] = (0..k.nrows()).map(|j| e[j] / z * vp[j][h * hd + d]).sum();
            }
        }
    }
    let out = project(store, layer.output_proj(), &concat);
    Array2::from_shape_fn((q.nrows(), layer.out_dim), |(i, o)| out[i][o])
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// kNN by sorting the whole bank on (distance, index) for every source frame.
pub fn full_sort_knn(bank: &Array2<f32>, source: &Array2<f32>, k: usize) -> Array2<f32> {
    let mut out = Array2::zeros(source.dim());
    for (i, src) in source.rows().into_iter().enumerate() {
        let s = src.to_vec();
        let mut order: Vec<(f64, usize)> =
            bank.rows().into_iter().enumerate().map(|(j, r)| (cosine_distance(&s, &r.to_vec()), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = order[..k].iter().map(|p| p.1).collect();
        chosen.sort_unstable();
        for c in 0..bank.ncols() {
            let sum: f64 = chosen.iter().map(|&j| bank[[j, c]] as f64).sum();
            out[[i, c]] = (sum / k as f64) as f32;
        }
    }
    out
}

/// 2-D Gaussian data `N(m, Σ)` with prior mean `μ`. Under the forward
/// process the marginal stays Gaussian with mean `μ + a(m − μ)` and
/// covariance `a²Σ + vI`, so the score is known exactly.
pub struct GaussianOracle {
    pub m: Array1<f64>,
    pub cov: Array2<f64>,
    pub mu: Array1<f64>,
    pub sched: DiffusionSchedule,
}

impl GaussianOracle {
    pub fn standard() -> Self {
        GaussianOracle {
            m: array![1.0, -0.5],
            cov: array![[0.5, 0.2], [0.2, 0.3]],
            mu: array![0.2, 0.1],
            sched: DiffusionSchedule::default(),
        }
    }

    pub fn score(&self, x: &Array2<f64>, t: f64) -> Array2<f64> {
        let a = self.sched.decay(t);
        let v = self.sched.variance(t);
        let mean = &self.mu + &((&self.m - &self.mu) * a);
        let c = &self.cov * (a * a) + &(Array2::<f64>::eye(2) * v);
        let det = c[[0, 0]] * c[[1, 1]] - c[[0, 1]] * c[[1, 0]];
        let inv = array![[c[[1, 1]], -c[[0, 1]]], [-c[[1, 0]], c[[0, 0]]]] / det;
        -(x - &mean).dot(&inv.t())
    }
}

pub fn covariance(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let c = x - &mean;
    c.t().dot(&c) / (x.nrows() as f64 - 1.0)
}

/// `‖a − b‖ / ‖b‖` over all elements.
pub fn relative_error<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
