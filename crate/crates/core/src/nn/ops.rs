//! Elementwise and row-wise primitives with their derivatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;
const GELU_SLOPE: f64 = 1.7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(1.7 x)`.
pub fn gelu_approx(x: f64) -> f64 {
    x * sigmoid(GELU_SLOPE * x)
}

pub fn gelu_approx_grad(x: f64) -> f64 {
    let s = sigmoid(GELU_SLOPE * x);
    s + GELU_SLOPE * x * s * (1.0 - s)
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `x * softmax(x)` over the whole vector.
pub fn solu(v: &[f64]) -> Vec<f64> {
    softmax(v).iter().zip(v).map(|(s, x)| x * s).collect()
}

/// Vector-Jacobian product of [`solu`] for upstream gradient `g`.
pub fn solu_vjp(v: &[f64], g: &[f64]) -> Vec<f64> {
    let s = softmax(v);
    let weighted: f64 = g.iter().zip(v).zip(&s).map(|((g, x), s)| g * x * s).sum();
    s.iter()
        .zip(v)
        .zip(g)
        .map(|((s, x), g)| g * s + s * (g * x - weighted))
        .collect()
}

/// `-log softmax(logits)[target]`, computed with log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    g
}

/// Saved quantities for the LayerNorm backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise LayerNorm with biased variance and epsilon 1e-5.
pub fn layer_norm(
    x: ArrayView2<'_, f64>,
    scale: ArrayView1<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| v * i);
    }
    let mut y = normalized.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(&scale).and(&bias).for_each(|v, &s, &b| *v = *v * s + b);
    });
    (y, LnCache { normalized, inv_std })
}

/// Returns `(dx, dscale, dbias)`.
pub fn layer_norm_backward(
    cache: &LnCache,
    scale: ArrayView1<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dscale = (&dy * &cache.normalized).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dy.rows())
        .zip(cache.normalized.rows())
        .zip(&cache.inv_std)
    {
        let dxhat: Array1<f64> = &g * &scale;
        let sum = dxhat.sum();
        let dot = dxhat.dot(&xh);
        Zip::from(&mut out)
            .and(&dxhat)
            .and(&xh)
            .for_each(|o, &dh, &x| *o = inv / d * (d * dh - sum - x * dot));
    }
    (dx, dscale, dbias)
}
