//! Row-wise primitives and their reverse-mode derivatives.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

/// `x W + b` for row-major activations.
pub(crate) fn affine(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Backward of [`affine`]: accumulates `dW += xᵀ dy`, `db += Σ_rows dy` and
/// returns `dx = dy Wᵀ`.
pub(crate) fn affine_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    mut dw: ArrayViewMut2<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

/// Layer-norm cache: normalized inputs and per-row reciprocal std.
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: ArrayView2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + eps).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    gain: ArrayView1<f64>,
    dy: ArrayView2<f64>,
    mut dgain: ArrayViewMut1<f64>,
    mut dbias: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &gain;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xh) / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &xv| {
            *g = r * (*g - mean_g - xv * mean_gx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, evaluated as `x * sigmoid(2u)` since
/// `(1 + tanh u) / 2 = sigmoid(2u)`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax of a slice.
#[inline]
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Softmax backward for one row: `dx = p ⊙ (dp − ⟨dp, p⟩)`.
#[inline]
pub(crate) fn softmax_backward_row(p: &[f64], dp: &[f64], dx: &mut [f64]) {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((o, &pj), &gj) in dx.iter_mut().zip(p).zip(dp) {
        *o = pj * (gj - inner);
    }
}
