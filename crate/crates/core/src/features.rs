//! The five per-instance features handed to the score estimator:
//! the cluster posterior `y`, the latent code `z`, the cluster entropy
//! `f_e = −Σ y log y`, the relative reconstruction error
//! `f_r = ‖x − x̂‖² / ‖x‖²` and the cosine similarity
//! `f_c = xᵀx̂ / (‖x‖ ‖x̂‖)`, concatenated as `[y; z; f_e; f_r; f_c]`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Smallest squared norm used as a denominator.
pub const NORM_SQ_FLOOR: f64 = 1e-12;

/// Number of scalar features appended after `y` and `z`.
pub const SCALAR_FEATURES: usize = 3;

pub fn feature_dim(components: usize, latent_dim: usize) -> usize {
    components + latent_dim + SCALAR_FEATURES
}

/// Shannon entropy of `y` in nats, with `0 · log 0 = 0`.
pub fn cluster_entropy(y: ArrayView1<f64>) -> f64 {
    y.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

fn sq_norm(v: ArrayView1<f64>) -> f64 {
    dot(v, v)
}

/// Sequential sum, so that `dot(x, ±x)` is exactly `±sq_norm(x)`.
fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn check_pair(x: &ArrayView1<f64>, xhat: &ArrayView1<f64>) -> Result<()> {
    if x.len() != xhat.len() {
        return Err(Error::dim("reconstruction width", x.len(), xhat.len()));
    }
    Ok(())
}

/// `‖x − x̂‖² / ‖x‖²` with the denominator floored at [`NORM_SQ_FLOOR`].
pub fn relative_recon_error(x: ArrayView1<f64>, xhat: ArrayView1<f64>) -> Result<f64> {
    check_pair(&x, &xhat)?;
    let resid: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(resid / sq_norm(x).max(NORM_SQ_FLOOR))
}

/// Cosine of the angle between `x` and `x̂`, clamped to `[−1, 1]`; norms are
/// floored at `√NORM_SQ_FLOOR`.
pub fn cosine_similarity(x: ArrayView1<f64>, xhat: ArrayView1<f64>) -> Result<f64> {
    check_pair(&x, &xhat)?;
    // One square root of the product: exact when x̂ = ±x.
    let norms = (sq_norm(x).max(NORM_SQ_FLOOR) * sq_norm(xhat).max(NORM_SQ_FLOOR)).sqrt();
    Ok((dot(x, xhat) / norms).clamp(-1.0, 1.0))
}

/// Concatenated feature vector `[y; z; f_e; f_r; f_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Array1<f64>,
    components: usize,
    latent_dim: usize,
}

impl FeatureVector {
    pub fn from_values(values: Array1<f64>, components: usize, latent_dim: usize) -> Result<Self> {
        let f = feature_dim(components, latent_dim);
        if values.len() != f {
            return Err(Error::dim("feature vector length", f, values.len()));
        }
        Ok(Self {
            values,
            components,
            latent_dim,
        })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.values.slice(s![..self.components])
    }

    pub fn z(&self) -> ArrayView1<'_, f64> {
        self.values
            .slice(s![self.components..self.components + self.latent_dim])
    }

    pub fn entropy(&self) -> f64 {
        self.values[self.components + self.latent_dim]
    }

    pub fn recon_error(&self) -> f64 {
        self.values[self.components + self.latent_dim + 1]
    }

    pub fn cosine(&self) -> f64 {
        self.values[self.components + self.latent_dim + 2]
    }
}

/// Builds the feature vector of one instance.
pub fn assemble(
    y: ArrayView1<f64>,
    z: ArrayView1<f64>,
    x: ArrayView1<f64>,
    xhat: ArrayView1<f64>,
) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(feature_dim(y.len(), z.len()));
    values.extend(y.iter().copied());
    values.extend(z.iter().copied());
    values.push(cluster_entropy(y));
    values.push(relative_recon_error(x, xhat)?);
    values.push(cosine_similarity(x, xhat)?);
    FeatureVector::from_values(Array1::from(values), y.len(), z.len())
}

/// Counts of rows whose norms hit the denominator floor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FeatureDiagnostics {
    pub small_input_norm: usize,
    pub small_recon_norm: usize,
}

/// Feature matrix for a batch. `log_y` must be the log of `y`; it is used
/// for the entropy so that underflowed probabilities stay exact.
pub fn feature_matrix(
    y: ArrayView2<f64>,
    log_y: ArrayView2<f64>,
    z: ArrayView2<f64>,
    x: ArrayView2<f64>,
    xhat: ArrayView2<f64>,
) -> Result<(Array2<f64>, FeatureDiagnostics)> {
    let b = y.nrows();
    for (ctx, n) in [("z rows", z.nrows()), ("x rows", x.nrows()), ("x̂ rows", xhat.nrows())] {
        if n != b {
            return Err(Error::dim(ctx, b, n));
        }
    }
    if x.ncols() != xhat.ncols() {
        return Err(Error::dim("reconstruction width", x.ncols(), xhat.ncols()));
    }
    let (k, l) = (y.ncols(), z.ncols());
    let mut out = Array2::zeros((b, feature_dim(k, l)));
    let mut diag = FeatureDiagnostics::default();
    for i in 0..b {
        let mut row = out.row_mut(i);
        row.slice_mut(s![..k]).assign(&y.row(i));
        row.slice_mut(s![k..k + l]).assign(&z.row(i));
        row[k + l] = y
            .row(i)
            .iter()
            .zip(log_y.row(i))
            .map(|(&p, &lp)| if p > 0.0 { -p * lp } else { 0.0 })
            .sum::<f64>()
            .max(0.0);
        let xi = x.row(i);
        let hi = xhat.row(i);
        let nx2 = sq_norm(xi);
        let nh2 = sq_norm(hi);
        diag.small_input_norm += usize::from(nx2 < NORM_SQ_FLOOR);
        diag.small_recon_norm += usize::from(nh2 < NORM_SQ_FLOOR);
        row[k + l + 1] = relative_recon_error(xi, hi)?;
        row[k + l + 2] = cosine_similarity(xi, hi)?;
    }
    Ok((out, diag))
}

/// Gradients of a scalar loss w.r.t. `y`, `z` and `x̂`, given its gradient
/// w.r.t. the feature matrix.
pub fn feature_backward(
    d_features: ArrayView2<f64>,
    log_y: ArrayView2<f64>,
    x: ArrayView2<f64>,
    xhat: ArrayView2<f64>,
    latent_dim: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (b, k) = log_y.dim();
    let l = latent_dim;
    let mut d_y = d_features.slice(s![.., ..k]).to_owned();
    let d_z = d_features.slice(s![.., k..k + l]).to_owned();
    let mut d_xhat = Array2::zeros(xhat.raw_dim());
    for i in 0..b {
        let (ge, gr, gc) = (
            d_features[[i, k + l]],
            d_features[[i, k + l + 1]],
            d_features[[i, k + l + 2]],
        );
        for c in 0..k {
            if log_y[[i, c]].is_finite() {
                d_y[[i, c]] -= ge * (log_y[[i, c]] + 1.0);
            }
        }
        let xi = x.row(i);
        let hi = xhat.row(i);
        let nx2 = sq_norm(xi);
        let nh2 = sq_norm(hi);
        let den_r = nx2.max(NORM_SQ_FLOOR);
        let nx = nx2.max(NORM_SQ_FLOOR).sqrt();
        let nh = nh2.max(NORM_SQ_FLOOR).sqrt();
        let dot = dot(xi, hi);
        let mut row = d_xhat.row_mut(i);
        for j in 0..xi.len() {
            let mut g = -2.0 * gr * (xi[j] - hi[j]) / den_r;
            g += gc * xi[j] / (nx * nh);
            if nh2 >= NORM_SQ_FLOOR {
                g -= gc * dot * hi[j] / (nx * nh * nh2);
            }
            row[j] = g;
        }
    }
    (d_y, d_z, d_xhat)
}
