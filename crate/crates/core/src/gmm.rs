//! Expectation-maximization for diagonal-covariance Gaussian mixtures.
//!
//! Used once per training run to initialize the mixture prior from the latent
//! means of the pretrained autoencoder. All densities are handled in the log
//! domain, so responsibilities stay well defined for far-away points.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    /// Mixing weights, a point on the K-simplex.
    pub weights: Array1<f64>,
    /// Component means, `K × L`.
    pub means: Array2<f64>,
    /// Diagonal variances, `K × L`.
    pub variances: Array2<f64>,
}

impl GmmParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn validate(&self) -> Result<()> {
        let k = self.components();
        if self.means.nrows() != k || self.variances.dim() != self.means.dim() {
            return Err(Error::dim("mixture parameter rows", k, self.means.nrows()));
        }
        for (c, row) in self.variances.rows().into_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Numeric(format!(
                    "component {c} has a non-positive or non-finite variance"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Convergence threshold on the change of the average log-likelihood.
    pub tol: f64,
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-5,
            variance_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    /// Average log-likelihood of the data under `params`.
    pub log_likelihood: f64,
    /// Average log-likelihood at every E-step, starting from the seeding.
    pub trace: Vec<f64>,
    /// Responsibilities under `params`, `N × K`.
    pub responsibilities: Array2<f64>,
    pub converged: bool,
    /// Number of times an empty component was reseeded from a data point.
    pub reseeded: usize,
}

/// Log of the joint density `log π_k + log N(x | μ_k, diag σ²_k)` for every
/// row and component.
pub fn log_joint(params: &GmmParams, latents: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.validate()?;
    if latents.ncols() != params.dim() {
        return Err(Error::dim("latent dimension", params.dim(), latents.ncols()));
    }
    let k = params.components();
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut out = Array2::zeros((latents.nrows(), k));
    for c in 0..k {
        let mean = params.means.row(c);
        let var = params.variances.row(c);
        let norm: f64 = params.weights[c].ln()
            - var.iter().map(|v| 0.5 * v.ln() + half_log_2pi).sum::<f64>();
        for (i, x) in latents.rows().into_iter().enumerate() {
            let quad: f64 = x
                .iter()
                .zip(mean)
                .zip(var)
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum();
            out[[i, c]] = norm - 0.5 * quad;
        }
    }
    Ok(out)
}

pub(crate) fn log_sum_exp(row: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-joint rows in place into responsibilities and returns the
/// average log-likelihood.
fn normalize(log_joint: &mut Array2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, mut row) in log_joint.rows_mut().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        if !lse.is_finite() {
            let c = row.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::Numeric(format!(
                "non-finite density for row {i} (component {c})"
            )));
        }
        row.mapv_inplace(|v| (v - lse).exp());
        total += lse;
    }
    Ok(total / log_joint.nrows().max(1) as f64)
}

/// Posterior probability of each component for each row.
pub fn responsibilities(params: &GmmParams, latents: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut lj = log_joint(params, latents)?;
    normalize(&mut lj)?;
    Ok(lj)
}

/// Average log-likelihood of `latents` under `params`.
pub fn log_likelihood(params: &GmmParams, latents: ArrayView2<f64>) -> Result<f64> {
    let mut lj = log_joint(params, latents)?;
    normalize(&mut lj)
}

fn column_variance(latents: ArrayView2<f64>, floor: f64) -> Array1<f64> {
    let mean = latents.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::<f64>::zeros(latents.ncols());
    for row in latents.rows() {
        var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
    }
    var.mapv(|v| (v / latents.nrows() as f64).max(floor))
}

/// k-means++ seeding: first mean uniform, later ones proportional to the
/// squared distance to the closest chosen mean.
fn seed_means<R: Rng + ?Sized>(latents: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = latents.nrows();
    let mut means = Array2::zeros((k, latents.ncols()));
    means.row_mut(0).assign(&latents.row(rng.random_range(0..n)));
    let mut closest = vec![f64::INFINITY; n];
    for c in 1..k {
        let prev = means.row(c - 1).to_owned();
        for (i, x) in latents.rows().into_iter().enumerate() {
            let d: f64 = x.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum();
            closest[i] = closest[i].min(d);
        }
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut target = rng.random_range(0.0..total);
            closest
                .iter()
                .position(|&d| {
                    target -= d;
                    target < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        means.row_mut(c).assign(&latents.row(pick));
    }
    means
}

/// Fits a `k`-component diagonal Gaussian mixture to the rows of `latents`.
pub fn em_fit<R: Rng + ?Sized>(
    latents: ArrayView2<f64>,
    k: usize,
    config: &EmConfig,
    rng: &mut R,
) -> Result<EmFit> {
    let (n, dim) = latents.dim();
    if k == 0 {
        return Err(Error::Config("number of components must be positive".into()));
    }
    if dim == 0 {
        return Err(Error::Config("latent dimension must be positive".into()));
    }
    if n < k {
        return Err(Error::Config(format!(
            "need at least {k} rows to fit {k} components, got {n}"
        )));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite latent value".into()));
    }

    let global_var = column_variance(latents, config.variance_floor);
    let mut params = GmmParams {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: seed_means(latents, k, rng),
        variances: Array2::from_shape_fn((k, dim), |(_, j)| global_var[j]),
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut reseeded = 0;
    let mut converged = false;
    loop {
        let mut resp = log_joint(&params, latents)?;
        let ll = normalize(&mut resp)?;
        if let Some(&prev) = trace.last() {
            if (ll - prev).abs() < config.tol {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || trace.len() > config.max_iters {
            return Ok(EmFit {
                params,
                log_likelihood: ll,
                trace,
                responsibilities: resp,
                converged,
                reseeded,
            });
        }

        // M-step
        let mass = resp.sum_axis(Axis(0));
        let mut weights = mass.mapv(|m| m / n as f64);
        let mut means = Array2::zeros((k, dim));
        let mut variances = Array2::zeros((k, dim));
        for c in 0..k {
            if mass[c] < 1e-8 {
                let pick = rng.random_range(0..n);
                log::warn!("EM component {c} emptied; reseeding from row {pick}");
                reseeded += 1;
                means.row_mut(c).assign(&latents.row(pick));
                variances.row_mut(c).assign(&global_var);
                weights[c] = 1.0 / n as f64;
                continue;
            }
            let r = resp.column(c);
            let mut mean = Array1::zeros(dim);
            for (x, &w) in latents.rows().into_iter().zip(r) {
                mean.scaled_add(w, &x);
            }
            mean /= mass[c];
            let mut var = Array1::<f64>::zeros(dim);
            for (x, &w) in latents.rows().into_iter().zip(r) {
                var.zip_mut_with(&(&x - &mean), |v, d| *v += w * d * d);
            }
            var.mapv_inplace(|v| (v / mass[c]).max(config.variance_floor));
            means.row_mut(c).assign(&mean);
            variances.row_mut(c).assign(&var);
        }
        weights /= weights.sum();
        params = GmmParams {
            weights,
            means,
            variances,
        };
    }
}
