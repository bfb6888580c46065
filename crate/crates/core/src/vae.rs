//! The deep variational mixture model.
//!
//! An encoder maps `x` to a diagonal Gaussian `q(z|x) = N(μ_z(x), σ²_z(x))`, a
//! decoder maps `z` to the mean `x̂` of a unit-variance Gaussian observation
//! model, and the latent prior is a trainable Gaussian mixture
//! `p(z) = Σ_k π_k N(z | μ_k, σ²_k)`. The cluster posterior `q(y|x)` is the
//! closed-form responsibility of each mixture component for the latent code.
//!
//! Per-row objectives (all minimized):
//!
//! ```text
//! R = ½‖x − x̂‖²                                  reconstruction penalty
//! C = Σ_k y_k (log y_k − log π_k)                 categorical KL
//! Z = Σ_k y_k KL(N(μ_z, σ²_z) ‖ N(μ_k, σ²_k))     y-weighted latent KL
//!
//! unlabeled row:        R + C + Z
//! labeled anomaly row:  1/(R + ε) + C + 1/(Z + ε)
//! ```
//!
//! Gradients flow through the reparameterized sample `z = μ_z + σ_z ⊙ ε` and
//! through `y`, which itself depends on `z` and on the prior.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, GmmParams};
use crate::nn::{Activation, DenseNet, ForwardCache, NetGrads, HIDDEN_ACTIVATION};

/// Guard added to the reciprocal terms of the labeled-anomaly and
/// pretraining objectives.
pub const RECIPROCAL_EPS: f64 = 1e-6;

/// Layer widths of the encoder and decoder plus the number of clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub components: usize,
}

impl VaeShape {
    /// Encoder `[D, ⌊D/2⌋, ⌊D/4⌋, ⌊D/8⌋]` and its mirror image as decoder.
    /// Widths below one are raised to one so tiny inputs remain usable.
    pub fn for_input(input_dim: usize, components: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![(input_dim / 2).max(1), (input_dim / 4).max(1)],
            latent_dim: (input_dim / 8).max(1),
            components,
        }
    }

    /// The encoder's last layer emits `μ_z` and `log σ²_z` side by side.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        w
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden.iter().rev());
        w.push(self.input_dim);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        if self.components == 0 {
            return Err(Error::Config("number of clusters must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable parameters of `p(y) = Cat(π)` and `p(z|y) = N(μ_y, σ²_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    /// Unnormalized log-weights; `π = softmax(logits)`.
    pub logits: Array1<f64>,
    pub means: Array2<f64>,
    pub log_vars: Array2<f64>,
}

impl MixturePrior {
    /// Uniform weights, zero means and unit variances.
    pub fn standard(components: usize, latent_dim: usize) -> Self {
        Self {
            logits: Array1::zeros(components),
            means: Array2::zeros((components, latent_dim)),
            log_vars: Array2::zeros((components, latent_dim)),
        }
    }

    pub fn from_gmm(gmm: &GmmParams) -> Self {
        Self {
            logits: gmm.weights.mapv(f64::ln),
            means: gmm.means.clone(),
            log_vars: gmm.variances.mapv(f64::ln),
        }
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn log_weights(&self) -> Array1<f64> {
        let lse = log_sum_exp(self.logits.iter().copied());
        self.logits.mapv(|a| a - lse)
    }

    pub fn weights(&self) -> Array1<f64> {
        self.log_weights().mapv(f64::exp)
    }

    pub fn variances(&self) -> Array2<f64> {
        self.log_vars.mapv(f64::exp)
    }

    pub fn to_gmm(&self) -> GmmParams {
        GmmParams {
            weights: self.weights(),
            means: self.means.clone(),
            variances: self.variances(),
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.components();
        if self.means.nrows() != k || self.log_vars.dim() != self.means.dim() {
            return Err(Error::dim("prior component rows", k, self.means.nrows()));
        }
        let finite = self
            .logits
            .iter()
            .chain(&self.means)
            .chain(&self.log_vars)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("mixture prior has non-finite parameters".into()));
        }
        Ok(())
    }

    /// `log π_k + log N(z | μ_k, σ²_k)` for each component.
    fn log_joint_into(&self, log_pi: &Array1<f64>, z: ArrayView1<f64>, out: &mut [f64]) {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        for (k, slot) in out.iter_mut().enumerate() {
            let mut acc = log_pi[k];
            for l in 0..z.len() {
                let s = self.log_vars[[k, l]];
                let d = z[l] - self.means[[k, l]];
                acc -= half_log_2pi + 0.5 * s + 0.5 * d * d * (-s).exp();
            }
            *slot = acc;
        }
    }
}

/// Log of the cluster posterior `q(y|x) = p(y|z)` for every row of `z`.
pub fn log_cluster_posterior(z: ArrayView2<f64>, prior: &MixturePrior) -> Result<Array2<f64>> {
    prior.validate()?;
    if z.ncols() != prior.latent_dim() {
        return Err(Error::dim("latent dimension", prior.latent_dim(), z.ncols()));
    }
    let k = prior.components();
    let log_pi = prior.log_weights();
    let mut out = Array2::zeros((z.nrows(), k));
    let mut buf = vec![0.0; k];
    for (i, zi) in z.rows().into_iter().enumerate() {
        prior.log_joint_into(&log_pi, zi, &mut buf);
        let lse = log_sum_exp(buf.iter().copied());
        if !lse.is_finite() {
            return Err(Error::Numeric(format!(
                "cluster posterior underflowed for row {i}"
            )));
        }
        for (c, v) in buf.iter().enumerate() {
            out[[i, c]] = v - lse;
        }
    }
    Ok(out)
}

/// Cluster posterior `y` of a single latent code.
pub fn cluster_posterior(z: ArrayView1<f64>, prior: &MixturePrior) -> Result<Array1<f64>> {
    let z2 = z.insert_axis(Axis(0));
    Ok(log_cluster_posterior(z2, prior)?.row(0).mapv(f64::exp))
}

/// Encoder outputs for a single instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Array1<f64>,
    pub log_var: Array1<f64>,
    pub z: Array1<f64>,
    /// Cluster posterior; empty until computed.
    pub y: Array1<f64>,
}

/// Whether the latent code is sampled or set to the posterior mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Deterministic,
    Sample,
}

/// How a row enters the variational objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Unlabeled,
    LabeledAnomaly,
}

/// Deterministic read-out of the model for a batch.
#[derive(Debug, Clone)]
pub struct Inference {
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub z: Array2<f64>,
    pub log_y: Array2<f64>,
    pub y: Array2<f64>,
    pub xhat: Array2<f64>,
}

/// Everything a training-mode forward pass produces, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    enc_cache: ForwardCache,
    dec_cache: ForwardCache,
    pub x: Array2<f64>,
    pub mu: Array2<f64>,
    pub log_var: Array2<f64>,
    pub noise: Array2<f64>,
    pub z: Array2<f64>,
    pub log_y: Array2<f64>,
    pub y: Array2<f64>,
    pub xhat: Array2<f64>,
    log_pi: Array1<f64>,
    /// `KL(q(z|x) ‖ p(z|y=k))` for every row and component.
    pub component_kl: Array2<f64>,
    /// Per-row reconstruction penalty `R`.
    pub recon: Array1<f64>,
    /// Per-row categorical KL `C`.
    pub cat_kl: Array1<f64>,
    /// Per-row weighted latent KL `Z`.
    pub z_kl: Array1<f64>,
}

/// Gradients of a scalar loss w.r.t. the quantities computed in a
/// [`TrainForward`]. The `R`, `C`, `Z` entries are per-row multipliers of the
/// corresponding terms; the matrices are optional extra upstream gradients
/// (from the score estimator) on `x̂`, `y` and `z`.
#[derive(Debug, Clone)]
pub struct Upstream {
    pub recon: Array1<f64>,
    pub cat_kl: Array1<f64>,
    pub z_kl: Array1<f64>,
    pub xhat: Option<Array2<f64>>,
    pub y: Option<Array2<f64>>,
    pub z: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: NetGrads,
    pub decoder: NetGrads,
    pub prior_logits: Array1<f64>,
    pub prior_means: Array2<f64>,
    pub prior_log_vars: Array2<f64>,
}

impl VaeGrads {
    /// Gradient slices in the order of [`MixtureVae::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        out.extend(self.decoder.slices());
        out.push(self.prior_logits.as_slice().expect("standard layout"));
        out.push(self.prior_means.as_slice().expect("standard layout"));
        out.push(self.prior_log_vars.as_slice().expect("standard layout"));
        out
    }
}

/// Batch means of the variational objective and its terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboBreakdown {
    /// Mean per-row loss (negative ELBO, with the anomaly variant on
    /// labeled rows).
    pub loss: f64,
    pub recon: f64,
    pub cat_kl: f64,
    pub z_kl: f64,
    /// Reciprocal terms whose operand fell below [`RECIPROCAL_EPS`].
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PretrainBreakdown {
    pub loss: f64,
    pub unlabeled: f64,
    pub anomaly: f64,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureVae {
    shape: VaeShape,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub prior: MixturePrior,
}

impl MixtureVae {
    pub fn new<R: Rng + ?Sized>(shape: VaeShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let encoder = DenseNet::new(
            &shape.encoder_widths(),
            HIDDEN_ACTIVATION,
            Activation::Linear,
            rng,
        )?;
        let decoder = DenseNet::new(
            &shape.decoder_widths(),
            HIDDEN_ACTIVATION,
            Activation::Linear,
            rng,
        )?;
        let prior = MixturePrior::standard(shape.components, shape.latent_dim);
        Ok(Self {
            shape,
            encoder,
            decoder,
            prior,
        })
    }

    pub fn from_parts(encoder: DenseNet, decoder: DenseNet, prior: MixturePrior) -> Result<Self> {
        let enc_w = encoder.widths();
        let dec_w = decoder.widths();
        let d = enc_w[0];
        let two_l = *enc_w.last().expect("non-empty");
        if two_l % 2 != 0 {
            return Err(Error::Checkpoint(format!(
                "encoder output width {two_l} is not even"
            )));
        }
        let shape = VaeShape {
            input_dim: d,
            hidden: enc_w[1..enc_w.len() - 1].to_vec(),
            latent_dim: two_l / 2,
            components: prior.components(),
        };
        shape.validate()?;
        if dec_w != shape.decoder_widths() {
            return Err(Error::Checkpoint(format!(
                "decoder widths {dec_w:?} do not mirror encoder widths {enc_w:?}"
            )));
        }
        if prior.latent_dim() != shape.latent_dim {
            return Err(Error::dim("prior latent dimension", shape.latent_dim, prior.latent_dim()));
        }
        prior.validate()?;
        Ok(Self {
            shape,
            encoder,
            decoder,
            prior,
        })
    }

    pub fn shape(&self) -> &VaeShape {
        &self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.shape.latent_dim
    }

    pub fn components(&self) -> usize {
        self.shape.components
    }

    /// Parameter slices: encoder, decoder, prior logits, means, log-variances.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out.push(self.prior.logits.as_slice_mut().expect("standard layout"));
        out.push(self.prior.means.as_slice_mut().expect("standard layout"));
        out.push(self.prior.log_vars.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out.push(self.prior.logits.as_slice().expect("standard layout"));
        out.push(self.prior.means.as_slice().expect("standard layout"));
        out.push(self.prior.log_vars.as_slice().expect("standard layout"));
        out
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::dim("input dimension", self.input_dim(), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite input value".into()));
        }
        Ok(())
    }

    fn split_encoding(&self, enc: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let l = self.latent_dim();
        (
            enc.slice(s![.., ..l]).to_owned(),
            enc.slice(s![.., l..]).to_owned(),
        )
    }

    /// Encodes one instance. In [`LatentMode::Sample`] the latent code is
    /// `μ + σ ⊙ ε` with standard normal `ε`; otherwise it is `μ`.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        x: ArrayView1<f64>,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<LatentPosterior> {
        let x2 = x.insert_axis(Axis(0));
        self.check_batch(&x2)?;
        let enc = self.encoder.predict(x2)?;
        let (mu, log_var) = self.split_encoding(&enc);
        let mu = mu.row(0).to_owned();
        let log_var = log_var.row(0).to_owned();
        let z = match mode {
            LatentMode::Deterministic => mu.clone(),
            LatentMode::Sample => {
                let eps = standard_normal(1, self.latent_dim(), rng);
                reparameterize(&mu, &log_var, eps.row(0))
            }
        };
        Ok(LatentPosterior {
            mu,
            log_var,
            z,
            y: Array1::zeros(0),
        })
    }

    pub fn decode(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite latent value".into()));
        }
        Ok(self.decoder.predict(z.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Deterministic read-out used for scoring: `z = μ_z(x)`.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Inference> {
        self.check_batch(&x)?;
        let enc = self.encoder.predict(x)?;
        let (mu, log_var) = self.split_encoding(&enc);
        let log_y = log_cluster_posterior(mu.view(), &self.prior)?;
        let y = log_y.mapv(f64::exp);
        let xhat = self.decoder.predict(mu.view())?;
        Ok(Inference {
            z: mu.clone(),
            mu,
            log_var,
            log_y,
            y,
            xhat,
        })
    }

    /// Training-mode forward pass with externally supplied noise `ε`
    /// (`B × L`). Passing zeros gives the deterministic latent code while
    /// keeping the full objective.
    pub fn forward_train(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<TrainForward> {
        self.check_batch(&x)?;
        let (b, l, k) = (x.nrows(), self.latent_dim(), self.components());
        if noise.dim() != (b, l) {
            return Err(Error::dim("noise matrix size", b * l, noise.len()));
        }
        self.prior.validate()?;
        let (enc, enc_cache) = self.encoder.forward(x)?;
        let (mu, log_var) = self.split_encoding(&enc);
        let mut z = mu.clone();
        z.zip_mut_with(&(&log_var.mapv(|v| (0.5 * v).exp()) * &noise), |z, d| *z += d);
        let (xhat, dec_cache) = self.decoder.forward(z.view())?;
        let log_y = log_cluster_posterior(z.view(), &self.prior)?;
        let y = log_y.mapv(f64::exp);
        let log_pi = self.prior.log_weights();
        let inv_var = self.prior.log_vars.mapv(|s| (-s).exp());

        let mut component_kl = Array2::zeros((b, k));
        let mut recon = Array1::zeros(b);
        let mut cat_kl = Array1::zeros(b);
        let mut z_kl = Array1::zeros(b);
        for i in 0..b {
            recon[i] = 0.5
                * x.row(i)
                    .iter()
                    .zip(xhat.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            for c in 0..k {
                let mut kl = 0.0;
                for j in 0..l {
                    let s = self.prior.log_vars[[c, j]];
                    let d = mu[[i, j]] - self.prior.means[[c, j]];
                    kl += 0.5 * (s - log_var[[i, j]] + (log_var[[i, j]].exp() + d * d) * inv_var[[c, j]] - 1.0);
                }
                component_kl[[i, c]] = kl;
                cat_kl[i] += y[[i, c]] * (log_y[[i, c]] - log_pi[c]);
                z_kl[i] += y[[i, c]] * kl;
            }
        }
        Ok(TrainForward {
            enc_cache,
            dec_cache,
            x: x.to_owned(),
            mu,
            log_var,
            noise: noise.to_owned(),
            z,
            log_y,
            y,
            xhat,
            log_pi,
            component_kl,
            recon,
            cat_kl,
            z_kl,
        })
    }

    /// Backpropagates per-row term multipliers and optional feature gradients
    /// through the prior, decoder, reparameterization and encoder.
    pub fn backward_train(&self, fwd: &TrainForward, up: &Upstream) -> Result<VaeGrads> {
        let (b, k) = fwd.y.dim();
        let l = self.latent_dim();
        for (name, v) in [("recon", &up.recon), ("cat_kl", &up.cat_kl), ("z_kl", &up.z_kl)] {
            if v.len() != b {
                return Err(Error::Usage(format!(
                    "upstream {name} has {} rows, batch has {b}",
                    v.len()
                )));
            }
        }
        let prior = &self.prior;
        let inv_var = prior.log_vars.mapv(|s| (-s).exp());

        // x̂
        let mut d_xhat = &fwd.xhat - &fwd.x;
        for (mut row, &a) in d_xhat.rows_mut().into_iter().zip(&up.recon) {
            row *= a;
        }
        if let Some(extra) = &up.xhat {
            d_xhat += extra;
        }
        let (dec_grads, mut d_z) = self.decoder.backward(&fwd.dec_cache, d_xhat.view())?;
        if let Some(extra) = &up.z {
            d_z += extra;
        }

        let mut d_mu = Array2::<f64>::zeros((b, l));
        let mut d_lv = Array2::<f64>::zeros((b, l));
        let mut d_log_pi = Array1::<f64>::zeros(k);
        let mut d_means = Array2::<f64>::zeros((k, l));
        let mut d_log_vars = Array2::<f64>::zeros((k, l));
        let mut g_y = vec![0.0; k];

        for i in 0..b {
            let (ac, az) = (up.cat_kl[i], up.z_kl[i]);
            // Gradient w.r.t. y treating y as a free vector. The constant part of
            // d(y log y)/dy cancels in the softmax projection and is omitted.
            for c in 0..k {
                g_y[c] = ac * (fwd.log_y[[i, c]] - fwd.log_pi[c]) + az * fwd.component_kl[[i, c]];
                if let Some(extra) = &up.y {
                    g_y[c] += extra[[i, c]];
                }
            }
            let mean_g: f64 = (0..k).map(|c| fwd.y[[i, c]] * g_y[c]).sum();
            for c in 0..k {
                let y = fwd.y[[i, c]];
                // through the softmax over log-joints
                let delta = y * (g_y[c] - mean_g);
                // C with y held fixed
                d_log_pi[c] += delta - ac * y;
                for j in 0..l {
                    let iv = inv_var[[c, j]];
                    let dz = fwd.z[[i, j]] - prior.means[[c, j]];
                    let dm = fwd.mu[[i, j]] - prior.means[[c, j]];
                    let var_q = fwd.log_var[[i, j]].exp();
                    // log-joint w.r.t. z, μ_k, log σ²_k
                    d_z[[i, j]] -= delta * dz * iv;
                    d_means[[c, j]] += delta * dz * iv;
                    d_log_vars[[c, j]] += delta * 0.5 * (dz * dz * iv - 1.0);
                    // Z with y held fixed
                    let w = az * y;
                    d_mu[[i, j]] += w * dm * iv;
                    d_lv[[i, j]] += w * 0.5 * (var_q * iv - 1.0);
                    d_means[[c, j]] -= w * dm * iv;
                    d_log_vars[[c, j]] += w * 0.5 * (1.0 - (var_q + dm * dm) * iv);
                }
            }
            for j in 0..l {
                d_mu[[i, j]] += d_z[[i, j]];
                d_lv[[i, j]] +=
                    d_z[[i, j]] * 0.5 * (0.5 * fwd.log_var[[i, j]]).exp() * fwd.noise[[i, j]];
            }
        }

        let d_enc = concatenate![Axis(1), d_mu, d_lv];
        let (enc_grads, _) = self.encoder.backward(&fwd.enc_cache, d_enc.view())?;
        let pi = fwd.log_pi.mapv(f64::exp);
        let total = d_log_pi.sum();
        let d_logits = &d_log_pi - &(pi * total);
        Ok(VaeGrads {
            encoder: enc_grads,
            decoder: dec_grads,
            prior_logits: d_logits,
            prior_means: d_means,
            prior_log_vars: d_log_vars,
        })
    }

    /// Mean variational loss over a batch: the negative ELBO on unlabeled
    /// rows and the inverted-incentive objective on labeled anomalies.
    pub fn elbo_loss(
        &self,
        x: ArrayView2<f64>,
        kinds: &[RowKind],
        noise: ArrayView2<f64>,
    ) -> Result<(ElboBreakdown, VaeGrads)> {
        let fwd = self.forward_train(x, noise)?;
        let (breakdown, up) = elbo_upstream(&fwd, kinds, 1.0)?;
        let grads = self.backward_train(&fwd, &up)?;
        Ok((breakdown, grads))
    }

    /// Negative ELBO of one unlabeled instance.
    pub fn elbo_unlabeled(
        &self,
        x: ArrayView1<f64>,
        noise: ArrayView1<f64>,
    ) -> Result<(ElboBreakdown, VaeGrads)> {
        self.elbo_loss(
            x.insert_axis(Axis(0)),
            &[RowKind::Unlabeled],
            noise.insert_axis(Axis(0)),
        )
    }

    /// Inverted-incentive objective of one labeled anomaly.
    pub fn elbo_labeled_anomaly(
        &self,
        x: ArrayView1<f64>,
        noise: ArrayView1<f64>,
    ) -> Result<(ElboBreakdown, VaeGrads)> {
        self.elbo_loss(
            x.insert_axis(Axis(0)),
            &[RowKind::LabeledAnomaly],
            noise.insert_axis(Axis(0)),
        )
    }

    /// Plain autoencoder objective used before the prior exists: `z = μ_z(x)`,
    /// mean squared residual norm over unlabeled rows plus mean reciprocal
    /// squared residual norm over labeled anomalies. The anomaly term is
    /// dropped when the batch holds none.
    pub fn pretrain_loss(
        &self,
        x: ArrayView2<f64>,
        kinds: &[RowKind],
    ) -> Result<(PretrainBreakdown, VaeGrads)> {
        self.check_batch(&x)?;
        if kinds.len() != x.nrows() {
            return Err(Error::dim("row kinds", x.nrows(), kinds.len()));
        }
        let l = self.latent_dim();
        let (enc, enc_cache) = self.encoder.forward(x)?;
        let mu = enc.slice(s![.., ..l]).to_owned();
        let (xhat, dec_cache) = self.decoder.forward(mu.view())?;
        let n = kinds.iter().filter(|k| **k == RowKind::Unlabeled).count();
        let m = kinds.len() - n;
        if m == 0 {
            log::trace!("pretraining batch without labeled anomalies");
        }
        let mut out = PretrainBreakdown::default();
        let mut d_xhat = &xhat - &x;
        for (i, kind) in kinds.iter().enumerate() {
            let r: f64 = d_xhat.row(i).iter().map(|v| v * v).sum();
            let scale = match kind {
                RowKind::Unlabeled => {
                    out.unlabeled += r / n as f64;
                    2.0 / n as f64
                }
                RowKind::LabeledAnomaly => {
                    if r < RECIPROCAL_EPS {
                        out.clamped += 1;
                    }
                    let den = r + RECIPROCAL_EPS;
                    out.anomaly += 1.0 / den / m as f64;
                    -2.0 / (den * den) / m as f64
                }
            };
            d_xhat.row_mut(i).mapv_inplace(|v| v * scale);
        }
        out.loss = out.unlabeled + out.anomaly;
        if !out.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite pretraining loss (unlabeled {}, anomaly {})",
                out.unlabeled, out.anomaly
            )));
        }
        let (dec_grads, d_mu) = self.decoder.backward(&dec_cache, d_xhat.view())?;
        let d_enc = concatenate![Axis(1), d_mu, Array2::zeros((x.nrows(), l))];
        let (enc_grads, _) = self.encoder.backward(&enc_cache, d_enc.view())?;
        Ok((
            out,
            VaeGrads {
                encoder: enc_grads,
                decoder: dec_grads,
                prior_logits: Array1::zeros(self.components()),
                prior_means: Array2::zeros(self.prior.means.raw_dim()),
                prior_log_vars: Array2::zeros(self.prior.log_vars.raw_dim()),
            },
        ))
    }

    /// Latent means of all rows with the variance head ignored.
    pub fn latent_means(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        let enc = self.encoder.predict(x)?;
        Ok(enc.slice(s![.., ..self.latent_dim()]).to_owned())
    }
}

/// Per-row loss values and upstream multipliers for the variational
/// objective, averaged over the batch and multiplied by `weight`.
pub fn elbo_upstream(
    fwd: &TrainForward,
    kinds: &[RowKind],
    weight: f64,
) -> Result<(ElboBreakdown, Upstream)> {
    let b = fwd.recon.len();
    if kinds.len() != b {
        return Err(Error::dim("row kinds", b, kinds.len()));
    }
    let inv_b = 1.0 / b as f64;
    let mut out = ElboBreakdown::default();
    let mut up = Upstream {
        recon: Array1::zeros(b),
        cat_kl: Array1::from_elem(b, weight * inv_b),
        z_kl: Array1::zeros(b),
        xhat: None,
        y: None,
        z: None,
    };
    for (i, kind) in kinds.iter().enumerate() {
        let (r, c, z) = (fwd.recon[i], fwd.cat_kl[i], fwd.z_kl[i]);
        let row_loss = match kind {
            RowKind::Unlabeled => {
                up.recon[i] = weight * inv_b;
                up.z_kl[i] = weight * inv_b;
                r + c + z
            }
            RowKind::LabeledAnomaly => {
                out.clamped += usize::from(r < RECIPROCAL_EPS) + usize::from(z < RECIPROCAL_EPS);
                let (dr, dz) = (r + RECIPROCAL_EPS, z + RECIPROCAL_EPS);
                up.recon[i] = -weight * inv_b / (dr * dr);
                up.z_kl[i] = -weight * inv_b / (dz * dz);
                1.0 / dr + c + 1.0 / dz
            }
        };
        if !row_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite variational loss on row {i}: recon {r}, cat-KL {c}, z-KL {z}"
            )));
        }
        out.loss += row_loss * inv_b;
        out.recon += r * inv_b;
        out.cat_kl += c * inv_b;
        out.z_kl += z * inv_b;
    }
    Ok((out, up))
}

fn reparameterize(mu: &Array1<f64>, log_var: &Array1<f64>, eps: ArrayView1<f64>) -> Array1<f64> {
    let mut z = mu.clone();
    for j in 0..z.len() {
        z[j] += (0.5 * log_var[j]).exp() * eps[j];
    }
    z
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}
