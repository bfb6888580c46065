//! The full detector: mixture VAE, feature extraction and score estimator,
//! with the joint objective `−ELBO + λ · CE` differentiated end to end.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimator::{ce_loss, ScoreEstimator};
use crate::features::{feature_backward, feature_dim, feature_matrix, FeatureDiagnostics};
use crate::nn::{sigmoid, NetGrads};
use crate::vae::{elbo_upstream, ElboBreakdown, MixtureVae, RowKind, VaeGrads, VaeShape};

#[derive(Debug, Clone, PartialEq)]
pub struct Wvad {
    pub vae: MixtureVae,
    pub estimator: ScoreEstimator,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JointBreakdown {
    pub elbo: ElboBreakdown,
    pub ce: f64,
    pub lambda: f64,
    /// `elbo.loss + lambda * ce`
    pub loss: f64,
    pub features: FeatureDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGrads {
    pub vae: VaeGrads,
    pub estimator: NetGrads,
}

impl JointGrads {
    /// Slices in the order of [`Wvad::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.vae.slices();
        out.extend(self.estimator.slices());
        out
    }
}

/// Deterministic per-row outputs of a trained model.
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    pub features: Array2<f64>,
    pub scores: Array1<f64>,
    pub latents: Array2<f64>,
}

impl Wvad {
    pub fn new<R: Rng + ?Sized>(shape: VaeShape, rng: &mut R) -> Result<Self> {
        let f = feature_dim(shape.components, shape.latent_dim);
        let vae = MixtureVae::new(shape, rng)?;
        let estimator = ScoreEstimator::new(f, rng)?;
        Ok(Self { vae, estimator })
    }

    pub fn from_parts(vae: MixtureVae, estimator: ScoreEstimator) -> Result<Self> {
        let f = feature_dim(vae.components(), vae.latent_dim());
        if estimator.feature_dim() != f {
            return Err(Error::dim("estimator input width", f, estimator.feature_dim()));
        }
        Ok(Self { vae, estimator })
    }

    pub fn feature_dim(&self) -> usize {
        self.estimator.feature_dim()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.vae.params_mut();
        out.extend(self.estimator.net.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.vae.params();
        out.extend(self.estimator.net.params());
        out
    }

    /// Joint loss over a batch and its gradient w.r.t. every parameter.
    ///
    /// Unlabeled rows contribute the negative ELBO and a CE target of 0;
    /// labeled anomalies contribute the inverted-incentive objective and a CE
    /// target of 1. The CE gradient reaches the VAE through the features.
    pub fn joint_loss(
        &self,
        x: ArrayView2<f64>,
        kinds: &[RowKind],
        noise: ArrayView2<f64>,
        lambda: f64,
    ) -> Result<(JointBreakdown, JointGrads)> {
        let fwd = self.vae.forward_train(x, noise)?;
        let (elbo, mut up) = elbo_upstream(&fwd, kinds, 1.0)?;
        let (features, diag) = feature_matrix(
            fwd.y.view(),
            fwd.log_y.view(),
            fwd.z.view(),
            fwd.x.view(),
            fwd.xhat.view(),
        )?;
        let (logits, cache) = self.estimator.forward(features.view())?;
        let targets: Vec<f64> = kinds
            .iter()
            .map(|k| f64::from(u8::from(*k == RowKind::LabeledAnomaly)))
            .collect();
        let (ce, mut d_logits) = ce_loss(logits.view(), &targets)?;
        if !ce.is_finite() {
            return Err(Error::Numeric(format!("non-finite cross-entropy {ce}")));
        }
        d_logits *= lambda;
        let (est_grads, d_features) = self.estimator.backward(&cache, d_logits.view())?;
        let (d_y, d_z, d_xhat) = feature_backward(
            d_features.view(),
            fwd.log_y.view(),
            fwd.x.view(),
            fwd.xhat.view(),
            self.vae.latent_dim(),
        );
        up.y = Some(d_y);
        up.z = Some(d_z);
        up.xhat = Some(d_xhat);
        let vae_grads = self.vae.backward_train(&fwd, &up)?;
        Ok((
            JointBreakdown {
                elbo,
                ce,
                lambda,
                loss: elbo.loss + lambda * ce,
                features: diag,
            },
            JointGrads {
                vae: vae_grads,
                estimator: est_grads,
            },
        ))
    }

    /// Deterministic features, latent means and anomaly scores.
    pub fn score(&self, x: ArrayView2<f64>) -> Result<ScoredBatch> {
        let inf = self.vae.infer(x)?;
        let (features, _) = feature_matrix(
            inf.y.view(),
            inf.log_y.view(),
            inf.z.view(),
            x,
            inf.xhat.view(),
        )?;
        let scores = self.estimator.logits(features.view())?.mapv(sigmoid);
        Ok(ScoredBatch {
            features,
            scores,
            latents: inf.z,
        })
    }
}
