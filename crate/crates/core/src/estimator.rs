//! Anomaly score estimator: a fully-connected network `[F, 2F, 2F, 1]` whose
//! output is squashed by a sigmoid, trained with binary cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::nn::{sigmoid, Activation, DenseNet, ForwardCache, NetGrads, HIDDEN_ACTIVATION};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimator {
    /// Emits the pre-sigmoid logit; the sigmoid is applied by the caller so
    /// the loss can be computed from logits.
    pub net: DenseNet,
}

impl ScoreEstimator {
    pub fn widths(feature_dim: usize) -> Vec<usize> {
        vec![feature_dim, 2 * feature_dim, 2 * feature_dim, 1]
    }

    pub fn new<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Result<Self> {
        let net = DenseNet::new(
            &Self::widths(feature_dim),
            HIDDEN_ACTIVATION,
            Activation::Linear,
            rng,
        )?;
        Ok(Self { net })
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::dim("estimator output width", 1, net.output_dim()));
        }
        Ok(Self { net })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.predict(features)?.remove_axis(Axis(1)))
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        let (out, cache) = self.net.forward(features)?;
        Ok((out.remove_axis(Axis(1)), cache))
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: ArrayView1<f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        let g = d_logits.to_owned().insert_axis(Axis(1));
        self.net.backward(cache, g.view())
    }

    /// Anomaly score in `(0, 1)`.
    pub fn score(&self, f: &FeatureVector) -> Result<f64> {
        let x = f.values().view().insert_axis(Axis(0));
        Ok(sigmoid(self.logits(x)?[0]))
    }

    pub fn score_batch(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.logits(features)?.mapv(sigmoid))
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, and its
/// gradient w.r.t. the logits. Uses
/// `max(o, 0) − t·o + ln(1 + e^{−|o|})`, which never takes the log of zero.
pub fn ce_loss(logits: ArrayView1<f64>, targets: &[f64]) -> Result<(f64, Array1<f64>)> {
    if logits.is_empty() {
        return Err(Error::Usage("cross-entropy needs a non-empty batch".into()));
    }
    if logits.len() != targets.len() {
        return Err(Error::dim("cross-entropy targets", logits.len(), targets.len()));
    }
    let b = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&o, &t)) in logits.iter().zip(targets).enumerate() {
        loss += o.max(0.0) - t * o + (-o.abs()).exp().ln_1p();
        grad[i] = (sigmoid(o) - t) / b;
    }
    Ok((loss / b, grad))
}

/// Cross-entropy written directly on scores, `−[tᵀ log s + (1−t)ᵀ log(1−s)] / B`.
pub fn ce_loss_from_scores(scores: ArrayView1<f64>, targets: &[f64]) -> f64 {
    let b = scores.len() as f64;
    -scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        .sum::<f64>()
        / b
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut est = ScoreEstimator::new(10, &mut rng).unwrap();
        for p in est.net.params_mut() {
            p.fill(0.0);
        }
        let f = FeatureVector::from_values(Array1::linspace(-3.0, 5.0, 10), 3, 4).unwrap();
        assert_eq!(est.score(&f).unwrap(), 0.5);
    }

    #[test]
    fn configured_widths_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = ScoreEstimator::new(10, &mut rng).unwrap();
        assert_eq!(est.net.widths(), vec![10, 20, 20, 1]);
        let f = FeatureVector::from_values(Array1::linspace(0.0, 1.0, 10), 3, 4).unwrap();
        let s = est.score(&f).unwrap();
        assert!(s > 0.0 && s < 1.0);
        assert_eq!(s.to_bits(), est.score(&f.clone()).unwrap().to_bits());
        let bad = FeatureVector::from_values(Array1::zeros(9), 2, 4).unwrap();
        assert!(est.score(&bad).is_err());
    }

    #[test]
    fn half_scores_cost_ln2() {
        let (l, _) = ce_loss(array![0.0, 0.0, 0.0].view(), &[1.0, 0.0, 1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn single_confident_positive() {
        let logit = (0.9f64 / 0.1).ln();
        let (l, _) = ce_loss(array![logit].view(), &[1.0]).unwrap();
        assert!((l + 0.9f64.ln()).abs() < 1e-12);
        assert!((l - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let (l, g) = ce_loss(array![800.0, -800.0].view(), &[0.0, 1.0]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(ce_loss(Array1::zeros(0).view(), &[]).is_err());
    }
}
