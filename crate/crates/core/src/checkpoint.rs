//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::estimator::ScoreEstimator;
use crate::model::Wvad;
use crate::nn::{Activation, DenseLayer, DenseNet};
use crate::vae::{MixturePrior, MixtureVae};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    /// Row-major `inputs × outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerRecord {
    fn of(net: &DenseNet) -> Vec<Self> {
        net.layers()
            .iter()
            .map(|l| LayerRecord {
                inputs: l.inputs(),
                outputs: l.outputs(),
                activation: l.activation(),
                weights: l.weights().iter().copied().collect(),
                bias: l.bias().to_vec(),
            })
            .collect()
    }

    fn net(records: &[Self], name: &str) -> Result<DenseNet> {
        let layers = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let w = Array2::from_shape_vec((r.inputs, r.outputs), r.weights.clone()).map_err(|_| {
                    Error::Checkpoint(format!(
                        "{name} layer {i}: {} weights for a {}x{} matrix",
                        r.weights.len(),
                        r.inputs,
                        r.outputs
                    ))
                })?;
                DenseLayer::from_parts(w, Array1::from(r.bias.clone()), r.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers)
    }
}

/// A trained detector plus the statistics that standardized its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub components: usize,
    encoder: Vec<LayerRecord>,
    decoder: Vec<LayerRecord>,
    prior_logits: Vec<f64>,
    /// Row-major `components × latent_dim`.
    prior_means: Vec<f64>,
    prior_log_vars: Vec<f64>,
    estimator: Vec<LayerRecord>,
    pub standardization: Standardization,
    /// Training configuration in `key = value` form.
    pub config: String,
}

impl Checkpoint {
    pub fn new(model: &Wvad, standardization: &Standardization, config: String) -> Self {
        let vae = &model.vae;
        Self {
            version: FORMAT_VERSION,
            input_dim: vae.input_dim(),
            latent_dim: vae.latent_dim(),
            components: vae.components(),
            encoder: LayerRecord::of(&vae.encoder),
            decoder: LayerRecord::of(&vae.decoder),
            prior_logits: vae.prior.logits.to_vec(),
            prior_means: vae.prior.means.iter().copied().collect(),
            prior_log_vars: vae.prior.log_vars.iter().copied().collect(),
            estimator: LayerRecord::of(&model.estimator.net),
            standardization: standardization.clone(),
            config,
        }
    }

    pub fn model(&self) -> Result<Wvad> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let (k, l) = (self.components, self.latent_dim);
        let matrix = |v: &[f64], name: &str| {
            Array2::from_shape_vec((k, l), v.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{name} has {} values, expected {}", v.len(), k * l)))
        };
        let prior = MixturePrior {
            logits: Array1::from(self.prior_logits.clone()),
            means: matrix(&self.prior_means, "prior means")?,
            log_vars: matrix(&self.prior_log_vars, "prior log-variances")?,
        };
        let vae = MixtureVae::from_parts(
            LayerRecord::net(&self.encoder, "encoder")?,
            LayerRecord::net(&self.decoder, "decoder")?,
            prior,
        )?;
        if vae.input_dim() != self.input_dim || vae.latent_dim() != l || vae.components() != k {
            return Err(Error::Checkpoint(
                "declared dimensions disagree with the stored layers".into(),
            ));
        }
        if self.standardization.mean.len() != self.input_dim {
            return Err(Error::dim(
                "standardization width",
                self.input_dim,
                self.standardization.mean.len(),
            ));
        }
        let estimator = ScoreEstimator::from_net(LayerRecord::net(&self.estimator, "estimator")?)?;
        Wvad::from_parts(vae, estimator)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
