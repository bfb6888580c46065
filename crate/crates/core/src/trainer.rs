//! Three-phase training: autoencoder pretraining, EM initialization of the
//! mixture prior on the latent means, then joint training of the VAE and the
//! score estimator with a warm-up weight on the cross-entropy term.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::gmm::{em_fit, EmConfig, EmFit};
use crate::kv::{render, KvFile};
use crate::metrics::{aggregate, auprc, auroc, EvalReport, RunMetrics};
use crate::model::{ScoredBatch, Wvad};
use crate::nn::{Adam, AdamConfig};
use crate::seed::{stream_rng, Stream};
use crate::vae::{standard_normal, MixturePrior, MixtureVae, RowKind, VaeShape};

/// Extra EM attempts after a failed fit.
pub const EM_RETRIES: usize = 3;

const CONFIG_KEYS: [&str; 10] = [
    "k",
    "e1",
    "e2",
    "e3",
    "lambda_warm",
    "lambda_main",
    "lr",
    "seed",
    "label_ratio",
    "batch_divisor",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Mixture components.
    pub k: usize,
    pub e1: usize,
    pub e2: usize,
    pub e3: usize,
    pub lambda_warm: f64,
    pub lambda_main: f64,
    pub lr: f64,
    pub seed: u64,
    pub label_ratio: f64,
    /// Batch size is `rows / batch_divisor`, at least 2.
    pub batch_divisor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            e1: 50,
            e2: 100,
            e3: 400,
            lambda_warm: 0.01,
            lambda_main: 1.0,
            lr: 1e-3,
            seed: 0,
            label_ratio: 0.1,
            batch_divisor: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.e1 == 0 || self.e2 == 0 || self.e3 == 0 {
            return bad(format!(
                "epoch counts must be positive, got {}/{}/{}",
                self.e1, self.e2, self.e3
            ));
        }
        for (name, v) in [
            ("lambda_warm", self.lambda_warm),
            ("lambda_main", self.lambda_main),
            ("lr", self.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.label_ratio > 0.0 && self.label_ratio < 1.0) {
            return bad(format!(
                "label_ratio must lie strictly between 0 and 1, got {}",
                self.label_ratio
            ));
        }
        if self.batch_divisor == 0 {
            return bad("batch_divisor must be positive".into());
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.e1 + self.e2 + self.e3
    }

    pub fn batch_size(&self, rows: usize) -> usize {
        (rows / self.batch_divisor).max(2)
    }

    /// Reads a `key = value` file; missing keys keep their defaults.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.reject_unknown(&CONFIG_KEYS)?;
        let d = Self::default();
        let config = Self {
            k: kv.get("k")?.unwrap_or(d.k),
            e1: kv.get("e1")?.unwrap_or(d.e1),
            e2: kv.get("e2")?.unwrap_or(d.e2),
            e3: kv.get("e3")?.unwrap_or(d.e3),
            lambda_warm: kv.get("lambda_warm")?.unwrap_or(d.lambda_warm),
            lambda_main: kv.get("lambda_main")?.unwrap_or(d.lambda_main),
            lr: kv.get("lr")?.unwrap_or(d.lr),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            label_ratio: kv.get("label_ratio")?.unwrap_or(d.label_ratio),
            batch_divisor: kv.get("batch_divisor")?.unwrap_or(d.batch_divisor),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let values = [
            self.k.to_string(),
            self.e1.to_string(),
            self.e2.to_string(),
            self.e3.to_string(),
            self.lambda_warm.to_string(),
            self.lambda_main.to_string(),
            self.lr.to_string(),
            self.seed.to_string(),
            self.label_ratio.to_string(),
            self.batch_divisor.to_string(),
        ];
        render(CONFIG_KEYS.iter().zip(values))
    }

    /// Short digest of every setting except the seed, so runs of one
    /// protocol share it.
    pub fn hash(&self) -> String {
        let canonical: String = self
            .to_kv_string()
            .lines()
            .filter(|l| !l.starts_with("seed "))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(canonical.as_bytes())
            .iter()
            .take(6)
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}

/// Row indices of one mini-batch; unlabeled rows come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub kinds: Vec<RowKind>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn anomalies(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| **k == RowKind::LabeledAnomaly)
            .count()
    }
}

/// Half of every batch is unlabeled rows, drawn without replacement so an
/// epoch covers the unlabeled pool once; the other half is labeled anomalies
/// drawn with replacement. A short final batch keeps at most as many
/// anomalies as unlabeled rows.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    unlabeled: Vec<usize>,
    anomalies: Vec<usize>,
    batch_size: usize,
}

impl BalancedSampler {
    pub fn new(dataset: &LabeledDataset, batch_size: usize) -> Result<Self> {
        Self::from_indices(dataset.unlabeled(), dataset.labeled_anomalies(), batch_size)
    }

    pub fn from_indices(
        unlabeled: Vec<usize>,
        anomalies: Vec<usize>,
        batch_size: usize,
    ) -> Result<Self> {
        if anomalies.is_empty() {
            return Err(Error::Config(
                "no labeled anomalies: weak supervision needs at least one".into(),
            ));
        }
        if unlabeled.is_empty() {
            return Err(Error::Config("no unlabeled rows".into()));
        }
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        Ok(Self {
            unlabeled,
            anomalies,
            batch_size,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn unlabeled_slots(&self) -> usize {
        self.batch_size.div_ceil(2)
    }

    pub fn anomaly_slots(&self) -> usize {
        self.batch_size / 2
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.unlabeled.len().div_ceil(self.unlabeled_slots())
    }

    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Batch> {
        let mut order = self.unlabeled.clone();
        order.shuffle(rng);
        order
            .chunks(self.unlabeled_slots())
            .map(|chunk| {
                let a = self.anomaly_slots().min(chunk.len());
                let mut rows = chunk.to_vec();
                rows.extend((0..a).map(|_| self.anomalies[rng.random_range(0..self.anomalies.len())]));
                let mut kinds = vec![RowKind::Unlabeled; chunk.len()];
                kinds.resize(chunk.len() + a, RowKind::LabeledAnomaly);
                Batch { rows, kinds }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    /// Joint training with the small cross-entropy weight.
    Warmup,
    Main,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Warmup => "warmup",
            Phase::Main => "main",
        }
    }
}

/// Batch-size-weighted means of one epoch. Pretraining epochs report the
/// pretraining objective in `loss`, its unlabeled part in `recon`, and zero
/// for the other components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub recon: f64,
    pub kl_cat: f64,
    pub kl_z: f64,
    pub ce: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Anomaly rows whose squared residual fell below the reciprocal floor.
    pub pretrain_clamped: usize,
    pub joint_clamped: usize,
    /// Rows whose input or reconstruction norm hit the feature floor.
    pub small_norm_rows: usize,
    pub em_attempts: usize,
    pub em_log_likelihood: f64,
    pub pretrain_time: Duration,
    pub em_time: Duration,
    pub joint_time: Duration,
}

impl RunRecord {
    /// Per-epoch CSV; wall-clock times are left out so that identical runs
    /// give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,loss,recon,kl_cat,kl_z,ce,lambda\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.phase.as_str(),
                e.loss,
                e.recon,
                e.kl_cat,
                e.kl_z,
                e.ce,
                e.lambda
            );
        }
        out
    }

    pub fn wall_clock(&self) -> Duration {
        self.pretrain_time + self.em_time + self.joint_time
    }
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

fn diverged(phase: Phase, epoch: usize, err: Error) -> Error {
    match err {
        Error::Numeric(detail) => Error::Diverged {
            phase: phase.as_str(),
            epoch,
            detail,
        },
        Error::NonFiniteGradient { group, index } => Error::Diverged {
            phase: phase.as_str(),
            epoch,
            detail: format!("non-finite gradient in parameter group {group} at index {index}"),
        },
        other => other,
    }
}

/// Plain-autoencoder epochs on the pretraining objective.
pub fn pretrain<R: Rng + ?Sized>(
    vae: &mut MixtureVae,
    data: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut R,
    record: &mut RunRecord,
) -> Result<()> {
    let sampler = BalancedSampler::new(data, config.batch_size(data.rows()))?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    })?;
    for epoch in 0..config.e1 {
        let mut sums = [0.0; 2];
        let mut rows = 0;
        for batch in sampler.epoch(rng) {
            let x = gather(&data.features, &batch.rows);
            let (out, grads) = vae
                .pretrain_loss(x.view(), &batch.kinds)
                .map_err(|e| diverged(Phase::Pretrain, epoch, e))?;
            record.pretrain_clamped += out.clamped;
            let w = batch.len() as f64;
            sums[0] += out.loss * w;
            sums[1] += out.unlabeled * w;
            rows += batch.len();
            adam.step(&mut vae.params_mut(), &grads.slices())
                .map_err(|e| diverged(Phase::Pretrain, epoch, e))?;
        }
        let n = rows as f64;
        record.epochs.push(EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl_cat: 0.0,
            kl_z: 0.0,
            ce: 0.0,
            lambda: 0.0,
        });
        log::debug!("pretrain epoch {epoch}: loss {:.6}", sums[0] / n);
    }
    Ok(())
}

/// Fits the mixture prior by EM on the latent means of every row, retrying
/// with fresh seeding when a fit fails.
pub fn init_prior<R: Rng + ?Sized>(
    vae: &MixtureVae,
    data: &LabeledDataset,
    k: usize,
    rng: &mut R,
) -> Result<(MixturePrior, EmFit, usize)> {
    let latents = vae.latent_means(data.features.view())?;
    let mut last = None;
    for attempt in 1..=EM_RETRIES + 1 {
        match em_fit(latents.view(), k, &EmConfig::default(), rng) {
            Ok(fit) if fit.log_likelihood.is_finite() => {
                return Ok((MixturePrior::from_gmm(&fit.params), fit, attempt));
            }
            Ok(fit) => {
                last = Some(Error::Numeric(format!(
                    "EM log-likelihood {}",
                    fit.log_likelihood
                )))
            }
            Err(e @ (Error::Config(_) | Error::Input(_))) => return Err(e),
            Err(e) => last = Some(e),
        }
        log::warn!("EM attempt {attempt} failed; reseeding");
    }
    Err(Error::Numeric(format!(
        "EM failed after {} attempts: {}",
        EM_RETRIES + 1,
        last.expect("at least one attempt")
    )))
}

/// Joint epochs: `e2` at the warm-up weight, then `e3` at the main weight.
/// One Adam step per batch updates encoder, decoder, prior and estimator.
pub fn joint_train<R: Rng + ?Sized>(
    model: &mut Wvad,
    data: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut R,
    record: &mut RunRecord,
) -> Result<()> {
    let sampler = BalancedSampler::new(data, config.batch_size(data.rows()))?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    })?;
    let l = model.vae.latent_dim();
    for j in 0..config.e2 + config.e3 {
        let epoch = config.e1 + j;
        let (phase, lambda) = if j < config.e2 {
            (Phase::Warmup, config.lambda_warm)
        } else {
            (Phase::Main, config.lambda_main)
        };
        let mut sums = [0.0; 5];
        let mut rows = 0;
        for batch in sampler.epoch(rng) {
            let x = gather(&data.features, &batch.rows);
            let noise = standard_normal(batch.len(), l, rng);
            let (out, grads) = model
                .joint_loss(x.view(), &batch.kinds, noise.view(), lambda)
                .map_err(|e| diverged(phase, epoch, e))?;
            record.joint_clamped += out.elbo.clamped;
            record.small_norm_rows +=
                out.features.small_input_norm + out.features.small_recon_norm;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    phase: phase.as_str(),
                    epoch,
                    detail: format!(
                        "recon {} kl_cat {} kl_z {} ce {}; clamped so far {}",
                        out.elbo.recon,
                        out.elbo.cat_kl,
                        out.elbo.z_kl,
                        out.ce,
                        record.joint_clamped
                    ),
                });
            }
            let w = batch.len() as f64;
            for (s, v) in sums
                .iter_mut()
                .zip([out.loss, out.elbo.recon, out.elbo.cat_kl, out.elbo.z_kl, out.ce])
            {
                *s += v * w;
            }
            rows += batch.len();
            adam.step(&mut model.params_mut(), &grads.slices())
                .map_err(|e| diverged(phase, epoch, e))?;
        }
        let n = rows as f64;
        record.epochs.push(EpochRecord {
            epoch,
            phase,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl_cat: sums[2] / n,
            kl_z: sums[3] / n,
            ce: sums[4] / n,
            lambda,
        });
        log::debug!(
            "{} epoch {epoch}: loss {:.6} ce {:.6}",
            phase.as_str(),
            sums[0] / n,
            sums[4] / n
        );
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Wvad,
    pub record: RunRecord,
}

/// All three phases on `data` with the seed from `config`.
pub fn train(data: &LabeledDataset, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    if data.rows() < config.k {
        return Err(Error::Config(format!(
            "{} rows cannot support {} mixture components",
            data.rows(),
            config.k
        )));
    }
    let shape = VaeShape::for_input(data.dim(), config.k);
    let mut model = Wvad::new(shape, &mut stream_rng(config.seed, Stream::Init))?;
    let mut record = RunRecord {
        seed: config.seed,
        ..RunRecord::default()
    };

    let t = Instant::now();
    let mut rng = stream_rng(config.seed, Stream::Pretrain);
    pretrain(&mut model.vae, data, config, &mut rng, &mut record)?;
    record.pretrain_time = t.elapsed();

    let t = Instant::now();
    let mut rng = stream_rng(config.seed, Stream::Em);
    let (prior, fit, attempts) = init_prior(&model.vae, data, config.k, &mut rng)?;
    model.vae.prior = prior;
    record.em_attempts = attempts;
    record.em_log_likelihood = fit.log_likelihood;
    record.em_time = t.elapsed();

    let t = Instant::now();
    let mut rng = stream_rng(config.seed, Stream::Joint);
    joint_train(&mut model, data, config, &mut rng, &mut record)?;
    record.joint_time = t.elapsed();
    log::info!(
        "seed {} trained in {:.1}s ({} clamped anomaly rows)",
        config.seed,
        record.wall_clock().as_secs_f64(),
        record.pretrain_clamped + record.joint_clamped
    );
    Ok(Trained { model, record })
}

/// AUROC and AUPRC over the unlabeled rows, which is where anomalies must be
/// found.
pub fn evaluate_unlabeled(scores: &[f64], data: &LabeledDataset) -> Result<(f64, f64)> {
    if scores.len() != data.rows() {
        return Err(Error::dim("scores", data.rows(), scores.len()));
    }
    let rows = data.unlabeled();
    let s: Vec<f64> = rows.iter().map(|&i| scores[i]).collect();
    let t: Vec<u8> = rows.iter().map(|&i| data.truth[i]).collect();
    Ok((auroc(&s, &t)?, auprc(&s, &t)?))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Wvad,
    pub record: RunRecord,
    pub scored: ScoredBatch,
    pub metrics: RunMetrics,
}

/// Trains, scores every row and evaluates on the unlabeled rows.
pub fn run(data: &LabeledDataset, config: &TrainConfig, dataset: &str) -> Result<RunOutput> {
    let Trained { model, record } = train(data, config)?;
    let scored = model.score(data.features.view())?;
    let scores = scored.scores.to_vec();
    let (auroc, auprc) = evaluate_unlabeled(&scores, data)?;
    Ok(RunOutput {
        model,
        record,
        scored,
        metrics: RunMetrics {
            dataset: dataset.to_string(),
            label_ratio: data.provenance.label_ratio,
            config_hash: config.hash(),
            seed: config.seed,
            auroc,
            auprc,
        },
    })
}

/// Per-row scores as CSV: `row,score,weak_label,label`.
pub fn scores_csv(scores: &[f64], data: &LabeledDataset) -> String {
    let mut out = String::from("row,score,weak_label,label\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{i},{s},{},{}", data.weak_labels[i], data.truth[i]);
    }
    out
}

/// Outcome of the multi-seed protocol.
#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub report: EvalReport,
    /// One entry per seed, in the order given.
    pub runs: Vec<RunOutput>,
    /// The split each run was trained and evaluated on.
    pub splits: Vec<LabeledDataset>,
}

/// For every seed: a fresh draw of labeled anomalies, a fresh model, and
/// metrics on the unlabeled rows.
pub fn bench(
    data: &LabeledDataset,
    config: &TrainConfig,
    seeds: &[u64],
    dataset: &str,
) -> Result<BenchOutput> {
    if seeds.is_empty() {
        return Err(Error::Usage("bench needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    let mut splits = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let split = data.resplit(config.label_ratio, seed)?;
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let out = run(&split, &cfg, dataset)?;
        log::info!(
            "{dataset} seed {seed}: AUROC {:.4} AUPRC {:.4}",
            out.metrics.auroc,
            out.metrics.auprc
        );
        runs.push(out);
        splits.push(split);
    }
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    Ok(BenchOutput {
        report: aggregate(&metrics)?,
        runs,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn sampler(u: usize, a: usize, b: usize) -> BalancedSampler {
        BalancedSampler::from_indices((0..u).collect(), (u..u + a).collect(), b).unwrap()
    }

    #[test]
    fn letter_sized_batches() {
        // 1590 unlabeled rows, 10 labeled anomalies, batch 160.
        let s = sampler(1590, 10, 160);
        let mut rng = stream_rng(0, Stream::Joint);
        let batches = s.epoch(&mut rng);
        assert_eq!(batches.len(), 20);
        assert_eq!(batches[0].len(), 160);
        assert_eq!(batches[0].anomalies(), 80);
        assert!(batches[0].rows[80..].iter().all(|&r| r >= 1590));
    }

    #[test]
    fn smallest_batch() {
        let s = sampler(3, 1, 2);
        for b in s.epoch(&mut stream_rng(1, Stream::Joint)) {
            assert_eq!(b.kinds, vec![RowKind::Unlabeled, RowKind::LabeledAnomaly]);
        }
    }

    #[test]
    fn epoch_covers_unlabeled_once() {
        let s = sampler(97, 4, 20);
        let mut rng = stream_rng(2, Stream::Joint);
        let mut seen = HashMap::new();
        for b in s.epoch(&mut rng) {
            for (r, k) in b.rows.iter().zip(&b.kinds) {
                if *k == RowKind::Unlabeled {
                    *seen.entry(*r).or_insert(0) += 1;
                }
            }
        }
        assert_eq!(seen.len(), 97);
        assert!(seen.values().all(|&c| c == 1));
        assert_eq!(s.batches_per_epoch(), 10);
    }

    #[test]
    fn rejects_missing_supervision() {
        assert!(matches!(
            BalancedSampler::from_indices(vec![0, 1], vec![], 4),
            Err(Error::Config(_))
        ));
        assert!(BalancedSampler::from_indices(vec![0, 1], vec![2], 1).is_err());
    }

    #[test]
    fn config_defaults_and_file() {
        let c = TrainConfig::default();
        assert_eq!(c.total_epochs(), 550);
        assert_eq!(c.batch_size(1600), 160);
        assert_eq!(c.batch_size(351), 35);
        assert_eq!(c.batch_size(5), 2);
        let kv = KvFile::parse("k = 3\ne1 = 5\nseed = 9\n", "cfg").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!((c.k, c.e1, c.e2, c.seed), (3, 5, 100, 9));
        let back = TrainConfig::from_kv(&KvFile::parse(&c.to_kv_string(), "x").unwrap()).unwrap();
        assert_eq!(back, c);
        for bad in ["k = 0", "e2 = 0", "lr = -1", "label_ratio = 1", "foo = 1"] {
            let kv = KvFile::parse(bad, "cfg").unwrap();
            assert!(TrainConfig::from_kv(&kv).is_err(), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 7, ..a.clone() };
        let c = TrainConfig { k: 3, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
