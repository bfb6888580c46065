//! Oracles and random instance generators shared by the integration tests
//! and the acceptance run.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use wvad::estimator::{ce_loss, ScoreEstimator};
use wvad::features::{assemble, feature_matrix};
use wvad::gmm::{em_fit, EmConfig, GmmParams};
use wvad::model::Wvad;
use wvad::nn::gradcheck::{assign_flat, check_gradient, flatten, DEFAULT_STEP};
use wvad::vae::{standard_normal, MixtureVae, RowKind, VaeShape};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Gradient checks

pub const GRAD_DRAWS: u64 = 100;
pub const GRAD_TOLERANCE: f64 = 1e-4;

struct Draw {
    rng: ChaCha8Rng,
    shape: VaeShape,
    x: Array2<f64>,
    noise: Array2<f64>,
}

fn draw(seed: u64) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = [8, 12, 16][rng.random_range(0..3)];
    let k = rng.random_range(1..=3);
    let b = rng.random_range(1..=6);
    let shape = VaeShape::for_input(d, k);
    let x = standard_normal(b, d, &mut rng);
    let noise = standard_normal(b, shape.latent_dim, &mut rng);
    Draw { rng, shape, x, noise }
}

/// Random offsets on every parameter, biases included, so that no ReLU sits
/// exactly on its kink.
fn jitter(groups: &mut [&mut [f64]], rng: &mut ChaCha8Rng) {
    for g in groups.iter_mut() {
        for v in g.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

fn random_vae(d: &mut Draw) -> MixtureVae {
    let mut vae = MixtureVae::new(d.shape.clone(), &mut d.rng).unwrap();
    jitter(&mut vae.params_mut(), &mut d.rng);
    vae
}

fn mixed(b: usize, rng: &mut ChaCha8Rng) -> Vec<RowKind> {
    (0..b)
        .map(|_| {
            if rng.random_bool(0.5) {
                RowKind::LabeledAnomaly
            } else {
                RowKind::Unlabeled
            }
        })
        .collect()
}

fn check_vae<F>(seed: u64, kinds: impl Fn(usize, &mut ChaCha8Rng) -> Vec<RowKind>, loss: F) -> f64
where
    F: Fn(&MixtureVae, &Draw, &[RowKind]) -> (f64, Vec<f64>),
{
    let mut d = draw(seed);
    let vae = random_vae(&mut d);
    let kinds = kinds(d.x.nrows(), &mut d.rng);
    let theta = flatten(&vae.params());
    let mut probe = vae.clone();
    let analytic = loss(&vae, &d, &kinds).1;
    check_gradient(
        &theta,
        |p| {
            assign_flat(&mut probe.params_mut(), p);
            loss(&probe, &d, &kinds).0
        },
        |_| analytic.clone(),
        DEFAULT_STEP,
    )
    .unwrap()
    .rel_error
}

fn elbo(vae: &MixtureVae, d: &Draw, kinds: &[RowKind]) -> (f64, Vec<f64>) {
    let (out, grads) = vae.elbo_loss(d.x.view(), kinds, d.noise.view()).unwrap();
    (out.loss, flatten(&grads.slices()))
}

/// Relative gradient errors of the negative ELBO with every row of `kind`.
pub fn elbo_errors(kind: RowKind, seed_base: u64) -> Vec<f64> {
    (0..GRAD_DRAWS)
        .map(|s| check_vae(seed_base + s, |b, _| vec![kind; b], elbo))
        .collect()
}

pub fn pretrain_errors() -> Vec<f64> {
    (0..GRAD_DRAWS)
        .map(|s| {
            check_vae(2000 + s, mixed, |vae, d, kinds| {
                let (out, grads) = vae.pretrain_loss(d.x.view(), kinds).unwrap();
                (out.loss, flatten(&grads.slices()))
            })
        })
        .collect()
}

pub fn cross_entropy_errors() -> Vec<f64> {
    (0..GRAD_DRAWS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            let f = rng.random_range(4..10);
            let b = rng.random_range(1..=8);
            let mut est = ScoreEstimator::new(f, &mut rng).unwrap();
            jitter(&mut est.net.params_mut(), &mut rng);
            let features = standard_normal(b, f, &mut rng);
            let targets: Vec<f64> = (0..b).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            let theta = flatten(&est.net.params());
            let mut probe = est.clone();
            let analytic = {
                let (logits, cache) = est.forward(features.view()).unwrap();
                let (_, d_logits) = ce_loss(logits.view(), &targets).unwrap();
                let (grads, _) = est.backward(&cache, d_logits.view()).unwrap();
                flatten(&grads.slices())
            };
            check_gradient(
                &theta,
                |p| {
                    assign_flat(&mut probe.net.params_mut(), p);
                    ce_loss(probe.logits(features.view()).unwrap().view(), &targets)
                        .unwrap()
                        .0
                },
                |_| analytic.clone(),
                DEFAULT_STEP,
            )
            .unwrap()
            .rel_error
        })
        .collect()
}

/// Joint objective with λ drawn from the two schedule values.
pub fn joint_errors() -> Vec<f64> {
    (0..GRAD_DRAWS)
        .map(|seed| {
            let mut d = draw(4000 + seed);
            let vae = random_vae(&mut d);
            let f = wvad::features::feature_dim(d.shape.components, d.shape.latent_dim);
            let mut est = ScoreEstimator::new(f, &mut d.rng).unwrap();
            jitter(&mut est.net.params_mut(), &mut d.rng);
            let model = Wvad::from_parts(vae, est).unwrap();
            let kinds = mixed(d.x.nrows(), &mut d.rng);
            let lambda = [0.01, 1.0][d.rng.random_range(0..2)];
            let theta = flatten(&model.params());
            let mut probe = model.clone();
            let (_, grads) = model
                .joint_loss(d.x.view(), &kinds, d.noise.view(), lambda)
                .unwrap();
            let analytic = flatten(&grads.slices());
            check_gradient(
                &theta,
                |p| {
                    assign_flat(&mut probe.params_mut(), p);
                    probe
                        .joint_loss(d.x.view(), &kinds, d.noise.view(), lambda)
                        .unwrap()
                        .0
                        .loss
                },
                |_| analytic.clone(),
                DEFAULT_STEP,
            )
            .unwrap()
            .rel_error
        })
        .collect()
}

pub fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// EM

pub const EM_INSTANCES: u64 = 1000;
pub const EM_SLACK: f64 = 1e-10;
pub const EM_RESP_TOLERANCE: f64 = 1e-10;

/// Points from a random diagonal mixture plus the number of components to fit.
pub fn em_instance(seed: u64) -> (Array2<f64>, usize, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3);
    let l = rng.random_range(1..=4);
    let n = rng.random_range(k.max(2)..=200);
    let true_k = rng.random_range(1..=3);
    let centers = Array2::from_shape_fn((true_k, l), |_| 3.0 * normal(&mut rng));
    let scales: Vec<f64> = (0..true_k).map(|_| rng.random_range(0.2..1.5)).collect();
    let mut x = Array2::zeros((n, l));
    for i in 0..n {
        let c = rng.random_range(0..true_k);
        for j in 0..l {
            x[[i, j]] = centers[[c, j]] + scales[c] * normal(&mut rng);
        }
    }
    (x, k, rng)
}

/// Responsibilities and average log-likelihood, written out directly from
/// the mixture density.
pub fn em_oracle(params: &GmmParams, x: &Array2<f64>) -> (Array2<f64>, f64) {
    let (n, k) = (x.nrows(), params.weights.len());
    let mut resp = Array2::zeros((n, k));
    let mut total = 0.0;
    for i in 0..n {
        let logs: Vec<f64> = (0..k)
            .map(|c| {
                let mut lp = params.weights[c].ln();
                for j in 0..x.ncols() {
                    let v = params.variances[[c, j]];
                    let d = x[[i, j]] - params.means[[c, j]];
                    lp += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - d * d / (2.0 * v);
                }
                lp
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|v| (v - m).exp()).sum();
        for c in 0..k {
            resp[[i, c]] = (logs[c] - m).exp() / s;
        }
        total += m + s.ln();
    }
    (resp, total / n as f64)
}

#[derive(Debug, Default)]
pub struct EmCheck {
    /// Largest decrease of the log-likelihood between EM iterations.
    pub worst_drop: f64,
    pub worst_resp: f64,
    pub worst_ll: f64,
    pub reseeded: usize,
    pub failures: usize,
}

pub fn check_em(instances: u64) -> EmCheck {
    let mut out = EmCheck::default();
    for seed in 0..instances {
        let (x, k, mut rng) = em_instance(seed);
        let fit = match em_fit(x.view(), k, &EmConfig::default(), &mut rng) {
            Ok(f) => f,
            Err(_) => {
                out.failures += 1;
                continue;
            }
        };
        out.reseeded += fit.reseeded;
        for w in fit.trace.windows(2) {
            out.worst_drop = out.worst_drop.max(w[0] - w[1]);
        }
        let (resp, ll) = em_oracle(&fit.params, &x);
        let diff = (&resp - &fit.responsibilities).mapv(f64::abs);
        out.worst_resp = out.worst_resp.max(diff.iter().copied().fold(0.0, f64::max));
        out.worst_ll = out.worst_ll.max((ll - fit.log_likelihood).abs() / ll.abs().max(1.0));
    }
    out
}

// ---------------------------------------------------------------------------
// Ranking metrics

pub const METRIC_INSTANCES: u64 = 1000;
pub const METRIC_TOLERANCE: f64 = 1e-12;

/// Fraction of (positive, negative) pairs ranked correctly, ties halved.
pub fn brute_auroc(s: &[f64], l: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] == 1 && l[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Mean over positives of the precision among all rows scoring at least as
/// high.
pub fn brute_auprc(s: &[f64], l: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut pos = 0.0;
    for i in 0..s.len() {
        if l[i] != 1 {
            continue;
        }
        pos += 1.0;
        let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
        let tp = above.iter().filter(|&&j| l[j] == 1).count();
        sum += tp as f64 / above.len() as f64;
    }
    sum / pos
}

/// Scores with frequent ties and both classes present.
pub fn metric_instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=50);
    let levels = rng.random_range(1..=n.max(2));
    let mut l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    l[0] = 1;
    l[1] = 0;
    let s = (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                rng.random_range(0..levels) as f64 / levels as f64
            } else {
                normal(&mut rng)
            }
        })
        .collect();
    (s, l)
}

/// Largest deviation of `auroc` and `auprc` from the brute-force oracles.
pub fn check_metrics(instances: u64) -> (f64, f64) {
    let (mut roc, mut pr) = (0.0f64, 0.0f64);
    for seed in 0..instances {
        let (s, l) = metric_instance(seed);
        roc = roc.max((wvad::metrics::auroc(&s, &l).unwrap() - brute_auroc(&s, &l)).abs());
        pr = pr.max((wvad::metrics::auprc(&s, &l).unwrap() - brute_auprc(&s, &l)).abs());
    }
    (roc, pr)
}

// ---------------------------------------------------------------------------
// Features

pub const FEATURE_DRAWS: u64 = 10_000;

/// A random posterior; sharp temperatures give near one-hot rows and
/// occasional exact zeros.
fn posterior(k: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let t = [0.1, 1.0, 10.0, 800.0][rng.random_range(0..4)];
    let logits: Vec<f64> = (0..k).map(|_| t * normal(rng)).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Number of draws that break a bound, across both feature code paths.
pub fn feature_violations(draws: u64) -> usize {
    let mut bad = 0;
    for seed in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=6);
        let d = rng.random_range(1..=20);
        let y = posterior(k, &mut rng);
        let z = Array1::from_shape_fn(2, |_| normal(&mut rng));
        let x = Array1::from_shape_fn(d, |_| normal(&mut rng));
        let xhat = match rng.random_range(0..4) {
            0 => x.mapv(|v| v * rng.random_range(-3.0..3.0)),
            1 => Array1::zeros(d),
            _ => Array1::from_shape_fn(d, |_| normal(&mut rng)),
        };
        let f = assemble(y.view(), z.view(), x.view(), xhat.view()).unwrap();
        let log_y = y.mapv(f64::ln);
        let (m, _) = feature_matrix(
            y.view().insert_axis(ndarray::Axis(0)),
            log_y.view().insert_axis(ndarray::Axis(0)),
            z.view().insert_axis(ndarray::Axis(0)),
            x.view().insert_axis(ndarray::Axis(0)),
            xhat.view().insert_axis(ndarray::Axis(0)),
        )
        .unwrap();
        let ln_k = (k as f64).ln();
        let ok = |fe: f64, fr: f64, fc: f64| {
            (0.0..=ln_k).contains(&fe) && fr >= 0.0 && fr.is_finite() && (-1.0..=1.0).contains(&fc)
        };
        let row = m.row(0);
        let n = row.len();
        if !ok(f.entropy(), f.recon_error(), f.cosine()) || !ok(row[n - 3], row[n - 2], row[n - 1]) {
            bad += 1;
        }
    }
    bad
}

/// Anchor cases that must hold exactly; returns the ones that do not.
pub fn feature_anchor_failures() -> Vec<String> {
    use wvad::features::{cluster_entropy, cosine_similarity, relative_recon_error};
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for k in 1..=8 {
        for hot in 0..k {
            let mut y = Array1::zeros(k);
            y[hot] = 1.0;
            if cluster_entropy(y.view()) != 0.0 {
                failures.push(format!("one-hot entropy, K={k}"));
            }
        }
    }
    // Uniform posteriors are exactly representable when K is a power of two.
    for k in [1usize, 2, 4, 8, 16] {
        let y = Array1::from_elem(k, 1.0 / k as f64);
        if cluster_entropy(y.view()) != (k as f64).ln() {
            failures.push(format!("uniform entropy, K={k}"));
        }
    }
    for _ in 0..1000 {
        let d = rng.random_range(1..=32);
        let x = Array1::from_shape_fn(d, |_| normal(&mut rng));
        if relative_recon_error(x.view(), x.view()).unwrap() != 0.0
            || cosine_similarity(x.view(), x.view()).unwrap() != 1.0
        {
            failures.push(format!("x̂ = x anchor, D={d}"));
        }
        if cosine_similarity(x.view(), (-&x).view()).unwrap() != -1.0 {
            failures.push(format!("x̂ = −x anchor, D={d}"));
        }
    }
    failures
}
