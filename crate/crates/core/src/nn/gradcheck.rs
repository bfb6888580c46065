//! Central finite-difference gradient checking.

use ndarray::{Array2, ArrayView2};

use super::DenseNet;
use crate::error::{Error, Result};

/// Default perturbation for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    /// Parameter with the largest absolute disagreement.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Vector relative error, zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares `grad(theta)` against central differences of `loss` at `theta`.
///
/// `loss` is evaluated twice at the unperturbed point first; differing values
/// mean the loss is not deterministic and the check is refused.
pub fn check_gradient<L, G>(theta: &[f64], mut loss: L, grad: G, step: f64) -> Result<GradCheckReport>
where
    L: FnMut(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    let base = loss(theta);
    if base.to_bits() != loss(theta).to_bits() {
        return Err(Error::Usage(
            "loss is not deterministic; gradient check refused".into(),
        ));
    }
    let analytic = grad(theta);
    if analytic.len() != theta.len() {
        return Err(Error::dim("analytic gradient", theta.len(), analytic.len()));
    }
    let mut point = theta.to_vec();
    let numeric: Vec<f64> = (0..theta.len())
        .map(|i| {
            point[i] = theta[i] + step;
            let up = loss(&point);
            point[i] = theta[i] - step;
            let down = loss(&point);
            point[i] = theta[i];
            (up - down) / (2.0 * step)
        })
        .collect();
    let worst_index = (0..theta.len())
        .max_by(|&a, &b| {
            (analytic[a] - numeric[a])
                .abs()
                .total_cmp(&(analytic[b] - numeric[b]).abs())
        })
        .unwrap_or(0);
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        rel_error: if rel_error.is_nan() { f64::INFINITY } else { rel_error },
        worst_index,
        analytic: analytic.get(worst_index).copied().unwrap_or(0.0),
        numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
    })
}

pub fn flatten(groups: &[&[f64]]) -> Vec<f64> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

/// Writes a flat vector back into parameter groups.
pub fn assign_flat(groups: &mut [&mut [f64]], flat: &[f64]) {
    let mut offset = 0;
    for g in groups.iter_mut() {
        let n = g.len();
        g.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    debug_assert_eq!(offset, flat.len());
}

/// Checks [`DenseNet::backward`] against central differences of
/// `loss_fn(output)`, which returns the loss and its gradient w.r.t. the
/// network output. Returns the relative error of the full gradient vector.
pub fn grad_check<F>(net: &DenseNet, batch: ArrayView2<f64>, loss_fn: F) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    let theta = flatten(&net.params());
    let mut probe = net.clone();
    let loss = |p: &[f64]| {
        assign_flat(&mut probe.params_mut(), p);
        let out = probe.predict(batch).expect("shape checked below");
        loss_fn(out.view()).0
    };
    // Surface shape errors before entering the closures.
    net.predict(batch)?;
    let analytic = {
        let (out, cache) = net.forward(batch)?;
        let (_, g_out) = loss_fn(out.view());
        let (grads, _) = net.backward(&cache, g_out.view())?;
        flatten(&grads.slices())
    };
    Ok(check_gradient(&theta, loss, |_| analytic, DEFAULT_STEP)?.rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn squared(out: ArrayView2<f64>) -> (f64, Array2<f64>) {
        (0.5 * out.iter().map(|v| v * v).sum::<f64>(), out.to_owned())
    }

    #[test]
    fn linear_net_squared_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNet::new(&[3, 2], Activation::Relu, Activation::Linear, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        assert!(grad_check(&net, x.view(), squared).unwrap() < 1e-6);
    }

    #[test]
    fn deep_rectified_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net =
            DenseNet::new(&[5, 4, 4, 3], Activation::Relu, Activation::Softmax, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let target = [0.2, 0.5, 0.3];
        let xent = |out: ArrayView2<f64>| {
            let mut g = Array2::zeros(out.raw_dim());
            let mut l = 0.0;
            for (i, row) in out.rows().into_iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    l -= target[j] * p.ln();
                    g[[i, j]] = -target[j] / p;
                }
            }
            (l, g)
        };
        assert!(grad_check(&net, x.view(), xent).unwrap() < 1e-4);
    }

    #[test]
    fn broken_backward_is_flagged() {
        let theta = [0.3, -1.2, 2.0];
        let loss = |p: &[f64]| p.iter().map(|v| v * v * v).sum::<f64>();
        let broken = |p: &[f64]| p.iter().map(|v| 2.0 * v * v).collect();
        let report = check_gradient(&theta, loss, broken, DEFAULT_STEP).unwrap();
        assert!(report.rel_error > 1e-2);
        let correct = |p: &[f64]| p.iter().map(|v| 3.0 * v * v).collect();
        let report = check_gradient(&theta, loss, correct, DEFAULT_STEP).unwrap();
        assert!(report.rel_error < 1e-6);
    }

    #[test]
    fn nondeterministic_loss_is_refused() {
        let mut calls = 0.0;
        let loss = |p: &[f64]| {
            calls += 1.0;
            p[0] + calls
        };
        let r = check_gradient(&[1.0], loss, |_| vec![1.0], DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
