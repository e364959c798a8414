//! Shared helpers for the integration tests: finite-difference oracles and
//! small random models.
#![allow(dead_code)]

pub mod gradcheck;

use ntldfkd::domains::noise_batch;
use ntldfkd::numerics::{Architecture, DenseMatrix, MlpModel, ModelGrads};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Gradient-check pass threshold.
pub const GRAD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero entries from
/// dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst relative error of `grads` against central differences of `f` over
/// every trainable parameter of `model`.
pub fn check_params(model: &MlpModel, grads: &ModelGrads, f: impl Fn(&MlpModel) -> f64) -> f64 {
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (t, g) in analytic.iter().enumerate() {
        assert_eq!(g.len(), probe.params()[t].len(), "gradient layout");
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + H;
            let up = f(&probe);
            probe.params_mut()[t][i] = orig - H;
            let down = f(&probe);
            probe.params_mut()[t][i] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Same as [`check_params`] for a gradient w.r.t. a matrix input.
pub fn check_matrix(x: &DenseMatrix, grad: &DenseMatrix, f: impl Fn(&DenseMatrix) -> f64) -> f64 {
    assert_eq!(x.shape(), grad.shape(), "gradient shape");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + H;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - H;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        worst = worst.max(rel_err(grad.as_slice()[i], (up - down) / (2.0 * H)));
    }
    worst
}

/// Vector version of [`check_matrix`].
pub fn check_vec(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let m = DenseMatrix::from_vec(1, x.len(), x.to_vec()).unwrap();
    let g = DenseMatrix::from_vec(1, grad.len(), grad.to_vec()).unwrap();
    check_matrix(&m, &g, |p| f(p.as_slice()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    noise_batch(rows, cols, rng).unwrap()
}

/// 2 → 5 → 3 classifier, features after the hidden layer. With `bn` the
/// hidden layer is batch-normalized and its affine parameters and running
/// statistics are randomized so eval mode is not the identity.
pub fn tiny_model(rng: &mut ChaCha8Rng, bn: bool) -> MlpModel {
    let arch = Architecture {
        widths: vec![2, 5, 3],
        batch_norm: bn,
        feature_tap: 0,
    };
    let mut m = MlpModel::init(&arch, rng).unwrap();
    randomize_bn(&mut m, rng);
    m
}

/// 3 → 6 → 2 generator without BN.
pub fn tiny_generator(rng: &mut ChaCha8Rng) -> MlpModel {
    let arch = Architecture {
        widths: vec![3, 6, 2],
        batch_norm: false,
        feature_tap: 0,
    };
    MlpModel::init(&arch, rng).unwrap()
}

pub fn randomize_bn(m: &mut MlpModel, rng: &mut ChaCha8Rng) {
    for layer in m.layers_mut() {
        if let Some(bn) = &mut layer.bn {
            for c in 0..bn.width() {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(-0.5..0.5);
                bn.running_mean[c] = rng.random_range(-0.5..0.5);
                bn.running_var[c] = rng.random_range(0.3..2.0);
            }
        }
    }
}

pub fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}
