//! Loss kernels with analytic gradients.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

pub fn softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        r.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub fn log_softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        r.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Scalar loss together with its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: DenseMatrix,
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<LossGrad> {
    if labels.len() != logits.rows() {
        return Err(Error::shape("cross_entropy", logits.rows(), labels.len()));
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let n = logits.rows() as f64;
    let logp = log_softmax(logits);
    let mut grad = logp.map(f64::exp);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        value -= logp[(i, y)];
        grad[(i, y)] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

/// KL divergence between row-wise softmax distributions, with gradients
/// for both sides.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub value: f64,
    pub d_p: DenseMatrix,
    pub d_q: DenseMatrix,
}

/// `mean_rows KL(softmax(p) ‖ softmax(q))`.
pub fn categorical_kl(p_logits: &DenseMatrix, q_logits: &DenseMatrix) -> Result<KlGrad> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::shape(
            "categorical_kl",
            format!("{:?}", p_logits.shape()),
            format!("{:?}", q_logits.shape()),
        ));
    }
    let n = p_logits.rows();
    if n == 0 {
        return Ok(KlGrad {
            value: 0.0,
            d_p: p_logits.clone(),
            d_q: q_logits.clone(),
        });
    }
    let nf = n as f64;
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let mut d_p = DenseMatrix::zeros(n, p_logits.cols());
    let mut d_q = DenseMatrix::zeros(n, p_logits.cols());
    let mut total = 0.0;
    for i in 0..n {
        let (lpr, lqr) = (lp.row(i), lq.row(i));
        let row_kl: f64 = lpr
            .iter()
            .zip(lqr)
            .map(|(a, b)| a.exp() * (a - b))
            .sum();
        total += row_kl;
        let dp = d_p.row_mut(i);
        for j in 0..dp.len() {
            dp[j] = lpr[j].exp() * (lpr[j] - lqr[j] - row_kl) / nf;
        }
        let dq = d_q.row_mut(i);
        for j in 0..dq.len() {
            dq[j] = (lqr[j].exp() - lpr[j].exp()) / nf;
        }
    }
    Ok(KlGrad {
        value: total / nf,
        d_p,
        d_q,
    })
}

/// Which side of `D_KL(a, b)` is the target distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(softmax(b) ‖ softmax(a))`: the second argument is the target.
    #[default]
    ReferenceTarget,
    /// `KL(softmax(a) ‖ softmax(b))`.
    Forward,
}

/// Gradients of `D_KL(a, b)` w.r.t. `a` and `b`.
#[derive(Debug, Clone)]
pub struct DivergenceGrad {
    pub value: f64,
    pub d_a: DenseMatrix,
    pub d_b: DenseMatrix,
}

/// `D_KL(a, b)` where `b` is the reference side (teacher, or ID output).
pub fn divergence(a: &DenseMatrix, b: &DenseMatrix, dir: KlDirection) -> Result<DivergenceGrad> {
    Ok(match dir {
        KlDirection::ReferenceTarget => {
            let k = categorical_kl(b, a)?;
            DivergenceGrad {
                value: k.value,
                d_a: k.d_q,
                d_b: k.d_p,
            }
        }
        KlDirection::Forward => {
            let k = categorical_kl(a, b)?;
            DivergenceGrad {
                value: k.value,
                d_a: k.d_p,
                d_b: k.d_q,
            }
        }
    })
}

/// Gradient of [`gaussian_kl`] w.r.t. the first distribution's parameters.
#[derive(Debug, Clone)]
pub struct GaussianKlGrad {
    pub value: f64,
    pub d_mu_a: Vec<f64>,
    pub d_var_a: Vec<f64>,
}

/// `Σ_c KL(N(μa, σa²) ‖ N(μb, σb²))` over independent channels.
pub fn gaussian_kl(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> Result<GaussianKlGrad> {
    let n = mu_a.len();
    if var_a.len() != n || mu_b.len() != n || var_b.len() != n {
        return Err(Error::shape(
            "gaussian_kl",
            n,
            format!("{}/{}/{}", var_a.len(), mu_b.len(), var_b.len()),
        ));
    }
    for (channel, &value) in var_a.iter().chain(var_b).enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveVariance {
                channel: channel % n.max(1),
                value,
            });
        }
    }
    let mut value = 0.0;
    let mut d_mu_a = vec![0.0; n];
    let mut d_var_a = vec![0.0; n];
    for c in 0..n {
        let diff = mu_a[c] - mu_b[c];
        value += 0.5 * (var_b[c] / var_a[c]).ln() + (var_a[c] + diff * diff) / (2.0 * var_b[c]) - 0.5;
        d_mu_a[c] = diff / var_b[c];
        d_var_a[c] = 0.5 / var_b[c] - 0.5 / var_a[c];
    }
    Ok(GaussianKlGrad {
        value,
        d_mu_a,
        d_var_a,
    })
}

#[derive(Debug, Clone)]
pub struct MmdGrad {
    pub value: f64,
    pub d_x: DenseMatrix,
    pub d_y: DenseMatrix,
}

fn sq_dists(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let na: Vec<f64> = a.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = b.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut d = a.matmul_t(b)?;
    for i in 0..d.rows() {
        let r = d.row_mut(i);
        for j in 0..r.len() {
            r[j] = (na[i] + nb[j] - 2.0 * r[j]).max(0.0);
        }
    }
    Ok(d)
}

/// Kernel sum and its derivative w.r.t. the squared distance, elementwise.
fn kernel_terms(d2: &DenseMatrix, bandwidths: &[f64]) -> (DenseMatrix, DenseMatrix) {
    let mut k = DenseMatrix::zeros(d2.rows(), d2.cols());
    let mut dk = DenseMatrix::zeros(d2.rows(), d2.cols());
    for (idx, &d) in d2.as_slice().iter().enumerate() {
        let (mut kv, mut dv) = (0.0, 0.0);
        for &g in bandwidths {
            let s = 2.0 * g * g;
            let e = (-d / s).exp();
            kv += e;
            dv -= e / s;
        }
        k.as_mut_slice()[idx] = kv;
        dk.as_mut_slice()[idx] = dv;
    }
    (k, dk)
}

/// `Σ_j w_ij (a_i − b_j)` for every row `i` of `a`.
fn weighted_diff(w: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let row_w: Vec<f64> = w.iter_rows().map(|r| r.iter().sum()).collect();
    let mut out = w.matmul(b)?;
    out.scale(-1.0);
    for i in 0..out.rows() {
        let (orow, arow) = (out.row_mut(i), a.row(i));
        for c in 0..orow.len() {
            orow[c] += row_w[i] * arow[c];
        }
    }
    Ok(out)
}

/// Biased (V-statistic) squared MMD with a sum of Gaussian kernels
/// `exp(−‖a−b‖² / 2γ²)`. Bandwidths are treated as constants.
pub fn mmd(x: &DenseMatrix, y: &DenseMatrix, bandwidths: &[f64]) -> Result<MmdGrad> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::InvalidArgument("mmd needs non-empty sample sets".into()));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::InvalidArgument(
            "mmd needs at least one positive bandwidth".into(),
        ));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd", x.cols(), y.cols()));
    }
    let (nx, ny) = (x.rows() as f64, y.rows() as f64);
    let (kxx, dxx) = kernel_terms(&sq_dists(x, x)?, bandwidths);
    let (kyy, dyy) = kernel_terms(&sq_dists(y, y)?, bandwidths);
    let (kxy, dxy) = kernel_terms(&sq_dists(x, y)?, bandwidths);
    let value = kxx.sum() / (nx * nx) + kyy.sum() / (ny * ny) - 2.0 * kxy.sum() / (nx * ny);

    // d‖a−b‖²/da = 2(a−b); the symmetric self terms count each pair twice.
    let mut d_x = weighted_diff(&dxx, x, x)?;
    d_x.scale(4.0 / (nx * nx));
    let mut cross = weighted_diff(&dxy, x, y)?;
    cross.scale(-4.0 / (nx * ny));
    d_x.add_assign(&cross)?;

    let mut d_y = weighted_diff(&dyy, y, y)?;
    d_y.scale(4.0 / (ny * ny));
    let mut cross = weighted_diff(&dxy.transpose(), y, x)?;
    cross.scale(-4.0 / (nx * ny));
    d_y.add_assign(&cross)?;

    Ok(MmdGrad { value, d_x, d_y })
}

/// Median pairwise Euclidean distance over the union of both sets, times
/// {0.5, 1, 2}. Falls back to 1 when all points coincide.
pub fn median_bandwidths(x: &DenseMatrix, y: &DenseMatrix) -> Result<Vec<f64>> {
    let all = DenseMatrix::vstack(x, y)?;
    let d2 = sq_dists(&all, &all)?;
    let n = all.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(d2[(i, j)].sqrt());
        }
    }
    if d.is_empty() {
        return Ok(vec![0.5, 1.0, 2.0]);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = if *m > 1e-12 { *m } else { 1.0 };
    Ok(vec![0.5 * m, m, 2.0 * m])
}
