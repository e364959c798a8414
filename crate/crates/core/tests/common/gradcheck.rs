//! One finite-difference check per loss. Each function runs `instances`
//! random tiny problems under every model setup and returns the worst
//! relative error it saw.

use ntldfkd::atesc::{atesc_loss, atesc_step, AtescConfig, GroupedBatch};
use ntldfkd::dfkd::{bn_loss, exploration_objective, generator_step, kd_step, DfkdConfig};
use ntldfkd::domains::{LabeledSet, MixedBatch};
use ntldfkd::ntl::{ntl_objective_with_bandwidths, NtlConfig, TeacherVariant};
use ntldfkd::numerics::{
    categorical_kl, cross_entropy, divergence, gaussian_kl, mmd, Cotangents, DenseMatrix,
    KlDirection, MlpModel, ModelGrads, Mode, OptimizerConfig, OptimizerState,
};
use rand::Rng;

use super::*;

/// No BN, BN in train mode, BN in eval mode.
pub const SETUPS: [(bool, Mode); 3] = [(false, Mode::Train), (true, Mode::Train), (true, Mode::Eval)];
const DIRECTIONS: [KlDirection; 2] = [KlDirection::ReferenceTarget, KlDirection::Forward];
const BATCH: usize = 8;

fn sgd() -> OptimizerState {
    OptimizerState::new(OptimizerConfig::Sgd { lr: 1.0 })
}

/// Recovers the gradient a unit-rate SGD step applied.
fn applied_grads(before: &MlpModel, after: &MlpModel) -> ModelGrads {
    let mut g = before.zero_grads();
    let old = before.params();
    let new = after.params();
    let mut views: Vec<Vec<f64>> = Vec::new();
    for (o, n) in old.iter().zip(&new) {
        views.push(o.iter().zip(n.iter()).map(|(a, b)| a - b).collect());
    }
    let mut it = views.into_iter();
    for layer in &mut g.layers {
        layer.weight.as_mut_slice().copy_from_slice(&it.next().unwrap());
        layer.bias = it.next().unwrap();
        if layer.gamma.is_some() {
            layer.gamma = Some(it.next().unwrap());
            layer.beta = Some(it.next().unwrap());
        }
    }
    g
}

pub fn cross_entropy_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        for (bn, mode) in SETUPS {
            let mut r = rng(seed);
            let m = tiny_model(&mut r, bn);
            let x = normal(BATCH, 2, &mut r);
            let y = labels(BATCH, 3, &mut r);
            let loss = |m: &MlpModel, x: &DenseMatrix| {
                cross_entropy(&m.forward_frozen(x, mode).unwrap().logits, &y).unwrap().value
            };
            let fwd = m.forward_frozen(&x, mode).unwrap();
            let ce = cross_entropy(&fwd.logits, &y).unwrap();
            let (grads, dx) = m.backward(&fwd.trace, &ce.grad).unwrap();
            worst = worst
                .max(check_params(&m, &grads, |m| loss(m, &x)))
                .max(check_matrix(&x, &dx, |x| loss(&m, x)));
        }
    }
    worst
}

pub fn categorical_kl_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        // The bare kernel against its logits.
        let mut r = rng(seed);
        let p = normal(BATCH, 3, &mut r);
        let q = normal(BATCH, 3, &mut r);
        let kl = categorical_kl(&p, &q).unwrap();
        worst = worst
            .max(check_matrix(&p, &kl.d_p, |p| categorical_kl(p, &q).unwrap().value))
            .max(check_matrix(&q, &kl.d_q, |q| categorical_kl(&p, q).unwrap().value));

        // Composed with two networks, both sides differentiated.
        for (bn, mode) in SETUPS {
            for dir in DIRECTIONS {
                let mut r = rng(seed);
                let a = tiny_model(&mut r, bn);
                let b = tiny_model(&mut r, bn);
                let x = normal(BATCH, 2, &mut r);
                let value = |a: &MlpModel, b: &MlpModel, x: &DenseMatrix| {
                    let la = a.forward_frozen(x, mode).unwrap().logits;
                    let lb = b.forward_frozen(x, mode).unwrap().logits;
                    divergence(&la, &lb, dir).unwrap().value
                };
                let fa = a.forward_frozen(&x, mode).unwrap();
                let fb = b.forward_frozen(&x, mode).unwrap();
                let div = divergence(&fa.logits, &fb.logits, dir).unwrap();
                let (ga, dxa) = a.backward(&fa.trace, &div.d_a).unwrap();
                let (gb, dxb) = b.backward(&fb.trace, &div.d_b).unwrap();
                let mut dx = dxa;
                dx.add_assign(&dxb).unwrap();
                worst = worst
                    .max(check_params(&a, &ga, |a| value(a, &b, &x)))
                    .max(check_params(&b, &gb, |b| value(&a, b, &x)))
                    .max(check_matrix(&x, &dx, |x| value(&a, &b, x)));
            }
        }
    }
    worst
}

/// Per-column mean and population variance, plus a variance offset so the
/// statistics stay well away from zero.
fn logit_stats(z: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let mu = z.col_means();
    let var = z.col_vars(&mu).into_iter().map(|v| v + 0.1).collect();
    (mu, var)
}

pub fn gaussian_kl_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(seed);
        let mu_a: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let var_a: Vec<f64> = (0..4).map(|_| r.random_range(0.2..2.0)).collect();
        let mu_b: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let var_b: Vec<f64> = (0..4).map(|_| r.random_range(0.2..2.0)).collect();
        let kl = gaussian_kl(&mu_a, &var_a, &mu_b, &var_b).unwrap();
        worst = worst
            .max(check_vec(&mu_a, &kl.d_mu_a, |m| gaussian_kl(m, &var_a, &mu_b, &var_b).unwrap().value))
            .max(check_vec(&var_a, &kl.d_var_a, |v| gaussian_kl(&mu_a, v, &mu_b, &var_b).unwrap().value));

        // Composed: batch statistics of the logits against a fixed Gaussian.
        for (bn, mode) in SETUPS {
            let mut r = rng(seed);
            let m = tiny_model(&mut r, bn);
            let x = normal(BATCH, 2, &mut r);
            let value = |m: &MlpModel, x: &DenseMatrix| {
                let (mu, var) = logit_stats(&m.forward_frozen(x, mode).unwrap().logits);
                gaussian_kl(&mu, &var, &mu_b[..3], &var_b[..3]).unwrap().value
            };
            let fwd = m.forward_frozen(&x, mode).unwrap();
            let (mu, var) = logit_stats(&fwd.logits);
            let kl = gaussian_kl(&mu, &var, &mu_b[..3], &var_b[..3]).unwrap();
            let n = BATCH as f64;
            let mut d = DenseMatrix::zeros(BATCH, 3);
            for i in 0..BATCH {
                for c in 0..3 {
                    d.row_mut(i)[c] =
                        kl.d_mu_a[c] / n + kl.d_var_a[c] * 2.0 * (fwd.logits.row(i)[c] - mu[c]) / n;
                }
            }
            let (grads, dx) = m.backward(&fwd.trace, &d).unwrap();
            worst = worst
                .max(check_params(&m, &grads, |m| value(m, &x)))
                .max(check_matrix(&x, &dx, |x| value(&m, x)));
        }
    }
    worst
}

pub fn mmd_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(seed);
        let bw: Vec<f64> = {
            let s = r.random_range(0.5..2.0);
            vec![0.5 * s, s, 2.0 * s]
        };
        // The bare kernel against its two sample sets.
        let x = normal(6, 3, &mut r);
        let y = normal(5, 3, &mut r).map(|v| v + 0.7);
        let k = mmd(&x, &y, &bw).unwrap();
        worst = worst
            .max(check_matrix(&x, &k.d_x, |x| mmd(x, &y, &bw).unwrap().value))
            .max(check_matrix(&y, &k.d_y, |y| mmd(&x, y, &bw).unwrap().value));

        // Composed: features of one stacked forward, first rows against the rest.
        for (bn, mode) in SETUPS {
            let mut r = rng(seed);
            let m = tiny_model(&mut r, bn);
            let mut x = normal(BATCH, 2, &mut r);
            for i in BATCH / 2..BATCH {
                x.row_mut(i)[0] += 1.5;
            }
            let h = BATCH / 2;
            let value = |m: &MlpModel, x: &DenseMatrix| {
                let f = m.forward_frozen(x, mode).unwrap().features;
                mmd(&f.slice_rows(0, h), &f.slice_rows(h, BATCH), &bw).unwrap().value
            };
            let fwd = m.forward_frozen(&x, mode).unwrap();
            let k = mmd(&fwd.features.slice_rows(0, h), &fwd.features.slice_rows(h, BATCH), &bw)
                .unwrap();
            let d_feat = DenseMatrix::vstack(&k.d_x, &k.d_y).unwrap();
            let cot = Cotangents {
                features: Some(d_feat),
                ..Cotangents::default()
            };
            let (grads, dx) = m.backward_with(&fwd.trace, &cot).unwrap();
            worst = worst
                .max(check_params(&m, &grads, |m| value(m, &x)))
                .max(check_matrix(&x, &dx, |x| value(&m, x)));
        }
    }
    worst
}

pub fn bn_loss_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = rng(seed);
        let teacher = tiny_model(&mut r, true);
        let g = tiny_generator(&mut r);
        let noise = normal(BATCH, 3, &mut r);

        let synth = normal(BATCH, 2, &mut r);
        let (_, dx) = bn_loss(&teacher, &synth).unwrap();
        worst = worst.max(check_matrix(&synth, &dx, |s| bn_loss(&teacher, s).unwrap().0));

        // Through a generator.
        let value = |g: &MlpModel| bn_loss(&teacher, &g.logits(&noise).unwrap()).unwrap().0;
        let gf = g.forward_frozen(&noise, Mode::Train).unwrap();
        let (_, d_synth) = bn_loss(&teacher, &gf.logits).unwrap();
        let (grads, _) = g.backward(&gf.trace, &d_synth).unwrap();
        worst = worst.max(check_params(&g, &grads, value));
    }
    worst
}

fn split_batch(x: &DenseMatrix, template: &MixedBatch, with_ood: bool) -> MixedBatch {
    let h = template.id_half.len();
    MixedBatch {
        id_half: LabeledSet::new(x.slice_rows(0, h), template.id_half.labels.clone()).unwrap(),
        ood_half: if with_ood {
            LabeledSet::new(x.slice_rows(h, 2 * h), template.ood_half.labels.clone()).unwrap()
        } else {
            template.ood_half.clone()
        },
    }
}

/// Worst error over all six variants.
pub fn ntl_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let bw = [0.4, 0.8, 1.6];
    for variant in TeacherVariant::ALL {
        for seed in 0..instances {
            for (bn, mode) in SETUPS {
                for dir in DIRECTIONS {
                    let mut r = rng(seed);
                    let m = tiny_model(&mut r, bn);
                    let h = BATCH / 2;
                    let id = normal(h, 2, &mut r);
                    let ood = normal(h, 2, &mut r).map(|v| v + 1.5);
                    let batch = MixedBatch {
                        id_half: LabeledSet::new(id, labels(h, 3, &mut r)).unwrap(),
                        ood_half: LabeledSet::new(ood, labels(h, 3, &mut r)).unwrap(),
                    };
                    let cfg = NtlConfig {
                        alpha: r.random_range(0.5..3.0),
                        lambda_cls: r.random_range(0.5..2.0),
                        kl_direction: dir,
                        ..NtlConfig::default()
                    };
                    let y_ood = r.random_range(0..3);
                    let obj = |m: &MlpModel, b: &MixedBatch| {
                        ntl_objective_with_bandwidths(m, b, variant, &cfg, y_ood, mode, &bw).unwrap()
                    };
                    let full = obj(&m, &batch);
                    let with_ood = variant.uses_ood();
                    let x = if with_ood {
                        DenseMatrix::vstack(&batch.id_half.points, &batch.ood_half.points).unwrap()
                    } else {
                        batch.id_half.points.clone()
                    };
                    worst = worst
                        .max(check_params(&m, &full.grads, |m| obj(m, &batch).losses.l_total))
                        .max(check_matrix(&x, &full.d_input, |x| {
                            obj(&m, &split_batch(x, &batch, with_ood)).losses.l_total
                        }));
                }
            }
        }
    }
    worst
}

/// `L_syn − λ_bn·L_bn` w.r.t. generator parameters, through the real
/// generator step (a unit-rate SGD step exposes the gradient it applied).
pub fn l_syn_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        for (student_bn, teacher_bn) in [(false, false), (true, true), (false, true)] {
            for dir in DIRECTIONS {
                let mut r = rng(seed);
                let teacher = tiny_model(&mut r, teacher_bn);
                let student = tiny_model(&mut r, student_bn);
                let g = tiny_generator(&mut r);
                let cfg = DfkdConfig {
                    noise_dim: 3,
                    batch_size: BATCH,
                    lambda_bn: r.random_range(0.2..2.0),
                    bn_loss: teacher_bn,
                    kl_direction: dir,
                    ..DfkdConfig::default()
                };
                let noise_rng = rng(1000 + seed);
                let noise = normal(BATCH, 3, &mut noise_rng.clone());
                let value = |g: &MlpModel| {
                    let (l_syn, l_bn, _) =
                        exploration_objective(&student, &teacher, &g.logits(&noise).unwrap(), &cfg)
                            .unwrap();
                    l_syn - cfg.lambda_bn * l_bn
                };
                let mut stepped = g.clone();
                generator_step(&mut stepped, &mut sgd(), &student, &teacher, &cfg, &mut noise_rng.clone())
                    .unwrap();
                // The step ascends, so it moved along +gradient.
                let mut grads = applied_grads(&g, &stepped);
                for s in grads.layers.iter_mut() {
                    s.weight.scale(-1.0);
                    s.bias.iter_mut().for_each(|v| *v = -*v);
                }
                worst = worst.max(check_params(&g, &grads, value));
            }
        }
    }
    worst
}

/// Student KD loss through the real KD step.
pub fn l_kd_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        for student_bn in [false, true] {
            for dir in DIRECTIONS {
                let mut r = rng(seed);
                let teacher = tiny_model(&mut r, true);
                let student = tiny_model(&mut r, student_bn);
                let synth = normal(BATCH, 2, &mut r);
                let cfg = DfkdConfig {
                    kl_direction: dir,
                    ..DfkdConfig::default()
                };
                let t_logits = teacher.logits(&synth).unwrap();
                let value = |s: &MlpModel| {
                    let sl = s.forward_frozen(&synth, Mode::Train).unwrap().logits;
                    divergence(&sl, &t_logits, dir).unwrap().value
                };
                let mut stepped = student.clone();
                kd_step(&mut stepped, &mut sgd(), &teacher, &synth, &cfg).unwrap();
                // Strip the running-statistics update before comparing.
                let mut after = stepped.clone();
                for (a, s) in after.layers_mut().iter_mut().zip(student.layers()) {
                    if let (Some(ab), Some(sb)) = (&mut a.bn, &s.bn) {
                        ab.running_mean = sb.running_mean.clone();
                        ab.running_var = sb.running_var.clone();
                    }
                }
                let grads = applied_grads(&student, &after);
                worst = worst.max(check_params(&student, &grads, value));
            }
        }
    }
    worst
}

fn grouped(x: &DenseMatrix, n_fragile: usize) -> GroupedBatch {
    let n = x.rows();
    GroupedBatch {
        fragile: x.slice_rows(0, n_fragile),
        fragile_labels: vec![0; n_fragile],
        fragile_idx: (0..n_fragile).collect(),
        robust: x.slice_rows(n_fragile, n),
        robust_labels: vec![0; n - n_fragile],
        robust_idx: (n_fragile..n).collect(),
    }
}

/// `L_ckd − min(1, λ·L_forget)` directly and through the real student step.
pub fn l_atesc_check(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        for (bn, mode) in SETUPS {
            for dir in DIRECTIONS {
                let mut r = rng(seed);
                let teacher = tiny_model(&mut r, true);
                let student = tiny_model(&mut r, bn);
                let x = normal(BATCH, 2, &mut r);
                let nf = r.random_range(2..BATCH - 1);
                let lambda = r.random_range(0.1..2.0);
                let batch = grouped(&x, nf);
                let value = |s: &MlpModel| {
                    atesc_loss(s, &teacher, &batch, lambda, dir, mode).unwrap().value
                };
                let loss = atesc_loss(&student, &teacher, &batch, lambda, dir, mode).unwrap();
                assert!(!loss.clamp_active, "instance should sit in the smooth region");
                worst = worst.max(check_params(&student, loss.grads.as_ref().unwrap(), value));

                if mode == Mode::Train {
                    let cfg = AtescConfig {
                        lambda,
                        ..AtescConfig::default()
                    };
                    let mut stepped = student.clone();
                    atesc_step(&mut stepped, &mut sgd(), &teacher, &batch, &cfg, dir).unwrap();
                    for (a, s) in stepped.layers_mut().iter_mut().zip(student.layers()) {
                        if let (Some(ab), Some(sb)) = (&mut a.bn, &s.bn) {
                            ab.running_mean = sb.running_mean.clone();
                            ab.running_var = sb.running_var.clone();
                        }
                    }
                    worst = worst.max(check_params(&student, &applied_grads(&student, &stepped), value));
                }
            }
        }
    }
    worst
}

/// Every check with its name, for reporting.
pub fn all_checks(instances: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("cross_entropy", cross_entropy_check(instances)),
        ("categorical_kl", categorical_kl_check(instances)),
        ("gaussian_kl", gaussian_kl_check(instances)),
        ("mmd", mmd_check(instances)),
        ("bn_loss", bn_loss_check(instances)),
        ("ntl_variants", ntl_check(instances)),
        ("l_syn", l_syn_check(instances)),
        ("l_kd", l_kd_check(instances)),
        ("l_atesc", l_atesc_check(instances)),
    ]
}
