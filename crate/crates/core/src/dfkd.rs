//! Generator-based data-free distillation: adversarial exploration with an
//! optional BN-statistics penalty, followed by KD on fresh synthetic batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csvio::{self, CsvTable};
use crate::domains::{noise_batch, DomainPair};
use crate::error::{Error, Result};
use crate::evalcli::metrics::{domain_metrics, MetricsRecord};
use crate::numerics::{
    divergence, gaussian_kl, optimizer_step, Architecture, Cotangents, DenseMatrix, ForwardTrace,
    KlDirection, MlpModel, Mode, OptimizerConfig, OptimizerState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfkdConfig {
    pub noise_dim: usize,
    pub batch_size: usize,
    pub lambda_bn: f64,
    pub bn_loss: bool,
    pub g_steps: usize,
    pub s_steps: usize,
    pub epochs: usize,
    pub generator_optimizer: OptimizerConfig,
    pub student_optimizer: OptimizerConfig,
    pub kl_direction: KlDirection,
    pub student_batch_norm: bool,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DfkdConfig {
    fn default() -> Self {
        Self {
            noise_dim: 8,
            batch_size: 128,
            lambda_bn: 1.0,
            bn_loss: true,
            g_steps: 1,
            s_steps: 5,
            epochs: 400,
            generator_optimizer: OptimizerConfig::adam(1e-3),
            student_optimizer: OptimizerConfig::adam(1e-3),
            kl_direction: KlDirection::ReferenceTarget,
            student_batch_norm: true,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl DfkdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 || self.batch_size < 2 || self.g_steps == 0 || self.s_steps == 0 {
            return Err(Error::InvalidArgument(
                "noise_dim, g_steps and s_steps must be > 0 and batch_size ≥ 2".into(),
            ));
        }
        if !(self.lambda_bn >= 0.0) {
            return Err(Error::InvalidArgument("lambda_bn must be ≥ 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// BN-statistics loss of one eval-mode teacher trace, with gradients w.r.t.
/// the recorded batch means and variances.
///
/// Each layer's epsilon is added to both variances, matching what the layer
/// itself normalizes with.
pub fn bn_loss_terms(teacher: &MlpModel, trace: &ForwardTrace) -> Result<(f64, Cotangents)> {
    if !teacher.has_bn() {
        return Err(Error::InvalidArgument(
            "BN loss requested but the teacher has no batch-norm layers".into(),
        ));
    }
    let mut total = 0.0;
    let mut cot = Cotangents {
        batch_mean: vec![None; teacher.layers().len()],
        batch_var: vec![None; teacher.layers().len()],
        ..Cotangents::default()
    };
    for (idx, (layer, stats)) in teacher.layers().iter().zip(&trace.batch_stats).enumerate() {
        let (Some(bn), Some(stats)) = (&layer.bn, stats) else {
            continue;
        };
        let var_a: Vec<f64> = stats.var.iter().map(|v| v + bn.epsilon).collect();
        let var_b: Vec<f64> = bn.running_var.iter().map(|v| v + bn.epsilon).collect();
        let kl = gaussian_kl(&stats.mean, &var_a, &bn.running_mean, &var_b)?;
        total += kl.value;
        cot.batch_mean[idx] = Some(kl.d_mu_a);
        cot.batch_var[idx] = Some(kl.d_var_a);
    }
    Ok((total, cot))
}

/// `L_bn` of a synthetic batch and its gradient w.r.t. that batch.
pub fn bn_loss(teacher: &MlpModel, synth: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if synth.rows() < 2 {
        return Err(Error::BatchTooSmall(synth.rows()));
    }
    let fwd = teacher.eval(synth)?;
    let (value, cot) = bn_loss_terms(teacher, &fwd.trace)?;
    let dx = teacher.input_gradient(&fwd.trace, &cot)?;
    Ok((value, dx))
}

/// Value of the generator objective `L_syn − λ_bn·L_bn` on a fixed batch of
/// synthetic inputs, with its gradient w.r.t. those inputs.
pub fn exploration_objective(
    student: &MlpModel,
    teacher: &MlpModel,
    synth: &DenseMatrix,
    cfg: &DfkdConfig,
) -> Result<(f64, f64, DenseMatrix)> {
    let tf = teacher.eval(synth)?;
    let sf = student.eval(synth)?;
    let div = divergence(&sf.logits, &tf.logits, cfg.kl_direction)?;

    let (l_bn, mut t_cot) = if cfg.bn_loss {
        let (l_bn, mut cot) = bn_loss_terms(teacher, &tf.trace)?;
        for v in cot.batch_mean.iter_mut().chain(cot.batch_var.iter_mut()).flatten() {
            v.iter_mut().for_each(|g| *g *= -cfg.lambda_bn);
        }
        (l_bn, cot)
    } else {
        (0.0, Cotangents::default())
    };
    t_cot.logits = Some(div.d_b);
    let mut grad = teacher.input_gradient(&tf.trace, &t_cot)?;
    grad.add_assign(&student.input_gradient(&sf.trace, &Cotangents::logits(div.d_a))?)?;
    Ok((div.value, l_bn, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorStep {
    pub l_syn: f64,
    pub l_bn: f64,
}

/// One ascent step of the generator on `L_syn − λ_bn·L_bn`. Teacher and
/// student are only read.
pub fn generator_step(
    generator: &mut MlpModel,
    opt: &mut OptimizerState,
    student: &MlpModel,
    teacher: &MlpModel,
    cfg: &DfkdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratorStep> {
    let noise = noise_batch(cfg.batch_size, cfg.noise_dim, rng)?;
    let gf = generator.forward_frozen(&noise, Mode::Train)?;
    let (l_syn, l_bn, mut d_synth) = exploration_objective(student, teacher, &gf.logits, cfg)?;
    if !l_syn.is_finite() || !l_bn.is_finite() {
        return Err(Error::NonFinite {
            what: "generator objective".into(),
            epoch: 0,
        });
    }
    // Ascend: descend the negated objective.
    d_synth.scale(-1.0);
    let (grads, _) = generator.backward(&gf.trace, &d_synth)?;
    optimizer_step(generator, &grads, opt)?;
    Ok(GeneratorStep { l_syn, l_bn })
}

/// One descent step of the student on `D_KL(S(x), f(x))` with the teacher's
/// outputs held fixed.
pub fn kd_step(
    student: &mut MlpModel,
    opt: &mut OptimizerState,
    teacher: &MlpModel,
    synth: &DenseMatrix,
    cfg: &DfkdConfig,
) -> Result<f64> {
    let t_logits = teacher.logits(synth)?;
    let sf = student.forward_frozen(synth, Mode::Train)?;
    let div = divergence(&sf.logits, &t_logits, cfg.kl_direction)?;
    if !div.value.is_finite() {
        return Err(Error::NonFinite {
            what: "kd loss".into(),
            epoch: 0,
        });
    }
    let (grads, _) = student.backward(&sf.trace, &div.d_a)?;
    student.update_running_stats(&sf.trace);
    optimizer_step(student, &grads, opt)?;
    Ok(div.value)
}

/// Per-epoch record shared by the baseline and the ATEsc loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub l_syn: f64,
    pub l_bn: f64,
    /// `L_kd` for the baseline, `L_ckd` under ATEsc.
    pub l_kd: f64,
    pub l_forget: f64,
    pub n_fragile: Option<usize>,
    pub n_robust: Option<usize>,
    pub metrics: Option<MetricsRecord>,
}

impl DistillEpoch {
    pub fn fragile_fraction(&self) -> Option<f64> {
        match (self.n_fragile, self.n_robust) {
            (Some(f), Some(r)) if f + r > 0 => Some(f as f64 / (f + r) as f64),
            _ => None,
        }
    }
}

pub const DISTILL_HISTORY_HEADER: [&str; 10] = [
    "epoch", "l_syn", "l_bn", "l_kd", "l_forget", "n_fragile", "n_robust", "iacc", "oacc", "olacc",
];

pub fn distill_history_csv(history: &[DistillEpoch]) -> String {
    let mut t = CsvTable::new(&DISTILL_HISTORY_HEADER);
    for h in history {
        t.push(vec![
            h.epoch.to_string(),
            csvio::real(h.l_syn),
            csvio::real(h.l_bn),
            csvio::real(h.l_kd),
            csvio::real(h.l_forget),
            h.n_fragile.map(|v| v.to_string()).unwrap_or_default(),
            h.n_robust.map(|v| v.to_string()).unwrap_or_default(),
            csvio::opt_real(h.metrics.as_ref().map(|m| m.iacc)),
            csvio::opt_real(h.metrics.as_ref().map(|m| m.oacc)),
            csvio::opt_real(h.metrics.as_ref().map(|m| m.olacc)),
        ]);
    }
    t.render()
}

pub const SYNTHETIC_HEADER: [&str; 3] = ["x", "y", "teacher_pred"];

/// A synthetic batch with the teacher's labels, for overlaying on grids.
pub fn synthetic_csv(teacher: &MlpModel, synth: &DenseMatrix) -> Result<String> {
    let pred = teacher.predict(synth)?;
    let mut t = CsvTable::new(&SYNTHETIC_HEADER);
    for (p, y) in synth.iter_rows().zip(pred) {
        t.push(vec![csvio::real(p[0]), csvio::real(p[1]), y.to_string()]);
    }
    Ok(t.render())
}

/// Generator, student, their optimizers and the run's random stream.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub generator: MlpModel,
    pub student: MlpModel,
    pub g_opt: OptimizerState,
    pub s_opt: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl DistillState {
    pub fn new(cfg: &DfkdConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = MlpModel::init(&Architecture::toy_generator(cfg.noise_dim), &mut rng)?;
        let student = MlpModel::init(&Architecture::toy_classifier(cfg.student_batch_norm), &mut rng)?;
        Ok(Self {
            generator,
            student,
            g_opt: OptimizerState::new(cfg.generator_optimizer),
            s_opt: OptimizerState::new(cfg.student_optimizer),
            rng,
        })
    }

    /// `g_steps` generator updates; returns mean `(L_syn, L_bn)`.
    pub fn generator_phase(&mut self, teacher: &MlpModel, cfg: &DfkdConfig, epoch: usize) -> Result<(f64, f64)> {
        let (mut syn, mut bn) = (0.0, 0.0);
        for _ in 0..cfg.g_steps {
            let s = generator_step(
                &mut self.generator,
                &mut self.g_opt,
                &self.student,
                teacher,
                cfg,
                &mut self.rng,
            )
            .map_err(|e| with_epoch(e, epoch))?;
            syn += s.l_syn;
            bn += s.l_bn;
        }
        let k = cfg.g_steps as f64;
        Ok((syn / k, bn / k))
    }

    /// A fresh synthetic batch from the current generator.
    pub fn synthesize(&mut self, cfg: &DfkdConfig) -> Result<DenseMatrix> {
        let noise = noise_batch(cfg.batch_size, cfg.noise_dim, &mut self.rng)?;
        self.generator.logits(&noise)
    }
}

pub(crate) fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, epoch },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub student: MlpModel,
    pub generator: MlpModel,
    pub history: Vec<DistillEpoch>,
}

pub(crate) fn maybe_metrics(
    student: &MlpModel,
    eval: Option<&DomainPair>,
    epoch: usize,
    cfg: &DfkdConfig,
) -> Result<Option<MetricsRecord>> {
    match eval {
        Some(pair) if epoch % cfg.eval_every == 0 || epoch == cfg.epochs => {
            Ok(Some(domain_metrics(student, pair)?))
        }
        _ => Ok(None),
    }
}

/// Alternating generator / student training. `eval`, when given, is used
/// only to log accuracies.
pub fn run_dfkd_baseline(
    teacher: &MlpModel,
    cfg: &DfkdConfig,
    eval: Option<&DomainPair>,
) -> Result<DistillRun> {
    let mut st = DistillState::new(cfg)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (l_syn, l_bn) = st.generator_phase(teacher, cfg, epoch)?;
        let mut l_kd = 0.0;
        for _ in 0..cfg.s_steps {
            let synth = st.synthesize(cfg)?;
            l_kd += kd_step(&mut st.student, &mut st.s_opt, teacher, &synth, cfg)
                .map_err(|e| with_epoch(e, epoch))?;
        }
        history.push(DistillEpoch {
            epoch,
            l_syn,
            l_bn,
            l_kd: l_kd / cfg.s_steps as f64,
            l_forget: 0.0,
            n_fragile: None,
            n_robust: None,
            metrics: maybe_metrics(&st.student, eval, epoch, cfg)?,
        });
    }
    Ok(DistillRun {
        student: st.student,
        generator: st.generator,
        history,
    })
}
