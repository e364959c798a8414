//! Adversarial probing of synthetic samples and the escape-from-trap
//! distillation loop built on it.
//!
//! Samples whose teacher prediction flips under a small l∞ attack look like
//! ID data and are distilled normally. Samples that resist the attack look
//! like the teacher's OOD training domain and are pushed away instead.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::csvio::{self, CsvTable};
use crate::dfkd::{maybe_metrics, with_epoch, DfkdConfig, DistillEpoch, DistillRun, DistillState};
use crate::domains::DomainPair;
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, divergence, optimizer_step, Cotangents, DenseMatrix, KlDirection, MlpModel,
    ModelGrads, Mode, OptimizerState,
};

/// Blob std of the default toy domains; the default ε is half of it.
const DEFAULT_EPSILON: f64 = 0.5 * 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// `None` means ε/4.
    pub step_size: Option<f64>,
    pub random_start: bool,
    #[serde(rename = "box")]
    pub clamp: Option<(f64, f64)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            steps: 10,
            step_size: None,
            random_start: false,
            clamp: None,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn eta(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.eta() > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attack needs ε > 0 and η > 0 (got ε={}, η={})",
                self.epsilon,
                self.eta()
            )));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    Pgd,
    Fgsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtescConfig {
    pub attack: AttackConfig,
    pub attack_kind: AttackKind,
    pub lambda: f64,
    pub ckd_only: bool,
}

impl Default for AtescConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            attack_kind: AttackKind::Pgd,
            lambda: 1e-4,
            ckd_only: false,
        }
    }
}

impl AtescConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.ckd_only {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Which student-training rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distiller {
    #[default]
    Baseline,
    Ckd,
    Atesc,
}

impl Distiller {
    pub const ALL: [Distiller; 3] = [Distiller::Baseline, Distiller::Ckd, Distiller::Atesc];

    pub fn name(self) -> &'static str {
        match self {
            Distiller::Baseline => "baseline",
            Distiller::Ckd => "ckd",
            Distiller::Atesc => "atesc",
        }
    }
}

impl FromStr for Distiller {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distiller `{s}`")))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `v` into `[x0 − ε, x0 + ε]` so that `|v − x0| ≤ ε` holds in
/// floating point, not just in exact arithmetic.
fn project(v: f64, x0: f64, eps: f64) -> f64 {
    let mut out = v.clamp(x0 - eps, x0 + eps);
    while (out - x0).abs() > eps {
        out = if out > x0 { out.next_down() } else { out.next_up() };
    }
    out
}

/// Untargeted l∞ PGD against the teacher's own argmax on the clean input.
pub fn pgd_untargeted<R: Rng + ?Sized>(
    teacher: &MlpModel,
    x: &DenseMatrix,
    atk: &AttackConfig,
    rng: &mut R,
) -> Result<DenseMatrix> {
    atk.validate()?;
    let labels = teacher.predict(x)?;
    let eps = atk.epsilon;
    let eta = atk.eta();
    let x0 = x.as_slice();
    let mut adv = x.clone();

    let finish = |v: f64, o: f64| {
        let p = project(v, o, eps);
        match atk.clamp {
            // The box can only move a point toward the interior of the ball
            // when the clean point is itself inside the box.
            Some((lo, hi)) => project(p.clamp(lo, hi), o, eps),
            None => p,
        }
    };

    if atk.random_start {
        for (a, &o) in adv.as_mut_slice().iter_mut().zip(x0) {
            *a = finish(o + rng.random_range(-eps..=eps), o);
        }
    }
    for _ in 0..atk.steps {
        let fwd = teacher.eval(&adv)?;
        let ce = cross_entropy(&fwd.logits, &labels)?;
        let g = teacher.input_gradient(&fwd.trace, &Cotangents::logits(ce.grad))?;
        for ((a, &o), &d) in adv.as_mut_slice().iter_mut().zip(x0).zip(g.as_slice()) {
            *a = finish(*a + eta * sign(d), o);
        }
    }
    Ok(adv)
}

/// Single signed-gradient step of size ε; the one-step case of [`pgd_untargeted`].
pub fn fgsm(teacher: &MlpModel, x: &DenseMatrix, epsilon: f64) -> Result<DenseMatrix> {
    let atk = AttackConfig {
        epsilon,
        steps: 1,
        step_size: Some(epsilon),
        random_start: false,
        clamp: None,
    };
    // No random start, so the generator is never drawn from.
    pgd_untargeted(teacher, x, &atk, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
}

pub fn attack<R: Rng + ?Sized>(
    teacher: &MlpModel,
    x: &DenseMatrix,
    cfg: &AtescConfig,
    rng: &mut R,
) -> Result<DenseMatrix> {
    match cfg.attack_kind {
        AttackKind::Pgd => pgd_untargeted(teacher, x, &cfg.attack, rng),
        AttackKind::Fgsm => {
            let atk = AttackConfig {
                steps: 1,
                step_size: Some(cfg.attack.epsilon),
                random_start: false,
                ..cfg.attack
            };
            pgd_untargeted(teacher, x, &atk, rng)
        }
    }
}

/// A probed batch partitioned by whether the teacher's prediction flipped.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBatch {
    pub fragile: DenseMatrix,
    pub fragile_labels: Vec<usize>,
    pub fragile_idx: Vec<usize>,
    pub robust: DenseMatrix,
    pub robust_labels: Vec<usize>,
    pub robust_idx: Vec<usize>,
}

impl GroupedBatch {
    pub fn len(&self) -> usize {
        self.fragile_idx.len() + self.robust_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_fragile(&self) -> usize {
        self.fragile_idx.len()
    }

    pub fn n_robust(&self) -> usize {
        self.robust_idx.len()
    }
}

pub fn group_split(teacher: &MlpModel, x: &DenseMatrix, x_hat: &DenseMatrix) -> Result<GroupedBatch> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("group_split", x.rows(), x_hat.rows()));
    }
    let before = teacher.predict(x)?;
    let after = teacher.predict(x_hat)?;
    let (mut fragile_idx, mut robust_idx) = (Vec::new(), Vec::new());
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        if a != b {
            fragile_idx.push(i);
        } else {
            robust_idx.push(i);
        }
    }
    Ok(GroupedBatch {
        fragile: x.select_rows(&fragile_idx),
        fragile_labels: fragile_idx.iter().map(|&i| before[i]).collect(),
        robust: x.select_rows(&robust_idx),
        robust_labels: robust_idx.iter().map(|&i| before[i]).collect(),
        fragile_idx,
        robust_idx,
    })
}

pub const GROUPED_HEADER: [&str; 4] = ["x", "y", "group", "teacher_pred"];

/// Rows in original batch order.
pub fn grouped_csv(batch: &GroupedBatch) -> String {
    let mut rows: Vec<(usize, &[f64], &str, usize)> = Vec::with_capacity(batch.len());
    for (k, &i) in batch.fragile_idx.iter().enumerate() {
        rows.push((i, batch.fragile.row(k), "fragile", batch.fragile_labels[k]));
    }
    for (k, &i) in batch.robust_idx.iter().enumerate() {
        rows.push((i, batch.robust.row(k), "robust", batch.robust_labels[k]));
    }
    rows.sort_by_key(|r| r.0);
    let mut t = CsvTable::new(&GROUPED_HEADER);
    for (_, p, g, y) in rows {
        t.push(vec![csvio::real(p[0]), csvio::real(p[1]), g.to_string(), y.to_string()]);
    }
    t.render()
}

#[derive(Debug, Clone)]
pub struct AtescLoss {
    pub value: f64,
    pub l_ckd: f64,
    pub l_forget: f64,
    pub clamp_active: bool,
    /// `None` when no term contributes a gradient.
    pub grads: Option<ModelGrads>,
    pub trace: crate::numerics::ForwardTrace,
}

/// `L_ckd − min(1, λ·L_forget)` with gradients for the student only.
///
/// The student is forwarded once, in `mode`, on the fragile rows followed by
/// the robust rows, so train-mode BN sees the whole probed batch.
pub fn atesc_loss(
    student: &MlpModel,
    teacher: &MlpModel,
    grouped: &GroupedBatch,
    lambda: f64,
    dir: KlDirection,
    mode: Mode,
) -> Result<AtescLoss> {
    if grouped.is_empty() {
        return Err(Error::EmptyGroups);
    }
    let nf = grouped.n_fragile();
    let x = DenseMatrix::vstack(&grouped.fragile, &grouped.robust)?;
    let t_logits = teacher.logits(&x)?;
    let sf = student.forward_frozen(&x, mode)?;
    let n = x.rows();
    let mut d_logits = DenseMatrix::zeros(n, sf.logits.cols());
    let mut contributes = false;

    let mut l_ckd = 0.0;
    if nf > 0 {
        let div = divergence(&sf.logits.slice_rows(0, nf), &t_logits.slice_rows(0, nf), dir)?;
        l_ckd = div.value;
        for i in 0..nf {
            d_logits.row_mut(i).copy_from_slice(div.d_a.row(i));
        }
        contributes = true;
    }

    let mut l_forget = 0.0;
    let mut clamp_active = false;
    let mut forget_term = 0.0;
    if n > nf {
        let div = divergence(&sf.logits.slice_rows(nf, n), &t_logits.slice_rows(nf, n), dir)?;
        l_forget = div.value;
        let scaled = lambda * l_forget;
        clamp_active = scaled >= 1.0;
        forget_term = scaled.min(1.0);
        if !clamp_active && lambda > 0.0 {
            for i in nf..n {
                let src = div.d_a.row(i - nf);
                for (d, s) in d_logits.row_mut(i).iter_mut().zip(src) {
                    *d = -lambda * s;
                }
            }
            contributes = true;
        }
    }

    let value = l_ckd - forget_term;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "atesc loss".into(),
            epoch: 0,
        });
    }
    let grads = if contributes {
        Some(student.backward(&sf.trace, &d_logits)?.0)
    } else {
        None
    };
    Ok(AtescLoss {
        value,
        l_ckd,
        l_forget,
        clamp_active,
        grads,
        trace: sf.trace,
    })
}

/// One student update on a grouped batch. Returns `(L_ckd, L_forget)`;
/// a step with no gradient-carrying term leaves the student untouched.
pub fn atesc_step(
    student: &mut MlpModel,
    opt: &mut OptimizerState,
    teacher: &MlpModel,
    grouped: &GroupedBatch,
    cfg: &AtescConfig,
    dir: KlDirection,
) -> Result<(f64, f64)> {
    let loss = atesc_loss(student, teacher, grouped, cfg.effective_lambda(), dir, Mode::Train)?;
    if let Some(grads) = &loss.grads {
        student.update_running_stats(&loss.trace);
        optimizer_step(student, grads, opt)?;
    }
    let l_forget = if cfg.ckd_only { 0.0 } else { loss.l_forget };
    Ok((loss.l_ckd, l_forget))
}

/// DFKD with adversarial grouping: generator steps exactly as in the
/// baseline, then one probed batch per epoch drives `s_steps` student updates.
pub fn run_dfkd_atesc(
    teacher: &MlpModel,
    dfkd: &DfkdConfig,
    cfg: &AtescConfig,
    eval: Option<&DomainPair>,
) -> Result<DistillRun> {
    cfg.validate()?;
    let mut st = DistillState::new(dfkd)?;
    let mut history = Vec::with_capacity(dfkd.epochs);
    for epoch in 1..=dfkd.epochs {
        let (l_syn, l_bn) = st.generator_phase(teacher, dfkd, epoch)?;
        let synth = st.synthesize(dfkd)?;
        let probed = attack(teacher, &synth, cfg, &mut st.rng)?;
        let grouped = group_split(teacher, &synth, &probed)?;
        let (mut l_ckd, mut l_forget) = (0.0, 0.0);
        for _ in 0..dfkd.s_steps {
            let (c, f) = atesc_step(
                &mut st.student,
                &mut st.s_opt,
                teacher,
                &grouped,
                cfg,
                dfkd.kl_direction,
            )
            .map_err(|e| with_epoch(e, epoch))?;
            l_ckd += c;
            l_forget += f;
        }
        let k = dfkd.s_steps as f64;
        history.push(DistillEpoch {
            epoch,
            l_syn,
            l_bn,
            l_kd: l_ckd / k,
            l_forget: l_forget / k,
            n_fragile: Some(grouped.n_fragile()),
            n_robust: Some(grouped.n_robust()),
            metrics: maybe_metrics(&st.student, eval, epoch, dfkd)?,
        });
    }
    Ok(DistillRun {
        student: st.student,
        generator: st.generator,
        history,
    })
}

/// Runs whichever distiller is selected; `Ckd` forces λ = 0.
pub fn distill(
    kind: Distiller,
    teacher: &MlpModel,
    dfkd: &DfkdConfig,
    atesc: &AtescConfig,
    eval: Option<&DomainPair>,
) -> Result<DistillRun> {
    match kind {
        Distiller::Baseline => crate::dfkd::run_dfkd_baseline(teacher, dfkd, eval),
        Distiller::Ckd => {
            let cfg = AtescConfig {
                ckd_only: true,
                ..*atesc
            };
            run_dfkd_atesc(teacher, dfkd, &cfg, eval)
        }
        Distiller::Atesc => run_dfkd_atesc(teacher, dfkd, atesc, eval),
    }
}
