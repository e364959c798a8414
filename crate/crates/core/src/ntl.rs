//! Non-transferable teacher training.
//!
//! Every variant is trained on row-paired ID/OOD batches; only `Sl` ignores
//! the OOD half. The repulsion term `min(1, α·L_out·L_feat)` (or its
//! single-factor ablations) is subtracted from the ID loss, and a clamped
//! term contributes no gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csvio::{self, CsvTable};
use crate::domains::{epoch_batches, DomainPair, MixedBatch};
use crate::error::{Error, Result};
use crate::evalcli::metrics::{domain_metrics, MetricsRecord};
use crate::numerics::{
    cross_entropy, divergence, median_bandwidths, mmd, optimizer_step, Architecture, Cotangents,
    DenseMatrix, KlDirection, MlpModel, Mode, ModelGrads, OptimizerConfig, OptimizerState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherVariant {
    Sl,
    Ntl,
    NtlCls,
    #[serde(rename = "sl2domain")]
    Sl2Domain,
    NtlWoMmd,
    NtlWoKl,
}

impl TeacherVariant {
    pub const ALL: [TeacherVariant; 6] = [
        TeacherVariant::Sl,
        TeacherVariant::NtlCls,
        TeacherVariant::Ntl,
        TeacherVariant::Sl2Domain,
        TeacherVariant::NtlWoMmd,
        TeacherVariant::NtlWoKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TeacherVariant::Sl => "sl",
            TeacherVariant::Ntl => "ntl",
            TeacherVariant::NtlCls => "ntl_cls",
            TeacherVariant::Sl2Domain => "sl2domain",
            TeacherVariant::NtlWoMmd => "ntl_wo_mmd",
            TeacherVariant::NtlWoKl => "ntl_wo_kl",
        }
    }

    pub fn uses_ood(self) -> bool {
        self != TeacherVariant::Sl
    }

    fn class_weighted(self) -> bool {
        matches!(
            self,
            TeacherVariant::NtlCls
                | TeacherVariant::Sl2Domain
                | TeacherVariant::NtlWoMmd
                | TeacherVariant::NtlWoKl
        )
    }
}

impl std::str::FromStr for TeacherVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TeacherVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown teacher variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtlConfig {
    pub alpha: f64,
    pub lambda_cls: f64,
    pub epochs: usize,
    /// Full mixed batch; half ID, half OOD.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub batch_norm: bool,
    pub kl_direction: KlDirection,
    /// Evaluate accuracies every this many epochs (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for NtlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda_cls: 1.0,
            epochs: 200,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
            batch_norm: true,
            kl_direction: KlDirection::ReferenceTarget,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl NtlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lambda_cls >= 0.0) {
            return Err(Error::InvalidArgument("alpha and lambda_cls must be ≥ 0".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidArgument("batch_size must be even and ≥ 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_out: f64,
    pub l_feat: f64,
    pub l_cls: f64,
    pub clamp_active: bool,
    pub l_total: f64,
}

/// Loss values plus the gradient of `l_total` w.r.t. parameters and inputs.
#[derive(Debug, Clone)]
pub struct NtlObjective {
    pub losses: LossBreakdown,
    pub grads: ModelGrads,
    /// Gradient w.r.t. the stacked `[id; ood]` input (ID rows only for `Sl`).
    pub d_input: DenseMatrix,
    pub forward: crate::numerics::Forward,
}

/// Evaluates the variant's objective on one paired batch without touching
/// running statistics.
///
/// MMD bandwidths come from the batch's own features and are treated as
/// constants when differentiating.
pub fn ntl_objective(
    teacher: &MlpModel,
    batch: &MixedBatch,
    variant: TeacherVariant,
    cfg: &NtlConfig,
    y_ood: usize,
    mode: Mode,
) -> Result<NtlObjective> {
    objective(teacher, batch, variant, cfg, y_ood, mode, None)
}

/// [`ntl_objective`] with caller-chosen MMD bandwidths, which makes the
/// objective a smooth function of the parameters (useful for gradient checks).
pub fn ntl_objective_with_bandwidths(
    teacher: &MlpModel,
    batch: &MixedBatch,
    variant: TeacherVariant,
    cfg: &NtlConfig,
    y_ood: usize,
    mode: Mode,
    bandwidths: &[f64],
) -> Result<NtlObjective> {
    objective(teacher, batch, variant, cfg, y_ood, mode, Some(bandwidths))
}

fn objective(
    teacher: &MlpModel,
    batch: &MixedBatch,
    variant: TeacherVariant,
    cfg: &NtlConfig,
    y_ood: usize,
    mode: Mode,
    bandwidths: Option<&[f64]>,
) -> Result<NtlObjective> {
    let classes = teacher.output_width();
    if y_ood >= classes {
        return Err(Error::LabelOutOfRange {
            label: y_ood,
            classes,
        });
    }
    let half = batch.id_half.len();
    if variant.uses_ood() && batch.ood_half.len() != half {
        return Err(Error::shape("ntl_objective", half, batch.ood_half.len()));
    }
    let x = if variant.uses_ood() {
        DenseMatrix::vstack(&batch.id_half.points, &batch.ood_half.points)?
    } else {
        batch.id_half.points.clone()
    };
    let fwd = teacher.forward_frozen(&x, mode)?;
    let n = x.rows();
    let mut d_logits = DenseMatrix::zeros(n, classes);
    let mut d_feat = DenseMatrix::zeros(n, fwd.features.cols());
    let mut losses = LossBreakdown::default();

    let id_logits = fwd.logits.slice_rows(0, half);
    let ce = cross_entropy(&id_logits, &batch.id_half.labels)?;
    losses.l_id = ce.value;
    add_rows(&mut d_logits, 0, &ce.grad, 1.0);
    losses.l_total = ce.value;

    if variant.uses_ood() {
        let ood_logits = fwd.logits.slice_rows(half, n);
        let id_feat = fwd.features.slice_rows(0, half);
        let ood_feat = fwd.features.slice_rows(half, n);

        // Output-level discrepancy, ID output as the reference side.
        let out = divergence(&ood_logits, &id_logits, cfg.kl_direction)?;
        losses.l_out = out.value;
        let feat = match bandwidths {
            Some(bw) => mmd(&ood_feat, &id_feat, bw)?,
            None => mmd(&ood_feat, &id_feat, &median_bandwidths(&ood_feat, &id_feat)?)?,
        };
        losses.l_feat = feat.value;

        let (term, d_out_coef, d_feat_coef) = match variant {
            TeacherVariant::Ntl | TeacherVariant::NtlCls => (
                cfg.alpha * out.value * feat.value,
                cfg.alpha * feat.value,
                cfg.alpha * out.value,
            ),
            TeacherVariant::NtlWoMmd => (cfg.alpha * out.value, cfg.alpha, 0.0),
            TeacherVariant::NtlWoKl => (cfg.alpha * feat.value, 0.0, cfg.alpha),
            TeacherVariant::Sl2Domain | TeacherVariant::Sl => (0.0, 0.0, 0.0),
        };
        let repels = !matches!(variant, TeacherVariant::Sl2Domain);
        if repels {
            if term >= 1.0 {
                losses.clamp_active = true;
                losses.l_total -= 1.0;
            } else {
                losses.l_total -= term;
                add_rows(&mut d_logits, half, &out.d_a, -d_out_coef);
                add_rows(&mut d_logits, 0, &out.d_b, -d_out_coef);
                add_rows(&mut d_feat, half, &feat.d_x, -d_feat_coef);
                add_rows(&mut d_feat, 0, &feat.d_y, -d_feat_coef);
            }
        }

        let ood_targets = vec![y_ood; half];
        let cls = cross_entropy(&ood_logits, &ood_targets)?;
        losses.l_cls = cls.value;
        if variant.class_weighted() {
            losses.l_total += cfg.lambda_cls * cls.value;
            add_rows(&mut d_logits, half, &cls.grad, cfg.lambda_cls);
        }
    }

    let cot = Cotangents {
        logits: Some(d_logits),
        features: Some(d_feat),
        ..Cotangents::default()
    };
    let (grads, d_input) = teacher.backward_with(&fwd.trace, &cot)?;
    Ok(NtlObjective {
        losses,
        grads,
        d_input,
        forward: fwd,
    })
}

/// Loss breakdown only; see [`ntl_objective`].
pub fn ntl_losses(
    teacher: &MlpModel,
    batch: &MixedBatch,
    variant: TeacherVariant,
    cfg: &NtlConfig,
    y_ood: usize,
) -> Result<LossBreakdown> {
    Ok(ntl_objective(teacher, batch, variant, cfg, y_ood, Mode::Train)?.losses)
}

fn add_rows(dst: &mut DenseMatrix, offset: usize, src: &DenseMatrix, scale: f64) {
    for i in 0..src.rows() {
        let (d, s) = (dst.row_mut(offset + i), src.row(i));
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    /// Batch-averaged losses; `clamp_active` is true if any batch clamped.
    pub losses: LossBreakdown,
    pub metrics: Option<MetricsRecord>,
}

pub const TEACHER_HISTORY_HEADER: [&str; 9] = [
    "epoch", "l_id", "l_out", "l_feat", "l_cls", "l_total", "iacc", "oacc", "olacc",
];

pub fn teacher_history_csv(history: &[TeacherEpoch]) -> String {
    let mut t = CsvTable::new(&TEACHER_HISTORY_HEADER);
    for h in history {
        let l = &h.losses;
        t.push(vec![
            h.epoch.to_string(),
            csvio::real(l.l_id),
            csvio::real(l.l_out),
            csvio::real(l.l_feat),
            csvio::real(l.l_cls),
            csvio::real(l.l_total),
            csvio::opt_real(h.metrics.as_ref().map(|m| m.iacc)),
            csvio::opt_real(h.metrics.as_ref().map(|m| m.oacc)),
            csvio::opt_real(h.metrics.as_ref().map(|m| m.olacc)),
        ]);
    }
    t.render()
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: MlpModel,
    pub history: Vec<TeacherEpoch>,
}

pub fn train_teacher(
    variant: TeacherVariant,
    pair: &DomainPair,
    cfg: &NtlConfig,
) -> Result<TrainedTeacher> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(&Architecture::toy_classifier(cfg.batch_norm), &mut rng)?;
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(pair, cfg.batch_size, &mut rng)?;
        let mut sum = LossBreakdown::default();
        for batch in &batches {
            let obj = ntl_objective(&model, batch, variant, cfg, pair.y_ood, Mode::Train)?;
            if !obj.losses.l_total.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("{} teacher loss", variant.name()),
                    epoch,
                });
            }
            model.update_running_stats(&obj.forward.trace);
            optimizer_step(&mut model, &obj.grads, &mut opt)?;
            sum.l_id += obj.losses.l_id;
            sum.l_out += obj.losses.l_out;
            sum.l_feat += obj.losses.l_feat;
            sum.l_cls += obj.losses.l_cls;
            sum.l_total += obj.losses.l_total;
            sum.clamp_active |= obj.losses.clamp_active;
        }
        let k = batches.len().max(1) as f64;
        let losses = LossBreakdown {
            l_id: sum.l_id / k,
            l_out: sum.l_out / k,
            l_feat: sum.l_feat / k,
            l_cls: sum.l_cls / k,
            clamp_active: sum.clamp_active,
            l_total: sum.l_total / k,
        };
        let metrics = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            Some(domain_metrics(&model, pair)?)
        } else {
            None
        };
        history.push(TeacherEpoch {
            epoch,
            losses,
            metrics,
        });
    }
    Ok(TrainedTeacher { model, history })
}
