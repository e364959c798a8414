//! End-to-end runs, sweeps and the variant × distiller matrix.
//!
//! Every run owns its output directory. Nothing written depends on wall-clock
//! time, so a directory is a pure function of the resolved config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_load, checkpoint_save};
use super::config::ExperimentConfig;
use super::grid::export_decision_grid;
use super::metrics::{domain_metrics, MetricsRecord};
use super::robustness::{probe_csv, robustness_consistency};
use crate::atesc::{attack, distill, group_split, grouped_csv, Distiller};
use crate::csvio::{self, CsvTable};
use crate::dfkd::{distill_history_csv, synthetic_csv};
use crate::domains::{make_toy_domains, noise_batch, DomainPair};
use crate::error::{Error, Result};
use crate::ntl::{teacher_history_csv, train_teacher, TeacherVariant};
use crate::numerics::MlpModel;

pub const FAILED_MARKER: &str = "FAILED";
pub const METRICS_HEADER: [&str; 5] = ["model", "iacc", "oacc", "olacc", "asr"];

/// Offset mixed into the run seed for export-only randomness, so exports
/// never disturb the training stream.
const EXPORT_STREAM: u64 = 0x5eed_e4a0;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metrics_row(name: &str, m: &MetricsRecord) -> Vec<String> {
    vec![
        name.to_string(),
        csvio::real(m.iacc),
        csvio::real(m.oacc),
        csvio::real(m.olacc),
        csvio::real(m.asr),
    ]
}

fn config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config is always serializable")
}

/// Runs `body` in `dir`; on error leaves a `FAILED` marker holding the message.
fn guarded<T>(dir: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    body().inspect_err(|e| {
        // Best effort: the original error matters more than a failed marker write.
        let _ = fs::write(&marker, format!("{e}\n"));
    })
}

/// Loads the configured teacher checkpoint, or trains one and writes its history.
fn obtain_teacher(cfg: &ExperimentConfig, pair: &DomainPair, dir: &Path) -> Result<MlpModel> {
    if let Some(path) = &cfg.teacher.checkpoint {
        return Ok(checkpoint_load(path)?.model);
    }
    let trained = train_teacher(cfg.teacher.variant, pair, &cfg.teacher.training)?;
    write(&dir.join("teacher_history.csv"), &teacher_history_csv(&trained.history))?;
    Ok(trained.model)
}

/// Final accuracies of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub teacher: MetricsRecord,
    pub student: MetricsRecord,
    /// Mean fragile share of probed batches; `None` for the baseline.
    pub fragile_fraction: Option<f64>,
}

/// Trains (or loads) the teacher and writes its artifacts only.
pub fn run_teacher(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsRecord> {
    guarded(out, || {
        cfg.validate()?;
        let pair = make_toy_domains(&cfg.domain)?;
        let teacher = obtain_teacher(cfg, &pair, out)?;
        let m = domain_metrics(&teacher, &pair)?;
        checkpoint_save(&out.join("teacher.ckpt"), &teacher, cfg.seed(), &config_value(cfg))?;
        let mut t = CsvTable::new(&METRICS_HEADER);
        t.push(metrics_row("teacher", &m));
        write(&out.join("metrics.csv"), &t.render())?;
        write(
            &out.join("grid_teacher.csv"),
            &export_decision_grid(&teacher, &pair.bounding_box, cfg.eval.grid_resolution)?,
        )?;
        write(&out.join("config.resolved.json"), &cfg.to_json())?;
        Ok(m)
    })
}

/// Teacher, distillation and every export for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    guarded(out, || {
        cfg.validate()?;
        let pair = make_toy_domains(&cfg.domain)?;
        let teacher = obtain_teacher(cfg, &pair, out)?;
        let cfg_json = config_value(cfg);
        checkpoint_save(&out.join("teacher.ckpt"), &teacher, cfg.seed(), &cfg_json)?;

        let run = distill(cfg.eval.distiller, &teacher, &cfg.dfkd, &cfg.atesc, Some(&pair))?;
        checkpoint_save(&out.join("student.ckpt"), &run.student, cfg.seed(), &cfg_json)?;
        write(&out.join("history.csv"), &distill_history_csv(&run.history))?;

        let outcome = RunOutcome {
            teacher: domain_metrics(&teacher, &pair)?,
            student: domain_metrics(&run.student, &pair)?,
            fragile_fraction: mean(run.history.iter().filter_map(|h| h.fragile_fraction())),
        };
        let mut t = CsvTable::new(&METRICS_HEADER);
        t.push(metrics_row("teacher", &outcome.teacher));
        t.push(metrics_row("student", &outcome.student));
        write(&out.join("metrics.csv"), &t.render())?;

        let r = cfg.eval.grid_resolution;
        write(
            &out.join("grid_teacher.csv"),
            &export_decision_grid(&teacher, &pair.bounding_box, r)?,
        )?;
        write(
            &out.join("grid_student.csv"),
            &export_decision_grid(&run.student, &pair.bounding_box, r)?,
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed() ^ EXPORT_STREAM);
        let noise = noise_batch(cfg.eval.export_batch, cfg.dfkd.noise_dim, &mut rng)?;
        let synth = run.generator.logits(&noise)?;
        write(&out.join("synthetic.csv"), &synthetic_csv(&teacher, &synth)?)?;
        if cfg.eval.distiller != Distiller::Baseline {
            let probed = attack(&teacher, &synth, &cfg.atesc, &mut rng)?;
            let grouped = group_split(&teacher, &synth, &probed)?;
            write(&out.join("grouped.csv"), &grouped_csv(&grouped))?;
        }
        write(&out.join("config.resolved.json"), &cfg.to_json())?;
        Ok(outcome)
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Robustness curves of the teacher on the ID and OOD test sets.
pub fn run_probe(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(usize, f64, f64)>> {
    guarded(out, || {
        cfg.validate()?;
        let pair = make_toy_domains(&cfg.domain)?;
        let teacher = obtain_teacher(cfg, &pair, out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed() ^ EXPORT_STREAM);
        let atk = &cfg.atesc.attack;
        let id = robustness_consistency(&teacher, &pair.id_test, atk, &cfg.eval.probe_steps, &mut rng)?;
        let ood =
            robustness_consistency(&teacher, &pair.ood_test, atk, &cfg.eval.probe_steps, &mut rng)?;
        write(&out.join("probe.csv"), &probe_csv(&id, &ood))?;
        write(&out.join("config.resolved.json"), &cfg.to_json())?;
        Ok(id.iter().zip(&ood).map(|(a, b)| (a.0, a.1, b.1)).collect())
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

/// Trains one teacher per key in parallel and stores each as a checkpoint.
fn cached_teachers<K: Sync>(
    keys: &[K],
    dir: &Path,
    jobs: usize,
    setup: impl Fn(&K) -> (ExperimentConfig, String) + Sync,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pool(jobs)?.install(|| {
        keys.par_iter()
            .map(|k| {
                let (cfg, name) = setup(k);
                let sub = dir.join(&name);
                run_teacher(&cfg, &sub)?;
                Ok(sub.join("teacher.ckpt"))
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Epsilon,
    Lambda,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Lambda => "lambda",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepAxis::Epsilon => cfg.atesc.attack.epsilon = value,
            SweepAxis::Lambda => cfg.atesc.lambda = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub outcome: RunOutcome,
}

pub const SWEEP_HEADER: [&str; 8] = [
    "axis", "value", "seed", "iacc", "oacc", "olacc", "asr", "fragile_fraction",
];

/// Runs every `(value, seed)` pair under ATEsc (the baseline ignores both axes).
/// Teachers are trained once per seed and shared across values.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidArgument("a sweep needs at least one value and one seed".into()));
    }
    let mut base = base.clone();
    if base.eval.distiller == Distiller::Baseline {
        base.eval.distiller = Distiller::Atesc;
    }
    let teachers = match &base.teacher.checkpoint {
        Some(p) => vec![p.clone(); spec.seeds.len()],
        None => cached_teachers(&spec.seeds, &out.join("teachers"), jobs, |&s| {
            (base.clone().with_seed(s), format!("seed_{s}"))
        })?,
    };

    let points: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.seeds.len()).map(move |i| (v, i)))
        .collect();
    let results: Vec<SweepPoint> = pool(jobs)?.install(|| {
        points
            .par_iter()
            .map(|&(value, i)| {
                let seed = spec.seeds[i];
                let mut cfg = base.clone().with_seed(seed);
                cfg.teacher.checkpoint = Some(teachers[i].clone());
                spec.axis.apply(&mut cfg, value);
                let dir = out.join(format!("{}_{value}_seed_{seed}", spec.axis.name()));
                run_experiment(&cfg, &dir).map(|outcome| SweepPoint {
                    value,
                    seed,
                    outcome,
                })
            })
            .collect::<Result<_>>()
    })?;

    let mut t = CsvTable::new(&SWEEP_HEADER);
    for p in &results {
        let s = &p.outcome.student;
        t.push(vec![
            spec.axis.name().to_string(),
            csvio::real(p.value),
            p.seed.to_string(),
            csvio::real(s.iacc),
            csvio::real(s.oacc),
            csvio::real(s.olacc),
            csvio::real(s.asr),
            csvio::opt_real(p.outcome.fragile_fraction),
        ]);
    }
    write(&out.join("sweep_summary.csv"), &t.render())?;
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixCell {
    pub variant: TeacherVariant,
    pub distiller: Distiller,
    pub outcome: RunOutcome,
}

pub const MATRIX_HEADER: [&str; 9] = [
    "variant",
    "distiller",
    "teacher_iacc",
    "teacher_oacc",
    "teacher_olacc",
    "iacc",
    "oacc",
    "olacc",
    "asr",
];

/// Every teacher variant distilled by every distiller.
pub fn run_matrix(base: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<MatrixCell>> {
    let variants = TeacherVariant::ALL;
    let teachers = cached_teachers(&variants, &out.join("teachers"), jobs, |&v| {
        let mut cfg = base.clone();
        cfg.teacher.variant = v;
        cfg.teacher.checkpoint = None;
        (cfg, v.name().to_string())
    })?;

    let cells: Vec<(usize, Distiller)> = (0..variants.len())
        .flat_map(|i| Distiller::ALL.into_iter().map(move |d| (i, d)))
        .collect();
    let results: Vec<MatrixCell> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(i, distiller)| {
                let mut cfg = base.clone();
                cfg.teacher.variant = variants[i];
                cfg.teacher.checkpoint = Some(teachers[i].clone());
                cfg.eval.distiller = distiller;
                let dir = out.join(format!("{}_{}", variants[i].name(), distiller.name()));
                run_experiment(&cfg, &dir).map(|outcome| MatrixCell {
                    variant: variants[i],
                    distiller,
                    outcome,
                })
            })
            .collect::<Result<_>>()
    })?;

    let mut t = CsvTable::new(&MATRIX_HEADER);
    for c in &results {
        let (tm, s) = (&c.outcome.teacher, &c.outcome.student);
        t.push(vec![
            c.variant.name().to_string(),
            c.distiller.name().to_string(),
            csvio::real(tm.iacc),
            csvio::real(tm.oacc),
            csvio::real(tm.olacc),
            csvio::real(s.iacc),
            csvio::real(s.oacc),
            csvio::real(s.olacc),
            csvio::real(s.asr),
        ]);
    }
    write(&out.join("matrix_summary.csv"), &t.render())?;
    Ok(results)
}

/// Accuracies of a saved model on the configured domains.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<MetricsRecord> {
    let pair = make_toy_domains(&cfg.domain)?;
    domain_metrics(&checkpoint_load(path)?.model, &pair)
}
