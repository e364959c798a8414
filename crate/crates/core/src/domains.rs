//! Three-class 2D toy domains with covariate shift, plus batch samplers.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csvio::{self, CsvTable};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub points: DenseMatrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(points: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if points.rows() != labels.len() {
            return Err(Error::shape("LabeledSet::new", points.rows(), labels.len()));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// `x,y,label`, one row per point.
    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::new(&["x", "y", "label"]);
        for (p, &l) in self.points.iter_rows().zip(&self.labels) {
            t.push(vec![csvio::real(p[0]), csvio::real(p[1]), l.to_string()]);
        }
        t.render()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let t = CsvTable::parse(text, &["x", "y", "label"])?;
        let mut rows = Vec::with_capacity(t.rows.len());
        let mut labels = Vec::with_capacity(t.rows.len());
        for (i, r) in t.rows.iter().enumerate() {
            rows.push(vec![csvio::parse_real(&r[0], i + 2)?, csvio::parse_real(&r[1], i + 2)?]);
            labels.push(r[2].parse().map_err(|_| Error::Csv {
                line: i + 2,
                message: format!("bad label `{}`", r[2]),
            })?);
        }
        let points = if rows.is_empty() {
            DenseMatrix::zeros(0, 2)
        } else {
            DenseMatrix::from_rows(&rows)?
        };
        Self::new(points, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.min_x && p[0] <= self.max_x && p[1] >= self.min_y && p[1] <= self.max_y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub id_train: LabeledSet,
    pub id_test: LabeledSet,
    pub ood_train: LabeledSet,
    pub ood_test: LabeledSet,
    pub y_ood: usize,
    pub bounding_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub centers: [[f64; 2]; NUM_CLASSES],
    pub std: f64,
    pub translation: [f64; 2],
    /// Radians, about the origin, applied before the translation.
    pub rotation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub y_ood: usize,
    /// Relabel every OOD point to `y_ood`.
    pub open_set: bool,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            centers: [[0.0, 2.0], [-2.0, -1.0], [2.0, -1.0]],
            std: 0.45,
            translation: [4.5, 4.5],
            rotation: 0.0,
            train_per_class: 300,
            test_per_class: 300,
            y_ood: 1,
            open_set: false,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }

    /// Class centers after the OOD transform.
    pub fn ood_centers(&self) -> [[f64; 2]; NUM_CLASSES] {
        self.centers.map(|c| self.transform(c))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "blob std must be positive, got {}",
                self.std
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("sample counts must be positive".into()));
        }
        if self.y_ood >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange {
                label: self.y_ood,
                classes: NUM_CLASSES,
            });
        }
        if !self.rotation.is_finite() || self.rotation.abs() > 4.0 * PI {
            return Err(Error::InvalidArgument("rotation must be a finite angle".into()));
        }
        Ok(())
    }
}

fn sample_blobs<R: Rng>(
    spec: &ToySpec,
    per_class: usize,
    ood: bool,
    rng: &mut R,
) -> Result<LabeledSet> {
    let mut data = Vec::with_capacity(NUM_CLASSES * per_class * 2);
    let mut labels = Vec::with_capacity(NUM_CLASSES * per_class);
    for (class, center) in spec.centers.iter().enumerate() {
        for _ in 0..per_class {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let mut p = [center[0] + spec.std * dx, center[1] + spec.std * dy];
            if ood {
                p = spec.transform(p);
            }
            data.extend_from_slice(&p);
            labels.push(if ood && spec.open_set { spec.y_ood } else { class });
        }
    }
    LabeledSet::new(DenseMatrix::from_vec(labels.len(), 2, data)?, labels)
}

pub fn make_toy_domains(spec: &ToySpec) -> Result<DomainPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let id_train = sample_blobs(spec, spec.train_per_class, false, &mut rng)?;
    let id_test = sample_blobs(spec, spec.test_per_class, false, &mut rng)?;
    let ood_train = sample_blobs(spec, spec.train_per_class, true, &mut rng)?;
    let ood_test = sample_blobs(spec, spec.test_per_class, true, &mut rng)?;

    let mut bb = BoundingBox {
        min_x: f64::INFINITY,
        min_y: f64::INFINITY,
        max_x: f64::NEG_INFINITY,
        max_y: f64::NEG_INFINITY,
    };
    for set in [&id_train, &id_test, &ood_train, &ood_test] {
        for p in set.points.iter_rows() {
            bb.min_x = bb.min_x.min(p[0]);
            bb.min_y = bb.min_y.min(p[1]);
            bb.max_x = bb.max_x.max(p[0]);
            bb.max_y = bb.max_y.max(p[1]);
        }
    }
    let pad_x = 0.1 * (bb.max_x - bb.min_x).max(1.0);
    let pad_y = 0.1 * (bb.max_y - bb.min_y).max(1.0);
    bb.min_x -= pad_x;
    bb.max_x += pad_x;
    bb.min_y -= pad_y;
    bb.max_y += pad_y;

    Ok(DomainPair {
        id_train,
        id_test,
        ood_train,
        ood_test,
        y_ood: spec.y_ood,
        bounding_box: bb,
    })
}

/// Row-paired halves of one NTL training batch.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub id_half: LabeledSet,
    pub ood_half: LabeledSet,
}

fn check_batch(pair: &DomainPair, batch: usize) -> Result<usize> {
    if batch == 0 || batch % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "mixed batch size must be a positive even number, got {batch}"
        )));
    }
    let half = batch / 2;
    if half > pair.id_train.len() || half > pair.ood_train.len() {
        return Err(Error::InvalidArgument(format!(
            "half batch {half} exceeds a training split"
        )));
    }
    Ok(half)
}

/// `B/2` ID rows and `B/2` OOD rows, each drawn without replacement.
pub fn mixed_batch<R: Rng>(pair: &DomainPair, batch: usize, rng: &mut R) -> Result<MixedBatch> {
    let half = check_batch(pair, batch)?;
    let id_idx = sample(rng, pair.id_train.len(), half).into_vec();
    let ood_idx = sample(rng, pair.ood_train.len(), half).into_vec();
    Ok(MixedBatch {
        id_half: pair.id_train.select(&id_idx),
        ood_half: pair.ood_train.select(&ood_idx),
    })
}

/// One pass over the training splits: both are shuffled and cut into
/// `B/2`-row chunks; the shorter split bounds the number of batches and a
/// trailing partial chunk is dropped.
pub fn epoch_batches<R: Rng>(pair: &DomainPair, batch: usize, rng: &mut R) -> Result<Vec<MixedBatch>> {
    let half = check_batch(pair, batch)?;
    let id_perm = sample(rng, pair.id_train.len(), pair.id_train.len()).into_vec();
    let ood_perm = sample(rng, pair.ood_train.len(), pair.ood_train.len()).into_vec();
    let steps = pair.id_train.len().min(pair.ood_train.len()) / half;
    Ok((0..steps)
        .map(|s| MixedBatch {
            id_half: pair.id_train.select(&id_perm[s * half..(s + 1) * half]),
            ood_half: pair.ood_train.select(&ood_perm[s * half..(s + 1) * half]),
        })
        .collect())
}

/// i.i.d. standard normal `rows × dim` matrix.
pub fn noise_batch<R: Rng>(rows: usize, dim: usize, rng: &mut R) -> Result<DenseMatrix> {
    if rows == 0 || dim == 0 {
        return Err(Error::InvalidArgument("noise batch needs positive shape".into()));
    }
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    DenseMatrix::from_vec(rows, dim, data)
}
