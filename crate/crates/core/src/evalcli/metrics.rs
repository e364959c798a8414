//! Accuracy metrics on the toy domains.

use serde::{Deserialize, Serialize};

use crate::domains::{DomainPair, LabeledSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TrueLabel,
    OodClass(usize),
}

/// IAcc, OAcc, OLAcc and ASR. ASR is OLAcc: the OOD domain stands in for
/// the triggered data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iacc: f64,
    pub oacc: f64,
    pub olacc: f64,
    pub asr: f64,
}

pub fn accuracy(predictions: &[usize], targets: impl Iterator<Item = usize>) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (p, t) in predictions.iter().zip(targets) {
        hits += usize::from(*p == t);
        n += 1;
    }
    hits as f64 / n as f64
}

pub fn evaluate(model: &MlpModel, set: &LabeledSet, mode: EvalMode) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
    }
    let pred = model.predict(&set.points)?;
    Ok(match mode {
        EvalMode::TrueLabel => accuracy(&pred, set.labels.iter().copied()),
        EvalMode::OodClass(y) => accuracy(&pred, std::iter::repeat(y)),
    })
}

pub fn domain_metrics(model: &MlpModel, pair: &DomainPair) -> Result<MetricsRecord> {
    let iacc = evaluate(model, &pair.id_test, EvalMode::TrueLabel)?;
    let ood_pred = model.predict(&pair.ood_test.points)?;
    let oacc = accuracy(&ood_pred, pair.ood_test.labels.iter().copied());
    let olacc = accuracy(&ood_pred, std::iter::repeat(pair.y_ood));
    Ok(MetricsRecord {
        iacc,
        oacc,
        olacc,
        asr: olacc,
    })
}

/// `confusion[true][pred]` counts.
pub fn confusion(model: &MlpModel, set: &LabeledSet) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES]> {
    let pred = model.predict(&set.points)?;
    let mut c = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&t, &p) in set.labels.iter().zip(&pred) {
        c[t][p.min(NUM_CLASSES - 1)] += 1;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_toy_domains, ToySpec};
    use crate::numerics::{Activation, Architecture, DenseMatrix, LinearLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Ignores its input and always predicts `class`.
    fn constant(class: usize) -> MlpModel {
        let mut bias = vec![0.0; 3];
        bias[class] = 1.0;
        MlpModel::new(
            vec![LinearLayer {
                weight: DenseMatrix::zeros(3, 2),
                bias,
                bn: None,
                activation: Activation::None,
            }],
            0,
        )
        .unwrap()
    }

    fn set(labels: &[usize]) -> LabeledSet {
        LabeledSet::new(DenseMatrix::zeros(labels.len(), 2), labels.to_vec()).unwrap()
    }

    #[test]
    fn constant_predictor_scores_label_fraction() {
        let s = set(&[0, 1, 1, 2, 1]);
        assert!((evaluate(&constant(1), &s, EvalMode::TrueLabel).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(evaluate(&constant(2), &s, EvalMode::OodClass(2)).unwrap(), 1.0);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(evaluate(&constant(0), &set(&[]), EvalMode::TrueLabel).is_err());
    }

    #[test]
    fn random_models_sit_at_chance() {
        let pair = make_toy_domains(&ToySpec::default()).unwrap();
        let mut total = 0.0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = MlpModel::init(&Architecture::toy_classifier(true), &mut rng).unwrap();
            total += evaluate(&m, &pair.id_test, EvalMode::TrueLabel).unwrap();
        }
        let mean = total / 200.0;
        assert!((mean - 1.0 / 3.0).abs() < 0.06, "mean accuracy {mean}");
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let pair = make_toy_domains(&ToySpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MlpModel::init(&Architecture::toy_classifier(false), &mut rng).unwrap();
        let c = confusion(&m, &pair.id_test).unwrap();
        let counts = pair.id_test.class_counts();
        for k in 0..3 {
            assert_eq!(c[k].iter().sum::<usize>(), counts[k]);
        }
        let diag: usize = (0..3).map(|k| c[k][k]).sum();
        let acc = evaluate(&m, &pair.id_test, EvalMode::TrueLabel).unwrap();
        assert!((diag as f64 / pair.id_test.len() as f64 - acc).abs() < 1e-15);
    }
}
