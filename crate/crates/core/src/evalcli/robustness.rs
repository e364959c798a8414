//! Prediction consistency under untargeted attacks of growing length.

use rand::Rng;

use crate::atesc::{group_split, pgd_untargeted, AttackConfig};
use crate::csvio::{self, CsvTable};
use crate::domains::LabeledSet;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, MlpModel};

/// Fraction of rows whose teacher argmax survives `pgd_untargeted`.
pub fn consistency<R: Rng + ?Sized>(
    teacher: &MlpModel,
    x: &DenseMatrix,
    atk: &AttackConfig,
    rng: &mut R,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("cannot probe an empty set".into()));
    }
    if atk.steps == 0 {
        return Ok(1.0);
    }
    let adv = pgd_untargeted(teacher, x, atk, rng)?;
    let g = group_split(teacher, x, &adv)?;
    Ok(g.n_robust() as f64 / g.len() as f64)
}

/// `(K, consistency)` for every K in `steps`, all other attack settings fixed.
pub fn robustness_consistency<R: Rng + ?Sized>(
    teacher: &MlpModel,
    set: &LabeledSet,
    atk: &AttackConfig,
    steps: &[usize],
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("empty attack-step grid".into()));
    }
    steps
        .iter()
        .map(|&k| {
            let a = AttackConfig { steps: k, ..*atk };
            consistency(teacher, &set.points, &a, rng).map(|c| (k, c))
        })
        .collect()
}

pub const PROBE_HEADER: [&str; 3] = ["k", "consistency_id", "consistency_ood"];

pub fn probe_csv(id: &[(usize, f64)], ood: &[(usize, f64)]) -> String {
    let mut t = CsvTable::new(&PROBE_HEADER);
    for ((k, a), (_, b)) in id.iter().zip(ood) {
        t.push(vec![k.to_string(), csvio::real(*a), csvio::real(*b)]);
    }
    t.render()
}
