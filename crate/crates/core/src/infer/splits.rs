use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldKind {
    LeaveOneCenterOut,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: FoldKind,
    pub folds: Vec<Fold>,
}

/// Builds folds over `(case_id, center_id)` pairs. Leave-one-center-out
/// gives one fold per center; random folds hold out `val_fraction` of the
/// cases using a shuffle seeded from `seed` and the fold index.
pub fn make_splits(
    cases: &[(String, String)],
    kind: FoldKind,
    n_random_folds: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    let ids: BTreeSet<&str> = cases.iter().map(|(c, _)| c.as_str()).collect();
    if ids.len() != cases.len() {
        return Err(Error::Data("case ids must be unique".into()));
    }
    if cases.len() < 2 {
        return Err(Error::Data("need at least two cases to split".into()));
    }
    let folds = match kind {
        FoldKind::LeaveOneCenterOut => {
            let mut by_center: BTreeMap<&str, Vec<String>> = BTreeMap::new();
            for (case, center) in cases {
                by_center.entry(center).or_default().push(case.clone());
            }
            if by_center.len() < 2 {
                return Err(Error::Data(format!(
                    "leave-one-center-out needs at least two centers, found {}",
                    by_center.len()
                )));
            }
            by_center
                .keys()
                .map(|&held| Fold {
                    name: held.to_string(),
                    train: cases.iter().filter(|(_, c)| c != held).map(|(id, _)| id.clone()).collect(),
                    val: by_center[held].clone(),
                })
                .collect()
        }
        FoldKind::Random => {
            if !(val_fraction > 0.0 && val_fraction < 1.0) {
                return Err(Error::Config(format!("val_fraction {val_fraction} must lie in (0, 1)")));
            }
            if n_random_folds == 0 {
                return Err(Error::Config("need at least one random fold".into()));
            }
            let n = cases.len();
            let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
            (0..n_random_folds)
                .map(|f| {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[f as u64])));
                    let (val, train) = order.split_at(n_val);
                    let pick = |idx: &[usize]| {
                        let mut v: Vec<usize> = idx.to_vec();
                        v.sort_unstable();
                        v.into_iter().map(|i| cases[i].0.clone()).collect()
                    };
                    Fold {
                        name: format!("random{f}"),
                        train: pick(train),
                        val: pick(val),
                    }
                })
                .collect()
        }
    };
    Ok(SplitPlan { kind, folds })
}
