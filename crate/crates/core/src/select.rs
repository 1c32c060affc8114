//! Choosing K and w by cross-validated held-out likelihood.

use rand::seq::SliceRandom;

use crate::em::{fit_em, initialize, point_loglikes, FitConfig, FixedMask};
use crate::error::{Error, Result};
use crate::model::{derive_seed, rng_from_seed, Dataset, MixtureModel, Observation};
use crate::smem::fit_smem;

/// What is re-optimized on each training fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restriction {
    /// Fit from scratch (split-and-merge per the config).
    FullRefit,
    /// Start from the full-sample fit and let only the amplitudes move.
    AmplitudesOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub folds: usize,
    pub restriction: Restriction,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            folds: 10,
            restriction: Restriction::FullRefit,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRow {
    pub k: usize,
    pub w: f64,
    pub per_fold: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub rows: Vec<CvRow>,
    pub best_k: usize,
    pub best_w: f64,
}

/// `Σ_i ln p(w_i | θ)` over a held-out set; zero for an empty set.
pub fn heldout_loglike(model: &MixtureModel, observations: &[Observation]) -> Result<f64> {
    Ok(point_loglikes(model, observations)?.iter().sum())
}

/// Seeded shuffle of `0..n` dealt round-robin into `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= folds <= N, got {folds} folds for N = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut out = vec![Vec::new(); folds];
    for (p, i) in idx.into_iter().enumerate() {
        out[p % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let mut held = vec![false; n];
    for &i in fold {
        held[i] = true;
    }
    (0..n).filter(|&i| !held[i]).collect()
}

/// Total cross-validation log-likelihood for every `(K, w)` in the grid.
///
/// The best cell maximizes the total; ties go to the smaller K, then the
/// smaller w.
pub fn cross_validate(
    data: &Dataset,
    k_grid: &[usize],
    w_grid: &[f64],
    plan: &CvPlan,
    config: &FitConfig,
) -> Result<CvTable> {
    if k_grid.is_empty() || w_grid.is_empty() {
        return Err(Error::InvalidArgument("K and w grids must be non-empty".into()));
    }
    let n = data.len();
    let folds = fold_assignment(n, plan.folds, plan.seed)?;
    let min_train = folds.iter().map(|f| n - f.len()).min().unwrap_or(0);
    if let Some(&k) = k_grid.iter().find(|&&k| k == 0 || k > min_train) {
        return Err(Error::InvalidArgument(format!(
            "K = {k} is invalid for training folds of {min_train} points"
        )));
    }
    let mut rows = Vec::with_capacity(k_grid.len() * w_grid.len());
    for &k in k_grid {
        for &w in w_grid {
            let cfg = FitConfig { w, ..config.clone() };
            let per_fold = score_cell(data, &folds, k, &cfg, plan)?;
            let total = per_fold.iter().sum();
            rows.push(CvRow { k, w, per_fold, total });
        }
    }
    let best = rows
        .iter()
        .fold(None::<&CvRow>, |acc, r| match acc {
            None => Some(r),
            Some(b) => {
                let better = r.total > b.total || (r.total == b.total && (r.k < b.k || (r.k == b.k && r.w < b.w)));
                Some(if better { r } else { b })
            }
        })
        .expect("grid is non-empty");
    let (best_k, best_w) = (best.k, best.w);
    Ok(CvTable { rows, best_k, best_w })
}

fn score_cell(data: &Dataset, folds: &[Vec<usize>], k: usize, cfg: &FitConfig, plan: &CvPlan) -> Result<Vec<f64>> {
    let n = data.len();
    let full = match plan.restriction {
        Restriction::AmplitudesOnly => {
            let init = initialize(data, k, cfg.seed)?;
            Some(fit_smem(data, &init, cfg)?.model)
        }
        Restriction::FullRefit => None,
    };
    folds
        .iter()
        .enumerate()
        .map(|(f, held)| {
            let train = data.subset(&complement(n, held));
            let fold_seed = derive_seed(cfg.seed, f as u64);
            let model = match &full {
                None => {
                    let fcfg = FitConfig {
                        seed: fold_seed,
                        ..cfg.clone()
                    };
                    let init = initialize(&train, k, fold_seed)?;
                    fit_smem(&train, &init, &fcfg)?.model
                }
                Some(full) => {
                    let fixed = vec![
                        FixedMask {
                            alpha: false,
                            mean: true,
                            covar: true,
                        };
                        k
                    ];
                    let fcfg = FitConfig {
                        fixed,
                        seed: fold_seed,
                        ..cfg.clone()
                    };
                    fit_em(&train, full, &fcfg)?.model
                }
            };
            let test: Vec<Observation> = held.iter().map(|&i| data.observations[i].clone()).collect();
            heldout_loglike(&model, &test)
        })
        .collect()
}
