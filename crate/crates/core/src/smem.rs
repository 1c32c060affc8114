//! Split-and-merge refinement.
//!
//! After EM converges, two components that share many points are merged and
//! a poorly fitting component is split in two. The three touched components
//! are re-optimized with everything else held fixed (partial EM), then all
//! parameters are refit; the move is kept only if the likelihood improves.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::em::{e_step, fit_em, total_loglike, EStepResult, FitConfig, FitResult, FixedMask};
use crate::error::{Error, Result};
use crate::gauss::CholeskyFactor;
use crate::model::{derive_seed, rng_from_seed, Dataset, GaussianComponent, MixtureModel};

/// Relative size of the mean perturbation applied to split children.
pub const SPLIT_PERTURBATION: f64 = 0.05;

/// Hard cap on accepted moves in one [`fit_smem`] call.
pub const MAX_ROUNDS: usize = 1000;

/// Merge `j1` and `j2`, split `j3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateTriplet {
    pub j1: usize,
    pub j2: usize,
    pub j3: usize,
    pub merge_score: f64,
    pub split_score: f64,
}

/// Overlap of the responsibility vectors of components `j` and `k`.
pub fn j_merge(es: &EStepResult, j: usize, k: usize) -> f64 {
    es.q.column(j).dot(&es.q.column(k))
}

/// Kullback-Leibler split criterion for component `l`, measured in each
/// record's observed subspace against `N(R m_l, R V_l Rᵀ)`.
///
/// Returns `−∞` for a component without responsibility (or whose projected
/// covariance cannot be factored), which ranks it last.
pub fn j_split(es: &EStepResult, model: &MixtureModel, data: &Dataset, l: usize) -> f64 {
    let ql: f64 = es.q.column(l).iter().sum();
    if !(ql > 0.0) {
        return f64::NEG_INFINITY;
    }
    let c = &model.components[l];
    let mut acc = 0.0;
    for (i, o) in data.observations.iter().enumerate() {
        let qil = es.q[(i, l)];
        if qil == 0.0 {
            continue;
        }
        let cov = o.project_covar(&c.covar);
        let Ok(f) = CholeskyFactor::new(&cov, String::new) else {
            return f64::NEG_INFINITY;
        };
        let logn = f.log_density_of_residual(&(&o.w - o.project(&c.mean)));
        acc += qil * ((qil / ql).ln() - logn);
    }
    acc / ql
}

/// Responsibility-weighted merge of two components.
pub fn merge_components(model: &MixtureModel, j1: usize, j2: usize, totals: &[f64]) -> Result<GaussianComponent> {
    let (a, b) = (&model.components[j1], &model.components[j2]);
    let (q1, q2) = (totals[j1], totals[j2]);
    let q = q1 + q2;
    if !(q > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "components {j1} and {j2} carry no responsibility to merge"
        )));
    }
    let mean = (&a.mean * q1 + &b.mean * q2) / q;
    let covar = (&a.covar * q1 + &b.covar * q2) / q;
    Ok(GaussianComponent::new(a.alpha + b.alpha, mean, covar))
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    loop {
        let u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = u.norm();
        if n > 1e-12 {
            return u / n;
        }
    }
}

/// Split into two half-weight children with isotropic covariance of the
/// same volume, `det(V)^{1/d} I`, and means jittered by
/// `0.05 · det(V)^{1/(2d)}` in opposite directions along a random unit
/// vector. Independent directions can coincide (always with probability
/// 1/2 in one dimension), leaving two identical children EM cannot separate.
pub fn split_component(c: &GaussianComponent, seed: u64) -> Result<(GaussianComponent, GaussianComponent)> {
    let d = c.dim();
    let f = CholeskyFactor::new(&c.covar, || "cannot split a component with det(V) <= 0".into())?;
    let scale = (f.log_det() / d as f64).exp();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::SingularCovariance(
            "cannot split a component with det(V) <= 0".into(),
        ));
    }
    let covar = DMatrix::identity(d, d) * scale;
    let step = SPLIT_PERTURBATION * scale.sqrt();
    let mut rng = rng_from_seed(seed);
    let alpha = c.alpha / 2.0;
    let u = random_unit(&mut rng, d) * step;
    let m1 = &c.mean + &u;
    let m2 = &c.mean - u;
    Ok((
        GaussianComponent::new(alpha, m1, covar.clone()),
        GaussianComponent::new(alpha, m2, covar),
    ))
}

/// All merge/split triplets: pairs by decreasing `J_merge`, and within a
/// pair the remaining components by decreasing `J_split`. Ties keep
/// ascending index order.
pub fn rank_candidates(es: &EStepResult, model: &MixtureModel, data: &Dataset) -> Vec<CandidateTriplet> {
    let k = model.k();
    if k < 3 {
        return Vec::new();
    }
    let split: Vec<f64> = (0..k).map(|l| j_split(es, model, data, l)).collect();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(k * (k - 1) / 2);
    for j in 0..k {
        for l in (j + 1)..k {
            pairs.push((j, l, j_merge(es, j, l)));
        }
    }
    // stable sort: equal scores stay in lexicographic order
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut out = Vec::with_capacity(pairs.len() * (k - 2));
    for (j1, j2, merge_score) in pairs {
        let mut rest: Vec<usize> = (0..k).filter(|&l| l != j1 && l != j2).collect();
        rest.sort_by(|&a, &b| split[b].total_cmp(&split[a]));
        out.extend(rest.into_iter().map(|j3| CandidateTriplet {
            j1,
            j2,
            j3,
            merge_score,
            split_score: split[j3],
        }));
    }
    out
}

/// EM over the `affected` components only; every other component, its
/// amplitude included, is held fixed, so the affected amplitudes keep their
/// total.
pub fn partial_em(data: &Dataset, model: &MixtureModel, affected: &[usize], config: &FitConfig) -> Result<FitResult> {
    if let Some(&bad) = affected.iter().find(|&&j| j >= model.k()) {
        return Err(Error::InvalidArgument(format!("component {bad} out of range")));
    }
    let fixed = (0..model.k())
        .map(|j| {
            if affected.contains(&j) {
                config.mask(j)
            } else {
                FixedMask::ALL
            }
        })
        .collect();
    let cfg = FitConfig {
        fixed,
        ..config.clone()
    };
    fit_em(data, model, &cfg)
}

/// Build the re-initialized model for one triplet: the merged component
/// replaces `j1`, the split children replace `j2` and `j3`.
pub fn apply_move(model: &MixtureModel, es: &EStepResult, t: &CandidateTriplet, seed: u64) -> Result<MixtureModel> {
    let merged = merge_components(model, t.j1, t.j2, &es.totals())?;
    let (c2, c3) = split_component(&model.components[t.j3], seed)?;
    let mut comps = model.components.clone();
    comps[t.j1] = merged;
    comps[t.j2] = c2;
    comps[t.j3] = c3;
    Ok(MixtureModel {
        d: model.d,
        components: comps,
    })
}

/// Outcome of [`fit_smem`].
#[derive(Debug, Clone)]
pub struct SmemResult {
    pub model: MixtureModel,
    /// `φ` of the returned model.
    pub loglike: f64,
    /// `φ*` after the initial EM run and after every accepted move;
    /// strictly increasing.
    pub accepted: Vec<f64>,
    pub moves: Vec<CandidateTriplet>,
    /// Whether the EM run that produced the returned model converged.
    pub converged: bool,
    /// EM iterations summed over every run, rejected trials included.
    pub iterations: usize,
}

/// EM followed by split-and-merge rounds: try the first
/// `config.splitmerge_depth` candidates in ranked order, accept the first
/// whose refit improves `φ`, re-rank, and stop when a round accepts nothing.
///
/// Triplets touching a component with any fixed parameter are skipped.
/// A trial whose refit fails numerically is treated as rejected.
pub fn fit_smem(data: &Dataset, init: &MixtureModel, config: &FitConfig) -> Result<SmemResult> {
    let first = fit_em(data, init, config)?;
    let mut iterations = first.iterations();
    let mut converged = first.converged;
    let mut best = first.model;
    let depth = config.splitmerge_depth;
    if depth == 0 || best.k() < 3 {
        let loglike = total_loglike(&best, data)?;
        return Ok(SmemResult {
            model: best,
            loglike,
            accepted: vec![loglike],
            moves: Vec::new(),
            converged,
            iterations,
        });
    }
    let mut accepted = Vec::new();
    let mut moves = Vec::new();
    let mut trial_index = 0u64;
    let mut es = e_step(&best, data)?;
    accepted.push(es.loglike);
    for _round in 0..MAX_ROUNDS {
        let phi_star = es.loglike;
        let threshold = phi_star + config.tol * (phi_star.abs() + 1.0);
        let candidates = rank_candidates(&es, &best, data)
            .into_iter()
            .filter(|t| [t.j1, t.j2, t.j3].iter().all(|&j| config.mask(j) == FixedMask::FREE))
            .take(depth);
        let mut winner = None;
        for t in candidates {
            let seed = derive_seed(config.seed, trial_index);
            trial_index += 1;
            match try_move(data, &best, &es, &t, seed, config) {
                Ok((fit, phi, iters)) => {
                    iterations += iters;
                    if phi > threshold {
                        winner = Some((fit, t));
                        break;
                    }
                }
                Err(e) if e.is_numerical() => continue,
                Err(e) => return Err(e),
            }
        }
        let Some((fit, t)) = winner else { break };
        best = fit.model;
        converged = fit.converged;
        moves.push(t);
        es = e_step(&best, data)?;
        accepted.push(es.loglike);
    }
    let loglike = *accepted.last().expect("initial entry");
    Ok(SmemResult {
        model: best,
        loglike,
        accepted,
        moves,
        converged,
        iterations,
    })
}

fn try_move(
    data: &Dataset,
    best: &MixtureModel,
    es: &EStepResult,
    t: &CandidateTriplet,
    seed: u64,
    config: &FitConfig,
) -> Result<(FitResult, f64, usize)> {
    let trial = apply_move(best, es, t, seed)?;
    let partial = partial_em(data, &trial, &[t.j1, t.j2, t.j3], config)?;
    let full = fit_em(data, &partial.model, config)?;
    let phi = total_loglike(&full.model, data)?;
    let iters = partial.iterations() + full.iterations();
    Ok((full, phi, iters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use nalgebra::{dmatrix, dvector};

    fn fake_estep(q: DMatrix<f64>) -> EStepResult {
        // Build a result with the requested responsibilities by running a
        // real E-step and overwriting q.
        let n = q.nrows();
        let k = q.ncols();
        let data = Dataset::with_dim(
            1,
            (0..n)
                .map(|i| Observation::new(dvector![i as f64], dmatrix![1.0]))
                .collect(),
        );
        let model = MixtureModel::new(
            (0..k)
                .map(|_| GaussianComponent::new(1.0 / k as f64, dvector![0.0], dmatrix![1.0]))
                .collect(),
        )
        .unwrap();
        let mut es = e_step(&model, &data).unwrap();
        es.q = q;
        es
    }

    #[test]
    fn merge_criterion_examples() {
        let es = fake_estep(dmatrix![1.0, 0.5, 0.0; 0.0, 0.5, 1.0]);
        assert_eq!(j_merge(&es, 0, 1), 0.5);
        assert_eq!(j_merge(&es, 0, 2), 0.0);
        assert_eq!(j_merge(&es, 1, 1), 0.5);
    }

    #[test]
    fn split_criterion_single_point() {
        let data = Dataset::with_dim(1, vec![Observation::new(dvector![0.0], dmatrix![5.0])]);
        let model = MixtureModel::new(vec![GaussianComponent::new(1.0, dvector![0.0], dmatrix![1.0])]).unwrap();
        let es = e_step(&model, &data).unwrap();
        let v = j_split(&es, &model, &data, 0);
        assert!((v - 0.5 * crate::gauss::LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn split_criterion_empty_component() {
        let mut es = fake_estep(dmatrix![1.0, 0.0; 1.0, 0.0]);
        es.q[(0, 1)] = 0.0;
        let data = Dataset::with_dim(1, vec![Observation::new(dvector![0.0], dmatrix![1.0]); 2]);
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
        ])
        .unwrap();
        assert_eq!(j_split(&es, &model, &data, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn merge_examples() {
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.2, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.3, dvector![5.0], dmatrix![3.0]),
            GaussianComponent::new(0.5, dvector![9.0], dmatrix![1.0]),
        ])
        .unwrap();
        let c = merge_components(&model, 0, 1, &[2.0, 3.0, 1.0]).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert!((c.mean[0] - 3.0).abs() < 1e-15);
        let c = merge_components(&model, 0, 1, &[1.0, 1.0, 1.0]).unwrap();
        assert!((c.covar[(0, 0)] - 2.0).abs() < 1e-15);
        let same = merge_components(&model, 0, 0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(same.mean, model.components[0].mean);
        assert_eq!(same.covar, model.components[0].covar);
        assert_eq!(same.alpha, 0.4);
        assert!(merge_components(&model, 0, 1, &[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn split_examples() {
        let c = GaussianComponent::new(0.4, dvector![1.0, -1.0], dmatrix![4.0, 0.0; 0.0, 1.0]);
        let (a, b) = split_component(&c, 3).unwrap();
        assert_eq!(a.alpha, 0.2);
        assert_eq!(a.alpha + b.alpha, c.alpha);
        for ch in [&a, &b] {
            assert!((&ch.covar - DMatrix::identity(2, 2) * 2.0).amax() < 1e-12);
            let eps = &ch.mean - &c.mean;
            assert!((eps.norm() - 0.05 * 2f64.sqrt()).abs() < 1e-12);
        }
        assert_ne!(a.mean, b.mean);
        assert!((&a.mean + &b.mean - &c.mean * 2.0).amax() < 1e-12);
        let one = GaussianComponent::new(1.0, dvector![5.0], dmatrix![9.0]);
        for seed in 0..8 {
            let (a, b) = split_component(&one, seed).unwrap();
            assert!((a.mean[0] - b.mean[0]).abs() > 0.29);
        }
        assert_eq!(split_component(&c, 3).unwrap(), split_component(&c, 3).unwrap());
        let bad = GaussianComponent::new(0.4, dvector![0.0], dmatrix![0.0]);
        assert!(split_component(&bad, 0).is_err());
    }

    #[test]
    fn candidate_counts_and_ties() {
        for k in 3..6 {
            let es = fake_estep(DMatrix::from_element(4, k, 1.0 / k as f64));
            let data = Dataset::with_dim(
                1,
                (0..4)
                    .map(|i| Observation::new(dvector![i as f64], dmatrix![1.0]))
                    .collect(),
            );
            let model = MixtureModel::new(
                (0..k)
                    .map(|_| GaussianComponent::new(1.0 / k as f64, dvector![0.0], dmatrix![1.0]))
                    .collect(),
            )
            .unwrap();
            let c = rank_candidates(&es, &model, &data);
            assert_eq!(c.len(), k * (k - 1) * (k - 2) / 2);
            // all scores tie, so the order is lexicographic
            let keys: Vec<_> = c.iter().map(|t| (t.j1, t.j2, t.j3)).collect();
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(keys, sorted);
        }
        let es = fake_estep(DMatrix::from_element(2, 2, 0.5));
        let data = Dataset::with_dim(1, vec![Observation::new(dvector![0.0], dmatrix![1.0]); 2]);
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
        ])
        .unwrap();
        assert!(rank_candidates(&es, &model, &data).is_empty());
    }

    #[test]
    fn ranking_prefers_overlapping_pairs() {
        let es = fake_estep(dmatrix![
            0.5, 0.5, 0.0;
            0.45, 0.45, 0.1;
            0.0, 0.0, 1.0
        ]);
        let data = Dataset::with_dim(
            1,
            (0..3)
                .map(|i| Observation::new(dvector![i as f64], dmatrix![1.0]))
                .collect(),
        );
        let model = MixtureModel::new(
            (0..3)
                .map(|_| GaussianComponent::new(1.0 / 3.0, dvector![0.0], dmatrix![1.0]))
                .collect(),
        )
        .unwrap();
        let c = rank_candidates(&es, &model, &data);
        assert_eq!((c[0].j1, c[0].j2, c[0].j3), (0, 1, 2));
    }
}
