//! The deconvolution EM iteration.
//!
//! Each observation is modelled as `w_i = R_i v_i + e_i`, `e_i ~ N(0, S_i)`,
//! with `v_i` drawn from the mixture. Component `j` therefore predicts
//! `w_i ~ N(R_i m_j, T_ij)` with `T_ij = R_i V_j R_iᵀ + S_i`. The E-step
//! computes responsibilities `q_ij` together with the posterior mean
//! `b_ij` and covariance `B_ij` of the latent `v_i`; the M-step re-estimates
//! the mixture from those moments.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, DVectorView, DVectorViewMut};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{cholesky_into, logsumexp, symmetrize, LN_2PI};
use crate::model::{rng_from_seed, Dataset, GaussianComponent, MixtureModel, Observation};

/// Below this total responsibility a component counts as empty.
pub const EMPTY_COMPONENT: f64 = 1e-300;

/// Which parameters of one component are held fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FixedMask {
    pub alpha: bool,
    pub mean: bool,
    pub covar: bool,
}

impl FixedMask {
    pub const FREE: FixedMask = FixedMask {
        alpha: false,
        mean: false,
        covar: false,
    };
    pub const ALL: FixedMask = FixedMask {
        alpha: true,
        mean: true,
        covar: true,
    };

    pub fn union(self, other: FixedMask) -> FixedMask {
        FixedMask {
            alpha: self.alpha || other.alpha,
            mean: self.mean || other.mean,
            covar: self.covar || other.covar,
        }
    }
}

/// General conjugate prior: Dirichlet(γ) on the amplitudes, `N(m̂, V/η)` on
/// each mean and a Wishart(ω, W) on each inverse covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub gamma: Vec<f64>,
    pub eta: f64,
    pub m_hat: DVector<f64>,
    pub omega: f64,
    pub w_scale: DMatrix<f64>,
}

impl Hyperparameters {
    /// `γ = 1`, `η = 0`, `ω = (d+1)/2`, `W = (w/2) I`.
    pub fn reduced(k: usize, d: usize, w: f64) -> Self {
        Hyperparameters {
            gamma: vec![1.0; k],
            eta: 0.0,
            m_hat: DVector::zeros(d),
            omega: (d as f64 + 1.0) / 2.0,
            w_scale: DMatrix::identity(d, d) * (w / 2.0),
        }
    }

    pub fn validate(&self, k: usize, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Hyperparameter(m));
        if self.gamma.len() != k {
            return bad(format!("{} Dirichlet exponents for {k} components", self.gamma.len()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return bad("Dirichlet exponents must be positive".into());
        }
        if !(self.eta >= 0.0) {
            return bad("eta must be non-negative".into());
        }
        if self.m_hat.len() != d || self.w_scale.nrows() != d || self.w_scale.ncols() != d {
            return bad(format!("prior mean / scale do not match d = {d}"));
        }
        if !(self.omega >= (d as f64 + 1.0) / 2.0) {
            return bad(format!("omega must be at least (d+1)/2 = {}", (d as f64 + 1.0) / 2.0));
        }
        crate::model::check_psd(&self.w_scale).or_else(|e| bad(format!("W {e}")))
    }

    /// True when the prior contributes nothing to the covariance update.
    fn covariance_prior_absent(&self, d: usize) -> bool {
        self.eta == 0.0 && self.omega == (d as f64 + 1.0) / 2.0 && self.w_scale.iter().all(|&x| x == 0.0)
    }
}

/// Settings for [`fit_em`] and the drivers built on it.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Stop when `|Δφ| / (|φ| + 1) < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Covariance regularizer; `0` disables it.
    pub w: f64,
    /// Per-component fixed masks; components beyond the end are free.
    pub fixed: Vec<FixedMask>,
    pub seed: u64,
    /// Number of split-and-merge candidates tried per round (0 disables).
    pub splitmerge_depth: usize,
    /// Full prior; when set it replaces the one-parameter `w` update.
    pub prior: Option<Hyperparameters>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: 1e-10,
            max_iter: 10_000,
            w: 0.0,
            fixed: Vec::new(),
            seed: 0,
            splitmerge_depth: 5,
            prior: None,
        }
    }
}

impl FitConfig {
    pub fn mask(&self, j: usize) -> FixedMask {
        self.fixed.get(j).copied().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.w >= 0.0) || !self.w.is_finite() {
            return Err(Error::InvalidArgument("w must be a finite non-negative number".into()));
        }
        Ok(())
    }

    pub(crate) fn converged(&self, prev: f64, cur: f64) -> bool {
        (cur - prev).abs() / (cur.abs() + 1.0) < self.tol
    }
}

/// Posterior quantities for every (observation, component) pair.
#[derive(Debug, Clone)]
pub struct EStepResult {
    n: usize,
    k: usize,
    d: usize,
    /// N×K responsibilities.
    pub q: DMatrix<f64>,
    /// `b_ij` packed as `[(i K + j) d ..][..d]`.
    b: Vec<f64>,
    /// `B_ij` packed column-major, `d²` entries per pair.
    bcov: Vec<f64>,
    /// `ln p(w_i | θ)` per observation.
    pub point_loglike: Vec<f64>,
    /// Total `φ = Σ_i ln p(w_i | θ)`.
    pub loglike: f64,
}

impl EStepResult {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Posterior mean `b_ij` of the latent value.
    pub fn b(&self, i: usize, j: usize) -> DVectorView<'_, f64> {
        let d = self.d;
        let at = (i * self.k + j) * d;
        DVectorView::from_slice(&self.b[at..at + d], d)
    }

    /// Posterior covariance `B_ij` of the latent value.
    pub fn big_b(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        let d = self.d;
        let at = (i * self.k + j) * d * d;
        DMatrixView::from_slice(&self.bcov[at..at + d * d], d, d)
    }

    /// `q_j = Σ_i q_ij`
    pub fn totals(&self) -> Vec<f64> {
        (0..self.k).map(|j| self.q.column(j).iter().sum()).collect()
    }
}

fn check_dims(model: &MixtureModel, o: &Observation, i: usize) -> Result<()> {
    if o.latent_dim() != model.d {
        return Err(Error::Dimension(format!(
            "observation {i} lives in {} latent dimensions, the model in {}",
            o.latent_dim(),
            model.d
        )));
    }
    Ok(())
}

/// Buffers for one observation, reused across components.
struct Workspace {
    /// `Rᵀ` when the observation has a projection
    rt: Option<DMatrix<f64>>,
    /// `V Rᵀ`, d × d_obs
    vrt: DMatrix<f64>,
    /// `T = R V Rᵀ + S` and then its Cholesky factor
    t: DMatrix<f64>,
    l: DMatrix<f64>,
    z: DVector<f64>,
    /// `L⁻¹ R V`, d_obs × d
    x: DMatrix<f64>,
}

impl Workspace {
    fn new(d: usize, o: &Observation) -> Self {
        let d_obs = o.d_obs();
        Workspace {
            rt: o.r.as_ref().map(|r| r.transpose()),
            vrt: DMatrix::zeros(d, d_obs),
            t: DMatrix::zeros(d_obs, d_obs),
            l: DMatrix::zeros(d_obs, d_obs),
            z: DVector::zeros(d_obs),
            x: DMatrix::zeros(d_obs, d),
        }
    }

    /// `ln α_j + ln N(w | R m_j, T_ij)`; leaves `T⁻¹ (w − R m)` in `z` when
    /// `solve` is set.
    fn log_term(&mut self, c: &GaussianComponent, o: &Observation, i: usize, j: usize, solve: bool) -> Result<f64> {
        match (&o.r, &self.rt) {
            (Some(r), Some(rt)) => {
                self.vrt.gemm(1.0, &c.covar, rt, 0.0);
                self.t.copy_from(&o.s);
                self.t.gemm(1.0, r, &self.vrt, 1.0);
                self.z.copy_from(&o.w);
                self.z.gemv(-1.0, r, &c.mean, 1.0);
            }
            _ => {
                self.vrt.copy_from(&c.covar);
                self.t.copy_from(&o.s);
                self.t += &c.covar;
                self.z.copy_from(&o.w);
                self.z -= &c.mean;
            }
        }
        symmetrize(&mut self.t);
        let log_det = cholesky_into(&self.t, &mut self.l).ok_or_else(|| {
            Error::SingularCovariance(format!("T for observation {i}, component {j} is not positive definite"))
        })?;
        self.l.solve_lower_triangular_mut(&mut self.z);
        let term = c.alpha.ln() - 0.5 * (self.z.len() as f64 * LN_2PI + log_det + self.z.norm_squared());
        if solve {
            self.l.tr_solve_lower_triangular_mut(&mut self.z);
        }
        Ok(term)
    }

    /// `b = m + V Rᵀ T⁻¹ (w − R m)` and `B = V − Xᵀ X` with `X = L⁻¹ R V`,
    /// after [`Workspace::log_term`] with `solve` set.
    fn posterior(&mut self, c: &GaussianComponent, b: &mut [f64], bb: &mut [f64]) {
        let d = c.dim();
        let mut bv = DVectorViewMut::from_slice(b, d);
        bv.copy_from(&c.mean);
        bv.gemv(1.0, &self.vrt, &self.z, 1.0);
        self.x.tr_copy_from(&self.vrt);
        self.l.solve_lower_triangular_mut(&mut self.x);
        let mut bm = DMatrixViewMut::from_slice(bb, d, d);
        for a in 0..d {
            for e in 0..=a {
                let v = c.covar[(a, e)] - self.x.column(a).dot(&self.x.column(e));
                bm[(a, e)] = v;
                bm[(e, a)] = v;
            }
        }
    }
}

/// `ln Σ_j α_j N(w | R m_j, R V_j Rᵀ + S)` for a single observation.
pub fn point_loglike(model: &MixtureModel, obs: &Observation) -> Result<f64> {
    point_loglike_at(model, obs, 0)
}

fn point_loglike_at(model: &MixtureModel, obs: &Observation, i: usize) -> Result<f64> {
    check_dims(model, obs, i)?;
    let mut ws = Workspace::new(model.d, obs);
    let terms = model
        .components
        .iter()
        .enumerate()
        .map(|(j, c)| ws.log_term(c, obs, i, j, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(logsumexp(&terms))
}

/// Per-observation log-likelihoods, in input order.
pub fn point_loglikes(model: &MixtureModel, observations: &[Observation]) -> Result<Vec<f64>> {
    observations
        .par_iter()
        .enumerate()
        .map(|(i, o)| point_loglike_at(model, o, i))
        .collect()
}

/// `φ = Σ_i ln p(w_i | θ)`.
pub fn total_loglike(model: &MixtureModel, data: &Dataset) -> Result<f64> {
    Ok(point_loglikes(model, &data.observations)?.iter().sum())
}

/// Responsibilities and posterior latent moments under `model`.
pub fn e_step(model: &MixtureModel, data: &Dataset) -> Result<EStepResult> {
    let n = data.len();
    let k = model.k();
    let d = model.d;
    let mut log_terms = vec![0.0; n * k];
    let mut b = vec![0.0; n * k * d];
    let mut bcov = vec![0.0; n * k * d * d];
    log_terms
        .par_chunks_mut(k)
        .zip(b.par_chunks_mut(k * d))
        .zip(bcov.par_chunks_mut(k * d * d))
        .zip(data.observations.par_iter())
        .enumerate()
        .try_for_each(|(i, (((lt, bi), bbi), o))| -> Result<()> {
            check_dims(model, o, i)?;
            let mut ws = Workspace::new(d, o);
            // A direct noise-free measurement pins the latent value exactly.
            let exact = o.r.is_none() && o.s.iter().all(|&x| x == 0.0);
            for (j, c) in model.components.iter().enumerate() {
                lt[j] = ws.log_term(c, o, i, j, !exact)?;
                let (bj, bbj) = (&mut bi[j * d..(j + 1) * d], &mut bbi[j * d * d..(j + 1) * d * d]);
                if exact {
                    bj.copy_from_slice(o.w.as_slice());
                } else {
                    ws.posterior(c, bj, bbj);
                }
            }
            Ok(())
        })?;
    let mut q = DMatrix::zeros(n, k);
    let mut point_loglike = Vec::with_capacity(n);
    for (i, lt) in log_terms.chunks(k).enumerate() {
        let lse = logsumexp(lt);
        if !lse.is_finite() {
            return Err(Error::SingularCovariance(format!(
                "observation {i} has zero likelihood under every component"
            )));
        }
        for (j, t) in lt.iter().enumerate() {
            q[(i, j)] = (t - lse).exp();
        }
        point_loglike.push(lse);
    }
    let loglike = point_loglike.iter().sum();
    Ok(EStepResult {
        n,
        k,
        d,
        q,
        b,
        bcov,
        point_loglike,
        loglike,
    })
}

/// Which covariance update the M-step applies.
enum Rule<'a> {
    Regularized(f64),
    Prior(&'a Hyperparameters),
}

/// `Σ_i q_ij b_ij`
fn weighted_mean_sum(es: &EStepResult, j: usize, d: usize) -> DVector<f64> {
    let mut s = DVector::zeros(d);
    for i in 0..es.n {
        s.axpy(es.q[(i, j)], &es.b(i, j), 1.0);
    }
    s
}

/// `Σ_i q_ij [(m − b_ij)(m − b_ij)ᵀ + B_ij]`
fn scatter(es: &EStepResult, j: usize, mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut s = DMatrix::zeros(d, d);
    let mut diff = DVector::zeros(d);
    for i in 0..es.n {
        let qij = es.q[(i, j)];
        if qij == 0.0 {
            continue;
        }
        diff.copy_from(mean);
        diff -= &es.b(i, j);
        s.ger(qij, &diff, &diff, 1.0);
        for (acc, x) in s.iter_mut().zip(es.big_b(i, j).iter()) {
            *acc += x * qij;
        }
    }
    s
}

fn update(
    current: &MixtureModel,
    es: &EStepResult,
    data: &Dataset,
    fixed: &[FixedMask],
    rule: Rule<'_>,
) -> Result<MixtureModel> {
    let k = current.k();
    let d = current.d;
    if es.k != k || es.n != data.len() {
        return Err(Error::Dimension(format!(
            "E-step is {}x{}, model has {k} components and data {} points",
            es.n,
            es.k,
            data.len()
        )));
    }
    let n = data.len() as f64;
    let mask = |j: usize| fixed.get(j).copied().unwrap_or_default();
    let totals = es.totals();
    // Effective counts for the amplitude update.
    let counts: Vec<f64> = match &rule {
        Rule::Regularized(_) => totals.clone(),
        Rule::Prior(h) => totals.iter().zip(&h.gamma).map(|(q, g)| q + (g - 1.0)).collect(),
    };
    let amp_denom = match &rule {
        Rule::Regularized(_) => n,
        Rule::Prior(h) => {
            let denom = n + (h.gamma.iter().sum::<f64>() - k as f64);
            if !(denom > 0.0) {
                return Err(Error::Hyperparameter(format!(
                    "amplitude denominator N + Σγ − K = {denom} is not positive"
                )));
            }
            denom
        }
    };
    if counts.iter().any(|&c| c < 0.0) {
        return Err(Error::Hyperparameter(
            "Dirichlet exponents below one drive an amplitude negative".into(),
        ));
    }

    let mut comps = current.components.clone();
    for (j, comp) in comps.iter_mut().enumerate() {
        let m = mask(j);
        if m.mean && m.covar {
            continue;
        }
        let qj = totals[j];
        let empty = qj < EMPTY_COMPONENT;
        if empty {
            let regularized = match &rule {
                Rule::Regularized(w) => *w > 0.0,
                Rule::Prior(h) => !h.covariance_prior_absent(d),
            };
            if !regularized {
                return Err(Error::DegenerateComponent {
                    component: j,
                    total: qj,
                });
            }
        }
        if !m.mean {
            match &rule {
                Rule::Regularized(_) => {
                    if !empty {
                        comp.mean = weighted_mean_sum(es, j, d) / qj;
                    }
                }
                Rule::Prior(h) => {
                    let denom = qj + h.eta;
                    if denom > 0.0 && !(empty && h.eta == 0.0) {
                        comp.mean = (weighted_mean_sum(es, j, d) + &h.m_hat * h.eta) / denom;
                    }
                }
            }
        }
        if !m.covar {
            let s = scatter(es, j, &comp.mean);
            let mut v = match &rule {
                Rule::Regularized(w) if *w > 0.0 => (s + DMatrix::identity(d, d) * *w) / (qj + 1.0),
                Rule::Regularized(_) => s / qj,
                Rule::Prior(h) if h.covariance_prior_absent(d) => s / qj,
                Rule::Prior(h) => {
                    let dm = &comp.mean - &h.m_hat;
                    let mut num = s;
                    if h.eta != 0.0 {
                        num.ger(h.eta, &dm, &dm, 1.0);
                    }
                    num += &h.w_scale * 2.0;
                    let denom = qj + 1.0 + 2.0 * (h.omega - (d as f64 + 1.0) / 2.0);
                    num / denom
                }
            };
            symmetrize(&mut v);
            comp.covar = v;
        }
    }

    // Amplitudes: plain normalization, or the fixed-budget form when any
    // amplitude is held.
    let any_fixed = (0..k).any(|j| mask(j).alpha);
    if !any_fixed {
        for (c, q) in comps.iter_mut().zip(&counts) {
            c.alpha = q / amp_denom;
        }
    } else {
        let fixed_sum: f64 = (0..k)
            .filter(|&j| mask(j).alpha)
            .map(|j| current.components[j].alpha)
            .sum();
        let budget = 1.0 - fixed_sum;
        if budget < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "fixed amplitudes sum to {fixed_sum} > 1"
            )));
        }
        let budget = budget.max(0.0);
        let free: Vec<usize> = (0..k).filter(|&j| !mask(j).alpha).collect();
        let free_q: f64 = free.iter().map(|&j| counts[j]).sum();
        for &j in &free {
            comps[j].alpha = if free_q > 0.0 {
                counts[j] / free_q * budget
            } else {
                budget / free.len() as f64
            };
        }
    }
    Ok(MixtureModel { d, components: comps })
}

/// M-step with the one-parameter covariance regularizer `config.w`
/// (`w = 0` is plain maximum likelihood). Fixed parameters in
/// `config.fixed` are copied from `current`; if `config.prior` is set the
/// full prior update is used instead.
pub fn m_step(current: &MixtureModel, es: &EStepResult, data: &Dataset, config: &FitConfig) -> Result<MixtureModel> {
    match &config.prior {
        Some(h) => m_step_full_prior(current, es, data, h, &config.fixed),
        None => update(current, es, data, &config.fixed, Rule::Regularized(config.w)),
    }
}

/// M-step under the full Dirichlet / normal / Wishart prior.
pub fn m_step_full_prior(
    current: &MixtureModel,
    es: &EStepResult,
    data: &Dataset,
    hyper: &Hyperparameters,
    fixed: &[FixedMask],
) -> Result<MixtureModel> {
    hyper.validate(current.k(), current.d)?;
    update(current, es, data, fixed, Rule::Prior(hyper))
}

/// Outcome of an EM run.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Model after the final M-step.
    pub model: MixtureModel,
    /// `φ` evaluated at the start of every iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl FitResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Alternate E- and M-steps until the relative change in `φ` drops below
/// `config.tol` or `config.max_iter` iterations have run.
pub fn fit_em(data: &Dataset, init: &MixtureModel, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if init.d != data.d {
        return Err(Error::Dimension(format!(
            "model has d = {}, data d = {}",
            init.d, data.d
        )));
    }
    let mut model = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..config.max_iter {
        let es = e_step(&model, data).map_err(|e| e.at_iteration(it))?;
        trace.push(es.loglike);
        model = m_step(&model, &es, data, config).map_err(|e| e.at_iteration(it))?;
        if let [.., prev, cur] = trace[..] {
            if config.converged(prev, cur) {
                converged = true;
                break;
            }
        }
    }
    Ok(FitResult {
        model,
        trace,
        converged,
    })
}

/// Minimum-norm latent vector for every observation; coordinates the record
/// does not constrain are filled from the mean of fully observed records
/// (zero if there are none).
pub fn lift_observations(data: &Dataset) -> Vec<DVector<f64>> {
    let d = data.d;
    let pinv: Vec<Option<DMatrix<f64>>> = data
        .observations
        .iter()
        .map(|o| {
            o.r.as_ref()
                .map(|r| r.clone().pseudo_inverse(1e-12).expect("eps is non-negative"))
        })
        .collect();
    let mut fill = DVector::zeros(d);
    let mut n_complete = 0usize;
    for (o, p) in data.observations.iter().zip(&pinv) {
        if o.is_complete() {
            fill += match p {
                Some(p) => p * &o.w,
                None => o.w.clone(),
            };
            n_complete += 1;
        }
    }
    if n_complete > 0 {
        fill /= n_complete as f64;
    }
    data.observations
        .iter()
        .zip(&pinv)
        .map(|(o, p)| match (p, &o.r) {
            (Some(p), Some(r)) => {
                let v = p * &o.w;
                let null_part = &fill - p * (r * &fill);
                v + null_part
            }
            _ => o.w.clone(),
        })
        .collect()
}

const LLOYD_ITERS: usize = 50;

/// k-means++ style picks: each new index is drawn with probability
/// proportional to its squared distance from the nearest earlier pick.
fn spread_picks(rng: &mut impl Rng, points: &[DVector<f64>], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut picks = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - &points[picks[0]]).norm_squared()).collect();
    while picks.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &di) in dist.iter().enumerate() {
                if di > 0.0 {
                    pick = Some(i);
                    if u < di {
                        break;
                    }
                    u -= di;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // All remaining points coincide with a pick; take any unused index.
            (0..n).find(|i| !picks.contains(i)).expect("k <= n")
        };
        picks.push(next);
        for (di, p) in dist.iter_mut().zip(points) {
            *di = di.min((p - &points[next]).norm_squared());
        }
    }
    picks
}

/// Hard-assignment k-means refinement of `centers`. An empty cluster keeps
/// its center.
fn lloyd(points: &[DVector<f64>], mut centers: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let nearest = |p: &DVector<f64>, centers: &[DVector<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let dist = (p - c).norm_squared();
            if dist < best.1 {
                best = (j, dist);
            }
        }
        best.0
    };
    let mut label: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..LLOYD_ITERS {
        let mut sums = vec![DVector::zeros(centers[0].len()); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &j) in points.iter().zip(&label) {
            sums[j] += p;
            counts[j] += 1;
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s / n as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == label {
            break;
        }
        label = next;
    }
    centers
}

/// Starting model. K = 1 gets the mean of the lifted records and four times
/// their covariance. For K > 1 the means come from k-means on the lifted
/// records, seeded k-means++ style, each with the plain lifted-data
/// covariance and equal amplitudes.
pub fn initialize(data: &Dataset, k: usize, seed: u64) -> Result<MixtureModel> {
    let n = data.len();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds N = {n}")));
    }
    let d = data.d;
    let lifted = lift_observations(data);
    let mut mean = DVector::zeros(d);
    for v in &lifted {
        mean += v;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in &lifted {
        let dv = v - &mean;
        cov.ger(1.0, &dv, &dv, 1.0);
    }
    cov *= 4.0 / n as f64;
    symmetrize(&mut cov);
    if nalgebra::Cholesky::new(cov.clone()).is_none() {
        let scale = (cov.trace() / d as f64).max(0.0);
        let bump = if scale > 0.0 { 1e-3 * scale } else { 1.0 };
        cov += DMatrix::identity(d, d) * bump;
    }
    let components = if k == 1 {
        vec![GaussianComponent::new(1.0, mean, cov)]
    } else {
        let cov = cov / 4.0;
        let mut rng = rng_from_seed(seed);
        let picks = spread_picks(&mut rng, &lifted, k);
        let seeds = picks.iter().map(|&i| lifted[i].clone()).collect();
        lloyd(&lifted, seeds)
            .into_iter()
            .map(|m| GaussianComponent::new(1.0 / k as f64, m, cov.clone()))
            .collect()
    };
    Ok(MixtureModel { d, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::LN_2PI;
    use nalgebra::{dmatrix, dvector};

    fn one_d(ws: &[f64], s: f64) -> Dataset {
        Dataset::with_dim(
            1,
            ws.iter().map(|&w| Observation::new(dvector![w], dmatrix![s])).collect(),
        )
    }

    fn single(m: f64, v: f64) -> MixtureModel {
        MixtureModel::new(vec![GaussianComponent::new(1.0, dvector![m], dmatrix![v])]).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn point_loglike_examples() {
        let obs = Observation::new(dvector![0.0], dmatrix![0.0]);
        assert!(close(
            point_loglike(&single(0.0, 1.0), &obs).unwrap(),
            -0.5 * LN_2PI,
            1e-15
        ));
        let obs = Observation::new(dvector![0.0], dmatrix![1.0]);
        let v = point_loglike(&single(0.0, 1.0), &obs).unwrap();
        assert!(close(v, -0.5 * (4.0 * std::f64::consts::PI).ln(), 1e-15));

        let two = MixtureModel::new(vec![
            GaussianComponent::new(0.5, dvector![-1.0], dmatrix![1.0]),
            GaussianComponent::new(0.5, dvector![1.0], dmatrix![1.0]),
        ])
        .unwrap();
        let obs = Observation::new(dvector![0.0], dmatrix![0.0]);
        let v = point_loglike(&two, &obs).unwrap();
        assert!(close(v, -0.5 * LN_2PI - 0.5, 1e-15));
    }

    #[test]
    fn projected_terms_match_dense_formula() {
        let c = GaussianComponent::new(1.0, dvector![0.5, -1.0], dmatrix![2.0, 0.3; 0.3, 0.5]);
        let model = MixtureModel::new(vec![c.clone()]).unwrap();
        let cases = [
            Observation::with_projection(
                dvector![1.0, 0.2],
                dmatrix![1.0, 2.0; 0.0, 1.0],
                dmatrix![0.1, 0.0; 0.0, 0.2],
            ),
            Observation::with_projection(dvector![0.7], dmatrix![0.3, -1.2], dmatrix![0.05]),
        ];
        for o in &cases {
            let r = o.r.as_ref().unwrap();
            let t = r * &c.covar * r.transpose() + &o.s;
            let want = crate::gauss::log_normal_density(&o.w, &(r * &c.mean), &t).unwrap();
            assert!(close(point_loglike(&model, o).unwrap(), want, 1e-13));

            let data = Dataset::with_dim(2, vec![o.clone()]);
            let es = e_step(&model, &data).unwrap();
            let gain = &c.covar * r.transpose() * t.clone().try_inverse().unwrap();
            let b = &c.mean + &gain * (&o.w - r * &c.mean);
            let bb = &c.covar - &gain * r * &c.covar;
            assert!((es.b(0, 0) - b).norm() < 1e-12);
            assert!((es.big_b(0, 0) - bb).norm() < 1e-12);
        }
    }

    #[test]
    fn singular_t_names_point_and_component() {
        let m = single(0.0, 0.0);
        let err = point_loglike_at(&m, &Observation::new(dvector![0.0], dmatrix![0.0]), 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("observation 7") && msg.contains("component 0"), "{msg}");
    }

    #[test]
    fn noiseless_posterior_collapses() {
        let data = Dataset::with_dim(
            2,
            vec![
                Observation::new(dvector![1.0, 2.0], DMatrix::zeros(2, 2)),
                Observation::new(dvector![-1.0, 0.5], DMatrix::zeros(2, 2)),
            ],
        );
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.4, dvector![0.0, 0.0], dmatrix![1.0, 0.3; 0.3, 2.0]),
            GaussianComponent::new(0.6, dvector![3.0, 1.0], dmatrix![0.5, 0.0; 0.0, 0.5]),
        ])
        .unwrap();
        let es = e_step(&model, &data).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let b = es.b(i, j);
                assert!((b - &data.observations[i].w).amax() < 1e-12);
                assert!(es.big_b(i, j).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn uninformative_datum_returns_prior() {
        let v = dmatrix![1.0, 0.3; 0.3, 2.0];
        let m = dvector![0.5, -1.0];
        let model = MixtureModel::new(vec![GaussianComponent::new(1.0, m.clone(), v.clone())]).unwrap();
        let data = Dataset::with_dim(
            2,
            vec![Observation::new(dvector![3.0, 4.0], DMatrix::identity(2, 2) * 1e24)],
        );
        let es = e_step(&model, &data).unwrap();
        assert!((es.b(0, 0) - &m).amax() < 1e-6);
        assert!((es.big_b(0, 0) - &v).amax() < 1e-6 * 2.0);
    }

    #[test]
    fn scalar_posterior_moments() {
        let es = e_step(&single(0.0, 1.0), &one_d(&[2.0], 1.0)).unwrap();
        assert_eq!(es.q[(0, 0)], 1.0);
        assert!(close(es.b(0, 0)[0], 1.0, 1e-15));
        assert!(close(es.big_b(0, 0)[(0, 0)], 0.5, 1e-15));
        assert!(close(es.loglike, -0.5 * (4.0 * std::f64::consts::PI).ln() - 1.0, 1e-14));
    }

    #[test]
    fn responsibility_rows_sum_to_one() {
        let data = one_d(&[-3.0, -0.2, 0.0, 0.9, 50.0], 0.3);
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.2, dvector![-1.0], dmatrix![0.5]),
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.3, dvector![2.0], dmatrix![0.1]),
        ])
        .unwrap();
        let es = e_step(&model, &data).unwrap();
        for i in 0..data.len() {
            let s: f64 = es.q.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn m_step_sample_moments() {
        let ws = [1.0, 2.0, 4.0, 7.0];
        let data = one_d(&ws, 0.0);
        let model = single(0.0, 1.0);
        let es = e_step(&model, &data).unwrap();
        let cfg = FitConfig::default();
        let next = m_step(&model, &es, &data, &cfg).unwrap();
        let mean = ws.iter().sum::<f64>() / 4.0;
        let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(close(next.components[0].mean[0], mean, 1e-14));
        assert!(close(next.components[0].covar[(0, 0)], var, 1e-14));
    }

    #[test]
    fn m_step_regularized_two_points() {
        let data = one_d(&[-1.0, 1.0], 0.0);
        let model = single(0.3, 1.0);
        let es = e_step(&model, &data).unwrap();
        let cfg = FitConfig {
            w: 2.0,
            ..FitConfig::default()
        };
        let next = m_step(&model, &es, &data, &cfg).unwrap();
        assert!(close(next.components[0].mean[0], 0.0, 1e-15));
        assert!(close(next.components[0].covar[(0, 0)], 4.0 / 3.0, 1e-15));
    }

    #[test]
    fn symmetric_responsibilities_give_identical_components() {
        let data = one_d(&[-1.0, 0.5, 3.0], 0.0);
        let comp = GaussianComponent::new(1.0 / 3.0, dvector![0.0], dmatrix![2.0]);
        let model = MixtureModel::new(vec![comp.clone(), comp.clone(), comp]).unwrap();
        let es = e_step(&model, &data).unwrap();
        let next = m_step(&model, &es, &data, &FitConfig::default()).unwrap();
        for c in &next.components[1..] {
            assert_eq!(c.mean, next.components[0].mean);
            assert_eq!(c.covar, next.components[0].covar);
        }
    }

    #[test]
    fn empty_component_needs_regularizer() {
        let data = one_d(&[0.0, 0.1, -0.1], 0.0);
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.5, dvector![1e4], dmatrix![1e-4]),
        ])
        .unwrap();
        let es = e_step(&model, &data).unwrap();
        let err = m_step(&model, &es, &data, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateComponent { component: 1, .. }));
        let cfg = FitConfig {
            w: 1.0,
            ..FitConfig::default()
        };
        let next = m_step(&model, &es, &data, &cfg).unwrap();
        assert_eq!(next.components[1].mean, model.components[1].mean);
        assert!(close(next.components[1].covar[(0, 0)], 1.0, 1e-12));
    }

    #[test]
    fn fixed_masks_are_respected() {
        let data = one_d(&[-2.0, -1.5, 0.3, 2.0, 2.2], 0.1);
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.3, dvector![-1.0], dmatrix![1.0]),
            GaussianComponent::new(0.3, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.4, dvector![2.0], dmatrix![1.0]),
        ])
        .unwrap();
        let es = e_step(&model, &data).unwrap();
        let cfg = FitConfig {
            fixed: vec![
                FixedMask {
                    alpha: true,
                    ..FixedMask::FREE
                },
                FixedMask {
                    mean: true,
                    covar: true,
                    ..FixedMask::FREE
                },
            ],
            ..FitConfig::default()
        };
        let next = m_step(&model, &es, &data, &cfg).unwrap();
        assert_eq!(next.components[0].alpha.to_bits(), model.components[0].alpha.to_bits());
        assert_eq!(next.components[1].mean, model.components[1].mean);
        assert_eq!(next.components[1].covar, model.components[1].covar);
        let sum: f64 = next.alphas().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // free amplitudes share the remaining budget in proportion to q_j
        let t = es.totals();
        let ratio = next.components[1].alpha / next.components[2].alpha;
        assert!(close(ratio, t[1] / t[2], 1e-12));
    }

    #[test]
    fn full_prior_reduces_bitwise() {
        let data = one_d(&[-2.0, -1.5, 0.3, 2.0, 2.2], 0.1);
        let model = MixtureModel::new(vec![
            GaussianComponent::new(0.5, dvector![-1.0], dmatrix![1.0]),
            GaussianComponent::new(0.5, dvector![2.0], dmatrix![1.0]),
        ])
        .unwrap();
        let es = e_step(&model, &data).unwrap();
        let w = 0.7;
        let a = m_step(
            &model,
            &es,
            &data,
            &FitConfig {
                w,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let b = m_step_full_prior(&model, &es, &data, &Hyperparameters::reduced(2, 1, w), &[]).unwrap();
        assert_eq!(a, b);
        let a = m_step(&model, &es, &data, &FitConfig::default()).unwrap();
        let b = m_step_full_prior(&model, &es, &data, &Hyperparameters::reduced(2, 1, 0.0), &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strong_mean_prior_pins_mean() {
        let data = one_d(&[-2.0, -1.5, 0.3, 2.0, 2.2], 0.1);
        let model = single(0.0, 1.0);
        let es = e_step(&model, &data).unwrap();
        let mut h = Hyperparameters::reduced(1, 1, 1.0);
        h.eta = 1e12;
        h.m_hat = dvector![5.0];
        let next = m_step_full_prior(&model, &es, &data, &h, &[]).unwrap();
        assert!((next.components[0].mean[0] - 5.0).abs() < 5e-6);
    }

    #[test]
    fn single_component_amplitude_under_dirichlet() {
        let data = one_d(&[0.0, 1.0], 0.1);
        let model = single(0.0, 1.0);
        let es = e_step(&model, &data).unwrap();
        let mut h = Hyperparameters::reduced(1, 1, 1.0);
        h.gamma = vec![3.0];
        let next = m_step_full_prior(&model, &es, &data, &h, &[]).unwrap();
        assert_eq!(next.components[0].alpha, 1.0);
    }

    #[test]
    fn hyperparameter_errors() {
        let data = one_d(&[0.0, 1.0], 0.1);
        let model = single(0.0, 1.0);
        let es = e_step(&model, &data).unwrap();
        let mut h = Hyperparameters::reduced(1, 1, 1.0);
        h.omega = 0.5;
        assert!(matches!(
            m_step_full_prior(&model, &es, &data, &h, &[]),
            Err(Error::Hyperparameter(_))
        ));
        let h = Hyperparameters::reduced(2, 1, 1.0);
        assert!(m_step_full_prior(&model, &es, &data, &h, &[]).is_err());
        let mut h = Hyperparameters::reduced(1, 1, 1.0);
        h.gamma = vec![0.0];
        assert!(m_step_full_prior(&model, &es, &data, &h, &[]).is_err());
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let ws = [1.0, 2.0, 4.0, 7.0];
        let data = one_d(&ws, 0.0);
        let mean = ws.iter().sum::<f64>() / 4.0;
        let var = ws.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / 4.0;
        let fit = fit_em(&data, &single(mean, var), &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations() <= 2);
        assert!((fit.trace[1] - fit.trace[0]).abs() < 1e-12);
    }

    #[test]
    fn max_iter_is_honoured() {
        let data = one_d(&[-3.0, -2.0, 0.0, 1.0, 5.0], 0.5);
        let init = initialize(&data, 2, 1).unwrap();
        let fit = fit_em(
            &data,
            &init,
            &FitConfig {
                max_iter: 3,
                ..FitConfig::default()
            },
        )
        .unwrap();
        assert_eq!(fit.iterations(), 3);
        assert!(!fit.converged);
    }

    #[test]
    fn errors_carry_iteration() {
        let data = one_d(&[0.0, 0.1, -0.1], 0.0);
        let init = MixtureModel::new(vec![
            GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.5, dvector![1e4], dmatrix![1e-4]),
        ])
        .unwrap();
        let err = fit_em(&data, &init, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 0, .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn initialize_examples() {
        let ws = [1.0, 2.0, 4.0, 7.0];
        let data = one_d(&ws, 0.0);
        let m = initialize(&data, 1, 0).unwrap();
        assert_eq!(m.components[0].alpha, 1.0);
        assert!(close(m.components[0].mean[0], 3.5, 1e-15));
        assert_eq!(initialize(&data, 3, 9).unwrap(), initialize(&data, 3, 9).unwrap());
        let all = initialize(&data, 4, 5).unwrap();
        let mut means: Vec<f64> = all.components.iter().map(|c| c.mean[0]).collect();
        means.sort_by(f64::total_cmp);
        assert_eq!(means, ws.to_vec());
        assert!(initialize(&data, 5, 0).is_err());
    }

    #[test]
    fn lifting_fills_unobserved_coordinates() {
        let data = Dataset::with_dim(
            2,
            vec![
                Observation::new(dvector![1.0, 4.0], DMatrix::identity(2, 2)),
                Observation::new(dvector![3.0, 6.0], DMatrix::identity(2, 2)),
                Observation::with_projection(dvector![10.0], dmatrix![1.0, 0.0], dmatrix![1.0]),
            ],
        );
        let lifted = lift_observations(&data);
        assert!(close(lifted[2][0], 10.0, 1e-12));
        assert!(close(lifted[2][1], 5.0, 1e-12));
    }
}
