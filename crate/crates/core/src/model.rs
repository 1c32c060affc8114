//! Observation and mixture containers, their validation, and synthetic
//! sampling from a mixture.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Diagnostic, Error, Result};

/// Tolerance for `Σ α_j = 1`.
pub const AMPLITUDE_SUM_TOL: f64 = 1e-10;

/// One mixture component: amplitude `α`, mean `m`, covariance `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub alpha: f64,
    pub mean: DVector<f64>,
    pub covar: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn new(alpha: f64, mean: DVector<f64>, covar: DMatrix<f64>) -> Self {
        GaussianComponent { alpha, mean, covar }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A K-component Gaussian mixture over a d-dimensional latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub d: usize,
    pub components: Vec<GaussianComponent>,
}

impl MixtureModel {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let d = components
            .first()
            .map(|c| c.dim())
            .ok_or_else(|| Error::InvalidArgument("a mixture needs at least one component".into()))?;
        let model = MixtureModel { d, components };
        model.validate()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.alpha).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut diags = Vec::new();
        if self.components.is_empty() {
            diags.push(Diagnostic {
                index: None,
                field: "components",
                violation: "K >= 1 required".into(),
            });
        }
        let mut sum = 0.0;
        for (j, c) in self.components.iter().enumerate() {
            sum += c.alpha;
            if !(0.0..=1.0).contains(&c.alpha) {
                diags.push(Diagnostic {
                    index: Some(j),
                    field: "alpha",
                    violation: format!("{} outside [0, 1]", c.alpha),
                });
            }
            if c.mean.len() != self.d || c.covar.nrows() != self.d || c.covar.ncols() != self.d {
                diags.push(Diagnostic {
                    index: Some(j),
                    field: "covar",
                    violation: format!("shape does not match d = {}", self.d),
                });
                continue;
            }
            if c.mean.iter().chain(c.covar.iter()).any(|x| !x.is_finite()) {
                diags.push(Diagnostic {
                    index: Some(j),
                    field: "mean",
                    violation: "non-finite entry".into(),
                });
                continue;
            }
            if let Err(v) = check_psd(&c.covar) {
                diags.push(Diagnostic {
                    index: Some(j),
                    field: "covar",
                    violation: v,
                });
            }
        }
        if !self.components.is_empty() && (sum - 1.0).abs() > AMPLITUDE_SUM_TOL {
            diags.push(Diagnostic {
                index: None,
                field: "alpha",
                violation: format!("amplitudes sum to {sum}, not 1"),
            });
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(diags))
        }
    }
}

/// Symmetric to 1e-12 relative and no eigenvalue below `−1e-12 · trace`.
pub fn check_psd(m: &DMatrix<f64>) -> std::result::Result<(), String> {
    if !m.is_square() {
        return Err("not square".into());
    }
    let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err("not symmetric".into());
            }
        }
    }
    if n == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let floor = -1e-12 * m.trace().abs();
    if min < floor {
        return Err(format!("not PSD (smallest eigenvalue {min:e})"));
    }
    Ok(())
}

/// One record: `w = R v + noise`, noise `~ N(0, S)`. `R = None` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub w: DVector<f64>,
    pub r: Option<DMatrix<f64>>,
    pub s: DMatrix<f64>,
}

impl Observation {
    pub fn new(w: DVector<f64>, s: DMatrix<f64>) -> Self {
        Observation { w, r: None, s }
    }

    pub fn with_projection(w: DVector<f64>, r: DMatrix<f64>, s: DMatrix<f64>) -> Self {
        Observation { w, r: Some(r), s }
    }

    pub fn d_obs(&self) -> usize {
        self.w.len()
    }

    /// Latent dimension this record refers to.
    pub fn latent_dim(&self) -> usize {
        self.r.as_ref().map_or(self.w.len(), |r| r.ncols())
    }

    /// `R x`
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.r {
            Some(r) => r * x,
            None => x.clone(),
        }
    }

    /// `R M Rᵀ`
    pub fn project_covar(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.r {
            Some(r) => r * m * r.transpose(),
            None => m.clone(),
        }
    }

    /// `M Rᵀ`
    pub fn right_project(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.r {
            Some(r) => m * r.transpose(),
            None => m.clone(),
        }
    }

    /// True when the record observes every latent coordinate (`R` omitted or
    /// square and invertible).
    pub fn is_complete(&self) -> bool {
        match &self.r {
            None => true,
            Some(r) => r.is_square() && r.clone().lu().is_invertible(),
        }
    }

    fn diagnose(&self, index: usize, d: usize, out: &mut Vec<Diagnostic>) {
        let mut push = |field, violation: String| {
            out.push(Diagnostic {
                index: Some(index),
                field,
                violation,
            })
        };
        let n = self.w.len();
        if self.w.iter().any(|x| !x.is_finite()) {
            push("w", "has non-finite entries".into());
        }
        if self.s.nrows() != n || self.s.ncols() != n {
            push(
                "S",
                format!("is {}x{}, expected {n}x{n}", self.s.nrows(), self.s.ncols()),
            );
        } else if self.s.iter().any(|x| !x.is_finite()) {
            push("S", "has non-finite entries".into());
        } else if check_psd(&self.s).is_err() {
            push("S", "not PSD".into());
        }
        match &self.r {
            None => {
                if n != d {
                    push("w", format!("has length {n} but d = {d} and R is omitted"));
                }
            }
            Some(r) => {
                if r.nrows() != n || r.ncols() != d {
                    push("R", format!("is {}x{}, expected {n}x{d}", r.nrows(), r.ncols()));
                } else if r.iter().any(|x| !x.is_finite()) {
                    push("R", "has non-finite entries".into());
                } else if n > d {
                    push("R", format!("has more rows ({n}) than latent dimensions ({d})"));
                } else if rank(r) < n {
                    push("R", "does not have full row rank".into());
                }
            }
        }
    }
}

fn rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * (m.nrows().max(m.ncols()) as f64);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// N observations sharing a latent dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub observations: Vec<Observation>,
}

impl Dataset {
    /// Build a dataset, inferring `d` from the first record. Use
    /// [`Dataset::validate`] for the full per-record checks.
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let d = observations
            .first()
            .map(|o| o.latent_dim())
            .ok_or_else(|| Error::InvalidArgument("N >= 1 required".into()))?;
        Ok(Dataset { d, observations })
    }

    pub fn with_dim(d: usize, observations: Vec<Observation>) -> Self {
        Dataset { d, observations }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// The records at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            d: self.d,
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
        }
    }

    /// Check every record against the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        let mut diags = Vec::new();
        if self.observations.is_empty() {
            diags.push(Diagnostic {
                index: None,
                field: "observations",
                violation: "N >= 1 required".into(),
            });
        }
        for (i, o) in self.observations.iter().enumerate() {
            o.diagnose(i, self.d, &mut diags);
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(diags))
        }
    }

    /// Validate and return the dataset.
    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}

/// Deterministic generator used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a sub-stream index into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A matrix `A` with `A Aᵀ = covar`; Cholesky when possible, otherwise the
/// clamped eigen-square-root so PSD-singular covariances (even `0`) are allowed.
pub fn covariance_root(covar: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = nalgebra::Cholesky::new(covar.clone()) {
        return c.unpack();
    }
    let eig = SymmetricEigen::new(covar.clone());
    let mut root = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        root.column_mut(j).scale_mut(s);
    }
    root
}

fn draw_normal<R: Rng>(rng: &mut R, mean: &DVector<f64>, root: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + root * z
}

/// Draw `n` latent samples `(j, v)`: `j ~ α`, `v ~ N(m_j, V_j)`.
pub fn sample_latent(model: &MixtureModel, n: usize, seed: u64) -> Vec<(usize, DVector<f64>)> {
    let mut rng = rng_from_seed(seed);
    let roots: Vec<_> = model.components.iter().map(|c| covariance_root(&c.covar)).collect();
    let k = model.k();
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            // Fall back to the last component with positive weight when
            // rounding leaves u above the cumulative sum.
            let mut j = (0..k).rev().find(|&j| model.components[j].alpha > 0.0).unwrap_or(k - 1);
            for (idx, c) in model.components.iter().enumerate() {
                acc += c.alpha;
                if u < acc {
                    j = idx;
                    break;
                }
            }
            let v = draw_normal(&mut rng, &model.components[j].mean, &roots[j]);
            (j, v)
        })
        .collect()
}

/// Simulate one noisy, projected measurement of `latent`.
pub fn observe(latent: &DVector<f64>, r: Option<&DMatrix<f64>>, s: &DMatrix<f64>, seed: u64) -> Result<Observation> {
    let mut rng = rng_from_seed(seed);
    observe_with(&mut rng, latent, r, s)
}

/// [`observe`] drawing from a caller-provided generator.
pub fn observe_with<R: Rng>(
    rng: &mut R,
    latent: &DVector<f64>,
    r: Option<&DMatrix<f64>>,
    s: &DMatrix<f64>,
) -> Result<Observation> {
    let projected = match r {
        Some(r) => {
            if r.ncols() != latent.len() {
                return Err(Error::Dimension(format!(
                    "R has {} columns, latent vector has length {}",
                    r.ncols(),
                    latent.len()
                )));
            }
            r * latent
        }
        None => latent.clone(),
    };
    if s.nrows() != projected.len() || s.ncols() != projected.len() {
        return Err(Error::Dimension(format!(
            "S is {}x{}, observed vector has length {}",
            s.nrows(),
            s.ncols(),
            projected.len()
        )));
    }
    let w = if s.iter().all(|&x| x == 0.0) {
        projected
    } else {
        let root = covariance_root(s);
        draw_normal(rng, &projected, &root)
    };
    Ok(Observation {
        w,
        r: r.cloned(),
        s: s.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn negative_variance_is_flagged() {
        let ds = Dataset::with_dim(1, vec![Observation::new(dvector![0.0], dmatrix![-1.0])]);
        let Err(Error::Validation(d)) = ds.validate() else {
            panic!()
        };
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "S not PSD at index 0");
    }

    #[test]
    fn consistent_projection_accepted() {
        let r = dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 1.0];
        let ds = Dataset::with_dim(
            3,
            vec![Observation::with_projection(
                dvector![1.0, 2.0],
                r,
                DMatrix::identity(2, 2),
            )],
        );
        ds.validate().unwrap();
    }

    #[test]
    fn rank_deficient_projection_rejected() {
        let r = dmatrix![1.0, 0.0, 0.0; 2.0, 0.0, 0.0];
        let ds = Dataset::with_dim(
            3,
            vec![Observation::with_projection(
                dvector![1.0, 2.0],
                r,
                DMatrix::identity(2, 2),
            )],
        );
        let Err(Error::Validation(d)) = ds.validate() else {
            panic!()
        };
        assert_eq!(d[0].field, "R");
    }

    #[test]
    fn empty_dataset() {
        let err = Dataset::new(vec![]).unwrap_err();
        assert!(err.to_string().contains("N >= 1 required"));
        let err = Dataset::with_dim(2, vec![]).validate().unwrap_err();
        assert!(err.to_string().contains("N >= 1 required"));
    }

    #[test]
    fn shape_and_finiteness_checks() {
        let ds = Dataset::with_dim(
            2,
            vec![
                Observation::new(dvector![0.0], dmatrix![1.0]),
                Observation::new(dvector![f64::NAN, 0.0], DMatrix::identity(2, 2)),
                Observation::new(dvector![0.0, 0.0], DMatrix::identity(3, 3)),
            ],
        );
        let Err(Error::Validation(d)) = ds.validate() else {
            panic!()
        };
        let idx: Vec<_> = d.iter().map(|x| x.index.unwrap()).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn huge_noise_is_legal() {
        let ds = Dataset::with_dim(
            2,
            vec![Observation::new(dvector![0.0, 1.0], dmatrix![1.0, 0.0; 0.0, 1e30])],
        );
        ds.validate().unwrap();
    }

    #[test]
    fn degenerate_component_samples_mean() {
        let m = MixtureModel::new(vec![GaussianComponent::new(
            1.0,
            dvector![1.0, -2.0],
            DMatrix::zeros(2, 2),
        )])
        .unwrap();
        for (j, v) in sample_latent(&m, 50, 3) {
            assert_eq!(j, 0);
            assert_eq!(v, dvector![1.0, -2.0]);
        }
    }

    #[test]
    fn zero_weight_component_never_drawn() {
        let m = MixtureModel::new(vec![
            GaussianComponent::new(1.0, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.0, dvector![10.0], dmatrix![1.0]),
        ])
        .unwrap();
        assert!(sample_latent(&m, 1000, 11).iter().all(|(j, _)| *j == 0));
    }

    #[test]
    fn standard_normal_mean() {
        let m = MixtureModel::new(vec![GaussianComponent::new(
            1.0,
            DVector::zeros(3),
            DMatrix::identity(3, 3),
        )])
        .unwrap();
        let n = 100_000;
        let s = sample_latent(&m, n, 42);
        let mut mean = DVector::zeros(3);
        for (_, v) in &s {
            mean += v;
        }
        mean /= n as f64;
        // 3σ/√n ≈ 0.0095
        assert!(mean.iter().all(|x| x.abs() < 0.02), "{mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = MixtureModel::new(vec![
            GaussianComponent::new(0.3, dvector![0.0], dmatrix![1.0]),
            GaussianComponent::new(0.7, dvector![5.0], dmatrix![2.0]),
        ])
        .unwrap();
        assert_eq!(sample_latent(&m, 20, 9), sample_latent(&m, 20, 9));
        assert_ne!(sample_latent(&m, 20, 9), sample_latent(&m, 20, 10));
    }

    #[test]
    fn observe_noiseless() {
        let v = dvector![1.0, 2.0];
        let o = observe(&v, None, &DMatrix::zeros(2, 2), 0).unwrap();
        assert_eq!(o.w, v);
        let r = dmatrix![1.0, 0.0];
        let o = observe(&v, Some(&r), &DMatrix::zeros(1, 1), 0).unwrap();
        assert_eq!(o.w, dvector![1.0]);
        let r = dmatrix![1.0, 1.0];
        let o = observe(&v, Some(&r), &DMatrix::zeros(1, 1), 0).unwrap();
        assert_eq!(o.w, dvector![3.0]);
    }

    #[test]
    fn observe_noise_is_deterministic() {
        let v = dvector![1.0, 2.0];
        let s = dmatrix![1.0, 0.2; 0.2, 0.5];
        assert_eq!(observe(&v, None, &s, 5).unwrap(), observe(&v, None, &s, 5).unwrap());
        assert_ne!(observe(&v, None, &s, 5).unwrap().w, v);
    }

    #[test]
    fn model_validation() {
        let bad = MixtureModel {
            d: 1,
            components: vec![
                GaussianComponent::new(0.5, dvector![0.0], dmatrix![1.0]),
                GaussianComponent::new(0.4, dvector![0.0], dmatrix![1.0]),
            ],
        };
        assert!(bad.validate().is_err());
        let bad = MixtureModel {
            d: 1,
            components: vec![GaussianComponent::new(1.0, dvector![0.0], dmatrix![-1.0])],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
