//! Straight-line fits to 2-D data with correlated per-point errors.
//!
//! A single Gaussian is deconvolved from the data; the line runs through
//! its mean along the eigenvector of the largest eigenvalue. The square
//! root of the eigenvalue ratio is reported so a poorly linear relation is
//! visible.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::em::{fit_em, initialize, FitConfig};
use crate::error::{Error, Result};
use crate::model::{Dataset, GaussianComponent, MixtureModel};

/// Relative eigenvalue gap below which the line direction is undefined.
pub const DEGENERATE_GAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineWarning {
    /// The fitted covariance is (nearly) isotropic.
    DirectionUndefined,
    /// The leading eigenvector is vertical; `slope` is infinite and
    /// `x_intercept` holds the line's position.
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFitResult {
    pub slope: f64,
    /// `NaN` for a vertical line.
    pub intercept: f64,
    pub x_intercept: Option<f64>,
    pub slope_err: Option<f64>,
    pub intercept_err: Option<f64>,
    /// `√(λ_max / λ_min)` of the fitted covariance.
    pub aspect_ratio: f64,
    pub gaussian: GaussianComponent,
    /// Unit leading eigenvector `(e_x, e_y)`.
    pub direction: [f64; 2],
    pub warnings: Vec<LineWarning>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_line_data(data: &Dataset) -> Result<()> {
    if data.d != 2 {
        return Err(Error::Dimension(format!("line fits need d = 2, got d = {}", data.d)));
    }
    let eye = DMatrix::<f64>::identity(2, 2);
    for (i, o) in data.observations.iter().enumerate() {
        if o.w.len() != 2 || o.r.as_ref().is_some_and(|r| *r != eye) {
            return Err(Error::InvalidArgument(format!(
                "observation {i} is not a full 2-D measurement"
            )));
        }
    }
    Ok(())
}

/// Line parameters from a fitted 2-D Gaussian.
pub fn line_from_gaussian(g: &GaussianComponent) -> LineFitResult {
    let eig = SymmetricEigen::new(g.covar.clone());
    let (imax, imin) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let (lmax, lmin) = (eig.eigenvalues[imax], eig.eigenvalues[imin]);
    let e = eig.eigenvectors.column(imax);
    let (ex, ey) = (e[0], e[1]);
    let (mx, my) = (g.mean[0], g.mean[1]);
    let mut warnings = Vec::new();
    if lmax <= 0.0 || (lmax - lmin) <= DEGENERATE_GAP * lmax.abs() {
        warnings.push(LineWarning::DirectionUndefined);
    }
    let aspect_ratio = if lmin > 0.0 {
        (lmax / lmin).sqrt()
    } else {
        f64::INFINITY
    };
    let (slope, intercept, x_intercept) = if ex.abs() <= f64::EPSILON * ey.abs() {
        warnings.push(LineWarning::Vertical);
        (f64::INFINITY, f64::NAN, Some(mx))
    } else {
        let slope = ey / ex;
        (slope, my - slope * mx, None)
    };
    LineFitResult {
        slope,
        intercept,
        x_intercept,
        slope_err: None,
        intercept_err: None,
        aspect_ratio,
        gaussian: g.clone(),
        direction: [ex, ey],
        warnings,
        iterations: 0,
        converged: true,
    }
}

fn line_config(config: &FitConfig) -> FitConfig {
    FitConfig {
        splitmerge_depth: 0,
        fixed: Vec::new(),
        ..config.clone()
    }
}

/// Fit a line starting EM from `init`.
pub fn fit_line_from(data: &Dataset, init: &GaussianComponent, config: &FitConfig) -> Result<LineFitResult> {
    check_line_data(data)?;
    let start = MixtureModel {
        d: 2,
        components: vec![GaussianComponent {
            alpha: 1.0,
            ..init.clone()
        }],
    };
    let fit = fit_em(data, &start, &line_config(config))?;
    let mut res = line_from_gaussian(&fit.model.components[0]);
    res.iterations = fit.iterations();
    res.converged = fit.converged;
    Ok(res)
}

/// Single-Gaussian deconvolution fit of a line.
pub fn fit_line(data: &Dataset, config: &FitConfig) -> Result<LineFitResult> {
    check_line_data(data)?;
    let init = initialize(data, 1, config.seed)?;
    fit_line_from(data, &init.components[0], config)
}

/// Leave-one-out standard errors of slope and intercept,
/// `√((N−1)/N · Σ_i (θ_(i) − θ̄)²)`, each refit warm-started from `full`.
pub fn jackknife_from(data: &Dataset, full: &LineFitResult, config: &FitConfig) -> Result<(f64, f64)> {
    let n = data.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("jackknife needs N >= 3, got {n}")));
    }
    let estimates = (0..n)
        .into_par_iter()
        .map(|left_out| {
            let keep: Vec<usize> = (0..n).filter(|&i| i != left_out).collect();
            let sub = data.subset(&keep);
            fit_line_from(&sub, &full.gaussian, config)
                .map(|r| (r.slope, r.intercept))
                .map_err(|e| {
                    Error::InvalidArgument(format!("jackknife refit without observation {left_out} failed: {e}"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let spread = |vals: Vec<f64>| {
        let mean = vals.iter().sum::<f64>() / n as f64;
        let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
        ((n as f64 - 1.0) / n as f64 * ss).sqrt()
    };
    let slopes = estimates.iter().map(|e| e.0).collect();
    let intercepts = estimates.iter().map(|e| e.1).collect();
    Ok((spread(slopes), spread(intercepts)))
}

/// Jackknife errors for a line fit to `data`.
pub fn jackknife_errors(data: &Dataset, config: &FitConfig) -> Result<(f64, f64)> {
    let full = fit_line(data, config)?;
    jackknife_from(data, &full, config)
}

/// [`fit_line`] with the jackknife errors filled in.
pub fn fit_line_with_errors(data: &Dataset, config: &FitConfig) -> Result<LineFitResult> {
    let mut res = fit_line(data, config)?;
    let (se, ie) = jackknife_from(data, &res, config)?;
    res.slope_err = Some(se);
    res.intercept_err = Some(ie);
    Ok(res)
}
