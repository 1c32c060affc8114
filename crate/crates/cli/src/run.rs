use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use xdeconv::em::{initialize, point_loglikes, FitConfig, FixedMask};
use xdeconv::io::{observation_to_json, read_dataset, read_model, write_model};
use xdeconv::linefit::{fit_line, fit_line_with_errors, LineFitResult, LineWarning};
use xdeconv::model::{covariance_root, derive_seed, observe_with, rng_from_seed, sample_latent, Dataset, Observation};
use xdeconv::select::{cross_validate, CvPlan, Restriction};
use xdeconv::smem::fit_smem;
use xdeconv::Error;

use crate::{Cli, Command, FitArgs, LinefitArgs, LoglikeArgs, RestrictionArg, SampleArgs, XvalArgs};

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_MAX_ITER: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_IO: u8 = 74;

const ELLIPSE_VERTICES: usize = 48;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Io(_)) { EXIT_IO } else { EXIT_ERROR };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

/// Attach the path to I/O errors raised while reading or writing it.
fn at_path<T>(path: &Path, r: xdeconv::Result<T>) -> Outcome<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Failure::io(path, io),
        other => Failure {
            code: EXIT_ERROR,
            message: format!("{}: {other}", path.display()),
        },
    })
}

fn write_file(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(p) => write_file(p, text),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::io(Path::new("<stdout>"), e)),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn default_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_manifest(path: &Path, mut doc: Value, started: Instant) -> Outcome<()> {
    doc["wall_time_s"] = json!(started.elapsed().as_secs_f64());
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    write_file(path, &text)
}

pub fn dispatch(cli: Cli) -> Outcome<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    }
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    match cli.command {
        Command::Fit(a) => fit(a, threads),
        Command::Loglike(a) => loglike(a, threads),
        Command::Sample(a) => sample(a, threads),
        Command::Xval(a) => xval(a, threads),
        Command::Linefit(a) => linefit(a, threads),
    }
}

/// Parse `0:alpha,0:mean,2:covar` into one mask per component.
pub fn parse_fix(spec: &str, k: usize) -> Outcome<Vec<FixedMask>> {
    let mut masks = vec![FixedMask::FREE; k];
    for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (j, field) = token
            .split_once(':')
            .ok_or_else(|| Failure::usage(format!("--fix: `{token}` is not component:field")))?;
        let j: usize = j
            .parse()
            .map_err(|_| Failure::usage(format!("--fix: bad component index in `{token}`")))?;
        if j >= k {
            return Err(Failure::usage(format!("--fix: component {j} out of range for K = {k}")));
        }
        match field {
            "alpha" => masks[j].alpha = true,
            "mean" => masks[j].mean = true,
            "covar" => masks[j].covar = true,
            _ => {
                return Err(Failure::usage(format!(
                    "--fix: unknown field `{field}` (alpha, mean, covar)"
                )))
            }
        }
    }
    Ok(masks)
}

/// Inclusive `a:b`, or a single value.
pub fn parse_k_grid(spec: &str) -> Outcome<Vec<usize>> {
    let bad = || Failure::usage(format!("--k-grid: expected a:b, got `{spec}`"));
    let (a, b) = match spec.split_once(':') {
        Some((a, b)) => (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let k = spec.trim().parse().map_err(|_| bad())?;
            (k, k)
        }
    };
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

pub fn parse_w_grid(spec: &str) -> Outcome<Vec<f64>> {
    let ws = spec
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::usage(format!("--w-grid: expected a comma list of reals, got `{spec}`")))?;
    if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Failure::usage("--w-grid: values must be finite and non-negative"));
    }
    Ok(ws)
}

fn fit(a: FitArgs, threads: usize) -> Outcome<u8> {
    let started = Instant::now();
    if a.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let fixed = match &a.fix {
        Some(spec) => parse_fix(spec, a.k)?,
        None => Vec::new(),
    };
    let data = at_path(&a.data, read_dataset(&a.data))?;
    let init = match &a.init {
        Some(p) => {
            let m = at_path(p, read_model(p))?;
            if m.k() != a.k {
                return Err(Failure::usage(format!("--init has K = {}, --k is {}", m.k(), a.k)));
            }
            m
        }
        None => initialize(&data, a.k, a.seed)?,
    };
    let config = FitConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        w: a.w,
        fixed,
        seed: a.seed,
        splitmerge_depth: a.smem_depth,
        prior: None,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let res = fit_smem(&data, &init, &config)?;
    at_path(&a.out, write_model(&a.out, &res.model))?;
    let manifest = a.manifest.clone().unwrap_or_else(|| default_manifest(&a.out));
    let doc = json!({
        "command": "fit",
        "config": {
            "k": a.k,
            "w": a.w,
            "seed": a.seed,
            "tol": a.tol,
            "max_iter": a.max_iter,
            "smem_depth": a.smem_depth,
            "fix": a.fix,
            "threads": threads,
        },
        "seed": a.seed,
        "inputs": { "data": path_str(&a.data), "init": a.init.as_deref().map(path_str) },
        "outputs": { "model": path_str(&a.out), "manifest": path_str(&manifest) },
        "final_loglike": res.loglike,
        "iterations": res.iterations,
        "accepted_moves": res.moves.len(),
        "converged": res.converged,
    });
    write_manifest(&manifest, doc, started)?;
    if res.converged {
        Ok(0)
    } else {
        eprintln!(
            "xd: stopped after --max-iter {} without converging; model written",
            a.max_iter
        );
        Ok(EXIT_MAX_ITER)
    }
}

fn loglike(a: LoglikeArgs, threads: usize) -> Outcome<u8> {
    let started = Instant::now();
    let data = at_path(&a.data, read_dataset(&a.data))?;
    let model = at_path(&a.model, read_model(&a.model))?;
    if model.d != data.d {
        return Err(Failure {
            code: EXIT_ERROR,
            message: format!("model has d = {}, data has d = {}", model.d, data.d),
        });
    }
    let per_point = point_loglikes(&model, &data.observations)?;
    let total: f64 = per_point.iter().sum();
    let mut text = format!("{total}\n");
    if a.per_point {
        for v in &per_point {
            writeln!(text, "{v}").unwrap();
        }
    }
    emit(None, &text)?;
    if let Some(m) = &a.manifest {
        let doc = json!({
            "command": "loglike",
            "config": { "per_point": a.per_point, "threads": threads },
            "seed": null,
            "inputs": { "data": path_str(&a.data), "model": path_str(&a.model) },
            "outputs": { "manifest": path_str(m) },
            "final_loglike": total,
        });
        write_manifest(m, doc, started)?;
    }
    Ok(0)
}

fn sample(a: SampleArgs, threads: usize) -> Outcome<u8> {
    let started = Instant::now();
    let model = at_path(&a.model, read_model(&a.model))?;
    let template = match &a.project {
        Some(p) => {
            let t = at_path(p, read_dataset(p))?;
            if t.is_empty() {
                return Err(Failure {
                    code: EXIT_ERROR,
                    message: format!("{}: template has no records", p.display()),
                });
            }
            Some(t)
        }
        None => None,
    };
    let latent = sample_latent(&model, a.n as usize, a.seed);
    let mut rng = rng_from_seed(derive_seed(a.seed, 1));
    let zero = DMatrix::zeros(model.d, model.d);
    let mut text = String::new();
    for (i, (j, v)) in latent.iter().enumerate() {
        let obs = match &template {
            Some(t) => {
                let rec = &t.observations[i % t.len()];
                observe_with(&mut rng, v, rec.r.as_ref(), &rec.s).map_err(|e| Failure {
                    code: EXIT_ERROR,
                    message: format!("template record {}: {e}", i % t.len()),
                })?
            }
            None => Observation::new(v.clone(), zero.clone()),
        };
        let mut rec = observation_to_json(&obs);
        rec["component"] = json!(j);
        writeln!(text, "{rec}").unwrap();
    }
    emit(a.out.as_deref(), &text)?;
    if let Some(m) = &a.manifest {
        let doc = json!({
            "command": "sample",
            "config": { "n": a.n, "seed": a.seed, "threads": threads },
            "seed": a.seed,
            "inputs": { "model": path_str(&a.model), "project": a.project.as_deref().map(path_str) },
            "outputs": { "samples": a.out.as_deref().map(path_str), "manifest": path_str(m) },
        });
        write_manifest(m, doc, started)?;
    }
    Ok(0)
}

fn xval(a: XvalArgs, threads: usize) -> Outcome<u8> {
    let started = Instant::now();
    let k_grid = parse_k_grid(&a.k_grid)?;
    let w_grid = parse_w_grid(&a.w_grid)?;
    let data = at_path(&a.data, read_dataset(&a.data))?;
    let plan = CvPlan {
        folds: a.folds,
        restriction: match a.restriction {
            RestrictionArg::Full => Restriction::FullRefit,
            RestrictionArg::Amplitudes => Restriction::AmplitudesOnly,
        },
        seed: a.seed,
    };
    let config = FitConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        seed: a.seed,
        splitmerge_depth: a.smem_depth,
        ..FitConfig::default()
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let table = cross_validate(&data, &k_grid, &w_grid, &plan, &config)?;
    let mut text = String::from("K\tw\tcv_loglike\n");
    for r in &table.rows {
        writeln!(text, "{}\t{:.16e}\t{:.16e}", r.k, r.w, r.total).unwrap();
    }
    writeln!(text, "best={},{}", table.best_k, table.best_w).unwrap();
    emit(a.out.as_deref(), &text)?;
    if let Some(m) = &a.manifest {
        let best = table
            .rows
            .iter()
            .find(|r| r.k == table.best_k && r.w == table.best_w)
            .map(|r| r.total);
        let doc = json!({
            "command": "xval",
            "config": {
                "k_grid": k_grid,
                "w_grid": w_grid,
                "folds": a.folds,
                "restriction": match a.restriction { RestrictionArg::Full => "full", RestrictionArg::Amplitudes => "amplitudes" },
                "tol": a.tol,
                "max_iter": a.max_iter,
                "smem_depth": a.smem_depth,
                "threads": threads,
            },
            "seed": a.seed,
            "inputs": { "data": path_str(&a.data) },
            "outputs": { "table": a.out.as_deref().map(path_str), "manifest": path_str(m) },
            "best": { "k": table.best_k, "w": table.best_w, "cv_loglike": best },
        });
        write_manifest(m, doc, started)?;
    }
    Ok(0)
}

fn warning_name(w: &LineWarning) -> &'static str {
    match w {
        LineWarning::DirectionUndefined => "direction_undefined",
        LineWarning::Vertical => "vertical",
    }
}

fn line_json(r: &LineFitResult) -> Value {
    let g = &r.gaussian;
    json!({
        "slope": r.slope,
        "intercept": r.intercept,
        "x_intercept": r.x_intercept,
        "slope_err": r.slope_err,
        "intercept_err": r.intercept_err,
        "aspect_ratio": r.aspect_ratio,
        "mean": g.mean.as_slice(),
        "covar": [[g.covar[(0, 0)], g.covar[(0, 1)]], [g.covar[(1, 0)], g.covar[(1, 1)]]],
        "direction": r.direction,
        "warnings": r.warnings.iter().map(warning_name).collect::<Vec<_>>(),
        "iterations": r.iterations,
        "converged": r.converged,
    })
}

/// Rows `kind, index, x, y`: every point, a closed 1-sigma ellipse per point
/// with non-zero noise, and the two ends of the line across the data.
pub fn plot_tsv(data: &Dataset, r: &LineFitResult) -> String {
    let mut text = String::from("kind\tindex\tx\ty\n");
    for (i, o) in data.observations.iter().enumerate() {
        writeln!(text, "point\t{i}\t{}\t{}", o.w[0], o.w[1]).unwrap();
    }
    for (i, o) in data.observations.iter().enumerate() {
        if o.s.iter().all(|&x| x == 0.0) {
            continue;
        }
        let root = covariance_root(&o.s);
        for v in 0..=ELLIPSE_VERTICES {
            let t = std::f64::consts::TAU * v as f64 / ELLIPSE_VERTICES as f64;
            let p = &o.w + &root * DVector::from_vec(vec![t.cos(), t.sin()]);
            writeln!(text, "ellipse\t{i}\t{}\t{}", p[0], p[1]).unwrap();
        }
    }
    let range = |c: usize| {
        data.observations
            .iter()
            .map(|o| o.w[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let ends = match r.x_intercept {
        Some(x) => {
            let (lo, hi) = range(1);
            [(x, lo), (x, hi)]
        }
        None => {
            let (lo, hi) = range(0);
            [(lo, r.intercept + r.slope * lo), (hi, r.intercept + r.slope * hi)]
        }
    };
    for (i, (x, y)) in ends.into_iter().enumerate() {
        writeln!(text, "line\t{i}\t{x}\t{y}").unwrap();
    }
    text
}

fn linefit(a: LinefitArgs, threads: usize) -> Outcome<u8> {
    let started = Instant::now();
    let data = at_path(&a.data, read_dataset(&a.data))?;
    let config = FitConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        seed: a.seed,
        ..FitConfig::default()
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let res = if a.jackknife {
        fit_line_with_errors(&data, &config)?
    } else {
        fit_line(&data, &config)?
    };
    let mut text = serde_json::to_string_pretty(&line_json(&res)).expect("line serializes");
    text.push('\n');
    write_file(&a.out, &text)?;
    if let Some(p) = &a.plot {
        write_file(p, &plot_tsv(&data, &res))?;
    }
    for w in &res.warnings {
        eprintln!("xd: warning: {}", warning_name(w));
    }
    let manifest = a.manifest.clone().unwrap_or_else(|| default_manifest(&a.out));
    let doc = json!({
        "command": "linefit",
        "config": { "jackknife": a.jackknife, "seed": a.seed, "tol": a.tol, "max_iter": a.max_iter, "threads": threads },
        "seed": a.seed,
        "inputs": { "data": path_str(&a.data) },
        "outputs": { "line": path_str(&a.out), "plot": a.plot.as_deref().map(path_str), "manifest": path_str(&manifest) },
        "iterations": res.iterations,
        "converged": res.converged,
    });
    write_manifest(&manifest, doc, started)?;
    Ok(0)
}
