//! File formats.
//!
//! Datasets are JSON Lines, one observation per line:
//!
//! ```text
//! {"w": [1.0, 2.0], "S": [[0.1, 0.0], [0.0, 0.2]], "R": [[1, 0, 0], [0, 1, 0]]}
//! ```
//!
//! `S` may be a full square matrix, its lower triangle as ragged rows
//! (`[[s11], [s21, s22]]`), or the lower triangle flattened row by row
//! (`[s11, s21, s22]`). `R` is optional; when omitted it is the identity and
//! the record is fully observed. Unknown keys are ignored.
//!
//! Models are one JSON document:
//!
//! ```text
//! {"d": 2, "K": 1, "components": [{"alpha": 1.0, "mean": [0, 0], "covar": [[1, 0], [0, 1]]}]}
//! ```
//!
//! Reals are written in shortest round-trip form, so `read(write(x)) == x`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Dataset, GaussianComponent, MixtureModel, Observation};

fn parse_err(line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn as_reals(v: &Value, what: &str) -> std::result::Result<Vec<f64>, String> {
    let arr = v.as_array().ok_or_else(|| format!("{what} must be a list"))?;
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| format!("{what} has a non-numeric entry")))
        .collect()
}

fn as_rows(v: &Value, what: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let arr = v.as_array().ok_or_else(|| format!("{what} must be a list"))?;
    arr.iter().map(|r| as_reals(r, what)).collect()
}

fn dense(rows: &[Vec<f64>], what: &str) -> std::result::Result<DMatrix<f64>, String> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(format!("{what} rows have unequal lengths"));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn sym_from_lower(n: usize, get: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i >= j { get(i, j) } else { get(j, i) })
}

/// Parse `S` for an observed vector of length `n`.
fn parse_noise(v: &Value, n: usize) -> std::result::Result<DMatrix<f64>, String> {
    let arr = v.as_array().ok_or("S must be a list")?;
    let nested = arr.first().is_some_and(|x| x.is_array());
    if nested {
        let rows = as_rows(v, "S")?;
        if rows.len() != n {
            return Err(format!("S has {} rows, expected {n}", rows.len()));
        }
        if rows.iter().all(|r| r.len() == n) {
            return dense(&rows, "S");
        }
        if rows.iter().enumerate().all(|(i, r)| r.len() == i + 1) {
            return Ok(sym_from_lower(n, |i, j| rows[i][j]));
        }
        Err("S must be square or a lower triangle".into())
    } else {
        let flat = as_reals(v, "S")?;
        if flat.len() != n * (n + 1) / 2 {
            return Err(format!(
                "flat S has {} entries, expected {} (lower triangle of {n}x{n})",
                flat.len(),
                n * (n + 1) / 2
            ));
        }
        Ok(sym_from_lower(n, |i, j| flat[i * (i + 1) / 2 + j]))
    }
}

/// Parse one JSON Lines record.
pub fn parse_observation(line: &str) -> std::result::Result<Observation, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("record must be a JSON object")?;
    let w = as_reals(obj.get("w").ok_or("missing field `w`")?, "w")?;
    let n = w.len();
    if n == 0 {
        return Err("w must be non-empty".into());
    }
    let s = parse_noise(obj.get("S").ok_or("missing field `S`")?, n)?;
    let r = match obj.get("R") {
        None | Some(Value::Null) => None,
        Some(rv) => {
            let rows = as_rows(rv, "R")?;
            let r = dense(&rows, "R")?;
            if r.nrows() != n {
                return Err(format!("R has {} rows, w has length {n}", r.nrows()));
            }
            Some(r)
        }
    };
    Ok(Observation {
        w: DVector::from_vec(w),
        r,
        s,
    })
}

/// Read a JSON Lines dataset; blank lines are skipped.
pub fn read_dataset_from<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut obs = Vec::new();
    let mut d = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let o = parse_observation(&line).map_err(|m| parse_err(Some(lineno), m))?;
        let od = o.latent_dim();
        match d {
            None => d = Some(od),
            Some(d) if d != od => {
                return Err(parse_err(
                    Some(lineno),
                    format!("record has latent dimension {od}, earlier records have {d}"),
                ))
            }
            _ => {}
        }
        obs.push(o);
    }
    let d = d.ok_or_else(|| parse_err(None, "dataset is empty (N >= 1 required)"))?;
    Ok(Dataset::with_dim(d, obs))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset_from(BufReader::new(f))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// One JSON Lines record for `o`.
pub fn observation_to_json(o: &Observation) -> Value {
    let mut map = serde_json::Map::new();
    map.insert("w".into(), serde_json::json!(o.w.as_slice()));
    map.insert("S".into(), serde_json::json!(matrix_rows(&o.s)));
    if let Some(r) = &o.r {
        map.insert("R".into(), serde_json::json!(matrix_rows(r)));
    }
    Value::Object(map)
}

pub fn write_dataset_to<W: Write>(mut out: W, data: &Dataset) -> Result<()> {
    for o in &data.observations {
        writeln!(out, "{}", observation_to_json(o))?;
    }
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset_to(&mut w, data)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ComponentDoc {
    alpha: f64,
    mean: Vec<f64>,
    covar: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    components: Vec<ComponentDoc>,
}

pub fn model_to_json(model: &MixtureModel) -> String {
    let doc = ModelDoc {
        d: model.d,
        k: model.k(),
        components: model
            .components
            .iter()
            .map(|c| ComponentDoc {
                alpha: c.alpha,
                mean: c.mean.iter().copied().collect(),
                covar: matrix_rows(&c.covar),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<MixtureModel> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| parse_err(Some(e.line()), e.to_string()))?;
    if doc.components.len() != doc.k {
        return Err(parse_err(
            None,
            format!("K = {} but {} components given", doc.k, doc.components.len()),
        ));
    }
    let mut comps = Vec::with_capacity(doc.k);
    for (j, c) in doc.components.into_iter().enumerate() {
        if c.mean.len() != doc.d {
            return Err(parse_err(
                None,
                format!("component {j}: mean has length {}, d = {}", c.mean.len(), doc.d),
            ));
        }
        let covar = dense(&c.covar, "covar").map_err(|m| parse_err(None, format!("component {j}: {m}")))?;
        if covar.nrows() != doc.d || covar.ncols() != doc.d {
            return Err(parse_err(None, format!("component {j}: covar is not {0}x{0}", doc.d)));
        }
        comps.push(GaussianComponent::new(c.alpha, DVector::from_vec(c.mean), covar));
    }
    let model = MixtureModel {
        d: doc.d,
        components: comps,
    };
    model.validate()?;
    Ok(model)
}

pub fn write_model(path: impl AsRef<Path>, model: &MixtureModel) -> Result<()> {
    let mut text = model_to_json(model);
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<MixtureModel> {
    model_from_json(&std::fs::read_to_string(path)?)
}
