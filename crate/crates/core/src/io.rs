//! CSV matrices, model directories and analysis exports.
//!
//! Matrices are plain CSV without a header unless stated: one line per row,
//! an empty field for a missing cell. Floats are written with the shortest
//! representation that parses back to the same value, so save/load is exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfileError};
use crate::latent::apply_transform;
use crate::model::{
    materialize, similarity_matrix, with_intercept, FactorContribution, FitResult, HyperParams, KernelScale,
    ObservedMatrix, SideInfo, TracePoint, Transform,
};

pub const MODEL_FORMAT: &str = "xfile-model/1";

/// Parsed CSV: values with `NaN` placeholders and the observed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

/// Read a numeric CSV. Empty fields are missing; anything else must parse.
pub fn read_csv_matrix(path: &Path, has_header: bool) -> Result<RawMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(r + 1, |p| p.line() as usize);
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(XfileError::Parse {
                    path: path.to_path_buf(),
                    line,
                    field: rec.len().min(w) + 1,
                    message: format!("expected {w} fields, found {}", rec.len()),
                })
            }
            _ => {}
        }
        for (f, s) in rec.iter().enumerate() {
            if s.is_empty() {
                cells.push(None);
                continue;
            }
            let v: f64 = s.parse().map_err(|_| XfileError::Parse {
                path: path.to_path_buf(),
                line,
                field: f + 1,
                message: format!("not a number: {s:?}"),
            })?;
            cells.push(Some(v));
        }
        rows += 1;
    }
    let p = width.unwrap_or(0);
    let values = Array2::from_shape_fn((rows, p), |(i, j)| cells[i * p + j].unwrap_or(f64::NAN));
    let mask = Array2::from_shape_fn((rows, p), |(i, j)| cells[i * p + j].is_some());
    Ok(RawMatrix { values, mask })
}

fn csv_open_error(path: &Path, e: csv::Error) -> XfileError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => XfileError::io(path, io),
        other => XfileError::Model {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Load a data matrix.
pub fn load_matrix(path: &Path, has_header: bool, transform: Transform) -> Result<ObservedMatrix> {
    let raw = read_csv_matrix(path, has_header)?;
    let m = ObservedMatrix::new(raw.values, raw.mask, transform)?;
    log::info!(
        "{}: {} x {}, {} observed",
        path.display(),
        m.nrows(),
        m.ncols(),
        m.n_observed()
    );
    Ok(m)
}

/// Read a fully observed matrix.
pub fn read_dense(path: &Path, has_header: bool) -> Result<Array2<f64>> {
    let raw = read_csv_matrix(path, has_header)?;
    if let Some(((i, j), _)) = raw.mask.indexed_iter().find(|(_, &m)| !m) {
        return Err(XfileError::Parse {
            path: path.to_path_buf(),
            line: i + 1 + usize::from(has_header),
            field: j + 1,
            message: "missing value in a matrix that must be complete".into(),
        });
    }
    Ok(raw.values)
}

/// Side information from raw covariate files (no intercept column); a
/// missing file means intercept only.
pub fn load_side_info(
    covariates: Option<&Path>,
    metacovariates: Option<&Path>,
    has_header: bool,
    n: usize,
    p: usize,
) -> Result<SideInfo> {
    let design = |path: Option<&Path>, rows: usize| -> Result<Array2<f64>> {
        match path {
            Some(path) => Ok(with_intercept(&read_dense(path, has_header)?)),
            None => Ok(Array2::ones((rows, 1))),
        }
    };
    let side = SideInfo::new(design(covariates, n)?, design(metacovariates, p)?)?;
    side.check_dims(n, p)?;
    Ok(side)
}

/// Write a matrix; cells with `mask == false` are left empty.
pub fn write_matrix(path: &Path, values: &Array2<f64>, mask: Option<&Array2<bool>>) -> Result<()> {
    let mut s = String::new();
    for (i, row) in values.rows().into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            if mask.map_or(true, |m| m[[i, j]]) {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| XfileError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| XfileError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| XfileError::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    n: usize,
    p: usize,
    /// Design widths including the intercept.
    q_x: usize,
    q_w: usize,
    rank: usize,
    transform: Transform,
    logpost: f64,
    hyper: HyperParams,
}

/// A fit together with everything needed to predict from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub fit: FitResult,
    pub side: SideInfo,
    pub hyper: HyperParams,
    pub transform: Transform,
}

impl SavedModel {
    /// `Σ C_h` on the latent scale.
    pub fn fitted_latent(&self) -> Array2<f64> {
        let (n, p) = self.fit.latent.dim();
        materialize(&self.fit.contributions, &self.side, self.hyper.eps_frelu, n, p)
    }

    /// Predictions on the observation scale.
    pub fn fitted_observed(&self) -> Array2<f64> {
        apply_transform(&self.fitted_latent(), self.transform)
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn contributions_csv(cs: &[FactorContribution], n: usize, p: usize, q_x: usize, q_w: usize) -> String {
    let mut header = vec!["eta".to_string(), "rho".to_string()];
    let mut names = |prefix: &str, len: usize, from: usize| {
        header.extend((0..len).map(|i| format!("{prefix}_{}", i + from)));
    };
    names("u", n, 1);
    names("psi", n, 1);
    names("beta", q_x, 0);
    names("v", p, 1);
    names("phi", p, 1);
    names("gamma", q_w, 0);
    let mut s = header.join(",");
    s.push('\n');
    for c in cs {
        let mut f: Vec<String> = vec![c.eta.to_string(), flag(c.rho).into()];
        f.extend(c.u_tilde.iter().map(f64::to_string));
        f.extend(c.psi.iter().map(|&b| flag(b).to_string()));
        f.extend(c.beta.iter().map(f64::to_string));
        f.extend(c.v_tilde.iter().map(f64::to_string));
        f.extend(c.phi.iter().map(|&b| flag(b).to_string()));
        f.extend(c.gamma.iter().map(f64::to_string));
        s.push_str(&f.join(","));
        s.push('\n');
    }
    s
}

fn parse_contributions(path: &Path, m: &Manifest) -> Result<Vec<FactorContribution>> {
    let raw = read_csv_matrix(path, true)?;
    let width = 2 + 2 * m.n + m.q_x + 2 * m.p + m.q_w;
    let bad = |message: String| XfileError::Model {
        path: path.to_path_buf(),
        message,
    };
    if raw.values.nrows() != m.rank || (m.rank > 0 && raw.values.ncols() != width) {
        return Err(bad(format!(
            "expected {} rows of {width} fields, found {:?}",
            m.rank,
            raw.values.dim()
        )));
    }
    if raw.mask.iter().any(|&o| !o) {
        return Err(bad("missing field".into()));
    }
    let to_flag = |v: f64| -> Result<bool> {
        match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(bad(format!("flag must be 0 or 1, found {v}"))),
        }
    };
    let mut out = Vec::with_capacity(m.rank);
    for row in raw.values.rows() {
        let mut at = 0;
        let mut take = |len: usize| {
            let s = row.slice(ndarray::s![at..at + len]).to_owned();
            at += len;
            s
        };
        let eta = take(1)[0];
        let rho = to_flag(take(1)[0])?;
        let u_tilde = take(m.n);
        let psi = take(m.n).iter().map(|&v| to_flag(v)).collect::<Result<Array1<bool>>>()?;
        let beta = take(m.q_x);
        let v_tilde = take(m.p);
        let phi = take(m.p).iter().map(|&v| to_flag(v)).collect::<Result<Array1<bool>>>()?;
        let gamma = take(m.q_w);
        out.push(FactorContribution {
            u_tilde,
            psi,
            beta,
            v_tilde,
            phi,
            gamma,
            eta,
            rho,
        });
    }
    Ok(out)
}

/// One column per factor.
fn family<F: Fn(&FactorContribution) -> Vec<f64>>(cs: &[FactorContribution], len: usize, get: F) -> Array2<f64> {
    let mut m = Array2::zeros((len, cs.len()));
    for (h, c) in cs.iter().enumerate() {
        for (i, v) in get(c).into_iter().enumerate() {
            m[[i, h]] = v;
        }
    }
    m
}

fn trace_csv(trace: &[TracePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in trace {
        w.serialize(t)?;
    }
    let bytes = w.into_inner().map_err(|e| XfileError::Domain(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn bools(a: &Array1<bool>) -> Vec<f64> {
    a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Write a model directory.
pub fn save_model(dir: &Path, model: &SavedModel) -> Result<()> {
    create_dir(dir)?;
    let fit = &model.fit;
    let cs = &fit.contributions;
    let (n, p) = fit.latent.dim();
    let (q_x, q_w) = (model.side.q_x(), model.side.q_w());
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        n,
        p,
        q_x,
        q_w,
        rank: fit.rank,
        transform: model.transform,
        logpost: fit.logpost,
        hyper: model.hyper.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_file(&dir.join("contributions.csv"), contributions_csv(cs, n, p, q_x, q_w).as_bytes())?;
    write_file(&dir.join("rank.txt"), format!("{}\n", fit.rank).as_bytes())?;
    write_file(&dir.join("logpost_trace.csv"), trace_csv(&fit.logpost_trace)?.as_bytes())?;

    write_matrix(&dir.join("u_tilde.csv"), &family(cs, n, |c| c.u_tilde.to_vec()), None)?;
    write_matrix(&dir.join("psi.csv"), &family(cs, n, |c| bools(&c.psi)), None)?;
    write_matrix(&dir.join("beta.csv"), &family(cs, q_x, |c| c.beta.to_vec()), None)?;
    write_matrix(&dir.join("v_tilde.csv"), &family(cs, p, |c| c.v_tilde.to_vec()), None)?;
    write_matrix(&dir.join("phi.csv"), &family(cs, p, |c| bools(&c.phi)), None)?;
    write_matrix(&dir.join("gamma.csv"), &family(cs, q_w, |c| c.gamma.to_vec()), None)?;
    write_matrix(&dir.join("eta.csv"), &family(cs, 1, |c| vec![c.eta]), None)?;

    write_matrix(&dir.join("covariates.csv"), &model.side.x, None)?;
    write_matrix(&dir.join("metacovariates.csv"), &model.side.w, None)?;
    write_matrix(&dir.join("latent.csv"), &fit.latent, None)?;

    let latent_fit = model.fitted_latent();
    match model.transform {
        Transform::Identity => write_matrix(&dir.join("fitted.csv"), &latent_fit, None)?,
        Transform::NonNegTruncation => {
            write_matrix(&dir.join("fitted.csv"), &latent_fit, None)?;
            write_matrix(&dir.join("fitted_latent.csv"), &latent_fit, None)?;
            write_matrix(
                &dir.join("fitted_observed.csv"),
                &apply_transform(&latent_fit, Transform::NonNegTruncation),
                None,
            )?;
        }
    }
    Ok(())
}

/// Read a model directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<SavedModel> {
    let bad = |message: String| XfileError::Model {
        path: dir.to_path_buf(),
        message,
    };
    let manifest: Manifest = serde_json::from_str(&read_to_string(&dir.join("manifest.json"))?)?;
    if manifest.format != MODEL_FORMAT {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    manifest.hyper.validate()?;
    let contributions = parse_contributions(&dir.join("contributions.csv"), &manifest)?;
    let side = SideInfo::new(
        read_dense(&dir.join("covariates.csv"), false)?,
        read_dense(&dir.join("metacovariates.csv"), false)?,
    )?;
    side.check_dims(manifest.n, manifest.p)?;
    if side.q_x() != manifest.q_x || side.q_w() != manifest.q_w {
        return Err(bad("side information widths differ from the manifest".into()));
    }
    let latent = read_dense(&dir.join("latent.csv"), false)?;
    if latent.dim() != (manifest.n, manifest.p) {
        return Err(bad(format!("latent.csv is {:?}", latent.dim())));
    }
    let mut rdr = csv::Reader::from_path(dir.join("logpost_trace.csv")).map_err(|e| csv_open_error(&dir.join("logpost_trace.csv"), e))?;
    let logpost_trace = rdr.deserialize().collect::<std::result::Result<Vec<TracePoint>, _>>()?;
    let fitted = materialize(&contributions, &side, manifest.hyper.eps_frelu, manifest.n, manifest.p);
    let latent_residual = &latent - &fitted;
    Ok(SavedModel {
        fit: FitResult {
            contributions,
            rank: manifest.rank,
            logpost_trace,
            latent,
            latent_residual,
            logpost: manifest.logpost,
        },
        side,
        hyper: manifest.hyper,
        transform: manifest.transform,
    })
}

/// Row-major reshape used for the grayscale maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapGrid {
    pub rows: usize,
    pub cols: usize,
}

/// Sidecar of a PGM map: the values mapped to 0 and 255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Binary PGM of `values` reshaped row-major to `grid`, linearly rescaled
/// so that the minimum is 0 and the maximum 255 (all 0 when constant).
pub fn pgm_bytes(values: &[f64], grid: MapGrid) -> Result<(Vec<u8>, PgmScale)> {
    if grid.rows * grid.cols != values.len() {
        return Err(XfileError::Dimension(format!(
            "{} x {} grid for {} values",
            grid.rows,
            grid.cols,
            values.len()
        )));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", grid.cols, grid.rows).into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > min {
            ((v - min) / (max - min) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok((
        out,
        PgmScale {
            min,
            max,
            rows: grid.rows,
            cols: grid.cols,
        },
    ))
}

/// `φ̃_h ⊙ ṽ_h` for every factor (p × k).
pub fn archetypes(fit: &FitResult) -> Array2<f64> {
    let p = fit.latent.ncols();
    family(&fit.contributions, p, |c| {
        c.v_tilde
            .iter()
            .zip(&c.phi)
            .map(|(&v, &f)| if f { v } else { 0.0 })
            .collect()
    })
}

/// `ψ̃_h ⊙ sign(ũ_h)` for every factor (n × k), entries in {−1, 0, 1}.
pub fn loading_signs(fit: &FitResult) -> Array2<f64> {
    let n = fit.latent.nrows();
    family(&fit.contributions, n, |c| {
        c.u_tilde
            .iter()
            .zip(&c.psi)
            .map(|(&u, &f)| if f && u != 0.0 { u.signum() } else { 0.0 })
            .collect()
    })
}

/// Write archetypes, loading signs, the similarity matrix and (with a grid)
/// one PGM map per archetype into `out_dir`. Returns the files written.
pub fn export_analysis(
    fit: &FitResult,
    side: &SideInfo,
    eps: f64,
    scale: KernelScale,
    grid: Option<MapGrid>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let names = ["archetypes.csv", "loading_signs.csv", "similarity.csv"];
    let paths: Vec<PathBuf> = names.iter().map(|f| out_dir.join(f)).collect();
    if fit.rank == 0 {
        log::warn!("rank 0 model: writing empty analysis files");
        for path in &paths {
            write_file(path, b"")?;
        }
        return Ok(paths);
    }
    if let Some(g) = grid {
        if g.rows * g.cols != fit.latent.ncols() {
            return Err(XfileError::Dimension(format!(
                "{} x {} grid for {} columns",
                g.rows,
                g.cols,
                fit.latent.ncols()
            )));
        }
    }
    let arch = archetypes(fit);
    write_matrix(&paths[0], &arch, None)?;
    write_matrix(&paths[1], &loading_signs(fit), None)?;
    write_matrix(&paths[2], &similarity_matrix(fit, side, eps, scale), None)?;
    let mut written = paths;
    if let Some(g) = grid {
        for (h, col) in arch.columns().into_iter().enumerate() {
            let (bytes, sc) = pgm_bytes(&col.to_vec(), g)?;
            let pgm = out_dir.join(format!("archetype_{}.pgm", h + 1));
            let mut f = fs::File::create(&pgm).map_err(|e| XfileError::io(&pgm, e))?;
            f.write_all(&bytes).map_err(|e| XfileError::io(&pgm, e))?;
            let json = out_dir.join(format!("archetype_{}.json", h + 1));
            write_json(&json, &sc)?;
            written.push(pgm);
            written.push(json);
        }
    }
    Ok(written)
}
