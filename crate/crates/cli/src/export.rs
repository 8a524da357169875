//! Plot-ready exports of a fitted state, with matching readers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dyngam_core::design::SmoothName;
use dyngam_core::{Design, Error, Report, State};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Pointwise posterior mean and 95% band of one smooth (one level copy for
/// by-factor smooths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothCurveExport {
    pub name: String,
    pub level: Option<usize>,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SmoothCurveExport {
    /// `smooths/<file_stem>.csv`
    pub fn file_stem(&self) -> String {
        match self.level {
            Some(l) => format!("{}_{l}", self.name),
            None => self.name.clone(),
        }
    }
}

/// Curves of `name` evaluated at `grid`, one per level copy. Absent smooths
/// (by-factor with a single level) give an empty list.
pub fn smooth_curves_at(state: &State, design: &Design, name: SmoothName, grid: &[f64]) -> Vec<SmoothCurveExport> {
    let term = design.smooth(name);
    if term.width == 0 {
        return Vec::new();
    }
    let j = term.basis.n_basis();
    let copies: Vec<Option<usize>> = if term.levels.is_empty() {
        vec![None]
    } else {
        term.levels.iter().map(|&l| Some(l)).collect()
    };
    debug_assert_eq!(copies.len() * j, term.width);
    let rows: Vec<DVector<f64>> = grid.iter().map(|&x| term.basis.eval_row(x)).collect();
    copies
        .into_iter()
        .enumerate()
        .map(|(q, level)| {
            let start = term.offset + q * j;
            let m = state.m.rows(start, j);
            let cov = state.cov.view((start, start), (j, j));
            let mut out = SmoothCurveExport {
                name: name.label().to_string(),
                level,
                grid: grid.to_vec(),
                mean: Vec::with_capacity(grid.len()),
                lower: Vec::with_capacity(grid.len()),
                upper: Vec::with_capacity(grid.len()),
            };
            for u in &rows {
                let mean = u.dot(&m);
                let var = (u.transpose() * cov * u)[(0, 0)];
                let half = Z95 * var.max(0.0).sqrt();
                out.mean.push(mean);
                out.lower.push(mean - half);
                out.upper.push(mean + half);
            }
            out
        })
        .collect()
}

/// Curves on `grid_size` evenly spaced points between the boundary knots.
pub fn export_smooth(state: &State, design: &Design, name: &str, grid_size: usize) -> Result<Vec<SmoothCurveExport>, CliError> {
    let name = SmoothName::parse(name)?;
    if grid_size < 2 {
        return Err(Error::InvalidConfig("smooth grid needs at least two points".into()).into());
    }
    let knots = design.smooth(name).basis.knots();
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let grid: Vec<f64> = (0..grid_size)
        .map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64)
        .collect();
    Ok(smooth_curves_at(state, design, name, &grid))
}

pub fn write_curve_csv(curve: &SmoothCurveExport, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    let fail = |e: csv::Error| CliError::format(path, e);
    w.write_record(["x", "mean", "lower", "upper"]).map_err(fail)?;
    for i in 0..curve.grid.len() {
        w.write_record([
            curve.grid[i].to_string(),
            curve.mean[i].to_string(),
            curve.lower[i].to_string(),
            curve.upper[i].to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_curve_csv(path: &Path, name: &str, level: Option<usize>) -> Result<SmoothCurveExport, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let mut out = SmoothCurveExport {
        name: name.to_string(),
        level,
        grid: Vec::new(),
        mean: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for row in rdr.deserialize() {
        let (x, mean, lower, upper): (f64, f64, f64, f64) = row.map_err(|e| CliError::format(path, e))?;
        out.grid.push(x);
        out.mean.push(mean);
        out.lower.push(lower);
        out.upper.push(upper);
    }
    Ok(out)
}

/// Region and cause dependence summaries derived from the Wishart scale factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceExport {
    pub threshold: f64,
    pub d_ql: Vec<Vec<f64>>,
    pub d_qk: Vec<Vec<f64>>,
    pub partial_correlation_l: Vec<Vec<f64>>,
    pub adjacency_l: Vec<Vec<u8>>,
    pub correlation_k: Vec<Vec<f64>>,
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, Error> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

// A_ij / sqrt(A_ii A_jj)
fn normalize(a: &DMatrix<f64>) -> Result<DMatrix<f64>, Error> {
    let d: Vec<f64> = (0..a.nrows()).map(|i| a[(i, i)]).collect();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::SingularScale);
    }
    Ok(DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / (d[i] * d[j]).sqrt()))
}

/// Dependence summaries for given scale matrices `D^l`, `D^k`.
pub fn dependence_from_scales(d_l: &DMatrix<f64>, d_k: &DMatrix<f64>, threshold: f64) -> Result<DependenceExport, Error> {
    let inv = d_l.clone().cholesky().ok_or(Error::SingularScale)?.inverse();
    let mut pc = -normalize(&inv)?;
    let n = pc.nrows();
    for i in 0..n {
        pc[(i, i)] = 1.0;
        for j in 0..i {
            // exact symmetry so the adjacency is symmetric too
            let v = 0.5 * (pc[(i, j)] + pc[(j, i)]);
            pc[(i, j)] = v;
            pc[(j, i)] = v;
        }
    }
    let adjacency = (0..n)
        .map(|i| (0..n).map(|j| u8::from(i != j && pc[(i, j)].abs() >= threshold)).collect())
        .collect();
    Ok(DependenceExport {
        threshold,
        d_ql: matrix_rows(d_l),
        d_qk: matrix_rows(d_k),
        partial_correlation_l: matrix_rows(&pc),
        adjacency_l: adjacency,
        correlation_k: matrix_rows(&normalize(d_k)?),
    })
}

pub fn export_dependence(state: &State, threshold: f64) -> Result<DependenceExport, Error> {
    dependence_from_scales(&state.d_l(), &state.d_k(), threshold)
}

/// Every variational parameter, matrices as row lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateExport {
    pub m: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub phi: Vec<f64>,
    pub delta_k: f64,
    pub v_k: Vec<Vec<f64>>,
    pub delta_l: f64,
    pub v_l: Vec<Vec<f64>>,
}

impl From<&State> for StateExport {
    fn from(s: &State) -> Self {
        Self {
            m: s.m.iter().copied().collect(),
            cov: matrix_rows(&s.cov),
            lambda: s.lambda.iter().copied().collect(),
            mu: s.mu.iter().copied().collect(),
            sigma2: s.sigma2.iter().copied().collect(),
            phi: s.phi.iter().copied().collect(),
            delta_k: s.delta_k,
            v_k: matrix_rows(&s.v_k),
            delta_l: s.delta_l,
            v_l: matrix_rows(&s.v_l),
        }
    }
}

impl StateExport {
    pub fn to_state(&self) -> Result<State, Error> {
        Ok(State {
            m: DVector::from_vec(self.m.clone()),
            cov: matrix_of(&self.cov)?,
            lambda: DVector::from_vec(self.lambda.clone()),
            mu: DVector::from_vec(self.mu.clone()),
            sigma2: DVector::from_vec(self.sigma2.clone()),
            phi: DVector::from_vec(self.phi.clone()),
            delta_k: self.delta_k,
            v_k: matrix_of(&self.v_k)?,
            delta_l: self.delta_l,
            v_l: matrix_of(&self.v_l)?,
        })
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::format(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

pub fn write_state_json(state: &State, path: &Path) -> Result<(), CliError> {
    write_json(&StateExport::from(state), path)
}

pub fn read_state_json(path: &Path) -> Result<State, CliError> {
    Ok(read_json::<StateExport>(path)?.to_state()?)
}

pub fn write_dependence_json(dep: &DependenceExport, path: &Path) -> Result<(), CliError> {
    write_json(dep, path)
}

pub fn read_dependence_json(path: &Path) -> Result<DependenceExport, CliError> {
    read_json(path)
}

pub fn write_elbo_trace(trace: &[f64], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    let fail = |e: csv::Error| CliError::format(path, e);
    w.write_record(["sweep", "elbo"]).map_err(fail)?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string()]).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_elbo_trace(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let (sweep, elbo): (usize, f64) = row.map_err(|e| CliError::format(path, e))?;
        if sweep != i {
            return Err(CliError::format(path, format!("sweep {sweep} out of order")));
        }
        out.push(elbo);
    }
    Ok(out)
}

/// Human-readable digest of a fit.
pub fn summary_text(report: &Report, design: &Design, dep: &DependenceExport) -> String {
    let d = design.dims();
    let s = &report.final_state;
    let mut t = String::new();
    let mut line = |l: String| {
        t.push_str(&l);
        t.push('\n');
    };
    line(format!(
        "dims: regions={} causes={} ages={} genders={} months={}",
        d.regions, d.causes, d.ages, d.genders, d.months
    ));
    line(format!("converged: {}", report.converged));
    line(format!("sweeps: {}", report.iterations));
    line(format!("final_elbo: {}", report.elbo_trace.last().copied().unwrap_or(f64::NAN)));
    line(format!("wall_time_s: {:.3}", report.wall_time));
    let phi_mean = s.phi.mean();
    line(format!(
        "phi: mean={phi_mean:.4} min={:.4} max={:.4}",
        s.phi.min(),
        s.phi.max()
    ));
    for name in SmoothName::ALL {
        let o = 2 * name.ordinal();
        line(format!("lambda_{}: {} {}", name.label(), s.lambda[o], s.lambda[o + 1]));
    }
    let edges: usize = dep.adjacency_l.iter().flatten().map(|&a| a as usize).sum::<usize>() / 2;
    line(format!("region_edges: {edges} (threshold {})", dep.threshold));
    for w in &report.warnings {
        line(format!("warning: {w}"));
    }
    t
}

/// Paths of everything a fit writes.
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub elbo_trace: PathBuf,
    pub state: PathBuf,
    pub smooths: Vec<PathBuf>,
    pub dependence: PathBuf,
    pub summary: PathBuf,
}

pub fn write_fit_artifacts(
    out: &Path,
    report: &Report,
    design: &Design,
    threshold: f64,
    grid_size: usize,
) -> Result<FitArtifacts, CliError> {
    let smooth_dir = out.join("smooths");
    fs::create_dir_all(&smooth_dir).map_err(|e| CliError::io(&smooth_dir, e))?;
    let state = &report.final_state;

    let elbo_trace = out.join("elbo_trace.csv");
    write_elbo_trace(&report.elbo_trace, &elbo_trace)?;
    let state_path = out.join("variational_state.json");
    write_state_json(state, &state_path)?;

    let mut smooths = Vec::new();
    for name in SmoothName::ALL {
        for curve in export_smooth(state, design, name.label(), grid_size)? {
            let p = smooth_dir.join(format!("{}.csv", curve.file_stem()));
            write_curve_csv(&curve, &p)?;
            smooths.push(p);
        }
    }

    let dep = export_dependence(state, threshold)?;
    let dependence = out.join("dependence.json");
    write_dependence_json(&dep, &dependence)?;
    let summary = out.join("summary.txt");
    fs::write(&summary, summary_text(report, design, &dep)).map_err(|e| CliError::io(&summary, e))?;

    Ok(FitArtifacts { elbo_trace, state: state_path, smooths, dependence, summary })
}
