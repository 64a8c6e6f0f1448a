//! Plain-text persistence: snapshot datasets and simulation runs as CSV,
//! models and CLFs as `key = value` files. Floats are written with 17
//! significant digits so that save → load → save is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::analysis::ErrorCurve;
use crate::clf::{QuadraticClf, StabilizabilityReport};
use crate::control::SimulationResult;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::koopman::BilinearModel;
use crate::linalg::C64;
use crate::systems::{DatasetMeta, Trajectory, TrajectoryDataset};

/// Round-trip float formatting.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join<T>(items: impl IntoIterator<Item = T>, sep: &str, f: impl Fn(T) -> String) -> String {
    items.into_iter().map(f).collect::<Vec<_>>().join(sep)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Flat `key = value` file; `#` starts a comment line.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    pub path: String,
    /// `(key, value, 1-based line)` in file order.
    pub entries: Vec<(String, String, usize)>,
}

impl KvFile {
    pub fn parse(path: &str, text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, got `{line}`")))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(path, i + 1, "empty key"));
            }
            if let Some((_, _, first)) = entries.iter().find(|e| e.0 == key) {
                return Err(Error::parse(path, i + 1, format!("duplicate key `{key}` (first on line {first})")));
            }
            entries.push((key, v.trim().to_string(), i + 1));
        }
        Ok(Self { path: path.to_string(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&path.display().to_string(), &read_file(path)?)
    }

    fn entry(&self, key: &str) -> Option<&(String, String, usize)> {
        self.entries.iter().find(|e| e.0 == key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.1.as_str())
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entry(key).map_or(0, |e| e.2)
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::parse(&self.path, self.line_of(key), format!("{key}: {}", msg.into()))
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get_str(key)
            .ok_or_else(|| Error::parse(&self.path, 0, format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get_str(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| self.err(key, format!("`{v}`: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::parse(&self.path, 0, format!("missing key `{key}`")))
    }

    /// Whitespace-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.get_str(key) else { return Ok(None) };
        v.split_whitespace()
            .map(|t| t.parse::<T>().map_err(|e| self.err(key, format!("`{t}`: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    pub fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get_list(key)?
            .ok_or_else(|| Error::parse(&self.path, 0, format!("missing key `{key}`")))
    }

    pub fn require_matrix(&self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let v: Vec<f64> = self.require_list(key)?;
        if v.len() != rows * cols {
            return Err(self.err(key, format!("expected {} entries ({rows}×{cols}), found {}", rows * cols, v.len())));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }
}

fn matrix_row_major(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&fmt_f64(m[(i, j)]));
        }
    }
    out
}

// ---------------------------------------------------------------- datasets

pub fn dataset_to_string(ds: &TrajectoryDataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# system={}", ds.meta.system);
    let _ = writeln!(s, "# input_mode={}", ds.input_mode);
    let _ = writeln!(s, "# delta_t={}", fmt_f64(ds.delta_t));
    let _ = writeln!(s, "# noise_var={}", fmt_f64(ds.meta.noise_var));
    let _ = writeln!(s, "# seed={}", ds.meta.seed);
    let _ = writeln!(s, "# substeps={}", ds.meta.substeps);
    let _ = writeln!(s, "# traj_seeds={}", join(&ds.trajectories, " ", |t| t.seed.to_string()));
    let n = ds.trajectories.first().map_or(ds.dim(), |t| t.states[0].len());
    let _ = writeln!(s, "traj,k,s,{}", join(1..=n, ",", |i| format!("x{i}")));
    for (ti, t) in ds.trajectories.iter().enumerate() {
        for (k, x) in t.states.iter().enumerate() {
            let u = t.inputs.get(k).copied().unwrap_or(ds.input_mode as f64);
            let _ = writeln!(s, "{ti},{k},{},{}", fmt_f64(u), join(x.iter(), ",", |v| fmt_f64(*v)));
        }
    }
    s
}

pub fn save_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<()> {
    write_file(path, &dataset_to_string(ds))
}

pub fn parse_dataset(path: &str, text: &str) -> Result<TrajectoryDataset> {
    let mut meta = DatasetMeta {
        system: String::new(),
        noise_var: 0.0,
        seed: 0,
        substeps: 1,
    };
    let mut input_mode = None;
    let mut delta_t = None;
    let mut seeds: Vec<u64> = Vec::new();
    let mut header: Option<usize> = None;
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::parse(path, lineno, msg);
        if let Some(c) = line.strip_prefix('#') {
            let Some((k, v)) = c.trim().split_once('=') else { continue };
            let v = v.trim();
            let num = |v: &str| v.parse::<f64>().map_err(|e| perr(format!("{k}: {e}")));
            match k.trim() {
                "system" => meta.system = v.to_string(),
                "input_mode" => input_mode = Some(v.parse::<u8>().map_err(|e| perr(format!("input_mode: {e}")))?),
                "delta_t" => delta_t = Some(num(v)?),
                "noise_var" => meta.noise_var = num(v)?,
                "seed" => meta.seed = v.parse().map_err(|e| perr(format!("seed: {e}")))?,
                "substeps" => meta.substeps = v.parse().map_err(|e| perr(format!("substeps: {e}")))?,
                "traj_seeds" => {
                    seeds = v
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|e| perr(format!("traj_seeds: {e}"))))
                        .collect::<Result<_>>()?
                }
                _ => {}
            }
            continue;
        }
        let Some(n) = header else {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() < 4 || cols[..3] != ["traj", "k", "s"] {
                return Err(perr(format!("expected header `traj,k,s,x1..xn`, got `{line}`")));
            }
            header = Some(cols.len() - 3);
            continue;
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n + 3 {
            return Err(perr(format!("expected {} fields, found {}", n + 3, fields.len())));
        }
        let ti: usize = fields[0].parse().map_err(|e| perr(format!("traj: {e}")))?;
        let k: usize = fields[1].parse().map_err(|e| perr(format!("k: {e}")))?;
        let u: f64 = fields[2].parse().map_err(|e| perr(format!("s: {e}")))?;
        let x: Vec<f64> = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| perr(format!("state `{f}`: {e}"))))
            .collect::<Result<_>>()?;
        if ti == trajs.len() && k == 0 {
            trajs.push(Trajectory {
                delta_t: 0.0,
                states: Vec::new(),
                inputs: Vec::new(),
                seed: 0,
            });
        }
        let count = trajs.len();
        let t = match trajs.get_mut(ti) {
            Some(t) if ti + 1 == count && t.states.len() == k => t,
            _ => return Err(perr(format!("rows must be ordered by (traj, k); unexpected ({ti}, {k})"))),
        };
        if k > 0 {
            t.inputs.push(u);
        }
        t.states.push(DVector::from_vec(x));
    }
    let input_mode = input_mode.ok_or_else(|| Error::parse(path, 0, "missing `# input_mode=`"))?;
    let delta_t = delta_t.ok_or_else(|| Error::parse(path, 0, "missing `# delta_t=`"))?;
    if trajs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !seeds.is_empty() && seeds.len() != trajs.len() {
        return Err(Error::parse(path, 0, format!("{} trajectory seeds for {} trajectories", seeds.len(), trajs.len())));
    }
    for (i, t) in trajs.iter_mut().enumerate() {
        t.delta_t = delta_t;
        t.seed = seeds.get(i).copied().unwrap_or(0);
    }
    TrajectoryDataset::from_trajectories(trajs, input_mode, delta_t, meta)
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    parse_dataset(&path.display().to_string(), &read_file(path)?)
}

// ------------------------------------------------------------------ models

pub fn model_to_string(m: &BilinearModel) -> String {
    let mut s = String::from("# bilinear model ż = Λz + uBz, z = V_r Ψ(x − x*) − V_r Ψ(0)\n");
    let _ = writeln!(s, "n = {}", m.n());
    let _ = writeln!(s, "n_r = {}", m.n_r());
    let _ = writeln!(s, "delta_t = {}", fmt_f64(m.delta_t));
    let _ = writeln!(s, "degree = {}", m.dict.degree());
    let _ = writeln!(s, "dict_len = {}", m.dict.len());
    let _ = writeln!(s, "exponents = {}", join(m.dict.exponents(), " ", |e| join(e, " ", |p| p.to_string())));
    let _ = writeln!(s, "x_star = {}", join(m.x_star.iter(), " ", |v| fmt_f64(*v)));
    let _ = writeln!(s, "eigenvalues = {}", join(&m.eigenvalues, " ", |l| format!("{} {}", fmt_f64(l.re), fmt_f64(l.im))));
    let _ = writeln!(s, "lambda = {}", matrix_row_major(&m.lambda));
    let _ = writeln!(s, "b = {}", matrix_row_major(&m.b));
    let _ = writeln!(s, "v_r = {}", matrix_row_major(&m.v_r));
    s
}

pub fn save_model(path: &Path, m: &BilinearModel) -> Result<()> {
    write_file(path, &model_to_string(m))
}

pub fn parse_model(path: &str, text: &str) -> Result<BilinearModel> {
    let kv = KvFile::parse(path, text)?;
    let n: usize = kv.require("n")?;
    let nr: usize = kv.require("n_r")?;
    let degree: u32 = kv.require("degree")?;
    let len: usize = kv.require("dict_len")?;
    let flat: Vec<u32> = kv.require_list("exponents")?;
    if flat.len() != n * len {
        return Err(Error::parse(path, kv.line_of("exponents"), format!("expected {} exponents, found {}", n * len, flat.len())));
    }
    let exps = flat.chunks(n).map(|c| c.to_vec()).collect();
    let dict = Dictionary::from_exponents(n, degree, exps)?;
    let x_star: Vec<f64> = kv.require_list("x_star")?;
    let ev: Vec<f64> = kv.require_list("eigenvalues")?;
    if ev.len() != 2 * nr {
        return Err(Error::parse(path, kv.line_of("eigenvalues"), format!("expected {} numbers, found {}", 2 * nr, ev.len())));
    }
    let eigenvalues = ev.chunks(2).map(|c| C64::new(c[0], c[1])).collect();
    BilinearModel::new(
        kv.require_matrix("lambda", nr, nr)?,
        kv.require_matrix("b", nr, nr)?,
        kv.require_matrix("v_r", nr, len)?,
        dict,
        DVector::from_vec(x_star),
        kv.require("delta_t")?,
        eigenvalues,
    )
}

pub fn load_model(path: &Path) -> Result<BilinearModel> {
    parse_model(&path.display().to_string(), &read_file(path)?)
}

// -------------------------------------------------------------------- CLFs

pub fn clf_to_string(c: &QuadraticClf) -> String {
    let mut s = String::from("# quadratic CLF V(z) = zᵀPz\n");
    let _ = writeln!(s, "dim = {}", c.dim());
    let _ = writeln!(s, "gamma = {}", fmt_f64(c.gamma));
    let _ = writeln!(s, "c_min = {}", fmt_f64(c.c_min));
    let _ = writeln!(s, "c_max = {}", fmt_f64(c.c_max));
    let _ = writeln!(s, "t_star = {}", fmt_f64(c.t_star));
    let _ = writeln!(s, "objective = {}", fmt_f64(c.objective));
    let _ = writeln!(s, "seed = {}", c.seed);
    if let Some(r) = &c.check {
        let _ = writeln!(s, "check.passed = {}", r.passed);
        let _ = writeln!(s, "check.samples = {}", r.samples_tested);
        let _ = writeln!(s, "check.qualifying = {}", r.qualifying);
        let _ = writeln!(s, "check.worst_margin = {}", fmt_f64(r.worst_margin));
        let _ = writeln!(s, "check.tau = {}", fmt_f64(r.tau));
        let _ = writeln!(s, "check.seed = {}", r.seed);
        if let Some(w) = &r.witness {
            let _ = writeln!(s, "check.witness = {}", join(w.iter(), " ", |v| fmt_f64(*v)));
        }
    }
    if let Some(t) = &c.trace {
        let _ = writeln!(s, "solver.iterations = {}", t.iterations);
        let _ = writeln!(s, "solver.best_objective = {}", fmt_f64(*t.best_objective.last().unwrap_or(&c.objective)));
    }
    let _ = writeln!(s, "p = {}", matrix_row_major(&c.p));
    s
}

pub fn save_clf(path: &Path, c: &QuadraticClf) -> Result<()> {
    write_file(path, &clf_to_string(c))
}

/// Load a CLF for `model`; the solver trace is not restored.
pub fn parse_clf(path: &str, text: &str, model: &BilinearModel) -> Result<QuadraticClf> {
    let kv = KvFile::parse(path, text)?;
    let dim: usize = kv.require("dim")?;
    if dim != model.n_r() {
        return Err(Error::DimensionMismatch {
            what: "CLF dimension vs model",
            expected: model.n_r(),
            found: dim,
        });
    }
    let p = kv.require_matrix("p", dim, dim)?;
    let mut c = QuadraticClf::from_parts(
        p,
        &model.lambda,
        &model.b,
        kv.require("gamma")?,
        kv.require("c_min")?,
        kv.require("c_max")?,
    )?;
    c.seed = kv.get("seed")?.unwrap_or(0);
    if let Some(passed) = kv.get::<bool>("check.passed")? {
        c.check = Some(StabilizabilityReport {
            passed,
            samples_tested: kv.require("check.samples")?,
            qualifying: kv.require("check.qualifying")?,
            worst_margin: kv.require("check.worst_margin")?,
            witness: kv.get_list::<f64>("check.witness")?.map(DVector::from_vec),
            tau: kv.require("check.tau")?,
            seed: kv.require("check.seed")?,
        });
    }
    Ok(c)
}

pub fn load_clf(path: &Path, model: &BilinearModel) -> Result<QuadraticClf> {
    parse_clf(&path.display().to_string(), &read_file(path)?, model)
}

// ------------------------------------------------------------- simulations

pub fn simulation_to_string(r: &SimulationResult) -> String {
    let n = r.states.first().map_or(0, |x| x.len());
    let mut s = format!("t,{},u,V\n", join(1..=n, ",", |i| format!("x{i}")));
    for i in 0..r.len() {
        let v = r.lyapunov.get(i).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt_f64(r.times[i]),
            join(r.states[i].iter(), ",", |v| fmt_f64(*v)),
            fmt_f64(r.controls[i]),
            fmt_f64(v)
        );
    }
    s
}

pub fn save_simulation(path: &Path, r: &SimulationResult) -> Result<()> {
    write_file(path, &simulation_to_string(r))
}

/// One summary row per initial condition.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub x0: Vec<f64>,
    pub converged: bool,
    pub final_distance: f64,
    pub status: String,
}

pub fn save_summary(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.x0.len());
    let mut s = format!("ic,{},converged,final_distance,status\n", join(1..=n, ",", |i| format!("x0_{i}")));
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{}",
            join(&r.x0, ",", |v| fmt_f64(*v)),
            r.converged,
            fmt_f64(r.final_distance),
            r.status.replace(',', ";")
        );
    }
    let conv = rows.iter().filter(|r| r.converged).count();
    let _ = writeln!(s, "# converged={conv}/{}", rows.len());
    write_file(path, &s)
}

// ------------------------------------------------------------------ curves

pub fn curve_to_string(c: &ErrorCurve) -> String {
    let mut s = String::from("T,lambda_err,b_err,stderr_lambda,stderr_b\n");
    for i in 0..c.lengths.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.lengths[i],
            fmt_f64(c.lambda_err[i]),
            fmt_f64(c.b_err[i]),
            fmt_f64(c.stderr_lambda[i]),
            fmt_f64(c.stderr_b[i])
        );
    }
    let _ = writeln!(
        s,
        "# trials={} slope_lambda={} slope_b={} rank_deficient={} failed={}",
        c.trials,
        fmt_f64(c.slope_lambda),
        fmt_f64(c.slope_b),
        join(&c.rank_deficient, " ", |v| v.to_string()),
        join(&c.failed, " ", |v| v.to_string())
    );
    s
}

pub fn save_curve(path: &Path, c: &ErrorCurve) -> Result<()> {
    write_file(path, &curve_to_string(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing_reports_lines() {
        let kv = KvFile::parse("cfg", "# c\na = 1\n\nb = x y\n").unwrap();
        assert_eq!(kv.require::<i32>("a").unwrap(), 1);
        assert_eq!(kv.line_of("b"), 4);
        match kv.require::<f64>("b") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match KvFile::parse("cfg", "a = 1\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(KvFile::parse("cfg", "a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, f64::MIN_POSITIVE, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn dataset_format_errors_have_line_numbers() {
        let text = "# input_mode=0\n# delta_t=0.1\ntraj,k,s,x1\n0,0,0,1.0\n0,1,0,abc\n";
        match parse_dataset("d.csv", text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let text = "# input_mode=0\n# delta_t=0.1\ntraj,k,s,x1\n0,0,0,1.0\n0,2,0,1.0\n";
        assert!(matches!(parse_dataset("d.csv", text), Err(Error::Parse { line: 5, .. })));
    }
}
