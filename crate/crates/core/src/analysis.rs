//! Model-error metrics between bilinear models and the empirical
//! sample-complexity sweep (error versus data length).

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::koopman::{identify, BilinearModel, IdentifyOptions};
use crate::linalg::{spectral_norm, C64};
use crate::systems::{generate_dataset, stream_seed, ControlAffineSystem, DatasetSpec};

/// A real mode (1 row) or conjugate pair (2 rows) of a bilinear model.
#[derive(Debug, Clone, Copy)]
struct Block {
    start: usize,
    size: usize,
    eig: C64,
}

fn blocks(model: &BilinearModel) -> Result<Vec<Block>> {
    let ev = &model.eigenvalues;
    if ev.len() != model.n_r() {
        return Err(Error::DimensionMismatch {
            what: "retained eigenvalue count",
            expected: model.n_r(),
            found: ev.len(),
        });
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < ev.len() {
        let size = if ev[i].im != 0.0 { 2 } else { 1 };
        out.push(Block { start: i, size, eig: ev[i] });
        i += size;
    }
    Ok(out)
}

fn greedy_match(cost: impl Fn(usize, usize) -> f64, na: usize, nb: usize) -> (Vec<Option<usize>>, Vec<bool>) {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..na {
        for j in 0..nb {
            let c = cost(i, j);
            if c.is_finite() {
                cands.push((c, i, j));
            }
        }
    }
    cands.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
    let mut match_a = vec![None; na];
    let mut used_b = vec![false; nb];
    for (_, i, j) in cands {
        if match_a[i].is_none() && !used_b[j] {
            match_a[i] = Some(j);
            used_b[j] = true;
        }
    }
    (match_a, used_b)
}

/// Row permutation of `b` that matches its modes to those of `a`.
///
/// Real modes and conjugate pairs are first matched by greedy nearest
/// continuous eigenvalue among blocks of equal size. Blocks left over
/// (a pair in one model that split into two real modes in the other)
/// are then matched row by row, each row carrying the eigenvalue of its
/// block (upper or lower member for a pair).
pub fn align_modes(a: &BilinearModel, b: &BilinearModel) -> Result<Vec<usize>> {
    let ba = blocks(a)?;
    let bb = blocks(b)?;
    if a.n_r() != b.n_r() {
        let unmatched = ba.iter().chain(&bb).map(|x| (x.eig.re, x.eig.im)).collect();
        return Err(Error::Alignment { unmatched });
    }
    let (match_a, used_b) = greedy_match(
        |i, j| if ba[i].size == bb[j].size { (ba[i].eig - bb[j].eig).norm() } else { f64::INFINITY },
        ba.len(),
        bb.len(),
    );

    // Rows of the leftover blocks, with their own eigenvalue.
    let rows = |bl: &[Block], keep: &dyn Fn(usize) -> bool| -> Vec<(usize, C64)> {
        bl.iter()
            .enumerate()
            .filter(|(k, _)| keep(*k))
            .flat_map(|(_, x)| (0..x.size).map(move |r| (x.start + r, if r == 0 { x.eig } else { x.eig.conj() })))
            .collect()
    };
    let rest_a = rows(&ba, &|k| match_a[k].is_none());
    let rest_b = rows(&bb, &|k| !used_b[k]);
    let (row_match, _) = greedy_match(|i, j| (rest_a[i].1 - rest_b[j].1).norm(), rest_a.len(), rest_b.len());

    let mut perm = vec![usize::MAX; a.n_r()];
    for (x, m) in ba.iter().zip(&match_a) {
        if let Some(m) = m {
            let y = bb[*m];
            for r in 0..x.size {
                perm[x.start + r] = y.start + r;
            }
        }
    }
    for ((row, _), m) in rest_a.iter().zip(row_match) {
        perm[*row] = rest_b[m.expect("equal row counts")].0;
    }
    Ok(perm)
}

fn permute(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), perm.len(), |i, j| m[(perm[i], perm[j])])
}

/// `(‖Λ_a − Λ_b‖₂, ‖B_a − B_b‖₂)` after aligning the modes of `b` to `a`.
pub fn model_error(a: &BilinearModel, b: &BilinearModel) -> Result<(f64, f64)> {
    if a.dict != b.dict {
        return Err(Error::InvalidArgument("models use different dictionaries".into()));
    }
    let perm = align_modes(a, b)?;
    let lb = permute(&b.lambda, &perm);
    let bb = permute(&b.b, &perm);
    Ok((spectral_norm(&(&a.lambda - lb)), spectral_norm(&(&a.b - bb))))
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    /// Base data settings; the horizon is set from `ref_length` and the
    /// input mode from the dataset being generated.
    pub data: DatasetSpec,
    pub lengths: Vec<usize>,
    pub ref_length: usize,
    pub trials: usize,
    pub seed: u64,
    pub identify: IdentifyOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub lengths: Vec<usize>,
    pub lambda_err: Vec<f64>,
    pub b_err: Vec<f64>,
    pub stderr_lambda: Vec<f64>,
    pub stderr_b: Vec<f64>,
    pub trials: usize,
    pub slope_lambda: f64,
    pub slope_b: f64,
    /// Number of trials whose zero-input Gram matrix was rank deficient.
    pub rank_deficient: Vec<usize>,
    /// Number of trials whose short-data fit had no valid spectrum
    /// (negative real or defective eigenvalues, unpairable modes). Means
    /// and standard errors are taken over the remaining trials.
    pub failed: Vec<usize>,
}

impl ErrorCurve {
    /// Smallest tested length whose mean errors are within both targets.
    pub fn length_for(&self, eps_lambda: f64, eps_b: f64) -> Option<usize> {
        self.lengths
            .iter()
            .zip(self.lambda_err.iter().zip(&self.b_err))
            .find(|(_, (l, b))| **l <= eps_lambda && **b <= eps_b)
            .map(|(t, _)| *t)
    }
}

/// Ordinary least-squares slope of `log y` against `log x` over positive
/// points; NaN with fewer than two.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-trial errors at each length: `(lambda_err, b_err, rank_deficient)`,
/// or `None` when the fit at that length failed.
type TrialRow = Vec<Option<(f64, f64, bool)>>;

fn spectral_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::SamplingTooCoarse { .. }
            | Error::Defective { .. }
            | Error::Pairing(_)
            | Error::IllConditioned(_)
            | Error::Alignment { .. }
    )
}

fn run_trial(system: &ControlAffineSystem, dict: &Dictionary, spec: &SweepSpec, trial: usize) -> Result<TrialRow> {
    let mut data = spec.data.clone();
    data.seed = stream_seed(spec.seed, trial as u64);
    data.horizon = spec.ref_length as f64 * data.delta_t;
    data.input_mode = 0;
    let d0 = generate_dataset(system, &data)?;
    data.input_mode = 1;
    let d1 = generate_dataset(system, &data)?;
    let x_star = system.equilibrium();
    let reference = match identify(&d0, &d1, dict, x_star, &spec.identify) {
        Ok(r) => r,
        Err(e) if spectral_failure(&e) => return Ok(vec![None; spec.lengths.len()]),
        Err(e) => return Err(e),
    };
    spec.lengths
        .iter()
        .map(|&t| {
            let (s0, s1) = (d0.truncated(t)?, d1.truncated(t)?);
            let res = identify(&s0, &s1, dict, x_star, &spec.identify).and_then(|fit| {
                let (el, eb) = model_error(&reference.model, &fit.model)?;
                Ok((el, eb, fit.u0.is_rank_deficient()))
            });
            match res {
                Ok(v) => Ok(Some(v)),
                Err(e) if spectral_failure(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Fit the model from the first `T` steps of each trajectory for every
/// `T` in `lengths` and compare against the fit from `ref_length` steps
/// of the same data, averaging over independent trials.
pub fn sample_complexity_sweep(system: &ControlAffineSystem, dict: &Dictionary, spec: &SweepSpec) -> Result<ErrorCurve> {
    if spec.lengths.is_empty() || spec.trials == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one length and one trial".into()));
    }
    if spec.lengths.windows(2).any(|w| w[1] <= w[0]) || spec.lengths[0] == 0 {
        return Err(Error::InvalidArgument("sweep lengths must be positive and strictly increasing".into()));
    }
    if spec.ref_length < *spec.lengths.last().unwrap() {
        return Err(Error::InvalidArgument(format!(
            "reference length {} is shorter than the longest tested length",
            spec.ref_length
        )));
    }
    let rows: Vec<TrialRow> = (0..spec.trials)
        .into_par_iter()
        .map(|trial| run_trial(system, dict, spec, trial))
        .collect::<Result<_>>()?;

    let k = spec.lengths.len();
    let mut curve = ErrorCurve {
        lengths: spec.lengths.clone(),
        lambda_err: Vec::with_capacity(k),
        b_err: Vec::with_capacity(k),
        stderr_lambda: Vec::with_capacity(k),
        stderr_b: Vec::with_capacity(k),
        trials: spec.trials,
        slope_lambda: f64::NAN,
        slope_b: f64::NAN,
        rank_deficient: Vec::with_capacity(k),
        failed: Vec::with_capacity(k),
    };
    for i in 0..k {
        let ok: Vec<(f64, f64, bool)> = rows.iter().filter_map(|r| r[i]).collect();
        if ok.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "every trial failed to fit at length {}",
                spec.lengths[i]
            )));
        }
        let l: Vec<f64> = ok.iter().map(|r| r.0).collect();
        let b: Vec<f64> = ok.iter().map(|r| r.1).collect();
        let (ml, sl) = mean_stderr(&l);
        let (mb, sb) = mean_stderr(&b);
        curve.lambda_err.push(ml);
        curve.stderr_lambda.push(sl);
        curve.b_err.push(mb);
        curve.stderr_b.push(sb);
        curve.rank_deficient.push(ok.iter().filter(|r| r.2).count());
        curve.failed.push(spec.trials - ok.len());
    }
    let xs: Vec<f64> = spec.lengths.iter().map(|&t| t as f64).collect();
    curve.slope_lambda = loglog_slope(&xs, &curve.lambda_err);
    curve.slope_b = loglog_slope(&xs, &curve.b_err);
    Ok(curve)
}
