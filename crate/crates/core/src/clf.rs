//! Quadratic control Lyapunov functions `V(z) = zᵀPz` for the bilinear
//! model: a projected-subgradient solver for the eigenvalue program and a
//! sampled check of the quadratic-stabilizability condition.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::koopman::BilinearModel;
use crate::linalg::{self, quad_form};
use crate::systems::stream_seed;

pub const DEFAULT_GAMMA_LADDER: [f64; 5] = [2.0, 0.5, 1.0, 4.0, 8.0];
pub const DEFAULT_MAX_ITERS: usize = 5000;
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_TAU: f64 = 1e-6;
const REFINE_STARTS: usize = 10;
const REFINE_ITERS: usize = 200;
const SAMPLE_BLOCK: usize = 1024;

/// `zᵀ(PΛ+ΛᵀP)z` and `zᵀ(PB+BᵀP)z`.
pub fn clf_terms(p: &DMatrix<f64>, lambda: &DMatrix<f64>, b: &DMatrix<f64>, z: &DVector<f64>) -> (f64, f64) {
    let s = lyapunov_form(p, lambda);
    let t = lyapunov_form(p, b);
    (quad_form(&s, z), quad_form(&t, z))
}

/// `PM + MᵀP`
pub fn lyapunov_form(p: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let pm = p * m;
    &pm + pm.transpose()
}

/// Frobenius-nearest symmetric matrix with spectrum in `[c_min, c_max]`.
pub fn project_feasible(q: &DMatrix<f64>, c_min: f64, c_max: f64) -> DMatrix<f64> {
    let eig = linalg::symmetrize(q).symmetric_eigen();
    let clipped = eig.eigenvalues.map(|l| l.clamp(c_min, c_max));
    let v = &eig.eigenvectors;
    linalg::symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

/// `λ_max(PΛ+ΛᵀP) − γ·Tr(PB)`
pub fn clf_objective(p: &DMatrix<f64>, lambda: &DMatrix<f64>, b: &DMatrix<f64>, gamma: f64) -> f64 {
    linalg::sym_max_eig(&lyapunov_form(p, lambda)).0 - gamma * (p * b).trace()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub iterations: usize,
    /// Best objective seen after each iteration (index 0 is the start point).
    pub best_objective: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizabilityReport {
    pub passed: bool,
    pub samples_tested: usize,
    /// Samples with `zᵀ(PΛ+ΛᵀP)z ≥ 0`.
    pub qualifying: usize,
    /// Smallest `|zᵀ(PB+BᵀP)z|` over qualifying samples and refinement
    /// iterates; infinite when no sample qualifies.
    pub worst_margin: f64,
    pub witness: Option<DVector<f64>>,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClf {
    pub p: DMatrix<f64>,
    /// `PΛ + ΛᵀP`
    pub s: DMatrix<f64>,
    /// `PB + BᵀP`
    pub t: DMatrix<f64>,
    pub t_star: f64,
    pub gamma: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub objective: f64,
    pub trace: Option<SolverTrace>,
    pub check: Option<StabilizabilityReport>,
    pub seed: u64,
}

impl QuadraticClf {
    /// Assemble from a given `P` (symmetrized), e.g. when loading from disk.
    pub fn from_parts(
        p: DMatrix<f64>,
        lambda: &DMatrix<f64>,
        b: &DMatrix<f64>,
        gamma: f64,
        c_min: f64,
        c_max: f64,
    ) -> Result<Self> {
        if !p.is_square() || p.shape() != lambda.shape() || p.shape() != b.shape() {
            return Err(Error::DimensionMismatch {
                what: "CLF matrix vs model dimension",
                expected: lambda.nrows(),
                found: p.nrows(),
            });
        }
        let p = linalg::symmetrize(&p);
        let s = lyapunov_form(&p, lambda);
        let t = lyapunov_form(&p, b);
        let t_star = linalg::sym_max_eig(&s).0;
        let objective = t_star - gamma * (&p * b).trace();
        Ok(Self {
            p,
            s,
            t,
            t_star,
            gamma,
            c_min,
            c_max,
            objective,
            trace: None,
            check: None,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        quad_form(&self.p, z)
    }

    /// `(a, b)` with `V̇ = a + u·b` along the bilinear model.
    pub fn terms(&self, z: &DVector<f64>) -> (f64, f64) {
        (quad_form(&self.s, z), quad_form(&self.t, z))
    }

    pub fn passed(&self) -> bool {
        self.check.as_ref().is_some_and(|c| c.passed)
    }
}

fn check_inputs(lambda: &DMatrix<f64>, b: &DMatrix<f64>, c_min: f64, c_max: f64) -> Result<()> {
    if !lambda.is_square() || lambda.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            what: "Λ and B must be square and equal-sized",
            expected: lambda.nrows(),
            found: b.nrows(),
        });
    }
    if !(c_min > 0.0 && c_max >= c_min && c_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < c_min <= c_max < inf, got [{c_min}, {c_max}]"
        )));
    }
    if lambda.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("Λ and B must be finite".into()));
    }
    Ok(())
}

/// Minimize `λ_max(PΛ+ΛᵀP) − γ·Tr(PB)` over `c_min·I ⪯ P ⪯ c_max·I` by
/// projected subgradient descent. Steps have length `s₀/√k` in Frobenius
/// norm with `s₀ = c_max − c_min`; the best iterate is returned.
pub fn solve_clf(
    lambda: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gamma: f64,
    c_min: f64,
    c_max: f64,
    max_iters: usize,
    seed: u64,
) -> Result<QuadraticClf> {
    check_inputs(lambda, b, c_min, c_max)?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let n = lambda.nrows();
    let b_sym = linalg::symmetrize(b);
    let s0 = c_max - c_min;

    let mut p = DMatrix::identity(n, n) * (0.5 * (c_min + c_max));
    let mut best_p = p.clone();
    let mut best = clf_objective(&p, lambda, b, gamma);
    let mut history = Vec::with_capacity(max_iters + 1);
    history.push(best);
    for k in 1..=max_iters {
        if s0 == 0.0 {
            history.push(best);
            continue;
        }
        let (_, v) = linalg::sym_max_eig(&lyapunov_form(&p, lambda));
        let lv = lambda * &v;
        let outer = &v * lv.transpose() * 2.0;
        let grad = linalg::symmetrize(&outer) - &b_sym * gamma;
        let gnorm = grad.norm();
        if gnorm == 0.0 {
            history.push(best);
            break;
        }
        let step = s0 / (k as f64).sqrt() / gnorm;
        p = project_feasible(&(&p - grad * step), c_min, c_max);
        let f = clf_objective(&p, lambda, b, gamma);
        if f < best {
            best = f;
            best_p.copy_from(&p);
        }
        history.push(best);
    }
    let mut clf = QuadraticClf::from_parts(best_p, lambda, b, gamma, c_min, c_max)?;
    clf.trace = Some(SolverTrace {
        iterations: history.len() - 1,
        best_objective: history,
    });
    clf.seed = seed;
    Ok(clf)
}

fn unit_sample(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let z: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let norm = z.norm();
        if norm > 1e-12 {
            return z / norm;
        }
    }
}

/// Sampled test of: every unit `z` with `zᵀSz ≥ 0` has `|zᵀTz| > τ`, where
/// `S = PΛ+ΛᵀP` and `T = PB+BᵀP`. The worst qualifying samples are then
/// refined by projected gradient descent of `(zᵀTz)²` on the sphere inside
/// the region `zᵀSz ≥ 0`, together with the top eigenvector of `S`.
pub fn check_stabilizability(
    p: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n_samples: usize,
    tau: f64,
    seed: u64,
) -> StabilizabilityReport {
    let n = p.nrows();
    let s = lyapunov_form(p, lambda);
    let t = lyapunov_form(p, b);

    // (margin, z) of qualifying samples, in sample order
    let blocks: Vec<Vec<(f64, DVector<f64>)>> = (0..n_samples.div_ceil(SAMPLE_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, blk as u64));
            let count = SAMPLE_BLOCK.min(n_samples - blk * SAMPLE_BLOCK);
            (0..count)
                .filter_map(|_| {
                    let z = unit_sample(&mut rng, n);
                    (quad_form(&s, &z) >= 0.0).then(|| (quad_form(&t, &z).abs(), z))
                })
                .collect()
        })
        .collect();
    let mut qualifying: Vec<(f64, DVector<f64>)> = blocks.into_iter().flatten().collect();
    let count = qualifying.len();
    qualifying.sort_by(|x, y| x.0.total_cmp(&y.0));

    // The top eigenvector of S lies in the region whenever it is non-empty,
    // however thin; sampling alone can miss it.
    let mut starts: Vec<(f64, DVector<f64>)> = qualifying.into_iter().take(REFINE_STARTS).collect();
    let (top, v) = linalg::sym_max_eig(&s);
    if top >= 0.0 {
        starts.push((quad_form(&t, &v).abs(), v));
    }

    let mut worst = f64::INFINITY;
    let mut witness = None;
    for (m, z) in &starts {
        if *m < worst {
            worst = *m;
            witness = Some(z.clone());
        }
        let (m, z) = refine(&s, &t, z.clone());
        if m < worst {
            worst = m;
            witness = Some(z);
        }
    }
    let passed = worst > tau;
    StabilizabilityReport {
        passed,
        samples_tested: n_samples,
        qualifying: count,
        worst_margin: worst,
        witness: if passed { None } else { witness },
        tau,
        seed,
    }
}

fn refine(s: &DMatrix<f64>, t: &DMatrix<f64>, mut z: DVector<f64>) -> (f64, DVector<f64>) {
    let scale = linalg::spectral_norm(t).max(f64::MIN_POSITIVE);
    let mut eta = 0.5 / scale;
    let mut tz = t * &z;
    let mut best = z.dot(&tz).abs();
    let mut best_z = z.clone();
    for _ in 0..REFINE_ITERS {
        let q = z.dot(&tz);
        // gradient of q², projected onto the tangent space
        let g = &tz * (4.0 * q);
        let g = &g - &z * z.dot(&g);
        if g.norm() < 1e-15 {
            break;
        }
        let mut moved = false;
        for _ in 0..30 {
            let cand = &z - &g * (eta / (4.0 * q.abs()).max(1e-300));
            let cand = cand.normalize();
            let tc = t * &cand;
            let qc = cand.dot(&tc);
            if quad_form(s, &cand) >= 0.0 && qc.abs() < q.abs() {
                z = cand;
                tz = tc;
                moved = true;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
        }
        let m = z.dot(&tz).abs();
        if m < best {
            best = m;
            best_z.copy_from(&z);
        }
        if !moved {
            break;
        }
    }
    (best, best_z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClfOptions {
    pub gammas: Vec<f64>,
    pub c_min: f64,
    pub c_max: f64,
    pub max_iters: usize,
    pub n_samples: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for ClfOptions {
    fn default() -> Self {
        Self {
            gammas: DEFAULT_GAMMA_LADDER.to_vec(),
            c_min: 0.1,
            c_max: 10.0,
            max_iters: DEFAULT_MAX_ITERS,
            n_samples: DEFAULT_SAMPLES,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

/// Outcome of walking the γ ladder.
#[derive(Debug, Clone)]
pub struct ClfSynthesis {
    /// First CLF that passed the check, or the one with the largest
    /// worst-case margin if none did.
    pub clf: QuadraticClf,
    pub attempts: Vec<(f64, StabilizabilityReport)>,
}

impl ClfSynthesis {
    pub fn passed(&self) -> bool {
        self.clf.passed()
    }
}

pub fn synthesize_clf(model: &BilinearModel, opts: &ClfOptions) -> Result<ClfSynthesis> {
    synthesize(&model.lambda, &model.b, opts)
}

pub fn synthesize(lambda: &DMatrix<f64>, b: &DMatrix<f64>, opts: &ClfOptions) -> Result<ClfSynthesis> {
    if opts.gammas.is_empty() {
        return Err(Error::InvalidArgument("gamma ladder is empty".into()));
    }
    let mut attempts = Vec::new();
    let mut fallback: Option<QuadraticClf> = None;
    for &gamma in &opts.gammas {
        let mut clf = solve_clf(lambda, b, gamma, opts.c_min, opts.c_max, opts.max_iters, opts.seed)?;
        let report = check_stabilizability(&clf.p, lambda, b, opts.n_samples, opts.tau, opts.seed);
        attempts.push((gamma, report.clone()));
        let margin = report.worst_margin;
        let passed = report.passed;
        clf.check = Some(report);
        if passed {
            return Ok(ClfSynthesis { clf, attempts });
        }
        let better = fallback
            .as_ref()
            .is_none_or(|f| f.check.as_ref().is_some_and(|c| margin > c.worst_margin));
        if better {
            fallback = Some(clf);
        }
    }
    Ok(ClfSynthesis {
        clf: fallback.expect("ladder is non-empty"),
        attempts,
    })
}
