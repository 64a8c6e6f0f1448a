//! EDMD approximation of the zero-input and step-input Koopman operators,
//! their spectrum, and the real bilinear model `ż = Λz + uBz` in
//! eigenfunction coordinates.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::systems::{Rk4, TrajectoryDataset};

pub const DEFAULT_SVD_RTOL: f64 = 1e-10;
pub const DEFAULT_DROP_TOL: f64 = 1e-3;
pub const DEFAULT_COND_THRESHOLD: f64 = 1e10;

/// Snapshot pairs per parallel accumulation block. Partial sums are
/// combined in block order, so results do not depend on thread count.
const BLOCK: usize = 512;

/// Finite-dimensional Koopman approximation `U = G†A`, with
/// `Ψ(y)ᵀ ≈ Ψ(x)ᵀ U` in the least-squares sense.
#[derive(Debug, Clone)]
pub struct KoopmanApprox {
    pub u: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub input_mode: u8,
    pub delta_t: f64,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub truncated: Vec<f64>,
    pub samples: usize,
}

impl KoopmanApprox {
    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    /// Relative residual of the normal equations `Gᵀ(GU − A)`.
    pub fn normal_equation_residual(&self) -> f64 {
        let r = self.gram.transpose() * (&self.gram * &self.u - &self.cross);
        r.norm() / self.cross.norm().max(f64::MIN_POSITIVE)
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.dim()
    }
}

/// EDMD on monomial observables of the shifted state `x − center`.
pub fn edmd_fit(
    dataset: &TrajectoryDataset,
    dict: &Dictionary,
    center: &[f64],
    svd_rtol: f64,
) -> Result<KoopmanApprox> {
    if dataset.dim() != dict.n() {
        return Err(Error::DimensionMismatch {
            what: "dictionary vs dataset state dimension",
            expected: dict.n(),
            found: dataset.dim(),
        });
    }
    if center.len() != dict.n() {
        return Err(Error::DimensionMismatch {
            what: "dictionary center",
            expected: dict.n(),
            found: center.len(),
        });
    }
    let observe = |x: &[f64], out: &mut [f64]| {
        let shifted: Vec<f64> = x.iter().zip(center).map(|(a, c)| a - c).collect();
        dict.evaluate_into(&shifted, out);
    };
    fit_observables(dataset, dict.len(), observe, svd_rtol)
}

/// EDMD with an arbitrary vector of `n_obs` observables.
pub fn fit_observables<F>(
    dataset: &TrajectoryDataset,
    n_obs: usize,
    observe: F,
    svd_rtol: f64,
) -> Result<KoopmanApprox>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(svd_rtol > 0.0 && svd_rtol < 1.0) {
        return Err(Error::InvalidArgument(format!("svd_rtol must lie in (0, 1), got {svd_rtol}")));
    }
    let m = dataset.len();
    let n = dataset.dim();
    let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..m.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(m);
            let mut px = DMatrix::zeros(n_obs, hi - lo);
            let mut py = DMatrix::zeros(n_obs, hi - lo);
            let mut xbuf = vec![0.0; n];
            for (c, col) in (lo..hi).enumerate() {
                xbuf.copy_from_slice(dataset.x.column(col).as_slice());
                observe(&xbuf, px.column_mut(c).as_mut_slice());
                xbuf.copy_from_slice(dataset.y.column(col).as_slice());
                observe(&xbuf, py.column_mut(c).as_mut_slice());
            }
            (&px * px.transpose(), &px * py.transpose())
        })
        .collect();
    let mut gram = DMatrix::zeros(n_obs, n_obs);
    let mut cross = DMatrix::zeros(n_obs, n_obs);
    for (g, a) in blocks {
        gram += g;
        cross += a;
    }
    gram /= m as f64;
    cross /= m as f64;
    let pinv = linalg::pinv(&gram, svd_rtol);
    let u = &pinv.matrix * &cross;
    Ok(KoopmanApprox {
        u,
        gram,
        cross,
        input_mode: dataset.input_mode,
        delta_t: dataset.delta_t,
        rank: pinv.rank,
        singular_values: pinv.singular_values,
        truncated: pinv.truncated,
        samples: m,
    })
}

/// Position of a mode within the real block structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Real,
    /// Member of a conjugate pair with positive imaginary part; the
    /// conjugate partner follows immediately.
    PairUpper,
    PairLower,
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Discrete-time eigenvalues `λ_j` of `U`.
    pub eigenvalues: Vec<C64>,
    /// Unit-norm right eigenvectors as columns, phase fixed so the
    /// largest-magnitude entry is real and positive.
    pub eigenvectors: DMatrix<C64>,
    /// Continuous-time eigenvalues `log(λ_j)/Δt`.
    pub continuous: Vec<C64>,
    pub kinds: Vec<ModeKind>,
    pub delta_t: f64,
    /// 2-norm condition number of the eigenvector matrix.
    pub condition: f64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

fn fix_phase(v: &mut DVector<C64>) {
    let idx = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let p = v[idx];
    if p.norm() > 0.0 {
        let phase = p.conj() / p.norm();
        v.iter_mut().for_each(|e| *e *= phase);
        v[idx] = C64::new(v[idx].norm(), 0.0);
    }
}

/// Eigen-decomposition of `U`, converted to continuous time and grouped
/// into real modes and adjacent conjugate pairs.
pub fn spectrum(approx: &KoopmanApprox, cond_threshold: f64) -> Result<Spectrum> {
    spectrum_of(&approx.u, approx.delta_t, cond_threshold)
}

pub fn spectrum_of(u: &DMatrix<f64>, delta_t: f64, cond_threshold: f64) -> Result<Spectrum> {
    if delta_t <= 0.0 {
        return Err(Error::InvalidArgument("delta_t must be positive".into()));
    }
    let (vals, vecs) = linalg::eig(u)?;
    let n = vals.len();
    let scale = vals.iter().map(|v| v.norm()).fold(1.0, f64::max);
    let real_tol = 1e-9 * scale;

    for v in &vals {
        if v.norm() <= 1e-12 || (v.im.abs() <= real_tol && v.re < 0.0) {
            return Err(Error::SamplingTooCoarse { re: v.re, im: v.im });
        }
    }

    // Units are either one real mode or a conjugate pair (upper, lower).
    enum Unit {
        Real(C64, DVector<C64>),
        Pair(C64, DVector<C64>),
    }
    let mut units = Vec::new();
    let mut lower: Vec<usize> = Vec::new();
    let mut upper: Vec<usize> = Vec::new();
    for (j, v) in vals.iter().enumerate() {
        if v.im.abs() <= real_tol {
            let mut vec = vecs.column(j).into_owned();
            fix_phase(&mut vec);
            vec.iter_mut().for_each(|e| e.im = 0.0);
            let nrm = vec.norm();
            vec.unscale_mut(nrm);
            units.push(Unit::Real(C64::new(v.re, 0.0), vec));
        } else if v.im > 0.0 {
            upper.push(j);
        } else {
            lower.push(j);
        }
    }
    if upper.len() != lower.len() {
        return Err(Error::Pairing(format!(
            "{} eigenvalues with positive and {} with negative imaginary part",
            upper.len(),
            lower.len()
        )));
    }
    let mut taken = vec![false; lower.len()];
    for &j in &upper {
        let target = vals[j].conj();
        let (best, dist) = lower
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, &k)| (i, (vals[k] - target).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .ok_or_else(|| Error::Pairing("ran out of conjugate partners".into()))?;
        if dist > 1e-6 * scale {
            return Err(Error::Pairing(format!(
                "eigenvalue {} has no conjugate partner (nearest at distance {dist:e})",
                vals[j]
            )));
        }
        taken[best] = true;
        let mut vec = vecs.column(j).into_owned();
        fix_phase(&mut vec);
        units.push(Unit::Pair(vals[j], vec));
    }

    let cont = |l: C64| l.ln() / delta_t;
    let key = |u: &Unit| -> (f64, f64) {
        let l = match u {
            Unit::Real(l, _) | Unit::Pair(l, _) => cont(*l),
        };
        (l.norm(), l.im.atan2(l.re))
    };
    units.sort_by(|a, b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.partial_cmp(&kb.0)
            .unwrap_or(Ordering::Equal)
            .then(ka.1.total_cmp(&kb.1))
    });

    let mut eigenvalues = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for unit in units {
        match unit {
            Unit::Real(l, v) => {
                eigenvectors.set_column(eigenvalues.len(), &v);
                eigenvalues.push(l);
                kinds.push(ModeKind::Real);
            }
            Unit::Pair(l, v) => {
                eigenvectors.set_column(eigenvalues.len(), &v);
                eigenvalues.push(l);
                kinds.push(ModeKind::PairUpper);
                eigenvectors.set_column(eigenvalues.len(), &v.map(|e| e.conj()));
                eigenvalues.push(l.conj());
                kinds.push(ModeKind::PairLower);
            }
        }
    }
    let condition = linalg::cond_complex(&eigenvectors);
    if !(condition <= cond_threshold) {
        return Err(Error::Defective {
            condition,
            threshold: cond_threshold,
        });
    }
    let continuous = eigenvalues.iter().map(|&l| cont(l)).collect();
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
        continuous,
        kinds,
        delta_t,
        condition,
    })
}

/// Real block-diagonal generator and lifting coefficients.
#[derive(Debug, Clone)]
pub struct RealForm {
    pub lambda: DMatrix<f64>,
    /// `N_r × N`; row `i` holds the dictionary coefficients of `ẑ_i`.
    pub v_r: DMatrix<f64>,
    /// Indices into the spectrum of the retained modes.
    pub retained: Vec<usize>,
    /// Continuous-time eigenvalues of the retained modes, in block order.
    pub eigenvalues: Vec<C64>,
}

/// Convert the spectrum to real coordinates: real modes give `1×1` blocks,
/// a pair `a ± bi` gives `[[a, b], [−b, a]]` with lifting rows `2·Re v` and
/// `−2·Im v`. The constant mode (`|λ̂| < drop_tol`, eigenvector within 1e-6
/// of the constant-monomial direction) is dropped.
pub fn realify(spec: &Spectrum, constant_index: Option<usize>, drop_tol: f64) -> Result<RealForm> {
    let n = spec.len();
    let is_trivial = |j: usize| -> bool {
        let Some(c) = constant_index else { return false };
        if spec.continuous[j].norm() >= drop_tol {
            return false;
        }
        let v = spec.eigenvectors.column(j);
        let dist2: f64 = v
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let target = if i == c { 1.0 } else { 0.0 };
                (e - C64::new(target, 0.0)).norm_sqr()
            })
            .sum();
        dist2.sqrt() <= 1e-6
    };

    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut retained = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut j = 0;
    while j < n {
        match spec.kinds[j] {
            ModeKind::Real => {
                if !is_trivial(j) {
                    let v = spec.eigenvectors.column(j).map(|e| e.re);
                    rows.push(v);
                    blocks.push(DMatrix::from_element(1, 1, spec.continuous[j].re));
                    retained.push(j);
                    eigenvalues.push(C64::new(spec.continuous[j].re, 0.0));
                }
                j += 1;
            }
            ModeKind::PairUpper => {
                if j + 1 >= n || spec.kinds[j + 1] != ModeKind::PairLower {
                    return Err(Error::Pairing(format!("mode {j} lacks an adjacent conjugate")));
                }
                let v = spec.eigenvectors.column(j);
                rows.push(v.map(|e| 2.0 * e.re));
                rows.push(v.map(|e| -2.0 * e.im));
                let l = spec.continuous[j];
                blocks.push(DMatrix::from_row_slice(2, 2, &[l.re, l.im, -l.im, l.re]));
                retained.extend([j, j + 1]);
                eigenvalues.extend([l, l.conj()]);
                j += 2;
            }
            ModeKind::PairLower => {
                return Err(Error::Pairing(format!("mode {j} is an unpaired lower conjugate")));
            }
        }
    }
    let nr = rows.len();
    let big_n = spec.eigenvectors.nrows();
    let mut v_r = DMatrix::zeros(nr, big_n);
    for (i, r) in rows.iter().enumerate() {
        v_r.set_row(i, &r.transpose());
    }
    let mut lambda = DMatrix::zeros(nr, nr);
    let mut k = 0;
    for b in blocks {
        let m = b.nrows();
        lambda.view_mut((k, k), (m, m)).copy_from(&b);
        k += m;
    }
    Ok(RealForm {
        lambda,
        v_r,
        retained,
        eigenvalues,
    })
}

/// Input operator in dictionary coordinates, `Ψ̇ = B̄ Ψ` for unit input:
/// `B̄ = ((U¹ − U⁰)/Δt)ᵀ`.
pub fn input_operator(u0: &KoopmanApprox, u1: &KoopmanApprox) -> Result<DMatrix<f64>> {
    if u0.dim() != u1.dim() {
        return Err(Error::DimensionMismatch {
            what: "U0 vs U1",
            expected: u0.dim(),
            found: u1.dim(),
        });
    }
    if (u0.delta_t - u1.delta_t).abs() > 1e-12 * u0.delta_t.abs() {
        return Err(Error::InvalidArgument("U0 and U1 were fitted at different delta_t".into()));
    }
    Ok(((&u1.u - &u0.u) / u0.delta_t).transpose())
}

/// `B = V_r B̄ V_r†` on the retained real eigenfunction subspace.
pub fn control_matrix_similarity(bbar: &DMatrix<f64>, v_r: &DMatrix<f64>, svd_rtol: f64) -> Result<DMatrix<f64>> {
    let pinv = linalg::pinv(v_r, svd_rtol);
    if pinv.rank < v_r.nrows() {
        return Err(Error::IllConditioned(format!(
            "lifting matrix has numerical rank {} < {} retained modes",
            pinv.rank,
            v_r.nrows()
        )));
    }
    Ok(v_r * bbar * pinv.matrix)
}

/// How the input matrix `B` is obtained in eigenfunction coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BMethod {
    /// Transform `B̄` with the lifting matrix.
    Similarity,
    /// Re-run EDMD on both datasets with the lifted coordinates as observables.
    Refit,
}

impl std::str::FromStr for BMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "refit" => Ok(Self::Refit),
            other => Err(Error::Config(format!("unknown B method `{other}` (similarity | refit)"))),
        }
    }
}

impl std::fmt::Display for BMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Similarity => "similarity",
            Self::Refit => "refit",
        })
    }
}

/// Bilinear model `ż = Λz + uBz` with `z = Φ̂(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    pub lambda: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub v_r: DMatrix<f64>,
    pub dict: Dictionary,
    pub x_star: DVector<f64>,
    pub delta_t: f64,
    /// Continuous-time eigenvalues of the retained modes.
    pub eigenvalues: Vec<C64>,
    offset: DVector<f64>,
}

impl BilinearModel {
    pub fn new(
        lambda: DMatrix<f64>,
        b: DMatrix<f64>,
        v_r: DMatrix<f64>,
        dict: Dictionary,
        x_star: DVector<f64>,
        delta_t: f64,
        eigenvalues: Vec<C64>,
    ) -> Result<Self> {
        let nr = lambda.nrows();
        if !lambda.is_square() || b.shape() != (nr, nr) || v_r.shape() != (nr, dict.len()) {
            return Err(Error::DimensionMismatch {
                what: "bilinear model blocks (Λ, B, V_r)",
                expected: nr,
                found: b.nrows(),
            });
        }
        if x_star.len() != dict.n() {
            return Err(Error::DimensionMismatch {
                what: "equilibrium",
                expected: dict.n(),
                found: x_star.len(),
            });
        }
        let offset = &v_r * dict.evaluate(&vec![0.0; dict.n()]);
        Ok(Self {
            lambda,
            b,
            v_r,
            dict,
            x_star,
            delta_t,
            eigenvalues,
            offset,
        })
    }

    pub fn n_r(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn n(&self) -> usize {
        self.dict.n()
    }

    /// `z = V_r Ψ(x − x*) − V_r Ψ(0)`, so that `lift(x*) = 0` exactly.
    pub fn lift(&self, x: &[f64]) -> DVector<f64> {
        let shifted: Vec<f64> = x.iter().zip(self.x_star.iter()).map(|(a, c)| a - c).collect();
        &self.v_r * self.dict.evaluate(&shifted) - &self.offset
    }

    /// Integrate the bilinear surrogate with RK4 under input `u(t)`.
    pub fn predict<U>(&self, z0: &DVector<f64>, u: U, dt: f64, horizon: f64) -> Result<Vec<DVector<f64>>>
    where
        U: Fn(f64) -> f64,
    {
        if dt <= 0.0 {
            return Err(Error::InvalidArgument("prediction step must be positive".into()));
        }
        if z0.len() != self.n_r() {
            return Err(Error::DimensionMismatch {
                what: "lifted initial state",
                expected: self.n_r(),
                found: z0.len(),
            });
        }
        let steps = (horizon / dt).round().max(0.0) as usize;
        let rhs = |t: f64, z: &[f64], out: &mut [f64]| {
            let z = DVector::from_column_slice(z);
            let d = &self.lambda * &z + (&self.b * &z) * u(t);
            out.copy_from_slice(d.as_slice());
        };
        let mut stepper = Rk4::new(self.n_r());
        let mut z = z0.as_slice().to_vec();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(z0.clone());
        for k in 0..steps {
            let t = k as f64 * dt;
            stepper.step(&rhs, t, &mut z, dt);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= crate::systems::DEFAULT_BLOWUP) {
                return Err(Error::Divergence {
                    time: t + dt,
                    norm,
                    ic: None,
                });
            }
            out.push(DVector::from_column_slice(&z));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyOptions {
    pub svd_rtol: f64,
    pub drop_tol: f64,
    pub cond_threshold: f64,
    pub method: BMethod,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            svd_rtol: DEFAULT_SVD_RTOL,
            drop_tol: DEFAULT_DROP_TOL,
            cond_threshold: DEFAULT_COND_THRESHOLD,
            method: BMethod::Similarity,
        }
    }
}

/// Everything produced by identification, for diagnostics.
#[derive(Debug, Clone)]
pub struct Identification {
    pub model: BilinearModel,
    pub u0: KoopmanApprox,
    pub u1: KoopmanApprox,
    pub spectrum: Spectrum,
    pub bbar: DMatrix<f64>,
}

/// Zero-input and step-input datasets → bilinear model in eigenfunction
/// coordinates centered at `x_star`.
pub fn identify(
    zero_input: &TrajectoryDataset,
    step_input: &TrajectoryDataset,
    dict: &Dictionary,
    x_star: &DVector<f64>,
    opts: &IdentifyOptions,
) -> Result<Identification> {
    if zero_input.input_mode != 0 || step_input.input_mode != 1 {
        return Err(Error::InvalidArgument(format!(
            "expected input modes (0, 1), got ({}, {})",
            zero_input.input_mode, step_input.input_mode
        )));
    }
    let center = x_star.as_slice();
    let u0 = edmd_fit(zero_input, dict, center, opts.svd_rtol)?;
    let u1 = edmd_fit(step_input, dict, center, opts.svd_rtol)?;
    let spectrum = spectrum(&u0, opts.cond_threshold)?;
    let real = realify(&spectrum, dict.constant_index(), opts.drop_tol)?;
    let bbar = input_operator(&u0, &u1)?;
    let provisional = BilinearModel::new(
        real.lambda.clone(),
        DMatrix::zeros(real.lambda.nrows(), real.lambda.nrows()),
        real.v_r.clone(),
        dict.clone(),
        x_star.clone(),
        u0.delta_t,
        real.eigenvalues.clone(),
    )?;
    let b = match opts.method {
        BMethod::Similarity => control_matrix_similarity(&bbar, &real.v_r, opts.svd_rtol)?,
        BMethod::Refit => control_matrix_refit(zero_input, step_input, &provisional, opts.svd_rtol)?,
    };
    let model = BilinearModel { b, ..provisional };
    Ok(Identification {
        model,
        u0,
        u1,
        spectrum,
        bbar,
    })
}

/// Refit EDMD with the lifted coordinates `ẑ = Φ̂(x)` as observables on
/// both datasets and take `B = ((Ū¹ − Ū⁰)/Δt)ᵀ`.
pub fn control_matrix_refit(
    zero_input: &TrajectoryDataset,
    step_input: &TrajectoryDataset,
    model: &BilinearModel,
    svd_rtol: f64,
) -> Result<DMatrix<f64>> {
    let nr = model.n_r();
    let observe = |x: &[f64], out: &mut [f64]| out.copy_from_slice(model.lift(x).as_slice());
    let ubar0 = fit_observables(zero_input, nr, observe, svd_rtol)?;
    let ubar1 = fit_observables(step_input, nr, observe, svd_rtol)?;
    if ubar0.is_rank_deficient() {
        return Err(Error::IllConditioned(format!(
            "lifted observables have Gram rank {} < {nr}",
            ubar0.rank
        )));
    }
    input_operator(&ubar0, &ubar1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{DatasetMeta, Trajectory};

    fn scalar_dataset(rate: f64, x0s: &[f64], steps: usize, mode: u8) -> TrajectoryDataset {
        let trajs = x0s
            .iter()
            .map(|&x0| {
                let mut states = vec![DVector::from_element(1, x0)];
                for _ in 0..steps {
                    let last = states.last().unwrap()[0];
                    states.push(DVector::from_element(1, rate * last));
                }
                Trajectory {
                    delta_t: 1.0,
                    states,
                    inputs: vec![0.0; steps],
                    seed: 0,
                }
            })
            .collect();
        let meta = DatasetMeta {
            system: "scalar".into(),
            noise_var: 0.0,
            seed: 0,
            substeps: 1,
        };
        TrajectoryDataset::from_trajectories(trajs, mode, 1.0, meta).unwrap()
    }

    fn approx_from(u: DMatrix<f64>, delta_t: f64) -> KoopmanApprox {
        let n = u.nrows();
        KoopmanApprox {
            u,
            gram: DMatrix::identity(n, n),
            cross: DMatrix::identity(n, n),
            input_mode: 0,
            delta_t,
            rank: n,
            singular_values: vec![1.0; n],
            truncated: vec![],
            samples: 1,
        }
    }

    #[test]
    fn edmd_recovers_scalar_linear_map() {
        let ds = scalar_dataset(0.5, &[1.0, -0.7, 2.0], 5, 0);
        let dict = Dictionary::new(1, 1).unwrap();
        let k = edmd_fit(&ds, &dict, &[0.0], DEFAULT_SVD_RTOL).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        assert!((&k.u - expected).amax() < 1e-10, "{}", k.u);
        assert!(k.normal_equation_residual() < 1e-8);
    }

    #[test]
    fn identity_map_reproduces_gram() {
        let ds = scalar_dataset(1.0, &[0.3, -0.2, 0.9], 3, 0);
        let dict = Dictionary::new(1, 3).unwrap();
        let k = edmd_fit(&ds, &dict, &[0.0], DEFAULT_SVD_RTOL).unwrap();
        let gu = &k.gram * &k.u;
        assert!((gu - &k.gram).amax() < 1e-10);
        assert!(k.normal_equation_residual() < 1e-8);
    }

    #[test]
    fn edmd_errors() {
        let ds = scalar_dataset(0.5, &[1.0], 3, 0);
        let dict2 = Dictionary::new(2, 2).unwrap();
        assert!(matches!(
            edmd_fit(&ds, &dict2, &[0.0, 0.0], 1e-10),
            Err(Error::DimensionMismatch { .. })
        ));
        let empty = ds.truncated(0).unwrap();
        let dict = Dictionary::new(1, 2).unwrap();
        assert!(matches!(edmd_fit(&empty, &dict, &[0.0], 1e-10), Err(Error::EmptyDataset)));
    }

    #[test]
    fn spectrum_of_diagonal_matrix() {
        let s = spectrum(&approx_from(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.8825])), 0.25), 1e10)
            .unwrap();
        // sorted by |λ̂|: the constant first
        assert!(s.continuous[0].norm() < 1e-12);
        let expected = 0.8825f64.ln() / 0.25;
        assert!((s.continuous[1].re - expected).abs() < 1e-12);
        assert!((s.continuous[1].re + 0.5).abs() < 1e-3);
    }

    #[test]
    fn identity_has_zero_continuous_spectrum() {
        let s = spectrum(&approx_from(DMatrix::identity(3, 3), 0.1), 1e10).unwrap();
        assert!(s.continuous.iter().all(|l| l.norm() < 1e-12));
    }

    #[test]
    fn rotation_spectrum_and_pairing() {
        let (r, th, dt) = (0.99f64, 0.1f64, 0.01);
        let u = DMatrix::from_row_slice(2, 2, &[r * th.cos(), r * th.sin(), -r * th.sin(), r * th.cos()]);
        let s = spectrum(&approx_from(u, dt), 1e10).unwrap();
        assert_eq!(s.kinds, vec![ModeKind::PairUpper, ModeKind::PairLower]);
        assert!((s.continuous[0].re - r.ln() / dt).abs() < 1e-9);
        assert!((s.continuous[0].im - th / dt).abs() < 1e-9);
        assert_eq!(s.continuous[1], s.continuous[0].conj());
        let real = realify(&s, None, 1e-3).unwrap();
        let (a, b) = (r.ln() / dt, th / dt);
        let expected = DMatrix::from_row_slice(2, 2, &[a, b, -b, a]);
        assert!((real.lambda - expected).amax() < 1e-9);
    }

    #[test]
    fn negative_real_eigenvalue_is_rejected() {
        let u = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(spectrum(&approx_from(u, 0.1), 1e10), Err(Error::SamplingTooCoarse { .. })));
    }

    #[test]
    fn defective_matrix_is_rejected() {
        let u = DMatrix::from_row_slice(2, 2, &[0.9, 1.0, 0.0, 0.9]);
        assert!(matches!(spectrum(&approx_from(u, 0.1), 1e10), Err(Error::Defective { .. })));
    }

    #[test]
    fn realify_blocks_and_constant_filtering() {
        // constant mode, a real mode at e^{-dt}, and a pair at e^{(-1±2i)dt}
        let dt = 0.01;
        let pair = C64::new(-1.0, 2.0) * dt;
        let p = pair.exp();
        let mut u = DMatrix::zeros(4, 4);
        u[(0, 0)] = 1.0;
        u[(1, 1)] = (-dt).exp();
        u[(2, 2)] = p.re;
        u[(2, 3)] = p.im;
        u[(3, 2)] = -p.im;
        u[(3, 3)] = p.re;
        let s = spectrum(&approx_from(u, dt), 1e10).unwrap();
        let real = realify(&s, Some(0), 1e-3).unwrap();
        assert_eq!(real.lambda.nrows(), 3);
        let mut found_block = false;
        for i in 0..3 {
            if (real.lambda[(i, i)] + 1.0).abs() < 1e-9 && i + 1 < 3 && real.lambda[(i, i + 1)].abs() > 1e-9 {
                let blk = real.lambda.view((i, i), (2, 2)).into_owned();
                let expected = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -1.0]);
                assert!((blk - expected).amax() < 1e-8);
                found_block = true;
            }
        }
        assert!(found_block, "{}", real.lambda);
        // the constant direction is gone from the lifting rows
        assert!(real.v_r.column(0).amax() < 1e-9);
        // eigenvalues of Λ match the retained continuous eigenvalues
        let ev = real.lambda.complex_eigenvalues();
        for l in &real.eigenvalues {
            assert!(ev.iter().any(|e| (e - l).norm() < 1e-8));
        }
        // without a constant index nothing is dropped
        assert_eq!(realify(&s, None, 1e-3).unwrap().lambda.nrows(), 4);
    }

    #[test]
    fn similarity_transform_identity() {
        // random-ish invertible V_r and C: B = V_r Cᵀ V_r⁻¹ for U1 = U0 + Δt C
        let n = 4;
        let v_r = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { ((i * 3 + j * 5) % 7) as f64 / 10.0 });
        let c = DMatrix::from_fn(n, n, |i, j| ((i * 11 + j * 2) % 5) as f64 - 2.0);
        let dt = 0.1;
        let u0 = approx_from(DMatrix::identity(n, n) * 0.9, dt);
        let u1 = approx_from(&u0.u + &c * dt, dt);
        let bbar = input_operator(&u0, &u1).unwrap();
        let b = control_matrix_similarity(&bbar, &v_r, 1e-10).unwrap();
        let expected = &v_r * c.transpose() * v_r.clone().try_inverse().unwrap();
        assert!((b - expected).norm() <= 1e-8 * c.norm());
        // equal operators give B = 0
        let b0 = control_matrix_similarity(&input_operator(&u0, &u0).unwrap(), &v_r, 1e-10).unwrap();
        assert_eq!(b0.amax(), 0.0);
    }

    #[test]
    fn rank_deficient_lifting_is_rejected() {
        let v_r = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            control_matrix_similarity(&DMatrix::identity(3, 3), &v_r, 1e-10),
            Err(Error::IllConditioned(_))
        ));
    }

    fn scalar_model(a: f64, b: f64) -> BilinearModel {
        let dict = Dictionary::new(1, 1).unwrap();
        BilinearModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            dict,
            DVector::zeros(1),
            0.01,
            vec![C64::new(a, 0.0)],
        )
        .unwrap()
    }

    #[test]
    fn predict_closed_forms() {
        let m = scalar_model(-1.0, 0.5);
        let z = m.predict(&DVector::from_element(1, 1.0), |_| 0.0, 0.01, 1.0).unwrap();
        assert!((z.last().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-8);
        let c = 0.8;
        let z = m.predict(&DVector::from_element(1, 2.0), |_| c, 0.01, 1.5).unwrap();
        assert!((z.last().unwrap()[0] - 2.0 * ((-1.0 + c * 0.5) * 1.5f64).exp()).abs() < 1e-8);
        let z = m.predict(&DVector::zeros(1), |t| t.sin() * 5.0, 0.01, 1.0).unwrap();
        assert!(z.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn lift_vanishes_at_equilibrium() {
        let dict = Dictionary::new(2, 3).unwrap();
        let v_r = DMatrix::from_fn(3, dict.len(), |i, j| ((i + 2 * j) % 5) as f64 - 1.5);
        let x_star = DVector::from_vec(vec![0.7, -1.2]);
        let m = BilinearModel::new(
            DMatrix::identity(3, 3),
            DMatrix::zeros(3, 3),
            v_r,
            dict,
            x_star.clone(),
            0.1,
            vec![],
        )
        .unwrap();
        assert_eq!(m.lift(x_star.as_slice()).amax(), 0.0);
    }
}
