//! Benchmark control-affine systems and the integrators used to simulate
//! them: Euler–Maruyama for noisy identification data and fixed-step RK4
//! for deterministic validation runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_BLOWUP: f64 = 1e6;

/// Vector fields of `ẋ = F(x) + G(x) u` for the supported plants.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// `ẋ1 = x2`, `ẋ2 = x1 − x1³ − c·x2 + u`
    Duffing { damping: f64 },
    /// Lorenz equations with the input on the second component.
    Lorenz { sigma: f64, rho: f64, beta: f64 },
    SwingNetwork(SwingNetwork),
    /// `ẋ = A x + (b + N x) u`
    Linear { a: DMatrix<f64>, b: DVector<f64>, n: DMatrix<f64> },
}

/// Classical swing-equation model of a closed generator network.
///
/// State layout is `(δ_1..δ_g, ω_1..ω_g)`. Each generator sees
/// `M_i ω̇_i = P_i − Σ_j E_i E_j / X_ij · sin(δ_i − δ_j) − D_i (ω_i − ω_s)`
/// with net injection `P_i = Pm_i − Pload_i`, plus `w_i · u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwingNetwork {
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub p_mech: Vec<f64>,
    pub p_load: Vec<f64>,
    pub voltage: Vec<f64>,
    /// Symmetric line reactances; `0` (or non-finite) means no line.
    pub reactance: DMatrix<f64>,
    pub omega_s: f64,
    /// Per-generator weight of the scalar input in the frequency equations.
    pub input_weights: Vec<f64>,
}

impl SwingNetwork {
    /// Three-machine network with the inertia, damping and mechanical power
    /// of the IEEE 9-bus machines and placeholder line reactances.
    ///
    /// The reactances, voltages and loads are not the published network
    /// data: they form a complete three-node graph, and the loads share
    /// total generation equally so that a synchronous equilibrium exists.
    pub fn ieee9_placeholder() -> Self {
        let p_mech = vec![0.719, 1.63, 0.85];
        let total: f64 = p_mech.iter().sum();
        Self {
            inertia: vec![23.64, 6.4, 3.1],
            damping: vec![0.05, 0.95, 0.05],
            p_load: vec![total / 3.0; 3],
            p_mech,
            voltage: vec![1.04, 1.025, 1.025],
            reactance: DMatrix::from_row_slice(
                3,
                3,
                &[0.0, 0.5, 0.6, 0.5, 0.0, 0.7, 0.6, 0.7, 0.0],
            ),
            omega_s: 1.0,
            input_weights: vec![0.0, 1.0, 0.0],
        }
    }

    pub fn generators(&self) -> usize {
        self.inertia.len()
    }

    fn coupling(&self, i: usize, j: usize) -> f64 {
        let x = self.reactance[(i, j)];
        if i == j || x == 0.0 || !x.is_finite() {
            0.0
        } else {
            self.voltage[i] * self.voltage[j] / x
        }
    }

    fn electrical_power(&self, delta: &[f64], i: usize) -> f64 {
        (0..self.generators())
            .map(|j| self.coupling(i, j) * (delta[i] - delta[j]).sin())
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let g = self.generators();
        let lens = [
            self.damping.len(),
            self.p_mech.len(),
            self.p_load.len(),
            self.voltage.len(),
            self.input_weights.len(),
        ];
        if g == 0 || lens.iter().any(|&l| l != g) {
            return Err(Error::InvalidArgument(
                "swing network parameter vectors must all have one entry per generator".into(),
            ));
        }
        if self.reactance.shape() != (g, g) {
            return Err(Error::DimensionMismatch {
                what: "reactance matrix",
                expected: g,
                found: self.reactance.nrows(),
            });
        }
        if self.inertia.iter().any(|&m| m <= 0.0) {
            return Err(Error::InvalidArgument("inertia must be positive".into()));
        }
        Ok(())
    }

    /// Synchronous equilibrium with `δ_1 = 0` and `ω_i = ω_s`, by Newton's
    /// method on the reduced power-balance equations.
    pub fn synchronous_equilibrium(&self) -> Result<DVector<f64>> {
        let g = self.generators();
        let imbalance: f64 = self
            .p_mech
            .iter()
            .zip(&self.p_load)
            .map(|(m, l)| m - l)
            .sum();
        if imbalance.abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "net injections sum to {imbalance}; a lossless network has no synchronous equilibrium"
            )));
        }
        let mut delta = vec![0.0; g];
        for _ in 0..100 {
            // residuals and Jacobian for generators 2..g
            let m = g - 1;
            let mut r = DVector::zeros(m);
            let mut jac = DMatrix::zeros(m, m);
            for a in 0..m {
                let i = a + 1;
                r[a] = self.p_mech[i] - self.p_load[i] - self.electrical_power(&delta, i);
                for b in 0..m {
                    let j = b + 1;
                    jac[(a, b)] = if i == j {
                        -(0..g)
                            .filter(|&k| k != i)
                            .map(|k| self.coupling(i, k) * (delta[i] - delta[k]).cos())
                            .sum::<f64>()
                    } else {
                        self.coupling(i, j) * (delta[i] - delta[j]).cos()
                    };
                }
            }
            if r.amax() < 1e-14 {
                break;
            }
            let step = jac
                .lu()
                .solve(&r)
                .ok_or_else(|| Error::InvalidArgument("singular power-flow Jacobian".into()))?;
            for a in 0..m {
                delta[a + 1] -= step[a];
            }
        }
        let mut x = DVector::zeros(2 * g);
        for i in 0..g {
            x[i] = delta[i];
            x[g + i] = self.omega_s;
        }
        Ok(x)
    }
}

/// A single-input control-affine plant with its target fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineSystem {
    name: String,
    dynamics: Dynamics,
    equilibrium: DVector<f64>,
}

impl ControlAffineSystem {
    pub fn duffing() -> Self {
        Self::duffing_with(0.5)
    }

    pub fn duffing_with(damping: f64) -> Self {
        Self {
            name: "duffing".into(),
            dynamics: Dynamics::Duffing { damping },
            equilibrium: DVector::zeros(2),
        }
    }

    pub fn lorenz() -> Self {
        Self::lorenz_with(10.0, 28.0, 8.0 / 3.0)
    }

    /// Lorenz system targeting the critical point
    /// `(√(β(ρ−1)), √(β(ρ−1)), ρ−1)`.
    pub fn lorenz_with(sigma: f64, rho: f64, beta: f64) -> Self {
        let c = (beta * (rho - 1.0)).sqrt();
        Self {
            name: "lorenz".into(),
            dynamics: Dynamics::Lorenz { sigma, rho, beta },
            equilibrium: DVector::from_vec(vec![c, c, rho - 1.0]),
        }
    }

    pub fn swing_network(net: SwingNetwork) -> Result<Self> {
        net.validate()?;
        let equilibrium = net.synchronous_equilibrium()?;
        Ok(Self {
            name: "ninebus".into(),
            dynamics: Dynamics::SwingNetwork(net),
            equilibrium,
        })
    }

    pub fn ninebus() -> Self {
        Self::swing_network(SwingNetwork::ieee9_placeholder()).expect("placeholder network is valid")
    }

    pub fn linear(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = DMatrix::zeros(b.len(), b.len());
        Self::bilinear(a, b, n)
    }

    /// Linear drift with input field `b + N x`.
    pub fn bilinear(a: DMatrix<f64>, b: DVector<f64>, n: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() || n.shape() != a.shape() {
            return Err(Error::DimensionMismatch {
                what: "linear plant (A and N square, b matching)",
                expected: a.nrows(),
                found: b.len(),
            });
        }
        let dim = b.len();
        Ok(Self {
            name: "linear".into(),
            dynamics: Dynamics::Linear { a, b, n },
            equilibrium: DVector::zeros(dim),
        })
    }

    /// Replace the target fixed point; it must be an equilibrium of the drift.
    pub fn with_equilibrium(mut self, x_star: DVector<f64>) -> Result<Self> {
        if x_star.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "equilibrium",
                expected: self.dim(),
                found: x_star.len(),
            });
        }
        let f = self.drift(x_star.as_slice());
        if f.amax() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "x* is not a fixed point of the drift: |F(x*)|∞ = {:e}",
                f.amax()
            )));
        }
        self.equilibrium = x_star;
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Duffing { .. } => 2,
            Dynamics::Lorenz { .. } => 3,
            Dynamics::SwingNetwork(net) => 2 * net.generators(),
            Dynamics::Linear { b, .. } => b.len(),
        }
    }

    pub fn equilibrium(&self) -> &DVector<f64> {
        &self.equilibrium
    }

    /// Named constants, for dataset metadata.
    pub fn params(&self) -> Vec<(String, f64)> {
        match &self.dynamics {
            Dynamics::Duffing { damping } => vec![("damping".into(), *damping)],
            Dynamics::Lorenz { sigma, rho, beta } => vec![
                ("sigma".into(), *sigma),
                ("rho".into(), *rho),
                ("beta".into(), *beta),
            ],
            Dynamics::SwingNetwork(net) => vec![("omega_s".into(), net.omega_s)],
            Dynamics::Linear { .. } => Vec::new(),
        }
    }

    /// `out ← F(x) + G(x)·u` without allocating.
    pub fn rhs_into(&self, x: &[f64], u: f64, out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::Duffing { damping } => {
                out[0] = x[1];
                out[1] = x[0] - x[0] * x[0] * x[0] - damping * x[1] + u;
            }
            Dynamics::Lorenz { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1] + u;
                out[2] = x[0] * x[1] - beta * x[2];
            }
            Dynamics::SwingNetwork(net) => {
                let g = net.generators();
                let (delta, omega) = x.split_at(g);
                for i in 0..g {
                    out[i] = omega[i] - net.omega_s;
                    let pe = net.electrical_power(delta, i);
                    out[g + i] = (net.p_mech[i] - net.p_load[i]
                        - pe
                        - net.damping[i] * (omega[i] - net.omega_s))
                        / net.inertia[i]
                        + net.input_weights[i] * u;
                }
            }
            Dynamics::Linear { a, b, n } => {
                for i in 0..b.len() {
                    let drift: f64 = (0..b.len()).map(|j| a[(i, j)] * x[j]).sum();
                    let input: f64 = b[i] + (0..b.len()).map(|j| n[(i, j)] * x[j]).sum::<f64>();
                    out[i] = drift + input * u;
                }
            }
        }
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.rhs_into(x, 0.0, out.as_mut_slice());
        out
    }

    pub fn input_field(&self, x: &[f64]) -> DVector<f64> {
        let mut f = DVector::zeros(self.dim());
        let mut fu = DVector::zeros(self.dim());
        self.rhs_into(x, 0.0, f.as_mut_slice());
        self.rhs_into(x, 1.0, fu.as_mut_slice());
        fu - f
    }

    /// `F(x) + G(x)·u`, rejecting non-finite results.
    pub fn eval_rhs(&self, x: &[f64], u: f64) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.dim(),
                found: x.len(),
            });
        }
        let mut out = DVector::zeros(self.dim());
        self.rhs_into(x, u, out.as_mut_slice());
        if let Some(component) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain {
                context: format!("{} vector field", self.name),
                component,
            });
        }
        Ok(out)
    }
}

/// States sampled every `delta_t`, with the input applied over each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub delta_t: f64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<f64>,
    pub seed: u64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least x0")
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.states.len()).map(move |k| k as f64 * self.delta_t)
    }
}

/// Euler–Maruyama settings for `ẋ = F(x) + G(x)·s + ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeSettings {
    /// Constant input amplitude `s` (0 = zero input, 1 = step input).
    pub input: f64,
    /// Per-component white-noise intensity; each internal step of length
    /// `h` receives Gaussian increments of variance `noise_var · h`.
    pub noise_var: f64,
    pub delta_t: f64,
    pub horizon: f64,
    pub substeps: usize,
    pub blowup: f64,
}

impl Default for SdeSettings {
    fn default() -> Self {
        Self {
            input: 0.0,
            noise_var: 0.01,
            delta_t: 0.25,
            horizon: 7.5,
            substeps: 25,
            blowup: DEFAULT_BLOWUP,
        }
    }
}

fn steps_for(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round().max(0.0) as usize
}

pub fn integrate_sde(
    system: &ControlAffineSystem,
    x0: &[f64],
    settings: &SdeSettings,
    seed: u64,
) -> Result<Trajectory> {
    let n = system.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            what: "initial condition",
            expected: n,
            found: x0.len(),
        });
    }
    if settings.delta_t <= 0.0 || settings.substeps == 0 || settings.noise_var < 0.0 {
        return Err(Error::InvalidArgument(
            "SDE integration needs delta_t > 0, substeps >= 1, noise_var >= 0".into(),
        ));
    }
    let steps = steps_for(settings.horizon, settings.delta_t);
    let h = settings.delta_t / settings.substeps as f64;
    let sd = (settings.noise_var * h).sqrt();
    let noise = Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut x = x0.to_vec();
    let mut f = vec![0.0; n];
    let mut states = Vec::with_capacity(steps + 1);
    states.push(DVector::from_column_slice(x0));
    for k in 0..steps {
        for j in 0..settings.substeps {
            system.rhs_into(&x, settings.input, &mut f);
            for i in 0..n {
                let dw = if sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                x[i] += h * f[i] + dw;
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= settings.blowup) {
                return Err(Error::Divergence {
                    time: k as f64 * settings.delta_t + (j + 1) as f64 * h,
                    norm,
                    ic: None,
                });
            }
        }
        states.push(DVector::from_column_slice(&x));
    }
    Ok(Trajectory {
        delta_t: settings.delta_t,
        inputs: vec![settings.input; steps],
        states,
        seed,
    })
}

/// Classical fixed-step fourth-order Runge–Kutta for `ẋ = rhs(t, x)`.
pub fn integrate_ode<F>(rhs: F, x0: &[f64], dt: f64, horizon: f64) -> Result<Trajectory>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if dt <= 0.0 {
        return Err(Error::InvalidArgument("ODE step must be positive".into()));
    }
    let n = x0.len();
    let steps = steps_for(horizon, dt);
    let mut stepper = Rk4::new(n);
    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(DVector::from_column_slice(x0));
    for k in 0..steps {
        let t = k as f64 * dt;
        stepper.step(&rhs, t, &mut x, dt);
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: t + dt,
                norm: x[i].abs(),
                ic: None,
            });
        }
        states.push(DVector::from_column_slice(&x));
    }
    Ok(Trajectory {
        delta_t: dt,
        inputs: vec![0.0; steps],
        states,
        seed: 0,
    })
}

/// Scratch buffers for one RK4 step.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    pub(crate) fn step<F>(&mut self, rhs: &F, t: f64, x: &mut [f64], dt: f64)
    where
        F: Fn(f64, &[f64], &mut [f64]),
    {
        let n = x.len();
        rhs(t, x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k1[i];
        }
        rhs(t + 0.5 * dt, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * dt * self.k2[i];
        }
        rhs(t + 0.5 * dt, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        rhs(t + dt, &self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Where the snapshot data came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub system: String,
    pub noise_var: f64,
    pub seed: u64,
    pub substeps: usize,
}

/// Snapshot pairs `(x_m, y_m)` one sampling interval apart, all generated
/// under the same constant input mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub input_mode: u8,
    pub delta_t: f64,
    /// `n × M`, one snapshot per column.
    pub x: DMatrix<f64>,
    /// `n × M`, successors of the columns of `x`.
    pub y: DMatrix<f64>,
    /// `(trajectory index, step index of x_m)` for each column.
    pub provenance: Vec<(usize, usize)>,
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl TrajectoryDataset {
    pub fn from_trajectories(
        trajectories: Vec<Trajectory>,
        input_mode: u8,
        delta_t: f64,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n = trajectories
            .first()
            .and_then(|t| t.states.first())
            .map(|s| s.len())
            .ok_or(Error::EmptyDataset)?;
        let m: usize = trajectories.iter().map(|t| t.states.len().saturating_sub(1)).sum();
        let mut x = DMatrix::zeros(n, m);
        let mut y = DMatrix::zeros(n, m);
        let mut provenance = Vec::with_capacity(m);
        let mut col = 0;
        for (ti, traj) in trajectories.iter().enumerate() {
            for (k, w) in traj.states.windows(2).enumerate() {
                if w[0].len() != n || w[1].len() != n {
                    return Err(Error::DimensionMismatch {
                        what: "trajectory state",
                        expected: n,
                        found: w[0].len().min(w[1].len()),
                    });
                }
                x.set_column(col, &w[0]);
                y.set_column(col, &w[1]);
                provenance.push((ti, k));
                col += 1;
            }
        }
        Ok(Self {
            input_mode,
            delta_t,
            x,
            y,
            provenance,
            trajectories,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Keep only the first `steps` transitions of every trajectory.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        let trajs = self
            .trajectories
            .iter()
            .map(|t| {
                let keep = (steps + 1).min(t.states.len());
                Trajectory {
                    delta_t: t.delta_t,
                    states: t.states[..keep].to_vec(),
                    inputs: t.inputs[..keep - 1].to_vec(),
                    seed: t.seed,
                }
            })
            .collect();
        Self::from_trajectories(trajs, self.input_mode, self.delta_t, self.meta.clone())
    }
}

/// Settings for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_ics: usize,
    pub ic_box: Vec<(f64, f64)>,
    pub input_mode: u8,
    pub noise_var: f64,
    pub delta_t: f64,
    pub horizon: f64,
    pub substeps: usize,
    pub seed: u64,
    pub blowup: f64,
}

/// Independent stream seed for trajectory `index` (splitmix64 finalizer).
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform samples from a box, reproducible from `seed`.
pub fn sample_box(ic_box: &[(f64, f64)], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            ic_box
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect()
        })
        .collect()
}

/// Integrate `num_ics` noisy trajectories from uniformly sampled initial
/// conditions and collect every within-trajectory snapshot pair.
///
/// Initial conditions and noise streams depend only on `seed` (not on the
/// input mode), so zero-input and step-input datasets generated with the
/// same seed share initial conditions and noise realizations.
pub fn generate_dataset(system: &ControlAffineSystem, spec: &DatasetSpec) -> Result<TrajectoryDataset> {
    if spec.num_ics == 0 || spec.ic_box.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset generation needs num_ics >= 1 and a non-empty box".into(),
        ));
    }
    if spec.ic_box.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial-condition box",
            expected: system.dim(),
            found: spec.ic_box.len(),
        });
    }
    if spec.ic_box.iter().any(|&(lo, hi)| !(hi >= lo)) {
        return Err(Error::InvalidArgument("initial-condition box has an empty interval".into()));
    }
    let ics = sample_box(&spec.ic_box, spec.num_ics, spec.seed);
    let settings = SdeSettings {
        input: spec.input_mode as f64,
        noise_var: spec.noise_var,
        delta_t: spec.delta_t,
        horizon: spec.horizon,
        substeps: spec.substeps,
        blowup: spec.blowup,
    };
    let trajectories = ics
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            integrate_sde(system, x0, &settings, stream_seed(spec.seed, i as u64)).map_err(|e| match e {
                Error::Divergence { time, norm, .. } => Error::Divergence {
                    time,
                    norm,
                    ic: Some(i),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        system: system.name().to_string(),
        noise_var: spec.noise_var,
        seed: spec.seed,
        substeps: spec.substeps,
    };
    TrajectoryDataset::from_trajectories(trajectories, spec.input_mode, spec.delta_t, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> ControlAffineSystem {
        ControlAffineSystem::linear(DMatrix::from_element(1, 1, -1.0), DVector::from_element(1, 1.0)).unwrap()
    }

    #[test]
    fn duffing_rhs_examples() {
        let s = ControlAffineSystem::duffing();
        assert_eq!(s.eval_rhs(&[1.0, 0.0], 0.0).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(s.eval_rhs(&[-1.0, 0.0], 0.0).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(s.eval_rhs(&[0.0, 0.0], 1.0).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn lorenz_critical_point_is_fixed() {
        let s = ControlAffineSystem::lorenz();
        let c = 72f64.sqrt();
        assert!((s.equilibrium()[0] - c).abs() < 1e-12);
        assert_eq!(s.equilibrium()[2], 27.0);
        let f = s.eval_rhs(&[c, c, 27.0], 0.0).unwrap();
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn benchmark_equilibria_are_fixed_points() {
        for s in [
            ControlAffineSystem::duffing(),
            ControlAffineSystem::lorenz(),
            ControlAffineSystem::ninebus(),
        ] {
            let f = s.drift(s.equilibrium().as_slice());
            assert!(f.norm() <= 1e-9, "{}: |F(x*)| = {}", s.name(), f.norm());
        }
    }

    #[test]
    fn ninebus_input_enters_generator_two_only() {
        let s = ControlAffineSystem::ninebus();
        let g = s.input_field(s.equilibrium().as_slice());
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_rhs_is_reported() {
        let s = ControlAffineSystem::duffing();
        match s.eval_rhs(&[f64::INFINITY, 0.0], 0.0) {
            Err(Error::NumericalDomain { component, .. }) => assert_eq!(component, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn with_equilibrium_rejects_non_fixed_points() {
        assert!(ControlAffineSystem::duffing()
            .with_equilibrium(DVector::from_vec(vec![0.5, 0.0]))
            .is_err());
        let s = ControlAffineSystem::duffing()
            .with_equilibrium(DVector::from_vec(vec![1.0, 0.0]))
            .unwrap();
        assert_eq!(s.equilibrium()[0], 1.0);
    }

    #[test]
    fn euler_maruyama_noise_free_decay() {
        let settings = SdeSettings {
            input: 0.0,
            noise_var: 0.0,
            delta_t: 0.001,
            horizon: 1.0,
            substeps: 1,
            blowup: DEFAULT_BLOWUP,
        };
        let tr = integrate_sde(&decay(), &[1.0], &settings, 0).unwrap();
        assert_eq!(tr.states.len(), 1001);
        assert_eq!(tr.inputs.len(), 1000);
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn zero_horizon_keeps_initial_state() {
        let settings = SdeSettings {
            horizon: 0.0,
            noise_var: 0.0,
            ..Default::default()
        };
        let tr = integrate_sde(&ControlAffineSystem::duffing(), &[0.3, 0.1], &settings, 1).unwrap();
        assert_eq!(tr.states.len(), 1);
        assert!(tr.inputs.is_empty());
    }

    #[test]
    fn duffing_fixed_point_stays_put() {
        let settings = SdeSettings {
            noise_var: 0.0,
            ..Default::default()
        };
        let tr = integrate_sde(&ControlAffineSystem::duffing(), &[1.0, 0.0], &settings, 1).unwrap();
        assert!(tr.states.iter().all(|s| s.as_slice() == [1.0, 0.0]));
    }

    #[test]
    fn sde_is_reproducible_and_seed_sensitive() {
        let settings = SdeSettings::default();
        let sys = ControlAffineSystem::duffing();
        let a = integrate_sde(&sys, &[0.5, 0.5], &settings, 42).unwrap();
        let b = integrate_sde(&sys, &[0.5, 0.5], &settings, 42).unwrap();
        let c = integrate_sde(&sys, &[0.5, 0.5], &settings, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.final_state(), c.final_state());
    }

    #[test]
    fn sde_divergence_reports_time() {
        let grow = ControlAffineSystem::linear(DMatrix::from_element(1, 1, 10.0), DVector::from_element(1, 0.0)).unwrap();
        let settings = SdeSettings {
            noise_var: 0.0,
            delta_t: 0.1,
            horizon: 10.0,
            substeps: 10,
            blowup: 1e3,
            input: 0.0,
        };
        match integrate_sde(&grow, &[1.0], &settings, 0) {
            Err(Error::Divergence { time, norm, .. }) => {
                assert!(norm > 1e3);
                assert!(time > 0.5 && time < 1.0, "t = {time}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rk4_decay_matches_exponential() {
        let tr = integrate_ode(|_, x, out| out[0] = -x[0], &[1.0], 0.01, 1.0).unwrap();
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_zero_field_is_constant() {
        let tr = integrate_ode(|_, _, out| out.fill(0.0), &[0.3, -2.0], 0.1, 2.0).unwrap();
        assert!(tr.states.iter().all(|s| s.as_slice() == [0.3, -2.0]));
    }

    #[test]
    fn lorenz_open_loop_is_bounded() {
        let sys = ControlAffineSystem::lorenz();
        let tr = integrate_ode(|_, x, out| sys.rhs_into(x, 0.0, out), &[1.0, 1.0, 1.0], 1e-3, 10.0).unwrap();
        assert!(tr.states.iter().all(|s| s.norm() < 1e3));
    }

    #[test]
    fn euler_maruyama_agrees_with_rk4_without_noise() {
        let sys = ControlAffineSystem::duffing();
        let settings = SdeSettings {
            noise_var: 0.0,
            delta_t: 0.01,
            horizon: 1.0,
            substeps: 10,
            ..Default::default()
        };
        let em = integrate_sde(&sys, &[0.8, -0.4], &settings, 0).unwrap();
        let rk = integrate_ode(|_, x, out| sys.rhs_into(x, 0.0, out), &[0.8, -0.4], 0.01, 1.0).unwrap();
        for (a, b) in em.states.iter().zip(&rk.states) {
            assert!((a - b).amax() < 1e-2);
        }
    }

    #[test]
    fn dataset_counts_pairs_and_never_straddles() {
        let spec = DatasetSpec {
            num_ics: 10,
            ic_box: vec![(-1.5, 1.5), (-1.0, 1.0)],
            input_mode: 0,
            noise_var: 0.01,
            delta_t: 0.25,
            horizon: 30.0 * 0.25,
            substeps: 25,
            seed: 3,
            blowup: DEFAULT_BLOWUP,
        };
        let ds = generate_dataset(&ControlAffineSystem::duffing(), &spec).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.meta.noise_var, 0.01);
        assert_eq!(ds.delta_t, 0.25);
        for (m, &(t, k)) in ds.provenance.iter().enumerate() {
            let traj = &ds.trajectories[t];
            assert_eq!(ds.x.column(m), traj.states[k].column(0));
            assert_eq!(ds.y.column(m), traj.states[k + 1].column(0));
        }
        let again = generate_dataset(&ControlAffineSystem::duffing(), &spec).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn dataset_modes_share_initial_conditions() {
        let mut spec = DatasetSpec {
            num_ics: 4,
            ic_box: vec![(-1.5, 1.5), (-1.0, 1.0)],
            input_mode: 0,
            noise_var: 0.01,
            delta_t: 0.25,
            horizon: 1.0,
            substeps: 5,
            seed: 9,
            blowup: DEFAULT_BLOWUP,
        };
        let d0 = generate_dataset(&ControlAffineSystem::duffing(), &spec).unwrap();
        spec.input_mode = 1;
        let d1 = generate_dataset(&ControlAffineSystem::duffing(), &spec).unwrap();
        for (a, b) in d0.trajectories.iter().zip(&d1.trajectories) {
            assert_eq!(a.states[0], b.states[0]);
            assert!(b.inputs.iter().all(|&u| u == 1.0));
        }
    }

    #[test]
    fn truncation_keeps_leading_steps() {
        let spec = DatasetSpec {
            num_ics: 3,
            ic_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
            input_mode: 0,
            noise_var: 0.01,
            delta_t: 0.25,
            horizon: 5.0,
            substeps: 5,
            seed: 1,
            blowup: DEFAULT_BLOWUP,
        };
        let ds = generate_dataset(&ControlAffineSystem::duffing(), &spec).unwrap();
        let t = ds.truncated(6).unwrap();
        assert_eq!(t.len(), 18);
        assert_eq!(t.x.column(0), ds.x.column(0));
    }
}
