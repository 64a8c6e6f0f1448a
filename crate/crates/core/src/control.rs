//! Feedback laws in lifted coordinates and closed-loop simulation of the
//! true plant under them.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::clf::QuadraticClf;
use crate::error::{Error, Result};
use crate::koopman::BilinearModel;
use crate::systems::{ControlAffineSystem, Dynamics, Rk4, DEFAULT_BLOWUP};

/// Threshold below which `b(z)` counts as zero.
pub const B_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// `u = −β·b(z)`
    Gradient,
    /// `u = −K·sign(b(z))`
    BangBang,
    /// Modified Sontag formula with `q(z) = c_q·zᵀz`.
    Sontag,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Self::Gradient),
            "bangbang" => Ok(Self::BangBang),
            "sontag" => Ok(Self::Sontag),
            other => Err(Error::Config(format!(
                "unknown controller `{other}` (gradient | bangbang | sontag)"
            ))),
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gradient => "gradient",
            Self::BangBang => "bangbang",
            Self::Sontag => "sontag",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub beta: f64,
    pub k: f64,
    pub q_coeff: f64,
    pub saturation: Option<f64>,
}

impl ControllerSpec {
    pub fn gradient(beta: f64) -> Self {
        Self { kind: ControllerKind::Gradient, beta, ..Self::default() }
    }

    pub fn bangbang(k: f64) -> Self {
        Self { kind: ControllerKind::BangBang, k, ..Self::default() }
    }

    pub fn sontag(q_coeff: f64) -> Self {
        Self { kind: ControllerKind::Sontag, q_coeff, ..Self::default() }
    }

    pub fn with_saturation(mut self, bound: f64) -> Self {
        self.saturation = Some(bound);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(self.beta) && positive(self.k) && positive(self.q_coeff)) {
            return Err(Error::InvalidArgument("controller gains must be positive".into()));
        }
        if let Some(s) = self.saturation {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument("saturation bound must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Gradient,
            beta: 1.0,
            k: 1.0,
            q_coeff: 10.0,
            saturation: None,
        }
    }
}

/// Control from the CLF terms `a = zᵀ(PΛ+ΛᵀP)z`, `b = zᵀ(PB+BᵀP)z`.
pub fn feedback_from_terms(spec: &ControllerSpec, a: f64, b: f64, zz: f64) -> f64 {
    let u = match spec.kind {
        ControllerKind::Gradient => -spec.beta * b,
        ControllerKind::BangBang => {
            if b > 0.0 {
                -spec.k
            } else if b < 0.0 {
                spec.k
            } else {
                0.0
            }
        }
        ControllerKind::Sontag => {
            if b.abs() > B_EPS {
                let q = spec.q_coeff * zz;
                -(a + (a * a + q * b * b).sqrt()) / b
            } else {
                0.0
            }
        }
    };
    match spec.saturation {
        Some(s) => u.clamp(-s, s),
        None => u,
    }
}

pub fn feedback(spec: &ControllerSpec, clf: &QuadraticClf, z: &DVector<f64>) -> f64 {
    let (a, b) = clf.terms(z);
    feedback_from_terms(spec, a, b, z.norm_squared())
}

/// `F(x) + G(x)·k(Φ̂(x))`
pub fn closed_loop_rhs(
    system: &ControlAffineSystem,
    model: &BilinearModel,
    clf: &QuadraticClf,
    spec: &ControllerSpec,
    x: &[f64],
) -> Result<DVector<f64>> {
    let z = model.lift(x);
    system.eval_rhs(x, feedback(spec, clf, &z))
}

/// How the distance to the target is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvergenceMetric {
    /// `‖x − x*‖₂`
    #[default]
    State,
    /// `max_i |ω_i − ω_s|` for swing networks, else the state distance.
    Frequency,
}

impl std::str::FromStr for ConvergenceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(Self::State),
            "frequency" => Ok(Self::Frequency),
            other => Err(Error::Config(format!("unknown metric `{other}` (state | frequency)"))),
        }
    }
}

impl std::fmt::Display for ConvergenceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::State => "state",
            Self::Frequency => "frequency",
        })
    }
}

impl ConvergenceMetric {
    pub fn distance(&self, system: &ControlAffineSystem, x: &[f64]) -> f64 {
        match (self, system.dynamics()) {
            (Self::Frequency, Dynamics::SwingNetwork(net)) => {
                let g = net.generators();
                x[g..].iter().map(|w| (w - net.omega_s).abs()).fold(0.0, f64::max)
            }
            _ => x
                .iter()
                .zip(system.equilibrium().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub dt: f64,
    pub horizon: f64,
    /// Record every `record_every`-th integration step.
    pub record_every: usize,
    pub radius: f64,
    pub metric: ConvergenceMetric,
    pub blowup: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 50.0,
            record_every: 10,
            radius: 0.05,
            metric: ConvergenceMetric::State,
            blowup: DEFAULT_BLOWUP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Empty for open-loop runs.
    pub lifted: Vec<DVector<f64>>,
    pub controls: Vec<f64>,
    /// `zᵀPz`; empty for open-loop runs.
    pub lyapunov: Vec<f64>,
    pub converged: bool,
    pub final_distance: f64,
}

impl SimulationResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("simulation records x0")
    }

    pub fn max_abs_control(&self) -> f64 {
        self.controls.iter().fold(0.0, |m, u| m.max(u.abs()))
    }
}

fn check_settings(system: &ControlAffineSystem, x0: &[f64], settings: &SimSettings) -> Result<usize> {
    if !(settings.dt > 0.0) || settings.record_every == 0 {
        return Err(Error::InvalidArgument("simulation needs dt > 0 and record_every >= 1".into()));
    }
    if x0.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial condition",
            expected: system.dim(),
            found: x0.len(),
        });
    }
    Ok((settings.horizon / settings.dt).round().max(0.0) as usize)
}

fn run<C>(
    system: &ControlAffineSystem,
    x0: &[f64],
    settings: &SimSettings,
    control: C,
    mut record: impl FnMut(&[f64]),
) -> Result<(Vec<f64>, Vec<DVector<f64>>)>
where
    C: Fn(&[f64]) -> f64,
{
    let steps = check_settings(system, x0, settings)?;
    let rhs = |_t: f64, x: &[f64], out: &mut [f64]| system.rhs_into(x, control(x), out);
    let mut stepper = Rk4::new(system.dim());
    let mut x = x0.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![DVector::from_column_slice(x0)];
    record(&x);
    for k in 0..steps {
        let t = k as f64 * settings.dt;
        stepper.step(&rhs, t, &mut x, settings.dt);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= settings.blowup) {
            return Err(Error::Divergence {
                time: t + settings.dt,
                norm,
                ic: None,
            });
        }
        if (k + 1) % settings.record_every == 0 || k + 1 == steps {
            times.push((k + 1) as f64 * settings.dt);
            states.push(DVector::from_column_slice(&x));
            record(&x);
        }
    }
    Ok((times, states))
}

/// RK4 integration of the true plant under the lifted feedback law.
pub fn simulate_closed_loop(
    system: &ControlAffineSystem,
    model: &BilinearModel,
    clf: &QuadraticClf,
    spec: &ControllerSpec,
    x0: &[f64],
    settings: &SimSettings,
) -> Result<SimulationResult> {
    if model.n() != system.dim() || clf.dim() != model.n_r() {
        return Err(Error::DimensionMismatch {
            what: "model/CLF vs plant dimension",
            expected: system.dim(),
            found: model.n(),
        });
    }
    let control = |x: &[f64]| feedback(spec, clf, &model.lift(x));
    let mut lifted = Vec::new();
    let mut controls = Vec::new();
    let mut lyapunov = Vec::new();
    let (times, states) = run(system, x0, settings, control, |x| {
        let z = model.lift(x);
        controls.push(feedback(spec, clf, &z));
        lyapunov.push(clf.value(&z).max(0.0));
        lifted.push(z);
    })?;
    let final_distance = settings.metric.distance(system, states.last().unwrap().as_slice());
    Ok(SimulationResult {
        times,
        states,
        lifted,
        controls,
        lyapunov,
        converged: final_distance < settings.radius,
        final_distance,
    })
}

/// Zero-input RK4 run, for comparison with the closed loop.
pub fn simulate_open_loop(system: &ControlAffineSystem, x0: &[f64], settings: &SimSettings) -> Result<SimulationResult> {
    let mut controls = Vec::new();
    let (times, states) = run(system, x0, settings, |_| 0.0, |_| controls.push(0.0))?;
    let final_distance = settings.metric.distance(system, states.last().unwrap().as_slice());
    Ok(SimulationResult {
        times,
        states,
        lifted: Vec::new(),
        controls,
        lyapunov: Vec::new(),
        converged: final_distance < settings.radius,
        final_distance,
    })
}

/// Closed-loop runs from several initial conditions, in parallel; a run
/// that diverges is reported as an error tagged with its index.
pub fn validate_closed_loop(
    system: &ControlAffineSystem,
    model: &BilinearModel,
    clf: &QuadraticClf,
    spec: &ControllerSpec,
    ics: &[Vec<f64>],
    settings: &SimSettings,
) -> Vec<Result<SimulationResult>> {
    ics.par_iter()
        .enumerate()
        .map(|(i, x0)| {
            simulate_closed_loop(system, model, clf, spec, x0, settings).map_err(|e| match e {
                Error::Divergence { time, norm, .. } => Error::Divergence { time, norm, ic: Some(i) },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Dictionary;
    use crate::linalg::C64;
    use nalgebra::DMatrix;

    fn scalar_clf(p: f64, lambda: f64, b: f64) -> QuadraticClf {
        QuadraticClf::from_parts(
            DMatrix::from_element(1, 1, p),
            &DMatrix::from_element(1, 1, lambda),
            &DMatrix::from_element(1, 1, b),
            2.0,
            0.1,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn feedback_examples() {
        let s = ControllerSpec::sontag(1.0);
        assert_eq!(feedback_from_terms(&s, 0.0, 1.0, 1.0), -1.0);
        for spec in [ControllerSpec::gradient(2.0), ControllerSpec::bangbang(3.0), s] {
            assert_eq!(feedback_from_terms(&spec, 5.0, 0.0, 1.0), 0.0);
        }
        assert_eq!(feedback_from_terms(&ControllerSpec::gradient(3.0), 0.0, 2.0, 1.0), -6.0);
        assert_eq!(feedback_from_terms(&ControllerSpec::bangbang(3.0), 0.0, -2.0, 1.0), 3.0);
        let sat = ControllerSpec::gradient(100.0).with_saturation(0.5);
        assert_eq!(feedback_from_terms(&sat, 0.0, 2.0, 1.0), -0.5);
    }

    #[test]
    fn sontag_scalar_limit() {
        // ż = z + uz with P = p: a = b = 2pz², u → −2 as z → 0
        let p = 0.7;
        let clf = scalar_clf(p, 1.0, 1.0);
        let spec = ControllerSpec::sontag(1.0);
        let z = 1e-3;
        let u = feedback(&spec, &clf, &DVector::from_element(1, z));
        let expected = -(1.0 + (1.0 + z * z).sqrt());
        assert!((u - expected).abs() < 1e-9);
        assert!((u + 2.0).abs() < 1e-6);
    }

    #[test]
    fn spec_validation() {
        assert!(ControllerSpec::gradient(0.0).validate().is_err());
        assert!(ControllerSpec::gradient(1.0).with_saturation(-1.0).validate().is_err());
        assert!(ControllerSpec::sontag(10.0).validate().is_ok());
    }

    fn scalar_setup() -> (ControlAffineSystem, BilinearModel, QuadraticClf) {
        let sys = ControlAffineSystem::bilinear(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let model = BilinearModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            Dictionary::new(1, 1).unwrap(),
            DVector::zeros(1),
            0.01,
            vec![C64::new(1.0, 0.0)],
        )
        .unwrap();
        (sys, model, scalar_clf(1.0, 1.0, 1.0))
    }

    #[test]
    fn fixed_point_is_preserved() {
        let (sys, model, clf) = scalar_setup();
        let spec = ControllerSpec::sontag(1.0);
        assert_eq!(closed_loop_rhs(&sys, &model, &clf, &spec, &[0.0]).unwrap()[0], 0.0);
        let settings = SimSettings { horizon: 1.0, ..SimSettings::default() };
        let r = simulate_closed_loop(&sys, &model, &clf, &spec, &[0.0], &settings).unwrap();
        assert!(r.states.iter().all(|x| x[0] == 0.0));
        assert!(r.controls.iter().all(|&u| u == 0.0));
        assert!(r.lyapunov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_bilinear_plant_is_stabilized() {
        let (sys, model, clf) = scalar_setup();
        let spec = ControllerSpec::sontag(1.0);
        let settings = SimSettings { horizon: 10.0, radius: 1e-3, ..SimSettings::default() };
        let r = simulate_closed_loop(&sys, &model, &clf, &spec, &[0.5], &settings).unwrap();
        assert!(r.converged, "{}", r.final_distance);
        assert_eq!(r.times.len(), r.states.len());
        assert_eq!(r.times.len(), r.controls.len());
        assert_eq!(r.times.len(), r.lyapunov.len());
        assert!(r.lyapunov.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let open = simulate_open_loop(&sys, &[0.5], &SimSettings { horizon: 2.0, ..settings }).unwrap();
        assert!(!open.converged);
    }

    #[test]
    fn divergence_is_reported() {
        let (sys, _, _) = scalar_setup();
        let settings = SimSettings { horizon: 100.0, blowup: 1e3, ..SimSettings::default() };
        match simulate_open_loop(&sys, &[1.0], &settings) {
            Err(Error::Divergence { time, .. }) => assert!((time - 1e3f64.ln()).abs() < 0.01),
            other => panic!("{other:?}"),
        }
    }
}
