//! Pipeline configuration: flat `key = value` text with section prefixes
//! `system.`, `data.`, `dict.`, `clf.`, `ctrl.` and `validate.`. Every key
//! has a default that depends on `system.name`; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::clf::ClfOptions;
use crate::control::{ConvergenceMetric, ControllerKind, ControllerSpec, SimSettings};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, KvFile};
use crate::koopman::IdentifyOptions;
use crate::systems::{ControlAffineSystem, DatasetSpec, SwingNetwork, DEFAULT_BLOWUP};

#[derive(Debug, Clone, PartialEq)]
pub enum SystemParams {
    Duffing { damping: f64 },
    Lorenz { sigma: f64, rho: f64, beta: f64 },
    NineBus(SwingNetwork),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateConfig {
    pub num_ics: usize,
    pub ic_box: Vec<(f64, f64)>,
    pub seed: u64,
    pub sim: SimSettings,
    /// Minimum number of converged runs for the pipeline to succeed.
    pub min_converged: usize,
    /// Also simulate the uncontrolled plant from the same initial conditions.
    pub open_loop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub system: SystemParams,
    pub x_star: Option<Vec<f64>>,
    pub data: DatasetSpec,
    pub degree: u32,
    pub identify: IdentifyOptions,
    pub clf: ClfOptions,
    pub ctrl: ControllerSpec,
    pub validate: ValidateConfig,
}

fn around(center: &[f64], half: &[f64]) -> Vec<(f64, f64)> {
    center.iter().zip(half).map(|(c, h)| (c - h, c + h)).collect()
}

impl PipelineConfig {
    pub fn defaults_for(name: &str) -> Result<Self> {
        let identify = IdentifyOptions::default();
        let clf = ClfOptions::default();
        let cfg = match name {
            "duffing" => {
                let ic_box = vec![(-1.5, 1.5), (-1.0, 1.0)];
                Self {
                    system: SystemParams::Duffing { damping: 0.5 },
                    x_star: None,
                    data: DatasetSpec {
                        num_ics: 10,
                        ic_box: ic_box.clone(),
                        input_mode: 0,
                        noise_var: 0.01,
                        delta_t: 0.25,
                        horizon: 7.5,
                        substeps: 25,
                        seed: 1,
                        blowup: DEFAULT_BLOWUP,
                    },
                    degree: 5,
                    identify,
                    clf,
                    ctrl: ControllerSpec::gradient(1.0),
                    validate: ValidateConfig {
                        num_ics: 10,
                        ic_box,
                        seed: 7,
                        sim: SimSettings { horizon: 50.0, radius: 0.05, ..SimSettings::default() },
                        min_converged: 9,
                        open_loop: false,
                    },
                }
            }
            "lorenz" => Self {
                system: SystemParams::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 },
                x_star: None,
                data: DatasetSpec {
                    num_ics: 1000,
                    ic_box: vec![(-20.0, 20.0), (-25.0, 25.0), (0.0, 50.0)],
                    input_mode: 0,
                    noise_var: 0.01,
                    delta_t: 1e-3,
                    horizon: 10.0,
                    substeps: 1,
                    seed: 1,
                    blowup: DEFAULT_BLOWUP,
                },
                degree: 3,
                identify,
                clf,
                ctrl: ControllerSpec::gradient(1.0),
                validate: ValidateConfig {
                    num_ics: 5,
                    ic_box: vec![(-5.0, 5.0), (-5.0, 5.0), (0.0, 10.0)],
                    seed: 7,
                    sim: SimSettings { horizon: 20.0, radius: 0.5, ..SimSettings::default() },
                    min_converged: 5,
                    open_loop: true,
                },
            },
            "ninebus" => {
                let net = SwingNetwork::ieee9_placeholder();
                let x_star = net.synchronous_equilibrium()?;
                let g = net.generators();
                let half: Vec<f64> = (0..2 * g).map(|i| if i < g { 0.1 } else { 0.01 }).collect();
                let ic_box = around(x_star.as_slice(), &half);
                Self {
                    system: SystemParams::NineBus(net),
                    x_star: None,
                    data: DatasetSpec {
                        num_ics: 100,
                        ic_box: ic_box.clone(),
                        input_mode: 0,
                        noise_var: 1e-4,
                        delta_t: 0.01,
                        horizon: 10.0,
                        substeps: 4,
                        seed: 1,
                        blowup: DEFAULT_BLOWUP,
                    },
                    degree: 3,
                    identify,
                    clf,
                    ctrl: ControllerSpec::sontag(10.0),
                    validate: ValidateConfig {
                        num_ics: 5,
                        ic_box,
                        seed: 7,
                        sim: SimSettings {
                            horizon: 30.0,
                            radius: 1e-2,
                            metric: ConvergenceMetric::Frequency,
                            ..SimSettings::default()
                        },
                        min_converged: 5,
                        open_loop: true,
                    },
                }
            }
            other => {
                return Err(Error::Config(format!("unknown system `{other}` (duffing | lorenz | ninebus)")));
            }
        };
        Ok(cfg)
    }

    pub fn system_name(&self) -> &'static str {
        match self.system {
            SystemParams::Duffing { .. } => "duffing",
            SystemParams::Lorenz { .. } => "lorenz",
            SystemParams::NineBus(_) => "ninebus",
        }
    }

    pub fn build_system(&self) -> Result<ControlAffineSystem> {
        let sys = match &self.system {
            SystemParams::Duffing { damping } => ControlAffineSystem::duffing_with(*damping),
            SystemParams::Lorenz { sigma, rho, beta } => ControlAffineSystem::lorenz_with(*sigma, *rho, *beta),
            SystemParams::NineBus(net) => ControlAffineSystem::swing_network(net.clone())?,
        };
        match &self.x_star {
            Some(x) => sys.with_equilibrium(DVector::from_column_slice(x)),
            None => Ok(sys),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn parse(path: &str, text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(path, text)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let name = kv.get_str("system.name").unwrap_or("duffing");
        let mut cfg = Self::defaults_for(name).map_err(|e| at(kv, "system.name", e))?;
        for (key, value, line) in &kv.entries {
            cfg.apply(key, value).map_err(|msg| Error::Config(format!("{}:{line}: {key}: {msg}", kv.path)))?;
        }
        cfg.check().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", kv.path)),
            other => other,
        })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let f = || value.parse::<f64>().map_err(|e| format!("`{value}`: {e}"));
        let u = || value.parse::<usize>().map_err(|e| format!("`{value}`: {e}"));
        let s = || value.parse::<u64>().map_err(|e| format!("`{value}`: {e}"));
        let list = || {
            value
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
                .collect::<std::result::Result<Vec<f64>, String>>()
        };
        let bx = || -> std::result::Result<Vec<(f64, f64)>, String> {
            let v = list()?;
            if v.is_empty() || v.len() % 2 != 0 {
                return Err("expected pairs `lo hi lo hi ...`".into());
            }
            Ok(v.chunks(2).map(|c| (c[0], c[1])).collect())
        };
        let boolean = || value.parse::<bool>().map_err(|e| format!("`{value}`: {e}"));
        match key {
            "system.name" => {}
            "system.x_star" => self.x_star = Some(list()?),
            "data.num_ics" => self.data.num_ics = u()?,
            "data.ic_box" => self.data.ic_box = bx()?,
            "data.noise_var" => self.data.noise_var = f()?,
            "data.delta_t" => self.data.delta_t = f()?,
            "data.horizon" => self.data.horizon = f()?,
            "data.steps" => self.data.horizon = u()? as f64 * self.data.delta_t,
            "data.substeps" => self.data.substeps = u()?,
            "data.seed" => self.data.seed = s()?,
            "data.blowup" => self.data.blowup = f()?,
            "dict.degree" => self.degree = value.parse().map_err(|e| format!("`{value}`: {e}"))?,
            "dict.svd_rtol" => self.identify.svd_rtol = f()?,
            "dict.drop_tol" => self.identify.drop_tol = f()?,
            "dict.cond_threshold" => self.identify.cond_threshold = f()?,
            "dict.b_method" => self.identify.method = value.parse().map_err(|e: Error| e.to_string())?,
            "clf.gammas" => self.clf.gammas = list()?,
            "clf.c_min" => self.clf.c_min = f()?,
            "clf.c_max" => self.clf.c_max = f()?,
            "clf.max_iters" => self.clf.max_iters = u()?,
            "clf.samples" => self.clf.n_samples = u()?,
            "clf.tau" => self.clf.tau = f()?,
            "clf.seed" => self.clf.seed = s()?,
            "ctrl.kind" => self.ctrl.kind = value.parse::<ControllerKind>().map_err(|e| e.to_string())?,
            "ctrl.beta" => self.ctrl.beta = f()?,
            "ctrl.k" => self.ctrl.k = f()?,
            "ctrl.q_coeff" => self.ctrl.q_coeff = f()?,
            "ctrl.saturation" => {
                self.ctrl.saturation = match value {
                    "none" | "" => None,
                    _ => Some(f()?),
                }
            }
            "validate.num_ics" => self.validate.num_ics = u()?,
            "validate.ic_box" => self.validate.ic_box = bx()?,
            "validate.seed" => self.validate.seed = s()?,
            "validate.dt" => self.validate.sim.dt = f()?,
            "validate.horizon" => self.validate.sim.horizon = f()?,
            "validate.record_every" => self.validate.sim.record_every = u()?,
            "validate.radius" => self.validate.sim.radius = f()?,
            "validate.metric" => self.validate.sim.metric = value.parse().map_err(|e: Error| e.to_string())?,
            "validate.min_converged" => self.validate.min_converged = u()?,
            "validate.open_loop" => self.validate.open_loop = boolean()?,
            _ => return self.apply_system(key, f, list),
        }
        Ok(())
    }

    fn apply_system(
        &mut self,
        key: &str,
        f: impl Fn() -> std::result::Result<f64, String>,
        list: impl Fn() -> std::result::Result<Vec<f64>, String>,
    ) -> std::result::Result<(), String> {
        match (&mut self.system, key) {
            (SystemParams::Duffing { damping }, "system.damping") => *damping = f()?,
            (SystemParams::Lorenz { sigma, .. }, "system.sigma") => *sigma = f()?,
            (SystemParams::Lorenz { rho, .. }, "system.rho") => *rho = f()?,
            (SystemParams::Lorenz { beta, .. }, "system.beta") => *beta = f()?,
            (SystemParams::NineBus(net), k) => {
                let g = net.generators();
                let v = || -> std::result::Result<Vec<f64>, String> {
                    let v = list()?;
                    if v.len() != g {
                        return Err(format!("expected {g} values, found {}", v.len()));
                    }
                    Ok(v)
                };
                match k {
                    "system.inertia" => net.inertia = v()?,
                    "system.damping" => net.damping = v()?,
                    "system.p_mech" => net.p_mech = v()?,
                    "system.p_load" => net.p_load = v()?,
                    "system.voltage" => net.voltage = v()?,
                    "system.input_weights" => net.input_weights = v()?,
                    "system.omega_s" => net.omega_s = f()?,
                    "system.reactance" => {
                        let x = list()?;
                        if x.len() != g * (g - 1) / 2 {
                            return Err(format!("expected {} upper-triangle entries, found {}", g * (g - 1) / 2, x.len()));
                        }
                        let mut m = DMatrix::zeros(g, g);
                        let mut it = x.into_iter();
                        for i in 0..g {
                            for j in i + 1..g {
                                let val = it.next().expect("length checked");
                                m[(i, j)] = val;
                                m[(j, i)] = val;
                            }
                        }
                        net.reactance = m;
                    }
                    _ => return Err("unknown key".into()),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Cross-field validation, run before any computation.
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let sys = self.build_system().map_err(|e| Error::Config(format!("system: {e}")))?;
        let n = sys.dim();
        if self.data.ic_box.len() != n || self.validate.ic_box.len() != n {
            return bad(&format!("initial-condition boxes must have {n} intervals"));
        }
        if self.data.ic_box.iter().chain(&self.validate.ic_box).any(|(lo, hi)| !(lo <= hi)) {
            return bad("initial-condition box has lo > hi");
        }
        if self.data.num_ics == 0 || self.validate.num_ics == 0 {
            return bad("num_ics must be at least 1");
        }
        if !(self.data.delta_t > 0.0) || !(self.data.horizon > 0.0) || self.data.substeps == 0 {
            return bad("data.delta_t and data.horizon must be positive, data.substeps >= 1");
        }
        if !(self.data.noise_var >= 0.0) {
            return bad("data.noise_var must be nonnegative");
        }
        if self.degree == 0 {
            return bad("dict.degree must be at least 1");
        }
        if !(self.identify.svd_rtol > 0.0 && self.identify.svd_rtol < 1.0) {
            return bad("dict.svd_rtol must lie in (0, 1)");
        }
        if !(self.clf.c_min > 0.0 && self.clf.c_min < self.clf.c_max) {
            return bad("need 0 < clf.c_min < clf.c_max");
        }
        if self.clf.gammas.is_empty() || self.clf.gammas.iter().any(|g| !(*g > 0.0)) {
            return bad("clf.gammas must be a non-empty list of positive values");
        }
        if self.clf.n_samples == 0 || !(self.clf.tau >= 0.0) {
            return bad("clf.samples must be positive and clf.tau nonnegative");
        }
        self.ctrl.validate().map_err(|e| Error::Config(e.to_string()))?;
        let sim = &self.validate.sim;
        if !(sim.dt > 0.0 && sim.horizon >= 0.0 && sim.radius > 0.0) || sim.record_every == 0 {
            return bad("validate.dt and validate.radius must be positive, validate.record_every >= 1");
        }
        if self.validate.min_converged > self.validate.num_ics {
            return bad("validate.min_converged exceeds validate.num_ics");
        }
        Ok(())
    }

    /// Effective configuration, every key written out.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
        let bx = |b: &[(f64, f64)]| b.iter().map(|(l, h)| format!("{} {}", fmt_f64(*l), fmt_f64(*h))).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "system.name = {}", self.system_name());
        match &self.system {
            SystemParams::Duffing { damping } => {
                let _ = writeln!(s, "system.damping = {}", fmt_f64(*damping));
            }
            SystemParams::Lorenz { sigma, rho, beta } => {
                let _ = writeln!(s, "system.sigma = {}", fmt_f64(*sigma));
                let _ = writeln!(s, "system.rho = {}", fmt_f64(*rho));
                let _ = writeln!(s, "system.beta = {}", fmt_f64(*beta));
            }
            SystemParams::NineBus(net) => {
                let _ = writeln!(s, "system.inertia = {}", list(&net.inertia));
                let _ = writeln!(s, "system.damping = {}", list(&net.damping));
                let _ = writeln!(s, "system.p_mech = {}", list(&net.p_mech));
                let _ = writeln!(s, "system.p_load = {}", list(&net.p_load));
                let _ = writeln!(s, "system.voltage = {}", list(&net.voltage));
                let g = net.generators();
                let upper: Vec<f64> = (0..g).flat_map(|i| (i + 1..g).map(move |j| (i, j))).map(|(i, j)| net.reactance[(i, j)]).collect();
                let _ = writeln!(s, "system.reactance = {}", list(&upper));
                let _ = writeln!(s, "system.input_weights = {}", list(&net.input_weights));
                let _ = writeln!(s, "system.omega_s = {}", fmt_f64(net.omega_s));
            }
        }
        if let Some(x) = &self.x_star {
            let _ = writeln!(s, "system.x_star = {}", list(x));
        }
        let d = &self.data;
        let _ = writeln!(s, "data.num_ics = {}", d.num_ics);
        let _ = writeln!(s, "data.ic_box = {}", bx(&d.ic_box));
        let _ = writeln!(s, "data.noise_var = {}", fmt_f64(d.noise_var));
        let _ = writeln!(s, "data.delta_t = {}", fmt_f64(d.delta_t));
        let _ = writeln!(s, "data.horizon = {}", fmt_f64(d.horizon));
        let _ = writeln!(s, "data.substeps = {}", d.substeps);
        let _ = writeln!(s, "data.seed = {}", d.seed);
        let _ = writeln!(s, "data.blowup = {}", fmt_f64(d.blowup));
        let _ = writeln!(s, "dict.degree = {}", self.degree);
        let _ = writeln!(s, "dict.svd_rtol = {}", fmt_f64(self.identify.svd_rtol));
        let _ = writeln!(s, "dict.drop_tol = {}", fmt_f64(self.identify.drop_tol));
        let _ = writeln!(s, "dict.cond_threshold = {}", fmt_f64(self.identify.cond_threshold));
        let _ = writeln!(s, "dict.b_method = {}", self.identify.method);
        let c = &self.clf;
        let _ = writeln!(s, "clf.gammas = {}", list(&c.gammas));
        let _ = writeln!(s, "clf.c_min = {}", fmt_f64(c.c_min));
        let _ = writeln!(s, "clf.c_max = {}", fmt_f64(c.c_max));
        let _ = writeln!(s, "clf.max_iters = {}", c.max_iters);
        let _ = writeln!(s, "clf.samples = {}", c.n_samples);
        let _ = writeln!(s, "clf.tau = {}", fmt_f64(c.tau));
        let _ = writeln!(s, "clf.seed = {}", c.seed);
        let k = &self.ctrl;
        let _ = writeln!(s, "ctrl.kind = {}", k.kind);
        let _ = writeln!(s, "ctrl.beta = {}", fmt_f64(k.beta));
        let _ = writeln!(s, "ctrl.k = {}", fmt_f64(k.k));
        let _ = writeln!(s, "ctrl.q_coeff = {}", fmt_f64(k.q_coeff));
        let _ = writeln!(s, "ctrl.saturation = {}", k.saturation.map_or("none".to_string(), fmt_f64));
        let v = &self.validate;
        let _ = writeln!(s, "validate.num_ics = {}", v.num_ics);
        let _ = writeln!(s, "validate.ic_box = {}", bx(&v.ic_box));
        let _ = writeln!(s, "validate.seed = {}", v.seed);
        let _ = writeln!(s, "validate.dt = {}", fmt_f64(v.sim.dt));
        let _ = writeln!(s, "validate.horizon = {}", fmt_f64(v.sim.horizon));
        let _ = writeln!(s, "validate.record_every = {}", v.sim.record_every);
        let _ = writeln!(s, "validate.radius = {}", fmt_f64(v.sim.radius));
        let _ = writeln!(s, "validate.metric = {}", v.sim.metric);
        let _ = writeln!(s, "validate.min_converged = {}", v.min_converged);
        let _ = writeln!(s, "validate.open_loop = {}", v.open_loop);
        s
    }
}

fn at(kv: &KvFile, key: &str, e: Error) -> Error {
    Error::Config(format!("{}:{}: {e}", kv.path, kv.line_of(key)))
}
