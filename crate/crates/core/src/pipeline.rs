//! End-to-end run: data → EDMD → bilinear model → CLF → closed-loop
//! validation, writing artifacts after each stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::clf::{synthesize_clf, ClfSynthesis};
use crate::config::PipelineConfig;
use crate::control::{simulate_open_loop, validate_closed_loop, SimulationResult};
use crate::dictionary::Dictionary;
use crate::error::Error;
use crate::io::{self, RunSummary};
use crate::koopman::{identify, Identification};
use crate::systems::{generate_dataset, sample_box, ControlAffineSystem, TrajectoryDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Identify,
    Clf,
    Validate,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Identify => "identify",
            Stage::Clf => "clf",
            Stage::Validate => "validate",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match (self.stage, &self.source) {
            (Stage::Config, _) | (_, Error::Config(_)) => 2,
            (Stage::Generate | Stage::Identify, _) => 3,
            _ => 1,
        }
    }
}

fn stage<T>(stage: Stage, r: crate::Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStatus {
    Success,
    /// Model built, but no γ in the ladder produced a CLF passing the check.
    ClfCheckFailed,
    /// Fewer validation runs converged than required.
    ValidationFailed,
}

impl PipelineStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Success => 0,
            Self::ClfCheckFailed => 4,
            Self::ValidationFailed => 5,
        }
    }
}

#[derive(Debug)]
pub struct PipelineReport {
    pub system: ControlAffineSystem,
    pub identification: Identification,
    pub synthesis: ClfSynthesis,
    pub initial_conditions: Vec<Vec<f64>>,
    /// One entry per validation IC; `Err` holds the failure message.
    pub closed_loop: Vec<Result<SimulationResult, String>>,
    pub open_loop: Vec<Result<SimulationResult, String>>,
    pub converged: usize,
    pub status: PipelineStatus,
}

impl PipelineReport {
    pub fn summary(&self) -> String {
        let m = &self.identification.model;
        let c = &self.synthesis.clf;
        let check = c.check.as_ref();
        let mut s = format!(
            "system {}: {} dictionary functions, {} retained modes (eigenvector condition {:.3e})\n",
            self.system.name(),
            m.dict.len(),
            m.n_r(),
            self.identification.spectrum.condition
        );
        let ev: Vec<String> = m.eigenvalues.iter().take(8).map(|l| format!("{:.4}{:+.4}i", l.re, l.im)).collect();
        s += &format!("leading eigenvalues: {}\n", ev.join(" "));
        for (g, r) in &self.synthesis.attempts {
            s += &format!(
                "gamma {g}: check {} (worst margin {:.3e}, {} qualifying samples)\n",
                if r.passed { "passed" } else { "failed" },
                r.worst_margin,
                r.qualifying
            );
        }
        s += &format!(
            "CLF: gamma {}, t* {:.6}, check {}\n",
            c.gamma,
            c.t_star,
            if check.is_some_and(|r| r.passed) { "passed" } else { "failed" }
        );
        s += &format!("validation: {}/{} converged\n", self.converged, self.closed_loop.len());
        s += &format!("status: {:?}\n", self.status);
        s
    }
}

/// Paths of the artifacts written into the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.cfg")
    }
    pub fn dataset(&self, mode: u8) -> PathBuf {
        self.dir.join(format!("data_s{mode}.csv"))
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.txt")
    }
    pub fn clf(&self) -> PathBuf {
        self.dir.join("clf.txt")
    }
    pub fn closed_loop(&self, i: usize) -> PathBuf {
        self.dir.join("sim").join(format!("closed_{i}.csv"))
    }
    pub fn open_loop(&self, i: usize) -> PathBuf {
        self.dir.join("sim").join(format!("open_{i}.csv"))
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.csv")
    }
}

pub fn generate_pair(system: &ControlAffineSystem, cfg: &PipelineConfig) -> crate::Result<(TrajectoryDataset, TrajectoryDataset)> {
    let mut spec = cfg.data.clone();
    spec.input_mode = 0;
    let d0 = generate_dataset(system, &spec)?;
    spec.input_mode = 1;
    let d1 = generate_dataset(system, &spec)?;
    Ok((d0, d1))
}

/// Run every stage. With `out_dir`, artifacts are written as soon as each
/// stage completes, so a failure leaves the earlier ones for inspection.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineReport, StageError> {
    stage(Stage::Config, cfg.check())?;
    let out = out_dir.map(|d| Artifacts { dir: d.to_path_buf() });
    let write = |f: &dyn Fn(&Artifacts) -> crate::Result<()>| -> Result<(), StageError> {
        match &out {
            Some(a) => stage(Stage::Output, f(a)),
            None => Ok(()),
        }
    };
    write(&|a| {
        fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
        fs::write(a.config(), cfg.to_text()).map_err(|e| Error::io(a.config(), e))
    })?;

    let system = stage(Stage::Config, cfg.build_system())?;
    let (d0, d1) = stage(Stage::Generate, generate_pair(&system, cfg))?;
    write(&|a| {
        io::save_dataset(&a.dataset(0), &d0)?;
        io::save_dataset(&a.dataset(1), &d1)
    })?;

    let dict = stage(Stage::Config, Dictionary::new(system.dim(), cfg.degree))?;
    let identification = stage(Stage::Identify, identify(&d0, &d1, &dict, system.equilibrium(), &cfg.identify))?;
    let model = &identification.model;
    write(&|a| io::save_model(&a.model(), model))?;

    let synthesis = stage(Stage::Clf, synthesize_clf(model, &cfg.clf))?;
    write(&|a| io::save_clf(&a.clf(), &synthesis.clf))?;

    let v = &cfg.validate;
    let ics = sample_box(&v.ic_box, v.num_ics, v.seed);
    let closed: Vec<Result<SimulationResult, String>> =
        validate_closed_loop(&system, model, &synthesis.clf, &cfg.ctrl, &ics, &v.sim)
            .into_iter()
            .map(|r| r.map_err(|e| e.to_string()))
            .collect();
    let open: Vec<Result<SimulationResult, String>> = if v.open_loop {
        use rayon::prelude::*;
        ics.par_iter()
            .map(|x0| simulate_open_loop(&system, x0, &v.sim).map_err(|e| e.to_string()))
            .collect()
    } else {
        Vec::new()
    };
    let converged = closed.iter().filter(|r| r.as_ref().is_ok_and(|s| s.converged)).count();
    write(&|a| {
        for (i, r) in closed.iter().enumerate() {
            if let Ok(sim) = r {
                io::save_simulation(&a.closed_loop(i), sim)?;
            }
        }
        for (i, r) in open.iter().enumerate() {
            if let Ok(sim) = r {
                io::save_simulation(&a.open_loop(i), sim)?;
            }
        }
        let rows: Vec<RunSummary> = ics
            .iter()
            .zip(&closed)
            .map(|(x0, r)| match r {
                Ok(s) => RunSummary {
                    x0: x0.clone(),
                    converged: s.converged,
                    final_distance: s.final_distance,
                    status: "ok".into(),
                },
                Err(e) => RunSummary {
                    x0: x0.clone(),
                    converged: false,
                    final_distance: f64::NAN,
                    status: e.clone(),
                },
            })
            .collect();
        io::save_summary(&a.summary(), &rows)
    })?;

    let status = if !synthesis.passed() {
        PipelineStatus::ClfCheckFailed
    } else if converged < v.min_converged {
        PipelineStatus::ValidationFailed
    } else {
        PipelineStatus::Success
    };
    Ok(PipelineReport {
        system,
        identification,
        synthesis,
        initial_conditions: ics,
        closed_loop: closed,
        open_loop: open,
        converged,
        status,
    })
}
