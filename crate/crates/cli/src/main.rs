use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use koopstab::analysis::{sample_complexity_sweep, SweepSpec};
use koopstab::clf::synthesize_clf;
use koopstab::control::validate_closed_loop;
use koopstab::io;
use koopstab::pipeline::{generate_pair, run_pipeline, StageError};
use koopstab::systems::sample_box;
use koopstab::{identify, Dictionary, Error, PipelineConfig};

#[derive(Parser)]
#[command(name = "koopstab", version, about = "Data-driven stabilization through bilinear Koopman eigenfunction models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`key = value`).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Use the built-in defaults of a system instead of a file.
    #[arg(long, conflicts_with = "config")]
    system: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> koopstab::Result<PipelineConfig> {
        match (&self.config, &self.system) {
            (Some(p), _) => PipelineConfig::load(p),
            (None, Some(name)) => PipelineConfig::defaults_for(name),
            (None, None) => Err(Error::Config("pass --config FILE or --system NAME".into())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate zero-input and step-input datasets.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for data_s0.csv and data_s1.csv.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit the bilinear model from a zero-input and a step-input dataset.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Zero-input dataset (data_s0.csv).
        #[arg(long)]
        zero: PathBuf,
        /// Step-input dataset (data_s1.csv).
        #[arg(long)]
        step: PathBuf,
        /// Model file to write.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Synthesize and check a quadratic CLF for a model.
    Clf {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model file from `fit`.
        #[arg(short, long)]
        model: PathBuf,
        /// CLF file to write.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Closed-loop validation on the plant, or a surrogate run of the model.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model file from `fit`.
        #[arg(short, long)]
        model: PathBuf,
        /// CLF file from `clf`; required unless --surrogate.
        #[arg(long)]
        clf: Option<PathBuf>,
        /// Integrate the bilinear model under a constant input instead.
        #[arg(long)]
        surrogate: bool,
        /// Lifted initial state for --surrogate (whitespace separated).
        #[arg(long, allow_hyphen_values = true)]
        z0: Option<String>,
        /// Constant input for --surrogate.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        input: f64,
        /// Surrogate step size.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Surrogate horizon.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// Output directory (plant) or CSV file (surrogate).
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Error of the fitted model versus data length.
    Complexity {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Data lengths in steps, `lo..hi` or a comma-separated list.
        #[arg(long, default_value = "6..30")]
        lengths: String,
        /// Length of the reference fit, in steps.
        #[arg(long, default_value_t = 50)]
        reference: usize,
        /// Independent datasets per length.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Base seed; defaults to data.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Curve file to write.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run every stage and write all artifacts.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory.
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().context("length range start")?;
        let hi: usize = hi.trim().parse().context("length range end")?;
        if lo == 0 || hi < lo {
            bail!("empty length range {s}");
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad length `{t}`")))
        .collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<StageError>() {
        return e.exit_code() as u8;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(
            Error::EmptyDataset
            | Error::SamplingTooCoarse { .. }
            | Error::Defective { .. }
            | Error::Pairing(_)
            | Error::IllConditioned(_)
            | Error::Divergence { .. }
            | Error::NumericalDomain { .. },
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn print_model(model: &koopstab::BilinearModel) {
    println!("retained modes: {}", model.n_r());
    for l in &model.eigenvalues {
        println!("  {:+.6} {:+.6}i", l.re, l.im);
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Generate { cfg, out } => {
            let cfg = cfg.load()?;
            let system = cfg.build_system()?;
            let (d0, d1) = generate_pair(&system, &cfg)?;
            io::save_dataset(&out.join("data_s0.csv"), &d0)?;
            io::save_dataset(&out.join("data_s1.csv"), &d1)?;
            println!("{} snapshot pairs per input mode written to {}", d0.len(), out.display());
        }
        Command::Fit { cfg, zero, step, out } => {
            let cfg = cfg.load()?;
            let system = cfg.build_system()?;
            let d0 = io::load_dataset(&zero)?;
            let d1 = io::load_dataset(&step)?;
            let dict = Dictionary::new(system.dim(), cfg.degree)?;
            let id = identify(&d0, &d1, &dict, system.equilibrium(), &cfg.identify)?;
            io::save_model(&out, &id.model)?;
            print_model(&id.model);
        }
        Command::Clf { cfg, model, out } => {
            let cfg = cfg.load()?;
            let model = io::load_model(&model)?;
            let syn = synthesize_clf(&model, &cfg.clf)?;
            io::save_clf(&out, &syn.clf)?;
            for (g, r) in &syn.attempts {
                println!("gamma {g}: passed {} worst margin {:.3e}", r.passed, r.worst_margin);
            }
            if !syn.passed() {
                eprintln!("stabilizability check failed for every gamma");
                return Ok(4);
            }
        }
        Command::Simulate { cfg, model, clf, surrogate, z0, input, dt, horizon, out } => {
            let model = io::load_model(&model)?;
            if surrogate {
                return simulate_surrogate(&model, z0.as_deref(), input, dt, horizon, &out);
            }
            let cfg = cfg.load()?;
            let Some(clf) = clf else { bail!("--clf is required unless --surrogate is given") };
            let clf = io::load_clf(&clf, &model)?;
            let system = cfg.build_system()?;
            let v = &cfg.validate;
            let ics = sample_box(&v.ic_box, v.num_ics, v.seed);
            let runs = validate_closed_loop(&system, &model, &clf, &cfg.ctrl, &ics, &v.sim);
            let mut rows = Vec::new();
            for (i, (x0, r)) in ics.iter().zip(&runs).enumerate() {
                match r {
                    Ok(sim) => {
                        io::save_simulation(&out.join(format!("closed_{i}.csv")), sim)?;
                        rows.push(io::RunSummary {
                            x0: x0.clone(),
                            converged: sim.converged,
                            final_distance: sim.final_distance,
                            status: "ok".into(),
                        });
                    }
                    Err(e) => rows.push(io::RunSummary {
                        x0: x0.clone(),
                        converged: false,
                        final_distance: f64::NAN,
                        status: e.to_string(),
                    }),
                }
            }
            io::save_summary(&out.join("summary.csv"), &rows)?;
            let conv = rows.iter().filter(|r| r.converged).count();
            println!("{conv}/{} converged", rows.len());
            if conv < v.min_converged {
                return Ok(5);
            }
        }
        Command::Complexity { cfg, lengths, reference, trials, seed, out } => {
            let cfg = cfg.load()?;
            let system = cfg.build_system()?;
            let dict = Dictionary::new(system.dim(), cfg.degree)?;
            let spec = SweepSpec {
                data: cfg.data.clone(),
                lengths: parse_lengths(&lengths)?,
                ref_length: reference,
                trials,
                seed: seed.unwrap_or(cfg.data.seed),
                identify: cfg.identify.clone(),
            };
            let curve = sample_complexity_sweep(&system, &dict, &spec)?;
            io::save_curve(&out, &curve)?;
            println!("slope_lambda {:.4} slope_b {:.4}", curve.slope_lambda, curve.slope_b);
        }
        Command::Pipeline { cfg, out } => {
            let cfg = cfg.load()?;
            let report = run_pipeline(&cfg, Some(&out))?;
            print!("{}", report.summary());
            return Ok(report.status.exit_code() as u8);
        }
    }
    Ok(0)
}

fn simulate_surrogate(
    model: &koopstab::BilinearModel,
    z0: Option<&str>,
    input: f64,
    dt: f64,
    horizon: f64,
    out: &Path,
) -> Result<u8> {
    let z0: Vec<f64> = match z0 {
        Some(s) => s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().with_context(|| format!("bad z0 entry `{t}`")))
            .collect::<Result<_>>()?,
        None => bail!("--surrogate needs --z0"),
    };
    let traj = model.predict(&DVector::from_vec(z0), |_| input, dt, horizon)?;
    let nr = model.n_r();
    let mut text = String::from("t");
    for i in 1..=nr {
        text += &format!(",z{i}");
    }
    text += ",u\n";
    for (k, z) in traj.iter().enumerate() {
        text += &io::fmt_f64(k as f64 * dt);
        for v in z.iter() {
            text += ",";
            text += &io::fmt_f64(*v);
        }
        text += ",";
        text += &io::fmt_f64(input);
        text += "\n";
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("{} samples written to {}", traj.len(), out.display());
    Ok(0)
}
