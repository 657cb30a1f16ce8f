mod plot;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lcn::ansatz::Trainable;
use lcn::config::{load_model, save_model, save_parameters, CheckpointMeta, RunConfig};
use lcn::exact::{ground_state, overlap, GroundStateReport};
use lcn::hamiltonian::Hamiltonian;
use lcn::lattice::{build_lattice, GridEmbedding, LatticeType};
use lcn::trainer::{evaluate, Trainer};
use lcn::Error;

/// Lattice convolutional network wave functions for J1-J2 Heisenberg
/// models, trained with variational Monte Carlo.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration or file error,
/// 3 numerical divergence, 4 unsupported combination.
#[derive(Parser, Debug)]
#[command(name = "lcn", version)]
struct Cli {
    /// Worker threads for batched network evaluation (default: all cores).
    #[arg(long, global = true, env = "LCN_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the lattice (sites, bonds, translations) and its grid
    /// embedding as JSON.
    GenerateLattice {
        #[command(flatten)]
        source: Source,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimise the network; writes train.jsonl, best.lcn, final.lcn and
    /// config.toml into the output directory.
    Train {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Override `train.max_steps`.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Override `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Binned energy estimate of a checkpoint from fresh Markov chains.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override `eval.n_samples`.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Override `eval.n_bins`.
        #[arg(long)]
        n_bins: Option<usize>,
        /// Override `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Report the standard error of the bin means instead of their
        /// standard deviation.
        #[arg(long)]
        standard_error: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact ground state in the zero-magnetisation sector.
    Ed {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlap `|<psi0|psi>|` of a checkpoint with the exact ground state.
    Overlap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy-per-site chart (SVG) and CSV export of a training log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Reference energy per site drawn as a dashed line.
        #[arg(long, allow_hyphen_values = true)]
        reference: Option<f64>,
        /// Smoothing window in steps.
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Source {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled preset name, e.g. `square-36-j2=0`.
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn load(&self) -> Result<RunConfig, Failure> {
        match (&self.config, &self.preset) {
            (Some(p), _) => Ok(RunConfig::load(p)?),
            (None, Some(n)) => Ok(RunConfig::preset(n)?),
            (None, None) => Err(Failure::config("either --config or --preset is required")),
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Lattice(_) | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) | Error::NoConvergence(_) => 3,
            Error::Unsupported(_) => 4,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn generate_lattice(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let lattice = build_lattice(&cfg.lattice.to_spec()?)?;
    let embedding = if lattice.lattice_type == LatticeType::Custom {
        GridEmbedding::chain(lattice.n_sites)
    } else {
        GridEmbedding::for_lattice(&lattice, cfg.ansatz.pad_virtual, cfg.ansatz.mask_enabled)?
    };
    let value = json!({
        "lattice": serde_json::to_value(&lattice)?,
        "embedding": serde_json::to_value(&embedding)?,
    });
    emit(&value, out)
}

fn train(mut cfg: RunConfig, out_dir: &Path, max_steps: Option<usize>, seed: Option<u64>) -> Result<(), Failure> {
    if let Some(m) = max_steps {
        cfg.train.max_steps = m;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let (lattice, ansatz) = cfg.build()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut trainer = Trainer::new(ansatz, Hamiltonian::new(&lattice), cfg.train.clone())?;
    let mut log = BufWriter::new(File::create(out_dir.join("train.jsonl"))?);
    let outcome = trainer.train(&mut log);
    log.flush()?;

    let best_path = out_dir.join("best.lcn");
    let best_meta = |t: &Trainer<_>| CheckpointMeta {
        config: cfg.clone(),
        step: t.best.as_ref().map_or(t.step, |b| b.step),
        energy_per_site: t.best.as_ref().map(|b| b.energy_per_site),
        steps_completed: t.step,
    };
    if let Err(e) = outcome {
        // Keep the last good model on divergence.
        if trainer.best.is_some() {
            save_parameters(&best_path, trainer.best_parameters(), &best_meta(&trainer))?;
            eprintln!("best model retained at {}", best_path.display());
        }
        return Err(e.into());
    }
    save_parameters(&best_path, trainer.best_parameters(), &best_meta(&trainer))?;
    let final_meta = CheckpointMeta {
        config: cfg.clone(),
        step: trainer.step,
        energy_per_site: None,
        steps_completed: trainer.step,
    };
    save_model(&out_dir.join("final.lcn"), &trainer.wf, &final_meta)?;
    let summary = json!({
        "steps": trainer.step,
        "best_step": best_meta(&trainer).step,
        "best_energy_per_site": best_meta(&trainer).energy_per_site,
        "checkpoint": best_path,
        "log": out_dir.join("train.jsonl"),
    });
    emit(&summary, None)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    match cli.command {
        Command::GenerateLattice { source, out } => generate_lattice(&source.load()?, out.as_deref()),
        Command::Train {
            source,
            out_dir,
            max_steps,
            seed,
        } => train(source.load()?, &out_dir, max_steps, seed),
        Command::Evaluate {
            checkpoint,
            n_samples,
            n_bins,
            seed,
            standard_error,
            out,
        } => {
            let (meta, lattice, ansatz) = load_model(&checkpoint)?;
            let mut ec = meta.config.eval.clone();
            ec.n_samples = n_samples.unwrap_or(ec.n_samples);
            ec.n_bins = n_bins.unwrap_or(ec.n_bins);
            ec.seed = seed.unwrap_or(ec.seed);
            ec.standard_error |= standard_error;
            let est = evaluate(&Hamiltonian::new(&lattice), &ansatz, ansatz.version(), &ec)?;
            emit(&serde_json::to_value(est)?, out.as_deref())
        }
        Command::Ed { source, out } => {
            let cfg = source.load()?;
            let lattice = build_lattice(&cfg.lattice.to_spec()?)?;
            let (gs, method) = ground_state(&Hamiltonian::new(&lattice))?;
            let report = GroundStateReport {
                n: lattice.n_sites,
                j2: cfg.lattice.j2,
                e0: gs.energy,
                e0_per_site: gs.energy_per_site(),
                method,
                sector_dim: gs.basis.len(),
            };
            emit(&serde_json::to_value(report)?, out.as_deref())
        }
        Command::Overlap { checkpoint, out } => {
            let (_, lattice, ansatz) = load_model(&checkpoint)?;
            let (gs, _) = ground_state(&Hamiltonian::new(&lattice))?;
            let value = overlap(&gs, &ansatz)?;
            emit(&json!({ "overlap": value }), out.as_deref())
        }
        Command::Plot {
            log,
            svg,
            csv,
            reference,
            window,
        } => {
            let text = std::fs::read_to_string(&log)?;
            let records = plot::parse_log(&text).map_err(Failure::config)?;
            std::fs::write(&svg, plot::to_svg(&records, reference, window))?;
            if let Some(c) = csv {
                std::fs::write(c, plot::to_csv(&records))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
