use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use wqed::cli::sweep::{sweep, Grid};
use wqed::cli::{self, CliError, Kind, Scenario, Source};

/// Modulated emitters in waveguide QED: scenario runner.
#[derive(Parser)]
#[command(name = "wqed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Input {
    /// Scenario file (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shipped preset instead of a file.
    #[arg(long)]
    preset: Option<String>,
}

impl Input {
    fn scenario(&self) -> Result<Scenario, CliError> {
        match (&self.config, &self.preset) {
            (Some(p), _) => Scenario::from_path(p),
            (None, Some(name)) => Scenario::preset(name),
            (None, None) => unreachable!("clap requires one input"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: Input,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's output_dir, then runs/<kind>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a modulation toward a target Floquet spectrum.
    FloquetOptimize(RunArgs),
    /// Emission spectrum and sideband weights of a pulse-driven emitter.
    EmitSpectrum(RunArgs),
    /// Frequency-filtered two-colour correlations from the master equation.
    Correlations(RunArgs),
    /// Equal-time g2 of reflected light, analytic with optional master-equation overlay.
    G2Dynamics(RunArgs),
    /// Time-bin MPS evolution of two qubits with delayed feedback.
    MpsRun(RunArgs),
    /// Photon transport on a coupled-cavity array with two modulated atoms.
    LatticeRun(RunArgs),
    /// List every violated invariant without running.
    Validate {
        #[command(flatten)]
        input: Input,
    },
    /// Run a Cartesian grid of scenarios on a worker pool.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the grid's worker count.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// List presets, or print one.
    Presets { name: Option<String> },
}

fn run_kind(kind: Kind, args: &RunArgs) -> Result<(), CliError> {
    let mut s = args.input.scenario()?;
    if s.kind != kind {
        return Err(CliError::ConfigInvalid(cli::ConfigInvalid {
            origin: s.origin.clone(),
            line: None,
            key: Some("kind".into()),
            message: format!("scenario is {}, command is {kind}", s.kind),
        }));
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    let dir = args
        .out
        .clone()
        .or_else(|| s.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(kind.name()));
    let m = cli::run(&s, &dir)?;
    println!("{} -> {} ({:.2} s)", kind, dir.display(), m.wall_time_s);
    for f in &m.files {
        println!("  {} {}", f.sha256, f.name);
    }
    Ok(())
}

fn validate(input: &Input) -> ExitCode {
    let s = match input.scenario() {
        Ok(s) => s,
        Err(e) => {
            println!("{e}");
            return ExitCode::from(1);
        }
    };
    let d = s.check();
    for x in &d {
        println!("{x}");
    }
    if d.is_empty() {
        println!("{}: ok", s.origin);
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::FloquetOptimize(a) => run_kind(Kind::FloquetOptimize, a),
        Command::EmitSpectrum(a) => run_kind(Kind::EmitSpectrum, a),
        Command::Correlations(a) => run_kind(Kind::Correlations, a),
        Command::G2Dynamics(a) => run_kind(Kind::G2Dynamics, a),
        Command::MpsRun(a) => run_kind(Kind::MpsRun, a),
        Command::LatticeRun(a) => run_kind(Kind::LatticeRun, a),
        Command::Validate { input } => return validate(input),
        Command::Sweep {
            config,
            grid,
            out,
            jobs,
        } => (|| {
            let base = Source::read(config)?;
            let mut g = Grid::parse(&Source::read(grid)?)?;
            if jobs.is_some() {
                g.jobs = *jobs;
            }
            let root = out.clone().unwrap_or_else(|| PathBuf::from("runs/sweep"));
            let r = sweep(&base, &g, &root)?;
            println!("{} points -> {}", r.len(), root.display());
            Ok(())
        })(),
        Command::Presets { name } => match name {
            None => {
                for n in cli::preset_names() {
                    println!("{n}");
                }
                Ok(())
            }
            Some(n) => match cli::preset_text(n) {
                Some(t) => {
                    print!("{t}");
                    Ok(())
                }
                None => Err(CliError::ConfigInvalid(cli::ConfigInvalid {
                    origin: format!("preset:{n}"),
                    line: None,
                    key: None,
                    message: format!("unknown preset, expected one of {}", cli::preset_names().join(", ")),
                })),
            },
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
