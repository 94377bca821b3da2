//! Scenario runner: strict config ingestion, invariant checks without
//! execution, deterministic runs with CSV output and a JSON manifest, shipped
//! presets and parameter sweeps.
//!
//! A scenario file (TOML, or JSON when the name ends in `.json`) holds
//!
//! ```toml
//! kind = "lattice-run"   # which runner
//! seed = 7               # optional, default 0
//! output_dir = "runs/x"  # optional, overridden by --out
//! [params]               # kind-specific block, unknown keys rejected
//! ```
//!
//! Physical quantities are in units of γ₁D (ħ = 1), or of the hopping J for
//! lattice runs.

pub mod kinds;
pub mod output;
pub mod sweep;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

use kinds::{CorrelationParams, EmitParams, FloquetParams, G2Params, LatticeParams, MpsParams};
use output::{write_run, RunManifest, RunOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    FloquetOptimize,
    EmitSpectrum,
    Correlations,
    G2Dynamics,
    MpsRun,
    LatticeRun,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::FloquetOptimize,
        Kind::EmitSpectrum,
        Kind::Correlations,
        Kind::G2Dynamics,
        Kind::MpsRun,
        Kind::LatticeRun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::FloquetOptimize => "floquet-optimize",
            Kind::EmitSpectrum => "emit-spectrum",
            Kind::Correlations => "correlations",
            Kind::G2Dynamics => "g2-dynamics",
            Kind::MpsRun => "mps-run",
            Kind::LatticeRun => "lattice-run",
        }
    }

    pub fn from_name(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn units(self) -> &'static str {
        match self {
            Kind::LatticeRun => {
                "hbar = 1; energies and rates in units of the hopping J, times in 1/J, positions in cavity sites (1-based), frame rotating at omega_c"
            }
            Kind::FloquetOptimize | Kind::EmitSpectrum => {
                "hbar = 1; rates and frequencies in units of gamma1D, times in 1/gamma1D, frequencies measured from omega0; modulation amplitudes in the same units"
            }
            _ => {
                "hbar = 1; rates and frequencies in units of gamma1D, times in 1/gamma1D, drive frequencies measured from omega0; leg positions and varphi as propagation phases (k0 = 1)"
            }
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parse or schema failure, located by line and key where possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigInvalid {
    pub origin: String,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConfigInvalid: {}", self.origin)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        if let Some(k) = &self.key {
            write!(f, ": key `{k}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// A violated invariant found without running anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    ConfigInvalid(ConfigInvalid),
    #[error("ConfigInvalid: {origin}: {}", join(.diagnostics))]
    Invariants {
        origin: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("{kind} scenario {origin} failed: {message}")]
    Run {
        kind: Kind,
        origin: String,
        message: String,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sweep: {0}")]
    Sweep(String),
}

fn join(d: &[Diagnostic]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 1 for failed runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) | CliError::Invariants { .. } => 2,
            _ => 1,
        }
    }
}

impl From<ConfigInvalid> for CliError {
    fn from(e: ConfigInvalid) -> Self {
        CliError::ConfigInvalid(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

/// Config text plus where it came from.
#[derive(Debug, Clone)]
pub struct Source {
    pub origin: String,
    pub format: Format,
    pub text: String,
}

impl Source {
    pub fn toml(origin: &str, text: &str) -> Self {
        Self {
            origin: origin.to_string(),
            format: Format::Toml,
            text: text.to_string(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::ConfigInvalid(ConfigInvalid {
                origin: path.display().to_string(),
                line: None,
                key: None,
                message: format!("cannot read: {e}"),
            })
        })?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Toml,
        };
        Ok(Self {
            origin: path.display().to_string(),
            format,
            text,
        })
    }

    fn invalid(&self, line: Option<usize>, message: String) -> ConfigInvalid {
        ConfigInvalid {
            origin: self.origin.clone(),
            line,
            key: backticked(&message),
            message,
        }
    }

    fn toml_error(&self, e: toml::de::Error) -> ConfigInvalid {
        let line = e
            .span()
            .map(|r| self.text[..r.start.min(self.text.len())].matches('\n').count() + 1);
        self.invalid(line, e.message().to_string())
    }

    fn json_error(&self, e: serde_json::Error) -> ConfigInvalid {
        let line = (e.line() > 0).then_some(e.line());
        // serde_json appends its own position; keep the bare message
        let msg = e.to_string();
        let msg = msg
            .rsplit_once(" at line ")
            .map_or(msg.clone(), |(m, _)| m.to_string());
        self.invalid(line, msg)
    }

    /// Whole document as a JSON tree, without schema checks.
    pub fn tree(&self) -> Result<serde_json::Value, ConfigInvalid> {
        match self.format {
            Format::Toml => {
                let t: toml::Table = toml::from_str(&self.text).map_err(|e| self.toml_error(e))?;
                Ok(serde_json::to_value(t).expect("toml converts to json"))
            }
            Format::Json => serde_json::from_str(&self.text).map_err(|e| self.json_error(e)),
        }
    }

    fn decode<P: DeserializeOwned>(&self) -> Result<ScenarioFile<P>, ConfigInvalid> {
        match self.format {
            Format::Toml => toml::from_str(&self.text).map_err(|e| self.toml_error(e)),
            Format::Json => serde_json::from_str(&self.text).map_err(|e| self.json_error(e)),
        }
    }
}

/// First `name` in backticks, which is how serde names the offending key.
fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile<P> {
    #[allow(dead_code)]
    kind: Kind,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    params: P,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Params {
    FloquetOptimize(FloquetParams),
    EmitSpectrum(EmitParams),
    Correlations(CorrelationParams),
    G2Dynamics(G2Params),
    MpsRun(MpsParams),
    LatticeRun(LatticeParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: Kind,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub params: Params,
    pub origin: String,
}

impl Scenario {
    pub fn parse(src: &Source) -> Result<Self, ConfigInvalid> {
        let tree = src.tree()?;
        let kind_name = tree
            .get("kind")
            .ok_or_else(|| src.invalid(None, "missing field `kind`".into()))?;
        let kind = kind_name
            .as_str()
            .and_then(Kind::from_name)
            .ok_or_else(|| {
                let names: Vec<&str> = Kind::ALL.iter().map(|k| k.name()).collect();
                ConfigInvalid {
                    origin: src.origin.clone(),
                    line: None,
                    key: Some("kind".into()),
                    message: format!("unknown kind {kind_name}, expected one of {}", names.join(", ")),
                }
            })?;
        fn build<P: DeserializeOwned>(
            src: &Source,
            kind: Kind,
            wrap: fn(P) -> Params,
        ) -> Result<Scenario, ConfigInvalid> {
            let f: ScenarioFile<P> = src.decode()?;
            Ok(Scenario {
                kind,
                seed: f.seed,
                output_dir: f.output_dir,
                params: wrap(f.params),
                origin: src.origin.clone(),
            })
        }
        match kind {
            Kind::FloquetOptimize => build(src, kind, Params::FloquetOptimize),
            Kind::EmitSpectrum => build(src, kind, Params::EmitSpectrum),
            Kind::Correlations => build(src, kind, Params::Correlations),
            Kind::G2Dynamics => build(src, kind, Params::G2Dynamics),
            Kind::MpsRun => build(src, kind, Params::MpsRun),
            Kind::LatticeRun => build(src, kind, Params::LatticeRun),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        Ok(Self::parse(&Source::read(path)?)?)
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let text = preset_text(name).ok_or_else(|| {
            CliError::ConfigInvalid(ConfigInvalid {
                origin: format!("preset:{name}"),
                line: None,
                key: None,
                message: format!("unknown preset, expected one of {}", preset_names().join(", ")),
            })
        })?;
        Ok(Self::parse(&Source::toml(&format!("preset:{name}"), text))?)
    }

    /// Every violated invariant; empty when the scenario may run.
    pub fn check(&self) -> Vec<Diagnostic> {
        match &self.params {
            Params::FloquetOptimize(p) => p.check(),
            Params::EmitSpectrum(p) => p.check(),
            Params::Correlations(p) => p.check(),
            Params::G2Dynamics(p) => p.check(),
            Params::MpsRun(p) => p.check(),
            Params::LatticeRun(p) => p.check(),
        }
    }

    /// Resolved scenario, defaults filled in, as recorded in the manifest.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "seed": self.seed,
            "params": self.params,
        })
    }

    fn execute(&self) -> Result<RunOutput, String> {
        match &self.params {
            Params::FloquetOptimize(p) => p.run(self.seed),
            Params::EmitSpectrum(p) => p.run(),
            Params::Correlations(p) => p.run(),
            Params::G2Dynamics(p) => p.run(),
            Params::MpsRun(p) => p.run(),
            Params::LatticeRun(p) => p.run(),
        }
    }
}

/// Checks, runs and writes one scenario into `dir`. A module error raised
/// after partial output (an MPS bond overflow) still writes the files and
/// the manifest before it is returned.
pub fn run(scenario: &Scenario, dir: &Path) -> Result<RunManifest, CliError> {
    let diagnostics = scenario.check();
    if !diagnostics.is_empty() {
        return Err(CliError::Invariants {
            origin: scenario.origin.clone(),
            diagnostics,
        });
    }
    let fail = |message: String| CliError::Run {
        kind: scenario.kind,
        origin: scenario.origin.clone(),
        message,
    };
    let start = Instant::now();
    let out = scenario.execute().map_err(fail)?;
    let manifest = RunManifest {
        tool: "wqed".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: scenario.kind.name().into(),
        seed: scenario.seed,
        units: scenario.kind.units().into(),
        scenario: scenario.echo(),
        wall_time_s: start.elapsed().as_secs_f64(),
        tolerances: out.tolerances.clone(),
        convergence: out.convergence.clone(),
        results: out.results.clone(),
        files: Vec::new(),
        status: if out.error.is_some() { "error" } else { "ok" }.into(),
        error: out.error.clone(),
    };
    let manifest = write_run(dir, &out, manifest)?;
    match &out.error {
        Some(e) => Err(fail(e.clone())),
        None => Ok(manifest),
    }
}

const PRESETS: [(&str, &str); 6] = [
    ("fig1b", include_str!("../../presets/fig1b.toml")),
    ("fig3d", include_str!("../../presets/fig3d.toml")),
    ("fig3e", include_str!("../../presets/fig3e.toml")),
    ("fig4b", include_str!("../../presets/fig4b.toml")),
    ("fig5b", include_str!("../../presets/fig5b.toml")),
    ("figS7a", include_str!("../../presets/figS7a.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}
