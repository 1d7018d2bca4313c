//! Instance loading with command-line overrides, the run manifest and
//! artifact writing.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sceq::coupling::CouplingMode;
use sceq::equilibrium::{EquilibriumOptions, FixedPointOptions, Initialization};
use sceq::grid::SpaceTimeGrid;
use sceq::model::{Discount, InstanceFile, ProblemInstance};
use sceq::obstacle::{ObstacleSolveOptions, SolverPath};

/// Invalid or missing configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A required artifact is absent (exit code 3).
#[derive(Debug)]
pub struct MissingArtifact(pub PathBuf);

impl fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing artifact: {}", self.0.display())
    }
}

impl std::error::Error for MissingArtifact {}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingArg {
    Family,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathArg {
    Penalty,
    Direct,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Zero,
    ExponentialProxy,
}

/// Instance file plus overrides shared by every subcommand that solves.
#[derive(Debug, Clone, Args, Serialize)]
pub struct InstanceArgs {
    /// Instance file (TOML).
    pub config: PathBuf,
    /// Discount override, e.g. `hyperbolic:k=1`, `exponential:gamma=0.3`.
    #[arg(long)]
    pub discount: Option<String>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub nt: Option<usize>,
    #[arg(long)]
    pub ns: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub x_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub x_max: Option<f64>,
    /// Picard damping θ ∈ (0, 1].
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long)]
    pub tol_fp: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Last level of the penalty ε schedule.
    #[arg(long)]
    pub eps_final: Option<f64>,
    #[arg(long, value_enum, default_value = "family")]
    pub coupling: CouplingArg,
    /// Obstacle solver: penalty Newton or projected relaxation.
    #[arg(long = "solver", value_enum, default_value = "penalty")]
    pub path: PathArg,
    #[arg(long, value_enum, default_value = "zero")]
    pub init: InitArg,
}

/// A loaded instance with every override applied.
pub struct Loaded {
    pub file: InstanceFile,
    pub grid: SpaceTimeGrid,
    pub options: EquilibriumOptions,
    pub input_sha256: String,
}

impl Loaded {
    pub fn instance(&self) -> &ProblemInstance {
        &self.file.instance
    }
}

fn config_error(e: sceq::Error) -> anyhow::Error {
    match e {
        sceq::Error::Io(_) => anyhow::Error::new(e),
        other => ConfigError(other.to_string()).into(),
    }
}

impl InstanceArgs {
    pub fn load(&self) -> Result<Loaded> {
        let bytes = fs::read(&self.config)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", self.config.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| ConfigError(format!("{} is not UTF-8", self.config.display())))?;
        let mut file = InstanceFile::parse(&text).map_err(config_error)?;
        if let Some(spec) = &self.discount {
            file.instance.discount = Discount::parse(spec).map_err(|e| ConfigError(format!("--discount: {e}")))?;
        }
        let g = &mut file.grid;
        g.nx = self.nx.unwrap_or(g.nx);
        g.nt = self.nt.unwrap_or(g.nt);
        g.ns = self.ns.unwrap_or(g.ns);
        g.x_min = self.x_min.unwrap_or(g.x_min);
        g.x_max = self.x_max.unwrap_or(g.x_max);
        let s = &mut file.solver;
        s.damping = self.damping.or(s.damping);
        s.tol_fp = self.tol_fp.or(s.tol_fp);
        s.max_iter = self.max_iter.or(s.max_iter);
        s.eps_final = self.eps_final.or(s.eps_final);
        file.instance.validate().map_err(config_error)?;
        let grid = grid_of(&file)?;
        let options = self.options(&file);
        Ok(Loaded { file, grid, options, input_sha256: sha256_hex(&bytes) })
    }

    fn options(&self, file: &InstanceFile) -> EquilibriumOptions {
        let d = FixedPointOptions::default();
        let s = file.solver;
        let mut obstacle = ObstacleSolveOptions::default();
        if let Some(eps) = s.eps_final {
            obstacle = obstacle.with_eps_final(eps);
        }
        obstacle.path = match self.path {
            PathArg::Penalty => SolverPath::Penalty,
            PathArg::Direct => SolverPath::Direct,
        };
        EquilibriumOptions {
            fixed_point: FixedPointOptions {
                damping: s.damping.unwrap_or(d.damping),
                tol_fp: s.tol_fp.unwrap_or(d.tol_fp),
                max_iter: s.max_iter.unwrap_or(d.max_iter),
                init: match self.init {
                    InitArg::Zero => Initialization::ZeroCoupling,
                    InitArg::ExponentialProxy => Initialization::ExponentialProxy,
                },
            },
            obstacle,
            coupling: match self.coupling {
                CouplingArg::Family => CouplingMode::Family,
                CouplingArg::PaperLiteral => CouplingMode::PaperLiteral,
            },
        }
    }
}

/// The grid of a resolved instance file.
pub fn grid_of(file: &InstanceFile) -> Result<SpaceTimeGrid> {
    let g = file.grid;
    SpaceTimeGrid::new(g.x_min, g.x_max, g.nx, file.instance.horizon, g.nt, g.ns)
        .map_err(|e| ConfigError(format!("[grid]: {e}")).into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub instance_path: String,
    /// SHA-256 of the instance file bytes as read.
    pub input_sha256: String,
    /// Instance and grid after overrides.
    pub instance: InstanceFile,
    pub options: serde_json::Value,
    pub seed: Option<u64>,
    pub out_dir: String,
}

impl RunManifest {
    pub fn new(command: &str, args: &InstanceArgs, loaded: &Loaded, options: impl Serialize, seed: Option<u64>, out: &Path) -> Self {
        RunManifest {
            tool: "sceq".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            instance_path: args.config.display().to_string(),
            input_sha256: loaded.input_sha256.clone(),
            instance: loaded.file.clone(),
            options: serde_json::to_value(options).expect("options serialise"),
            seed,
            out_dir: out.display().to_string(),
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes through a buffered file handle.
pub fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}
