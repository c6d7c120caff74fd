//! Command-line arguments and the optional TOML config file. A flag given on
//! the command line always wins over the same key in the file.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use phaselock::graph::Boundary;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "phaselock",
    version,
    about = "Phase-locked oscillator lattices: solutions, induced graphs, heat kernels and decay experiments"
)]
pub struct Cli {
    /// Output directory; all artifact paths are relative to it [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Master seed recorded in every artifact [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for parallel sections [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML file of key = value settings; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the phase lags of a solution family
    Solve(FamilyArgs),
    /// Build the induced weighted graph and audit its hypotheses
    Linearize(LinearizeArgs),
    /// Heat-kernel diagonal, column norms and optional Monte Carlo comparison
    Heat(HeatArgs),
    /// Volume growth, local ellipticity, Poincaré and rough-isometry audits
    Check(CheckArgs),
    /// Construct the rotating wave and verify its sector structure
    Rotwave(RotwaveArgs),
    /// Construct doubly periodic lags on a torus
    Periodic(PeriodicArgs),
    /// Run the nonlinear perturbation decay experiment
    Decay(DecayArgs),
    /// Spectral, remainder, Q-form and integral probes
    Probe(ProbeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Linearize(_) => "linearize",
            Command::Heat(_) => "heat",
            Command::Check(_) => "check",
            Command::Rotwave(_) => "rotwave",
            Command::Periodic(_) => "periodic",
            Command::Decay(_) => "decay",
            Command::Probe(_) => "probe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Trivial,
    #[value(alias = "rotating-wave")]
    #[serde(alias = "rotating_wave")]
    Rotwave,
    #[value(alias = "doubly-periodic")]
    #[serde(alias = "doubly_periodic")]
    Periodic,
    Chain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Spectrum,
    Remainder,
    Qbound,
    Qdecay,
    Integral,
    Gradient,
}

#[derive(Clone, Debug, Default, Args)]
pub struct FamilyArgs {
    /// Solution family
    #[arg(long, value_enum)]
    pub family: Option<FamilyKind>,
    /// Lattice side length (vertex count for chains)
    #[arg(long)]
    pub extent: Option<usize>,
    /// free or torus
    #[arg(long)]
    pub boundary: Option<Boundary>,
    /// Common intrinsic frequency
    #[arg(long, allow_negative_numbers = true)]
    pub omega: Option<f64>,
    /// Horizontal period of the doubly periodic family
    #[arg(long)]
    pub n1: Option<usize>,
    /// Vertical period of the doubly periodic family
    #[arg(long)]
    pub n2: Option<usize>,
    /// Influence range of the chain family
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct LinearizeArgs {
    #[command(flatten)]
    pub family: FamilyArgs,
    /// Solution JSON to linearize instead of a family (needs --graph)
    #[arg(long, requires = "graph")]
    pub solution: Option<PathBuf>,
    /// Topology JSON matching --solution
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct HeatArgs {
    #[command(flatten)]
    pub family: FamilyArgs,
    /// Graph JSON to use instead of the family's augmented graph
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Source vertex as lattice coordinates `i,j` (or `i` on a chain)
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub source: Option<Vec<i64>>,
    /// Explicit time grid
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Number of geometric grid points between t_min and t_max
    #[arg(long)]
    pub points: Option<usize>,
    /// Monte Carlo walks to compare against the exact row
    #[arg(long)]
    pub walks: Option<usize>,
    /// Time of the Monte Carlo comparison [default: 10]
    #[arg(long)]
    pub mc_time: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub family: FamilyArgs,
    /// Graph JSON to audit instead of the family's augmented graph
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Volume growth fit
    #[arg(long)]
    pub vg: bool,
    /// Local elliptic constant
    #[arg(long)]
    pub delta: bool,
    /// Poincaré survey
    #[arg(long)]
    pub pi: bool,
    /// Reference graph A for an identity-map rough isometry A -> graph
    #[arg(long, requires = "rough")]
    pub rough_to: Option<PathBuf>,
    /// Candidate constants `a,b,c,M`
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub rough: Option<Vec<f64>>,
    /// Number of probe centres
    #[arg(long)]
    pub centers: Option<usize>,
    #[arg(long)]
    pub r_min: Option<u32>,
    #[arg(long)]
    pub r_max: Option<u32>,
    /// Poincaré radii
    #[arg(long, value_delimiter = ',')]
    pub pi_radii: Option<Vec<u32>>,
    /// Random pairs sampled for the rough-isometry audit
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct RotwaveArgs {
    /// Even lattice side length [default: 100]
    #[arg(long)]
    pub extent: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub omega: Option<f64>,
    /// Rings excluded from the post-hoc sector checks [default: 2]
    #[arg(long)]
    pub rings: Option<usize>,
    /// Second extent to measure truncation drift against
    #[arg(long)]
    pub compare: Option<usize>,
    /// Radius of the drift comparison [default: 5]
    #[arg(long)]
    pub drift_radius: Option<i64>,
}

#[derive(Clone, Debug, Args)]
pub struct PeriodicArgs {
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub n2: Option<usize>,
    /// Torus side length, divisible by both periods [default: 100]
    #[arg(long)]
    pub extent: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub omega: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct DecayArgs {
    #[command(flatten)]
    pub family: FamilyArgs,
    /// l1 size of the initial perturbation
    #[arg(long)]
    pub eps: Option<f64>,
    /// Keep the mean of the perturbation instead of removing it
    #[arg(long)]
    pub keep_mean: bool,
    /// Fit window `a,b` in rescaled time
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<f64>>,
    /// Rescaled integration horizon
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Output times
    #[arg(long)]
    pub points: Option<usize>,
    /// Integrate even if the hypothesis gate refuses
    #[arg(long)]
    pub force: bool,
    /// Perturbation centre `i,j`
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub at: Option<Vec<i64>>,
    /// Use a Gaussian profile of this width instead of an indicator
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Sweep these eps values and report the largest passing one
    #[arg(long, value_delimiter = ',')]
    pub eps_sweep: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Args)]
pub struct ProbeArgs {
    /// What to probe
    #[arg(long, value_enum)]
    pub kind: Option<ProbeKind>,
    #[command(flatten)]
    pub family: FamilyArgs,
    /// Eigenvalues reported at each end of the spectrum
    #[arg(long)]
    pub k: Option<usize>,
    /// Random samples for the remainder and Q-form probes
    #[arg(long)]
    pub samples: Option<usize>,
    /// l2 radius of remainder samples
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
}

/// Every key the config file may set.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    pub family: Option<FamilyKind>,
    pub extent: Option<usize>,
    pub boundary: Option<Boundary>,
    pub omega: Option<f64>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub n: Option<usize>,

    pub graph: Option<PathBuf>,
    pub solution: Option<PathBuf>,

    pub source: Option<Vec<i64>>,
    pub times: Option<Vec<f64>>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub points: Option<usize>,
    pub walks: Option<usize>,
    pub mc_time: Option<f64>,

    pub vg: Option<bool>,
    pub delta_check: Option<bool>,
    pub pi: Option<bool>,
    pub rough_to: Option<PathBuf>,
    pub rough: Option<Vec<f64>>,
    pub centers: Option<usize>,
    pub r_min: Option<u32>,
    pub r_max: Option<u32>,
    pub pi_radii: Option<Vec<u32>>,
    pub pairs: Option<usize>,

    pub rings: Option<usize>,
    pub compare: Option<usize>,
    pub drift_radius: Option<i64>,

    pub eps: Option<f64>,
    pub keep_mean: Option<bool>,
    pub window: Option<Vec<f64>>,
    pub horizon: Option<f64>,
    pub force: Option<bool>,
    pub at: Option<Vec<i64>>,
    pub sigma: Option<f64>,
    pub eps_sweep: Option<Vec<f64>>,

    pub kind: Option<ProbeKind>,
    pub k: Option<usize>,
    pub samples: Option<usize>,
    pub delta: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Global settings after merging flags over the file.
#[derive(Clone, Debug, Serialize)]
pub struct Globals {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Globals {
    pub fn resolve(cli: &Cli, file: &FileConfig) -> Self {
        Globals {
            out: cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
            seed: cli.seed.or(file.seed).unwrap_or(0),
            threads: cli.threads.or(file.threads),
        }
    }

    /// Inputs are looked up under the output directory first.
    pub fn input(&self, path: &Path) -> PathBuf {
        if path.is_relative() {
            let under = self.out.join(path);
            if under.exists() {
                return under;
            }
        }
        path.to_path_buf()
    }
}

/// A family request with every default filled in.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FamilySetup {
    pub family: FamilyKind,
    pub extent: usize,
    pub boundary: Boundary,
    pub omega: f64,
    pub n1: usize,
    pub n2: usize,
    pub n: usize,
}

impl FamilySetup {
    pub fn resolve(a: &FamilyArgs, f: &FileConfig) -> Self {
        let family = a.family.or(f.family).unwrap_or(FamilyKind::Trivial);
        let extent = a.extent.or(f.extent).unwrap_or(match family {
            FamilyKind::Trivial => 101,
            FamilyKind::Rotwave | FamilyKind::Periodic => 100,
            FamilyKind::Chain => 401,
        });
        let boundary = a.boundary.or(f.boundary).unwrap_or(match family {
            FamilyKind::Periodic => Boundary::Torus,
            _ => Boundary::Free,
        });
        FamilySetup {
            family,
            extent,
            boundary,
            omega: a.omega.or(f.omega).unwrap_or(0.0),
            n1: a.n1.or(f.n1).unwrap_or(5),
            n2: a.n2.or(f.n2).unwrap_or(5),
            n: a.n.or(f.n).unwrap_or(1),
        }
    }

    pub fn family(&self) -> phaselock::experiments::Family {
        use phaselock::experiments::Family;
        match self.family {
            FamilyKind::Trivial => Family::Trivial,
            FamilyKind::Rotwave => Family::RotatingWave,
            FamilyKind::Periodic => Family::DoublyPeriodic { n1: self.n1, n2: self.n2 },
            FamilyKind::Chain => Family::Chain { n: self.n },
        }
    }

    /// Row-major vertex index of lattice coordinates, matching the builders.
    pub fn vertex_index(&self, at: &[i64]) -> Result<usize, CliError> {
        use phaselock::graph::{Coord, LatticeShape};
        let (shape, target) = match (self.family, at) {
            (FamilyKind::Chain, [i]) | (FamilyKind::Chain, [i, 0]) => {
                (LatticeShape::Chain(self.extent), Coord::Line(*i))
            }
            (FamilyKind::Chain, _) => return Err(CliError::Config("chain positions take one coordinate".into())),
            (_, [i, j]) => (LatticeShape::square(self.extent), Coord::Plane(*i, *j)),
            _ => return Err(CliError::Config("lattice positions take two coordinates i,j".into())),
        };
        shape
            .coords()
            .iter()
            .position(|&c| c == target)
            .ok_or_else(|| CliError::Config(format!("{target} lies outside the extent-{} lattice", self.extent)))
    }
}
