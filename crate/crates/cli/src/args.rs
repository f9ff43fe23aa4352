use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug, Clone, PartialEq)]
#[command(name = "heatlab", version, about = "Numerical experiments for the semilinear heat equation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct Global {
    /// Base seed; ensemble member i uses substream i of it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for ensemble members (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "heatlab-out")]
    pub out_dir: PathBuf,
    /// TOML or JSON experiment file; flags given alongside it take precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Shoot the expander profile U_alpha.
    Profile(ProfileArgs),
    /// Top eigenvalues of the linearized similarity operator.
    Spectrum(SpectrumArgs),
    /// Evolve a perturbation or build the ancient surrogate.
    Simvar(SimvarArgs),
    /// Sample the colored stochastic convolution.
    Noise(NoiseArgs),
    /// Two-branch construction from one singular datum.
    Branch(BranchArgs),
    /// Randomized initial data on a periodic box.
    Randomize(RandomizeArgs),
    /// Collect the JSON summaries in the output directory.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Profile(_) => "profile",
            Command::Spectrum(_) => "spectrum",
            Command::Simvar(_) => "simvar",
            Command::Noise(_) => "noise",
            Command::Branch(_) => "branch",
            Command::Randomize(_) => "randomize",
            Command::Report(_) => "report",
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        let v = match self {
            Command::Profile(a) => serde_json::to_value(a),
            Command::Spectrum(a) => serde_json::to_value(a),
            Command::Simvar(a) => serde_json::to_value(a),
            Command::Noise(a) => serde_json::to_value(a),
            Command::Branch(a) => serde_json::to_value(a),
            Command::Randomize(a) => serde_json::to_value(a),
            Command::Report(a) => serde_json::to_value(a),
        };
        v.expect("argument structs serialize")
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub p: f64,
    /// Central value U(0).
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, default_value_t = 40.0)]
    pub rho_max: f64,
    #[arg(long, default_value_t = 20000)]
    pub n: usize,
    /// Write every stride-th node.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alpha_sweep: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// Eigenvalues kept per alpha.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 30.0)]
    pub rho_max: f64,
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
    #[arg(long, default_value_t = 40.0)]
    pub profile_rho_max: f64,
    #[arg(long, default_value_t = 20000)]
    pub profile_n: usize,
    /// Also search for an alpha whose top eigenvalue lies in (0, eps).
    #[arg(long)]
    pub find_small: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimvarMode {
    Perturb,
    Ancient,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct SimvarArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = SimvarMode::Perturb)]
    pub mode: SimvarMode,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    /// Upper integrability exponent; defaults to 2p.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Size of the initial perturbation along the top eigenfunction.
    #[arg(long, default_value_t = 1e-6)]
    pub amplitude: f64,
    /// Length of the similarity-time window; by default long enough for the
    /// top mode to grow from the amplitude to 0.1, or 10/lambda for the ancient run.
    #[arg(long)]
    pub span: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    #[arg(long, default_value_t = 10)]
    pub record_every: usize,
    /// Drop the nonlinearity.
    #[arg(long)]
    pub linear: bool,
    /// Ball radius for the ancient surrogate.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, default_value_t = 30.0)]
    pub rho_max: f64,
    #[arg(long, default_value_t = 3000)]
    pub n: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct NoiseArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub q: f64,
    /// Smoothness index; defaults to the value required for (d, p, q).
    #[arg(long)]
    pub s: Option<f64>,
    /// Decay exponent of the coloring.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub cutoff: usize,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 4.0)]
    pub grading: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub dt: f64,
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct BranchArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    /// Profile parameter; searched for when absent.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Upper bound on the unstable eigenvalue during the search.
    #[arg(long, default_value_t = 0.05)]
    pub lambda_eps: f64,
    /// Truncation radius of the singular datum.
    #[arg(long, default_value_t = 1.0)]
    pub rbar: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub horizon: f64,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub cutoff: usize,
    /// Switch the noise off.
    #[arg(long)]
    pub silent: bool,
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomizeMode {
    Moments,
    Tails,
    Solve,
    SuccessCurve,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct RandomizeArgs {
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 3.0)]
    pub p: f64,
    #[arg(long, default_value_t = 2.0)]
    pub q: f64,
    /// Half width L of the box [-L, L]^d.
    #[arg(long, default_value_t = 8.0)]
    pub half_width: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Largest block index |k|_inf.
    #[arg(long, default_value_t = 8)]
    pub cutoff: i64,
    /// Peak of the Gaussian datum.
    #[arg(long, default_value_t = 4.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 1000)]
    pub ensemble: usize,
    #[arg(long, value_enum, default_value_t = RandomizeMode::Moments)]
    pub mode: RandomizeMode,
    #[arg(long)]
    pub allow_low_dim: bool,
    /// Existence horizon of the mild solve.
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub scheme_constant: f64,
    /// Geometric T grid of the success curve.
    #[arg(long, default_value_t = 30)]
    pub t_points: usize,
    #[arg(long, default_value_t = 4.0)]
    pub t_decades: f64,
    /// Smoothing norm: time weight, Bessel order and integrability exponents.
    #[arg(long, default_value_t = 0.25)]
    pub norm_gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub norm_sigma: f64,
    #[arg(long, default_value_t = 4.0)]
    pub norm_theta2: f64,
    #[arg(long, default_value_t = 2.0)]
    pub norm_theta3: f64,
    /// Negative Sobolev index of the datum.
    #[arg(long, default_value_t = 0.0)]
    pub norm_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub norm_horizon: f64,
    #[arg(long, default_value_t = 8)]
    pub quad_nodes: usize,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
pub struct ReportArgs {}
