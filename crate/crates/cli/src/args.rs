use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "equiscope", version, about = "Loss landscapes of permutation-equivariant two-layer networks")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every config-driven subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct RunOpts {
    /// Experiment config (JSON). Built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Grid resolution per axis.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum gradient-descent steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// relu or erf.
    #[arg(long)]
    pub activation: Option<String>,
    /// Coefficient parameterization: raw, normalized or orthonormal.
    #[arg(long)]
    pub mode: Option<String>,
    /// Generic override `path.to.key=value`; the value is parsed as JSON, or taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the equivariant basis of the configured layer.
    Basis {
        #[command(flatten)]
        run: RunOpts,
    },
    /// List the transitive permutation representations of a group.
    Preps {
        /// Group, e.g. s3 or s4.
        #[arg(long, default_value = "s3")]
        group: String,
        /// Also write preps.json into this directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Loss over the two-coefficient grid, plus multistart minimum clustering.
    Landscape {
        #[command(flatten)]
        run: RunOpts,
        /// Skip the multistart clustering.
        #[arg(long)]
        no_multistart: bool,
    },
    /// Final loss after a fixed number of steps from every grid node.
    Phase {
        #[command(flatten)]
        run: RunOpts,
    },
    /// Constrained training to a bad minimum, then unconstrained escape.
    Relax {
        #[command(flatten)]
        run: RunOpts,
    },
    /// Minimum counts and boundary statistics over teacher seeds.
    Sweep {
        #[command(flatten)]
        run: RunOpts,
        /// Comma-separated seed list; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Apply neuron reductions to a network until none applies.
    Reduce {
        /// Network JSON.
        #[arg(long)]
        net: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Seed of the equivalence check inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Row-equality tolerance.
        #[arg(long, default_value_t = equiscope::reduce::ROW_TOL)]
        tol: f64,
        /// Number of equivalence check inputs.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Fixed-subspace conditions at a critical point of the restricted loss.
    Check {
        #[command(flatten)]
        run: RunOpts,
    },
    /// Compare analytic kernels against Monte-Carlo estimates.
    KernelCheck {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 50)]
        pairs: usize,
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Allowed deviation in standard errors.
        #[arg(long, default_value_t = 3.0)]
        sigmas: f64,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// One gradient-descent run from a grid node.
    Train {
        #[command(flatten)]
        run: RunOpts,
        /// Initial `theta1,theta2`; defaults to relax.init from the config.
        #[arg(long, allow_hyphen_values = true)]
        init: Option<String>,
        /// Train every coefficient instead of the two axes.
        #[arg(long)]
        all: bool,
    },
}
