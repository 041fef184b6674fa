// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use snmf_core::engine::{
    DEFAULT_EPSILON, DEFAULT_LAMBDA, DEFAULT_MAX_ITERS, DEFAULT_REL_TOL, DEFAULT_SPARSITY,
};
use snmf_core::hierarchy::{DEFAULT_EDGE_THRESHOLD, DEFAULT_TOP_CONTEXTS};
use snmf_core::steering::{Site, DEFAULT_KL_TARGETS};
use snmf_core::FactorizationConfig;

#[derive(Debug, Parser)]
#[command(name = "snmf", version, about = "Sparse semi-NMF of MLP activations")]
pub struct Cli {
    /// Print the resolved configuration as JSON and exit without computing.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Factorize an activation matrix into a feature bundle.
    Factorize(FactorizeArgs),
    /// Top activating contexts (and optionally vocabulary projection) of one feature.
    Describe(DescribeArgs),
    /// Concept-detection scores from activating and neutral sentence dumps.
    Detect(DetectArgs),
    /// Shared top-neuron counts between features.
    Overlap(OverlapArgs),
    /// Base and exclusive neurons of a feature group.
    NeuronSets(NeuronSetsArgs),
    /// Recursive factorization, optional joint fine-tuning, and the feature tree.
    Hierarchy(HierarchyArgs),
    /// Calibrate steering scales against KL targets.
    SteerCalibrate(SteerCalibrateArgs),
    /// Turn a calibration report into steering manifests.
    ExportSteering(ExportSteeringArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct EngineArgs {
    /// Fraction of neurons kept per feature by winner-take-all.
    #[arg(long, default_value_t = DEFAULT_SPARSITY)]
    pub sparsity: f64,
    /// Ridge constant of the feature solve.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Denominator guard of the coefficient update.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub iters: usize,
    /// Stop once the relative loss change falls to this value.
    #[arg(long, default_value_t = DEFAULT_REL_TOL)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the per-iteration row normalization of Y.
    #[arg(long)]
    pub no_renormalize: bool,
    /// Report progress every this many iterations (SNMF_LOG=info).
    #[arg(long, default_value_t = 10)]
    pub progress_every: usize,
}

impl EngineArgs {
    pub fn config(&self, k: usize) -> FactorizationConfig {
        FactorizationConfig {
            k,
            sparsity: self.sparsity,
            lambda: self.lambda,
            epsilon: self.epsilon,
            max_iters: self.iters,
            rel_tol: self.rel_tol,
            seed: self.seed,
            renormalize: !self.no_renormalize,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FactorizeArgs {
    /// Activation matrix (AMX, d_a x n).
    #[arg(long)]
    pub input: PathBuf,
    /// Number of features.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    /// Bundle directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DescribeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub feature: usize,
    /// Number of top contexts.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// MLP down-projection W_V (d x d_a); with --unembed adds a vocabulary projection.
    #[arg(long, requires = "unembed")]
    pub w_v: Option<PathBuf>,
    /// Unembedding (|V| x d).
    #[arg(long, requires = "w_v")]
    pub unembed: Option<PathBuf>,
    /// Tokens listed at each end of the vocabulary projection.
    #[arg(long, default_value_t = 10)]
    pub vocab_top: usize,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Activations of sentences expressing the concept (columns grouped by doc_id).
    #[arg(long)]
    pub activating: PathBuf,
    /// Activations of neutral sentences.
    #[arg(long)]
    pub neutral: PathBuf,
    /// Comma-separated feature indices; all features when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OverlapArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Neurons kept per feature when binarizing; the bundle's WTA support size when omitted.
    #[arg(long)]
    pub top_neurons: Option<usize>,
    /// Comma-separated feature indices; all features when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct NeuronSetsArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Comma-separated feature indices, at least two.
    #[arg(long, value_delimiter = ',', required = true)]
    pub group: Vec<usize>,
    /// Neurons kept per feature when binarizing; the bundle's WTA support size when omitted.
    #[arg(long)]
    pub top_neurons: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct HierarchyArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Strictly decreasing feature counts, finest first.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ks: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value_t = 0)]
    pub fine_tune_steps: usize,
    /// Fine-tuning step size, or "auto".
    #[arg(long, default_value = "auto")]
    pub lr: String,
    /// Minimum normalized weight of a tree edge.
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_CONTEXTS)]
    pub top_contexts: usize,
    /// JSON list of {"level", "feature", "label"} attached to tree nodes.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    /// Linear readout from dumped weights and base logits.
    Linear,
    /// Random linear model, for dry runs.
    Synthetic,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerCalibrateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub feature: usize,
    /// mlp_activation or mlp_output.
    #[arg(long, default_value = "mlp_activation")]
    pub site: Site,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = OracleKind::Synthetic)]
    pub oracle: OracleKind,
    /// W_V (d x d_a): needed by the linear oracle at the activation site and for output-site directions.
    #[arg(long)]
    pub w_v: Option<PathBuf>,
    /// Unembedding (|V| x d), linear oracle.
    #[arg(long)]
    pub unembed: Option<PathBuf>,
    /// Unintervened logits (a single row or column), linear oracle.
    #[arg(long)]
    pub base_logits: Option<PathBuf>,
    /// Synthetic oracle vocabulary size.
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    /// Synthetic oracle residual width.
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 0)]
    pub oracle_seed: u64,
    /// Comma-separated KL targets.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KL_TARGETS.to_vec())]
    pub targets: Vec<f64>,
    #[arg(long, default_value_t = 1e-2)]
    pub min_scale: f64,
    #[arg(long, default_value_t = 1e2)]
    pub max_scale: f64,
    #[arg(long, default_value_t = 16)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 40)]
    pub max_bisections: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportSteeringArgs {
    /// Report written by steer-calibrate.
    #[arg(long)]
    pub calibration: PathBuf,
    /// Directory receiving direction.amx and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}
