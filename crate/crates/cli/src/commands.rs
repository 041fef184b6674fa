// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use snmf_core::analysis::{
    binarize_features, concept_detection_score, neuron_base_and_exclusive, overlap_matrix,
    residual_feature, split_sentences, top_contexts, ConceptScore, TopContexts, VocabProjection,
};
use snmf_core::engine::{stderr_progress, wta_support_size, IterationState};
use snmf_core::hierarchy::{
    build_tree, fine_tune_with, recursive_factorize_with, LearningRate, DEFAULT_EDGE_THRESHOLD,
    DEFAULT_TOP_CONTEXTS,
};
use snmf_core::io::{
    read_activations, read_bundle, read_matrix, read_weights, write_bundle, write_matrix,
    AmxMatrix, MatrixRole, StoredMatrix, WeightRole,
};
use snmf_core::steering::{
    steering_run, LinearReadoutOracle, ScaleSearch, Sign, Site, SteeringEntry, SteeringManifest,
    DEFAULT_KL_TARGETS,
};
use snmf_core::{factorize_with, Bundle64, FactorizationConfig};

use crate::args::*;
use crate::{Failure, Verbosity};

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn run(cli: Cli, v: Verbosity) -> Outcome {
    let Some(cmd) = cli.command else {
        if cli.print_config {
            return print_json(&defaults());
        }
        return Err(usage("no subcommand given; see `snmf --help`"));
    };
    if cli.print_config {
        return print_json(&cmd);
    }
    match cmd {
        Command::Factorize(a) => factorize_cmd(a, v),
        Command::Describe(a) => describe(a),
        Command::Detect(a) => detect(a),
        Command::Overlap(a) => overlap(a),
        Command::NeuronSets(a) => neuron_sets(a),
        Command::Hierarchy(a) => hierarchy(a, v),
        Command::SteerCalibrate(a) => steer_calibrate(a),
        Command::ExportSteering(a) => export_steering(a),
    }
}

fn defaults() -> serde_json::Value {
    serde_json::json!({
        "factorization": FactorizationConfig::default(),
        "hierarchy": {
            "edge_threshold": DEFAULT_EDGE_THRESHOLD,
            "top_contexts": DEFAULT_TOP_CONTEXTS,
            "fine_tune_steps": 0,
            "lr": "auto",
        },
        "steering": {
            "targets": DEFAULT_KL_TARGETS,
            "search": ScaleSearch::default(),
        },
    })
}

fn to_json<S: Serialize>(value: &S) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.into()))?;
    s.push('\n');
    Ok(s)
}

fn print_json<S: Serialize>(value: &S) -> Outcome {
    print!("{}", to_json(value)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Outcome {
    write_text(path, &to_json(value)?)
}

fn load_bundle(dir: &Path) -> Result<Bundle64, Failure> {
    read_bundle::<f64>(dir)
        .with_context(|| format!("reading bundle {}", dir.display()))
        .map_err(Failure::Data)
}

fn check_feature(feature: usize, k: usize) -> Outcome {
    if feature >= k {
        return Err(usage(format!("feature {feature} out of range; the bundle has {k} features")));
    }
    Ok(())
}

fn progress_every(v: Verbosity, every: usize) -> usize {
    match v {
        Verbosity::Quiet => 0,
        Verbosity::Info => every,
        Verbosity::Debug => 1,
    }
}

fn factorize_cmd(args: FactorizeArgs, v: Verbosity) -> Outcome {
    let cfg = args.engine.config(args.k);
    cfg.validate()?;
    let (a, columns) = read_activations::<f64>(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    if let Some(c) = &columns {
        log::debug!("{} columns of token metadata", c.len());
    }
    let mut bundle = factorize_with(a.view(), &cfg, stderr_progress(progress_every(v, args.engine.progress_every)))?;
    bundle.columns = columns;
    write_bundle(&bundle, &args.out)?;
    log::info!(
        "wrote {} (k={}, {} iterations, loss {:e})",
        args.out.display(),
        bundle.k(),
        bundle.loss_trace.len(),
        bundle.loss_trace.last_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct Description {
    #[serde(flatten)]
    contexts: TopContexts,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab: Option<VocabProjection>,
}

fn describe(args: DescribeArgs) -> Outcome {
    let b = load_bundle(&args.bundle)?;
    check_feature(args.feature, b.k())?;
    if args.top == 0 {
        return Err(usage("--top must be at least 1"));
    }
    let contexts = top_contexts(b.y.view(), b.columns.as_deref(), args.feature, args.top)?;
    if contexts.metadata_missing {
        log::warn!("bundle has no token metadata; reporting column indices");
    }
    let vocab = match (&args.w_v, &args.unembed) {
        (Some(w), Some(u)) => {
            let w_v = read_weights::<f64>(w, WeightRole::MlpOut)?;
            let unembed = read_weights::<f64>(u, WeightRole::Unembed)?;
            let f = residual_feature(w_v.view(), b.z.column(args.feature))?;
            Some(snmf_core::analysis::vocab_projection(f.view(), unembed.view(), args.vocab_top)?)
        }
        _ => None,
    };
    let d = Description { contexts, vocab };
    match &args.out {
        Some(p) => write_json(p, &d),
        None => print_json(&d),
    }
}

fn sentences(path: &Path) -> Result<Vec<Array2<f64>>, Failure> {
    let (a, columns) = read_activations::<f64>(path).with_context(|| format!("reading {}", path.display()))?;
    match columns {
        Some(c) => Ok(split_sentences(a.view(), &c)?),
        None => {
            log::warn!("{} has no token metadata; treating each column as a sentence", path.display());
            Ok(a.axis_iter(Axis(1)).map(|col| col.insert_axis(Axis(1)).to_owned()).collect())
        }
    }
}

#[derive(Serialize)]
struct DetectionReport {
    activating_sentences: usize,
    neutral_sentences: usize,
    /// Features with a positive score.
    positive: usize,
    scores: Vec<ConceptScore<f64>>,
}

fn selected_features(features: Option<Vec<usize>>, k: usize) -> Result<Vec<usize>, Failure> {
    let fs = features.unwrap_or_else(|| (0..k).collect());
    if fs.is_empty() {
        return Err(usage("--features is empty"));
    }
    for &f in &fs {
        check_feature(f, k)?;
    }
    Ok(fs)
}

fn detect(args: DetectArgs) -> Outcome {
    let b = load_bundle(&args.bundle)?;
    let features = selected_features(args.features, b.k())?;
    let act = sentences(&args.activating)?;
    let neu = sentences(&args.neutral)?;
    let act_views: Vec<ArrayView2<f64>> = act.iter().map(|s| s.view()).collect();
    let neu_views: Vec<ArrayView2<f64>> = neu.iter().map(|s| s.view()).collect();
    let scores = features
        .iter()
        .map(|&f| concept_detection_score(f, b.z.column(f), &act_views, &neu_views))
        .collect::<Result<Vec<_>, _>>()?;
    let report = DetectionReport {
        activating_sentences: act.len(),
        neutral_sentences: neu.len(),
        positive: scores.iter().filter(|s| s.s_cd > 0.0).count(),
        scores,
    };
    write_json(&args.out, &report)
}

fn binarization_size(top_neurons: Option<usize>, b: &Bundle64) -> Result<usize, Failure> {
    let m = top_neurons.unwrap_or_else(|| wta_support_size(b.d_a(), b.config.sparsity));
    if m == 0 || m > b.d_a() {
        return Err(usage(format!("--top-neurons must be in 1..={}", b.d_a())));
    }
    Ok(m)
}

#[derive(Serialize)]
struct OverlapReport {
    features: Vec<usize>,
    binarization_size: usize,
    /// Shared top-neuron counts; the diagonal is each feature's own count.
    matrix: Vec<Vec<u64>>,
}

fn overlap(args: OverlapArgs) -> Outcome {
    let b = load_bundle(&args.bundle)?;
    let features = selected_features(args.features, b.k())?;
    let m = binarization_size(args.top_neurons, &b)?;
    let z = b.z.select(Axis(1), &features);
    let ov = overlap_matrix(binarize_features(z.view(), m)?.view())?;
    let report = OverlapReport {
        features,
        binarization_size: m,
        matrix: ov.outer_iter().map(|r| r.to_vec()).collect(),
    };
    write_json(&args.out, &report)
}

fn neuron_sets(args: NeuronSetsArgs) -> Outcome {
    let b = load_bundle(&args.bundle)?;
    for &f in &args.group {
        check_feature(f, b.k())?;
    }
    if args.group.len() < 2 {
        return Err(usage("--group needs at least two features"));
    }
    let m = binarization_size(args.top_neurons, &b)?;
    let zbar = binarize_features(b.z.view(), m)?;
    let report = neuron_base_and_exclusive(zbar.view(), &args.group)?;
    write_json(&args.out, &report)
}

#[derive(Deserialize)]
struct NodeLabel {
    level: usize,
    feature: usize,
    label: String,
}

#[derive(Serialize)]
struct FineTuneSummary {
    steps: usize,
    learning_rate: f64,
    initial_loss: f64,
    final_loss: f64,
    best_step: usize,
}

#[derive(Serialize)]
struct HierarchyReport {
    k_schedule: Vec<usize>,
    /// Final reconstruction loss of each level's own factorization.
    level_losses: Vec<Option<f64>>,
    /// `½‖Z_i − Z_{i+1} Y_{i+1}‖²` for consecutive levels.
    level_residuals: Vec<f64>,
    joint_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fine_tune: Option<FineTuneSummary>,
}

fn hierarchy(args: HierarchyArgs, v: Verbosity) -> Outcome {
    let lr: LearningRate = args.lr.parse().map_err(usage)?;
    if let LearningRate::Fixed(x) = lr {
        if !(x > 0.0 && x.is_finite()) {
            return Err(usage(format!("--lr must be positive, got {x}")));
        }
    }
    if !(args.threshold >= 0.0 && args.threshold <= 1.0) {
        return Err(usage(format!("--threshold must be in [0, 1], got {}", args.threshold)));
    }
    let first_k = *args.ks.first().ok_or_else(|| usage("--ks is empty"))?;
    args.engine.config(first_k).validate()?;
    let labels: Vec<NodeLabel> = match &args.labels {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Vec::new(),
    };

    let (a, columns) = read_activations::<f64>(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let every = progress_every(v, args.engine.progress_every);
    let mut h = recursive_factorize_with(
        a.view(),
        &args.ks,
        &args.engine.config(first_k),
        |level, s: &IterationState<'_, f64>| {
            if every > 0 && s.iteration % every == 0 {
                eprintln!("level={level} iter={} loss={:e}", s.iteration, s.loss);
            }
        },
    )?;
    let level_losses = h.levels.iter().map(|l| l.loss_trace.last_loss()).collect();

    let mut fine = None;
    if args.fine_tune_steps > 0 {
        let out = fine_tune_with(a.view(), &h, lr, args.fine_tune_steps, |step, loss| {
            if every > 0 && step % every == 0 {
                eprintln!("fine-tune step={step} loss={loss:e}");
            }
        })?;
        log::info!(
            "fine-tuning: joint loss {:e} -> {:e} (best at step {})",
            out.initial_loss,
            out.final_loss,
            out.best_step
        );
        fine = Some(FineTuneSummary {
            steps: args.fine_tune_steps,
            learning_rate: out.learning_rate,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            best_step: out.best_step,
        });
        h = out.result;
    }

    let mut tree = build_tree(&h.levels, args.threshold, args.top_contexts, columns.as_deref())?;
    for l in &labels {
        if !tree.set_label(l.level, l.feature, l.label.clone()) {
            return Err(Failure::Data(anyhow!("label for unknown node ({}, {})", l.level, l.feature)));
        }
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (i, level) in h.levels.iter().enumerate() {
        let cols = if i == 0 { columns.clone() } else { None };
        write_bundle(&level.to_bundle(cols), &args.out.join(format!("level_{i}")))?;
    }
    let tree_json = tree.to_json().map_err(|e| Failure::Data(e.into()))?;
    write_text(&args.out.join("tree.json"), &(tree_json + "\n"))?;
    write_text(&args.out.join("tree.dot"), &tree.to_dot())?;
    let report = HierarchyReport {
        k_schedule: h.k_schedule(),
        level_losses,
        level_residuals: h.level_residuals(),
        joint_loss: h.joint_loss(a.view())?,
        fine_tune: fine,
    };
    write_json(&args.out.join("hierarchy.json"), &report)
}

/// Where the logits of a calibration came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OracleSource {
    Linear {
        unembed: PathBuf,
        base_logits: PathBuf,
        #[serde(skip_serializing_if = "Option::is_none")]
        w_v: Option<PathBuf>,
    },
    Synthetic { vocab: usize, d_model: usize, seed: u64 },
}

#[derive(Debug, Deserialize)]
struct EntryRecord {
    sign: Sign,
    target_kl: f64,
    scale: f64,
    achieved_kl: f64,
    reachable: bool,
}

#[derive(Serialize)]
struct CalibrationOut<'a> {
    bundle: &'a Path,
    feature: usize,
    site: Site,
    layer: usize,
    oracle: &'a OracleSource,
    direction_dim: usize,
    direction_norm: f64,
    search: &'a ScaleSearch,
    entries: &'a [SteeringEntry],
}

#[derive(Deserialize)]
struct CalibrationIn {
    bundle: PathBuf,
    feature: usize,
    site: Site,
    layer: usize,
    oracle: OracleSource,
    direction_dim: usize,
    direction_norm: f64,
    entries: Vec<EntryRecord>,
}

fn logit_vector(path: &Path) -> Result<Array1<f64>, Failure> {
    let m: Array2<f64> = read_matrix(path)?.into_values().to_array();
    match m.dim() {
        (1, _) => Ok(m.row(0).to_owned()),
        (_, 1) => Ok(m.column(0).to_owned()),
        (r, c) => Err(Failure::Data(anyhow!(
            "{} is {r}x{c}; base logits must be a single row or column",
            path.display()
        ))),
    }
}

fn build_oracle(source: &OracleSource, layer: usize, d_a: usize) -> Result<LinearReadoutOracle<f64>, Failure> {
    match source {
        OracleSource::Linear { unembed, base_logits, w_v } => {
            let u = read_weights::<f64>(unembed, WeightRole::Unembed)?;
            let w = w_v.as_deref().map(|p| read_weights::<f64>(p, WeightRole::MlpOut)).transpose()?;
            Ok(LinearReadoutOracle::new(logit_vector(base_logits)?, u, w, layer)?)
        }
        OracleSource::Synthetic { vocab, d_model, seed } => {
            let mut o = LinearReadoutOracle::synthetic(*vocab, *d_model, d_a, *seed)?;
            o.layer = layer;
            Ok(o)
        }
    }
}

/// The steering direction for `feature` at `site`: the feature itself, or its
/// image under `W_V` in the residual stream.
fn direction_for(b: &Bundle64, feature: usize, site: Site, oracle: &LinearReadoutOracle<f64>) -> Result<Array1<f64>, Failure> {
    let z = b.z.column(feature);
    match site {
        Site::MlpActivation => Ok(z.to_owned()),
        Site::MlpOutput => {
            let w = oracle
                .w_v
                .as_ref()
                .ok_or_else(|| usage("--site mlp_output needs --w-v to map the feature into the residual stream"))?;
            Ok(residual_feature(w.view(), z)?)
        }
    }
}

fn steer_calibrate(args: SteerCalibrateArgs) -> Outcome {
    let search = ScaleSearch {
        min_scale: args.min_scale,
        max_scale: args.max_scale,
        grid_points: args.grid_points,
        max_bisections: args.max_bisections,
        ..ScaleSearch::default()
    };
    search.validate()?;
    if args.targets.is_empty() || args.targets.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(usage("--targets must be positive numbers"));
    }
    let source = match args.oracle {
        OracleKind::Linear => {
            let (Some(unembed), Some(base_logits)) = (args.unembed.clone(), args.base_logits.clone()) else {
                return Err(usage("--oracle linear needs --unembed and --base-logits"));
            };
            if args.w_v.is_none() {
                return Err(usage("--oracle linear needs --w-v"));
            }
            OracleSource::Linear { unembed, base_logits, w_v: args.w_v.clone() }
        }
        OracleKind::Synthetic => {
            if args.unembed.is_some() || args.base_logits.is_some() || args.w_v.is_some() {
                return Err(usage("--unembed, --base-logits and --w-v apply to --oracle linear only"));
            }
            OracleSource::Synthetic { vocab: args.vocab, d_model: args.d_model, seed: args.oracle_seed }
        }
    };
    let b = load_bundle(&args.bundle)?;
    check_feature(args.feature, b.k())?;
    let oracle = build_oracle(&source, args.layer, b.d_a())?;
    let direction = direction_for(&b, args.feature, args.site, &oracle)?;
    let entries = steering_run(&oracle, args.site, args.layer, &direction, &args.targets, &search)?;
    for e in entries.iter().filter(|e| !e.reachable) {
        log::warn!(
            "sign {} target {}: unreachable within scale {}, KL {:e}",
            e.sign.as_i8(),
            e.target_kl,
            e.scale,
            e.achieved_kl
        );
    }
    let report = CalibrationOut {
        bundle: &args.bundle,
        feature: args.feature,
        site: args.site,
        layer: args.layer,
        oracle: &source,
        direction_dim: direction.len(),
        direction_norm: direction.dot(&direction).sqrt(),
        search: &search,
        entries: &entries,
    };
    write_json(&args.out, &report)
}

pub const DIRECTION_FILE: &str = "direction.amx";
pub const MANIFEST_FILE: &str = "manifest.json";

fn export_steering(args: ExportSteeringArgs) -> Outcome {
    let text = fs::read_to_string(&args.calibration)
        .with_context(|| format!("reading {}", args.calibration.display()))?;
    let cal: CalibrationIn =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.calibration.display()))?;
    let b = load_bundle(&cal.bundle)?;
    if cal.feature >= b.k() {
        return Err(Failure::Data(anyhow!(
            "calibration refers to feature {} but {} has {} features",
            cal.feature,
            cal.bundle.display(),
            b.k()
        )));
    }
    let oracle = build_oracle(&cal.oracle, cal.layer, b.d_a())?;
    let direction = direction_for(&b, cal.feature, cal.site, &oracle)?;
    let norm = direction.dot(&direction).sqrt();
    if direction.len() != cal.direction_dim || (norm - cal.direction_norm).abs() > 1e-9 * cal.direction_norm.max(1.0) {
        return Err(Failure::Data(anyhow!(
            "direction rebuilt from {} does not match the calibration (dim {} vs {}, norm {norm} vs {})",
            cal.bundle.display(),
            direction.len(),
            cal.direction_dim,
            cal.direction_norm
        )));
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let row = direction.insert_axis(Axis(0));
    write_matrix(
        &args.out.join(DIRECTION_FILE),
        &StoredMatrix::Other { values: AmxMatrix::from_array(&row), role: MatrixRole::Direction },
    )?;
    let manifests: Vec<SteeringManifest> = cal
        .entries
        .iter()
        .map(|r| {
            let e = SteeringEntry {
                sign: r.sign,
                target_kl: r.target_kl,
                scale: r.scale,
                achieved_kl: r.achieved_kl,
                reachable: r.reachable,
            };
            SteeringManifest::from_entry(cal.site, cal.layer, DIRECTION_FILE, &e)
        })
        .collect();
    write_json(&args.out.join(MANIFEST_FILE), &manifests)
}
