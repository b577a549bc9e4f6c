//! Command-line front end for the fuzzing pipeline.
//!
//! Every subcommand is driven by one JSON config file (see `config`) and
//! prints a single `key=value` summary line on success. Exit codes: 0 on
//! success, 2 for configuration problems (bad flags, malformed config,
//! missing input artifacts), 1 for runtime failures.

mod config;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use manifuzz_core::coverage::{profile, NeuronProfile};
use manifuzz_core::data::{gen_blobs, load_idx, split, LabeledDataset};
use manifuzz_core::manifest::{load_model, save_model};
use manifuzz_core::manifold::{build_pca_manifold, ManifoldModel};
use manifuzz_core::model::{build_mlp, Model};
use manifuzz_core::oracle::Oracle;
use manifuzz_core::quant::{quantize, QuantKind};
use manifuzz_core::report::{accuracy, export_report, retrain_eval, CampaignReport};
use manifuzz_core::train::train_sgd;
use manifuzz_core::traversal::{run_campaign, CampaignBindings, CampaignMode, FuzzConfig};
use sha2::{Digest, Sha256};

use crate::config::{CliMode, DatasetConfig, LoadedConfig, OracleConfig};

#[derive(Parser)]
#[command(
    name = "manifuzz",
    version,
    about = "Coverage-guided fuzzing of neural classifiers along learned manifolds"
)]
struct Cli {
    /// JSON configuration file driving the pipeline.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the active command's primary seed (training shuffle,
    /// campaign RNG, retraining sample).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for compatibility; candidate evaluation is always serial,
    /// so runs are deterministic with or without this flag.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Trains the classifier under test on the configured dataset.
    Train,
    /// Builds the per-class PCA manifold from the training split.
    BuildManifold,
    /// Records per-neuron activation ranges over the training split.
    Profile,
    /// Runs a fuzzing campaign and exports its report.
    Fuzz {
        /// Overrides `fuzz.budget_steps`.
        #[arg(long)]
        budget_steps: Option<u64>,
        /// Overrides `fuzz.budget_seconds`.
        #[arg(long)]
        budget_seconds: Option<f64>,
    },
    /// Writes an int8-simulated copy of the trained model.
    Quantize,
    /// Fine-tunes the model on campaign faults and compares test accuracy.
    Retrain,
    /// Summarizes one campaign report, or compares two.
    Report {
        /// One report path (summary) or two (comparison).
        #[arg(required = true, num_args = 1..=2)]
        reports: Vec<PathBuf>,
    },
}

/// Configuration problems exit 2; runtime failures exit 1.
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<manifuzz_core::Error> for CliError {
    fn from(e: manifuzz_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CResult<T> = Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> CResult<()> {
    match &cli.cmd {
        Cmd::Train => cmd_train(cli),
        Cmd::BuildManifold => cmd_build_manifold(cli),
        Cmd::Profile => cmd_profile(cli),
        Cmd::Fuzz { budget_steps, budget_seconds } => {
            cmd_fuzz(cli, *budget_steps, *budget_seconds)
        }
        Cmd::Quantize => cmd_quantize(cli),
        Cmd::Retrain => cmd_retrain(cli),
        Cmd::Report { reports } => cmd_report(reports),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_config(cli: &Cli) -> CResult<LoadedConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| config_err("no configuration file; pass --config <path>"))?;
    LoadedConfig::load(path).map_err(CliError::Config)
}

/// Input artifacts must exist before a command starts.
fn require_input(path: &Path, what: &str) -> CResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(format!("{what} not found at {}", path.display())))
    }
}

fn create_parent(path: &Path) -> CResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn load_dataset(lc: &LoadedConfig) -> CResult<(LabeledDataset, LabeledDataset)> {
    let ds = lc
        .file
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("missing `dataset` section"))?;
    match ds {
        DatasetConfig::Blobs { classes, shape, per_class, spread, seed, split_fraction, split_seed } => {
            let data = gen_blobs(*classes, shape, *per_class, *spread, *seed)?;
            Ok(split(&data, *split_fraction, *split_seed)?)
        }
        DatasetConfig::Idx { images, labels, split_fraction, split_seed } => {
            let images = lc.resolve(images);
            let labels = lc.resolve(labels);
            require_input(&images, "IDX image file")?;
            require_input(&labels, "IDX label file")?;
            let data = load_idx(&images, &labels)?;
            Ok(split(&data, *split_fraction, *split_seed)?)
        }
    }
}

fn load_primary_model(lc: &LoadedConfig, cli: &Cli) -> CResult<(Model, PathBuf)> {
    let manifest = lc.model_path(cli.out.as_deref());
    require_input(&manifest, "model manifest")?;
    Ok((load_model(&manifest)?, manifest))
}

fn build_oracle(lc: &LoadedConfig) -> CResult<Oracle> {
    match lc.file.oracle.as_ref() {
        None | Some(OracleConfig::LabelConsistency) => Ok(Oracle::LabelConsistency),
        Some(OracleConfig::Differential { models, agreement }) => {
            let mut companions = Vec::with_capacity(models.len());
            for p in models {
                let p = lc.resolve(p);
                require_input(&p, "companion model manifest")?;
                companions.push(load_model(&p)?);
            }
            Ok(Oracle::differential(companions, *agreement)?)
        }
        Some(OracleConfig::QuantDiff { quantized }) => {
            let p = lc.resolve(quantized);
            require_input(&p, "quantized model manifest")?;
            Ok(Oracle::quant_diff(load_model(&p)?)?)
        }
    }
}

/// Class-balanced truncation: takes seeds round-robin over labels in
/// ascending label order, preserving original order within each class.
fn limit_corpus(data: &LabeledDataset, limit: Option<usize>) -> CResult<LabeledDataset> {
    let Some(limit) = limit else {
        return Ok(data.clone());
    };
    if limit == 0 {
        return Err(config_err("fuzz.corpus_limit must be positive"));
    }
    if limit >= data.len() {
        return Ok(data.clone());
    }
    let mut by_class: BTreeMap<usize, VecDeque<usize>> = BTreeMap::new();
    for (i, &label) in data.labels.iter().enumerate() {
        by_class.entry(label).or_default().push_back(i);
    }
    let mut picked = Vec::with_capacity(limit);
    while picked.len() < limit {
        let mut advanced = false;
        for queue in by_class.values_mut() {
            if picked.len() == limit {
                break;
            }
            if let Some(i) = queue.pop_front() {
                picked.push(i);
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
    }
    picked.sort_unstable();
    Ok(data.subset(&picked)?)
}

fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("writing to a String cannot fail");
    }
    s
}

fn read_bytes(path: &Path) -> CResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

/// Short content hash of one file, for the summary line.
fn sha256_file(path: &Path) -> CResult<String> {
    let mut h = Sha256::new();
    h.update(read_bytes(path)?);
    let mut s = hex(&h.finalize());
    s.truncate(12);
    Ok(s)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CResult<()> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let entry =
            entry.map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", dir.display())))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Short hash of a directory: relative names and contents, sorted, so the
/// same artifact set hashes identically regardless of creation order.
fn sha256_dir(dir: &Path) -> CResult<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in &files {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(read_bytes(&dir.join(rel))?);
    }
    let mut s = hex(&h.finalize());
    s.truncate(12);
    Ok(s)
}

/// Prints the one-line summary; key order is fixed per command.
fn summary(pairs: &[(&str, String)]) {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", line.join(" "));
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_train(cli: &Cli) -> CResult<()> {
    let lc = load_config(cli)?;
    let (train_d, test_d) = load_dataset(&lc)?;
    let tc = lc.file.train.as_ref().ok_or_else(|| config_err("missing `train` section"))?;
    let input_shape = train_d
        .input_shape()
        .ok_or_else(|| config_err("training split is empty"))?
        .to_vec();
    let model = build_mlp(&input_shape, &tc.hidden, train_d.class_count, tc.batch_norm, tc.init_seed)?;
    let seed = cli.seed.unwrap_or(tc.seed);
    let (trained, losses) = train_sgd(&model, &train_d, tc.lr, tc.epochs, tc.batch_size, seed)?;
    let train_acc = accuracy(&trained, &train_d)?;
    let test_acc = accuracy(&trained, &test_d)?;

    let manifest = lc.model_path(cli.out.as_deref());
    if manifest.file_name().and_then(|n| n.to_str()) != Some("manifest.json") {
        return Err(config_err(format!(
            "model path must end in manifest.json, got {}",
            manifest.display()
        )));
    }
    create_parent(&manifest)?;
    let dir = manifest.parent().expect("manifest path has a parent directory");
    let written = save_model(&trained, dir)?;
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    summary(&[
        ("cmd", "train".into()),
        ("status", "ok".into()),
        ("model", written.display().to_string()),
        ("train_acc", format!("{train_acc:.4}")),
        ("test_acc", format!("{test_acc:.4}")),
        ("final_loss", format!("{final_loss:.6}")),
        ("sha256", sha256_dir(dir)?),
    ]);
    Ok(())
}

fn cmd_build_manifold(cli: &Cli) -> CResult<()> {
    let lc = load_config(cli)?;
    let (train_d, _) = load_dataset(&lc)?;
    let mc = lc.file.build_manifold.as_ref().cloned().unwrap_or_default();
    let (manifold, warnings) = build_pca_manifold(&train_d, mc.latent_dim, mc.valid_range)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let target = lc.manifold_path(cli.out.as_deref());
    if target.file_name().and_then(|n| n.to_str()) != Some("manifold.json") {
        return Err(config_err(format!(
            "manifold path must end in manifold.json, got {}",
            target.display()
        )));
    }
    create_parent(&target)?;
    let dir = target.parent().expect("manifold path has a parent directory");
    let written = manifold.save(dir)?;
    summary(&[
        ("cmd", "build-manifold".into()),
        ("status", "ok".into()),
        ("manifold", written.display().to_string()),
        ("latent_dim", manifold.latent_dim().to_string()),
        ("classes", manifold.classes().len().to_string()),
        ("warnings", warnings.len().to_string()),
        ("sha256", sha256_dir(dir)?),
    ]);
    Ok(())
}

fn cmd_profile(cli: &Cli) -> CResult<()> {
    let lc = load_config(cli)?;
    let (model, _) = load_primary_model(&lc, cli)?;
    let (train_d, _) = load_dataset(&lc)?;
    let prof = profile(&model, &train_d)?;
    let path = lc.profile_path(cli.out.as_deref());
    create_parent(&path)?;
    prof.save(&path)?;
    summary(&[
        ("cmd", "profile".into()),
        ("status", "ok".into()),
        ("profile", path.display().to_string()),
        ("layers", prof.layers.len().to_string()),
        ("neurons", prof.total_neurons().to_string()),
        ("sha256", sha256_file(&path)?),
    ]);
    Ok(())
}

fn quant_kind_name(kind: QuantKind) -> &'static str {
    match kind {
        QuantKind::Dense => "dense",
        QuantKind::Conv2d => "conv2d",
    }
}

fn cmd_quantize(cli: &Cli) -> CResult<()> {
    let lc = load_config(cli)?;
    let (model, _) = load_primary_model(&lc, cli)?;
    let qc = lc.file.quantize.as_ref().cloned().unwrap_or_default();
    if qc.kinds.is_empty() {
        return Err(config_err("quantize.kinds must name at least one layer kind"));
    }
    let quant = quantize(&model, &qc.kinds)?;
    let dir = lc.out_dir(cli.out.as_deref()).join("quant");
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let written = save_model(&quant, &dir)?;

    let kinds: Vec<&str> = qc.kinds.iter().map(|&k| quant_kind_name(k)).collect();
    let mut pairs = vec![
        ("cmd", "quantize".to_string()),
        ("status", "ok".into()),
        ("model", written.display().to_string()),
        ("kinds", kinds.join("+")),
    ];
    // Accuracy comparison is only possible when a dataset is configured.
    if lc.file.dataset.is_some() {
        let (_, test_d) = load_dataset(&lc)?;
        let acc_float = accuracy(&model, &test_d)?;
        let acc_quant = accuracy(&quant, &test_d)?;
        pairs.push(("acc_float", format!("{acc_float:.4}")));
        pairs.push(("acc_quant", format!("{acc_quant:.4}")));
    }
    pairs.push(("sha256", sha256_dir(&dir)?));
    summary(&pairs);
    Ok(())
}

fn cmd_fuzz(cli: &Cli, budget_steps: Option<u64>, budget_seconds: Option<f64>) -> CResult<()> {
    let lc = load_config(cli)?;
    let fs = lc.file.fuzz.as_ref().cloned().unwrap_or_default();
    let mut fc: FuzzConfig = fs.to_fuzz_config();
    if let Some(s) = cli.seed {
        fc.rng_seed = s;
    }
    if budget_steps.is_some() {
        fc.budget_steps = budget_steps;
    }
    if budget_seconds.is_some() {
        fc.budget_seconds = budget_seconds;
    }
    if fc.budget_steps.is_none() && fc.budget_seconds.is_none() {
        return Err(config_err(
            "fuzz needs a budget: set fuzz.budget_steps / fuzz.budget_seconds or pass --budget-steps / --budget-seconds",
        ));
    }

    let (model, _) = load_primary_model(&lc, cli)?;
    let manifold_path = lc.manifold_path(cli.out.as_deref());
    require_input(&manifold_path, "manifold")?;
    let manifold = ManifoldModel::load(&manifold_path)?;
    let oracle = build_oracle(&lc)?;
    if fs.mode == CliMode::BlackboxQuant && oracle.kind_name() != "quant_diff" {
        return Err(config_err(
            "blackbox-quant mode needs `oracle.kind = \"quant_diff\"` (fitness comes from the quantized sibling)",
        ));
    }
    let prof = if fc.mode == CampaignMode::Graybox {
        let path = lc.profile_path(cli.out.as_deref());
        require_input(&path, "activation profile")?;
        Some(NeuronProfile::load(&path)?)
    } else {
        None
    };

    let (train_d, _) = load_dataset(&lc)?;
    let corpus = limit_corpus(&train_d, fs.corpus_limit)?;
    let bindings = CampaignBindings {
        model: &model,
        manifold: &manifold,
        oracle: &oracle,
        corpus: &corpus,
        profile: prof.as_ref(),
        coverage_config: lc.file.coverage,
    };
    let report = run_campaign(bindings, fc)?;

    let fuzz_dir = lc.out_dir(cli.out.as_deref()).join("fuzz");
    let files = export_report(&report, &fuzz_dir)?;
    let report_path = fuzz_dir.join("report.json");

    let mut pairs = vec![
        ("cmd", "fuzz".to_string()),
        ("status", "ok".into()),
        ("mode", report.meta.mode.clone()),
        ("objective", report.meta.objective.clone()),
        ("strategy", report.meta.strategy.clone()),
        ("steps", report.meta.steps.to_string()),
        ("faults", report.stats.faults.to_string()),
        ("accepted", report.stats.accepted.to_string()),
        ("skipped", report.stats.skipped.to_string()),
    ];
    if let Some(values) = &report.final_coverage {
        pairs.push(("nc", format!("{:.6}", values.nc)));
        pairs.push(("kmnc", format!("{:.6}", values.kmnc)));
        pairs.push(("nbc", format!("{:.6}", values.nbc)));
        pairs.push(("snac", format!("{:.6}", values.snac)));
        pairs.push(("tknc", format!("{:.6}", values.tknc)));
    }
    if let Some(last) = report.fitness_curve.last() {
        pairs.push(("best_fitness", format!("{:.6}", last.best)));
    }
    let lambda_final = report.lambda_history.last().map(|p| p.lambda).unwrap_or(0.0);
    pairs.push(("lambda_final", format!("{lambda_final:.4}")));
    pairs.push(("report", report_path.display().to_string()));
    pairs.push(("files", files.len().to_string()));
    pairs.push(("sha256", sha256_file(&report_path)?));
    summary(&pairs);
    Ok(())
}

fn cmd_retrain(cli: &Cli) -> CResult<()> {
    let lc = load_config(cli)?;
    let (model, _) = load_primary_model(&lc, cli)?;
    let (train_d, test_d) = load_dataset(&lc)?;
    let rc = lc.file.retrain.as_ref().cloned().unwrap_or_default();
    let report_path = match &rc.report {
        Some(p) => lc.resolve(p),
        None => lc.out_dir(cli.out.as_deref()).join("fuzz").join("report.json"),
    };
    require_input(&report_path, "campaign report")?;
    let report = CampaignReport::load(&report_path)?;
    let seed = cli.seed.unwrap_or(rc.seed);
    let outcome = retrain_eval(
        &model,
        &train_d,
        &test_d,
        &report.faults,
        rc.limit,
        rc.epochs,
        rc.lr,
        rc.batch_size,
        seed,
    )?;

    let out_path = lc.out_dir(cli.out.as_deref()).join("retrain.json");
    create_parent(&out_path)?;
    let json = serde_json::to_string(&outcome)
        .map_err(|e| CliError::Runtime(format!("cannot serialize retrain outcome: {e}")))?;
    std::fs::write(&out_path, format!("{json}\n"))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out_path.display())))?;

    summary(&[
        ("cmd", "retrain".into()),
        ("status", "ok".into()),
        ("faults_used", outcome.faults_used.to_string()),
        ("acc_before", format!("{:.4}", outcome.acc_before)),
        ("acc_after", format!("{:.4}", outcome.acc_after)),
        ("delta", format!("{:+.4}", outcome.acc_after - outcome.acc_before)),
        ("out", out_path.display().to_string()),
    ]);
    Ok(())
}

fn cmd_report(paths: &[PathBuf]) -> CResult<()> {
    for p in paths {
        require_input(p, "campaign report")?;
    }
    let a = CampaignReport::load(&paths[0])?;
    if paths.len() == 1 {
        let mut pairs = vec![
            ("cmd", "report".to_string()),
            ("status", "ok".into()),
            ("mode", a.meta.mode.clone()),
            ("objective", a.meta.objective.clone()),
            ("strategy", a.meta.strategy.clone()),
            ("steps", a.meta.steps.to_string()),
            ("faults", a.stats.faults.to_string()),
            ("accepted", a.stats.accepted.to_string()),
            ("skipped", a.stats.skipped.to_string()),
        ];
        if let Some(v) = &a.final_coverage {
            pairs.push(("nc", format!("{:.6}", v.nc)));
            pairs.push(("kmnc", format!("{:.6}", v.kmnc)));
            pairs.push(("nbc", format!("{:.6}", v.nbc)));
            pairs.push(("snac", format!("{:.6}", v.snac)));
            pairs.push(("tknc", format!("{:.6}", v.tknc)));
        }
        if let Some(last) = a.fitness_curve.last() {
            pairs.push(("best_fitness", format!("{:.6}", last.best)));
        }
        if let Some(d) = &a.diversity {
            pairs.push(("fault_classes", d.class_count.to_string()));
            pairs.push(("entropy", format!("{:.4}", d.scaled_entropy)));
        }
        let lambda_final = a.lambda_history.last().map(|p| p.lambda).unwrap_or(0.0);
        pairs.push(("lambda_final", format!("{lambda_final:.4}")));
        summary(&pairs);
        return Ok(());
    }

    let b = CampaignReport::load(&paths[1])?;
    let mut pairs = vec![
        ("cmd", "report".to_string()),
        ("status", "ok".into()),
        ("mode_a", a.meta.mode.clone()),
        ("mode_b", b.meta.mode.clone()),
        ("objective_a", a.meta.objective.clone()),
        ("objective_b", b.meta.objective.clone()),
        ("steps_a", a.meta.steps.to_string()),
        ("steps_b", b.meta.steps.to_string()),
        ("faults_a", a.stats.faults.to_string()),
        ("faults_b", b.stats.faults.to_string()),
        (
            "faults_delta",
            format!("{:+}", b.stats.faults as i64 - a.stats.faults as i64),
        ),
        ("accepted_a", a.stats.accepted.to_string()),
        ("accepted_b", b.stats.accepted.to_string()),
    ];
    if let (Some(va), Some(vb)) = (&a.final_coverage, &b.final_coverage) {
        for (name, xa, xb) in [
            ("nc", va.nc, vb.nc),
            ("kmnc", va.kmnc, vb.kmnc),
            ("nbc", va.nbc, vb.nbc),
            ("snac", va.snac, vb.snac),
            ("tknc", va.tknc, vb.tknc),
        ] {
            pairs.push((name, format!("{xa:.6}/{xb:.6}/{:+.6}", xb - xa)));
        }
    }
    if let (Some(fa), Some(fb)) = (a.fitness_curve.last(), b.fitness_curve.last()) {
        pairs.push((
            "best_fitness",
            format!("{:.6}/{:.6}/{:+.6}", fa.best, fb.best, fb.best - fa.best),
        ));
    }
    summary(&pairs);
    Ok(())
}
