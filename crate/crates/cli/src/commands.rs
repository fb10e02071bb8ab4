//! Subcommand definitions and execution.
//!
//! Every command is a plain function of its typed argument struct; the same
//! structs serialize into the manifest, which is what makes `verify-manifest
//! --replay` possible: entries deserialize back into commands, output paths
//! get remapped into a scratch workdir, and the stage reruns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rhawk_core::dataset::{load_dataset, save_dataset, split, Dataset, SplitSpec};
use rhawk_core::hawkes::{simulate_dataset, HawkesParams};
use rhawk_core::metrics::{compounding_report, DivergenceStat};
use rhawk_core::noise::{corrupt, NoiseKind, NoiseSpec};
use rhawk_core::train::{fit, history_to_csv, Checkpoint, TrainConfig, TrainState};

use crate::manifest::{self, Manifest, PathMap};

/// Usage-level failure: wrong flags, missing or malformed input files.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn is_input_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        if cause.downcast_ref::<UsageError>().is_some() {
            return true;
        }
        if let Some(core) = cause.downcast_ref::<rhawk_core::Error>() {
            return matches!(
                core,
                rhawk_core::Error::MalformedInput { .. }
                    | rhawk_core::Error::SchemaViolation { .. }
                    | rhawk_core::Error::EmptyDataset(_)
                    | rhawk_core::Error::Config(_)
            ) || matches!(core, rhawk_core::Error::Io { source, .. }
                    if source.kind() == std::io::ErrorKind::NotFound);
        }
        false
    })
}

fn require_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!(UsageError(format!("input file not found: {}", path.display())));
    }
    Ok(())
}

#[derive(Parser)]
#[command(name = "rhawk", version, about = "Noise-robust deep Hawkes process pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Serialize, Deserialize)]
pub enum Command {
    /// Simulate a multivariate Hawkes dataset with known parameters.
    Simulate(SimulateArgs),
    /// Split a dataset into train/val/test/clean at sequence level.
    Split(SplitArgs),
    /// Apply label and/or time noise to a dataset.
    Corrupt(CorruptArgs),
    /// Train a model on a noisy split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Compare intensity traces of clean/time/label/both checkpoints.
    Diagnose(DiagnoseArgs),
    /// Run a grid of (noise kind, p, seed) cells as worker processes.
    Sweep(SweepArgs),
    /// Worker process for one sweep cell.
    #[command(hide = true)]
    SweepCell(SweepCellArgs),
    /// Check recorded file hashes, optionally replaying the whole pipeline.
    VerifyManifest(VerifyManifestArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Split(_) => "split",
            Command::Corrupt(_) => "corrupt",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Diagnose(_) => "diagnose",
            Command::Sweep(_) => "sweep",
            Command::SweepCell(_) => "sweep-cell",
            Command::VerifyManifest(_) => "verify-manifest",
        }
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Base intensities, comma separated: "0.2,0.1".
    #[arg(long)]
    pub mu: Option<String>,
    /// Excitation matrix, row-major: "a,b;c,d" or "a,b,c,d".
    #[arg(long)]
    pub alpha: Option<String>,
    /// Decay-rate matrix, same layout as --alpha.
    #[arg(long)]
    pub gamma: Option<String>,
    /// JSON file with {mu, alpha, gamma}; overrides the inline flags.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub t_max: f64,
    #[arg(long)]
    pub n_seqs: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// train,val,test,clean fractions summing to 1: "0.75,0.1,0.1,0.05".
    #[arg(long)]
    pub fracs: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct CorruptArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// uniform | flip | flip2 | none
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub p: f64,
    #[arg(long, default_value_t = 0.0)]
    pub time_p: f64,
    #[arg(long, default_value_t = 0.0)]
    pub time_sigma: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Corruption log: sequence id -> [[index, original_time, original_mark]].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub clean: Option<PathBuf>,
    #[arg(long)]
    pub val: PathBuf,
    /// Output directory: best.ckpt.json, final.ckpt.json, history.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub quiet: bool,
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub clean_ckpt: PathBuf,
    #[arg(long)]
    pub time_ckpt: PathBuf,
    #[arg(long)]
    pub label_ckpt: PathBuf,
    #[arg(long)]
    pub both_ckpt: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// mean_abs | mean_squared
    #[arg(long, default_value = "mean_abs")]
    #[serde(default = "default_stat")]
    pub stat: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn default_stat() -> String {
    "mean_abs".to_string()
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum concurrent worker processes.
    #[arg(long, default_value_t = 2)]
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn default_jobs() -> usize {
    2
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct SweepCellArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Serialize, Deserialize)]
pub struct VerifyManifestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Re-execute every recorded command into --workdir and compare output
    /// hashes, instead of only hashing files on disk.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub replay: bool,
    #[arg(long)]
    pub workdir: Option<PathBuf>,
}

pub fn dispatch(command: Command) -> Result<()> {
    run_command(command, true)
}

fn run_command(command: Command, record: bool) -> Result<()> {
    match command {
        Command::Simulate(args) => run_simulate(args, record),
        Command::Split(args) => run_split(args, record),
        Command::Corrupt(args) => run_corrupt(args, record),
        Command::Train(args) => run_train(args, record),
        Command::Eval(args) => run_eval(args, record),
        Command::Diagnose(args) => run_diagnose(args, record),
        Command::Sweep(args) => run_sweep(args, record),
        Command::SweepCell(args) => run_sweep_cell(args),
        Command::VerifyManifest(args) => run_verify_manifest(args),
    }
}

fn default_manifest_for(out: &Path) -> PathBuf {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty());
    match dir {
        Some(d) => d.join("manifest.json"),
        None => PathBuf::from("manifest.json"),
    }
}

fn record_entry(
    explicit: &Option<PathBuf>,
    primary_out: &Path,
    command: Command,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| default_manifest_for(primary_out));
    let name = command.name();
    manifest::record(&path, name, serde_json::to_value(&command)?, inputs, outputs)
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!(UsageError(format!("bad number '{x}': {e}"))))
        })
        .collect()
}

fn parse_matrix(s: &str, k: usize) -> Result<Vec<Vec<f64>>> {
    if s.contains(';') {
        s.split(';').map(parse_vector).collect()
    } else {
        let flat = parse_vector(s)?;
        if flat.len() != k * k {
            bail!(UsageError(format!(
                "expected {}x{k} = {} matrix entries, got {}",
                k,
                k * k,
                flat.len()
            )));
        }
        Ok(flat.chunks(k).map(<[f64]>::to_vec).collect())
    }
}

fn run_simulate(args: SimulateArgs, record: bool) -> Result<()> {
    let mut inputs = Vec::new();
    let params = if let Some(path) = &args.params {
        require_exists(path)?;
        inputs.push(path.clone());
        let text = std::fs::read_to_string(path)?;
        let raw: HawkesParams = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("bad params file {}: {e}", path.display())))?;
        HawkesParams::new(raw.mu, raw.alpha, raw.gamma)?
    } else {
        let mu_s = args
            .mu
            .as_ref()
            .ok_or_else(|| UsageError("either --params or --mu/--alpha/--gamma required".into()))?;
        let mu = parse_vector(mu_s)?;
        let k = mu.len();
        let alpha = parse_matrix(
            args.alpha
                .as_ref()
                .ok_or_else(|| UsageError("--alpha required with --mu".into()))?,
            k,
        )?;
        let gamma = parse_matrix(
            args.gamma
                .as_ref()
                .ok_or_else(|| UsageError("--gamma required with --mu".into()))?,
            k,
        )?;
        HawkesParams::new(mu, alpha, gamma)?
    };
    if !params.stable {
        eprintln!(
            "warning: parameters are unstable (branching radius {:.3}); realizations are capped",
            params.branching_radius()
        );
    }
    let (dataset, skipped) = simulate_dataset(&params, args.t_max, args.n_seqs, args.seed)?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} empty realizations");
    }
    save_dataset(&dataset, &args.out)?;
    eprintln!(
        "simulated {} sequences, {} events -> {}",
        dataset.len(),
        dataset.total_events(),
        args.out.display()
    );
    if record {
        let outputs = vec![args.out.clone()];
        let manifest_flag = args.manifest.clone();
        let primary = args.out.clone();
        record_entry(&manifest_flag, &primary, Command::Simulate(args), &inputs, &outputs)?;
    }
    Ok(())
}

fn run_split(args: SplitArgs, record: bool) -> Result<()> {
    require_exists(&args.input)?;
    let fracs = parse_vector(&args.fracs)?;
    if fracs.len() != 4 {
        bail!(UsageError(format!(
            "--fracs needs 4 values train,val,test,clean; got {}",
            fracs.len()
        )));
    }
    let spec = SplitSpec {
        train_frac: fracs[0],
        val_frac: fracs[1],
        test_frac: fracs[2],
        clean_frac: fracs[3],
        seed: args.seed,
    };
    let loaded = load_dataset(&args.input)?;
    if loaded.resorted > 0 {
        eprintln!("warning: re-sorted {} sequences on load", loaded.resorted);
    }
    let result = split(&loaded.dataset, &spec)?;
    for name in &result.empty_warnings {
        eprintln!("warning: {name} split has a positive fraction but zero sequences");
    }
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut outputs = Vec::new();
    for (name, ds) in [
        ("train.jsonl", &result.train),
        ("val.jsonl", &result.val),
        ("test.jsonl", &result.test),
        ("clean.jsonl", &result.clean),
    ] {
        let path = args.out_dir.join(name);
        save_dataset(ds, &path)?;
        outputs.push(path);
    }
    eprintln!(
        "split {} sequences into {}/{}/{}/{}",
        loaded.dataset.len(),
        result.train.len(),
        result.val.len(),
        result.test.len(),
        result.clean.len()
    );
    if record {
        let primary = args.out_dir.join("train.jsonl");
        let inputs = vec![args.input.clone()];
        let manifest_flag = args.manifest.clone();
        record_entry(&manifest_flag, &primary, Command::Split(args), &inputs, &outputs)?;
    }
    Ok(())
}

fn run_corrupt(args: CorruptArgs, record: bool) -> Result<()> {
    require_exists(&args.input)?;
    let kind: NoiseKind = args.kind.parse::<NoiseKind>()?;
    let spec = NoiseSpec {
        kind,
        p: args.p,
        time_p: args.time_p,
        time_sigma: args.time_sigma,
        seed: args.seed,
    };
    let loaded = load_dataset(&args.input)?;
    let (mut noisy, log) = corrupt(&loaded.dataset, &spec)?;
    // Fix the gap-normalization constant at corruption time so training and
    // evaluation share one scale.
    noisy.max_gap = Some(noisy.observed_max_gap());
    save_dataset(&noisy, &args.out)?;
    let mut outputs = vec![args.out.clone()];
    if let Some(log_path) = &args.log {
        std::fs::write(log_path, serde_json::to_string_pretty(&log)?)
            .with_context(|| format!("writing {}", log_path.display()))?;
        outputs.push(log_path.clone());
    }
    eprintln!(
        "corrupted {} of {} events ({} clamped) -> {}",
        log.total_altered(),
        noisy.total_events(),
        log.clamped,
        args.out.display()
    );
    if record {
        let inputs = vec![args.input.clone()];
        let manifest_flag = args.manifest.clone();
        let primary = args.out.clone();
        record_entry(&manifest_flag, &primary, Command::Corrupt(args), &inputs, &outputs)?;
    }
    Ok(())
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            require_exists(p)?;
            let text = std::fs::read_to_string(p)?;
            let cfg: TrainConfig = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("bad train config {}: {e}", p.display())))?;
            Ok(cfg)
        }
    }
}

fn run_train(args: TrainArgs, record: bool) -> Result<()> {
    require_exists(&args.train)?;
    require_exists(&args.val)?;
    let config = load_train_config(&args.config)?;
    let train_set = load_dataset(&args.train)?.dataset;
    let val_set = load_dataset(&args.val)?.dataset;
    let clean_set = match &args.clean {
        Some(p) => {
            require_exists(p)?;
            load_dataset(p)?.dataset
        }
        None => {
            if config.use_reweight {
                bail!(UsageError(
                    "--clean is required when the re-weighting net is enabled".into()
                ));
            }
            Dataset {
                sequences: vec![],
                num_types: train_set.num_types,
                t_max: train_set.t_max,
                max_gap: None,
            }
        }
    };

    let result = fit(config.clone(), &train_set, &clean_set, &val_set)?;
    if !args.quiet {
        for row in &result.history {
            eprintln!(
                "epoch {:3}  loss_v {:.4}  loss_t {:.4}  sigma ({:.3},{:.3})  val_f1 {:.4}  val_rmse {:.4}",
                row.epoch,
                row.train_loss_v,
                row.train_loss_t,
                row.sigma_v_mean,
                row.sigma_t_mean,
                row.val_f1,
                row.val_rmse
            );
        }
        eprintln!("best epoch {}", result.best_epoch);
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let best_path = args.out.join("best.ckpt.json");
    result.best.save(&best_path)?;
    let final_path = args.out.join("final.ckpt.json");
    result.state.to_checkpoint(true).save(&final_path)?;
    let history_path = args.out.join("history.csv");
    std::fs::write(&history_path, history_to_csv(&result.history))?;
    let config_path = args.out.join("train-config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;

    if record {
        let mut inputs = vec![args.train.clone(), args.val.clone()];
        if let Some(c) = &args.clean {
            inputs.push(c.clone());
        }
        if let Some(c) = &args.config {
            inputs.push(c.clone());
        }
        let outputs = vec![best_path.clone(), final_path, history_path, config_path];
        let manifest_flag = args.manifest.clone();
        record_entry(&manifest_flag, &best_path, Command::Train(args), &inputs, &outputs)?;
    }
    Ok(())
}

fn run_eval(args: EvalArgs, record: bool) -> Result<()> {
    require_exists(&args.ckpt)?;
    require_exists(&args.test)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    let test = load_dataset(&args.test)?.dataset;
    let outcome = state.evaluate(&test)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&outcome)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "macro_f1 {:.4}  rmse {:.4}  over {} predictions",
        outcome.f1, outcome.rmse, outcome.samples
    );
    if record {
        let inputs = vec![args.ckpt.clone(), args.test.clone()];
        let outputs = vec![args.out.clone()];
        let manifest_flag = args.manifest.clone();
        let primary = args.out.clone();
        record_entry(&manifest_flag, &primary, Command::Eval(args), &inputs, &outputs)?;
    }
    Ok(())
}

fn run_diagnose(args: DiagnoseArgs, record: bool) -> Result<()> {
    for p in [&args.clean_ckpt, &args.time_ckpt, &args.label_ckpt, &args.both_ckpt, &args.probe] {
        require_exists(p)?;
    }
    let stat = match args.stat.as_str() {
        "mean_abs" => DivergenceStat::MeanAbs,
        "mean_squared" => DivergenceStat::MeanSquared,
        other => bail!(UsageError(format!(
            "unknown --stat '{other}' (mean_abs | mean_squared)"
        ))),
    };
    let probe = load_dataset(&args.probe)?.dataset;
    let trace_of = |path: &Path| -> Result<_> {
        let state = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
        Ok(state.intensity_trace(&probe)?)
    };
    let clean = trace_of(&args.clean_ckpt)?;
    let time = trace_of(&args.time_ckpt)?;
    let label = trace_of(&args.label_ckpt)?;
    let both = trace_of(&args.both_ckpt)?;
    let report = compounding_report(&clean, &time, &label, &both, stat)?;
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "divergences: time {:.6} label {:.6} both {:.6} (ratio {:?}, compounding {})",
        report.d_time, report.d_label, report.d_both, report.ratio, report.compounding
    );
    if record {
        let inputs = vec![
            args.clean_ckpt.clone(),
            args.time_ckpt.clone(),
            args.label_ckpt.clone(),
            args.both_ckpt.clone(),
            args.probe.clone(),
        ];
        let outputs = vec![args.out.clone()];
        let manifest_flag = args.manifest.clone();
        let primary = args.out.clone();
        record_entry(&manifest_flag, &primary, Command::Diagnose(args), &inputs, &outputs)?;
    }
    Ok(())
}

// ---- sweep -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: SweepData,
    /// train,val,test,clean fractions.
    pub split_fracs: [f64; 4],
    pub split_seed: u64,
    pub kinds: Vec<String>,
    pub ps: Vec<f64>,
    /// One trial per seed; metrics aggregate across them.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub time_p: f64,
    #[serde(default)]
    pub time_sigma: f64,
    pub train: TrainConfig,
    /// Model variants by name; flags override the base train config.
    #[serde(default = "default_variants")]
    pub variants: BTreeMap<String, VariantFlags>,
}

fn default_variants() -> BTreeMap<String, VariantFlags> {
    let mut m = BTreeMap::new();
    m.insert(
        "full".to_string(),
        VariantFlags {
            use_gce: true,
            use_overparam: true,
            use_reweight: true,
        },
    );
    m
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VariantFlags {
    pub use_gce: bool,
    pub use_overparam: bool,
    pub use_reweight: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepData {
    Simulated {
        params: HawkesParams,
        t_max: f64,
        n_seqs: usize,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellSpec {
    variant: String,
    kind: String,
    p: f64,
    time_p: f64,
    time_sigma: f64,
    seeds: Vec<u64>,
    train_config: TrainConfig,
    base_train: PathBuf,
    base_val: PathBuf,
    base_test: PathBuf,
    base_clean: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellResult {
    variant: String,
    kind: String,
    p: f64,
    per_seed: Vec<(u64, f64, f64)>,
    f1_mean: f64,
    f1_std: f64,
    rmse_mean: f64,
    rmse_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_sweep_cell(args: SweepCellArgs) -> Result<()> {
    require_exists(&args.spec)?;
    let spec: CellSpec = serde_json::from_str(&std::fs::read_to_string(&args.spec)?)
        .map_err(|e| UsageError(format!("bad cell spec: {e}")))?;
    let base_train = load_dataset(&spec.base_train)?.dataset;
    let val = load_dataset(&spec.base_val)?.dataset;
    let test = load_dataset(&spec.base_test)?.dataset;
    let clean = load_dataset(&spec.base_clean)?.dataset;
    let kind: NoiseKind = spec.kind.parse::<NoiseKind>()?;

    let mut per_seed = Vec::new();
    for &trial in &spec.seeds {
        let noise = NoiseSpec {
            kind,
            p: spec.p,
            time_p: spec.time_p,
            time_sigma: spec.time_sigma,
            seed: trial ^ 0x5eed_0000,
        };
        let (mut noisy, _) = corrupt(&base_train, &noise)?;
        noisy.max_gap = Some(noisy.observed_max_gap());
        let config = TrainConfig {
            seed: trial,
            ..spec.train_config.clone()
        };
        let result = fit(config, &noisy, &clean, &val)?;
        let best_state = TrainState::from_checkpoint(&result.best)?;
        let outcome = best_state.evaluate(&test)?;
        per_seed.push((trial, outcome.f1, outcome.rmse));
    }
    let f1s: Vec<f64> = per_seed.iter().map(|x| x.1).collect();
    let rmses: Vec<f64> = per_seed.iter().map(|x| x.2).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let (rmse_mean, rmse_std) = mean_std(&rmses);
    let result = CellResult {
        variant: spec.variant,
        kind: spec.kind,
        p: spec.p,
        per_seed,
        f1_mean,
        f1_std,
        rmse_mean,
        rmse_std,
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn run_sweep(args: SweepArgs, record: bool) -> Result<()> {
    require_exists(&args.config)?;
    let config: SweepConfig = serde_json::from_str(&std::fs::read_to_string(&args.config)?)
        .map_err(|e| UsageError(format!("bad sweep config {}: {e}", args.config.display())))?;
    if args.jobs == 0 {
        bail!(UsageError("--jobs must be at least 1".into()));
    }
    std::fs::create_dir_all(args.out.join("cells"))?;
    let base_dir = args.out.join("base");
    std::fs::create_dir_all(&base_dir)?;

    // Stage the shared base splits once.
    let base = match &config.data {
        SweepData::Simulated {
            params,
            t_max,
            n_seqs,
            seed,
        } => {
            let params = HawkesParams::new(params.mu.clone(), params.alpha.clone(), params.gamma.clone())?;
            simulate_dataset(&params, *t_max, *n_seqs, *seed)?.0
        }
        SweepData::File { path } => {
            require_exists(path)?;
            load_dataset(path)?.dataset
        }
    };
    let split_spec = SplitSpec {
        train_frac: config.split_fracs[0],
        val_frac: config.split_fracs[1],
        test_frac: config.split_fracs[2],
        clean_frac: config.split_fracs[3],
        seed: config.split_seed,
    };
    let splits = split(&base, &split_spec)?;
    let base_train = base_dir.join("train.jsonl");
    let base_val = base_dir.join("val.jsonl");
    let base_test = base_dir.join("test.jsonl");
    let base_clean = base_dir.join("clean.jsonl");
    save_dataset(&splits.train, &base_train)?;
    save_dataset(&splits.val, &base_val)?;
    save_dataset(&splits.test, &base_test)?;
    save_dataset(&splits.clean, &base_clean)?;

    // One cell per (variant, kind, p), in declared order.
    let mut cells = Vec::new();
    for (variant, flags) in &config.variants {
        for kind in &config.kinds {
            for &p in &config.ps {
                let train_config = TrainConfig {
                    use_gce: flags.use_gce,
                    use_overparam: flags.use_overparam,
                    use_reweight: flags.use_reweight,
                    ..config.train.clone()
                };
                cells.push(CellSpec {
                    variant: variant.clone(),
                    kind: kind.clone(),
                    p,
                    time_p: config.time_p,
                    time_sigma: config.time_sigma,
                    seeds: config.seeds.clone(),
                    train_config,
                    base_train: base_train.clone(),
                    base_val: base_val.clone(),
                    base_test: base_test.clone(),
                    base_clean: base_clean.clone(),
                });
            }
        }
    }

    // Worker processes, at most --jobs in flight.
    let exe = std::env::current_exe().context("locating own executable")?;
    let mut pending: Vec<(usize, std::process::Child, PathBuf)> = Vec::new();
    let mut results: Vec<Option<CellResult>> = (0..cells.len()).map(|_| None).collect();
    let mut next = 0usize;
    while next < cells.len() || !pending.is_empty() {
        while next < cells.len() && pending.len() < args.jobs {
            let cell = &cells[next];
            let spec_path = args
                .out
                .join("cells")
                .join(format!("cell-{}-{}-{}.json", cell.variant, cell.kind, cell.p));
            std::fs::write(&spec_path, serde_json::to_string_pretty(cell)?)?;
            let result_path = args
                .out
                .join("cells")
                .join(format!("result-{}-{}-{}.json", cell.variant, cell.kind, cell.p));
            let child = std::process::Command::new(&exe)
                .arg("sweep-cell")
                .arg("--spec")
                .arg(&spec_path)
                .arg("--out")
                .arg(&result_path)
                .spawn()
                .context("spawning sweep-cell worker")?;
            pending.push((next, child, result_path));
            next += 1;
        }
        if !pending.is_empty() {
            let (idx, mut child, result_path) = pending.remove(0);
            let status = child.wait()?;
            if !status.success() {
                bail!("sweep cell {idx} failed with {status}");
            }
            let parsed: CellResult =
                serde_json::from_str(&std::fs::read_to_string(&result_path)?)?;
            results[idx] = Some(parsed);
        }
    }

    // Aggregate rows in declared order; flag non-monotone degradation
    // relative to the lowest noise level of each (variant, kind).
    let results: Vec<CellResult> = results.into_iter().map(|r| r.expect("cell ran")).collect();
    let mut csv = String::from("variant,kind,p,f1_mean,f1_std,rmse_mean,rmse_std,flag\n");
    for r in &results {
        let min_p = config
            .ps
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let baseline = results
            .iter()
            .find(|x| x.variant == r.variant && x.kind == r.kind && x.p == min_p)
            .map(|x| x.f1_mean)
            .unwrap_or(f64::NAN);
        let flag = if r.p > min_p && r.f1_mean > baseline {
            "f1_above_lowest_noise"
        } else {
            ""
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.variant, r.kind, r.p, r.f1_mean, r.f1_std, r.rmse_mean, r.rmse_std, flag
        )
        .expect("string write");
    }
    let results_path = args.out.join("results.csv");
    std::fs::write(&results_path, csv)?;
    eprintln!("sweep complete: {} cells -> {}", results.len(), results_path.display());

    if record {
        let inputs = vec![args.config.clone()];
        let outputs = vec![results_path.clone(), base_train, base_val, base_test, base_clean];
        let manifest_flag = args.manifest.clone();
        record_entry(&manifest_flag, &results_path, Command::Sweep(args), &inputs, &outputs)?;
    }
    Ok(())
}

// ---- verify-manifest ---------------------------------------------------------

/// Rewrites a replayed command's paths: inputs resolve through the map,
/// outputs allocate fresh workdir locations. Returns the original output
/// paths for hash comparison.
fn remap_command(cmd: &mut Command, pm: &mut PathMap) -> Result<Vec<PathBuf>> {
    let mut originals = Vec::new();
    let mut out = |pm: &mut PathMap, p: &mut PathBuf| -> Result<()> {
        originals.push(p.clone());
        *p = pm.alloc_output(p)?;
        Ok(())
    };
    match cmd {
        Command::Simulate(a) => {
            if let Some(p) = &mut a.params {
                *p = pm.resolve_input(p)?;
            }
            out(pm, &mut a.out)?;
            a.manifest = None;
        }
        Command::Split(a) => {
            a.input = pm.resolve_input(&a.input)?;
            for name in ["train.jsonl", "val.jsonl", "test.jsonl", "clean.jsonl"] {
                originals.push(a.out_dir.join(name));
            }
            let mapped_dir = pm.alloc_output(&a.out_dir.join("train.jsonl"))?;
            let mapped_dir = mapped_dir.parent().expect("file has parent").to_path_buf();
            for name in ["val.jsonl", "test.jsonl", "clean.jsonl"] {
                pm.alloc_output(&a.out_dir.join(name))?;
            }
            a.out_dir = mapped_dir;
            a.manifest = None;
        }
        Command::Corrupt(a) => {
            a.input = pm.resolve_input(&a.input)?;
            out(pm, &mut a.out)?;
            if let Some(log) = &mut a.log {
                originals.push(log.clone());
                *log = pm.alloc_output(log)?;
            }
            a.manifest = None;
        }
        Command::Train(a) => {
            if let Some(c) = &mut a.config {
                *c = pm.resolve_input(c)?;
            }
            a.train = pm.resolve_input(&a.train)?;
            a.val = pm.resolve_input(&a.val)?;
            if let Some(c) = &mut a.clean {
                *c = pm.resolve_input(c)?;
            }
            for name in ["best.ckpt.json", "final.ckpt.json", "history.csv", "train-config.json"] {
                originals.push(a.out.join(name));
            }
            let mapped = pm.alloc_output(&a.out.join("best.ckpt.json"))?;
            for name in ["final.ckpt.json", "history.csv", "train-config.json"] {
                pm.alloc_output(&a.out.join(name))?;
            }
            a.out = mapped.parent().expect("file has parent").to_path_buf();
            a.manifest = None;
            a.quiet = true;
        }
        Command::Eval(a) => {
            a.ckpt = pm.resolve_input(&a.ckpt)?;
            a.test = pm.resolve_input(&a.test)?;
            out(pm, &mut a.out)?;
            a.manifest = None;
        }
        Command::Diagnose(a) => {
            a.clean_ckpt = pm.resolve_input(&a.clean_ckpt)?;
            a.time_ckpt = pm.resolve_input(&a.time_ckpt)?;
            a.label_ckpt = pm.resolve_input(&a.label_ckpt)?;
            a.both_ckpt = pm.resolve_input(&a.both_ckpt)?;
            a.probe = pm.resolve_input(&a.probe)?;
            out(pm, &mut a.out)?;
            a.manifest = None;
        }
        Command::Sweep(a) => {
            a.config = pm.resolve_input(&a.config)?;
            originals.push(a.out.join("results.csv"));
            let mapped = pm.alloc_output(&a.out.join("results.csv"))?;
            a.out = mapped.parent().expect("file has parent").to_path_buf();
            a.manifest = None;
        }
        Command::SweepCell(_) | Command::VerifyManifest(_) => {
            bail!("manifest contains a non-replayable command");
        }
    }
    Ok(originals)
}

fn run_verify_manifest(args: VerifyManifestArgs) -> Result<()> {
    require_exists(&args.manifest)?;
    let manifest = Manifest::load(&args.manifest)?;
    if manifest.entries.is_empty() {
        bail!(UsageError("manifest has no entries".into()));
    }

    if !args.replay {
        let (lines, mismatches) = manifest::verify_hashes(&manifest)?;
        for line in &lines {
            println!("{line}");
        }
        if mismatches > 0 {
            bail!("{mismatches} file(s) differ from the manifest");
        }
        println!("manifest verified: {} steps", manifest.entries.len());
        return Ok(());
    }

    let workdir = args
        .workdir
        .clone()
        .unwrap_or_else(|| std::env::temp_dir().join("rhawk-replay"));
    std::fs::create_dir_all(&workdir)?;
    let mut pm = PathMap::new(workdir);
    let mut mismatches = 0usize;
    for (i, entry) in manifest.entries.iter().enumerate() {
        let mut cmd: Command = serde_json::from_value(entry.args.clone())
            .with_context(|| format!("step {i}: cannot parse recorded command"))?;
        let originals = remap_command(&mut cmd, &mut pm)?;
        run_command(cmd, false).with_context(|| format!("replaying step {i} {}", entry.command))?;
        for original in &originals {
            let key = original.display().to_string();
            let Some(recorded) = entry.outputs.get(&key) else {
                continue;
            };
            let replayed = pm
                .replayed_output(original)
                .ok_or_else(|| anyhow!("step {i}: no replay mapping for {key}"))?;
            let got = manifest::hash_file(replayed)?;
            if &got != recorded {
                println!("[MISMATCH] step {i} {}: {key} replay {got} != recorded {recorded}", entry.command);
                mismatches += 1;
            } else {
                println!("[OK] step {i} {}: {key}", entry.command);
            }
        }
    }
    if mismatches > 0 {
        bail!("{mismatches} replayed output(s) differ from the manifest");
    }
    println!("replay verified: {} steps", manifest.entries.len());
    Ok(())
}
