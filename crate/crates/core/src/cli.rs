//! Command-line front end.
//!
//! Every command resolves its configuration as built-in defaults, then the
//! `--config` TOML file, then flags (with `TAILSAMPLER_SEED` standing in
//! for an absent `--seed`). Each command that writes files also writes a
//! `manifest.json` with the resolved config and SHA-256 digests of its
//! inputs and outputs. Paths in the manifest are relative to `--out-dir`,
//! so reruns into different directories produce identical bytes.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    compute_bins, ingest_annotations, AnnotationFormat, Bin, BinThresholds, ClassBins, Dataset,
    DatasetError, IngestOptions,
};
use crate::membank::derive_targets;
use crate::reference;
use crate::rfs::{self, RepeatPlan, RfsConfig};
use crate::sim::{self, compare_strategies, CompareError, OpOrder, SimConfig, SimError, SimulationReport, Strategy};
use crate::synth::{self, SynthConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values, detected before any compute. Exit 2.
    Usage(String),
    /// Unreadable or invalid input data. Exit 2.
    Input(String),
    /// Failure while computing or writing outputs. Exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Thresholds { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Usage(e.to_string()),
            SimError::EmptyDataset | SimError::Unbinned(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CompareError> for CliError {
    fn from(e: CompareError) -> Self {
        match e {
            CompareError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "tailsampler", version, about = "Image-level and object-level resampling analysis for long-tailed detection data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-class statistics, f(c) and rare/common/frequent bins.
    Analyze(DataArgs),
    /// Per-class and per-image repeat factors as CSV.
    RfsPlan(RfsPlanArgs),
    /// Run the training-loop simulation for one strategy.
    Simulate(SimulateArgs),
    /// Side-by-side tables from two or more simulation reports.
    Compare(CompareArgs),
    /// Write a synthetic long-tailed dataset as COCO/LVIS JSON.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// COCO/LVIS annotation file. Without it, the synthetic dataset from
    /// the config file (or the built-in reference dataset) is used.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<AnnotationFormat>,
    /// Reject out-of-bounds boxes instead of clamping them.
    #[arg(long)]
    pub strict: bool,
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed. For analyze/rfs-plan/generate this seeds the synthetic
    /// dataset; for simulate it seeds the run.
    #[arg(long, env = "TAILSAMPLER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RfsPlanArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub rfs_t: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Samples per present targeted class: `20`, `5,10,20` or `5..30[:step]`.
    #[arg(long = "x")]
    pub x: Option<String>,
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub target_threshold: Option<u64>,
    #[arg(long)]
    pub rfs_t: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Simulation report JSON files; the first is the reference.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "TAILSAMPLER_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_format(s: &str) -> std::result::Result<AnnotationFormat, String> {
    s.parse()
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse()
}

/// Parses `20`, `5,10,20` or `5..30` / `5..30:5` (inclusive) into positive
/// sample counts.
pub fn parse_x_spec(spec: &str) -> Result<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid --x `{spec}`: expected N, N,M,... or A..B[:STEP] with positive values"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let values = if let Some((a, rest)) = spec.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, step)) => (num(b)?, num(step)?),
            None => (num(rest)?, 1),
        };
        let a = num(a)?;
        if step == 0 || a > b {
            return Err(bad());
        }
        (a..=b).step_by(step).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.contains(&0) {
        return Err(bad());
    }
    Ok(values)
}

// ----------------------------------------------------------------------
// Config file
// ----------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub format: Option<String>,
    pub strict: Option<bool>,
    pub bins: Option<BinsFile>,
    pub synth: Option<SynthConfig>,
    pub sim: Option<SimFile>,
    pub rfs: Option<RfsFile>,
    pub bank: Option<BankFile>,
    pub proxy: Option<ProxyFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinsFile {
    pub rare_max: Option<u64>,
    pub common_max: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFile {
    pub strategy: Option<Strategy>,
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub x: Option<usize>,
    pub op_order: Option<OpOrder>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfsFile {
    pub t: Option<f64>,
    pub enabled: Option<bool>,
    pub rounding_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankFile {
    pub capacity: Option<usize>,
    pub target_threshold: Option<u64>,
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyFile {
    pub class_prototype_scale: Option<f64>,
    pub drift_rate: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub box_jitter: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<(FileConfig, Vec<InputDigest>)> {
    let Some(path) = path else {
        return Ok((FileConfig::default(), Vec::new()));
    };
    let bytes = fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CliError::Usage(format!("config {} is not UTF-8: {e}", path.display())))?;
    let cfg: FileConfig = toml::from_str(text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok((cfg, vec![InputDigest::of_bytes(path, &bytes)]))
}

// ----------------------------------------------------------------------
// Dataset resolution
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    File {
        path: PathBuf,
        format: AnnotationFormat,
        strict: bool,
    },
    Synthetic(SynthConfig),
}

impl DatasetSource {
    fn is_reference(&self) -> bool {
        matches!(self, DatasetSource::Synthetic(c) if *c == reference::synth_config())
    }
}

struct LoadedData {
    source: DatasetSource,
    thresholds: BinThresholds,
    dataset: Dataset,
    bins: ClassBins,
    inputs: Vec<InputDigest>,
}

/// Resolves where the dataset comes from and the bin thresholds, without
/// reading or generating anything yet.
fn resolve_source(
    args: &DataArgs,
    file: &FileConfig,
    synth_seed: Option<u64>,
) -> Result<(DatasetSource, BinThresholds)> {
    let format = match (&args.format, &file.format) {
        (Some(f), _) => *f,
        (None, Some(s)) => s.parse().map_err(CliError::Usage)?,
        (None, None) => AnnotationFormat::LvisCocoJson,
    };
    let strict = args.strict || file.strict.unwrap_or(false);
    let source = match args.dataset.as_ref().or(file.dataset.as_ref()) {
        Some(path) => DatasetSource::File {
            path: path.clone(),
            format,
            strict,
        },
        None => {
            let mut cfg = file.synth.clone().unwrap_or_else(reference::synth_config);
            if let Some(seed) = synth_seed {
                cfg.seed = seed;
            }
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            DatasetSource::Synthetic(cfg)
        }
    };
    let defaults = BinThresholds::default();
    let bins = file.bins.as_ref();
    let thresholds = BinThresholds::new(
        bins.and_then(|b| b.rare_max).unwrap_or(defaults.rare_max()),
        bins.and_then(|b| b.common_max).unwrap_or(defaults.common_max()),
    )?;
    Ok((source, thresholds))
}

fn load_dataset(source: DatasetSource, thresholds: BinThresholds) -> Result<LoadedData> {
    let (dataset, inputs) = match &source {
        DatasetSource::File {
            path,
            format,
            strict,
        } => {
            let bytes = fs::read(path).map_err(|e| {
                CliError::Input(format!("cannot read dataset {}: {e}", path.display()))
            })?;
            let ds = ingest_annotations(path, *format, IngestOptions { strict: *strict })?;
            (ds, vec![InputDigest::of_bytes(path, &bytes)])
        }
        DatasetSource::Synthetic(cfg) => (
            synth::generate(cfg).map_err(|e| CliError::Usage(e.to_string()))?,
            Vec::new(),
        ),
    };
    let bins = compute_bins(&dataset.index, thresholds);
    Ok(LoadedData {
        source,
        thresholds,
        dataset,
        bins,
        inputs,
    })
}

// ----------------------------------------------------------------------
// Manifest
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    fn of_bytes(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Written alongside every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<InputDigest>,
}

struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    fn create(path: Option<&Path>) -> Result<Self> {
        let root = path.map_or_else(|| PathBuf::from("out"), Path::to_path_buf);
        fs::create_dir_all(&root)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root,
            written: Vec::new(),
        })
    }

    fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        fs::write(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(rel.as_ref().to_path_buf());
        Ok(path)
    }

    fn track(&mut self, absolute: &[PathBuf]) {
        for p in absolute {
            if let Ok(rel) = p.strip_prefix(&self.root) {
                self.written.push(rel.to_path_buf());
            }
        }
    }

    fn finish(
        mut self,
        command: &str,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: Vec<InputDigest>,
    ) -> Result<PathBuf> {
        self.written.sort();
        self.written.dedup();
        let mut outputs = Vec::with_capacity(self.written.len());
        for rel in &self.written {
            let path = self.root.join(rel);
            let bytes = fs::read(&path)
                .map_err(|e| CliError::Runtime(format!("cannot read back {}: {e}", path.display())))?;
            outputs.push(InputDigest {
                path: rel.display().to_string(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs,
            outputs,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.root.join("manifest.json");
        fs::write(&path, json)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(buf)
}

// ----------------------------------------------------------------------
// Commands
// ----------------------------------------------------------------------

pub fn cmd_analyze(args: &DataArgs, out: &mut dyn Write) -> Result<()> {
    let (file, mut inputs) = load_config(args.config.as_deref())?;
    let seed = args.seed.or(file.seed);
    let (source, thresholds) = resolve_source(args, &file, seed)?;
    let data = load_dataset(source, thresholds)?;
    inputs.extend(data.inputs.iter().cloned());
    let ds = &data.dataset;
    let bins = &data.bins;
    let objects: usize = ds.records.iter().map(|r| r.objects.len()).sum();

    let report = (|| -> io::Result<()> {
        writeln!(out, "dataset digest: {}", ds.digest())?;
        writeln!(out, "images: {}", ds.index.num_images())?;
        writeln!(out, "objects: {objects}")?;
        writeln!(out, "classes: {}", ds.index.num_classes())?;
        writeln!(
            out,
            "bins (rare <= {} < common <= {} < frequent): rare={} common={} frequent={}",
            thresholds.rare_max(),
            thresholds.common_max(),
            bins.rare.len(),
            bins.common.len(),
            bins.frequent.len()
        )
    })();
    report.map_err(|e| CliError::Runtime(e.to_string()))?;

    if let Some(dir) = &args.out_dir {
        let mut dir = OutDir::create(Some(dir))?;
        dir.write("index.json", ds.index.to_canonical_json().as_bytes())?;
        let classes = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["class_id", "image_count", "instance_count", "f", "bin"])?;
            for s in ds.index.classes() {
                let bin = bins.bin_of(s.class_id).map_or("", Bin::as_str);
                w.write_record([
                    s.class_id.to_string(),
                    s.image_count.to_string(),
                    s.instance_count.to_string(),
                    s.image_fraction.to_string(),
                    bin.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?;
        dir.write("classes.csv", &classes)?;
        dir.write(
            "bins.json",
            serde_json::to_string_pretty(bins).expect("bins serialize").as_bytes(),
        )?;
        let config = serde_json::json!({
            "dataset": data.source,
            "bins": data.thresholds,
            "dataset_digest": ds.digest(),
        });
        dir.finish("analyze", seed, config, inputs)?;
    }
    Ok(())
}

pub fn cmd_rfs_plan(args: &RfsPlanArgs, out: &mut dyn Write) -> Result<()> {
    let (file, mut inputs) = load_config(args.data.config.as_deref())?;
    let seed = args.data.seed.or(file.seed);
    let (source, thresholds) = resolve_source(&args.data, &file, seed)?;
    let mut rfs_cfg = RfsConfig {
        t: if source.is_reference() { reference::RFS_T } else { RfsConfig::default().t },
        ..RfsConfig::default()
    };
    if let Some(t) = file.rfs.as_ref().and_then(|r| r.t) {
        rfs_cfg.t = t;
    }
    if let Some(t) = args.rfs_t {
        rfs_cfg.t = t;
    }
    rfs_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let data = load_dataset(source, thresholds)?;
    inputs.extend(data.inputs.iter().cloned());
    let plan = RepeatPlan::build(&data.dataset, &rfs_cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let class_csv = csv_bytes(|buf| rfs::write_class_csv(&plan, &data.dataset, buf))?;
    let image_csv = csv_bytes(|buf| rfs::write_image_csv(&plan, buf))?;

    let repeated = plan.image_repeat().values().filter(|&&r| r > 1.0).count();
    writeln!(
        out,
        "t={} classes={} images={} repeated_images={} expected_epoch_len={:.3}",
        rfs_cfg.t,
        plan.class_repeat().len(),
        plan.image_repeat().len(),
        repeated,
        plan.expected_epoch_len()
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut dir = OutDir::create(args.data.out_dir.as_deref())?;
    dir.write("class_repeat.csv", &class_csv)?;
    dir.write("image_repeat.csv", &image_csv)?;
    let config = serde_json::json!({
        "dataset": data.source,
        "rfs_t": rfs_cfg.t,
        "dataset_digest": data.dataset.digest(),
    });
    dir.finish("rfs-plan", seed, config, inputs)?;
    Ok(())
}

/// Resolves the full simulation config for `args` (defaults < file <
/// flags) and validates it.
pub fn resolve_sim_config(
    args: &SimulateArgs,
    file: &FileConfig,
    source: &DatasetSource,
) -> Result<(SimConfig, Vec<usize>)> {
    let strategy = args
        .strategy
        .or(file.sim.as_ref().and_then(|s| s.strategy))
        .ok_or_else(|| CliError::Usage("--strategy is required (baseline, rfs, ocs, rio, naive_repeat)".into()))?;
    let mut cfg = if source.is_reference() {
        reference::sim_config(strategy)
    } else {
        SimConfig::for_strategy(strategy)
    };

    if let Some(seed) = file.seed {
        cfg.seed = seed;
    }
    let mut xs = vec![cfg.x];
    if let Some(s) = &file.sim {
        if let Some(v) = s.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = s.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = s.x {
            xs = vec![v];
        }
        if let Some(v) = s.op_order {
            cfg.op_order = v;
        }
    }
    if let Some(r) = &file.rfs {
        if let Some(v) = r.t {
            cfg.rfs.t = v;
        }
        if let Some(v) = r.enabled {
            cfg.rfs.enabled = v;
        }
        if let Some(v) = r.rounding_seed {
            cfg.rfs.rounding_seed = v;
        }
    }
    if let Some(b) = &file.bank {
        if let Some(v) = b.capacity {
            cfg.bank.capacity = v;
        }
        if let Some(v) = b.target_threshold {
            cfg.bank.target_threshold = v;
        }
        if let Some(v) = b.feature_dim {
            cfg.bank.feature_dim = v;
        }
    }
    if let Some(p) = &file.proxy {
        if let Some(v) = p.class_prototype_scale {
            cfg.proxy.class_prototype_scale = v;
        }
        if let Some(v) = p.drift_rate {
            cfg.proxy.drift_rate = v;
        }
        if let Some(v) = p.noise_sigma {
            cfg.proxy.noise_sigma = v;
        }
        if let Some(v) = p.box_jitter {
            cfg.proxy.box_jitter = v;
        }
    }

    if let Some(v) = args.data.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(spec) = &args.x {
        xs = parse_x_spec(spec)?;
    }
    if let Some(v) = args.capacity {
        cfg.bank.capacity = v;
    }
    if let Some(v) = args.target_threshold {
        cfg.bank.target_threshold = v;
    }
    if let Some(v) = args.rfs_t {
        cfg.rfs.t = v;
    }
    cfg.proxy.feature_dim = cfg.bank.feature_dim;
    cfg.x = xs[0];
    cfg.validate()?;
    Ok((cfg, xs))
}

fn summary_line(report: &SimulationReport) -> String {
    let mut s = format!("{} x={}:", report.meta.strategy, report.meta.x);
    for bin in Bin::ALL {
        let t = report.bin_total(bin);
        s.push_str(&format!(
            " {bin} gt={} aug={} eff={} updates={}",
            t.gt_instances,
            t.augmented_instances,
            t.effective_instances(),
            t.bank_updates
        ));
    }
    s
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let (file, mut inputs) = load_config(args.data.config.as_deref())?;
    // --seed seeds the run here, so the synthetic dataset keeps its own seed
    let (source, thresholds) = resolve_source(&args.data, &file, None)?;
    let (cfg, xs) = resolve_sim_config(args, &file, &source)?;

    let data = load_dataset(source, thresholds)?;
    inputs.extend(data.inputs.iter().cloned());
    let configs: Vec<SimConfig> = xs.iter().map(|&x| SimConfig { x, ..cfg.clone() }).collect();
    let reports: Vec<SimulationReport> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(|| sim::run(&data.dataset, &data.bins, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;

    let mut dir = OutDir::create(args.data.out_dir.as_deref())?;
    let sweep = reports.len() > 1;
    for report in &reports {
        let sub = if sweep { PathBuf::from(format!("x{}", report.meta.x)) } else { PathBuf::new() };
        dir.write(sub.join("report.json"), report.to_json().as_bytes())?;
        let table = compare_strategies(std::slice::from_ref(report))?;
        let written = table.write_csv(&dir.root.join(&sub))?;
        dir.track(&written);
        writeln!(out, "{}", summary_line(report)).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if sweep {
        let sweep_csv = csv_bytes(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["x", "rare_gt", "rare_augmented", "rare_effective", "common_augmented", "frequent_augmented"])?;
            for r in &reports {
                let rare = r.bin_total(Bin::Rare);
                w.write_record([
                    r.meta.x.to_string(),
                    rare.gt_instances.to_string(),
                    rare.augmented_instances.to_string(),
                    rare.effective_instances().to_string(),
                    r.bin_total(Bin::Common).augmented_instances.to_string(),
                    r.bin_total(Bin::Frequent).augmented_instances.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?;
        dir.write("sweep.csv", &sweep_csv)?;
    }
    let targets = derive_targets(&data.dataset.index, cfg.bank.target_threshold).len();
    let config = serde_json::json!({
        "dataset": data.source,
        "bins": data.thresholds,
        "dataset_digest": data.dataset.digest(),
        "sim": cfg,
        "x_values": xs,
        "targeted_classes": targets,
    });
    dir.finish("simulate", Some(cfg.seed), config, inputs)?;
    Ok(())
}

pub fn cmd_compare(args: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    if args.reports.len() < 2 {
        return Err(CliError::Usage("compare needs at least two reports".into()));
    }
    let mut reports = Vec::with_capacity(args.reports.len());
    let mut inputs = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Input(format!("cannot read report {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| CliError::Input(format!("report {} is not UTF-8: {e}", path.display())))?;
        let report = SimulationReport::from_json(text)
            .map_err(|e| CliError::Input(format!("invalid report {}: {e}", path.display())))?;
        reports.push(report);
        inputs.push(InputDigest::of_bytes(path, &bytes));
    }
    let table = compare_strategies(&reports)?;

    let print = (|| -> io::Result<()> {
        writeln!(out, "report strategy bin gt/epoch aug/epoch eff/epoch gt_change% eff_change%")?;
        for r in &table.fig4b {
            writeln!(
                out,
                "{} {} {} {:.1} {:.1} {:.1} {:+.2} {:+.2}",
                r.report,
                r.strategy,
                r.bin,
                r.gt_per_epoch,
                r.augmented_per_epoch,
                r.effective_per_epoch,
                r.gt_change_pct,
                r.effective_change_pct
            )?;
        }
        Ok(())
    })();
    print.map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut dir = OutDir::create(args.out_dir.as_deref())?;
    let written = table.write_csv(&dir.root)?;
    dir.track(&written);
    let config = serde_json::json!({
        "strategies": reports.iter().map(|r| r.meta.strategy).collect::<Vec<_>>(),
        "dataset_digest": reports[0].meta.dataset_digest,
    });
    dir.finish("compare", None, config, inputs)?;
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (file, inputs) = load_config(args.config.as_deref())?;
    let mut cfg = file.synth.clone().unwrap_or_else(reference::synth_config);
    if let Some(seed) = args.seed.or(file.seed) {
        cfg.seed = seed;
    }
    let ds = synth::generate(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut dir = OutDir::create(args.out_dir.as_deref())?;
    dir.write("dataset.json", ds.to_coco_json().as_bytes())?;
    dir.write("index.json", ds.index.to_canonical_json().as_bytes())?;
    writeln!(
        out,
        "generated {} images, {} classes, digest {}",
        ds.index.num_images(),
        ds.index.num_classes(),
        ds.digest()
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let config = serde_json::json!({ "synth": cfg, "dataset_digest": ds.digest() });
    dir.finish("generate", Some(cfg.seed), config, inputs)?;
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::RfsPlan(a) => cmd_rfs_plan(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Generate(a) => cmd_generate(a, out),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tailsampler: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_spec_forms() {
        assert_eq!(parse_x_spec("20").unwrap(), [20]);
        assert_eq!(parse_x_spec("5,10,20").unwrap(), [5, 10, 20]);
        assert_eq!(parse_x_spec("5..8").unwrap(), [5, 6, 7, 8]);
        assert_eq!(parse_x_spec("5..30:5").unwrap(), [5, 10, 15, 20, 25, 30]);
        for bad in ["0", "-1", "5..3", "5..30:0", "a", "", "3,0"] {
            assert!(matches!(parse_x_spec(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: FileConfig = toml::from_str(
            r#"
            seed = 3
            [sim]
            strategy = "ocs"
            epochs = 4
            x = 7
            [bank]
            capacity = 10
            "#,
        )
        .unwrap();
        let source = DatasetSource::Synthetic(reference::synth_config());
        let args = SimulateArgs {
            data: DataArgs {
                dataset: None,
                format: None,
                strict: false,
                config: None,
                seed: None,
                out_dir: None,
            },
            strategy: None,
            epochs: Some(2),
            batch_size: None,
            x: None,
            capacity: None,
            target_threshold: None,
            rfs_t: None,
        };
        let (cfg, xs) = resolve_sim_config(&args, &file, &source).unwrap();
        assert_eq!(cfg.strategy, Strategy::Ocs);
        assert!(!cfg.rfs.enabled);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(xs, [7]);
        assert_eq!(cfg.bank.capacity, 10);
        assert_eq!(cfg.rfs.t, reference::RFS_T);
        assert_eq!(cfg.batch_size, 16);

        let args = SimulateArgs {
            x: Some("0".into()),
            ..args
        };
        assert!(matches!(resolve_sim_config(&args, &file, &source), Err(CliError::Usage(_))));
    }

    #[test]
    fn conflicting_file_config_is_a_usage_error() {
        let file: FileConfig = toml::from_str("[sim]\nstrategy = \"ocs\"\n[rfs]\nenabled = true\n").unwrap();
        let source = DatasetSource::Synthetic(reference::synth_config());
        let args = SimulateArgs {
            data: DataArgs {
                dataset: None,
                format: None,
                strict: false,
                config: None,
                seed: None,
                out_dir: None,
            },
            strategy: None,
            epochs: None,
            batch_size: None,
            x: None,
            capacity: None,
            target_threshold: None,
            rfs_t: None,
        };
        let err = resolve_sim_config(&args, &file, &source).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(toml::from_str::<FileConfig>("[sim]\nbogus = 1\n").is_err());
    }
}
