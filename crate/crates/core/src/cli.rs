//! Command-line front end: convert, synth, train, eval, ablate, explain.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{KvConfig, KvWriter};
use crate::data::{
    filter_mi_subtypes, load_ptbxl, read_container, split_folds, split_subtype_study, synth_generate, write_container,
    DatasetManifest, EcgRecord, ScpMapping, Splits, SynthConfig,
};
use crate::error::{Error, Result};
use crate::explain::{build_report, render_svg};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::model::{ForwardCtx, ModelConfig};
use crate::numcore::{Checkpoint, CheckpointEntry, Tensor};
use crate::preprocess::{apply_standardization, fit_standardization, select_lead_set, LeadSet, StandardizationStats};
use crate::training::{evaluate, init_model, load_model, train, LabelScheme, TrainConfig};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "IMLENET_DATA_DIR";
pub const DEFAULT_CONTAINER: &str = "dataset.imld";
pub const CHECKPOINT_FILE: &str = "checkpoint.imln";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";
const STD_MEAN: &str = "__standardization__/mean";
const STD_STD: &str = "__standardization__/std";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "imlenet", version, about = "Hierarchical attention ECG classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a PTB-XL directory into an IMLD container.
    Convert {
        /// PTB-XL root (defaults to $IMLENET_DATA_DIR).
        #[arg(long)]
        ptbxl_dir: Option<PathBuf>,
        /// Metadata table (default: <ptbxl_dir>/ptbxl_database.csv).
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Statement definitions (default: <ptbxl_dir>/scp_statements.csv).
        #[arg(long)]
        statements: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, history and resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config written by `train` (default: next to the checkpoint).
        #[arg(long)]
        run_config: Option<PathBuf>,
        /// Container (default: the one recorded in the run config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per lead subset.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention report and SVG for one record.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        run_config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        record: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Container (default: $IMLENET_DATA_DIR/dataset.imld).
    #[arg(long)]
    data: Option<PathBuf>,
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: LabelScheme,
    /// `None` keeps every lead in the container.
    pub lead_set: Option<LeadSet>,
    /// Fraction of the last training fold held out for the subtype task.
    pub validation_fraction: f64,
    pub threshold: f64,
    pub data: PathBuf,
}

impl RunConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut task = LabelScheme::default();
        if let Some(raw) = kv.take_raw("task") {
            task = raw.parse()?;
        }
        if !kv.contains("num_classes") {
            kv.set("num_classes", task.num_classes());
        }
        let model = ModelConfig::take_from(kv)?;
        let train = TrainConfig::take_from(kv)?;
        let lead_set = match kv.take_raw("lead_set").as_deref().map(str::trim) {
            None | Some("none") => None,
            Some(raw) => Some(raw.parse().map_err(|e: Error| Error::config(e.to_string()))?),
        };
        let mut validation_fraction = 0.25;
        kv.take("validation_fraction", &mut validation_fraction)?;
        let mut threshold = DEFAULT_THRESHOLD;
        kv.take("threshold", &mut threshold)?;
        let mut data = PathBuf::new();
        if let Some(raw) = kv.take_raw("data") {
            data = PathBuf::from(raw);
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
        }
        Ok(Self { model, train, task, lead_set, validation_fraction, threshold, data })
    }

    pub fn to_kv_string(&self) -> String {
        let mut w = KvWriter::new();
        w.section("run")
            .kv("data", self.data.display())
            .kv("task", self.task)
            .kv("lead_set", self.lead_set.map_or("none", LeadSet::name))
            .kv("validation_fraction", self.validation_fraction)
            .kv("threshold", self.threshold);
        self.model.write_to(&mut w);
        self.train.write_to(&mut w);
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KvConfig::load(path)?;
        let c = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }
}

fn default_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from)
}

fn resolve_data(explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .or_else(|| default_data_dir().map(|d| d.join(DEFAULT_CONTAINER)))
        .ok_or_else(|| Error::config(format!("no --data given and {DATA_DIR_ENV} is unset")))
}

fn resolve_run(args: RunArgs) -> Result<RunConfig> {
    let mut kv = match &args.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = args.seed {
        kv.set("seed", seed);
    }
    if let Some(d) = args.data {
        kv.set("data", d.display());
    }
    if !kv.contains("data") {
        kv.set("data", resolve_data(None)?.display());
    }
    let run = RunConfig::from_kv(&mut kv)?;
    kv.finish()?;
    if !run.data.exists() {
        return Err(Error::input(format!("data file {} does not exist", run.data.display())));
    }
    Ok(run)
}

/// Lead selection followed by the task's split.
pub fn prepare_splits(records: Vec<EcgRecord>, run: &RunConfig) -> Result<Splits> {
    let records = match run.lead_set {
        Some(set) => records.iter().map(|r| select_lead_set(r, set)).collect::<Result<Vec<_>>>()?,
        None => records,
    };
    match run.task {
        LabelScheme::Superclasses => split_folds(records.into_iter().filter(|r| r.labels.any()).collect()),
        LabelScheme::MiSubtypes => {
            split_subtype_study(filter_mi_subtypes(records, run.train.seed)?, run.validation_fraction)
        }
    }
}

fn standardize_all(records: &[EcgRecord], stats: &StandardizationStats) -> Result<Vec<EcgRecord>> {
    records.iter().map(|r| apply_standardization(r, stats)).collect()
}

fn stats_entries(stats: &StandardizationStats) -> [CheckpointEntry; 2] {
    let m = stats.mean.len();
    [
        CheckpointEntry { name: STD_MEAN.into(), shape: vec![m], data: stats.mean.clone() },
        CheckpointEntry { name: STD_STD.into(), shape: vec![m], data: stats.std.clone() },
    ]
}

fn stats_from_checkpoint(ckpt: &Checkpoint) -> Result<StandardizationStats> {
    match (ckpt.get(STD_MEAN), ckpt.get(STD_STD)) {
        (Some(m), Some(s)) => Ok(StandardizationStats { mean: m.data.clone(), std: s.data.clone() }),
        _ => Err(Error::input("checkpoint lacks standardization statistics")),
    }
}

/// Train on the configured data and write checkpoint, history and run
/// config into `out`. Returns the test-split report.
pub fn run_training(run: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<Option<MetricsReport>> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(RUN_CONFIG_FILE), run.to_kv_string())?;
    let splits = prepare_splits(read_container(&run.data)?, run)?;
    let stats = fit_standardization(&splits.train)?;
    let train_set = standardize_all(&splits.train, &stats)?;
    let val_set = standardize_all(&splits.validation, &stats)?;
    let test_set = standardize_all(&splits.test, &stats)?;
    let _ = writeln!(
        stdout,
        "training on {} records ({} validation, {} test), {} leads",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        train_set.first().map_or(0, EcgRecord::num_leads)
    );

    let mut model = init_model::<f64>(run.model.clone(), run.train.seed)?;
    let mut outcome = train(&mut model, &train_set, &val_set, &run.train, run.task)?;
    outcome.best.entries.extend(stats_entries(&stats));
    outcome.best.write(&out.join(CHECKPOINT_FILE))?;
    outcome.history.write_csv(&out.join(HISTORY_FILE))?;
    let _ = writeln!(
        stdout,
        "{} epochs, best epoch {}",
        outcome.history.epochs.len(),
        outcome.best_epoch.map_or_else(|| "-".into(), |e| e.to_string())
    );
    if test_set.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(&model, &test_set, run.threshold, run.task)?))
}

fn run_config_path(checkpoint: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG_FILE))
}

fn select_split(splits: Splits, name: &str) -> Result<Vec<EcgRecord>> {
    match name {
        "train" => Ok(splits.train),
        "validation" | "val" => Ok(splits.validation),
        "test" => Ok(splits.test),
        "all" => Ok([splits.train, splits.validation, splits.test].concat()),
        _ => Err(Error::config(format!("unknown split {name:?} (train, validation, test, all)"))),
    }
}

fn write_report(report: &MetricsReport, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let _ = write!(stdout, "{}", report.to_table());
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, report.to_json())?;
    }
    Ok(())
}

fn ablation_table(rows: &[(LeadSet, usize, MetricsReport)]) -> String {
    let fmt = |x: Option<f64>| x.map_or_else(|| "".into(), |v| format!("{v:.4}"));
    let mut out = String::from("lead_set,num_leads,macro_auc,mean_accuracy,max_f1");
    if let Some((_, _, r)) = rows.first() {
        for c in &r.class_names {
            out.push_str(&format!(",auc_{c}"));
        }
    }
    out.push('\n');
    for (set, m, r) in rows {
        out.push_str(&format!(
            "{},{m},{},{},{}",
            set.name(),
            fmt(r.macro_auc),
            fmt(Some(r.mean_accuracy)),
            fmt(r.max_f1)
        ));
        for a in &r.auc {
            out.push_str(&format!(",{}", fmt(*a)));
        }
        out.push('\n');
    }
    out
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Convert { ptbxl_dir, metadata, statements, out } => {
            let root = ptbxl_dir
                .or_else(default_data_dir)
                .ok_or_else(|| Error::config(format!("no --ptbxl-dir given and {DATA_DIR_ENV} is unset")))?;
            let manifest = DatasetManifest::load(&metadata.unwrap_or_else(|| root.join("ptbxl_database.csv")))?;
            let mapping = ScpMapping::load(&statements.unwrap_or_else(|| root.join("scp_statements.csv")))?;
            let records = load_ptbxl(&root, &manifest, &mapping)?;
            write_container(&out, &records)?;
            let _ = writeln!(stdout, "wrote {} records to {}", records.len(), out.display());
        }
        Command::Synth { config, seed, out } => {
            let mut kv = match &config {
                Some(p) => KvConfig::load(p)?,
                None => KvConfig::default(),
            };
            if let Some(s) = seed {
                kv.set("seed", s);
            }
            let cfg = SynthConfig::take_from(&mut kv)?;
            kv.finish()?;
            let records = synth_generate(&cfg)?;
            write_container(&out, &records)?;
            let mut w = KvWriter::new();
            cfg.write_to(&mut w);
            std::fs::write(out.with_extension("synth.txt"), w.finish())?;
            let _ = writeln!(stdout, "wrote {} synthetic records to {} (seed {})", records.len(), out.display(), cfg.seed);
        }
        Command::Train { run, out } => {
            let run = resolve_run(run)?;
            let _ = writeln!(stdout, "seed {}", run.train.seed);
            if let Some(report) = run_training(&run, &out, stdout)? {
                std::fs::write(out.join("test_metrics.json"), report.to_json())?;
                let _ = write!(stdout, "{}", report.to_table());
            }
        }
        Command::Eval { checkpoint, run_config, data, split, threshold, out } => {
            let run = RunConfig::load(&run_config_path(&checkpoint, run_config))?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            let stats = stats_from_checkpoint(&ckpt)?;
            let data = data.unwrap_or_else(|| run.data.clone());
            let records = select_split(prepare_splits(read_container(&data)?, &run)?, &split)?;
            let records = standardize_all(&records, &stats)?;
            let model = load_model::<f64>(run.model.clone(), &ckpt)?;
            let report = evaluate(&model, &records, threshold.unwrap_or(run.threshold), run.task)?;
            write_report(&report, out.as_deref(), stdout)?;
        }
        Command::Ablate { run, out } => {
            let base = resolve_run(run)?;
            let mut rows = Vec::new();
            for (i, set) in LeadSet::ALL.into_iter().enumerate() {
                let mut run = base.clone();
                run.lead_set = Some(set);
                run.train.seed = base.train.seed + i as u64;
                let _ = writeln!(stdout, "== {set} (seed {}) ==", run.train.seed);
                let report = run_training(&run, &out.join(set.name()), stdout)?
                    .ok_or_else(|| Error::input("ablation needs a non-empty test split"))?;
                rows.push((set, set.leads().len(), report));
            }
            let table = ablation_table(&rows);
            std::fs::write(out.join("ablation.csv"), &table)?;
            let _ = write!(stdout, "{table}");
        }
        Command::Explain { checkpoint, run_config, data, record, out } => {
            let run = RunConfig::load(&run_config_path(&checkpoint, run_config))?;
            let ckpt = Checkpoint::read(&checkpoint)?;
            let stats = stats_from_checkpoint(&ckpt)?;
            let data = data.unwrap_or_else(|| run.data.clone());
            let raw = read_container(&data)?
                .into_iter()
                .find(|r| r.record_id == record)
                .ok_or_else(|| Error::input(format!("record {record:?} not in {}", data.display())))?;
            let raw = match run.lead_set {
                Some(set) => select_lead_set(&raw, set)?,
                None => raw,
            };
            let input = apply_standardization(&raw, &stats)?;
            let model = load_model::<f64>(run.model.clone(), &ckpt)?;
            let x = Tensor::new(vec![input.num_leads(), input.num_samples()], input.signal.concat())?;
            let output = model.forward(&x, &mut ForwardCtx::eval())?;
            let report = build_report(&output, &raw, &run.model, &run.task.class_names())?;
            std::fs::create_dir_all(&out)?;
            let stem = record.replace(['/', '\\'], "_");
            std::fs::write(out.join(format!("{stem}_attention.json")), report.to_json()?)?;
            render_svg(&report, &raw, &out.join(format!("{stem}_attention.svg")))?;
            let _ = writeln!(stdout, "record {record}");
            for (name, g) in report.lead_names.iter().zip(&report.channel_importance) {
                let _ = writeln!(stdout, "  {name:<6} {g:.4}");
            }
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run_cli<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
