//! Command-line front end. Every run resolves its settings as
//! defaults < config file < `--set` overrides < flags and writes the result
//! next to its outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::critic::{Critic, SyntheticCritic};
use crate::error::Error;
use crate::featurize::{export_features, FeatureGrid};
use crate::model::{Model, ModelConfig};
use crate::msa::{parse_a3m, write_a3m, Msa};
use crate::protocols::{
    augment, calibrate, probe, zero_shot, AugmentationConfig, CalibrationConfig, ManifestRecord, OutputMode, ProbeConfig,
    DEFAULT_SEED,
};
use crate::synth::{synth_corpus, SyntheticFamilyConfig};
use crate::tensor::SeedStream;
use crate::training::{StepMetrics, TrainConfig, Trainer};
use crate::trim::{trim, TrimConfig};
use crate::verify::{run_criterion, CRITERIA};

pub const SEED_ENV: &str = "EVOGEN_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            e => CliError::Data(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "evogen", version, about = "Generative MSA model: curation, training and inference protocols")]
pub struct Cli {
    /// Root seed for every random stream
    #[arg(long, global = true, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    /// TOML file with sections [trim], [synth], [model], [train], [calibrate], [augment], [zeroshot], [probe]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config entry, e.g. `train.lr_peak=1e-3` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Filter and greedily subsample an alignment to a depth cap
    Trim(TrimArgs),
    /// Write the one-hot feature container of an alignment
    Featurize(FeaturizeArgs),
    /// Write a synthetic corpus of alignment families
    SynthData(SynthArgs),
    /// Pretrain on a corpus directory of A3M files
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint against the synthetic critic
    Finetune(FinetuneArgs),
    /// Depth-preserving reconstruction of an alignment
    Calibrate(CalibrateArgs),
    /// Generate a deeper virtual alignment from a shallow one
    Augment(AugmentArgs),
    /// Generate an alignment from a bare query
    Zeroshot(ZeroshotArgs),
    /// Subsample a deep pool and group critic predictions into ensembles
    Probe(ProbeArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Run the acceptance suite
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct TrimArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Depth cap [default: 128]
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Minimum row coverage [default: 0.5]
    #[arg(long)]
    pub cov_min: Option<f64>,
    /// Maximum identity to the query and between kept rows [default: 0.9]
    #[arg(long)]
    pub ident_max: Option<f64>,
    /// Minimum identity to the query [default: 0.2]
    #[arg(long)]
    pub ident_min: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory
    #[arg(short, long)]
    pub output: PathBuf,
    /// Number of families [default: 100]
    #[arg(long)]
    pub n_families: Option<usize>,
    /// Rows per family [default: 32]
    #[arg(long)]
    pub depth: Option<usize>,
    /// Columns per family [default: 48]
    #[arg(long)]
    pub length: Option<usize>,
    /// Fraction of conserved columns [default: 0.5]
    #[arg(long)]
    pub conserved_fraction: Option<f64>,
    /// Per-position mutation probability at variable columns [default: 0.5]
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    /// Gap and insertion probability at variable columns [default: 0.05]
    #[arg(long)]
    pub gap_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Desk,
    Toy,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Soft,
    Hard,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory of `.a3m` files
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for checkpoints and metrics
    #[arg(short, long)]
    pub output: PathBuf,
    /// Model size preset, refined by the [model] config section [default: full]
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    /// Start from these weights instead of a fresh initialization
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training steps [default: 150000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// MSAs per step [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 0.0005]
    #[arg(long)]
    pub lr_peak: Option<f64>,
    /// Linear warm-up steps [default: 3000]
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Cosine decay steps after warm-up [default: 100000]
    #[arg(long)]
    pub decay_steps: Option<u64>,
    /// Checkpoint interval in steps [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pretrained weights
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Fine-tuning steps [default: 50000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// MSAs per step [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Constant learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// What the critic receives [default: soft]
    #[arg(long, value_enum)]
    pub feed: Option<Mode>,
    /// Generated rows per MSA [default: 32]
    #[arg(long)]
    pub rows: Option<usize>,
    /// Hidden residue profile of the synthetic critic [default: query of the first corpus file]
    #[arg(long)]
    pub critic_profile: Option<String>,
    /// Checkpoint interval in steps [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ModelInput {
    /// Trained weights
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for trial files and the manifest
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelInput,
    /// Context ratios [default: 0.5,0.7,0.9]
    #[arg(long, value_delimiter = ',')]
    pub r_ctx: Option<Vec<f64>>,
    /// Trials per ratio [default: 5]
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelInput,
    /// Output depths including the query [default: 128]
    #[arg(long, value_delimiter = ',')]
    pub n_aug: Option<Vec<usize>>,
    /// Context ratios [default: 0.5,0.7,0.9]
    #[arg(long, value_delimiter = ',')]
    pub r_ctx: Option<Vec<f64>>,
    /// Trials per setting [default: 5]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Probabilities or sampled residues [default: soft]
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Args, Debug)]
pub struct ZeroshotArgs {
    /// Query sequence
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub query: Option<String>,
    /// Alignment or single-sequence file whose first row is the query
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelInput,
    /// Output depths including the query [default: 16,32,64]
    #[arg(long, value_delimiter = ',')]
    pub n_aug: Option<Vec<usize>>,
    /// Trials per depth [default: 2]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Probabilities or sampled residues [default: soft]
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    /// Deep alignment pool
    #[arg(short, long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub model: ModelInput,
    /// Pool trimming cap [default: 512]
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Subsample depths [default: 16,32,64]
    #[arg(long, value_delimiter = ',')]
    pub n_sub: Option<Vec<usize>>,
    /// Context ratios [default: 0.25,0.5,0.75]
    #[arg(long, value_delimiter = ',')]
    pub r_ctx: Option<Vec<f64>>,
    /// Trials per setting [default: 1]
    #[arg(long)]
    pub trials: Option<usize>,
    /// Structure similarity for joining an ensemble [default: 0.7]
    #[arg(long)]
    pub similarity_threshold: Option<f64>,
    /// Hidden profile of the synthetic critic [default: the query]
    #[arg(long)]
    pub critic_profile: Option<String>,
    /// Second profile, giving the critic two minima
    #[arg(long)]
    pub critic_alternate: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Criterion ids to run [default: all]
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<u32>>,
    /// Also write the results as JSON lines here
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

/// Parses and runs; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The layered settings of one run.
struct Layers {
    file: Map<String, Value>,
    overrides: Vec<(Vec<String>, Value)>,
    seed: u64,
    resolved: Map<String, Value>,
}

impl Layers {
    fn new(cli: &Cli) -> CliResult<Self> {
        let file = match &cli.config {
            None => Map::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                let v: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                match serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))? {
                    Value::Object(m) => m,
                    _ => return Err(CliError::Usage("config file must be a table".into())),
                }
            }
        };
        let mut overrides = Vec::new();
        for o in &cli.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            overrides.push((k.split('.').map(str::to_string).collect(), value));
        }
        Ok(Layers { file, overrides, seed: cli.seed, resolved: Map::new() })
    }

    fn has_section(&self, section: &str) -> bool {
        self.file.contains_key(section) || self.overrides.iter().any(|(k, _)| k[0] == section)
    }

    /// Resolves one section and records it.
    fn section<T: Serialize + DeserializeOwned>(&mut self, name: &str, defaults: T, flags: Value) -> CliResult<T> {
        let mut v = serde_json::to_value(defaults).map_err(Error::from)?;
        if let Some(f) = self.file.get(name) {
            merge(&mut v, f);
        }
        for (path, val) in &self.overrides {
            if path[0] == name {
                set_path(&mut v, &path[1..], val.clone());
            }
        }
        if !flags.is_null() {
            merge(&mut v, &strip_nulls(flags));
        }
        let out: T = serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("[{name}]: {e}")))?;
        self.resolved.insert(name.to_string(), v);
        Ok(out)
    }

    fn check_overrides(&self, known: &[&str]) -> CliResult<()> {
        for (path, _) in &self.overrides {
            if !known.contains(&path[0].as_str()) || path.len() < 2 {
                return Err(CliError::Usage(format!("override `{}` does not name a setting of this command", path.join("."))));
            }
        }
        Ok(())
    }

    fn record(&self, cli: &Cli, command: &str, path: &Path) -> CliResult<()> {
        let rec = json!({
            "command": command,
            "seed": self.seed,
            "config_file": cli.config.as_ref().map(|p| p.display().to_string()),
            "overrides": cli.overrides,
            "resolved": self.resolved,
        });
        fs::write(path, serde_json::to_string_pretty(&rec).map_err(Error::from)? + "\n")?;
        Ok(())
    }
}

fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn set_path(v: &mut Value, path: &[String], val: Value) {
    match path.split_first() {
        None => *v = val,
        Some((head, rest)) => {
            if !v.is_object() {
                *v = Value::Object(Map::new());
            }
            let slot = v.as_object_mut().expect("object").entry(head.clone()).or_insert(Value::Null);
            set_path(slot, rest, val);
        }
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect()),
        v => v,
    }
}

fn mode_name(m: Option<Mode>) -> Option<&'static str> {
    m.map(|m| match m {
        Mode::Soft => "soft",
        Mode::Hard => "hard",
    })
}

fn read_msa(path: &Path) -> CliResult<Msa> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))?;
    Ok(parse_a3m(&text)?)
}

fn write_features(grid: &FeatureGrid, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    export_features(grid, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn read_corpus(dir: &Path) -> CliResult<Vec<Msa>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "a3m"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(Error::EmptyInput));
    }
    paths.iter().map(|p| read_msa(p)).collect()
}

fn tokens_of(seq: &str) -> CliResult<Vec<usize>> {
    Ok(Msa::from_query("profile", seq)?.query().symbols.iter().map(|s| s.token() as usize).collect())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads a checkpoint. A [model] section or `--set model.*` override is
/// layered over the stored config and must then match it exactly.
fn load_model(layers: &mut Layers, path: &Path) -> CliResult<Model> {
    if !path.is_file() {
        return Err(CliError::Data(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("checkpoint {}", path.display())))));
    }
    let expected = if layers.has_section("model") {
        let stored = crate::tensor::read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))?;
        let base: ModelConfig = serde_json::from_str(&stored.config_json).map_err(Error::from)?;
        Some(layers.section("model", base, Value::Null)?)
    } else {
        None
    };
    let model = Model::load(path, expected.as_ref())?;
    layers.resolved.insert("model".into(), serde_json::to_value(&model.config).map_err(Error::from)?);
    Ok(model)
}

fn tag(x: f64) -> String {
    format!("{x}").replace('.', "p")
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut layers = Layers::new(cli)?;
    let seed = cli.seed;
    match &cli.command {
        Command::Trim(a) => {
            layers.check_overrides(&["trim"])?;
            let flags = json!({"n_max": a.n_max, "cov_min": a.cov_min, "ident_max": a.ident_max, "ident_min": a.ident_min});
            let cfg: TrimConfig = layers.section("trim", TrimConfig::default(), flags)?;
            cfg.validate()?;
            let out = trim(&read_msa(&a.input)?, &cfg);
            fs::write(&a.output, write_a3m(&out))?;
            layers.record(cli, "trim", &sidecar(&a.output))?;
            log::info!("kept {} rows", out.depth());
        }
        Command::Featurize(a) => {
            layers.check_overrides(&[])?;
            write_features(&FeatureGrid::from_msa(&read_msa(&a.input)?), &a.output)?;
            layers.record(cli, "featurize", &sidecar(&a.output))?;
        }
        Command::SynthData(a) => {
            layers.check_overrides(&["synth"])?;
            let flags = json!({
                "n_families": a.n_families, "depth": a.depth, "length": a.length,
                "conserved_fraction": a.conserved_fraction, "mutation_rate": a.mutation_rate, "gap_rate": a.gap_rate,
            });
            let cfg: SyntheticFamilyConfig = layers.section("synth", SyntheticFamilyConfig { seed, ..Default::default() }, flags)?;
            let fams = synth_corpus(&cfg)?;
            fs::create_dir_all(&a.output)?;
            let mut conserved = Map::new();
            for (i, f) in fams.iter().enumerate() {
                let name = format!("family_{i:04}.a3m");
                fs::write(a.output.join(&name), write_a3m(&f.msa))?;
                conserved.insert(name, json!(f.conserved));
            }
            fs::write(a.output.join("conserved.json"), serde_json::to_string(&conserved).map_err(Error::from)? + "\n")?;
            layers.record(cli, "synth-data", &a.output.join("run.json"))?;
        }
        Command::Pretrain(a) => {
            layers.check_overrides(&["model", "train"])?;
            let model_cfg: ModelConfig = layers.section("model", a.model.unwrap_or(Preset::Full).config(), Value::Null)?;
            let flags = json!({
                "total_pretrain_steps": a.steps, "batch_size": a.batch_size, "lr_peak": a.lr_peak,
                "warmup_steps": a.warmup_steps, "decay_steps": a.decay_steps, "checkpoint_every": a.checkpoint_every,
            });
            let tc: TrainConfig = layers.section("train", TrainConfig::default(), flags)?;
            model_cfg.validate()?;
            tc.validate()?;
            let corpus = read_corpus(&a.corpus)?;
            let model = match &a.init {
                Some(p) => Model::load(p, Some(&model_cfg))?,
                None => Model::init(model_cfg, &SeedStream::new(seed).child("init"))?,
            };
            fs::create_dir_all(&a.output)?;
            layers.record(cli, "pretrain", &a.output.join("run.json"))?;
            let steps = tc.total_pretrain_steps;
            let mut tr = Trainer::new(model, tc, SeedStream::new(seed).child("train"))?;
            train_loop(&mut tr, &corpus, steps, &a.output, |tr, batch| tr.pretrain_step(batch))?;
        }
        Command::Finetune(a) => {
            layers.check_overrides(&["model", "train"])?;
            let model = load_model(&mut layers, &a.checkpoint)?;
            let flags = json!({
                "total_finetune_steps": a.steps, "batch_size": a.batch_size, "finetune_lr": a.lr,
                "feed": mode_name(a.feed), "finetune_rows": a.rows, "checkpoint_every": a.checkpoint_every,
            });
            let tc: TrainConfig = layers.section("train", TrainConfig::default(), flags)?;
            tc.validate()?;
            let corpus = read_corpus(&a.corpus)?;
            let profile = match &a.critic_profile {
                Some(s) => tokens_of(s)?,
                None => corpus[0].query().symbols.iter().map(|s| s.token() as usize).collect(),
            };
            layers.resolved.insert("critic".into(), json!({"profile_length": profile.len()}));
            let critic = SyntheticCritic::new(profile)?;
            fs::create_dir_all(&a.output)?;
            layers.record(cli, "finetune", &a.output.join("run.json"))?;
            let steps = tc.total_finetune_steps;
            let mut tr = Trainer::new(model, tc, SeedStream::new(seed).child("finetune"))?;
            train_loop(&mut tr, &corpus, steps, &a.output, |tr, batch| tr.finetune_step(batch, &critic))?;
        }
        Command::Calibrate(a) => {
            layers.check_overrides(&["model", "calibrate"])?;
            let model = load_model(&mut layers, &a.model.checkpoint)?;
            let flags = json!({"r_ctx": a.r_ctx, "trials": a.trials});
            let cfg: CalibrationConfig = layers.section("calibrate", CalibrationConfig { seed, ..Default::default() }, flags)?;
            let msa = read_msa(&a.input)?;
            let out = calibrate(&msa, &model, &cfg)?;
            let dir = &a.model.output;
            fs::create_dir_all(dir)?;
            let mut manifest = Vec::new();
            for t in &out {
                let stem = format!("calibrated_r{}_t{}", tag(t.r_ctx), t.trial);
                fs::write(dir.join(format!("{stem}.a3m")), write_a3m(&t.msa))?;
                write_features(&t.features, &dir.join(format!("{stem}.feat")))?;
                manifest.push(ManifestRecord {
                    protocol: "calibrate".into(),
                    seed: cfg.seed,
                    trial: t.trial,
                    r_ctx: t.r_ctx,
                    n_aug: None,
                    n_sub: None,
                    confidence: None,
                    ensemble: None,
                    outputs: vec![format!("{stem}.a3m"), format!("{stem}.feat")],
                });
            }
            write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
            layers.record(cli, "calibrate", &dir.join("run.json"))?;
        }
        Command::Augment(a) => {
            layers.check_overrides(&["model", "augment"])?;
            let model = load_model(&mut layers, &a.model.checkpoint)?;
            let flags = json!({"n_aug": a.n_aug, "r_ctx": a.r_ctx, "trials": a.trials, "mode": mode_name(a.mode)});
            let cfg: AugmentationConfig = layers.section("augment", AugmentationConfig { seed, ..Default::default() }, flags)?;
            let msa = read_msa(&a.input)?;
            let out = augment(&msa, &model, &cfg)?;
            write_augmented(cli, &mut layers, "augment", &cfg, &out, &a.model.output)?;
        }
        Command::Zeroshot(a) => {
            layers.check_overrides(&["model", "zeroshot"])?;
            let model = load_model(&mut layers, &a.model.checkpoint)?;
            let flags = json!({"n_aug": a.n_aug, "trials": a.trials, "mode": mode_name(a.mode)});
            let cfg: AugmentationConfig = layers.section("zeroshot", AugmentationConfig { seed, ..AugmentationConfig::zero_shot() }, flags)?;
            let query = match (&a.query, &a.input) {
                (Some(q), _) => q.clone(),
                (None, Some(p)) => read_msa(p)?.query().sequence(),
                (None, None) => return Err(CliError::Usage("give --query or --input".into())),
            };
            let out = zero_shot(&query, &model, &cfg)?;
            write_augmented(cli, &mut layers, "zeroshot", &cfg, &out, &a.model.output)?;
        }
        Command::Probe(a) => {
            layers.check_overrides(&["model", "probe"])?;
            let model = load_model(&mut layers, &a.model.checkpoint)?;
            let flags = json!({
                "n_max": a.n_max, "n_sub": a.n_sub, "r_ctx": a.r_ctx, "trials": a.trials,
                "similarity_threshold": a.similarity_threshold,
            });
            let cfg: ProbeConfig = layers.section("probe", ProbeConfig { seed, ..Default::default() }, flags)?;
            let pool = read_msa(&a.input)?;
            let profile = match &a.critic_profile {
                Some(s) => tokens_of(s)?,
                None => pool.query().symbols.iter().map(|s| s.token() as usize).collect(),
            };
            let critic = match &a.critic_alternate {
                Some(alt) => SyntheticCritic::two_minimum(profile, tokens_of(alt)?)?,
                None => SyntheticCritic::new(profile)?,
            };
            let result = probe(&pool, &model, &critic as &dyn Critic, &cfg)?;
            let dir = &a.model.output;
            fs::create_dir_all(dir)?;
            let mut member_of = vec![0; result.trials.len()];
            for (e, ens) in result.ensembles.iter().enumerate() {
                for &m in &ens.members {
                    member_of[m] = e;
                }
            }
            let mut manifest = Vec::new();
            for (i, t) in result.trials.iter().enumerate() {
                let stem = format!("probe_n{}_r{}_t{}", t.n_sub, tag(t.r_ctx), t.trial);
                write_features(&t.features, &dir.join(format!("{stem}.feat")))?;
                manifest.push(ManifestRecord {
                    protocol: "probe".into(),
                    seed: cfg.seed,
                    trial: t.trial,
                    r_ctx: t.r_ctx,
                    n_aug: None,
                    n_sub: Some(t.n_sub),
                    confidence: Some(t.report.confidence),
                    ensemble: Some(member_of[i]),
                    outputs: vec![format!("{stem}.feat")],
                });
            }
            write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
            write_jsonl(&dir.join("ensembles.jsonl"), &result.ensembles)?;
            layers.record(cli, "probe", &dir.join("run.json"))?;
            println!("{} trials, {} ensembles from a pool of {}", result.trials.len(), result.ensembles.len(), result.pool_depth);
        }
        Command::Gradcheck(_) => {
            layers.check_overrides(&[])?;
            let (ok, detail) = crate::verify::gradient_correctness()?;
            println!("{} {detail}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                return Err(CliError::Verify(detail));
            }
        }
        Command::Verify(a) => {
            layers.check_overrides(&[])?;
            let ids: Vec<u32> = match &a.only {
                Some(v) => v.clone(),
                None => CRITERIA.iter().map(|c| c.0).collect(),
            };
            if let Some(bad) = ids.iter().find(|&&i| !CRITERIA.iter().any(|c| c.0 == i)) {
                return Err(CliError::Usage(format!("no criterion {bad}")));
            }
            let mut results = Vec::new();
            for id in ids {
                let r = run_criterion(id);
                println!("{}", r.line());
                results.push(r);
            }
            if let Some(p) = &a.output {
                write_jsonl(p, &results)?;
            }
            let failed: Vec<u32> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
            if !failed.is_empty() {
                return Err(CliError::Verify(format!("criteria {failed:?}")));
            }
        }
    }
    Ok(())
}

fn sidecar(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_augmented(
    cli: &Cli,
    layers: &mut Layers,
    protocol: &str,
    cfg: &AugmentationConfig,
    out: &[crate::protocols::AugmentedTrial],
    dir: &Path,
) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for t in out {
        let stem = format!("{protocol}_n{}_r{}_t{}", t.n_aug, tag(t.r_ctx), t.trial);
        let mut outputs = vec![format!("{stem}.feat")];
        write_features(&t.features, &dir.join(&outputs[0]))?;
        if let Some(m) = &t.msa {
            fs::write(dir.join(format!("{stem}.a3m")), write_a3m(m))?;
            outputs.push(format!("{stem}.a3m"));
        }
        manifest.push(ManifestRecord {
            protocol: protocol.into(),
            seed: cfg.seed,
            trial: t.trial,
            r_ctx: t.r_ctx,
            n_aug: Some(t.n_aug),
            n_sub: None,
            confidence: None,
            ensemble: None,
            outputs,
        });
    }
    debug_assert!(cfg.mode == OutputMode::Hard || out.iter().all(|t| t.msa.is_none()));
    write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
    layers.record(cli, protocol, &dir.join("run.json"))
}

fn train_loop(
    tr: &mut Trainer,
    corpus: &[Msa],
    steps: u64,
    dir: &Path,
    mut step: impl FnMut(&mut Trainer, &[Msa]) -> crate::Result<StepMetrics>,
) -> CliResult<()> {
    let mut metrics = String::new();
    let every = tr.cfg.checkpoint_every.max(1);
    while tr.step < steps {
        let batch: Vec<Msa> = tr.sample_batch(corpus.len()).into_iter().map(|i| corpus[i].clone()).collect();
        let m = step(tr, &batch)?;
        metrics.push_str(&m.to_json_line());
        metrics.push('\n');
        if tr.step % every == 0 {
            tr.model.save(&dir.join(format!("checkpoint_{:07}.bin", tr.step)))?;
            log::info!("step {} loss {:.4}", tr.step, m.loss);
        }
    }
    fs::write(dir.join("metrics.jsonl"), metrics)?;
    tr.model.save(&dir.join("model.bin"))?;
    Ok(())
}
