//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit status; the binary is a thin wrapper.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value as Json};

use crate::dataset::{read_path, write_csv, write_jsonl, DEFAULT_MISSING};
use crate::error::{Error, Result};
use crate::evaluation::ablation::{ablate_single_step_vs_diffusion, EfficacySetup};
use crate::evaluation::learner::BoostConfig;
use crate::evaluation::metrics::MetricReport;
use crate::evaluation::sweep::{evaluate_masked, masking_sweep, sweep_csv};
use crate::evaluation::toy::toy_dataset;
use crate::generation::{generate, sample_batch, NumericMode, SampleConfig};
use crate::model::{Model, ModelConfig};
use crate::schema::{infer_schema_from_csv, Cell, EntityInstance, EntitySchema, InferOptions, Kind};
use crate::training::{fit, TrainConfig};

/// Version of the on-disk checkpoint layout.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "entdiff", version, about = "Discrete diffusion over structured entities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Infer a schema from a CSV header and column contents.
    SchemaInfer(SchemaInferArgs),
    /// Fit a model and write a run directory.
    Train(TrainArgs),
    /// Draw unconditional samples from a checkpoint.
    Sample(SampleArgs),
    /// Fill in unobserved leaves of a dataset.
    Impute(ImputeArgs),
    /// Point-prediction metrics on masked leaves against the constant baseline.
    Evaluate(EvaluateArgs),
    /// Metrics as a function of the masked fraction.
    Sweep(SweepArgs),
    /// Compare leap-1 sampling with one-shot sampling.
    Ablate(AblateArgs),
    /// Write a built-in toy dataset.
    Toy(ToyArgs),
}

#[derive(Args, Debug)]
struct SchemaInferArgs {
    csv: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Columns with at most this many distinct values become categorical.
    #[arg(long, default_value_t = 20)]
    categorical_cutoff: usize,
    #[arg(long, default_value = DEFAULT_MISSING)]
    missing: String,
    /// Kind override, `path=numerical|categorical|text`. Repeatable.
    #[arg(long = "type", value_name = "PATH=KIND")]
    types: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// key=value file; keys are `model.<field>` or `train.<field>`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline `key=value` override. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for initialization, shuffling and corruption.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = DEFAULT_MISSING)]
    missing: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    leap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Deterministic values instead of draws.
    #[arg(long)]
    point: bool,
    /// `.csv` writes CSV, anything else JSON lines.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated leaf paths kept as observed, or `auto` to keep every
    /// present value and fill only the empty cells.
    #[arg(long, default_value = "auto")]
    observe: String,
    #[arg(long, default_value_t = 1)]
    leap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    point: bool,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_MISSING)]
    missing: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated metric names to keep (`rmse`, `error_rate`,
    /// `one_minus_word_iou`) or `all`.
    #[arg(long, default_value = "all")]
    metrics: String,
    /// Score the leaves not listed here; overrides `--fraction`.
    #[arg(long)]
    observe: Option<String>,
    /// Fraction of each entity's leaves hidden and predicted.
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Schema the data was prepared with; must match the checkpoint.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_MISSING)]
    missing: String,
    /// `.csv` writes the aligned table, anything else JSON.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated masked fractions in [0, 1), ascending.
    #[arg(long, default_value = "0,0.25,0.5,0.75,0.95")]
    fractions: String,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_MISSING)]
    missing: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Reference data the synthetic sets are compared against.
    #[arg(long)]
    data: PathBuf,
    /// Samples per arm; defaults to the size of `--data`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leaf for the downstream comparison; needs `--train-data`.
    #[arg(long, requires = "train_data")]
    target: Option<String>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    learner_seeds: usize,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_MISSING)]
    missing: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long)]
    name: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise: Option<f64>,
    /// Also write the matching schema here.
    #[arg(long)]
    schema_out: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Json,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub checkpoint_fingerprint: Option<String>,
    pub wall_clock_seconds: f64,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str) -> RunManifest {
        let mut versions = BTreeMap::new();
        versions.insert("entdiff".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("checkpoint_format".into(), CHECKPOINT_FORMAT.to_string());
        RunManifest {
            command: command.into(),
            config: Json::Null,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            checkpoint_fingerprint: None,
            wall_clock_seconds: 0.0,
            versions,
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_assignment(line).map_err(|_| Error::invalid(format!("config line {}: expected key=value", no + 1)))?);
    }
    Ok(out)
}

fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::invalid(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Resolved model and training configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Apply dotted `key=value` assignments over the defaults, in order.
pub fn resolve_config(assignments: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = json!({
        "model": serde_json::to_value(ModelConfig::default())?,
        "train": serde_json::to_value(TrainConfig::default())?,
    });
    for (key, raw) in assignments {
        let value: Json = serde_json::from_str(raw).unwrap_or_else(|_| Json::String(raw.clone()));
        set_dotted(&mut doc, key, value)?;
    }
    let model: ModelConfig = serde_json::from_value(doc["model"].clone()).map_err(|e| Error::invalid(format!("model config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(doc["train"].clone()).map_err(|e| Error::invalid(format!("train config: {e}")))?;
    model.validate()?;
    train.validate()?;
    Ok(RunConfig { model, train })
}

fn set_dotted(doc: &mut Json, key: &str, value: Json) -> Result<()> {
    let unknown = || Error::invalid(format!("unknown config key `{key}`"));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        node = node.get_mut(*part).ok_or_else(unknown)?;
    }
    let last = parts[parts.len() - 1];
    let obj = node.as_object_mut().ok_or_else(unknown)?;
    match (key, obj.get_mut(last)) {
        // `train.mode=fixed_mask` sets the variant and keeps any rate.
        ("train.mode", Some(Json::Object(mode))) if value.is_string() => {
            mode.insert("kind".into(), value);
        }
        ("train.mode.rate", _) => {
            obj.insert(last.into(), value);
        }
        (_, Some(slot)) => *slot = value,
        (_, None) => return Err(unknown()),
    }
    Ok(())
}

fn load_checkpoint(path: &Path, schema: Option<&Path>) -> Result<Model> {
    let model = Model::load(path)?;
    if let Some(schema_path) = schema {
        let s = EntitySchema::load(&fs::read_to_string(schema_path)?)?;
        if s.fingerprint() != model.schema.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "schema fingerprint {} does not match checkpoint fingerprint {}",
                s.fingerprint(),
                model.schema.fingerprint()
            )));
        }
    }
    Ok(model)
}

fn write_entities(path: &Path, entities: &[EntityInstance], schema: &EntitySchema) -> Result<()> {
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_csv(entities, schema)?,
        _ => write_jsonl(entities, schema),
    };
    write_file(path, text.as_bytes())
}

fn parse_observe(schema: &EntitySchema, spec: &str) -> Result<Option<Vec<bool>>> {
    if spec == "auto" {
        return Ok(None);
    }
    let mut keep = vec![false; schema.dim()];
    for path in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        keep[schema.require_leaf(path)?] = true;
    }
    Ok(Some(keep))
}

/// Hide the leaves not in `keep`; with `None`, Missing cells become Masked.
fn hide(entity: &EntityInstance, keep: Option<&[bool]>) -> EntityInstance {
    let cells = entity
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| match keep {
            None if c.is_missing() => Cell::Masked,
            None => c.clone(),
            Some(k) if k[i] => c.clone(),
            Some(_) => Cell::Masked,
        })
        .collect();
    EntityInstance::new(cells)
}

fn filter_metrics(report: &mut MetricReport, wanted: &str) -> Result<()> {
    if wanted == "all" {
        return Ok(());
    }
    let names: Vec<&str> = wanted.split(',').map(str::trim).collect();
    for n in &names {
        if !["rmse", "error_rate", "one_minus_word_iou"].contains(n) {
            return Err(Error::invalid(format!("unknown metric `{n}`")));
        }
    }
    report.per_leaf.retain(|_, m| names.contains(&m.metric.as_str()));
    report.baseline.retain(|_, m| names.contains(&m.metric.as_str()));
    Ok(())
}

fn cmd_schema_infer(a: &SchemaInferArgs, m: &mut RunManifest) -> Result<()> {
    let mut opts = InferOptions { categorical_cutoff: a.categorical_cutoff, missing_sentinel: a.missing.clone(), ..InferOptions::default() };
    for t in &a.types {
        let (path, kind) = parse_assignment(t)?;
        opts.type_hints.insert(path, Kind::parse(&kind)?);
    }
    let schema = infer_schema_from_csv(&fs::read_to_string(&a.csv)?, &opts)?;
    write_file(&a.output, schema.save().as_bytes())?;
    m.input("csv", &a.csv);
    m.config = json!({ "categorical_cutoff": a.categorical_cutoff, "missing": a.missing, "types": a.types });
    m.outputs.push(a.output.display().to_string());
    m.checkpoint_fingerprint = Some(schema.fingerprint());
    Ok(())
}

fn cmd_train(a: &TrainArgs, m: &mut RunManifest) -> Result<PathBuf> {
    let mut assignments = match &a.config {
        Some(p) => parse_config_text(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    for o in &a.overrides {
        assignments.push(parse_assignment(o)?);
    }
    if let Some(seed) = a.seed {
        assignments.push(("model.seed".into(), seed.to_string()));
        assignments.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(e) = a.epochs {
        assignments.push(("train.epochs".into(), e.to_string()));
    }
    let cfg = resolve_config(&assignments)?;
    let schema = EntitySchema::load(&fs::read_to_string(&a.schema)?)?;
    let data = read_path(&a.data, &schema, &a.missing)?;
    let fitted = schema.fit_normalizers(&data)?;
    let out = fit(&data, &fitted, &cfg.model, &cfg.train, |r| {
        let val = r.validation_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        eprintln!("epoch {} train_loss {:.6} validation_loss {val} lr {:.3e}", r.epoch, r.train_loss, r.learning_rate);
    })?;
    fs::create_dir_all(&a.output)?;
    let ckpt = a.output.join("model.ckpt");
    out.model.save(&ckpt)?;
    write_file(&a.output.join("loss_curve.csv"), out.curve.to_csv().as_bytes())?;
    write_file(&a.output.join("schema.json"), fitted.save().as_bytes())?;
    m.input("data", &a.data);
    m.input("schema", &a.schema);
    if let Some(c) = &a.config {
        m.input("config", c);
    }
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.train.seed);
    for f in ["model.ckpt", "loss_curve.csv", "schema.json"] {
        m.outputs.push(a.output.join(f).display().to_string());
    }
    m.checkpoint_fingerprint = Some(fitted.fingerprint());
    Ok(a.output.join("manifest.json"))
}

fn cmd_sample(a: &SampleArgs, m: &mut RunManifest) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    let d = model.dim();
    let mut leap = a.leap;
    if leap > d {
        eprintln!("warning: leap {leap} exceeds the {d} maskable leaves; clamped to {d}");
        leap = d;
    }
    let cfg = SampleConfig {
        leap,
        seed: a.seed,
        temperature: a.temperature,
        numeric_mode: if a.point { NumericMode::Point } else { NumericMode::Sample },
    };
    let outcomes = generate(&model, a.n, &cfg)?;
    let entities: Vec<EntityInstance> = outcomes.iter().map(|o| o.entity.clone()).collect();
    write_entities(&a.output, &entities, &model.schema)?;
    m.input("ckpt", &a.ckpt);
    m.config = json!({ "n": a.n, "leap": leap, "requested_leap": a.leap, "temperature": a.temperature, "point": a.point,
        "network_calls": outcomes.iter().map(|o| o.network_calls).sum::<usize>() });
    m.seed = Some(a.seed);
    m.outputs.push(a.output.display().to_string());
    m.checkpoint_fingerprint = Some(model.schema.fingerprint());
    Ok(())
}

fn cmd_impute(a: &ImputeArgs, m: &mut RunManifest) -> Result<()> {
    let model = load_checkpoint(&a.ckpt, a.schema.as_deref())?;
    let data = read_path(&a.data, &model.schema, &a.missing)?;
    let keep = parse_observe(&model.schema, &a.observe)?;
    let hidden: Vec<EntityInstance> = data.iter().map(|e| hide(e, keep.as_deref())).collect();
    let cfg = SampleConfig {
        leap: a.leap.min(model.dim()).max(1),
        seed: a.seed,
        numeric_mode: if a.point { NumericMode::Point } else { NumericMode::Sample },
        ..SampleConfig::default()
    };
    let mut out = Vec::with_capacity(hidden.len());
    for (c, chunk) in hidden.chunks(256).enumerate() {
        out.extend(sample_batch(&model, chunk, &cfg, (c * 256) as u64)?.into_iter().map(|o| o.entity));
    }
    write_entities(&a.output, &out, &model.schema)?;
    m.input("ckpt", &a.ckpt);
    m.input("data", &a.data);
    m.config = json!({ "observe": a.observe, "leap": cfg.leap, "point": a.point });
    m.seed = Some(a.seed);
    m.outputs.push(a.output.display().to_string());
    m.checkpoint_fingerprint = Some(model.schema.fingerprint());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, m: &mut RunManifest) -> Result<()> {
    let model = load_checkpoint(&a.ckpt, a.schema.as_deref())?;
    let data = read_path(&a.data, &model.schema, &a.missing)?;
    let mut report = match &a.observe {
        Some(spec) => {
            let keep = parse_observe(&model.schema, spec)?
                .ok_or_else(|| Error::invalid("evaluate needs explicit observed paths, not `auto`"))?;
            let hidden: Vec<EntityInstance> = data.iter().map(|e| hide(e, Some(&keep))).collect();
            evaluate_masked(&model, &hidden, &data)?
        }
        None => masking_sweep(&model, &data, &[a.fraction], 1, a.seed)?.pop().expect("one fraction"),
    };
    filter_metrics(&mut report, &a.metrics)?;
    let text = match a.output.extension().and_then(|e| e.to_str()) {
        Some("csv") => report.to_csv(),
        _ => report.to_json(),
    };
    write_file(&a.output, text.as_bytes())?;
    m.input("ckpt", &a.ckpt);
    m.input("data", &a.data);
    m.config = json!({ "metrics": a.metrics, "observe": a.observe, "fraction": a.fraction });
    m.seed = Some(a.seed);
    m.outputs.push(a.output.display().to_string());
    m.checkpoint_fingerprint = Some(model.schema.fingerprint());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, m: &mut RunManifest) -> Result<()> {
    let model = load_checkpoint(&a.ckpt, a.schema.as_deref())?;
    let data = read_path(&a.data, &model.schema, &a.missing)?;
    let fractions: Vec<f64> = a
        .fractions
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad fraction `{s}`"))))
        .collect::<Result<_>>()?;
    let reports = masking_sweep(&model, &data, &fractions, a.trials, a.seed)?;
    write_file(&a.output, sweep_csv(&reports).as_bytes())?;
    m.input("ckpt", &a.ckpt);
    m.input("data", &a.data);
    m.config = json!({ "fractions": fractions, "trials": a.trials });
    m.seed = Some(a.seed);
    m.outputs.push(a.output.display().to_string());
    m.checkpoint_fingerprint = Some(model.schema.fingerprint());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, m: &mut RunManifest) -> Result<()> {
    let model = load_checkpoint(&a.ckpt, a.schema.as_deref())?;
    let data = read_path(&a.data, &model.schema, &a.missing)?;
    let train = match &a.train_data {
        Some(p) => Some(read_path(p, &model.schema, &a.missing)?),
        None => None,
    };
    let setup = match (&a.target, &train) {
        (Some(target), Some(t)) => Some(EfficacySetup {
            target,
            real_train: t,
            learner_seeds: a.learner_seeds,
            learner: BoostConfig::default(),
        }),
        _ => None,
    };
    let n = a.n.unwrap_or(data.len());
    let ablation = ablate_single_step_vs_diffusion(&model, &data, n, a.seed, setup.as_ref())?;
    write_file(&a.output, (serde_json::to_string_pretty(&ablation.report)? + "\n").as_bytes())?;
    m.input("ckpt", &a.ckpt);
    m.input("data", &a.data);
    if let Some(p) = &a.train_data {
        m.input("train_data", p);
    }
    m.config = json!({ "n": n, "target": a.target, "learner_seeds": a.learner_seeds });
    m.seed = Some(a.seed);
    m.outputs.push(a.output.display().to_string());
    m.checkpoint_fingerprint = Some(model.schema.fingerprint());
    Ok(())
}

fn default_noise(name: &str) -> f64 {
    match name {
        "two_moons" => 0.05,
        "binary_grid" => 0.05,
        "correlated_table" => 0.3,
        _ => 0.0,
    }
}

fn cmd_toy(a: &ToyArgs, m: &mut RunManifest) -> Result<()> {
    let noise = a.noise.unwrap_or_else(|| default_noise(&a.name));
    let toy = toy_dataset(&a.name, a.n, noise, a.seed)?;
    write_file(&a.output, write_csv(&toy.entities, &toy.schema)?.as_bytes())?;
    m.outputs.push(a.output.display().to_string());
    if let Some(p) = &a.schema_out {
        write_file(p, toy.schema.save().as_bytes())?;
        m.outputs.push(p.display().to_string());
    }
    m.config = json!({ "name": a.name, "n": a.n, "noise": noise });
    m.seed = Some(a.seed);
    m.checkpoint_fingerprint = Some(toy.schema.fingerprint());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let (name, output) = match &cli.command {
        Command::SchemaInfer(a) => ("schema-infer", &a.output),
        Command::Train(a) => ("train", &a.output),
        Command::Sample(a) => ("sample", &a.output),
        Command::Impute(a) => ("impute", &a.output),
        Command::Evaluate(a) => ("evaluate", &a.output),
        Command::Sweep(a) => ("sweep", &a.output),
        Command::Ablate(a) => ("ablate", &a.output),
        Command::Toy(a) => ("toy", &a.output),
    };
    let mut manifest = RunManifest::new(name);
    let mut manifest_path = manifest_path_for(output);
    match &cli.command {
        Command::SchemaInfer(a) => cmd_schema_infer(a, &mut manifest)?,
        Command::Train(a) => manifest_path = cmd_train(a, &mut manifest)?,
        Command::Sample(a) => cmd_sample(a, &mut manifest)?,
        Command::Impute(a) => cmd_impute(a, &mut manifest)?,
        Command::Evaluate(a) => cmd_evaluate(a, &mut manifest)?,
        Command::Sweep(a) => cmd_sweep(a, &mut manifest)?,
        Command::Ablate(a) => cmd_ablate(a, &mut manifest)?,
        Command::Toy(a) => cmd_toy(a, &mut manifest)?,
    }
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_file(&manifest_path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
}

/// One-line JSON error record.
pub fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Run the CLI on `args` (including the program name) and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            let _ = std::io::stdout().flush();
            return 0;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            e.exit_code()
        }
    }
}
