//! Command-line front end. Every command writes `run_manifest.json` into its
//! output directory, on success and on failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::align::{dtw_with, warp, AlignmentReport, DtwOptions, SyncResult, TargetAlignment};
use crate::checkpoint::Checkpoint;
use crate::data::{cine_paths, read_cine, read_json, Cine, CinePair, Manifest, Split};
use crate::encoder::{forward, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, pca_1d, Metric};
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{train_pairs, TrainConfig, TrainOutput};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "cinesync",
    version,
    about = "Self-supervised synchronization of multi-view cines"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-deterministic.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired-view dataset.
    Synth(SynthArgs),
    /// Train the encoder on a manifest's training split.
    Train(TrainArgs),
    /// Write per-frame embeddings for cines.
    Embed(EmbedArgs),
    /// Align target cines to a reference.
    Sync(SyncArgs),
    /// Compute evaluation metrics on a manifest split.
    Eval(EvalArgs),
    /// Project embedding files onto their first principal axis.
    ExportPlot(ExportPlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Train/val/test fractions, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest used to look up pair ids of the cines.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(required = true)]
    pub cines: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Sakoe-Chiba band half-width.
    #[arg(long)]
    pub band: Option<usize>,
    #[arg(required = true)]
    pub targets: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    /// Any of tau, r2, oneshot.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<Metric>>,
    /// Pair every cine with itself instead of with its partner view.
    #[arg(long)]
    pub self_pairs: bool,
}

#[derive(Debug, Args)]
pub struct ExportPlotArgs {
    #[arg(required = true)]
    pub embeddings: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthJob {
    #[serde(flatten)]
    pub synth: SynthConfig,
    pub n_pairs: usize,
    pub split: [f64; 3],
}

impl Default for SynthJob {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_pairs: 250,
            split: [0.8, 0.2, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalJob {
    pub split: Split,
    pub metrics: Vec<Metric>,
    pub self_pairs: bool,
}

impl Default for EvalJob {
    fn default() -> Self {
        Self {
            split: Split::Val,
            metrics: Metric::ALL.to_vec(),
            self_pairs: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub duration_s: f64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One entry of the `embeddings.json` index written by `embed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub csv: String,
    pub cine: PathBuf,
    pub view: String,
    pub pair_id: String,
    pub frames: usize,
    pub embed_dim: usize,
}

pub const EMBEDDING_INDEX: &str = "embeddings.json";

#[derive(Default)]
struct Record {
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn load_checkpoint(stem: &Path) -> Result<EncoderParams> {
    Ok(Checkpoint::load(stem)?.params)
}

fn check_features(params: &EncoderParams, cine: &Cine, path: &Path) -> Result<()> {
    if cine.feature_dim() != params.config.input_dim {
        return Err(Error::Shape(format!(
            "{}: {} features but checkpoint expects {}",
            path.display(),
            cine.feature_dim(),
            params.config.input_dim
        )));
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    let (json, _) = cine_paths(path);
    json.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_synth(common: &Common, args: &SynthArgs, rec: &mut Record) -> Result<()> {
    let mut job: SynthJob = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        job.synth.seed = s;
    }
    if let Some(n) = args.n_pairs {
        job.n_pairs = n;
    }
    if let Some(f) = &args.split {
        job.split = <[f64; 3]>::try_from(f.as_slice()).map_err(|_| {
            Error::InvalidConfig(format!("--split needs 3 fractions, got {}", f.len()))
        })?;
    }
    rec.config = to_value(&job);
    rec.seed = Some(job.synth.seed);
    let manifest = generate_dataset(&job.synth, job.n_pairs, job.split, &common.out)?;
    rec.outputs.push(common.out.join("manifest.json"));
    for e in &manifest.entries {
        rec.outputs.push(common.out.join(&e.a));
        rec.outputs.push(common.out.join(&e.b));
    }
    Ok(())
}

fn cmd_train(
    common: &Common,
    args: &TrainArgs,
    threads: Option<usize>,
    rec: &mut Record,
) -> Result<()> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    rec.inputs.push(args.manifest.clone());
    let manifest = Manifest::load(&args.manifest)?;
    let pairs: Vec<CinePair> = manifest
        .load_split(Split::Train)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let data_dim = pairs.first().map(|p| p.a.feature_dim());
    let enc: EncoderConfig = match &args.encoder_config {
        Some(p) => {
            rec.inputs.push(p.clone());
            read_json(p)?
        }
        None => data_dim.map_or_else(EncoderConfig::default, EncoderConfig::with_input_dim),
    };
    rec.config = json!({ "train": to_value(&cfg), "encoder": to_value(&enc) });
    rec.seed = Some(cfg.seed);
    let out = TrainOutput {
        dir: common.out.clone(),
    };
    rec.outputs.push(out.log_path());
    let (json, bin) = cine_paths(&out.checkpoint_stem());
    rec.outputs.push(json);
    rec.outputs.push(bin);
    train_pairs(&pairs, &enc, &cfg, Some(&out))?;
    Ok(())
}

fn pair_ids(manifest: Option<&Path>) -> Result<Vec<(PathBuf, String)>> {
    let Some(path) = manifest else {
        return Ok(Vec::new());
    };
    let m = Manifest::load(path)?;
    let mut out = Vec::new();
    for e in &m.entries {
        for stem in [&e.a, &e.b] {
            let (json, _) = cine_paths(&m.resolve(stem));
            out.push((fs::canonicalize(&json).unwrap_or(json), e.pair_id.clone()));
        }
    }
    Ok(out)
}

fn write_embedding_csv(path: &Path, e: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string()];
    header.extend((0..e.ncols()).map(|k| format!("e_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (t, row) in e.rows().into_iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Reads an embedding CSV written by `embed`.
pub fn read_embedding_csv(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let d = r.headers().map_err(csv_err)?.len().saturating_sub(1);
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != d + 1 {
            return Err(Error::Shape(format!(
                "{}: ragged row {rows}",
                path.display()
            )));
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {field:?}", path.display())))?;
            values.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), values).map_err(|e| Error::Shape(e.to_string()))
}

fn cmd_embed(common: &Common, args: &EmbedArgs, rec: &mut Record) -> Result<()> {
    rec.config = json!({ "checkpoint": args.checkpoint, "manifest": args.manifest });
    rec.inputs.push(args.checkpoint.clone());
    let params = load_checkpoint(&args.checkpoint)?;
    let ids = pair_ids(args.manifest.as_deref())?;
    if let Some(m) = &args.manifest {
        rec.inputs.push(m.clone());
    }
    fs::create_dir_all(&common.out)?;
    let mut index = Vec::new();
    for path in &args.cines {
        rec.inputs.push(path.clone());
        let cine = read_cine(path)?;
        check_features(&params, &cine, path)?;
        let e = forward(&params, cine.frames.view())?.0;
        let stem = file_stem(path);
        let csv = format!("{stem}.csv");
        if index.iter().any(|x: &EmbeddingEntry| x.csv == csv) {
            return Err(Error::InvalidConfig(format!(
                "duplicate cine name {stem:?}"
            )));
        }
        write_embedding_csv(&common.out.join(&csv), &e)?;
        rec.outputs.push(common.out.join(&csv));
        let (json, _) = cine_paths(path);
        let canon = fs::canonicalize(&json).unwrap_or(json);
        let pair_id = ids
            .iter()
            .find(|(p, _)| *p == canon)
            .map_or_else(|| stem.clone(), |(_, id)| id.clone());
        index.push(EmbeddingEntry {
            csv,
            cine: path.clone(),
            view: cine.view.clone(),
            pair_id,
            frames: e.nrows(),
            embed_dim: e.ncols(),
        });
    }
    let index_path = common.out.join(EMBEDDING_INDEX);
    write_json(&index_path, &index)?;
    rec.outputs.push(index_path);
    Ok(())
}

fn cmd_sync(common: &Common, args: &SyncArgs, rec: &mut Record) -> Result<()> {
    rec.config = json!({ "checkpoint": args.checkpoint, "band": args.band });
    rec.inputs.push(args.checkpoint.clone());
    rec.inputs.push(args.reference.clone());
    rec.inputs.extend(args.targets.iter().cloned());
    let params = load_checkpoint(&args.checkpoint)?;
    let embed = |p: &Path| -> Result<Array2<f64>> {
        let cine = read_cine(p)?;
        check_features(&params, &cine, p)?;
        Ok(forward(&params, cine.frames.view())?.0)
    };
    let reference = embed(&args.reference)?;
    let opts = DtwOptions { band: args.band };
    let mut targets = Vec::new();
    for t in &args.targets {
        let e = embed(t)?;
        let path = dtw_with(reference.view(), e.view(), &opts)?;
        let warp = warp(&path, reference.nrows())?;
        targets.push(TargetAlignment::new(
            t.display().to_string(),
            SyncResult { path, warp },
        ));
    }
    let report = AlignmentReport {
        reference: args.reference.display().to_string(),
        targets,
    };
    fs::create_dir_all(&common.out)?;
    let out = common.out.join("alignment.json");
    write_json(&out, &report)?;
    rec.outputs.push(out);
    Ok(())
}

fn cmd_eval(common: &Common, args: &EvalArgs, rec: &mut Record) -> Result<()> {
    let mut job: EvalJob = load_config(common.config.as_deref())?;
    if let Some(s) = args.split {
        job.split = s;
    }
    if let Some(m) = &args.metrics {
        job.metrics = m.clone();
    }
    job.self_pairs |= args.self_pairs;
    job.metrics.sort();
    job.metrics.dedup();
    rec.config = to_value(&job);
    rec.inputs.push(args.checkpoint.clone());
    rec.inputs.push(args.manifest.clone());

    let params = load_checkpoint(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let mut eval = manifest.load_split(job.split)?;
    if job.self_pairs {
        eval = eval
            .into_iter()
            .map(|(id, p)| {
                (
                    id,
                    CinePair {
                        b: p.a.clone(),
                        a: p.a,
                        same_heart: true,
                    },
                )
            })
            .collect();
    }
    let needs_train = job.metrics.iter().any(|m| *m != Metric::Tau);
    let train = if needs_train {
        manifest.load_split(Split::Train)?
    } else {
        Vec::new()
    };
    for (_, p) in eval.iter().chain(&train) {
        check_features(&params, &p.a, &args.manifest)?;
        check_features(&params, &p.b, &args.manifest)?;
    }
    let report = evaluate_pairs(&params, &train, &eval, &job.metrics)?;
    fs::create_dir_all(&common.out)?;
    let out = common.out.join("metrics.json");
    write_json(&out, &json!({ "split": job.split, "metrics": report }))?;
    rec.outputs.push(out);
    Ok(())
}

fn cmd_export_plot(common: &Common, args: &ExportPlotArgs, rec: &mut Record) -> Result<()> {
    rec.config = json!({ "embeddings": args.embeddings });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "pca_value", "view", "pair_id"])
        .map_err(csv_err)?;
    for path in &args.embeddings {
        rec.inputs.push(path.clone());
        let e = read_embedding_csv(path)?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let index_path = path.with_file_name(EMBEDDING_INDEX);
        let entry = if index_path.exists() {
            let index: Vec<EmbeddingEntry> = read_json(&index_path)?;
            index.into_iter().find(|x| x.csv == name)
        } else {
            None
        };
        let (view, pair_id) = match entry {
            Some(x) => (x.view, x.pair_id),
            None => (String::new(), file_stem(path)),
        };
        for (t, v) in pca_1d(e.view())?.into_iter().enumerate() {
            w.write_record([t.to_string(), v.to_string(), view.clone(), pair_id.clone()])
                .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::create_dir_all(&common.out)?;
    let out = common.out.join("pca.csv");
    write_atomic(&out, &bytes)?;
    rec.outputs.push(out);
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Embed(_) => "embed",
        Command::Sync(_) => "sync",
        Command::Eval(_) => "eval",
        Command::ExportPlot(_) => "export-plot",
    }
}

/// Runs a parsed command and writes its run manifest.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let threads = cli.common.threads.unwrap_or(1);
    let mut rec = Record::default();
    if let Some(c) = &cli.common.config {
        rec.inputs.push(c.clone());
    }
    let result = if threads == 0 {
        Err(Error::InvalidConfig("threads must be positive".into()))
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
            .and_then(|pool| {
                pool.install(|| match &cli.command {
                    Command::Synth(a) => cmd_synth(&cli.common, a, &mut rec),
                    Command::Train(a) => cmd_train(&cli.common, a, cli.common.threads, &mut rec),
                    Command::Embed(a) => cmd_embed(&cli.common, a, &mut rec),
                    Command::Sync(a) => cmd_sync(&cli.common, a, &mut rec),
                    Command::Eval(a) => cmd_eval(&cli.common, a, &mut rec),
                    Command::ExportPlot(a) => cmd_export_plot(&cli.common, a, &mut rec),
                })
            })
    };
    let manifest = RunManifest {
        command: command_name(&cli.command).into(),
        argv: argv.to_vec(),
        config: rec.config,
        seed: rec.seed.or(cli.common.seed),
        threads,
        inputs: rec.inputs,
        outputs: rec.outputs,
        tool_version: TOOL_VERSION.into(),
        duration_s: start.elapsed().as_secs_f64(),
        status: if result.is_ok() { "ok" } else { "error" }.into(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    let written = fs::create_dir_all(&cli.common.out)
        .map_err(Error::from)
        .and_then(|_| write_json(&cli.common.out.join(RUN_MANIFEST), &manifest));
    result.and(written)
}

/// One-line JSON error report.
pub fn error_line(e: &Error) -> String {
    json!({ "error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string() }).to_string()
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!(
                "{}",
                json!({ "error": "usage", "exit_code": 2, "message": first })
            );
            return 2;
        }
    };
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
