//! The `sbir` command line: dataset synthesis, training, evaluation,
//! diagnostics and embedding export over one JSON run configuration.
//!
//! Every command prints one JSON document on standard output. Errors go to
//! standard error prefixed with a stable code such as `E_CONFIG`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sbir_core::config::RunConfig;
use sbir_core::data::{synth_dataset, write_dataset, PairedDataset, Split};
use sbir_core::evalx::{diagnose, embed_gallery, evaluate, DistanceMetric, DEFAULT_KS};
use sbir_core::mstr::build_contrast_map;
use sbir_core::trainer::{load_checkpoint, save_checkpoint, LossMode, Modality, ModelBundle, Trainer};
use sbir_core::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.arnt";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "sbir", version, about = "Fine-grained sketch-based image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural sketch/photo dataset to a directory.
    Synth(SynthArgs),
    /// Train a model and write the log and checkpoints.
    Train(TrainArgs),
    /// Print Recall@K of sketch → photo retrieval as JSON.
    Eval(EvalArgs),
    /// Write attention-distance and token statistics (report.json + CSVs).
    Diagnose(DiagnoseArgs),
    /// Write joint-space embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Run configuration (JSON); every field has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed; overrides `train.seed` (the generator seed for `synth`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory with a manifest; overrides the `data` section.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Side length in pixels; defaults to the encoder's image size.
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Output directory for the config echo, log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossModeArg>,
    /// Also save `epoch_NNNN.arnt` every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint; its config is the base configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained model; without it a freshly initialized model is evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Sketch (and its photo) to analyse, by position in the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = MetricArg::Index)]
    pub metric: MetricArg,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    /// The synthetic held-out pairs configured in `data.synth`.
    Heldout,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossModeArg {
    Basic,
    Full,
    Triplet,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricArg {
    Index,
    Grid,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Heldout => "heldout",
        }
    }
}

/// Reads `--config` (or the defaults) and applies the shared flags.
pub fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    apply_common(cfg, common)
}

fn apply_common(mut cfg: RunConfig, common: &CommonArgs) -> Result<RunConfig> {
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(root) = &common.data {
        cfg.data.root = Some(root.clone());
        cfg.data.synth = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// The model to inspect: a checkpoint if given, otherwise a fresh
/// initialization from the configured seed.
fn model_and_config(checkpoint: Option<&Path>, common: &CommonArgs) -> Result<(ModelBundle, RunConfig, u64)> {
    match checkpoint {
        Some(path) => {
            let (bundle, adam, cfg) = load_checkpoint(path)?;
            let cfg = if common.config.is_some() {
                let given = load_config(common)?;
                if given.model != cfg.model || given.mstr != cfg.mstr {
                    return Err(Error::Config {
                        path: "model".into(),
                        msg: format!("--config does not describe the model stored in {}", path.display()),
                    });
                }
                given
            } else {
                apply_common(cfg, common)?
            };
            Ok((bundle, cfg, adam.t))
        }
        None => {
            let cfg = load_config(common)?;
            let t = Trainer::new(&cfg.model, &cfg.mstr, &cfg.train, cfg.data.policy())?;
            Ok((t.bundle, cfg, 0))
        }
    }
}

/// Dataset and the sketch indices that form the requested split.
fn split_data(cfg: &RunConfig, split: SplitArg) -> Result<(PairedDataset, Vec<usize>)> {
    let ds = match split {
        SplitArg::Heldout => cfg.heldout_dataset()?.ok_or_else(|| Error::Config {
            path: "data.synth.heldout_count".into(),
            msg: "no held-out split is configured".into(),
        })?,
        _ => cfg.load_dataset()?,
    };
    let idx = match split {
        SplitArg::Val => ds.split_indices(Split::Val),
        _ => ds.split_indices(Split::Train),
    };
    if idx.is_empty() {
        return Err(Error::Parameter(format!("split {} has no sketches", split.name())));
    }
    Ok((ds, idx))
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::from_str(&cfg.echo()).expect("the echo is valid JSON")
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::ExportEmbeddings(a) => export(a),
    }
}

fn synth(a: SynthArgs) -> Result<Value> {
    let cfg = load_config(&a.common)?;
    let spec = cfg.synth_spec();
    let count = a.count.unwrap_or(spec.count);
    let size = a.size.unwrap_or(cfg.model.encoder.image_size);
    let seed = a.common.seed.unwrap_or(spec.seed);
    let ds = synth_dataset(count, size, seed)?;
    write_dataset(&ds, &a.out)?;
    Ok(json!({
        "out": a.out,
        "images": ds.images.len(),
        "sketches": ds.sketches.len(),
        "size": size,
        "seed": seed,
    }))
}

fn train(a: TrainArgs) -> Result<Value> {
    let resumed = match &a.resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let mut cfg = match (&resumed, &a.common.config) {
        (Some((_, _, base)), None) => apply_common(base.clone(), &a.common)?,
        _ => load_config(&a.common)?,
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(m) = a.loss_mode {
        cfg.train.loss_mode = match m {
            LossModeArg::Basic => LossMode::Basic,
            LossModeArg::Full => LossMode::Full,
            LossModeArg::Triplet => LossMode::Triplet,
        };
    }
    cfg.validate()?;
    let mut trainer = match resumed {
        Some((bundle, adam, base)) => {
            if cfg.model != base.model || cfg.mstr != base.mstr {
                return Err(Error::Config {
                    path: "model".into(),
                    msg: "the configuration does not match the resumed checkpoint".into(),
                });
            }
            Trainer::resume(bundle, adam, &cfg.train, cfg.data.policy())?
        }
        None => Trainer::new(&cfg.model, &cfg.mstr, &cfg.train, cfg.data.policy())?,
    };

    let ds = cfg.load_dataset()?;
    create_dir(&a.out)?;
    write_file(&a.out.join(CONFIG_FILE), cfg.echo().as_bytes())?;
    let log_path = a.out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut last = None;
    let mut io_err = None;
    for epoch in 1..=cfg.train.epochs {
        trainer.epoch(&ds, &mut |r| {
            if io_err.is_none() {
                if let Err(e) = writeln!(log, "{}", r.to_json_line()) {
                    io_err = Some(e);
                }
            }
            last = Some(*r);
        })?;
        if let Some(e) = io_err.take() {
            return Err(Error::io(&log_path, e));
        }
        if let Some(r) = &last {
            eprintln!("epoch {epoch:4}  step {:6}  total {:.5}", r.step, r.total);
        }
        if a.checkpoint_every.is_some_and(|n| n > 0 && epoch % n == 0) {
            let path = a.out.join(format!("epoch_{epoch:04}.arnt"));
            save_checkpoint(&trainer.bundle, &trainer.adam, &cfg, &path)?;
        }
    }
    let ckpt = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.bundle, &trainer.adam, &cfg, &ckpt)?;
    Ok(json!({
        "steps": trainer.step_count(),
        "final": last,
        "checkpoint": ckpt,
        "log": log_path,
    }))
}

fn eval(a: EvalArgs) -> Result<Value> {
    let (bundle, cfg, step) = model_and_config(a.checkpoint.as_deref(), &a.common)?;
    let (ds, idx) = split_data(&cfg, a.split)?;
    if a.ks.contains(&0) {
        return Err(Error::Parameter("K must be ≥ 1".into()));
    }
    let report = evaluate(&bundle, &ds, &idx, &a.ks)?;
    let mut out = report.to_json();
    out["split"] = json!(a.split.name());
    out["step"] = json!(step);
    out["config"] = config_value(&cfg);
    Ok(out)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<Value> {
    let (bundle, cfg, step) = model_and_config(a.checkpoint.as_deref(), &a.common)?;
    let (ds, idx) = split_data(&cfg, a.split)?;
    let sketch = idx.get(a.index).map(|&i| &ds.sketches[i]).ok_or_else(|| {
        Error::Parameter(format!("index {} is outside the {} sketches of the split", a.index, idx.len()))
    })?;
    let image = &ds.images[sketch.image_index];
    let metric = match a.metric {
        MetricArg::Index => DistanceMetric::Index,
        MetricArg::Grid => DistanceMetric::Grid,
    };
    let parts = [
        diagnose(&bundle, &sketch.raster, Modality::Sketch, metric)?,
        diagnose(&bundle, &image.raster, Modality::Image, metric)?,
    ];
    create_dir(&a.out)?;

    let path = a.out.join("attention_distance.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["modality", "layer", "head", "mean", "var"]).map_err(csv_err(&path))?;
    for d in &parts {
        for (l, layer) in d.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                let m = modality_name(d.modality);
                w.write_record([m, &l.to_string(), &h.to_string(), &head.mean.to_string(), &head.var.to_string()])
                    .map_err(csv_err(&path))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = a.out.join("token_stats.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["modality", "stage", "mean_similarity", "variance"]).map_err(csv_err(&path))?;
    for d in &parts {
        let m = modality_name(d.modality);
        let mut rows = vec![("patch_tokens", d.patch_tokens)];
        rows.extend(d.recycled_tokens.map(|t| ("recycled_tokens", t)));
        for (stage, t) in rows {
            w.write_record([m, stage, &t.mean_similarity.to_string(), &t.variance.to_string()])
                .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut files = vec!["report.json", "attention_distance.csv", "token_stats.csv"];
    if bundle.has_mstr() {
        let map = build_contrast_map(&cfg.mstr, cfg.model.encoder.grid())?;
        write_file(&a.out.join("contrast_map.csv"), map.to_csv().as_bytes())?;
        files.push("contrast_map.csv");
    }
    let report = json!({
        "config": config_value(&cfg),
        "step": step,
        "split": a.split.name(),
        "sketch_id": sketch.id,
        "image_id": image.id,
        "metric": metric,
        "sketch": parts[0],
        "image": parts[1],
    });
    let text = serde_json::to_string_pretty(&report).expect("reports always serialize");
    write_file(&a.out.join("report.json"), text.as_bytes())?;
    Ok(json!({ "out": a.out, "files": files, "report": report }))
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Sketch => "sketch",
        Modality::Image => "image",
    }
}

fn export(a: ExportArgs) -> Result<Value> {
    let (bundle, cfg, _) = model_and_config(a.checkpoint.as_deref(), &a.common)?;
    let (ds, idx) = split_data(&cfg, a.split)?;
    let sketches: Vec<_> = idx.iter().map(|&i| ds.sketches[i].raster.clone()).collect();
    let images: Vec<_> = ds.images.iter().map(|e| e.raster.clone()).collect();
    let s_emb = embed_gallery(&bundle, &sketches, Modality::Sketch)?;
    let i_emb = embed_gallery(&bundle, &images, Modality::Image)?;

    let path = &a.out;
    let mut w = csv_writer(path)?;
    let dim = cfg.model.projection_dim;
    let mut header = vec!["id".to_string(), "modality".to_string(), "pair".to_string()];
    header.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(csv_err(path))?;
    let mut write = |id: &str, m: &str, pair: &str, row: &[f64]| -> Result<()> {
        let mut rec = vec![id.to_string(), m.to_string(), pair.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(path))
    };
    for (r, &i) in idx.iter().enumerate() {
        let s = &ds.sketches[i];
        write(&s.id, "sketch", &s.image_id, s_emb.row(r))?;
    }
    for (r, e) in ds.images.iter().enumerate() {
        write(&e.id, "image", &e.id, i_emb.row(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(json!({ "out": a.out, "sketches": idx.len(), "images": ds.images.len(), "dim": dim }))
}
