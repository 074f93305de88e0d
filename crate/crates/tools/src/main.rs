use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apt_core::checkpoint;
use apt_core::data::{ProposalOptions, SplitFilter};
use apt_core::evaluator::coco_thresholds;
use apt_core::geometry::OverlapMetric;
use apt_core::synth::SynthConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mui_apt::annotations::{read_annotations, write_annotations};
use mui_apt::categories::read_categories;
use mui_apt::config::{Settings, SettingsLayer};
use mui_apt::detections::{read_detections, write_detections};
use mui_apt::embeddings::{read_embeddings, write_embeddings};
use mui_apt::pipeline::{self, read_fixture};
use mui_apt::report;
use mui_apt::{Result, ToolError};

#[derive(Parser)]
#[command(name = "mui-apt", version, about = "OCR-conditioned prompt tuning for mobile UI element classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attach OCR descriptions to elements.
    Link(LinkArgs),
    /// Train the tuning head.
    Train(TrainArgs),
    /// Per-category AP and mAP for a checkpoint or a detections file.
    Eval(EvalArgs),
    /// Train and score the product of ablation axes on a fixture.
    Ablate(AblateArgs),
    /// Write a seeded synthetic fixture directory.
    Synth(SynthArgs),
}

#[derive(Args)]
struct LinkArgs {
    /// Annotation file (JSON lines).
    annotations: PathBuf,
    #[arg(long, default_value = "iom", value_parser = ["iou", "iom"])]
    metric: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Where to write the linked annotations.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Settings flags; each overrides the config file.
#[derive(Args)]
struct SettingsArgs {
    /// TOML settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// sum | multiply | attention
    #[arg(long)]
    fusion: Option<String>,
    /// prompt-both | prompt-ocr | prompt-vision | vision-both
    #[arg(long)]
    tuning: Option<String>,
    #[arg(long)]
    share_weights: Option<bool>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    reduction: Option<usize>,
    #[arg(long)]
    use_ocr: Option<bool>,
    #[arg(long)]
    use_vision: Option<bool>,
    /// concat | average
    #[arg(long)]
    description: Option<String>,
    /// iou | iom, for annotations without stored links
    #[arg(long)]
    link_metric: Option<String>,
    #[arg(long)]
    link_threshold: Option<f64>,
}

impl SettingsArgs {
    fn resolve(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => SettingsLayer::read(p)?,
            None => SettingsLayer::default(),
        };
        let flags = SettingsLayer {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            tau: self.tau,
            fusion: self.fusion.clone(),
            tuning: self.tuning.clone(),
            share_weights: self.share_weights,
            layers: self.layers,
            reduction: self.reduction,
            use_ocr: self.use_ocr,
            use_vision: self.use_vision,
            description: self.description.clone(),
            link_metric: self.link_metric.clone(),
            link_threshold: self.link_threshold,
            ..SettingsLayer::default()
        };
        Settings::resolve(&[&file, &flags])
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    categories: PathBuf,
    /// Held-out annotations for the final accuracy.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Add wall time to the report (breaks byte-identical reports).
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint whose head scores every ground-truth box.
    #[arg(long, required_unless_present = "detections")]
    checkpoint: Option<PathBuf>,
    /// Evaluate this detections file instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    detections: Option<PathBuf>,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, required_unless_present = "detections")]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    categories: PathBuf,
    #[arg(long, default_value = "all", value_parser = ["all", "base", "novel"])]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    /// Average AP over IoU 0.50:0.05:0.95 instead of one threshold.
    #[arg(long, conflicts_with = "iou_thr")]
    coco: bool,
    /// concat | average
    #[arg(long, default_value = "concat", value_parser = ["concat", "average"])]
    description: String,
    #[arg(long, default_value = "iom", value_parser = ["iou", "iom"])]
    link_metric: String,
    #[arg(long, default_value_t = 0.5)]
    link_threshold: f64,
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Write the scored detections (JSON lines).
    #[arg(long)]
    detections_out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory with train.jsonl, val.jsonl, embeddings.apte, categories.txt.
    #[arg(long)]
    fixture: PathBuf,
    /// Comma-separated: fusion, tuning, weights, layers, components.
    #[arg(long, default_value = "fusion,tuning,weights,layers")]
    axes: String,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[command(flatten)]
    settings: SettingsArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().categories)]
    categories: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_train)]
    n_train: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_val)]
    n_val: usize,
    #[arg(long, default_value_t = SynthConfig::default().vision_noise)]
    vision_noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().ocr_signal)]
    ocr_signal: f64,
    #[arg(long, default_value_t = SynthConfig::default().ambiguity)]
    ambiguity: usize,
    #[arg(long, default_value_t = SynthConfig::default().appearance)]
    appearance: f64,
    #[arg(long, default_value_t = SynthConfig::default().empty_ocr)]
    empty_ocr: f64,
    #[arg(long, default_value_t = SynthConfig::default().novel)]
    novel: usize,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ToolError::Io { path: path.to_path_buf(), source: e })
}

/// Human table on stdout; machine lines to `out`, or stdout without it.
fn emit(table: &str, lines: &[String], out: Option<&Path>) -> Result<()> {
    print!("{table}");
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match out {
        Some(p) => write_text(p, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn cmd_link(a: &LinkArgs) -> Result<()> {
    let metric = OverlapMetric::from_name(&a.metric).expect("clap restricts values");
    let mut screens = read_annotations(&a.annotations)?;
    let stats = pipeline::link_screens(&mut screens, a.threshold, metric)?;
    if let Some(out) = &a.out {
        write_annotations(out, &screens)?;
    }
    print!("{}", report::link_summary(&stats, &a.metric, a.threshold));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let settings = a.settings.resolve()?;
    let screens = read_annotations(&a.annotations)?;
    let val = a.val.as_deref().map(read_annotations).transpose()?;
    let store = read_embeddings(&a.embeddings)?;
    let categories = read_categories(&a.categories)?;
    let outcome = pipeline::run_train(&screens, val.as_deref(), &store, &categories, &settings)?;
    if let Some(p) = &a.checkpoint_out {
        write_embeddings(p, &checkpoint::to_store(&outcome.head)?)?;
    }
    let lines = report::train_lines(&outcome, &settings, a.timing);
    emit(&report::train_table(&outcome, &settings), &lines, a.report_out.as_deref())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split = SplitFilter::from_name(&a.split).expect("clap restricts values");
    let thresholds = if a.coco { coco_thresholds() } else { vec![a.iou_thr] };
    let screens = read_annotations(&a.annotations)?;
    let categories = read_categories(&a.categories)?;
    let mut header = serde_json::Map::new();
    let outcome = match (&a.checkpoint, &a.detections) {
        (_, Some(d)) => {
            header.insert("detections".into(), json!(d.display().to_string()));
            pipeline::eval_detections(read_detections(d)?, &screens, &categories, split, &thresholds)?
        }
        (Some(c), None) => {
            let head = checkpoint::from_store(&read_embeddings(c)?)?;
            let store = read_embeddings(a.embeddings.as_deref().expect("clap requires embeddings"))?;
            let mut s = SettingsLayer::default();
            s.description = Some(a.description.clone());
            s.link_metric = Some(a.link_metric.clone());
            s.link_threshold = Some(a.link_threshold);
            let options: ProposalOptions = Settings::resolve(&[&s])?.proposals;
            header.insert("checkpoint".into(), json!(c.display().to_string()));
            header.insert("tau".into(), json!(head.config().tau));
            pipeline::eval_head(&head, &screens, &store, &categories, split, &thresholds, &options)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(p) = &a.detections_out {
        write_detections(p, &outcome.detections)?;
    }
    emit(&report::eval_table(&outcome, &categories), &report::eval_lines(&outcome, header), a.report_out.as_deref())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let axes = pipeline::parse_axes(&a.axes)?;
    let settings = a.settings.resolve()?;
    let fixture = read_fixture(&a.fixture)?;
    let rows = pipeline::run_fixture_ablation(&fixture, &settings, &axes, a.iou_thr)?;
    let mut header = settings.echo();
    header.insert("axes".into(), json!(axes.iter().map(|x| x.name()).collect::<Vec<_>>()));
    header.insert("iou_threshold".into(), json!(a.iou_thr));
    emit(&report::ablation_table(&rows), &report::ablation_lines(&rows, header), a.report_out.as_deref())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        dim: a.dim,
        categories: a.categories,
        n_train: a.n_train,
        n_val: a.n_val,
        vision_noise: a.vision_noise,
        ocr_signal: a.ocr_signal,
        ambiguity: a.ambiguity,
        appearance: a.appearance,
        empty_ocr: a.empty_ocr,
        novel: a.novel,
        ..SynthConfig::default()
    };
    let p = pipeline::write_synth_fixture(&a.out, &cfg)?;
    for f in [&p.train, &p.val, &p.embeddings, &p.categories] {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Link(a) => cmd_link(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
