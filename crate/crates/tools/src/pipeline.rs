//! Subcommand bodies, kept free of argument parsing and printing.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use apt_core::ablation::{run_ablation, AblationAxis, AblationRow};
use apt_core::data::{build_proposals, CategorySet, LabeledProposals, ProposalOptions, ScreenAnnotation, SplitFilter};
use apt_core::evaluator::{detections_from_scores, ground_truth_from_sources, map_report, DetectionRecord, GroundTruthRecord, MapReport};
use apt_core::geometry::{link_ocr, OverlapMetric};
use apt_core::head::{argmax_rows, AptHead, CategoryPrompts, ProposalBatch};
use apt_core::store::{prompt_key, EmbeddingStore};
use apt_core::synth::{generate, SynthConfig};
use apt_core::trainer::{train, TrainReport};

use crate::annotations::{read_annotations, write_annotations};
use crate::categories::{read_categories, write_categories};
use crate::config::Settings;
use crate::embeddings::{read_embeddings, write_embeddings};
use crate::error::{Result, ToolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkStats {
    pub screens: usize,
    pub elements: usize,
    pub linked_elements: usize,
    pub ocr_items: usize,
    pub linked_pairs: usize,
}

impl LinkStats {
    /// Fraction of elements that received at least one OCR item.
    pub fn rate(&self) -> f64 {
        if self.elements == 0 { 0.0 } else { self.linked_elements as f64 / self.elements as f64 }
    }
}

/// Links every screen afresh, replacing stored links.
pub fn link_screens(screens: &mut [ScreenAnnotation], threshold: f64, metric: OverlapMetric) -> Result<LinkStats> {
    let mut stats = LinkStats::default();
    for s in screens.iter_mut() {
        let l = link_ocr(&s.elements, &s.ocr, threshold, metric)?;
        stats.screens += 1;
        stats.elements += s.elements.len();
        stats.ocr_items += s.ocr.len();
        stats.linked_elements += l.linked_elements();
        stats.linked_pairs += l.linked_pairs();
        s.links = Some(l);
    }
    Ok(stats)
}

/// Prompts and proposals for `filter`, reporting every missing key at once.
pub fn load_split(
    screens: &[ScreenAnnotation],
    store: &EmbeddingStore,
    categories: &CategorySet,
    options: &ProposalOptions,
) -> Result<(CategoryPrompts, LabeledProposals)> {
    let mut missing: Vec<String> = categories
        .indices(options.filter)
        .into_iter()
        .map(|i| prompt_key(categories.name(i)))
        .filter(|k| !store.contains(k))
        .collect();
    let proposals = match build_proposals(screens, store, categories, options) {
        Ok(p) => Some(p),
        Err(apt_core::Error::MissingKeys(keys)) => {
            missing.extend(keys);
            None
        }
        Err(e) => return Err(e.into()),
    };
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(apt_core::Error::MissingKeys(missing).into());
    }
    let prompts = CategoryPrompts::from_store(store, categories, options.filter)?;
    if prompts.is_empty() {
        return Err(ToolError::Usage(format!("split {} has no categories", options.filter.name())));
    }
    Ok((prompts, proposals.expect("no missing keys")))
}

/// The head trains on base categories whenever novel ones exist.
pub fn training_filter(categories: &CategorySet) -> SplitFilter {
    if categories.has_novel() { SplitFilter::Base } else { SplitFilter::All }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub head: AptHead,
    pub report: TrainReport,
    pub filter: SplitFilter,
    pub categories: Vec<String>,
    pub train_proposals: usize,
    pub val_proposals: Option<usize>,
    pub wall_time: Duration,
}

pub fn run_train(
    screens: &[ScreenAnnotation],
    val: Option<&[ScreenAnnotation]>,
    store: &EmbeddingStore,
    categories: &CategorySet,
    settings: &Settings,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let filter = training_filter(categories);
    let options = ProposalOptions { filter, ..settings.proposals };
    let (prompts, train_set) = load_split(screens, store, categories, &options)?;
    if train_set.batch.len() < 2 {
        return Err(ToolError::Usage(format!("need at least 2 training proposals, found {}", train_set.batch.len())));
    }
    let val_set = match val {
        Some(v) => Some(load_split(v, store, categories, &options)?.1),
        None => None,
    };
    let (head, report) = train(&settings.train, &train_set.batch, &prompts, val_set.as_ref().map(|v| &v.batch))?;
    Ok(TrainOutcome {
        head,
        report,
        filter,
        categories: prompts.names().to_vec(),
        train_proposals: train_set.batch.len(),
        val_proposals: val_set.map(|v| v.batch.len()),
        wall_time: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub map: MapReport,
    /// Top-1 accuracy over the ground-truth boxes; only when scoring with a head.
    pub accuracy: Option<f64>,
    pub detections: Vec<DetectionRecord>,
}

/// Scores every ground-truth box of `split` against every prompt of `split`
/// and computes mAP from those detections.
pub fn eval_head(
    head: &AptHead,
    screens: &[ScreenAnnotation],
    store: &EmbeddingStore,
    categories: &CategorySet,
    split: SplitFilter,
    iou_thresholds: &[f64],
    options: &ProposalOptions,
) -> Result<EvalOutcome> {
    if head.dim() != store.dim() {
        return Err(ToolError::Usage(format!(
            "checkpoint dim {} does not match embedding dim {}",
            head.dim(),
            store.dim()
        )));
    }
    let options = ProposalOptions { filter: split, ..*options };
    let (prompts, proposals) = load_split(screens, store, categories, &options)?;
    let unlabeled = ProposalBatch { labels: None, ..proposals.batch.clone() };
    let probs = head.forward(&prompts, &unlabeled, false)?.probs;
    let labels = proposals.batch.labels.as_deref().unwrap_or_default();
    let correct = argmax_rows(&probs).iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    let detections = detections_from_scores(&proposals.sources, prompts.names(), &probs)?;
    let gts = ground_truth_from_sources(&proposals.sources);
    let map = map_report(&detections, &gts, categories, iou_thresholds, split)?;
    Ok(EvalOutcome { map, accuracy: Some(accuracy), detections })
}

/// mAP of externally produced detections against the annotated elements.
pub fn eval_detections(
    detections: Vec<DetectionRecord>,
    screens: &[ScreenAnnotation],
    categories: &CategorySet,
    split: SplitFilter,
    iou_thresholds: &[f64],
) -> Result<EvalOutcome> {
    let gts: Vec<GroundTruthRecord> = screens
        .iter()
        .flat_map(|s| {
            s.elements.iter().map(|e| GroundTruthRecord { image_id: s.image_id.clone(), bbox: e.bbox, category: e.category.clone() })
        })
        .collect();
    let map = map_report(&detections, &gts, categories, iou_thresholds, split)?;
    Ok(EvalOutcome { map, accuracy: None, detections })
}

/// File names inside a fixture directory.
pub struct FixturePaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub embeddings: PathBuf,
    pub categories: PathBuf,
}

impl FixturePaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            val: dir.join("val.jsonl"),
            embeddings: dir.join("embeddings.apte"),
            categories: dir.join("categories.txt"),
        }
    }
}

pub struct Fixture {
    pub train: Vec<ScreenAnnotation>,
    pub val: Vec<ScreenAnnotation>,
    pub store: EmbeddingStore,
    pub categories: CategorySet,
}

pub fn read_fixture(dir: &Path) -> Result<Fixture> {
    let p = FixturePaths::new(dir);
    Ok(Fixture {
        train: read_annotations(&p.train)?,
        val: read_annotations(&p.val)?,
        store: read_embeddings(&p.embeddings)?,
        categories: read_categories(&p.categories)?,
    })
}

/// Generates a synthetic fixture and writes it to `dir` (created if needed).
pub fn write_synth_fixture(dir: &Path, config: &SynthConfig) -> Result<FixturePaths> {
    let ds = generate(config)?;
    std::fs::create_dir_all(dir).map_err(|e| ToolError::io(dir, e))?;
    let p = FixturePaths::new(dir);
    write_annotations(&p.train, &ds.train)?;
    write_annotations(&p.val, &ds.val)?;
    write_embeddings(&p.embeddings, &ds.store)?;
    write_categories(&p.categories, &ds.categories)?;
    Ok(p)
}

pub fn parse_axes(list: &str) -> Result<Vec<AblationAxis>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            AblationAxis::from_name(s).ok_or_else(|| {
                let known: Vec<&str> = AblationAxis::ALL.iter().map(|a| a.name()).collect();
                ToolError::Usage(format!("unknown ablation axis {s:?} (known: {})", known.join(", ")))
            })
        })
        .collect()
}

/// Trains and scores one row per configuration on the fixture's split.
pub fn run_fixture_ablation(fixture: &Fixture, settings: &Settings, axes: &[AblationAxis], iou_threshold: f64) -> Result<Vec<AblationRow>> {
    let options = ProposalOptions { filter: training_filter(&fixture.categories), ..settings.proposals };
    let (prompts, train_set) = load_split(&fixture.train, &fixture.store, &fixture.categories, &options)?;
    let (_, val) = load_split(&fixture.val, &fixture.store, &fixture.categories, &options)?;
    Ok(run_ablation(&settings.train, axes, &train_set, &val, &prompts, iou_threshold)?)
}
