//! Cartesian ablations over head design choices.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CategorySet, LabeledProposals, Split, SplitFilter};
use crate::error::{Error, Result};
use crate::evaluator::{detections_from_scores, ground_truth_from_sources, map_report};
use crate::head::{argmax_rows, AptHead, CategoryPrompts, FusionMode, HeadConfig, ProposalBatch, TuningMode};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblationAxis {
    Fusion,
    Tuning,
    Weights,
    Layers,
    Components,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [Self::Fusion, Self::Tuning, Self::Weights, Self::Layers, Self::Components];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fusion => "fusion",
            Self::Tuning => "tuning",
            Self::Weights => "weights",
            Self::Layers => "layers",
            Self::Components => "components",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Every variant of `base` along this axis, labelled.
    fn variants(self, base: HeadConfig) -> Vec<(String, HeadConfig)> {
        match self {
            Self::Fusion => {
                FusionMode::ALL.iter().map(|&f| (f.name().to_string(), HeadConfig { fusion: f, ..base })).collect()
            }
            Self::Tuning => {
                TuningMode::ALL.iter().map(|&t| (t.name().to_string(), HeadConfig { tuning: t, ..base })).collect()
            }
            Self::Weights => vec![
                ("shared".into(), HeadConfig { share_weights: true, ..base }),
                ("individual".into(), HeadConfig { share_weights: false, ..base }),
            ],
            Self::Layers => [2, 3].iter().map(|&l| (format!("{l}"), HeadConfig { layers: l, ..base })).collect(),
            Self::Components => vec![
                ("full".into(), HeadConfig { use_ocr: true, use_vision: true, ..base }),
                ("w/o o".into(), HeadConfig { use_ocr: false, use_vision: true, ..base }),
                ("w/o v".into(), HeadConfig { use_ocr: true, use_vision: false, ..base }),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// `axis=value` pairs joined by spaces, or `baseline`.
    pub label: String,
    pub head: HeadConfig,
    pub params: usize,
    pub accuracy: f64,
    pub map: f64,
}

/// Head configurations for the cartesian product of `axes`, starting from
/// `base`. Axes vary in the given order, the last one fastest.
pub fn expand(base: HeadConfig, axes: &[AblationAxis]) -> Result<Vec<(String, HeadConfig)>> {
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(Error::InvalidConfig(format!("axis {} listed twice", a.name())));
        }
    }
    let mut rows: Vec<(Vec<String>, HeadConfig)> = vec![(Vec::new(), base)];
    for &axis in axes {
        rows = rows
            .into_iter()
            .flat_map(|(label, cfg)| {
                axis.variants(cfg).into_iter().map(move |(v, c)| {
                    let mut l = label.clone();
                    l.push(format!("{}={v}", axis.name()));
                    (l, c)
                })
            })
            .collect();
    }
    Ok(rows
        .into_iter()
        .map(|(l, c)| (if l.is_empty() { String::from("default") } else { l.join(" ") }, c))
        .collect())
}

/// Accuracy and mAP of `head` on `val`, scoring every proposal against every
/// prompt; proposals are the ground-truth boxes.
pub fn score_head(head: &AptHead, prompts: &CategoryPrompts, val: &LabeledProposals, iou_threshold: f64) -> Result<(f64, f64)> {
    let unlabeled = ProposalBatch { labels: None, ..val.batch.clone() };
    let probs = head.forward(prompts, &unlabeled, false)?.probs;
    let labels = val.batch.labels.as_ref().ok_or_else(|| Error::InvalidConfig("validation needs labels".into()))?;
    let correct = argmax_rows(&probs).iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    let names = prompts.names().to_vec();
    let dets = detections_from_scores(&val.sources, &names, &probs)?;
    let gts = ground_truth_from_sources(&val.sources);
    let cats = CategorySet::new(names.into_iter().map(|n| (n, Split::Base)).collect())?;
    let report = map_report(&dets, &gts, &cats, &[iou_threshold], SplitFilter::All)?;
    Ok((accuracy, report.mean))
}

/// Trains one head per configuration in the product of `axes` (plus the
/// untuned baseline first) and scores each on `val`.
pub fn run_ablation(
    base: &TrainConfig,
    axes: &[AblationAxis],
    train_set: &LabeledProposals,
    val: &LabeledProposals,
    prompts: &CategoryPrompts,
    iou_threshold: f64,
) -> Result<Vec<AblationRow>> {
    let configs = expand(base.head, axes)?;
    let mut rows = Vec::with_capacity(configs.len() + 1);

    let baseline_cfg = HeadConfig { use_ocr: false, use_vision: false, ..base.head };
    let baseline = AptHead::new(baseline_cfg, prompts.dim(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let (accuracy, map) = score_head(&baseline, prompts, val, iou_threshold)?;
    rows.push(AblationRow { label: "baseline".into(), head: *baseline.config(), params: 0, accuracy, map });

    for (label, head_cfg) in configs {
        let cfg = TrainConfig { head: head_cfg, ..*base };
        let (head, _) = train(&cfg, &train_set.batch, prompts, None)?;
        let (accuracy, map) = score_head(&head, prompts, val, iou_threshold)?;
        rows.push(AblationRow { label, head: head_cfg, params: head.param_count(), accuracy, map });
    }
    Ok(rows)
}
