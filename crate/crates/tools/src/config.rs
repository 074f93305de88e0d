//! Run settings: defaults, overridden by a TOML file, overridden by flags.
//!
//! The file is flat; every key is optional:
//!
//! ```toml
//! learning_rate = 0.002
//! momentum = 0.9
//! batch_size = 64
//! epochs = 12
//! seed = 7
//! tau = 0.01
//! fusion = "sum"            # sum | multiply | attention
//! tuning = "prompt-both"    # prompt-both | prompt-ocr | prompt-vision | vision-both
//! share_weights = true
//! layers = 2
//! ```

use std::fs;
use std::path::Path;

use apt_core::data::ProposalOptions;
use apt_core::geometry::OverlapMetric;
use apt_core::head::{FusionMode, TuningMode};
use apt_core::store::DescriptionMode;
use apt_core::trainer::TrainConfig;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::error::{Result, ToolError};

/// One layer of settings. Fields left `None` fall through to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsLayer {
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr_step_every: Option<usize>,
    pub lr_step_factor: Option<f64>,
    pub tau: Option<f64>,
    pub fusion: Option<String>,
    pub tuning: Option<String>,
    pub share_weights: Option<bool>,
    pub layers: Option<usize>,
    pub reduction: Option<usize>,
    pub rectify_output: Option<bool>,
    pub use_ocr: Option<bool>,
    pub use_vision: Option<bool>,
    pub description: Option<String>,
    pub link_metric: Option<String>,
    pub link_threshold: Option<f64>,
}

impl SettingsLayer {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            ToolError::Parse { path: source.to_string(), line, message: e.message().to_string() }
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub proposals: ProposalOptions,
}

impl Default for Settings {
    fn default() -> Self {
        Self { train: TrainConfig::default(), proposals: ProposalOptions::default() }
    }
}

fn named<T>(value: &Option<String>, key: &str, parse: impl Fn(&str) -> Option<T>, choices: &str) -> Result<Option<T>> {
    match value {
        None => Ok(None),
        Some(v) => parse(v).map(Some).ok_or_else(|| ToolError::Usage(format!("{key}: unknown value {v:?} (expected {choices})"))),
    }
}

impl Settings {
    /// Applies `layers` in order; later layers win.
    pub fn resolve(layers: &[&SettingsLayer]) -> Result<Self> {
        let mut s = Settings::default();
        for l in layers {
            s.apply(l)?;
        }
        s.train.validate()?;
        Ok(s)
    }

    fn apply(&mut self, l: &SettingsLayer) -> Result<()> {
        let t = &mut self.train;
        let h = &mut t.head;
        let p = &mut self.proposals;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(t.learning_rate, l.learning_rate);
        set!(t.momentum, l.momentum);
        set!(t.weight_decay, l.weight_decay);
        set!(t.batch_size, l.batch_size);
        set!(t.epochs, l.epochs);
        set!(t.seed, l.seed);
        match (l.lr_step_every, l.lr_step_factor) {
            (Some(every), Some(factor)) => t.lr_step = Some((every, factor)),
            (None, None) => {}
            _ => return Err(ToolError::Usage("lr_step_every and lr_step_factor go together".into())),
        }
        set!(h.tau, l.tau);
        set!(h.fusion, named(&l.fusion, "fusion", FusionMode::from_name, "sum, multiply, attention")?);
        set!(h.tuning, named(&l.tuning, "tuning", TuningMode::from_name, "prompt-both, prompt-ocr, prompt-vision, vision-both")?);
        set!(h.share_weights, l.share_weights);
        set!(h.layers, l.layers);
        set!(h.reduction, l.reduction);
        set!(h.rectify_output, l.rectify_output);
        set!(h.use_ocr, l.use_ocr);
        set!(h.use_vision, l.use_vision);
        set!(p.description, named(&l.description, "description", DescriptionMode::from_name, "concat, average")?);
        set!(p.metric, named(&l.link_metric, "link_metric", OverlapMetric::from_name, "iou, iom")?);
        set!(p.threshold, l.link_threshold);
        Ok(())
    }

    /// Every effective value, for report headers.
    pub fn echo(&self) -> Map<String, Value> {
        let t = &self.train;
        let h = &t.head;
        let mut m = Map::new();
        m.insert("seed".into(), json!(t.seed));
        m.insert("learning_rate".into(), json!(t.learning_rate));
        m.insert("momentum".into(), json!(t.momentum));
        m.insert("weight_decay".into(), json!(t.weight_decay));
        m.insert("batch_size".into(), json!(t.batch_size));
        m.insert("epochs".into(), json!(t.epochs));
        m.insert("lr_step".into(), json!(t.lr_step.map(|(e, f)| json!({"every": e, "factor": f}))));
        m.insert("tau".into(), json!(h.tau));
        m.insert("fusion".into(), json!(h.fusion.name()));
        m.insert("tuning".into(), json!(h.tuning.name()));
        m.insert("share_weights".into(), json!(h.share_weights));
        m.insert("layers".into(), json!(h.layers));
        m.insert("reduction".into(), json!(h.reduction));
        m.insert("rectify_output".into(), json!(h.rectify_output));
        m.insert("use_ocr".into(), json!(h.use_ocr));
        m.insert("use_vision".into(), json!(h.use_vision));
        m.insert("description".into(), json!(self.proposals.description.name()));
        m.insert("link_metric".into(), json!(self.proposals.metric.name()));
        m.insert("link_threshold".into(), json!(self.proposals.threshold));
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = SettingsLayer::parse("tau = 0.05\nepochs = 3\nfusion = \"multiply\"\n", "c").unwrap();
        let flags = SettingsLayer { epochs: Some(5), ..Default::default() };
        let s = Settings::resolve(&[&file, &flags]).unwrap();
        assert_eq!(s.train.head.tau, 0.05);
        assert_eq!(s.train.epochs, 5);
        assert_eq!(s.train.head.fusion, FusionMode::Multiply);
        assert_eq!(s.train.batch_size, 64);
        assert_eq!(s.train.learning_rate, 0.002);
    }

    #[test]
    fn unknown_keys_and_values_fail() {
        let e = SettingsLayer::parse("\n\nepoch = 3\n", "c").unwrap_err();
        assert!(e.to_string().starts_with("c:3:"), "{e}");
        let bad = SettingsLayer { tuning: Some("sideways".into()), ..Default::default() };
        assert!(Settings::resolve(&[&bad]).is_err());
        let bad = SettingsLayer { lr_step_every: Some(4), ..Default::default() };
        assert!(Settings::resolve(&[&bad]).is_err());
        let bad = SettingsLayer { batch_size: Some(1), ..Default::default() };
        assert!(Settings::resolve(&[&bad]).is_err());
    }

    #[test]
    fn echo_carries_tau() {
        let s = Settings::resolve(&[]).unwrap();
        assert_eq!(s.echo()["tau"], json!(0.01));
    }
}
