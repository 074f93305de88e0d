//! Screenshot annotations, category splits, and assembly of proposal batches.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{link_ocr, BBox, ElementAnnotation, LinkAssignment, OcrItem, OverlapMetric};
use crate::head::ProposalBatch;
use crate::math::Matrix;
use crate::store::{image_key, normalize_text, resolve_description_embedding, DescriptionMode, EmbeddingStore};

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub elements: Vec<ElementAnnotation>,
    pub ocr: Vec<OcrItem>,
    /// Present once OCR linking has run.
    pub links: Option<LinkAssignment>,
}

impl ScreenAnnotation {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!("{}: width and height must be positive", self.image_id)));
        }
        let mut seen = BTreeSet::new();
        for e in &self.elements {
            if !e.bbox.within(w, h) {
                return Err(Error::InvalidBox("element box outside the image"));
            }
            if e.category.is_empty() {
                return Err(Error::InvalidConfig(format!("{}: empty element category", self.image_id)));
            }
            if !seen.insert(e.index) {
                return Err(Error::InvalidConfig(format!("{}: duplicate element index {}", self.image_id, e.index)));
            }
        }
        seen.clear();
        for o in &self.ocr {
            if !o.bbox.within(w, h) {
                return Err(Error::InvalidBox("OCR box outside the image"));
            }
            if !seen.insert(o.index) {
                return Err(Error::InvalidConfig(format!("{}: duplicate OCR index {}", self.image_id, o.index)));
            }
        }
        if let Some(l) = &self.links {
            if l.links.len() != self.elements.len() || l.descriptions.len() != self.elements.len() {
                return Err(Error::InvalidConfig(format!("{}: link list does not match elements", self.image_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitFilter {
    #[default]
    All,
    Base,
    Novel,
}

impl SplitFilter {
    pub fn admits(self, s: Split) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Base => s == Split::Base,
            SplitFilter::Novel => s == Split::Novel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitFilter::All => "all",
            SplitFilter::Base => "base",
            SplitFilter::Novel => "novel",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Self::All),
            "base" => Some(Self::Base),
            "novel" => Some(Self::Novel),
            _ => None,
        }
    }
}

/// Ordered, uniquely named categories with their base/novel split.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySet {
    entries: Vec<(String, Split)>,
}

impl CategorySet {
    pub fn new(entries: Vec<(String, Split)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, _) in &entries {
            if name.is_empty() {
                return Err(Error::InvalidConfig("empty category name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate category {name:?}")));
            }
        }
        if !entries.iter().any(|(_, s)| *s == Split::Base) {
            return Err(Error::InvalidConfig("at least one base category is required".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn split(&self, idx: usize) -> Split {
        self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), *s))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Indices admitted by `filter`, in set order.
    pub fn indices(&self, filter: SplitFilter) -> Vec<usize> {
        (0..self.len()).filter(|&i| filter.admits(self.entries[i].1)).collect()
    }

    pub fn has_novel(&self) -> bool {
        self.entries.iter().any(|(_, s)| *s == Split::Novel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalOptions {
    pub threshold: f64,
    pub metric: OverlapMetric,
    pub description: DescriptionMode,
    /// Only keep elements whose category passes this filter; labels index
    /// into the filtered category list.
    pub filter: SplitFilter,
}

impl Default for ProposalOptions {
    fn default() -> Self {
        Self { threshold: 0.5, metric: OverlapMetric::Iom, description: DescriptionMode::Concat, filter: SplitFilter::All }
    }
}

/// Where a proposal row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSource {
    pub image_id: String,
    pub element: usize,
    pub bbox: BBox,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProposals {
    pub batch: ProposalBatch,
    pub sources: Vec<ProposalSource>,
    /// Category names that labels index into.
    pub label_names: Vec<String>,
}

/// One proposal per ground-truth element.
///
/// Links stored on the annotation are reused; otherwise OCR is linked with
/// `options`. Every missing embedding key is collected before failing.
pub fn build_proposals(
    screens: &[ScreenAnnotation],
    store: &EmbeddingStore,
    categories: &CategorySet,
    options: &ProposalOptions,
) -> Result<LabeledProposals> {
    let kept = categories.indices(options.filter);
    let label_names: Vec<String> = kept.iter().map(|&i| categories.name(i).to_string()).collect();
    let mut vision = Vec::new();
    let mut ocr = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    let mut missing: BTreeSet<String> = BTreeSet::new();

    for s in screens {
        let links = match &s.links {
            Some(l) => l.clone(),
            None => link_ocr(&s.elements, &s.ocr, options.threshold, options.metric)?,
        };
        for (k, e) in s.elements.iter().enumerate() {
            let Some(cat) = categories.index_of(&e.category) else {
                return Err(Error::UnknownCategory(e.category.clone()));
            };
            let Some(label) = kept.iter().position(|&c| c == cat) else {
                continue;
            };
            let vkey = image_key(&s.image_id, e.index);
            let v = store.vector(&vkey);
            let phrases: Vec<String> = links.links[k]
                .iter()
                .filter_map(|&oi| s.ocr.iter().find(|o| o.index == oi))
                .map(|o| normalize_text(&o.text))
                .filter(|t| !t.is_empty())
                .collect();
            let o = resolve_description_embedding(store, &phrases, options.description);
            match (v, o) {
                (Ok(v), Ok(o)) => {
                    vision.push(v);
                    ocr.push(o);
                    labels.push(label);
                    sources.push(ProposalSource {
                        image_id: s.image_id.clone(),
                        element: e.index,
                        bbox: e.bbox,
                        category: e.category.clone(),
                    });
                }
                (v, o) => {
                    for err in [v.err(), o.err()].into_iter().flatten() {
                        if let Error::MissingKey(key) = err {
                            missing.insert(key);
                        } else {
                            return Err(err);
                        }
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing.into_iter().collect()));
    }
    let d = store.dim();
    let to_matrix = |rows: &[Vec<f64>]| {
        if rows.is_empty() {
            Ok(Matrix::zeros(0, d))
        } else {
            Matrix::from_rows(rows)
        }
    };
    let batch = ProposalBatch::new(to_matrix(&vision)?, to_matrix(&ocr)?, Some(labels))?;
    Ok(LabeledProposals { batch, sources, label_names })
}
