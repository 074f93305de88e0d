//! Box arithmetic and OCR-to-element linking.
//!
//! Linking uses overlap scores between each element box and each OCR box.
//! Intersection over minimum ([`iom`]) is the default metric because OCR
//! boxes usually sit fully inside a much larger element, where IoU stays
//! small even for a perfect match.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// Axis-aligned rectangle in pixel space, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Validates finiteness and strictly positive extent.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox("non-finite coordinate"));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox("zero-area box"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// True when `other` lies inside `self` (boundaries may touch).
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// True when the box fits in `[0, width] × [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

pub fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// Intersection over the smaller box's area.
pub fn iom(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / area(a).min(area(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapMetric {
    Iou,
    #[default]
    Iom,
}

impl OverlapMetric {
    pub fn name(self) -> &'static str {
        match self {
            OverlapMetric::Iou => "iou",
            OverlapMetric::Iom => "iom",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::Iou, Self::Iom].into_iter().find(|m| m.name() == s)
    }

    pub fn score(self, a: &BBox, b: &BBox) -> f64 {
        match self {
            OverlapMetric::Iou => iou(a, b),
            OverlapMetric::Iom => iom(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcrItem {
    pub bbox: BBox,
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementAnnotation {
    pub bbox: BBox,
    pub category: String,
    pub index: usize,
}

/// Result of [`link_ocr`], aligned with the input element order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkAssignment {
    /// OCR indices per element, in reading order.
    pub links: Vec<Vec<usize>>,
    /// Space-joined OCR text per element; empty when nothing linked.
    pub descriptions: Vec<String>,
}

impl LinkAssignment {
    pub fn linked_pairs(&self) -> usize {
        self.links.iter().map(Vec::len).sum()
    }

    pub fn linked_elements(&self) -> usize {
        self.links.iter().filter(|l| !l.is_empty()).count()
    }

    /// Rebuilds an assignment from per-element OCR indices, e.g. links read
    /// back from a file. Each OCR index may appear at most once overall.
    pub fn from_links(ocr: &[OcrItem], links: &[Vec<usize>]) -> Result<Self> {
        let mut taken = alloc::vec![false; ocr.len()];
        let mut matched = Vec::with_capacity(links.len());
        for l in links {
            let mut m = Vec::with_capacity(l.len());
            for &idx in l {
                let pos = ocr.iter().position(|o| o.index == idx).ok_or(Error::InvalidLink("unknown OCR index"))?;
                if core::mem::replace(&mut taken[pos], true) {
                    return Err(Error::InvalidLink("OCR item linked twice"));
                }
                m.push(pos);
            }
            matched.push(m);
        }
        Ok(assemble(ocr, matched))
    }
}

/// Assigns OCR items to elements without replacement.
///
/// Every (element, OCR) pair whose score is strictly above `threshold` is a
/// candidate. Candidates are consumed greedily by descending score, ties going
/// to the smaller element index and then the smaller OCR index. An OCR item is
/// used at most once; an element may collect several. The texts of each
/// element's OCR items are joined with single spaces in reading order
/// (top-to-bottom, then left-to-right); empty texts are skipped.
pub fn link_ocr(
    elements: &[ElementAnnotation],
    ocr: &[OcrItem],
    threshold: f64,
    metric: OverlapMetric,
) -> Result<LinkAssignment> {
    if !threshold.is_finite() || !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidThreshold(threshold));
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in elements.iter().enumerate() {
        for (oi, o) in ocr.iter().enumerate() {
            let s = metric.score(&e.bbox, &o.bbox);
            if s > threshold {
                candidates.push((s, ei, oi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| elements[a.1].index.cmp(&elements[b.1].index))
            .then_with(|| ocr[a.2].index.cmp(&ocr[b.2].index))
    });

    let mut taken = alloc::vec![false; ocr.len()];
    let mut matched: Vec<Vec<usize>> = alloc::vec![Vec::new(); elements.len()];
    for (_, ei, oi) in candidates {
        if !taken[oi] {
            taken[oi] = true;
            matched[ei].push(oi);
        }
    }

    Ok(assemble(ocr, matched))
}

/// Orders each element's OCR positions by reading order and joins texts.
fn assemble(ocr: &[OcrItem], matched: Vec<Vec<usize>>) -> LinkAssignment {
    let mut links = Vec::with_capacity(matched.len());
    let mut descriptions = Vec::with_capacity(matched.len());
    for mut m in matched {
        m.sort_by(|&a, &b| {
            let (ba, bb) = (&ocr[a].bbox, &ocr[b].bbox);
            ba.y1
                .partial_cmp(&bb.y1)
                .unwrap_or(Ordering::Equal)
                .then(ba.x1.partial_cmp(&bb.x1).unwrap_or(Ordering::Equal))
                .then(ocr[a].index.cmp(&ocr[b].index))
        });
        let mut desc = String::new();
        for &oi in &m {
            let t = ocr[oi].text.trim();
            if t.is_empty() {
                continue;
            }
            if !desc.is_empty() {
                desc.push(' ');
            }
            desc.push_str(t);
        }
        links.push(m.iter().map(|&oi| ocr[oi].index).collect());
        descriptions.push(desc);
    }
    LinkAssignment { links, descriptions }
}
