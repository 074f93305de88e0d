//! Detection-style average precision.
//!
//! Per category, detections are ranked by descending score (ties keep input
//! order) and matched greedily against ground truth in the same image at an
//! IoU threshold. AP is the area under the precision envelope (all-point
//! interpolation).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::{CategorySet, ProposalSource, SplitFilter};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::math::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub bbox: BBox,
    pub category: String,
}

/// One detection per (proposal, category) pair, scored by `probs`, whose
/// columns follow `names`.
pub fn detections_from_scores(sources: &[ProposalSource], names: &[String], probs: &Matrix) -> Result<Vec<DetectionRecord>> {
    if probs.rows() != sources.len() || probs.cols() != names.len() {
        return Err(Error::DimensionMismatch { expected: sources.len() * names.len(), found: probs.rows() * probs.cols() });
    }
    let mut out = Vec::with_capacity(sources.len() * names.len());
    for (src, row) in sources.iter().zip(probs.iter_rows()) {
        for (name, &score) in names.iter().zip(row) {
            out.push(DetectionRecord { image_id: src.image_id.clone(), bbox: src.bbox, category: name.clone(), score });
        }
    }
    Ok(out)
}

pub fn ground_truth_from_sources(sources: &[ProposalSource]) -> Vec<GroundTruthRecord> {
    sources
        .iter()
        .map(|s| GroundTruthRecord { image_id: s.image_id.clone(), bbox: s.bbox, category: s.category.clone() })
        .collect()
}

/// Indices of `dets` ordered by descending score, ties by input order.
fn ranked(dets: &[&DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    order
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidThreshold(t));
    }
    Ok(())
}

/// True-positive flags aligned with `dets`.
///
/// Within each (image, category), detections are visited by descending score;
/// each one takes the unmatched ground truth of highest IoU if that IoU
/// reaches `iou_threshold`, otherwise it is a false positive.
pub fn match_detections(dets: &[DetectionRecord], gts: &[GroundTruthRecord], iou_threshold: f64) -> Result<Vec<bool>> {
    check_threshold(iou_threshold)?;
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!("non-finite score for {}", d.image_id)));
    }
    let mut groups: BTreeMap<(&str, &str), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((&d.image_id, &d.category)).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        groups.entry((&g.image_id, &g.category)).or_default().1.push(i);
    }
    let mut tp = vec![false; dets.len()];
    for (det_idx, gt_idx) in groups.values() {
        let group: Vec<&DetectionRecord> = det_idx.iter().map(|&i| &dets[i]).collect();
        let mut matched = vec![false; gt_idx.len()];
        for k in ranked(&group) {
            let mut best: Option<(usize, f64)> = None;
            for (g, &gi) in gt_idx.iter().enumerate() {
                if matched[g] {
                    continue;
                }
                let o = iou(&group[k].bbox, &gts[gi].bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, o)) = best {
                if o >= iou_threshold {
                    matched[g] = true;
                    tp[det_idx[k]] = true;
                }
            }
        }
    }
    Ok(tp)
}

/// All-point interpolated AP of a ranked TP/FP sequence.
///
/// Returns `None` when there is neither ground truth nor any detection (the
/// category is skipped), and `Some(0.0)` when detections exist without
/// ground truth.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if ranked_tp.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAp {
    pub name: String,
    /// `None` when skipped (no ground truth, no detections).
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub split: SplitFilter,
    pub iou_thresholds: Vec<f64>,
    pub per_category: Vec<CategoryAp>,
    /// Mean AP over evaluated categories; 0 when none were evaluated.
    pub mean: f64,
}

impl MapReport {
    pub fn evaluated(&self) -> usize {
        self.per_category.iter().filter(|c| c.ap.is_some()).count()
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Per-category AP over the categories in `split`, averaged over every
/// threshold in `iou_thresholds`, and their mean.
pub fn map_report(
    dets: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    categories: &CategorySet,
    iou_thresholds: &[f64],
    split: SplitFilter,
) -> Result<MapReport> {
    if iou_thresholds.is_empty() {
        return Err(Error::InvalidConfig("no IoU thresholds".into()));
    }
    for t in iou_thresholds {
        check_threshold(*t)?;
    }
    for c in dets.iter().map(|d| &d.category).chain(gts.iter().map(|g| &g.category)) {
        if categories.index_of(c).is_none() {
            return Err(Error::UnknownCategory(c.clone()));
        }
    }
    let wanted = categories.indices(split);
    let flags: Vec<Vec<bool>> =
        iou_thresholds.iter().map(|&t| match_detections(dets, gts, t)).collect::<Result<_>>()?;

    let mut per_category = Vec::with_capacity(wanted.len());
    for &c in &wanted {
        let name = categories.name(c);
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category == name).collect();
        let group: Vec<&DetectionRecord> = idx.iter().map(|&i| &dets[i]).collect();
        let order = ranked(&group);
        let num_gt = gts.iter().filter(|g| g.category == name).count();
        let mut sum = 0.0;
        let mut ap = None;
        for f in &flags {
            let seq: Vec<bool> = order.iter().map(|&k| f[idx[k]]).collect();
            if let Some(a) = average_precision(&seq, num_gt) {
                sum += a;
                ap = Some(sum);
            }
        }
        per_category.push(CategoryAp {
            name: String::from(name),
            ap: ap.map(|s| s / flags.len() as f64),
            num_gt,
            num_det: idx.len(),
        });
    }
    let evaluated: Vec<f64> = per_category.iter().filter_map(|c| c.ap).collect();
    let mean = if evaluated.is_empty() { 0.0 } else { evaluated.iter().sum::<f64>() / evaluated.len() as f64 };
    Ok(MapReport { split, iou_thresholds: iou_thresholds.to_vec(), per_category, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn det(img: &str, b: BBox, cat: &str, score: f64) -> DetectionRecord {
        DetectionRecord { image_id: img.to_string(), bbox: b, category: cat.to_string(), score }
    }

    fn gt(img: &str, b: BBox, cat: &str) -> GroundTruthRecord {
        GroundTruthRecord { image_id: img.to_string(), bbox: b, category: cat.to_string() }
    }

    #[test]
    fn exact_box_is_tp_at_any_threshold() {
        for t in [0.01, 0.5, 1.0] {
            assert_eq!(match_detections(&[det("a", bx(0.0), "c", 0.3)], &[gt("a", bx(0.0), "c")], t).unwrap(), [true]);
        }
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let dets = [det("a", bx(0.0), "c", 0.8), det("a", bx(0.0), "c", 0.9)];
        assert_eq!(match_detections(&dets, &[gt("a", bx(0.0), "c")], 0.5).unwrap(), [false, true]);
    }

    #[test]
    fn low_overlap_is_fp() {
        // width-10 boxes shifted by 3.8: IoU = 6.2 / 13.8 ≈ 0.449
        let d = det("a", BBox::new(3.8, 0.0, 13.8, 10.0).unwrap(), "c", 0.9);
        assert!((iou(&d.bbox, &bx(0.0)) - 0.45).abs() < 0.01);
        assert_eq!(match_detections(&[d], &[gt("a", bx(0.0), "c")], 0.5).unwrap(), [false]);
    }

    #[test]
    fn wrong_image_or_category_never_matches() {
        let dets = [det("b", bx(0.0), "c", 0.9), det("a", bx(0.0), "x", 0.9)];
        assert_eq!(match_detections(&dets, &[gt("a", bx(0.0), "c")], 0.5).unwrap(), [false, false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        assert_eq!(average_precision(&[], 2), Some(0.0));
    }

    #[test]
    fn rejects_bad_thresholds() {
        for t in [0.0, -1.0, 1.01, f64::NAN] {
            assert!(match_detections(&[], &[], t).is_err());
        }
    }
}
