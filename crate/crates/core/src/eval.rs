//! Lesion detection scoring: greedy IoU matching, sensitivity at fixed
//! false positives per image (FROC operating points) and stratified
//! reports.
//!
//! A detection is a true positive when its best still-unmatched ground truth
//! in the same image overlaps it with IoU strictly greater than the
//! threshold (0.5 by default). Note the strict inequality: IoU exactly 0.5
//! is a false positive, unlike most toolkits.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{LesionRecord, Organ, SizeBucket};
use crate::anchors::{iou, Box};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FP_RATES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground-truth lesions")]
    EmptyGroundTruth,
    #[error("image count must be positive")]
    NoImages,
    #[error("ground truth {index} has no {attribute}")]
    MissingAttribute { index: usize, attribute: &'static str },
    #[error("false-positive rate must be finite and >= 0, got {0}")]
    InvalidRate(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_key: String,
    pub bbox: Box<f64>,
    pub score: f64,
}

/// JSON-lines form: `{"image_key": .., "box": [x1, y1, x2, y2], "score": ..}`.
#[derive(Debug, Serialize, Deserialize)]
struct DetectionLine {
    image_key: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

impl Detection {
    pub fn new(image_key: impl Into<String>, bbox: Box<f64>, score: f64) -> Self {
        Self {
            image_key: image_key.into(),
            bbox,
            score,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&DetectionLine {
            image_key: self.image_key.clone(),
            bbox: self.bbox.to_array(),
            score: self.score,
        })
        .expect("plain struct serializes")
    }
}

pub fn parse_detections<R: BufRead>(reader: R) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| EvalError::Parse {
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DetectionLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let bbox = Box::from_array(d.bbox);
        if !bbox.is_valid() {
            return Err(err(format!("invalid box {:?}", d.bbox)));
        }
        if !d.score.is_finite() {
            return Err(err(format!("non-finite score {}", d.score)));
        }
        out.push(Detection::new(d.image_key, bbox, d.score));
    }
    Ok(out)
}

/// Ground-truth lesion with the attributes used for stratification.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_key: String,
    pub bbox: Box<f64>,
    pub organ: Option<Organ>,
    pub long_diameter_mm: Option<f64>,
}

impl GroundTruth {
    pub fn new(image_key: impl Into<String>, bbox: Box<f64>) -> Self {
        Self {
            image_key: image_key.into(),
            bbox,
            organ: None,
            long_diameter_mm: None,
        }
    }
}

impl From<&LesionRecord> for GroundTruth {
    fn from(r: &LesionRecord) -> Self {
        Self {
            image_key: r.image_key.clone(),
            bbox: Box::from_array(r.bbox),
            organ: Some(r.organ),
            long_diameter_mm: Some(r.long_diameter_mm()),
        }
    }
}

/// Number of distinct images among the ground truths and `extra_images`.
pub fn count_images<'a>(gts: &'a [GroundTruth], extra_images: impl IntoIterator<Item = &'a str>) -> usize {
    gts.iter()
        .map(|g| g.image_key.as_str())
        .chain(extra_images)
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    /// Matched the ground truth with this index.
    TruePositive(usize),
    FalsePositive,
}

impl MatchLabel {
    pub fn is_tp(self) -> bool {
        matches!(self, MatchLabel::TruePositive(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// One label per detection, in input order.
    pub labels: Vec<MatchLabel>,
    pub gt_matched: Vec<bool>,
    /// Detection indices in processing order (descending score).
    pub order: Vec<usize>,
}

fn box_cmp(a: &Box<f64>, b: &Box<f64>) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Processing order: score descending, then image key, then box.
pub fn detection_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_key.cmp(&b.image_key))
            .then_with(|| box_cmp(&a.bbox, &b.bbox))
    });
    order
}

/// Greedy matching in descending score order; each ground truth is
/// consumed by at most one detection.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let order = detection_order(dets);
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_matched[gi] || g.image_key != d.image_key {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, o)) = best {
            if o > iou_threshold {
                gt_matched[gi] = true;
                labels[di] = MatchLabel::TruePositive(gi);
            }
        }
    }
    Matching {
        labels,
        gt_matched,
        order,
    }
}

/// Cumulative counts when keeping detections with `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// One operating point per distinct detection score, highest first.
///
/// Greedy matching visits detections in score order, so the matching of the
/// detections above any threshold is a prefix of the full matching.
pub fn operating_points(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Vec<OperatingPoint> {
    let m = match_detections(dets, gts, iou_threshold);
    sweep(dets, &m, |_| true)
}

fn sweep(dets: &[Detection], m: &Matching, counts_tp: impl Fn(usize) -> bool) -> Vec<OperatingPoint> {
    let mut points: Vec<OperatingPoint> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &di) in m.order.iter().enumerate() {
        match m.labels[di] {
            MatchLabel::TruePositive(gi) => {
                if counts_tp(gi) {
                    tp += 1
                }
            }
            MatchLabel::FalsePositive => fp += 1,
        }
        let last_of_score = m
            .order
            .get(k + 1)
            .is_none_or(|&next| dets[next].score != dets[di].score);
        if last_of_score {
            points.push(OperatingPoint {
                threshold: dets[di].score,
                tp,
                fp,
            });
        }
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    pub fp_per_image: f64,
    pub sensitivity: f64,
}

/// Sensitivity at each configured false-positive rate, plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub average: f64,
}

fn check_rates(rates: &[f64]) -> Result<(), EvalError> {
    match rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        Some(&r) => Err(EvalError::InvalidRate(r)),
        None => Ok(()),
    }
}

fn curve_from_points(points: &[OperatingPoint], total_gt: usize, num_images: usize, rates: &[f64]) -> FrocCurve {
    let froc: Vec<FrocPoint> = rates
        .iter()
        .map(|&rate| {
            let best_tp = points
                .iter()
                .filter(|p| p.fp as f64 / num_images as f64 <= rate)
                .map(|p| p.tp)
                .max()
                .unwrap_or(0);
            FrocPoint {
                fp_per_image: rate,
                sensitivity: best_tp as f64 / total_gt as f64,
            }
        })
        .collect();
    let average = if froc.is_empty() {
        0.0
    } else {
        froc.iter().map(|p| p.sensitivity).sum::<f64>() / froc.len() as f64
    };
    FrocCurve { points: froc, average }
}

/// Step-function FROC: for each rate, the best `TP / |gts|` over score
/// thresholds whose `FP / num_images` stays within the rate.
pub fn sensitivity_at_fp(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_images: usize,
    fp_rates: &[f64],
) -> Result<FrocCurve, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    if num_images == 0 {
        return Err(EvalError::NoImages);
    }
    check_rates(fp_rates)?;
    let points = operating_points(dets, gts, DEFAULT_IOU_THRESHOLD);
    Ok(curve_from_points(&points, gts.len(), num_images, fp_rates))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strata {
    Organ,
    Size,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub gt_count: usize,
    /// `None` when the stratum has no ground truth.
    pub curve: Option<FrocCurve>,
}

/// Stratum index of each ground truth.
fn stratum_of(gts: &[GroundTruth], strata: Strata) -> Result<Vec<usize>, EvalError> {
    gts.iter()
        .enumerate()
        .map(|(index, g)| match strata {
            Strata::Organ => g
                .organ
                .map(|o| o as usize)
                .ok_or(EvalError::MissingAttribute { index, attribute: "organ" }),
            Strata::Size => g
                .long_diameter_mm
                .map(|d| SizeBucket::from_long_diameter(d) as usize)
                .ok_or(EvalError::MissingAttribute {
                    index,
                    attribute: "long diameter",
                }),
        })
        .collect()
}

fn stratum_labels(strata: Strata) -> Vec<&'static str> {
    match strata {
        Strata::Organ => Organ::ALL.iter().map(|o| o.name()).collect(),
        Strata::Size => SizeBucket::ALL.iter().map(|b| b.name()).collect(),
    }
}

/// Operating points where `tp` counts only matches to ground truths of each
/// stratum; `fp` stays image-wide. Indexed by stratum.
pub fn stratified_operating_points(
    dets: &[Detection],
    gts: &[GroundTruth],
    strata: Strata,
    iou_threshold: f64,
) -> Result<Vec<Vec<OperatingPoint>>, EvalError> {
    let of = stratum_of(gts, strata)?;
    let m = match_detections(dets, gts, iou_threshold);
    Ok((0..stratum_labels(strata).len())
        .map(|s| sweep(dets, &m, |gi| of[gi] == s))
        .collect())
}

/// One FROC row per organ (code order) or size bucket.
///
/// Matching is done once over all ground truths. Each stratum's sensitivity
/// uses its own true positives and lesion count, while false positives are
/// counted image-wide since unmatched detections carry no organ or size.
pub fn stratified_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_images: usize,
    strata: Strata,
    fp_rates: &[f64],
) -> Result<Vec<ReportRow>, EvalError> {
    if num_images == 0 {
        return Err(EvalError::NoImages);
    }
    check_rates(fp_rates)?;
    let of = stratum_of(gts, strata)?;
    let per_stratum = stratified_operating_points(dets, gts, strata, DEFAULT_IOU_THRESHOLD)?;
    Ok(stratum_labels(strata)
        .into_iter()
        .zip(per_stratum)
        .enumerate()
        .map(|(s, (label, points))| {
            let count = of.iter().filter(|&&x| x == s).count();
            ReportRow {
                label: label.to_string(),
                gt_count: count,
                curve: (count > 0).then(|| curve_from_points(&points, count, num_images, fp_rates)),
            }
        })
        .collect())
}

fn rate_label(rate: f64) -> String {
    format!("FP@{rate}")
}

/// CSV with one row per stratum and sensitivities in percent, two decimals.
/// Strata without lesions print `n/a`.
pub fn render_report_csv(rows: &[ReportRow], fp_rates: &[f64]) -> String {
    let mut out = String::from("stratum");
    for &r in fp_rates {
        out.push(',');
        out.push_str(&rate_label(r));
    }
    out.push_str(",Average\n");
    for row in rows {
        out.push_str(&row.label);
        match &row.curve {
            Some(c) => {
                for p in &c.points {
                    out.push_str(&format!(",{:.2}", 100.0 * p.sensitivity));
                }
                out.push_str(&format!(",{:.2}", 100.0 * c.average));
            }
            None => {
                for _ in 0..=fp_rates.len() {
                    out.push_str(",n/a");
                }
            }
        }
        out.push('\n');
    }
    out
}
