//! Matching, precision/recall/F1, count MAE, and the end-to-end
//! evaluation driver.
//!
//! A predicted centroid is a true positive iff it lies inside a
//! not-yet-matched ground-truth box of the same class; matching is
//! score-greedy and one-to-one, so duplicate predictions on one object
//! count as false positives.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::detector::{DecodeMode, Detection, Detector};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::image::ImageBuffer;
use crate::pipeline::detect_image;
use crate::scalar::Real;
use crate::tiling::{plan_tiles, BBox, ObjectSizePrior, TilePlan};
use crate::training::LossKind;

/// Published CARPK reference results, echoed in reports for context.
/// These are reporting constants, not values this crate recomputes.
pub mod reference {
    /// Original grid detector on CARPK.
    pub const CARPK_FOMO_F1: f64 = 0.28;
    pub const CARPK_FOMO_MAE: f64 = 54.32;
    /// Adaptive-tiling variant on CARPK.
    pub const CARPK_TILED_F1: f64 = 0.91;
    pub const CARPK_TILED_MAE: f64 = 12.9;
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// (detection index, ground-truth index) for every true positive.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching: detections in descending score order claim
/// the nearest-centered unmatched ground-truth box of their class that
/// contains their centroid.
pub fn match_detections(dets: &[Detection], gts: &[BBox]) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].cy.total_cmp(&dets[b].cy))
            .then(dets[a].cx.total_cmp(&dets[b].cx))
    });

    let mut matched = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for &di in &order {
        let d = &dets[di];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, g)| {
                !matched[*gi] && g.class_id == d.class_id && g.contains(d.cx, d.cy)
            })
            .min_by(|(_, a), (_, b)| {
                let (acx, acy) = a.center();
                let (bcx, bcy) = b.center();
                let da = (acx - d.cx).powi(2) + (acy - d.cy).powi(2);
                let db = (bcx - d.cx).powi(2) + (bcy - d.cy).powi(2);
                da.total_cmp(&db)
            })
            .map(|(gi, _)| gi);
        if let Some(gi) = best {
            matched[gi] = true;
            pairs.push((di, gi));
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    }
}

/// Precision, recall and F1 from pooled counts; zero when undefined.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Mean absolute count error over (predicted, ground truth) pairs.
pub fn count_mae(per_image: &[(usize, usize)]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::invalid("count MAE over an empty image list"));
    }
    let sum: f64 = per_image
        .iter()
        .map(|&(pred, gt)| (pred as f64 - gt as f64).abs())
        .sum();
    Ok(sum / per_image.len() as f64)
}

/// Parameters of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// `None` evaluates the no-tiling baseline (a single full-image tile).
    pub target_nba: Option<f64>,
    pub output_resolution: u32,
    pub threshold: f64,
    pub mode: DecodeMode,
    /// `None` uses the default of half the prior's average object width.
    pub dedup_radius: Option<f64>,
    /// Echoed into the report; informational only.
    pub loss_kind: Option<LossKind>,
    /// Measure wall-clock latency. Off for byte-reproducible reports.
    pub collect_timing: bool,
    /// Object-size prior; derived from the dataset labels when `None`.
    pub prior: Option<ObjectSizePrior>,
}

impl EvalConfig {
    pub fn new(target_nba: Option<f64>, output_resolution: u32, threshold: f64, mode: DecodeMode) -> Self {
        Self {
            target_nba,
            output_resolution,
            threshold,
            mode,
            dedup_radius: None,
            loss_kind: None,
            collect_timing: true,
            prior: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageCounts {
    pub id: String,
    pub predicted: usize,
    pub ground_truth: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms_per_image: f64,
    pub total_ms: f64,
    pub mean_tiles_per_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub target_nba: Option<f64>,
    pub resolution: u32,
    pub threshold: f64,
    pub mode: DecodeMode,
    pub loss_kind: Option<LossKind>,
    pub dedup_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub carpk_fomo_f1: f64,
    pub carpk_fomo_mae: f64,
    pub carpk_tiled_f1: f64,
    pub carpk_tiled_mae: f64,
}

impl Default for ReferenceScores {
    fn default() -> Self {
        Self {
            carpk_fomo_f1: reference::CARPK_FOMO_F1,
            carpk_fomo_mae: reference::CARPK_FOMO_MAE,
            carpk_tiled_f1: reference::CARPK_TILED_F1,
            carpk_tiled_mae: reference::CARPK_TILED_MAE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count_mae: f64,
    pub per_image: Vec<PerImageCounts>,
    pub config: ConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencyStats>,
    pub reference: ReferenceScores,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("report JSON: {e}")))
    }
}

/// Prior from every labeled box in the dataset, each box normalized by its
/// own image's area.
pub fn prior_from_samples(samples: &[Sample]) -> Result<ObjectSizePrior> {
    let mut count = 0usize;
    let (mut sw, mut sh, mut sn) = (0.0f64, 0.0f64, 0.0f64);
    for s in samples {
        let (w, h) = s.image.dims();
        let area = w as f64 * h as f64;
        for b in &s.boxes {
            sw += b.width();
            sh += b.height();
            sn += b.area() / area;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "cannot derive an object-size prior: dataset has no boxes",
        ));
    }
    let n = count as f64;
    ObjectSizePrior::new(sw / n, sh / n, sn / n)
}

struct ImageOutcome {
    counts: PerImageCounts,
    tiles: usize,
    elapsed_ms: f64,
}

/// Run the full pipeline (plan, extract, predict, decode, fuse, match) over
/// the dataset and aggregate micro-averaged metrics. Deterministic for a
/// fixed detector and config; latency fields are the only nondeterministic
/// output and can be disabled via `collect_timing`.
pub fn evaluate<S: Real, D: Detector<S>>(
    detector: &D,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::invalid("threshold must lie in (0, 1)"));
    }
    let prior = match cfg.prior {
        Some(p) => Some(p),
        None => match prior_from_samples(samples) {
            Ok(p) => Some(p),
            Err(_) => None,
        },
    };
    let dedup_radius = match (cfg.dedup_radius, prior.as_ref()) {
        (Some(r), _) => r,
        (None, Some(p)) => FusionConfig::from_prior(p).dedup_radius,
        (None, None) => {
            return Err(Error::invalid(
                "no dedup radius: provide one or a dataset with labeled boxes",
            ))
        }
    };
    if cfg.target_nba.is_some() && prior.is_none() {
        return Err(Error::invalid(
            "adaptive tiling needs an object-size prior or labeled boxes",
        ));
    }
    let fusion = FusionConfig::new(dedup_radius)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));

    let outcomes: Vec<Result<ImageOutcome>> = order
        .par_iter()
        .map(|&i| {
            let sample = &samples[i];
            evaluate_image(detector, sample, cfg, prior.as_ref(), &fusion)
                .map_err(|e| e.with_context(format!("image `{}`", sample.id)))
        })
        .collect();

    let mut per_image = Vec::with_capacity(samples.len());
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut total_ms = 0.0;
    let mut total_tiles = 0usize;
    for outcome in outcomes {
        let o = outcome?;
        tp += o.counts.tp;
        fp += o.counts.fp;
        fn_ += o.counts.fn_;
        total_ms += o.elapsed_ms;
        total_tiles += o.tiles;
        per_image.push(o.counts);
    }
    let (precision, recall, f1) = prf1(tp, fp, fn_);
    let counts: Vec<(usize, usize)> = per_image
        .iter()
        .map(|p| (p.predicted, p.ground_truth))
        .collect();
    let mae = count_mae(&counts)?;

    let latency = cfg.collect_timing.then(|| LatencyStats {
        mean_ms_per_image: total_ms / per_image.len() as f64,
        total_ms,
        mean_tiles_per_image: total_tiles as f64 / per_image.len() as f64,
    });

    Ok(EvalReport {
        precision,
        recall,
        f1,
        count_mae: mae,
        per_image,
        config: ConfigEcho {
            target_nba: cfg.target_nba,
            resolution: cfg.output_resolution,
            threshold: cfg.threshold,
            mode: cfg.mode,
            loss_kind: cfg.loss_kind,
            dedup_radius,
        },
        latency,
        reference: ReferenceScores::default(),
    })
}

fn evaluate_image<S: Real, D: Detector<S>>(
    detector: &D,
    sample: &Sample,
    cfg: &EvalConfig,
    prior: Option<&ObjectSizePrior>,
    fusion: &FusionConfig,
) -> Result<ImageOutcome> {
    let plan = build_plan(sample.image.dims(), cfg, prior)?;
    let outcome = detect_image(
        detector,
        &sample.image,
        &sample.id,
        &plan,
        cfg.threshold,
        cfg.mode,
        fusion,
    )?;
    let m = match_detections(&outcome.detections, &sample.boxes);
    Ok(ImageOutcome {
        counts: PerImageCounts {
            id: sample.id.clone(),
            predicted: outcome.detections.len(),
            ground_truth: sample.boxes.len(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        },
        tiles: outcome.tiles,
        elapsed_ms: outcome.elapsed_ms,
    })
}

/// Plan for one image under an evaluation config: adaptive when a target
/// NBA is set, a single full-image tile otherwise.
pub fn build_plan(
    dims: (u32, u32),
    cfg: &EvalConfig,
    prior: Option<&ObjectSizePrior>,
) -> Result<TilePlan> {
    match cfg.target_nba {
        Some(target) => {
            let prior = prior.ok_or_else(|| {
                Error::invalid("adaptive tiling needs an object-size prior")
            })?;
            plan_tiles(dims, prior, target, cfg.output_resolution)
        }
        None => TilePlan::full_image(dims, cfg.output_resolution),
    }
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

const TP_GREEN: [u8; 3] = [40, 200, 60];
const GT_BLUE: [u8; 3] = [60, 100, 255];
const FP_RED: [u8; 3] = [230, 40, 40];
const MISS_PURPLE: [u8; 3] = [170, 50, 210];

/// Draw the evaluation verdict onto a copy of the image: true-positive
/// detections in green, matched ground-truth boxes in blue, false-positive
/// detections in red and missed ground-truth boxes in purple.
pub fn render_overlay(
    image: &ImageBuffer,
    detections: &[Detection],
    gts: &[BBox],
    m: &MatchResult,
) -> ImageBuffer {
    let mut out = image.clone();
    let matched_dets: Vec<bool> = {
        let mut v = vec![false; detections.len()];
        for &(di, _) in &m.pairs {
            v[di] = true;
        }
        v
    };
    let matched_gts: Vec<bool> = {
        let mut v = vec![false; gts.len()];
        for &(_, gi) in &m.pairs {
            v[gi] = true;
        }
        v
    };
    for (g, &hit) in gts.iter().zip(&matched_gts) {
        let color = if hit { GT_BLUE } else { MISS_PURPLE };
        draw_rect(&mut out, g.x_min, g.y_min, g.x_max, g.y_max, color);
    }
    for (d, &hit) in detections.iter().zip(&matched_dets) {
        let color = if hit { TP_GREEN } else { FP_RED };
        draw_marker(&mut out, d.cx, d.cy, color);
    }
    out
}

fn draw_rect(img: &mut ImageBuffer, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let (w, h) = img.dims();
    let clamp_x = |v: f64| (v.round().max(0.0) as u32).min(w.saturating_sub(1));
    let clamp_y = |v: f64| (v.round().max(0.0) as u32).min(h.saturating_sub(1));
    let (ax, ay, bx, by) = (clamp_x(x0), clamp_y(y0), clamp_x(x1), clamp_y(y1));
    for x in ax..=bx {
        img.put_pixel(x, ay, color);
        img.put_pixel(x, by, color);
    }
    for y in ay..=by {
        img.put_pixel(ax, y, color);
        img.put_pixel(bx, y, color);
    }
}

fn draw_marker(img: &mut ImageBuffer, cx: f64, cy: f64, color: [u8; 3]) {
    let (w, h) = img.dims();
    let x = cx.round() as i64;
    let y = cy.round() as i64;
    for dy in -3i64..=3 {
        for dx in -3i64..=3 {
            if dx.abs() == 3 || dy.abs() == 3 || (dx == 0 && dy == 0) {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}
