//! Glue: per-image detection, tile dataset construction for training, and
//! the NBA/resolution bench sweep.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::detector::{decode_grid, predict_tiles, DecodeMode, Detection, Detector, TinyGridNet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, prior_from_samples, EvalConfig};
use crate::fusion::{merge_detections, FusionConfig};
use crate::image::ImageBuffer;
use crate::scalar::Real;
use crate::tiling::{global_to_tile, plan_tiles, BBox, ObjectSizePrior, TilePlan};
use crate::training::{rasterize_targets, train, TrainConfig, TrainSample};

/// Detections plus bookkeeping for one image.
#[derive(Clone, Debug)]
pub struct DetectOutcome {
    pub detections: Vec<Detection>,
    pub tiles: usize,
    pub elapsed_ms: f64,
}

/// Run plan extraction, per-tile inference, decoding and fusion on one
/// image.
pub fn detect_image<S: Real, D: Detector<S>>(
    detector: &D,
    image: &ImageBuffer,
    image_id: &str,
    plan: &TilePlan,
    threshold: f64,
    mode: DecodeMode,
    fusion: &FusionConfig,
) -> Result<DetectOutcome> {
    let start = Instant::now();
    let predictions = predict_tiles(detector, plan, image, image_id)?;
    let per_tile: Vec<_> = predictions
        .into_iter()
        .map(|p| decode_grid(&p.grid, threshold, mode).map(|d| (p.region, d)))
        .collect::<Result<_>>()?;
    let detections = merge_detections(&per_tile, plan, fusion)?;
    Ok(DetectOutcome {
        detections,
        tiles: plan.regions.len(),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Turn annotated images into per-tile training samples: plan each image,
/// extract every tile, and rasterize the centers of the boxes whose center
/// falls inside the tile's region.
///
/// `target_nba = None` skips tiling (one full-image tile per sample).
pub fn build_tile_dataset(
    samples: &[Sample],
    prior: Option<&ObjectSizePrior>,
    target_nba: Option<f64>,
    resolution: u32,
    grid_stride: usize,
    num_classes: usize,
) -> Result<Vec<TrainSample>> {
    if resolution == 0 || resolution as usize % grid_stride != 0 {
        return Err(Error::invalid(format!(
            "resolution {resolution} must be a positive multiple of the grid stride {grid_stride}"
        )));
    }
    let derived;
    let prior = match (prior, target_nba) {
        (Some(p), _) => Some(p),
        (None, Some(_)) => {
            derived = prior_from_samples(samples)?;
            Some(&derived)
        }
        (None, None) => None,
    };

    let n = resolution as usize / grid_stride;
    let mut out = Vec::new();
    for sample in samples {
        let plan = match target_nba {
            Some(target) => plan_tiles(
                sample.image.dims(),
                prior.expect("prior present when tiling"),
                target,
                resolution,
            )?,
            None => TilePlan::full_image(sample.image.dims(), resolution)?,
        };
        for region in &plan.regions {
            let tile = crate::tiling::extract_tile(&sample.image, region, resolution)?;
            let mut local_boxes: Vec<BBox> = Vec::new();
            for b in &sample.boxes {
                let (cx, cy) = b.center();
                if !region.contains_point(cx, cy) {
                    continue;
                }
                let (ax, ay) = global_to_tile((b.x_min, b.y_min), region, resolution);
                let (bx, by) = global_to_tile((b.x_max, b.y_max), region, resolution);
                local_boxes.push(BBox {
                    x_min: ax,
                    y_min: ay,
                    x_max: bx,
                    y_max: by,
                    class_id: b.class_id,
                });
            }
            let target = rasterize_targets(&local_boxes, n, grid_stride as f64, num_classes)?;
            out.push(TrainSample { tile, target });
        }
    }
    Ok(out)
}

/// One row of the bench sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub target_nba: f64,
    pub resolution: u32,
    pub tiles_per_image: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mae: f64,
    pub ms_per_image: f64,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub targets: Vec<f64>,
    pub resolutions: Vec<u32>,
    pub threshold: f64,
    pub mode: DecodeMode,
    pub dedup_radius: Option<f64>,
    pub train: TrainConfig,
    pub num_classes: usize,
}

impl SweepConfig {
    /// The sweep the bench runs by default: four NBA targets, three input
    /// resolutions.
    pub fn standard(train: TrainConfig) -> Self {
        Self {
            targets: vec![0.002, 0.004, 0.006, 0.008],
            resolutions: vec![96, 128, 192],
            threshold: 0.5,
            mode: DecodeMode::PerCell,
            dedup_radius: None,
            train,
            num_classes: 1,
        }
    }
}

/// Train one detector per (target NBA, resolution) cell on the training
/// split and evaluate it on the held-out split. Rows come out target-major.
pub fn run_sweep(
    train_samples: &[Sample],
    eval_samples: &[Sample],
    cfg: &SweepConfig,
) -> Result<Vec<BenchRow>> {
    if cfg.targets.is_empty() || cfg.resolutions.is_empty() {
        return Err(Error::invalid("sweep needs at least one target and resolution"));
    }
    let train_prior = prior_from_samples(train_samples)?;
    let mut rows = Vec::with_capacity(cfg.targets.len() * cfg.resolutions.len());
    for &target in &cfg.targets {
        for &resolution in &cfg.resolutions {
            log::info!("sweep cell: target NBA {target}, resolution {resolution}");
            let mut net = TinyGridNet::<f32>::new(cfg.num_classes, cfg.train.rng_seed);
            let tiles = build_tile_dataset(
                train_samples,
                Some(&train_prior),
                Some(target),
                resolution,
                net.total_stride(),
                cfg.num_classes,
            )?;
            train(&mut net, &tiles, &cfg.train)?;

            let eval_cfg = EvalConfig {
                target_nba: Some(target),
                output_resolution: resolution,
                threshold: cfg.threshold,
                mode: cfg.mode,
                dedup_radius: cfg.dedup_radius,
                loss_kind: Some(cfg.train.loss_kind),
                collect_timing: true,
                prior: None,
            };
            let report = evaluate(&net, eval_samples, &eval_cfg)?;
            let latency = report.latency.expect("timing was requested");
            rows.push(BenchRow {
                target_nba: target,
                resolution,
                tiles_per_image: latency.mean_tiles_per_image,
                f1: report.f1,
                precision: report.precision,
                recall: report.recall,
                mae: report.count_mae,
                ms_per_image: latency.mean_ms_per_image,
            });
        }
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str =
    "target_nba,resolution,tiles_per_image,f1,precision,recall,mae,ms_per_image";

pub fn sweep_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.3}\n",
            r.target_nba,
            r.resolution,
            r.tiles_per_image,
            r.f1,
            r.precision,
            r.recall,
            r.mae,
            r.ms_per_image
        ));
    }
    out
}

/// Mean tiles-per-image ratio between two swept NBA targets, e.g. 0.008
/// against 0.002.
pub fn tile_count_ratio(rows: &[BenchRow], target_hi: f64, target_lo: f64) -> Option<f64> {
    let mean_tiles = |t: f64| {
        let selected: Vec<f64> = rows
            .iter()
            .filter(|r| (r.target_nba - t).abs() < 1e-12)
            .map(|r| r.tiles_per_image)
            .collect();
        if selected.is_empty() {
            None
        } else {
            Some(selected.iter().sum::<f64>() / selected.len() as f64)
        }
    };
    match (mean_tiles(target_hi), mean_tiles(target_lo)) {
        (Some(hi), Some(lo)) if lo > 0.0 => Some(hi / lo),
        _ => None,
    }
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
