//! Map per-tile detections into the global frame and deduplicate the
//! copies that overlapping tiles produce.
//!
//! Deduplication is greedy score-ordered radius suppression on centroids:
//! the highest-scoring detection wins and removes same-class detections
//! within the dedup radius. Point detections have no extent, so IoU-style
//! suppression does not apply here.

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, Frame};
use crate::error::{Error, Result};
use crate::tiling::{tile_to_global, ObjectSizePrior, TilePlan, TileRegion};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Suppression radius in global-frame pixels.
    pub dedup_radius: f64,
}

impl FusionConfig {
    pub fn new(dedup_radius: f64) -> Result<Self> {
        if !(dedup_radius >= 0.0) {
            return Err(Error::invalid("dedup radius must be >= 0"));
        }
        Ok(Self { dedup_radius })
    }

    /// Default radius: half the prior's average object width.
    pub fn from_prior(prior: &ObjectSizePrior) -> Self {
        Self {
            dedup_radius: 0.5 * prior.avg_width,
        }
    }
}

/// Deterministic ordering for suppression: score descending, ties by
/// (cy, cx) then class.
fn suppression_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.cy.total_cmp(&b.cy))
        .then(a.cx.total_cmp(&b.cx))
        .then(a.class_id.cmp(&b.class_id))
}

/// Map tile-local detections to the global frame and greedily suppress
/// same-class detections within the dedup radius of an already-accepted
/// one. A radius of zero disables suppression entirely. The accepted list
/// comes back sorted by descending score.
pub fn merge_detections(
    per_tile: &[(TileRegion, Vec<Detection>)],
    plan: &TilePlan,
    cfg: &FusionConfig,
) -> Result<Vec<Detection>> {
    let mut global: Vec<Detection> = Vec::new();
    for (region, dets) in per_tile {
        for d in dets {
            if d.frame != Frame::TileLocal {
                return Err(Error::invalid(
                    "merge_detections expects tile-local detections",
                ));
            }
            let (cx, cy) = tile_to_global((d.cx, d.cy), region, plan.output_resolution);
            global.push(Detection {
                cx,
                cy,
                frame: Frame::Global,
                ..*d
            });
        }
    }
    global.sort_by(suppression_order);

    if cfg.dedup_radius == 0.0 {
        return Ok(global);
    }
    let r2 = cfg.dedup_radius * cfg.dedup_radius;
    let mut accepted: Vec<Detection> = Vec::with_capacity(global.len());
    for d in global {
        let duplicate = accepted.iter().any(|a| {
            a.class_id == d.class_id
                && (a.cx - d.cx).powi(2) + (a.cy - d.cy).powi(2) <= r2
        });
        if !duplicate {
            accepted.push(d);
        }
    }
    Ok(accepted)
}
