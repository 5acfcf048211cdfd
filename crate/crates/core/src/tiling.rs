//! Adaptive overlapping tile layouts driven by an object-size prior.
//!
//! The planner works from the normalized bounding-box area (NBA) of the
//! objects to detect: given the dataset's source NBA and a target NBA, it
//! chooses a k x k grid of tiles so the objects' relative size after tiling
//! meets or exceeds the target, with adjacent tiles overlapping by 1.5x the
//! average object extent so every object is fully visible in at least one
//! tile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Axis-aligned box in continuous pixel coordinates, origin top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: usize) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::invalid(format!(
                "degenerate box [{x_min},{y_min},{x_max},{y_max}]: zero or negative area"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Inclusive containment test for a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Average object extent plus its normalized bounding-box area, used as the
/// size prior the planner works from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSizePrior {
    pub avg_width: f64,
    pub avg_height: f64,
    pub source_nba: f64,
}

impl ObjectSizePrior {
    pub fn new(avg_width: f64, avg_height: f64, source_nba: f64) -> Result<Self> {
        if !(avg_width > 0.0 && avg_height > 0.0) {
            return Err(Error::invalid("prior extents must be positive"));
        }
        if !(source_nba > 0.0 && source_nba <= 1.0) {
            return Err(Error::invalid(format!(
                "source NBA must lie in (0, 1], got {source_nba}"
            )));
        }
        Ok(Self {
            avg_width,
            avg_height,
            source_nba,
        })
    }

    /// Prior from an NBA value alone, assuming square objects.
    pub fn from_nba(source_nba: f64, image_dims: (u32, u32)) -> Result<Self> {
        if !(source_nba > 0.0 && source_nba <= 1.0) {
            return Err(Error::invalid(format!(
                "source NBA must lie in (0, 1], got {source_nba}"
            )));
        }
        let (w, h) = check_dims(image_dims)?;
        let side = (source_nba * w * h).sqrt();
        Self::new(side, side, source_nba)
    }
}

/// Normalized bounding-box area: box area divided by image area, in (0, 1].
pub fn compute_nba(bbox: &BBox, image_dims: (u32, u32)) -> Result<f64> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::invalid("degenerate box: zero area"));
    }
    let (w, h) = check_dims(image_dims)?;
    Ok(bbox.area() / (w * h))
}

/// Object-size prior from labeled boxes: arithmetic mean extents and the
/// mean per-box NBA.
pub fn dataset_prior(boxes: &[BBox], image_dims: (u32, u32)) -> Result<ObjectSizePrior> {
    if boxes.is_empty() {
        return Err(Error::invalid("cannot derive a prior from zero boxes"));
    }
    let n = boxes.len() as f64;
    let avg_width = boxes.iter().map(BBox::width).sum::<f64>() / n;
    let avg_height = boxes.iter().map(BBox::height).sum::<f64>() / n;
    let mut nba_sum = 0.0;
    for b in boxes {
        nba_sum += compute_nba(b, image_dims)?;
    }
    ObjectSizePrior::new(avg_width, avg_height, nba_sum / n)
}

fn check_dims(dims: (u32, u32)) -> Result<(f64, f64)> {
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    Ok((dims.0 as f64, dims.1 as f64))
}

/// One tile's crop rectangle in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRegion {
    pub row: u32,
    pub col: u32,
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl TileRegion {
    /// Half-open membership test for a point in the global frame.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64
            && x < (self.x0 + self.width) as f64
            && y >= self.y0 as f64
            && y < (self.y0 + self.height) as f64
    }

    /// True when the box lies entirely within the region.
    pub fn contains_box(&self, b: &BBox) -> bool {
        b.x_min >= self.x0 as f64
            && b.x_max <= (self.x0 + self.width) as f64
            && b.y_min >= self.y0 as f64
            && b.y_max <= (self.y0 + self.height) as f64
    }
}

/// The overlapping tile layout for one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub overlap_x: u32,
    pub overlap_y: u32,
    /// Row-major: index = row * tiles_x + col.
    pub regions: Vec<TileRegion>,
    pub source_dims: (u32, u32),
    pub output_resolution: u32,
}

#[derive(Serialize, Deserialize)]
struct PlanDoc {
    tiles_x: u32,
    tiles_y: u32,
    overlap_x: u32,
    overlap_y: u32,
    output_resolution: u32,
    regions: Vec<TileRegion>,
}

impl TilePlan {
    /// Trivial single-tile plan covering the whole image.
    pub fn full_image(image_dims: (u32, u32), output_resolution: u32) -> Result<Self> {
        check_dims(image_dims)?;
        if output_resolution == 0 {
            return Err(Error::invalid("output resolution must be positive"));
        }
        Ok(Self {
            tiles_x: 1,
            tiles_y: 1,
            overlap_x: 0,
            overlap_y: 0,
            regions: vec![TileRegion {
                row: 0,
                col: 0,
                x0: 0,
                y0: 0,
                width: image_dims.0,
                height: image_dims.1,
            }],
            source_dims: image_dims,
            output_resolution,
        })
    }

    /// Area scale factor that tiling applies to an average object,
    /// ignoring the overlap bands: (tiles_x * tiles_y).
    pub fn content_scale(&self) -> f64 {
        (self.tiles_x * self.tiles_y) as f64
    }

    pub fn to_json(&self) -> String {
        let doc = PlanDoc {
            tiles_x: self.tiles_x,
            tiles_y: self.tiles_y,
            overlap_x: self.overlap_x,
            overlap_y: self.overlap_y,
            output_resolution: self.output_resolution,
            regions: self.regions.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("plan serializes")
    }

    /// Parse a plan document. The source dimensions are recovered from the
    /// region extents (the regions of a valid plan tile the image exactly).
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PlanDoc =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("plan JSON: {e}")))?;
        if doc.regions.is_empty() {
            return Err(Error::invalid("plan JSON has no regions"));
        }
        if doc.regions.len() != (doc.tiles_x * doc.tiles_y) as usize {
            return Err(Error::invalid(format!(
                "plan JSON lists {} regions for a {}x{} grid",
                doc.regions.len(),
                doc.tiles_x,
                doc.tiles_y
            )));
        }
        let width = doc.regions.iter().map(|r| r.x0 + r.width).max().unwrap();
        let height = doc.regions.iter().map(|r| r.y0 + r.height).max().unwrap();
        Ok(Self {
            tiles_x: doc.tiles_x,
            tiles_y: doc.tiles_y,
            overlap_x: doc.overlap_x,
            overlap_y: doc.overlap_y,
            regions: doc.regions,
            source_dims: (width, height),
            output_resolution: doc.output_resolution,
        })
    }
}

/// Plan an overlapping tile layout that raises the average object's NBA from
/// the prior's value to at least `target_nba`.
///
/// The tile count per axis is `k = ceil(sqrt(target / source))`, applied to
/// both axes. Adjacent tiles overlap by 1.5x the average object extent
/// (rounded up to whole pixels); the last row/column is clamped to the image
/// edge, so edge tiles may overlap more than nominal.
pub fn plan_tiles(
    image_dims: (u32, u32),
    prior: &ObjectSizePrior,
    target_nba: f64,
    output_resolution: u32,
) -> Result<TilePlan> {
    check_dims(image_dims)?;
    if output_resolution == 0 {
        return Err(Error::invalid("output resolution must be positive"));
    }
    if !(target_nba > 0.0) {
        return Err(Error::invalid(format!(
            "target NBA must be positive, got {target_nba}"
        )));
    }
    ObjectSizePrior::new(prior.avg_width, prior.avg_height, prior.source_nba)?;

    let scale = target_nba / prior.source_nba;
    let k = if scale <= 1.0 {
        1
    } else {
        // Guard against sqrt() landing a hair above an exact integer.
        (scale.sqrt() - 1e-9).ceil().max(1.0) as u32
    };
    let overlap_x = (1.5 * prior.avg_width).ceil() as u32;
    let overlap_y = (1.5 * prior.avg_height).ceil() as u32;

    let (tile_w, xs) = axis_layout(image_dims.0, k, overlap_x, "x")?;
    let (tile_h, ys) = axis_layout(image_dims.1, k, overlap_y, "y")?;

    let mut regions = Vec::with_capacity((k * k) as usize);
    for (row, &y0) in ys.iter().enumerate() {
        for (col, &x0) in xs.iter().enumerate() {
            regions.push(TileRegion {
                row: row as u32,
                col: col as u32,
                x0,
                y0,
                width: tile_w,
                height: tile_h,
            });
        }
    }
    Ok(TilePlan {
        tiles_x: k,
        tiles_y: k,
        overlap_x,
        overlap_y,
        regions,
        source_dims: image_dims,
        output_resolution,
    })
}

/// Tile size and origins along one axis. Tile size is
/// `ceil((extent + (k-1)*overlap) / k)`; origins step by `tile - overlap`
/// and clamp so the last tile ends exactly at the image edge.
fn axis_layout(extent: u32, k: u32, overlap: u32, axis: &str) -> Result<(u32, Vec<u32>)> {
    if k == 1 {
        return Ok((extent, vec![0]));
    }
    let extent64 = extent as u64;
    let k64 = k as u64;
    let tile = (extent64 + (k64 - 1) * overlap as u64 + k64 - 1) / k64;
    if overlap as u64 >= tile {
        return Err(Error::InfeasiblePlan(format!(
            "{axis}-overlap {overlap} px is not smaller than the {tile} px tile; \
             objects are too large for a {k}-way split"
        )));
    }
    let tile = tile as u32; // overlap < tile implies tile <= extent
    debug_assert!(tile <= extent);
    let stride = (tile - overlap) as u64;
    let last = (extent - tile) as u64;
    let origins = (0..k64)
        .map(|col| (col * stride).min(last) as u32)
        .collect();
    Ok((tile, origins))
}

/// Crop the region from the image and resample it to the square network
/// input size.
pub fn extract_tile(
    image: &ImageBuffer,
    region: &TileRegion,
    output_resolution: u32,
) -> Result<ImageBuffer> {
    let crop = image.crop(region.x0, region.y0, region.width, region.height)?;
    Ok(crop.resize_bilinear(output_resolution, output_resolution))
}

/// Map a point in tile output pixels to the global image frame.
pub fn tile_to_global(pt: (f64, f64), region: &TileRegion, output_resolution: u32) -> (f64, f64) {
    let res = output_resolution as f64;
    (
        region.x0 as f64 + pt.0 * region.width as f64 / res,
        region.y0 as f64 + pt.1 * region.height as f64 / res,
    )
}

/// Exact inverse of [`tile_to_global`].
pub fn global_to_tile(pt: (f64, f64), region: &TileRegion, output_resolution: u32) -> (f64, f64) {
    let res = output_resolution as f64;
    (
        (pt.0 - region.x0 as f64) * res / region.width as f64,
        (pt.1 - region.y0 as f64) * res / region.height as f64,
    )
}
