//! Dataset loading and synthetic small-object generation.
//!
//! On-disk layout: `<root>/images/<id>.(png|ppm)` with a same-stem
//! annotation file `<root>/annotations/<id>.txt`, one object per line as
//! `x_min y_min x_max y_max class_id` in integer pixels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_image, write_image, ImageBuffer};
use crate::tiling::BBox;

/// One annotated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageBuffer,
    pub boxes: Vec<BBox>,
}

/// Load every image under `images_dir` with its annotation from
/// `annotations_dir`; samples come back sorted by id. Boxes poking outside
/// the image are clamped with a warning; a missing annotation file or a
/// malformed line is an error.
pub fn load_dataset(
    images_dir: impl AsRef<Path>,
    annotations_dir: impl AsRef<Path>,
) -> Result<Vec<Sample>> {
    let images_dir = images_dir.as_ref();
    let annotations_dir = annotations_dir.as_ref();

    let mut stems: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(images_dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png") | Some("ppm")) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("unreadable file name {}", path.display())))?
            .to_string();
        stems.insert(stem, path);
    }
    if stems.is_empty() {
        return Err(Error::invalid(format!(
            "no .png or .ppm images under {}",
            images_dir.display()
        )));
    }

    let mut samples = Vec::with_capacity(stems.len());
    for (stem, image_path) in stems {
        let annotation_path = annotations_dir.join(format!("{stem}.txt"));
        if !annotation_path.exists() {
            return Err(Error::MissingAnnotation { stem });
        }
        let image = read_image(&image_path)?;
        let boxes = parse_annotations(&annotation_path, image.dims())?;
        samples.push(Sample {
            id: stem,
            image,
            boxes,
        });
    }
    Ok(samples)
}

fn parse_annotations(path: &Path, dims: (u32, u32)) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedAnnotation {
            file: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(malformed(format!(
                "expected 5 fields `x_min y_min x_max y_max class_id`, found {}",
                fields.len()
            )));
        }
        let mut nums = [0i64; 4];
        for (slot, f) in nums.iter_mut().zip(&fields[..4]) {
            *slot = f
                .parse()
                .map_err(|_| malformed(format!("`{f}` is not an integer")))?;
        }
        let class_id: usize = fields[4]
            .parse()
            .map_err(|_| malformed(format!("`{}` is not a class id", fields[4])))?;
        let [x_min, y_min, x_max, y_max] = nums;
        if x_min >= x_max || y_min >= y_max {
            return Err(malformed(format!(
                "box [{x_min},{y_min},{x_max},{y_max}] has no area"
            )));
        }
        let (w, h) = (dims.0 as i64, dims.1 as i64);
        let cx_min = x_min.clamp(0, w);
        let cy_min = y_min.clamp(0, h);
        let cx_max = x_max.clamp(0, w);
        let cy_max = y_max.clamp(0, h);
        if (cx_min, cy_min, cx_max, cy_max) != (x_min, y_min, x_max, y_max) {
            log::warn!(
                "{}:{line_no}: box [{x_min},{y_min},{x_max},{y_max}] clamped to the {w}x{h} image",
                path.display()
            );
        }
        if cx_min >= cx_max || cy_min >= cy_max {
            return Err(malformed(format!(
                "box [{x_min},{y_min},{x_max},{y_max}] lies entirely outside the {w}x{h} image"
            )));
        }
        boxes.push(BBox::new(
            cx_min as f64,
            cy_min as f64,
            cx_max as f64,
            cy_max as f64,
            class_id,
        )?);
    }
    Ok(boxes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

/// Persist samples in the loadable layout. Box coordinates are rounded to
/// integers, matching the annotation format.
pub fn write_dataset(
    root: impl AsRef<Path>,
    samples: &[Sample],
    format: ImageFormat,
) -> Result<()> {
    let root = root.as_ref();
    let images = root.join("images");
    let annotations = root.join("annotations");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&annotations)?;
    for s in samples {
        write_image(
            images.join(format!("{}.{}", s.id, format.extension())),
            &s.image,
        )?;
        let mut text = String::new();
        for b in &s.boxes {
            text.push_str(&format!(
                "{} {} {} {} {}\n",
                b.x_min.round() as i64,
                b.y_min.round() as i64,
                b.x_max.round() as i64,
                b.y_max.round() as i64,
                b.class_id
            ));
        }
        fs::write(annotations.join(format!("{}.txt", s.id)), text)?;
    }
    Ok(())
}

/// Synthetic dataset knobs. The defaults draw 52-70 px objects on 960x960
/// images, i.e. a per-object NBA around 0.004.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object bounding-box side range, pixels.
    pub min_object_size: u32,
    pub max_object_size: u32,
    /// Background pixels are uniform noise in `[0, background_noise]`.
    pub background_noise: u8,
    /// Minimum Euclidean distance between object centers.
    pub min_center_separation: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_width: 960,
            image_height: 960,
            num_images: 200,
            min_objects: 6,
            max_objects: 12,
            min_object_size: 52,
            max_object_size: 70,
            background_noise: 60,
            min_center_separation: 110.0,
            rng_seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.min_object_size == 0
            || self.min_object_size > self.max_object_size
            || self.max_object_size >= self.image_width.min(self.image_height)
        {
            return Err(Error::invalid(
                "object sizes must be positive, ordered, and smaller than the image",
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("min_objects exceeds max_objects"));
        }
        if !(self.min_center_separation >= 0.0) {
            return Err(Error::invalid("separation must be >= 0"));
        }
        Ok(())
    }
}

/// Generate annotated images with high-contrast discs and rectangles on
/// noise. Deterministic for a fixed seed: each image draws from its own
/// stream of the master seed, so parallel and serial generation agree.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.num_images);
    for index in 0..cfg.num_images {
        samples.push(synth_image(cfg, index)?);
    }
    Ok(samples)
}

fn synth_image(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(index as u64 + 1);

    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut image = ImageBuffer::new(w, h);
    let noise = cfg.background_noise;
    for y in 0..h {
        for x in 0..w {
            let v = if noise == 0 { 0 } else { rng.gen_range(0..=noise) };
            image.put_pixel(x, y, [v, v, v]);
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
    let max_attempts = 200 * count.max(1);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Generation(format!(
                "image {index}: placed {} of {count} objects in {max_attempts} attempts; \
                 separation {} is too strict for {w}x{h}",
                boxes.len(),
                cfg.min_center_separation
            )));
        }
        let bw = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
        let bh = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let center = (x0 as f64 + bw as f64 / 2.0, y0 as f64 + bh as f64 / 2.0);
        let min_sep2 = cfg.min_center_separation * cfg.min_center_separation;
        if centers
            .iter()
            .any(|c| (c.0 - center.0).powi(2) + (c.1 - center.1).powi(2) < min_sep2)
        {
            continue;
        }
        let color = [
            rng.gen_range(180..=255),
            rng.gen_range(180..=255),
            rng.gen_range(180..=255),
        ];
        let disc = rng.gen_bool(0.5);
        draw_object(&mut image, x0, y0, bw, bh, color, disc);
        centers.push(center);
        boxes.push(BBox::new(
            x0 as f64,
            y0 as f64,
            (x0 + bw) as f64,
            (y0 + bh) as f64,
            0,
        )?);
    }
    Ok(Sample {
        id: format!("img_{index:04}"),
        image,
        boxes,
    })
}

/// Fill either the whole box (rectangle) or the inscribed ellipse (disc).
fn draw_object(img: &mut ImageBuffer, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3], disc: bool) {
    let cx = x0 as f64 + w as f64 / 2.0;
    let cy = y0 as f64 + h as f64 / 2.0;
    let rx = w as f64 / 2.0;
    let ry = h as f64 / 2.0;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if disc {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy > 1.0 {
                    continue;
                }
            }
            img.put_pixel(x, y, color);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::dataset_prior;

    #[test]
    fn annotation_line_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        fs::write(&path, "10 20 50 60 0\n").unwrap();
        let boxes = parse_annotations(&path, (100, 100)).unwrap();
        assert_eq!(
            boxes,
            vec![BBox::new(10.0, 20.0, 50.0, 60.0, 0).unwrap()]
        );
    }

    #[test]
    fn inverted_box_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        fs::write(&path, "50 60 10 20 0\n").unwrap();
        let err = parse_annotations(&path, (100, 100)).unwrap_err();
        match err {
            Error::MalformedAnnotation { line, .. } => assert_eq!(line, 1),
            other => panic!("expected malformed-annotation error, got {other}"),
        }
    }

    #[test]
    fn empty_annotation_file_is_a_negative_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        fs::write(&path, "").unwrap();
        assert!(parse_annotations(&path, (100, 100)).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_box_is_clamped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.txt");
        fs::write(&path, "-5 10 40 120 0\n").unwrap();
        let boxes = parse_annotations(&path, (100, 100)).unwrap();
        assert_eq!(boxes[0], BBox::new(0.0, 10.0, 40.0, 100.0, 0).unwrap());
    }

    #[test]
    fn missing_annotation_names_the_stem() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let annotations = dir.path().join("annotations");
        fs::create_dir_all(&images).unwrap();
        fs::create_dir_all(&annotations).unwrap();
        write_image(images.join("lonely.png"), &ImageBuffer::new(8, 8)).unwrap();
        match load_dataset(&images, &annotations).unwrap_err() {
            Error::MissingAnnotation { stem } => assert_eq!(stem, "lonely"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = SynthConfig {
            num_images: 3,
            image_width: 160,
            image_height: 120,
            min_objects: 2,
            max_objects: 4,
            min_object_size: 10,
            max_object_size: 16,
            min_center_separation: 24.0,
            ..SynthConfig::default()
        };
        let samples = synth_generate(&cfg).unwrap();
        for format in [ImageFormat::Ppm, ImageFormat::Png] {
            let dir = tempfile::tempdir().unwrap();
            write_dataset(dir.path(), &samples, format).unwrap();
            let loaded =
                load_dataset(dir.path().join("images"), dir.path().join("annotations")).unwrap();
            assert_eq!(loaded, samples);
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = SynthConfig {
            num_images: 4,
            image_width: 128,
            image_height: 128,
            min_objects: 1,
            max_objects: 3,
            min_object_size: 12,
            max_object_size: 20,
            min_center_separation: 30.0,
            rng_seed: 7,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig {
            rng_seed: 8,
            ..cfg.clone()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_objects_gives_pure_background() {
        let cfg = SynthConfig {
            num_images: 2,
            image_width: 64,
            image_height: 64,
            min_objects: 0,
            max_objects: 0,
            min_object_size: 8,
            max_object_size: 12,
            ..SynthConfig::default()
        };
        for s in synth_generate(&cfg).unwrap() {
            assert!(s.boxes.is_empty());
        }
    }

    #[test]
    fn generated_boxes_respect_bounds_and_separation() {
        let cfg = SynthConfig {
            num_images: 6,
            ..SynthConfig::default()
        };
        for s in synth_generate(&cfg).unwrap() {
            for b in &s.boxes {
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                assert!(b.x_max <= cfg.image_width as f64);
                assert!(b.y_max <= cfg.image_height as f64);
            }
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    let (ax, ay) = a.center();
                    let (bx, by) = b.center();
                    let dist = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                    assert!(dist >= cfg.min_center_separation);
                }
            }
        }
    }

    #[test]
    fn default_config_hits_the_target_nba_band() {
        let cfg = SynthConfig {
            num_images: 20,
            ..SynthConfig::default()
        };
        let samples = synth_generate(&cfg).unwrap();
        let boxes: Vec<BBox> = samples.iter().flat_map(|s| s.boxes.clone()).collect();
        let prior = dataset_prior(&boxes, (cfg.image_width, cfg.image_height)).unwrap();
        assert!(
            (0.003..=0.005).contains(&prior.source_nba),
            "mean per-object NBA {} out of band",
            prior.source_nba
        );
        let midpoint = (cfg.min_object_size + cfg.max_object_size) as f64 / 2.0;
        assert!((prior.avg_width - midpoint).abs() / midpoint <= 0.15);
        assert!((prior.avg_height - midpoint).abs() / midpoint <= 0.15);
    }

    #[test]
    fn impossible_separation_fails_with_a_generation_error() {
        let cfg = SynthConfig {
            num_images: 1,
            image_width: 100,
            image_height: 100,
            min_objects: 30,
            max_objects: 30,
            min_object_size: 10,
            max_object_size: 12,
            min_center_separation: 90.0,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_generate(&cfg).unwrap_err(),
            Error::Generation(_)
        ));
    }
}
