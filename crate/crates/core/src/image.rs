//! Owned RGB8 raster plus minimal file I/O (PNG and binary PPM).
//!
//! The buffer is row-major with interleaved channels; it is the unit the
//! tiler crops from and the detector consumes.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major, interleaved RGB, 8 bits per channel.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{} rgb8)", self.width, self.height)
    }
}

impl ImageBuffer {
    /// All-black image.
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize * CHANNELS],
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "raw buffer holds {} bytes, {}x{} rgb needs {}",
                data.len(),
                width,
                height,
                expected
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Crop a rectangle; errors if it pokes outside the image.
    pub fn crop(&self, x0: u32, y0: u32, width: u32, height: u32) -> Result<ImageBuffer> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("crop with zero width or height"));
        }
        if x0.checked_add(width).map_or(true, |x| x > self.width)
            || y0.checked_add(height).map_or(true, |y| y > self.height)
        {
            return Err(Error::invalid(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                width, height, x0, y0, self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for y in y0..y0 + height {
            let start = (y as usize * self.width as usize + x0 as usize) * CHANNELS;
            out.extend_from_slice(&self.data[start..start + width as usize * CHANNELS]);
        }
        Ok(ImageBuffer {
            width,
            height,
            data: out,
        })
    }

    /// Bilinear resample to the target size. Source and destination pixel
    /// centers are aligned via `src = (dst + 0.5) * scale - 0.5`, which makes
    /// a same-size resize an exact copy.
    pub fn resize_bilinear(&self, width: u32, height: u32) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let w_in = self.width as usize;
        let mut out = vec![0u8; width as usize * height as usize * CHANNELS];
        for y in 0..height as usize {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height as usize - 1);
            let ty = fy - y0 as f64;
            for x in 0..width as usize {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width as usize - 1);
                let tx = fx - x0 as f64;
                let base = (y as usize * width as usize + x) * CHANNELS;
                for c in 0..CHANNELS {
                    let p00 = self.data[(y0 * w_in + x0) * CHANNELS + c] as f64;
                    let p10 = self.data[(y0 * w_in + x1) * CHANNELS + c] as f64;
                    let p01 = self.data[(y1 * w_in + x0) * CHANNELS + c] as f64;
                    let p11 = self.data[(y1 * w_in + x1) * CHANNELS + c] as f64;
                    let top = p00 + (p10 - p00) * tx;
                    let bot = p01 + (p11 - p01) * tx;
                    let v = top + (bot - top) * ty;
                    out[base + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        ImageBuffer {
            width,
            height,
            data: out,
        }
    }

    /// Mean over all samples (all pixels, all channels).
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Read a PNG or binary PPM (P6) file, by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    match extension(path)?.as_str() {
        "ppm" => read_ppm(path),
        "png" => read_png(path),
        other => Err(Error::ImageFormat(format!(
            "unsupported image extension `{other}` (png and ppm are supported)"
        ))),
    }
}

/// Write a PNG or binary PPM (P6) file, by extension.
pub fn write_image(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    match extension(path)?.as_str() {
        "ppm" => write_ppm(path, image),
        "png" => write_png(path, image),
        other => Err(Error::ImageFormat(format!(
            "unsupported image extension `{other}` (png and ppm are supported)"
        ))),
    }
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::ImageFormat(format!("{} has no file extension", path.display())))
}

fn read_png(path: &Path) -> Result<ImageBuffer> {
    let decoded = image::open(path)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (width, height) = decoded.dimensions();
    ImageBuffer::from_raw(width, height, decoded.into_raw())
}

fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let out = image::RgbImage::from_raw(img.width, img.height, img.data.clone())
        .expect("buffer length matches dimensions");
    out.save(path)
        .map_err(|e| Error::ImageFormat(format!("{}: {e}", path.display())))
}

fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = ppm_token(&bytes, &mut pos)
        .ok_or_else(|| Error::ImageFormat(format!("{}: truncated header", path.display())))?;
    if magic != b"P6" {
        return Err(Error::ImageFormat(format!(
            "{}: not a binary PPM (P6)",
            path.display()
        )));
    }
    let mut field = |name: &str| -> Result<u32> {
        ppm_token(&bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
            .ok_or_else(|| Error::ImageFormat(format!("{}: bad {name}", path.display())))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!(
            "{}: only maxval 255 is supported, found {maxval}",
            path.display()
        )));
    }
    // A single whitespace byte separates the header from the raster.
    let data = &bytes[pos..];
    let expected = width as usize * height as usize * CHANNELS;
    if data.len() < expected {
        return Err(Error::ImageFormat(format!(
            "{}: raster truncated ({} of {expected} bytes)",
            path.display(),
            data.len()
        )));
    }
    ImageBuffer::from_raw(width, height, data[..expected].to_vec())
}

/// Next whitespace-delimited header token, skipping `#` comments. Leaves the
/// cursor one byte past the token's trailing delimiter.
fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let token = &bytes[start..*pos];
    if *pos < bytes.len() {
        *pos += 1; // consume the single delimiter byte
    }
    Some(token)
}

fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&img.data);
    fs::write(path, out)?;
    Ok(())
}
