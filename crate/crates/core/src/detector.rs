//! Grid detectors: probability-map decoding and a tiny from-scratch
//! stride-8 convolutional reference network.
//!
//! A detector turns a square tile into an n x n x C map of per-cell object
//! center probabilities. Decoding either clusters neighboring active cells
//! into one detection (the classic behaviour) or emits one detection per
//! active cell, which keeps nearby objects apart.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, CHANNELS};
use crate::scalar::Real;
use crate::tiling::{self, BBox, TilePlan, TileRegion};

/// Coordinate frame a detection lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    TileLocal,
    Global,
}

/// A predicted object center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub class_id: usize,
    pub score: f64,
    /// Grid cells merged into this detection (1 in per-cell mode).
    pub source_cells: usize,
    pub frame: Frame,
}

/// n x n x C map of per-cell object-center probabilities.
///
/// Layout is class-major: `probs[(class * n + row) * n + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction<S: Real> {
    n: usize,
    num_classes: usize,
    /// Pixels per cell in tile output space.
    cell_stride: f64,
    probs: Vec<S>,
}

impl<S: Real> GridPrediction<S> {
    pub fn new(n: usize, num_classes: usize, cell_stride: f64, probs: Vec<S>) -> Result<Self> {
        if n == 0 || num_classes == 0 {
            return Err(Error::invalid("grid must have positive size and classes"));
        }
        if probs.len() != n * n * num_classes {
            return Err(Error::shape(format!(
                "grid of {}x{}x{} needs {} probabilities, got {}",
                n,
                n,
                num_classes,
                n * n * num_classes,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= S::zero() && *p <= S::one())) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(Self {
            n,
            num_classes,
            cell_stride,
            probs,
        })
    }

    pub fn zeros(n: usize, num_classes: usize, cell_stride: f64) -> Self {
        Self {
            n,
            num_classes,
            cell_stride,
            probs: vec![S::zero(); n * n * num_classes],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cell_stride(&self) -> f64 {
        self.cell_stride
    }

    /// Tile output resolution this grid corresponds to.
    pub fn resolution(&self) -> f64 {
        self.n as f64 * self.cell_stride
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    #[inline]
    pub fn index(&self, class: usize, row: usize, col: usize) -> usize {
        (class * self.n + row) * self.n + col
    }

    #[inline]
    pub fn prob(&self, class: usize, row: usize, col: usize) -> S {
        self.probs[self.index(class, row, col)]
    }

    pub fn set_prob(&mut self, class: usize, row: usize, col: usize, p: S) {
        let i = self.index(class, row, col);
        self.probs[i] = p;
    }
}

/// Square boolean cell mask.
#[derive(Clone, Debug)]
pub struct CellMask {
    n: usize,
    cells: Vec<bool>,
}

impl CellMask {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn from_cells(n: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != n * n {
            return Err(Error::shape(format!(
                "mask of side {n} needs {} cells, got {}",
                n * n,
                cells.len()
            )));
        }
        Ok(Self { n, cells })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.n + col] = v;
    }
}

/// Connected components of active cells under 8-connectivity, via
/// union-find. Components and their member cells come out in row-major
/// order of first appearance.
pub fn cluster_neighbors(mask: &CellMask) -> Vec<Vec<(usize, usize)>> {
    let n = mask.n;
    let mut parent: Vec<usize> = (0..n * n).collect();

    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for row in 0..n {
        for col in 0..n {
            if !mask.get(row, col) {
                continue;
            }
            // Union with the four already-visited neighbors (W, NW, N, NE).
            let idx = row * n + col;
            let link = |r: isize, c: isize, parent: &mut Vec<usize>| {
                if r >= 0 && c >= 0 && (c as usize) < n && mask.get(r as usize, c as usize) {
                    let a = find(parent, idx);
                    let b = find(parent, r as usize * n + c as usize);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            };
            link(row as isize, col as isize - 1, &mut parent);
            link(row as isize - 1, col as isize - 1, &mut parent);
            link(row as isize - 1, col as isize, &mut parent);
            link(row as isize - 1, col as isize + 1, &mut parent);
        }
    }

    let mut clusters: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut root_to_cluster: Vec<Option<usize>> = vec![None; n * n];
    for row in 0..n {
        for col in 0..n {
            if !mask.get(row, col) {
                continue;
            }
            let root = find(&mut parent, row * n + col);
            let slot = match root_to_cluster[root] {
                Some(s) => s,
                None => {
                    root_to_cluster[root] = Some(clusters.len());
                    clusters.push(Vec::new());
                    clusters.len() - 1
                }
            };
            clusters[slot].push((row, col));
        }
    }
    clusters
}

/// How grid activations are turned into detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// One detection per connected component of active cells.
    Clustered,
    /// One detection per active cell.
    PerCell,
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeMode::Clustered => write!(f, "clustered"),
            DecodeMode::PerCell => write!(f, "per_cell"),
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clustered" => Ok(DecodeMode::Clustered),
            "per_cell" | "per-cell" => Ok(DecodeMode::PerCell),
            other => Err(Error::invalid(format!(
                "unknown decode mode `{other}` (expected clustered or per_cell)"
            ))),
        }
    }
}

/// Decode a probability grid into tile-local centroid detections.
///
/// Clustered mode places each detection at the probability-weighted mean of
/// the component's cell centers with the component's max probability as
/// score; per-cell mode emits the raw cell centers.
pub fn decode_grid<S: Real>(
    grid: &GridPrediction<S>,
    threshold: f64,
    mode: DecodeMode,
) -> Result<Vec<Detection>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let n = grid.n;
    let stride = grid.cell_stride;
    let cell_center = |row: usize, col: usize| {
        ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride)
    };

    let mut out = Vec::new();
    for class in 0..grid.num_classes {
        let mut mask = CellMask::new(n);
        for row in 0..n {
            for col in 0..n {
                if grid.prob(class, row, col).as_f64() >= threshold {
                    mask.set(row, col, true);
                }
            }
        }
        match mode {
            DecodeMode::PerCell => {
                for row in 0..n {
                    for col in 0..n {
                        if mask.get(row, col) {
                            let (cx, cy) = cell_center(row, col);
                            out.push(Detection {
                                cx,
                                cy,
                                class_id: class,
                                score: grid.prob(class, row, col).as_f64(),
                                source_cells: 1,
                                frame: Frame::TileLocal,
                            });
                        }
                    }
                }
            }
            DecodeMode::Clustered => {
                for cluster in cluster_neighbors(&mask) {
                    let mut wx = 0.0;
                    let mut wy = 0.0;
                    let mut wsum = 0.0;
                    let mut best = 0.0f64;
                    for &(row, col) in &cluster {
                        let p = grid.prob(class, row, col).as_f64();
                        let (cx, cy) = cell_center(row, col);
                        wx += p * cx;
                        wy += p * cy;
                        wsum += p;
                        best = best.max(p);
                    }
                    out.push(Detection {
                        cx: wx / wsum,
                        cy: wy / wsum,
                        class_id: class,
                        score: best,
                        source_cells: cluster.len(),
                        frame: Frame::TileLocal,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Convolution layers and the reference network
// ---------------------------------------------------------------------------

/// A plain 2-D convolution with square kernel, zero padding and equal
/// stride on both axes. Weights are `[out_c][in_c][k][k]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S: Real> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> ConvLayer<S> {
    /// Glorot-uniform initialized layer; biases start at zero.
    pub fn init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let fan_out = (out_channels * kernel * kernel) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        let weights = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| S::of(rng.gen_range(-limit..limit)))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias: vec![S::zero(); out_channels],
        }
    }

    pub fn output_side(&self, input_side: usize) -> usize {
        (input_side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Forward pass over a CHW tensor.
    pub fn forward(&self, input: &[S], side: usize) -> Vec<S> {
        let out_side = self.output_side(side);
        let mut out = vec![S::zero(); self.out_channels * out_side * out_side];
        let k = self.kernel;
        let pad = self.padding as isize;
        for oc in 0..self.out_channels {
            for oy in 0..out_side {
                for ox in 0..out_side {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_channels {
                        let in_base = ic * side * side;
                        let w_base = ((oc * self.in_channels) + ic) * k * k;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= side as isize {
                                continue;
                            }
                            let row_base = in_base + iy as usize * side;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= side as isize {
                                    continue;
                                }
                                acc += self.weights[w_base + ky * k + kx]
                                    * input[row_base + ix as usize];
                            }
                        }
                    }
                    out[(oc * out_side + oy) * out_side + ox] = acc;
                }
            }
        }
        out
    }

    /// Backward pass: gradients of weights, biases and the input, given the
    /// gradient of the output.
    pub fn backward(
        &self,
        input: &[S],
        side: usize,
        grad_out: &[S],
    ) -> (Vec<S>, Vec<S>, Vec<S>) {
        let out_side = self.output_side(side);
        let mut grad_w = vec![S::zero(); self.weights.len()];
        let mut grad_b = vec![S::zero(); self.bias.len()];
        let mut grad_in = vec![S::zero(); input.len()];
        let k = self.kernel;
        let pad = self.padding as isize;
        for oc in 0..self.out_channels {
            for oy in 0..out_side {
                for ox in 0..out_side {
                    let g = grad_out[(oc * out_side + oy) * out_side + ox];
                    if g == S::zero() {
                        continue;
                    }
                    grad_b[oc] += g;
                    for ic in 0..self.in_channels {
                        let in_base = ic * side * side;
                        let w_base = ((oc * self.in_channels) + ic) * k * k;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - pad;
                            if iy < 0 || iy >= side as isize {
                                continue;
                            }
                            let row_base = in_base + iy as usize * side;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if ix < 0 || ix >= side as isize {
                                    continue;
                                }
                                let ii = row_base + ix as usize;
                                grad_w[w_base + ky * k + kx] += g * input[ii];
                                grad_in[ii] += g * self.weights[w_base + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        (grad_w, grad_b, grad_in)
    }
}

/// Tiny stride-8 grid detector: three stride-2 3x3 convolutions
/// (3 -> 8 -> 16 -> 32 channels, ReLU) and a 1x1 head to per-class logits,
/// squashed through a logistic.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyGridNet<S: Real> {
    layers: Vec<ConvLayer<S>>,
    num_classes: usize,
}

const MODEL_MAGIC: &[u8; 4] = b"TGN1";

impl<S: Real> TinyGridNet<S> {
    /// The canonical topology, deterministically initialized from the seed.
    pub fn new(num_classes: usize, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let layers = vec![
            ConvLayer::init(3, 8, 3, 2, 1, &mut rng),
            ConvLayer::init(8, 16, 3, 2, 1, &mut rng),
            ConvLayer::init(16, 32, 3, 2, 1, &mut rng),
            ConvLayer::init(32, num_classes, 1, 1, 0, &mut rng),
        ];
        Self {
            layers,
            num_classes,
        }
    }

    /// Assemble a network from explicit layers. Intended for reduced
    /// topologies in diagnostics; the canonical constructor is [`new`].
    ///
    /// [`new`]: TinyGridNet::new
    pub fn from_layers(layers: Vec<ConvLayer<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::shape(format!(
                    "layer chain mismatch: {} outputs into {} inputs",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        let num_classes = layers.last().unwrap().out_channels;
        Ok(Self {
            layers,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[ConvLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<S>] {
        &mut self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::parameter_count).sum()
    }

    /// Normalize a tile into a CHW tensor in [0, 1].
    pub fn normalize(tile: &ImageBuffer) -> Vec<S> {
        let (w, h) = tile.dims();
        let (w, h) = (w as usize, h as usize);
        let data = tile.data();
        let mut tensor = vec![S::zero(); CHANNELS * w * h];
        let scale = S::of(1.0 / 255.0);
        for y in 0..h {
            for x in 0..w {
                let px = (y * w + x) * CHANNELS;
                for c in 0..CHANNELS {
                    tensor[c * w * h + y * w + x] = S::of(data[px + c] as f64) * scale;
                }
            }
        }
        tensor
    }

    fn check_input(&self, tile: &ImageBuffer) -> Result<usize> {
        let (w, h) = tile.dims();
        if w != h {
            return Err(Error::shape(format!("input must be square, got {w}x{h}")));
        }
        let stride = self.total_stride();
        if w as usize % stride != 0 || w == 0 {
            return Err(Error::shape(format!(
                "input side {w} is not divisible by the network stride {stride}"
            )));
        }
        Ok(w as usize)
    }

    /// Inference on one tile: probability grid with n = side / stride.
    pub fn forward(&self, tile: &ImageBuffer) -> Result<GridPrediction<S>> {
        let side = self.check_input(tile)?;
        let (acts, probs) = self.forward_trace(&Self::normalize(tile), side);
        let n = side / self.total_stride();
        drop(acts);
        GridPrediction::new(n, self.num_classes, (side / n) as f64, probs)
    }

    /// Forward pass keeping the input and every post-activation tensor,
    /// for backpropagation. Returns (activations per layer input, probs);
    /// `activations[i]` feeds layer `i`.
    pub(crate) fn forward_trace(&self, input: &[S], side: usize) -> (Vec<Vec<S>>, Vec<S>) {
        let mut acts: Vec<Vec<S>> = vec![input.to_vec()];
        let mut cur_side = side;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts.last().unwrap(), cur_side);
            cur_side = layer.output_side(cur_side);
            if i + 1 < self.layers.len() {
                for v in z.iter_mut() {
                    if *v < S::zero() {
                        *v = S::zero();
                    }
                }
                acts.push(z);
            } else {
                let one = S::one();
                for v in z.iter_mut() {
                    *v = one / (one + (-*v).exp());
                }
                return (acts, z);
            }
        }
        unreachable!("network has at least one layer");
    }
}

// ---------------------------------------------------------------------------
// Model file format: magic "TGN1", little-endian
// ---------------------------------------------------------------------------

impl<S: Real> TinyGridNet<S> {
    /// Serialize to the versioned binary format: magic, layer count, then
    /// per layer a shape header and f32 weights/biases.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            for v in [
                layer.in_channels,
                layer.out_channels,
                layer.kernel,
                layer.stride,
                layer.padding,
            ] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for w in &layer.weights {
                out.extend_from_slice(&(w.as_f64() as f32).to_le_bytes());
            }
            for b in &layer.bias {
                out.extend_from_slice(&(b.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::ModelFormat("file too short for magic".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::ModelFormat(format!(
                "unknown magic/version {:?} (expected {:?})",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MODEL_MAGIC)
            )));
        }
        let layer_count = read_u32(&mut cur)? as usize;
        if layer_count == 0 || layer_count > 64 {
            return Err(Error::ModelFormat(format!(
                "implausible layer count {layer_count}"
            )));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let in_channels = read_u32(&mut cur)? as usize;
            let out_channels = read_u32(&mut cur)? as usize;
            let kernel = read_u32(&mut cur)? as usize;
            let stride = read_u32(&mut cur)? as usize;
            let padding = read_u32(&mut cur)? as usize;
            if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                return Err(Error::ModelFormat("zero-sized layer header".into()));
            }
            let n_w = out_channels * in_channels * kernel * kernel;
            let mut weights = Vec::with_capacity(n_w);
            for _ in 0..n_w {
                weights.push(S::of(read_f32(&mut cur)? as f64));
            }
            let mut bias = Vec::with_capacity(out_channels);
            for _ in 0..out_channels {
                bias.push(S::of(read_f32(&mut cur)? as f64));
            }
            layers.push(ConvLayer {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weights,
                bias,
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::ModelFormat("truncated model file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(cur: &mut Cursor<&[u8]>) -> Result<f32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::ModelFormat("truncated model file".into()))?;
    Ok(f32::from_le_bytes(buf))
}

// ---------------------------------------------------------------------------
// Detector abstraction and the batch driver
// ---------------------------------------------------------------------------

/// Where a tile came from, for detectors that need provenance.
#[derive(Clone, Copy, Debug)]
pub struct TileContext<'a> {
    pub image_id: &'a str,
    pub region: &'a TileRegion,
    pub output_resolution: u32,
}

/// Anything that maps a tile to a probability grid. Trained networks are
/// immutable during inference, so tile workers may share one detector.
pub trait Detector<S: Real>: Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, tile: &ImageBuffer, ctx: &TileContext<'_>) -> Result<GridPrediction<S>>;
}

impl<S: Real> Detector<S> for TinyGridNet<S> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, tile: &ImageBuffer, _ctx: &TileContext<'_>) -> Result<GridPrediction<S>> {
        self.forward(tile)
    }
}

/// Ground-truth-backed detector: rasterizes the known object centers of the
/// current tile at probability 1. Upper-bounds the pipeline downstream of
/// the network.
#[derive(Clone, Debug)]
pub struct OracleDetector {
    boxes_by_image: BTreeMap<String, Vec<BBox>>,
    num_classes: usize,
}

impl OracleDetector {
    pub fn new(samples: &[Sample], num_classes: usize) -> Self {
        let boxes_by_image = samples
            .iter()
            .map(|s| (s.id.clone(), s.boxes.clone()))
            .collect();
        Self {
            boxes_by_image,
            num_classes,
        }
    }
}

impl Detector<f64> for OracleDetector {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, tile: &ImageBuffer, ctx: &TileContext<'_>) -> Result<GridPrediction<f64>> {
        let (w, h) = tile.dims();
        if w != h || w % 8 != 0 {
            return Err(Error::shape(format!(
                "oracle expects square tiles with side divisible by 8, got {w}x{h}"
            )));
        }
        let n = w as usize / 8;
        let mut grid = GridPrediction::zeros(n, self.num_classes, 8.0, );
        if let Some(boxes) = self.boxes_by_image.get(ctx.image_id) {
            for b in boxes {
                let (gx, gy) = b.center();
                if !ctx.region.contains_point(gx, gy) {
                    continue;
                }
                let (tx, ty) = tiling::global_to_tile((gx, gy), ctx.region, ctx.output_resolution);
                let col = ((tx / 8.0).floor() as usize).min(n - 1);
                let row = ((ty / 8.0).floor() as usize).min(n - 1);
                if b.class_id < self.num_classes {
                    grid.set_prob(b.class_id, row, col, 1.0);
                }
            }
        }
        Ok(grid)
    }
}

/// One tile's prediction together with its source region and wall time.
#[derive(Clone, Debug)]
pub struct TilePrediction<S: Real> {
    pub region: TileRegion,
    pub grid: GridPrediction<S>,
    pub elapsed: Duration,
}

/// Extract and predict every region of the plan, in row-major order.
/// Regions are processed in parallel; output order is by (row, col).
pub fn predict_tiles<S: Real, D: Detector<S>>(
    detector: &D,
    plan: &TilePlan,
    image: &ImageBuffer,
    image_id: &str,
) -> Result<Vec<TilePrediction<S>>> {
    plan.regions
        .par_iter()
        .map(|region| {
            let start = Instant::now();
            let tile = tiling::extract_tile(image, region, plan.output_resolution)?;
            let ctx = TileContext {
                image_id,
                region,
                output_resolution: plan.output_resolution,
            };
            let grid = detector.predict(&tile, &ctx)?;
            Ok(TilePrediction {
                region: *region,
                grid,
                elapsed: start.elapsed(),
            })
        })
        .collect()
}
