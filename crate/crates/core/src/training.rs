//! Target rasterization, losses with analytic gradients, and the SGD
//! training loop for the tiny grid net.
//!
//! The soft-F1 loss is a differentiable F1 surrogate built from soft
//! TP/FP/FN sums; against binary cross-entropy it trades a little
//! calibration for a much better precision/recall balance when object
//! cells are rare.

use rand::seq::SliceRandom;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{GridPrediction, TinyGridNet};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;
use crate::tiling::BBox;

const BCE_CLAMP: f64 = 1e-7;

/// Binary per-cell, per-class training target.
///
/// Layout matches [`GridPrediction`]: `values[(class * n + row) * n + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrid {
    n: usize,
    num_classes: usize,
    values: Vec<u8>,
}

impl TargetGrid {
    pub fn zeros(n: usize, num_classes: usize) -> Self {
        Self {
            n,
            num_classes,
            values: vec![0; n * n * num_classes],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, class: usize, row: usize, col: usize) -> u8 {
        self.values[(class * self.n + row) * self.n + col]
    }

    pub fn set(&mut self, class: usize, row: usize, col: usize, v: u8) {
        self.values[(class * self.n + row) * self.n + col] = v;
    }

    /// Fraction of cells that are positive for any class.
    pub fn positive_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v != 0).count() as f64 / self.values.len() as f64
    }
}

/// Mark the cell under each box center. Several boxes landing in one cell
/// still produce a single positive; the grid cannot express more than one
/// object per cell.
pub fn rasterize_targets(
    boxes: &[BBox],
    n: usize,
    cell_stride: f64,
    num_classes: usize,
) -> Result<TargetGrid> {
    let mut grid = TargetGrid::zeros(n, num_classes);
    let extent = n as f64 * cell_stride;
    for b in boxes {
        let (cx, cy) = b.center();
        if cx < 0.0 || cy < 0.0 || cx >= extent || cy >= extent {
            return Err(Error::invalid(format!(
                "box center ({cx}, {cy}) lies outside the {extent}px tile"
            )));
        }
        if b.class_id >= num_classes {
            return Err(Error::invalid(format!(
                "class {} out of range for {num_classes} classes",
                b.class_id
            )));
        }
        let col = ((cx / cell_stride) as usize).min(n - 1);
        let row = ((cy / cell_stride) as usize).min(n - 1);
        grid.set(b.class_id, row, col, 1);
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftF1,
    Bce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_f1" | "soft-f1" => Ok(LossKind::SoftF1),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::invalid(format!(
                "unknown loss `{other}` (expected soft_f1 or bce)"
            ))),
        }
    }
}

/// Whether soft-F1 is averaged per class (macro) or pooled (micro).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Averaging {
    Macro,
    Micro,
}

fn check_shapes<S: Real>(pred: &GridPrediction<S>, target: &TargetGrid) -> Result<()> {
    if pred.n() != target.n || pred.num_classes() != target.num_classes {
        return Err(Error::shape(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.n(),
            pred.n(),
            pred.num_classes(),
            target.n,
            target.n,
            target.num_classes
        )));
    }
    Ok(())
}

/// Macro soft-F1 loss: `1 - mean_c (2*TP_c + eps) / (sum p_c + sum y_c + eps)`
/// and its analytic gradient with respect to the probabilities.
///
/// The epsilon in both numerator and denominator makes the empty-empty case
/// score a perfect 1 (loss 0).
pub fn soft_f1_loss<S: Real>(
    pred: &GridPrediction<S>,
    target: &TargetGrid,
    epsilon: f64,
) -> Result<(S, Vec<S>)> {
    soft_f1_loss_with(pred, target, epsilon, F1Averaging::Macro)
}

pub fn soft_f1_loss_with<S: Real>(
    pred: &GridPrediction<S>,
    target: &TargetGrid,
    epsilon: f64,
    averaging: F1Averaging,
) -> Result<(S, Vec<S>)> {
    check_shapes(pred, target)?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let n = pred.n();
    let cells = n * n;
    let classes = pred.num_classes();
    let probs = pred.probs();
    let values = target.values();
    let eps = S::of(epsilon);

    let groups: Vec<(usize, usize)> = match averaging {
        F1Averaging::Macro => (0..classes).map(|c| (c * cells, (c + 1) * cells)).collect(),
        F1Averaging::Micro => vec![(0, cells * classes)],
    };

    let mut grad = vec![S::zero(); probs.len()];
    let mut f1_sum = S::zero();
    for &(start, end) in &groups {
        let mut tp = S::zero();
        let mut sum_p = S::zero();
        let mut sum_y = S::zero();
        for i in start..end {
            let y = S::of(values[i] as f64);
            tp += probs[i] * y;
            sum_p += probs[i];
            sum_y += y;
        }
        let numer = S::of(2.0) * tp + eps;
        let denom = sum_p + sum_y + eps;
        f1_sum += numer / denom;
        // d f1 / dp_i = (2*y_i*denom - numer) / denom^2; loss negates and
        // divides by the group count.
        let scale = S::of(1.0 / groups.len() as f64);
        for i in start..end {
            let y = S::of(values[i] as f64);
            grad[i] = -scale * (S::of(2.0) * y * denom - numer) / (denom * denom);
        }
    }
    let loss = S::one() - f1_sum / S::of(groups.len() as f64);
    Ok((loss, grad))
}

/// Mean binary cross-entropy over all cells and classes, probabilities
/// clamped to `[1e-7, 1 - 1e-7]` before the logs.
pub fn bce_loss<S: Real>(pred: &GridPrediction<S>, target: &TargetGrid) -> Result<(S, Vec<S>)> {
    check_shapes(pred, target)?;
    let probs = pred.probs();
    let values = target.values();
    let count = S::of(probs.len() as f64);
    let lo = S::of(BCE_CLAMP);
    let hi = S::one() - lo;

    let mut loss = S::zero();
    let mut grad = vec![S::zero(); probs.len()];
    for i in 0..probs.len() {
        let p = probs[i].max(lo).min(hi);
        let y = S::of(values[i] as f64);
        loss -= y * p.ln() + (S::one() - y) * (S::one() - p).ln();
        // Clamped regions are flat; gradient only flows inside them.
        if probs[i] > lo && probs[i] < hi {
            grad[i] = (p - y) / (p * (S::one() - p) * count);
        }
    }
    Ok((loss / count, grad))
}

/// Training-loop configuration; mirrors the `train` subcommand's JSON
/// config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss_kind: LossKind,
    pub soft_f1_averaging: F1Averaging,
    pub rng_seed: u64,
    /// Smoothing constant for the soft-F1 loss.
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            loss_kind: LossKind::SoftF1,
            soft_f1_averaging: F1Averaging::Macro,
            rng_seed: 42,
            // Dice-style smoothing. Tiny epsilons turn empty-target tiles
            // into a hard wall at p = 0 (their gradient scales as 1/eps)
            // and collapse training; 1.0 keeps them bounded.
            epsilon: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One training example: a tile and its rasterized target.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub tile: ImageBuffer,
    pub target: TargetGrid,
}

/// Per-layer parameter gradients, ordered like the network's layers.
#[derive(Clone, Debug)]
pub struct NetGradients<S: Real> {
    pub layers: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Real> NetGradients<S> {
    fn zeros_like(net: &TinyGridNet<S>) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| (vec![S::zero(); l.weights.len()], vec![S::zero(); l.bias.len()]))
                .collect(),
        }
    }

    fn add_scaled(&mut self, other: &NetGradients<S>, scale: S) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            for (d, s) in dst.0.iter_mut().zip(&src.0) {
                *d += *s * scale;
            }
            for (d, s) in dst.1.iter_mut().zip(&src.1) {
                *d += *s * scale;
            }
        }
    }
}

fn evaluate_loss<S: Real>(
    pred: &GridPrediction<S>,
    target: &TargetGrid,
    cfg: &TrainConfig,
) -> Result<(S, Vec<S>)> {
    match cfg.loss_kind {
        LossKind::SoftF1 => soft_f1_loss_with(pred, target, cfg.epsilon, cfg.soft_f1_averaging),
        LossKind::Bce => bce_loss(pred, target),
    }
}

/// Loss of one sample under the configured loss, without gradients.
pub fn sample_loss<S: Real>(
    net: &TinyGridNet<S>,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<f64> {
    let pred = net.forward(&sample.tile)?;
    let (loss, _) = evaluate_loss(&pred, &sample.target, cfg)?;
    Ok(loss.as_f64())
}

/// Loss and full parameter gradients of one sample: backpropagation through
/// the logistic output, the 1x1 head and the stride-2 convolutions.
pub fn loss_gradients<S: Real>(
    net: &TinyGridNet<S>,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<(f64, NetGradients<S>)> {
    let (w, h) = sample.tile.dims();
    if w != h {
        return Err(Error::shape(format!("tile must be square, got {w}x{h}")));
    }
    let side = w as usize;
    let stride = net.total_stride();
    if side % stride != 0 {
        return Err(Error::shape(format!(
            "tile side {side} is not divisible by the network stride {stride}"
        )));
    }
    let n = side / stride;

    let input = TinyGridNet::<S>::normalize(&sample.tile);
    let (acts, probs) = net.forward_trace(&input, side);
    let pred = GridPrediction::new(n, net.num_classes(), (side / n) as f64, probs)?;
    let (loss, dprobs) = evaluate_loss(&pred, &sample.target, cfg)?;

    // dL/dz for the logistic output.
    let probs = pred.probs();
    let mut grad_z: Vec<S> = dprobs
        .iter()
        .zip(probs)
        .map(|(&dp, &p)| dp * p * (S::one() - p))
        .collect();

    let mut sides = Vec::with_capacity(net.layers().len() + 1);
    let mut s = side;
    for layer in net.layers() {
        sides.push(s);
        s = layer.output_side(s);
    }

    let mut grads = NetGradients::zeros_like(net);
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let (gw, gb, gin) = layer.backward(&acts[i], sides[i], &grad_z);
        grads.layers[i] = (gw, gb);
        if i > 0 {
            // acts[i] is the post-ReLU input of layer i.
            grad_z = gin
                .iter()
                .zip(&acts[i])
                .map(|(&g, &a)| if a > S::zero() { g } else { S::zero() })
                .collect();
        }
    }
    Ok((loss.as_f64(), grads))
}

/// SGD with momentum over shuffled minibatches. Returns the per-epoch mean
/// training loss. Deterministic for a fixed seed regardless of worker count:
/// per-sample gradients are computed in parallel but reduced in sample
/// order.
pub fn train<S: Real>(
    net: &mut TinyGridNet<S>,
    dataset: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    train_with_monitor(net, dataset, cfg, |_, _, _| {})
}

pub fn train_with_monitor<S: Real>(
    net: &mut TinyGridNet<S>,
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    mut monitor: impl FnMut(usize, f64, &TinyGridNet<S>),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let side = dataset[0].tile.dims();
    for s in dataset {
        if s.tile.dims() != side {
            return Err(Error::invalid(
                "all training tiles must share one resolution",
            ));
        }
    }

    let mut velocity: Vec<(Vec<S>, Vec<S>)> = net
        .layers()
        .iter()
        .map(|l| (vec![S::zero(); l.weights.len()], vec![S::zero(); l.bias.len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let lr = S::of(cfg.learning_rate);
    let momentum = S::of(cfg.momentum);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<Result<(f64, NetGradients<S>)>> = batch
                .par_iter()
                .map(|&i| loss_gradients(net, &dataset[i], cfg))
                .collect();
            let mut batch_grads = NetGradients::zeros_like(net);
            let scale = S::of(1.0 / batch.len() as f64);
            for result in per_sample {
                let (loss, grads) = result?;
                epoch_loss += loss;
                batch_grads.add_scaled(&grads, scale);
            }
            for ((layer, vel), grads) in net
                .layers_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(batch_grads.layers.iter())
            {
                for ((w, v), g) in layer.weights.iter_mut().zip(vel.0.iter_mut()).zip(&grads.0) {
                    *v = momentum * *v - lr * *g;
                    *w += *v;
                }
                for ((b, v), g) in layer.bias.iter_mut().zip(vel.1.iter_mut()).zip(&grads.1) {
                    *v = momentum * *v - lr * *g;
                    *b += *v;
                }
            }
        }
        let mean_loss = epoch_loss / dataset.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        trace.push(mean_loss);
        monitor(epoch, mean_loss, net);
    }
    Ok(trace)
}

/// Micro-averaged cell-level F1 of a network over labeled tiles at the given
/// threshold. This scores the raw grid, not decoded detections.
pub fn grid_cell_f1<S: Real>(
    net: &TinyGridNet<S>,
    dataset: &[TrainSample],
    threshold: f64,
) -> Result<f64> {
    let counts: Vec<Result<(u64, u64, u64)>> = dataset
        .par_iter()
        .map(|s| {
            let pred = net.forward(&s.tile)?;
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for (p, &y) in pred.probs().iter().zip(s.target.values()) {
                let hit = p.as_f64() >= threshold;
                match (hit, y != 0) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            Ok((tp, fp, fn_))
        })
        .collect();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in counts {
        let (a, b, c) = c?;
        tp += a;
        fp += b;
        fn_ += c;
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid_from(n: usize, classes: usize, probs: Vec<f64>) -> GridPrediction<f64> {
        GridPrediction::new(n, classes, 8.0, probs).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (GridPrediction<f64>, TargetGrid) {
        let probs: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut target = TargetGrid::zeros(n, 1);
        for r in 0..n {
            for c in 0..n {
                if rng.gen_bool(0.2) {
                    target.set(0, r, c, 1);
                }
            }
        }
        (grid_from(n, 1, probs), target)
    }

    #[test]
    fn rasterize_places_center_cell() {
        let b = BBox::new(104.0, 104.0, 120.0, 120.0, 0).unwrap(); // center (112, 112)
        let grid = rasterize_targets(&[b], 28, 8.0, 1).unwrap();
        assert_eq!(grid.get(0, 14, 14), 1);
        assert_eq!(grid.values().iter().map(|&v| v as u32).sum::<u32>(), 1);
    }

    #[test]
    fn two_boxes_in_one_cell_stay_one_positive() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0, 0).unwrap();
        let b = BBox::new(2.0, 2.0, 6.0, 6.0, 0).unwrap();
        let grid = rasterize_targets(&[a, b], 8, 8.0, 1).unwrap();
        assert_eq!(grid.get(0, 0, 0), 1);
        assert_eq!(grid.values().iter().map(|&v| v as u32).sum::<u32>(), 1);
    }

    #[test]
    fn empty_boxes_rasterize_to_zeros() {
        let grid = rasterize_targets(&[], 8, 8.0, 1).unwrap();
        assert!(grid.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn perfect_binary_prediction_has_zero_soft_f1_loss() {
        let mut target = TargetGrid::zeros(4, 1);
        target.set(0, 1, 2, 1);
        target.set(0, 3, 3, 1);
        let probs: Vec<f64> = target.values().iter().map(|&v| v as f64).collect();
        let (loss, _) = soft_f1_loss(&grid_from(4, 1, probs), &target, 1e-7).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_half_prediction_on_balanced_target_loses_half() {
        let n = 8;
        let mut target = TargetGrid::zeros(n, 1);
        for r in 0..n {
            for c in 0..n {
                if (r * n + c) % 2 == 0 {
                    target.set(0, r, c, 1);
                }
            }
        }
        let probs = vec![0.5; n * n];
        let (loss, _) = soft_f1_loss(&grid_from(n, 1, probs), &target, 1e-7).unwrap();
        assert!((loss - 0.5).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn empty_empty_soft_f1_is_zero_loss() {
        let target = TargetGrid::zeros(4, 1);
        let probs = vec![0.0; 16];
        let (loss, _) = soft_f1_loss(&grid_from(4, 1, probs), &target, 1e-7).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn soft_f1_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (pred, target) = random_pair(&mut rng, 8);
            let (loss, _) = soft_f1_loss(&pred, &target, 1e-7).unwrap();
            assert!((0.0..=1.0).contains(&loss));
        }
    }

    #[test]
    fn soft_f1_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (pred, target) = random_pair(&mut rng, 8);
        let (loss, _) = soft_f1_loss(&pred, &target, 1e-7).unwrap();

        let mut perm: Vec<usize> = (0..64).collect();
        perm.shuffle(&mut rng);
        let probs: Vec<f64> = perm.iter().map(|&i| pred.probs()[i]).collect();
        let mut t2 = TargetGrid::zeros(8, 1);
        for (dst, &src) in perm.iter().enumerate() {
            t2.values[dst] = target.values()[src];
        }
        let (loss2, _) = soft_f1_loss(&grid_from(8, 1, probs), &t2, 1e-7).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn bce_of_uniform_half_is_ln_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, target) = random_pair(&mut rng, 8);
        let probs = vec![0.5; 64];
        let (loss, _) = bce_loss(&grid_from(8, 1, probs), &target).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_of_perfect_binary_prediction_is_tiny() {
        let mut target = TargetGrid::zeros(4, 1);
        target.set(0, 0, 0, 1);
        let probs: Vec<f64> = target.values().iter().map(|&v| v as f64).collect();
        let (loss, _) = bce_loss(&grid_from(4, 1, probs), &target).unwrap();
        assert!(loss >= 0.0 && loss < 1e-6, "{loss}");
    }

    #[test]
    fn bce_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (pred, target) = random_pair(&mut rng, 8);
            let (loss, _) = bce_loss(&pred, &target).unwrap();
            // Oracle: direct transcription of the formula, reversed order.
            let mut acc = 0.0;
            for i in (0..64).rev() {
                let p: f64 = pred.probs()[i].clamp(1e-7, 1.0 - 1e-7);
                let y = target.values()[i] as f64;
                acc += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
            assert!((loss - acc / 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let pred = grid_from(4, 1, vec![0.5; 16]);
        let target = TargetGrid::zeros(5, 1);
        assert!(soft_f1_loss(&pred, &target, 1e-7).is_err());
        assert!(bce_loss(&pred, &target).is_err());
    }

    fn fd_check_loss(
        loss_fn: impl Fn(&GridPrediction<f64>, &TargetGrid) -> (f64, Vec<f64>),
        grids: usize,
        seed: u64,
    ) {
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..grids {
            let (pred, target) = random_pair(&mut rng, 8);
            let (_, grad) = loss_fn(&pred, &target);
            for i in 0..pred.probs().len() {
                let mut plus = pred.probs().to_vec();
                plus[i] += h;
                let mut minus = pred.probs().to_vec();
                minus[i] -= h;
                let (lp, _) = loss_fn(&grid_from(8, 1, plus), &target);
                let (lm, _) = loss_fn(&grid_from(8, 1, minus), &target);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-10);
                assert!(rel <= 1e-4, "element {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn soft_f1_gradient_matches_finite_differences() {
        fd_check_loss(
            |p, t| {
                let (l, g) = soft_f1_loss(p, t, 1e-7).unwrap();
                (l, g)
            },
            10,
            7,
        );
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        fd_check_loss(
            |p, t| {
                let (l, g) = bce_loss(p, t).unwrap();
                (l, g)
            },
            10,
            8,
        );
    }

    #[test]
    fn constant_predictors_rank_differently_under_the_two_losses() {
        // 1% positives; BCE is happiest near the base rate, soft-F1 is not.
        let n = 10;
        let mut target = TargetGrid::zeros(n, 1);
        target.set(0, 4, 4, 1); // 1 of 100 cells
        let qs: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        let losses = |q: f64| {
            let probs = vec![q; n * n];
            let pred = grid_from(n, 1, probs);
            let (b, _) = bce_loss(&pred, &target).unwrap();
            let (s, _) = soft_f1_loss(&pred, &target, 1e-7).unwrap();
            (b, s)
        };
        let bce_argmin = qs
            .iter()
            .copied()
            .min_by(|a, b| losses(*a).0.total_cmp(&losses(*b).0))
            .unwrap();
        assert!((bce_argmin - 0.01).abs() < 1e-9, "bce argmin {bce_argmin}");
        let soft_at_base_rate = losses(0.01).1;
        let soft_min = qs
            .iter()
            .map(|&q| losses(q).1)
            .min_by(f64::total_cmp)
            .unwrap();
        assert!(
            soft_at_base_rate > soft_min + 1e-6,
            "soft-F1 at the base rate ({soft_at_base_rate}) should be worse than its optimum ({soft_min})"
        );
    }

    fn tiny_dataset(count: usize, side: u32, seed: u64) -> Vec<TrainSample> {
        // Separable toy set: a bright square on dark noise, or pure noise.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let mut tile = ImageBuffer::new(side, side);
                for y in 0..side {
                    for x in 0..side {
                        let v = rng.gen_range(0..40) as u8;
                        tile.put_pixel(x, y, [v, v, v]);
                    }
                }
                let n = side as usize / 8;
                let mut target = TargetGrid::zeros(n, 1);
                if i % 2 == 0 {
                    let cx = rng.gen_range(8..side - 8);
                    let cy = rng.gen_range(8..side - 8);
                    for dy in 0..8 {
                        for dx in 0..8 {
                            tile.put_pixel(cx - 4 + dx, cy - 4 + dy, [250, 250, 250]);
                        }
                    }
                    let col = (cx as usize) / 8;
                    let row = (cy as usize) / 8;
                    target.set(0, row.min(n - 1), col.min(n - 1), 1);
                }
                TrainSample { tile, target }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let data = tiny_dataset(8, 32, 1);
        let mut net: TinyGridNet<f32> = TinyGridNet::new(1, 0);
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let trace = train(&mut net, &data, &cfg).unwrap();
        assert_eq!(net, before);
        assert!(trace.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn training_is_bit_deterministic_for_a_seed() {
        let data = tiny_dataset(12, 32, 2);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a: TinyGridNet<f32> = TinyGridNet::new(1, 7);
        let trace_a = train(&mut a, &data, &cfg).unwrap();
        let mut b: TinyGridNet<f32> = TinyGridNet::new(1, 7);
        let trace_b = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(trace_a, trace_b);
    }

    #[test]
    fn loss_decreases_on_a_separable_toy_set() {
        let data = tiny_dataset(24, 32, 3);
        let mut net: TinyGridNet<f32> = TinyGridNet::new(1, 5);
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let trace = train(&mut net, &data, &cfg).unwrap();
        assert!(
            trace.last().unwrap() < &trace[0],
            "loss did not decrease: {trace:?}"
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut net: TinyGridNet<f32> = TinyGridNet::new(1, 0);
        assert!(train(&mut net, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn end_to_end_parameter_gradients_match_finite_differences() {
        use crate::detector::ConvLayer;

        // Reduced two-layer slice on a 16x16 input, in f64.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layers = vec![
            ConvLayer::<f64>::init(3, 4, 3, 2, 1, &mut rng),
            ConvLayer::<f64>::init(4, 1, 1, 1, 0, &mut rng),
        ];
        let net = TinyGridNet::from_layers(layers).unwrap();

        let mut tile = ImageBuffer::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                tile.put_pixel(x, y, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        let mut target = TargetGrid::zeros(8, 1);
        for r in 0..8 {
            for c in 0..8 {
                if rng.gen_bool(0.15) {
                    target.set(0, r, c, 1);
                }
            }
        }
        let sample = TrainSample { tile, target };

        for loss_kind in [LossKind::SoftF1, LossKind::Bce] {
            let cfg = TrainConfig {
                loss_kind,
                ..TrainConfig::default()
            };
            let (_, grads) = loss_gradients(&net, &sample, &cfg).unwrap();
            let h = 1e-5;
            for li in 0..net.layers().len() {
                let n_w = net.layers()[li].weights.len();
                for wi in 0..n_w + net.layers()[li].bias.len() {
                    let read = |net: &TinyGridNet<f64>| {
                        sample_loss(net, &sample, &cfg).unwrap()
                    };
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    if wi < n_w {
                        plus.layers_mut()[li].weights[wi] += h;
                        minus.layers_mut()[li].weights[wi] -= h;
                    } else {
                        plus.layers_mut()[li].bias[wi - n_w] += h;
                        minus.layers_mut()[li].bias[wi - n_w] -= h;
                    }
                    let fd = (read(&plus) - read(&minus)) / (2.0 * h);
                    let analytic = if wi < n_w {
                        grads.layers[li].0[wi]
                    } else {
                        grads.layers[li].1[wi - n_w]
                    };
                    let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                    assert!(
                        rel <= 1e-3,
                        "{loss_kind:?} layer {li} param {wi}: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }
}
