//! BCE and IoU losses, their eroded variants, and the deep-supervision total.
//!
//! Inputs are `[N, 1, H, W]` tensors. BCE is averaged over pixels; IoU is
//! computed per image and averaged over the batch. The eroded variants only
//! see pixels in the kept set `C` (a 0/1 `keep` tensor of the same shape):
//! BCE averages over `|C|` per image and IoU restricts every sum to `C`.
//! Pixels outside `C` contribute nothing, and get an exactly zero gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::labels::{binarize, edge_band, BinaryMask, EdgeBandPartition};
use crate::model::ModelOutput;
use crate::resample::{bilinear_resize, ResizeSpec};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SupervisionMode {
    /// Final output only.
    None,
    /// Side outputs supervised on every pixel.
    Normal,
    /// Side outputs supervised on the kept set `C` only.
    #[default]
    Eroded,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] = [SupervisionMode::None, SupervisionMode::Normal, SupervisionMode::Eroded];
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SupervisionMode::None),
            "normal" => Ok(SupervisionMode::Normal),
            "eroded" => Ok(SupervisionMode::Eroded),
            other => Err(Error::Config(format!(
                "unknown supervision mode {other:?} (expected none, normal or eroded)"
            ))),
        }
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupervisionMode::None => "none",
            SupervisionMode::Normal => "normal",
            SupervisionMode::Eroded => "eroded",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionConfig {
    pub mode: SupervisionMode,
    pub side_count: usize,
    /// Weight of each side output's BCE term.
    pub alpha: Vec<f64>,
    /// Weight of each side output's IoU term.
    pub beta: Vec<f64>,
    pub erosion_radius: usize,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self::uniform(SupervisionMode::Eroded, 4, 1)
    }
}

impl SupervisionConfig {
    /// All side weights set to 1.
    pub fn uniform(mode: SupervisionMode, side_count: usize, erosion_radius: usize) -> Self {
        SupervisionConfig {
            mode,
            side_count,
            alpha: vec![1.0; side_count],
            beta: vec![1.0; side_count],
            erosion_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.side_count || self.beta.len() != self.side_count {
            return Err(Error::Config(format!(
                "expected {} side weights, got alpha {} and beta {}",
                self.side_count,
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if self.alpha.iter().chain(&self.beta).any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("side weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Every component of the total loss, batch-averaged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub final_bce: f64,
    pub final_iou: f64,
    pub side_bce: Vec<f64>,
    pub side_iou: Vec<f64>,
    pub total: f64,
    /// Images whose kept set was empty at some side output; their eroded
    /// terms are zero.
    pub empty_keep_sets: usize,
}

impl LossBreakdown {
    /// `final_bce + final_iou + sum(alpha * side_bce) + sum(beta * side_iou)`,
    /// accumulated in the same order as [`total_loss`], so in `f64` the result
    /// equals `total` bit for bit.
    pub fn recompose(&self, cfg: &SupervisionConfig) -> f64 {
        let mut acc = self.final_bce + self.final_iou;
        for (m, (bce, iou)) in self.side_bce.iter().zip(&self.side_iou).enumerate() {
            acc += cfg.alpha[m] * bce;
            acc += cfg.beta[m] * iou;
        }
        acc
    }
}

fn check_same_shape<T: Scalar>(g: &Graph<T>, vars: &[Var]) -> Result<[usize; 4]> {
    let dims = g.value(vars[0]).dims4()?;
    for &v in &vars[1..] {
        if g.shape(v) != dims {
            return Err(Error::shape(format!(
                "loss inputs must share a shape: {:?} vs {:?}",
                dims,
                g.shape(v)
            )));
        }
    }
    Ok(dims)
}

/// Per-pixel `-(y ln x + (1 - y) ln(1 - x))` with `x` clamped to `[eps, 1 - eps]`.
fn bce_map<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let xc = g.clamp(x, LOG_EPS, 1.0 - LOG_EPS);
    let log_x = g.log(xc)?;
    let one_minus_x = g.affine(xc, -1.0, 1.0);
    let log_1mx = g.log(one_minus_x)?;
    let one_minus_y = g.affine(y, -1.0, 1.0);
    let a = g.mul(y, log_x)?;
    let b = g.mul(one_minus_y, log_1mx)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Mean binary cross entropy over all pixels.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    check_same_shape(g, &[x, y])?;
    let map = bce_map(g, x, y)?;
    g.mean_all(map)
}

/// `1 - sum(y x) / sum(y + x - y x)` per image, averaged over the batch.
/// An image with a zero denominator (no foreground in either map) scores 0.
pub fn iou_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    check_same_shape(g, &[x, y])?;
    iou_core(g, x, y, None)
}

fn iou_core<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, keep: Option<Var>) -> Result<Var> {
    let xy = g.mul(x, y)?;
    let sum_xy = g.add(x, y)?;
    let union_map = g.sub(sum_xy, xy)?;
    let (inter_map, union_map) = match keep {
        Some(k) => (g.mul(xy, k)?, g.mul(union_map, k)?),
        None => (xy, union_map),
    };
    let inter = g.sum(inter_map, &[1, 2, 3])?;
    let union = g.sum(union_map, &[1, 2, 3])?;
    // (union - inter) / union == 1 - inter / union, and 0 when union == 0.
    let diff = g.sub(union, inter)?;
    let per_image = g.div_or_zero(diff, union)?;
    g.mean_all(per_image)
}

/// BCE averaged over the kept pixels of each image, then over the batch.
/// An image with no kept pixels contributes 0.
pub fn eroded_bce_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, keep: Var) -> Result<Var> {
    check_same_shape(g, &[x, y, keep])?;
    let map = bce_map(g, x, y)?;
    let kept = g.mul(map, keep)?;
    let sums = g.sum(kept, &[1, 2, 3])?;
    let counts = g.sum(keep, &[1, 2, 3])?;
    let per_image = g.div_or_zero(sums, counts)?;
    g.mean_all(per_image)
}

/// IoU loss with every sum restricted to the kept pixels.
pub fn eroded_iou_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, keep: Var) -> Result<Var> {
    check_same_shape(g, &[x, y, keep])?;
    iou_core(g, x, y, Some(keep))
}

/// Labels and kept-set masks for one side output, stacked over the batch.
#[derive(Clone, Debug)]
pub struct SideTarget<T> {
    pub labels: Tensor<T>,
    pub keep: Tensor<T>,
    pub partitions: Vec<EdgeBandPartition>,
}

/// Bring a full-resolution label down to `(h, w)`: bilinear resize, then
/// threshold at 0.5.
pub fn downsample_label(label: &BinaryMask, h: usize, w: usize) -> Result<BinaryMask> {
    if (label.height(), label.width()) == (h, w) {
        return Ok(label.clone());
    }
    let t: Tensor<f64> = label.to_tensor();
    let small = bilinear_resize(&t, ResizeSpec::new(h, w)?)?;
    binarize(small.data(), h, w, 0.5)
}

fn stack<T: Scalar>(masks: &[BinaryMask]) -> Result<Tensor<T>> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape("labels in a batch must share a size"));
        }
        data.extend(m.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new([masks.len(), 1, h, w], data)
}

/// Stack labels into a `[N, 1, H, W]` tensor.
pub fn label_tensor<T: Scalar>(labels: &[BinaryMask]) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty label batch".into()));
    }
    stack(labels)
}

/// Labels and kept sets for a side output at resolution `(h, w)`.
pub fn side_target<T: Scalar>(
    labels: &[BinaryMask],
    (h, w): (usize, usize),
    mode: SupervisionMode,
    radius: usize,
) -> Result<SideTarget<T>> {
    let small = labels
        .iter()
        .map(|l| downsample_label(l, h, w))
        .collect::<Result<Vec<_>>>()?;
    let partitions: Vec<_> = small
        .iter()
        .map(|m| match mode {
            SupervisionMode::Eroded => edge_band(m, radius),
            _ => EdgeBandPartition::keep_all(h, w),
        })
        .collect();
    let keeps: Vec<_> = partitions.iter().map(|p| p.keep()).collect();
    Ok(SideTarget {
        labels: label_tensor(&small)?,
        keep: stack(&keeps)?,
        partitions,
    })
}

/// Total training loss over the final output and the side outputs.
///
/// Returns the loss variable (for backward) and its breakdown.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ModelOutput,
    labels: &[BinaryMask],
    cfg: &SupervisionConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if out.side_logits.len() != cfg.side_count {
        return Err(Error::Config(format!(
            "model has {} side outputs, supervision expects {}",
            out.side_logits.len(),
            cfg.side_count
        )));
    }
    let y_full = g.constant(label_tensor(labels)?);
    let x_full = g.sigmoid(out.final_logits);
    let final_bce = bce_loss(g, x_full, y_full)?;
    let final_iou = iou_loss(g, x_full, y_full)?;
    let mut terms = vec![final_bce, final_iou];
    let mut breakdown = LossBreakdown {
        final_bce: g.value(final_bce).item().as_f64(),
        final_iou: g.value(final_iou).item().as_f64(),
        ..Default::default()
    };

    if cfg.mode != SupervisionMode::None {
        for (m, &logits) in out.side_logits.iter().enumerate() {
            let [_, _, h, w] = g.value(logits).dims4()?;
            let target = side_target::<T>(labels, (h, w), cfg.mode, cfg.erosion_radius)?;
            breakdown.empty_keep_sets += target.partitions.iter().filter(|p| p.keep_len() == 0).count();
            let y = g.constant(target.labels);
            let keep = g.constant(target.keep);
            let x = g.sigmoid(logits);
            let (bce, iou) = match cfg.mode {
                SupervisionMode::Eroded => (eroded_bce_loss(g, x, y, keep)?, eroded_iou_loss(g, x, y, keep)?),
                _ => (bce_loss(g, x, y)?, iou_loss(g, x, y)?),
            };
            breakdown.side_bce.push(g.value(bce).item().as_f64());
            breakdown.side_iou.push(g.value(iou).item().as_f64());
            terms.push(g.scale(bce, cfg.alpha[m]));
            terms.push(g.scale(iou, cfg.beta[m]));
        }
    }
    let total = g.add_all(&terms)?;
    breakdown.total = g.value(total).item().as_f64();
    Ok((total, breakdown))
}
