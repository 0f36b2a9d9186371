//! Saliency evaluation: mean absolute error and max F-measure.
//!
//! Predictions are quantized to 256 levels. Threshold `k` (for `k` in
//! `0..=255`) marks a pixel salient when its level is at least `k`. Per image,
//! precision is 1 when no pixel passes and recall is 1 when the ground truth is
//! empty. Precision and recall are averaged over images per threshold, and the
//! reported F is the maximum over thresholds.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::BinaryMask;

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLDS: usize = 256;

/// A predicted map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "saliency map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap { height, width, data })
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        SaliencyMap {
            height: mask.height(),
            width: mask.width(),
            data: mask.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// 8-bit level of each pixel, `round(255 p)`.
    pub fn quantize(&self) -> Vec<u8> {
        self.data.iter().map(|&p| quantize(p)).collect()
    }
}

pub fn quantize(p: f64) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

fn check_pair(pred: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height,
            pred.width,
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Mean `|pred - gt|` over all pixels.
pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred
        .data
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g as f64).abs())
        .sum();
    Ok(total / pred.data.len() as f64)
}

/// `(1 + b2) P R / (b2 P + R)`, 0 when the denominator vanishes.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

/// Per-threshold precision and recall of one image.
pub fn precision_recall(pred: &SaliencyMap, gt: &BinaryMask) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(pred, gt)?;
    let mut fg = [0usize; THRESHOLDS];
    let mut bg = [0usize; THRESHOLDS];
    for (&p, &g) in pred.data.iter().zip(gt.data()) {
        let l = quantize(p) as usize;
        if g == 1 {
            fg[l] += 1;
        } else {
            bg[l] += 1;
        }
    }
    let positives = gt.count();
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let (mut tp, mut fp) = (0usize, 0usize);
    for k in (0..THRESHOLDS).rev() {
        tp += fg[k];
        fp += bg[k];
        precision[k] = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        recall[k] = if positives == 0 { 1.0 } else { tp as f64 / positives as f64 };
    }
    Ok((precision, recall))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub f_beta_max: f64,
    /// Threshold index (level) at which `f_beta_max` is reached.
    pub best_threshold: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub images: usize,
    /// Every ground truth was empty, so recall is trivially 1.
    pub degenerate: bool,
}

impl EvalReport {
    pub fn f_curve(&self) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r))
            .collect()
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "images = {}\nmae = {:.6}\nf_beta_max = {:.6}\nbest_threshold = {}\nbeta_sq = {}\ndegenerate = {}\n",
            self.images, self.mae, self.f_beta_max, self.best_threshold, BETA_SQ, self.degenerate
        )
    }

    /// `threshold,precision,recall,f` rows, thresholds in `[0, 1]`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for (k, f) in self.f_curve().into_iter().enumerate() {
            let _ = writeln!(
                s,
                "{:.6},{:.6},{:.6},{:.6}",
                k as f64 / 255.0,
                self.precision[k],
                self.recall[k],
                f
            );
        }
        s
    }

    /// Write the text report to `path` and the curve next to it as `.csv`.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Dataset report over matching (prediction, ground truth) pairs.
pub fn evaluate_maps(pairs: &[(SaliencyMap, BinaryMask)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let n = pairs.len() as f64;
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let mut mae_sum = 0.0;
    for (pred, gt) in pairs {
        mae_sum += mae(pred, gt)?;
        let (p, r) = precision_recall(pred, gt)?;
        for k in 0..THRESHOLDS {
            precision[k] += p[k];
            recall[k] += r[k];
        }
    }
    precision.iter_mut().chain(recall.iter_mut()).for_each(|v| *v /= n);
    let mut report = EvalReport {
        mae: mae_sum / n,
        f_beta_max: 0.0,
        best_threshold: 0,
        precision,
        recall,
        images: pairs.len(),
        degenerate: pairs.iter().all(|(_, g)| g.count() == 0),
    };
    for (k, f) in report.f_curve().into_iter().enumerate() {
        if f > report.f_beta_max {
            report.f_beta_max = f;
            report.best_threshold = k;
        }
    }
    Ok(report)
}
