//! Segmentation scoring: dataset-level per-class IoU, class-mean IoU over a
//! fold, class-agnostic binary IoU, and multi-run aggregation with a 95%
//! confidence interval.
//!
//! Class IoU divides pixel counts accumulated across all episodes of a class
//! (dataset-level), not a mean of per-episode ratios. Binary IoU averages
//! the foreground and background IoUs computed the same way.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, IGNORE};

/// Mergeable pixel-count tallies. Integer counts make accumulation exactly
/// order-invariant.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    class_intersection: BTreeMap<String, u64>,
    class_union: BTreeMap<String, u64>,
    class_episodes: BTreeMap<String, u64>,
    fg_intersection: u64,
    fg_union: u64,
    bg_intersection: u64,
    bg_union: u64,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one episode's prediction/ground-truth pair for a class. Pixels
    /// marked ignore in the ground truth are skipped entirely.
    pub fn accumulate(&mut self, class: &str, pred: &Mask, gt: &Mask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut fg_i = 0u64;
        let mut fg_u = 0u64;
        let mut bg_i = 0u64;
        let mut bg_u = 0u64;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            debug_assert!(p <= 1 && g <= 1);
            let (p, g) = (p == 1, g == 1);
            fg_i += (p && g) as u64;
            fg_u += (p || g) as u64;
            bg_i += (!p && !g) as u64;
            bg_u += (!p || !g) as u64;
        }
        *self.class_intersection.entry(class.to_string()).or_default() += fg_i;
        *self.class_union.entry(class.to_string()).or_default() += fg_u;
        *self.class_episodes.entry(class.to_string()).or_default() += 1;
        self.fg_intersection += fg_i;
        self.fg_union += fg_u;
        self.bg_intersection += bg_i;
        self.bg_union += bg_u;
        Ok(())
    }

    /// Fold another accumulator in; merging is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (k, v) in &other.class_intersection {
            *self.class_intersection.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.class_union {
            *self.class_union.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.class_episodes {
            *self.class_episodes.entry(k.clone()).or_default() += v;
        }
        self.fg_intersection += other.fg_intersection;
        self.fg_union += other.fg_union;
        self.bg_intersection += other.bg_intersection;
        self.bg_union += other.bg_union;
    }

    pub fn episodes_for(&self, class: &str) -> u64 {
        self.class_episodes.get(class).copied().unwrap_or(0)
    }

    /// Dataset-level IoU of one class; `None` when no pixels were tallied.
    pub fn class_iou(&self, class: &str) -> Option<f64> {
        let i = *self.class_intersection.get(class)?;
        let u = *self.class_union.get(class)?;
        if u == 0 {
            None
        } else {
            Some(i as f64 / u as f64)
        }
    }

    pub fn class_ious(&self) -> BTreeMap<String, f64> {
        self.class_union
            .keys()
            .filter_map(|c| self.class_iou(c).map(|v| (c.clone(), v)))
            .collect()
    }

    /// Mean class IoU over the given fold classes. Classes without episodes
    /// are skipped; at least one must have data.
    pub fn miou(&self, fold_classes: &[String]) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in fold_classes {
            if let Some(v) = self.class_iou(c) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InsufficientData {
                class: fold_classes.join(","),
                reason: "no scored episodes for any fold class".into(),
            });
        }
        Ok(sum / n as f64)
    }

    /// Class-agnostic mean of foreground and background IoU.
    pub fn biou(&self) -> Result<f64> {
        if self.fg_union == 0 || self.bg_union == 0 {
            return Err(Error::InsufficientData {
                class: "foreground/background".into(),
                reason: "empty union; nothing was scored".into(),
            });
        }
        let fg = self.fg_intersection as f64 / self.fg_union as f64;
        let bg = self.bg_intersection as f64 / self.bg_union as f64;
        Ok((fg + bg) / 2.0)
    }
}

/// Mean and normal-approximation 95% confidence interval over runs:
/// `ci95 = 1.96 · s / √n` with the n−1 sample standard deviation.
pub fn aggregate_runs(scores: &[f64]) -> Result<(f64, f64)> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::TooFewRuns(n));
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let ci95 = 1.96 * var.sqrt() / (n as f64).sqrt();
    Ok((mean, ci95))
}

/// Scores of one evaluation run in report form.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunScores {
    pub class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub biou: f64,
}

impl ConfusionAccumulator {
    pub fn summarize(&self, fold_classes: &[String]) -> Result<RunScores> {
        Ok(RunScores {
            class_iou: fold_classes
                .iter()
                .filter_map(|c| self.class_iou(c).map(|v| (c.clone(), v)))
                .collect(),
            miou: self.miou(fold_classes)?,
            biou: self.biou()?,
        })
    }
}
