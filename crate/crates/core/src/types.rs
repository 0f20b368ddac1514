//! Shared data model: annotations, predictions and loss hyperparameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled action interval, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64, label: usize) -> Self {
        Self { start, end, label }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// One-hot class vector of length `num_classes`.
    pub fn one_hot(&self, num_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; num_classes];
        if self.label < num_classes {
            y[self.label] = 1.0;
        }
        y
    }
}

/// Ground truth for one untrimmed video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub video_id: String,
    pub duration: f64,
    pub instances: Vec<ActionInstance>,
}

impl AnnotationSet {
    pub fn new(video_id: impl Into<String>, duration: f64, instances: Vec<ActionInstance>) -> Self {
        Self {
            video_id: video_id.into(),
            duration,
            instances,
        }
    }

    /// Number of instances (M).
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Checks every instance against the annotation invariants.
///
/// Returns one human-readable entry per violation; an empty list means the
/// set is well formed. When `num_classes` is given, labels are range-checked
/// as well.
pub fn validate_annotations(ann: &AnnotationSet, num_classes: Option<usize>) -> Vec<String> {
    let mut out = Vec::new();
    if !ann.duration.is_finite() || ann.duration <= 0.0 {
        out.push(format!("video {}: duration must be positive and finite", ann.video_id));
    }
    for (i, inst) in ann.instances.iter().enumerate() {
        if !inst.start.is_finite() || !inst.end.is_finite() {
            out.push(format!("instance {i}: non-finite boundary"));
            continue;
        }
        if inst.start < 0.0 {
            out.push(format!("instance {i}: start is negative"));
        }
        if inst.start == inst.end {
            out.push(format!("instance {i}: start==end"));
        } else if inst.start > inst.end {
            out.push(format!("instance {i}: start after end"));
        }
        if inst.end > ann.duration {
            out.push(format!("instance {i}: end exceeds duration"));
        }
        if let Some(c) = num_classes {
            if inst.label >= c {
                out.push(format!("instance {i}: label {} out of range [0, {c})", inst.label));
            }
        }
    }
    out
}

/// A decoded proposal.
///
/// Dense predictions straight out of the head carry `label: None` and a full
/// per-class score vector. After class-wise NMS each kept entry is bound to a
/// single class and `label` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub start: f64,
    pub end: f64,
    pub scores: Vec<f64>,
    pub source_timestep: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Prediction {
    /// Score used for ranking: the bound class if any, else the max over classes.
    pub fn score(&self) -> f64 {
        match self.label {
            Some(c) => self.scores.get(c).copied().unwrap_or(0.0),
            None => self.scores.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.start < self.end && self.scores.iter().all(|s| (0.0..=1.0).contains(s))
    }
}

/// Predictions for one video plus their positive/negative partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub predictions: Vec<Prediction>,
    pub positive_idx: Vec<usize>,
    pub negative_idx: Vec<usize>,
    pub matched_gt: BTreeMap<usize, ActionInstance>,
}

impl PredictionSet {
    pub fn unassigned(predictions: Vec<Prediction>) -> Self {
        Self {
            predictions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// Verifies the partition invariants: disjoint, covering, and exactly one
    /// matched ground truth per positive.
    pub fn check_partition(&self) -> Result<()> {
        let n = self.predictions.len();
        let mut seen = vec![0u8; n];
        for &i in &self.positive_idx {
            if i >= n {
                return Err(Error::invalid(format!("positive index {i} out of range")));
            }
            seen[i] += 1;
            if !self.matched_gt.contains_key(&i) {
                return Err(Error::invalid(format!("positive {i} has no matched ground truth")));
            }
        }
        for &i in &self.negative_idx {
            if i >= n {
                return Err(Error::invalid(format!("negative index {i} out of range")));
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::invalid(format!(
                "index {i} appears {} times in the partition",
                seen[i]
            )));
        }
        if self.matched_gt.len() != self.positive_idx.len() {
            return Err(Error::invalid("matched ground truths for non-positive indices"));
        }
        Ok(())
    }
}

/// Loss weights and loss-shape hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_comp: f64,
    pub lambda_feat: f64,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            lambda_comp: 1.0,
            lambda_feat: 1.0,
            alpha_pos: 1.0,
            alpha_neg: 1.0,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zeros() -> Self {
        Self {
            lambda_cls: 0.0,
            lambda_reg: 0.0,
            lambda_comp: 0.0,
            lambda_feat: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("lambda_comp", self.lambda_comp),
            ("lambda_feat", self.lambda_feat),
            ("alpha_pos", self.alpha_pos),
            ("alpha_neg", self.alpha_neg),
            ("focal_gamma", self.focal_gamma),
            ("smooth_l1_beta", self.smooth_l1_beta),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::invalid("smooth_l1_beta must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(instances: Vec<ActionInstance>) -> AnnotationSet {
        AnnotationSet::new("v", 10.0, instances)
    }

    #[test]
    fn well_formed_set_has_no_violations() {
        assert!(validate_annotations(&set(vec![ActionInstance::new(1.0, 3.0, 0)]), None).is_empty());
    }

    #[test]
    fn degenerate_interval_is_reported() {
        let v = validate_annotations(&set(vec![ActionInstance::new(3.0, 3.0, 0)]), None);
        assert_eq!(v, vec!["instance 0: start==end".to_string()]);
    }

    #[test]
    fn end_past_duration_is_reported() {
        let v = validate_annotations(&set(vec![ActionInstance::new(8.0, 12.0, 0)]), None);
        assert_eq!(v, vec!["instance 0: end exceeds duration".to_string()]);
    }

    #[test]
    fn label_range_checked_when_class_count_known() {
        let v = validate_annotations(&set(vec![ActionInstance::new(1.0, 2.0, 5)]), Some(4));
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("label 5"));
    }

    #[test]
    fn one_hot_has_single_one() {
        let y = ActionInstance::new(0.0, 1.0, 2).one_hot(4);
        assert_eq!(y, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_weights_reject_nonpositive_beta() {
        let w = LossWeights {
            smooth_l1_beta: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn partition_check_catches_overlap() {
        let p = Prediction {
            start: 0.0,
            end: 1.0,
            scores: vec![0.5],
            source_timestep: 0,
            label: None,
        };
        let mut ps = PredictionSet::unassigned(vec![p.clone(), p]);
        ps.positive_idx = vec![0];
        ps.negative_idx = vec![0, 1];
        ps.matched_gt.insert(0, ActionInstance::new(0.0, 1.0, 0));
        assert!(ps.check_partition().is_err());
        ps.negative_idx = vec![1];
        assert!(ps.check_partition().is_ok());
    }
}
