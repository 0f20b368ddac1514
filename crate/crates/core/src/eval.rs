//! Detection evaluation: temporal IoU, per-class average precision with
//! greedy score-ordered matching, and mAP over a set of tIoU thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Prediction};

pub mod oracle;

/// Intersection and union lengths of `[s1, e1]` and `[s2, e2]`.
///
/// This is the one tIoU kernel in the crate; the completeness loss reuses it
/// through [`tiou_with_grad`].
#[inline]
pub(crate) fn overlap_terms(s1: f64, e1: f64, s2: f64, e2: f64) -> (f64, f64) {
    let inter = (e1.min(e2) - s1.max(s2)).max(0.0);
    let union = (e1 - s1) + (e2 - s2) - inter;
    (inter, union)
}

/// Temporal IoU of two intervals `(start, end)`.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (name, (s, e)) in [("first", a), ("second", b)] {
        if !(s < e) || !s.is_finite() || !e.is_finite() {
            return Err(Error::invalid(format!("{name} interval [{s}, {e}] is not valid")));
        }
    }
    let (inter, union) = overlap_terms(a.0, a.1, b.0, b.1);
    Ok(inter / union)
}

/// tIoU of a predicted interval against a fixed target, with the partial
/// derivatives with respect to the predicted start and end.
pub(crate) fn tiou_with_grad(pred: (f64, f64), target: (f64, f64)) -> (f64, f64, f64) {
    let (s1, e1) = pred;
    let (s2, e2) = target;
    let (inter, union) = overlap_terms(s1, e1, s2, e2);
    if union <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let iou = inter / union;
    let (di_ds, di_de) = if inter > 0.0 {
        (if s1 > s2 { -1.0 } else { 0.0 }, if e1 < e2 { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    // union = (e1 - s1) + (e2 - s2) - inter
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let d_ds = (di_ds * union - inter * du_ds) / (union * union);
    let d_de = (di_de * union - inter * du_de) / (union * union);
    (iou, d_ds, d_de)
}

/// One class-specific detection, possibly pooled across videos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub video: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// One ground-truth interval of the evaluated class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub video: usize,
    pub start: f64,
    pub end: f64,
}

/// Ranking order shared by AP and NMS: score descending, then earlier start,
/// then input order.
pub(crate) fn rank_order<T>(items: &[T], key: impl Fn(&T) -> (f64, f64)) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, ta) = key(&items[a]);
        let (sb, tb) = key(&items[b]);
        sb.total_cmp(&sa).then(ta.total_cmp(&tb)).then(a.cmp(&b))
    });
    idx
}

/// Greedy matching in rank order. Returns the true-positive flag of every
/// detection, in rank order.
fn greedy_match(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Vec<bool> {
    let order = rank_order(dets, |d| (d.score, d.start));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video != d.video {
                    continue;
                }
                let (inter, union) = overlap_terms(d.start, d.end, g.start, g.end);
                let iou = if union > 0.0 { inter / union } else { 0.0 };
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= thresh => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Average precision for one class at one tIoU threshold.
///
/// All-point interpolation: the sum over true positives of the precision
/// envelope at that rank, divided by the number of ground truths. Both
/// empty gives 1.0; ground truths without detections give 0.0.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    if dets.is_empty() {
        return 0.0;
    }
    let tp = greedy_match(dets, gts, thresh);
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        hits += is_tp as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // monotone envelope from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = tp
        .iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .fold(0.0, |acc, (_, p)| acc + p);
    sum / gts.len() as f64
}

/// Precision/recall points in rank order, for plotting.
pub fn pr_curve(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Vec<(f64, f64)> {
    if gts.is_empty() {
        return Vec::new();
    }
    let tp = greedy_match(dets, gts, thresh);
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += t as usize;
            (hits as f64 / gts.len() as f64, hits as f64 / (k + 1) as f64)
        })
        .collect()
}

/// tIoU thresholds to evaluate at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    /// NMS suppression threshold applied before scoring.
    pub nms_iou: f64,
    /// Maximum detections kept per video.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::thumos()
    }
}

impl EvalConfig {
    /// `[0.3, 0.4, 0.5, 0.6, 0.7]`.
    pub fn thumos() -> Self {
        Self {
            tiou_thresholds: (3..=7).map(|i| i as f64 / 10.0).collect(),
            nms_iou: 0.5,
            top_k: 100,
        }
    }

    /// `[0.5, 0.55, ..., 0.95]`.
    pub fn activitynet() -> Self {
        Self {
            tiou_thresholds: (10..=19).map(|i| i as f64 * 5.0 / 100.0).collect(),
            nms_iou: 0.5,
            top_k: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty() {
            return Err(Error::invalid("at least one tIoU threshold is required"));
        }
        if self.tiou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid("tIoU thresholds must lie in (0, 1)"));
        }
        if self.tiou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("tIoU thresholds must be strictly increasing"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || self.top_k == 0 {
            return Err(Error::invalid("nms_iou must lie in (0, 1] and top_k be positive"));
        }
        Ok(())
    }
}

/// mAP table for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// mAP at each threshold, aligned with `thresholds`.
    pub map: Vec<f64>,
    /// Mean of `map`.
    pub average: f64,
    /// `per_class[c][k]` is the AP of class `c` at threshold `k`; `None` for
    /// classes without ground truth.
    pub per_class: Vec<Option<Vec<f64>>>,
}

fn fmt_threshold(t: f64) -> String {
    let s = format!("{t:.2}");
    s.strip_suffix('0').map(str::to_string).unwrap_or(s)
}

impl MapReport {
    /// JSON report: `{"mAP": {thr: value}, "avg": value, "per_class": {name: {thr: ap}}}`.
    pub fn to_json(&self, labels: &[String]) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            map.insert(fmt_threshold(*t), serde_json::json!(m));
        }
        let mut per_class = serde_json::Map::new();
        for (c, aps) in self.per_class.iter().enumerate() {
            let name = labels.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
            let v = match aps {
                Some(aps) => {
                    let mut m = serde_json::Map::new();
                    for (t, a) in self.thresholds.iter().zip(aps) {
                        m.insert(fmt_threshold(*t), serde_json::json!(a));
                    }
                    serde_json::Value::Object(m)
                }
                None => serde_json::Value::Null,
            };
            per_class.insert(name, v);
        }
        serde_json::json!({ "mAP": map, "avg": self.average, "per_class": per_class })
    }

    /// Column-aligned text table (percentages): thresholds then AVG.
    pub fn to_table(&self, row_name: &str) -> String {
        format_table(&self.thresholds, &[(row_name.to_string(), self.map.clone(), self.average, None)])
    }
}

/// Renders rows of `(name, per-threshold values, average, optional sd)` as a
/// column-aligned table in percent.
pub fn format_table(thresholds: &[f64], rows: &[(String, Vec<f64>, f64, Option<f64>)]) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$} |", "method");
    for t in thresholds {
        let _ = write!(out, " {:>6}", fmt_threshold(*t));
    }
    let _ = writeln!(out, " | {:>13}", "AVG");
    let _ = writeln!(out, "{}", "-".repeat(name_w + 2 + 7 * thresholds.len() + 16));
    for (name, vals, avg, sd) in rows {
        let _ = write!(out, "{name:<name_w$} |");
        for v in vals {
            let _ = write!(out, " {:>6.1}", 100.0 * v);
        }
        match sd {
            Some(sd) => {
                let _ = writeln!(out, " | {:>6.1} ± {:<4.1}", 100.0 * avg, 100.0 * sd);
            }
            None => {
                let _ = writeln!(out, " | {:>13.1}", 100.0 * avg);
            }
        }
    }
    out
}

/// Splits per-video predictions into class-wise detection lists.
///
/// A prediction bound to a class contributes only to that class; an unbound
/// (dense) prediction contributes to every class with that class's score.
pub fn collect_class_detections(
    results: &[(AnnotationSet, Vec<Prediction>)],
    num_classes: usize,
) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let mut dets = vec![Vec::new(); num_classes];
    let mut gts = vec![Vec::new(); num_classes];
    for (v, (ann, preds)) in results.iter().enumerate() {
        for inst in &ann.instances {
            if inst.label < num_classes {
                gts[inst.label].push(GroundTruth {
                    video: v,
                    start: inst.start,
                    end: inst.end,
                });
            }
        }
        for p in preds {
            let classes: Vec<usize> = match p.label {
                Some(c) => vec![c],
                None => (0..num_classes).collect(),
            };
            for c in classes {
                if c < num_classes {
                    dets[c].push(Detection {
                        video: v,
                        start: p.start,
                        end: p.end,
                        score: p.scores[c],
                    });
                }
            }
        }
    }
    (dets, gts)
}

/// mAP at every threshold of `cfg`, with detections pooled per class across
/// all videos. Classes without any ground truth are left out of the mean.
pub fn mean_average_precision(
    results: &[(AnnotationSet, Vec<Prediction>)],
    num_classes: usize,
    cfg: &EvalConfig,
) -> MapReport {
    let (dets, gts) = collect_class_detections(results, num_classes);
    let per_class: Vec<Option<Vec<f64>>> = (0..num_classes)
        .map(|c| {
            if gts[c].is_empty() {
                None
            } else {
                Some(
                    cfg.tiou_thresholds
                        .iter()
                        .map(|&t| average_precision(&dets[c], &gts[c], t))
                        .collect(),
                )
            }
        })
        .collect();
    let counted: Vec<&Vec<f64>> = per_class.iter().flatten().collect();
    let map: Vec<f64> = (0..cfg.tiou_thresholds.len())
        .map(|k| {
            if counted.is_empty() {
                0.0
            } else {
                counted.iter().fold(0.0, |acc, aps| acc + aps[k]) / counted.len() as f64
            }
        })
        .collect();
    let average = map.iter().fold(0.0, |acc, m| acc + m) / map.len().max(1) as f64;
    MapReport {
        thresholds: cfg.tiou_thresholds.clone(),
        map,
        average,
        per_class,
    }
}

/// Convenience: per-class AP tables keyed by class index.
pub fn per_class_ap(report: &MapReport) -> BTreeMap<usize, Vec<f64>> {
    report
        .per_class
        .iter()
        .enumerate()
        .filter_map(|(c, v)| v.clone().map(|v| (c, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ActionInstance;
    use proptest::prelude::*;

    fn det(s: f64, e: f64, score: f64) -> Detection {
        Detection {
            video: 0,
            start: s,
            end: e,
            score,
        }
    }

    fn gt(s: f64, e: f64) -> GroundTruth {
        GroundTruth {
            video: 0,
            start: s,
            end: e,
        }
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((0.0, 2.0), (1.0, 3.0)).unwrap(), 1.0 / 3.0);
        assert_eq!(tiou((1.0, 4.0), (1.0, 4.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!(tiou((1.0, 1.0), (0.0, 2.0)).is_err());
    }

    #[test]
    fn ap_single_match() {
        assert_eq!(average_precision(&[det(0.0, 1.0, 0.9)], &[gt(0.0, 1.1)], 0.5), 1.0);
    }

    #[test]
    fn ap_false_positive_ranked_first() {
        let dets = [det(5.0, 6.0, 0.9), det(0.0, 1.0, 0.8)];
        assert_eq!(average_precision(&dets, &[gt(0.0, 1.0)], 0.5), 0.5);
    }

    #[test]
    fn ap_empty_cases() {
        assert_eq!(average_precision(&[], &[gt(0.0, 1.0)], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 1.0);
        assert_eq!(average_precision(&[det(0.0, 1.0, 0.5)], &[], 0.5), 0.0);
    }

    #[test]
    fn matches_do_not_cross_videos() {
        let d = Detection {
            video: 1,
            ..det(0.0, 1.0, 0.9)
        };
        assert_eq!(average_precision(&[d], &[gt(0.0, 1.0)], 0.5), 0.0);
    }

    fn pred(s: f64, e: f64, scores: Vec<f64>) -> Prediction {
        Prediction {
            start: s,
            end: e,
            scores,
            source_timestep: 0,
            label: None,
        }
    }

    #[test]
    fn perfect_single_class_detection() {
        let ann = AnnotationSet::new("v", 10.0, vec![ActionInstance::new(1.0, 3.0, 0)]);
        let r = mean_average_precision(&[(ann, vec![pred(1.0, 3.0, vec![0.9])])], 1, &EvalConfig::thumos());
        assert!(r.map.iter().all(|&m| m == 1.0));
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn class_mean_and_exclusion() {
        let ann = AnnotationSet::new(
            "v",
            10.0,
            vec![ActionInstance::new(1.0, 3.0, 0), ActionInstance::new(5.0, 7.0, 1)],
        );
        let p = Prediction {
            label: Some(0),
            ..pred(1.0, 3.0, vec![0.9, 0.0, 0.0])
        };
        let cfg = EvalConfig {
            tiou_thresholds: vec![0.5],
            ..EvalConfig::thumos()
        };
        let r = mean_average_precision(&[(ann, vec![p])], 3, &cfg);
        assert_eq!(r.map, vec![0.5]);
        assert!(r.per_class[2].is_none());
    }

    #[test]
    fn presets_are_increasing() {
        EvalConfig::thumos().validate().unwrap();
        EvalConfig::activitynet().validate().unwrap();
        assert_eq!(EvalConfig::activitynet().tiou_thresholds.len(), 10);
        let bad = EvalConfig {
            tiou_thresholds: vec![0.5, 0.5],
            ..EvalConfig::thumos()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn table_has_avg_column() {
        let r = MapReport {
            thresholds: vec![0.3, 0.5],
            map: vec![0.5, 0.25],
            average: 0.375,
            per_class: vec![],
        };
        let t = r.to_table("rgb_baseline");
        assert!(t.contains("AVG"));
        assert!(t.contains("37.5"));
        let j = r.to_json(&[]);
        assert_eq!(j["avg"], 0.375);
        assert_eq!(j["mAP"]["0.3"], 0.5);
    }

    #[test]
    fn tiou_gradient_matches_finite_differences() {
        let (s, e) = (0.4, 2.3);
        let target = (1.0, 3.0);
        let (_, ds, de) = tiou_with_grad((s, e), target);
        let h = 1e-6;
        let f = |s: f64, e: f64| tiou((s, e), target).unwrap();
        assert!((ds - (f(s + h, e) - f(s - h, e)) / (2.0 * h)).abs() < 1e-8);
        assert!((de - (f(s, e + h) - f(s, e - h)) / (2.0 * h)).abs() < 1e-8);
    }

    fn interval() -> impl Strategy<Value = (f64, f64)> {
        (0.0..10.0f64, 0.01..5.0f64).prop_map(|(s, l)| (s, s + l))
    }

    proptest! {
        #[test]
        fn tiou_is_symmetric_and_bounded(a in interval(), b in interval()) {
            let x = tiou(a, b).unwrap();
            prop_assert_eq!(x, tiou(b, a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(tiou(a, a).unwrap(), 1.0);
        }

        #[test]
        fn tiou_grows_as_gap_shrinks(a in interval(), len in 0.1..3.0f64, gap in 0.0..4.0f64, step in 0.0..1.0f64) {
            let b = |g: f64| (a.1 + g - len, a.1 + g);
            let far = tiou(a, b(gap + step)).unwrap();
            let near = tiou(a, b(gap)).unwrap();
            prop_assert!(near >= far - 1e-12);
        }

        #[test]
        fn ap_depends_only_on_ranks(
            raw in proptest::collection::vec((interval(), 0.0..1.0f64), 1..8),
            gts in proptest::collection::vec(interval(), 1..5),
        ) {
            let dets: Vec<Detection> = raw.iter().map(|(iv, s)| det(iv.0, iv.1, *s)).collect();
            let moved: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score.powi(3) * 5.0 + 1.0, ..*d }).collect();
            let g: Vec<GroundTruth> = gts.iter().map(|iv| gt(iv.0, iv.1)).collect();
            prop_assert_eq!(average_precision(&dets, &g, 0.5), average_precision(&moved, &g, 0.5));
        }

        #[test]
        // Ground truths of one class do not overlap; with that, at thresholds
        // of 0.5 and above no interval can clear the threshold for two of them.
        fn duplicate_of_a_match_never_helps(
            raw in proptest::collection::vec((interval(), 0.0..1.0f64), 1..6),
            spans in proptest::collection::vec((0.0..3.0f64, 0.1..4.0f64), 1..4),
            thresh in 0.5..0.9f64,
        ) {
            let mut cursor = 0.0;
            let g: Vec<GroundTruth> = spans
                .iter()
                .map(|&(gap, len)| {
                    let s = cursor + gap;
                    cursor = s + len;
                    gt(s, s + len)
                })
                .collect();
            let mut dets: Vec<Detection> = raw.iter().map(|(iv, s)| det(iv.0, iv.1, *s)).collect();
            dets.push(det(g[0].start, g[0].end, 0.5));
            let order = rank_order(&dets, |d| (d.score, d.start));
            let tp = greedy_match(&dets, &g, thresh);
            let matched = order[tp.iter().position(|t| *t).expect("exact copy of a gt is matched")];
            let base = average_precision(&dets, &g, thresh);
            prop_assert!((0.0..=1.0).contains(&base));
            dets.push(dets[matched]);
            prop_assert!(average_precision(&dets, &g, thresh) <= base);
        }
    }
}
