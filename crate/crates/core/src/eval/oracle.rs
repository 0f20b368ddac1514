//! Brute-force AP for small problems, used to cross-check
//! [`average_precision`](super::average_precision).
//!
//! Every partial one-to-one assignment of detections to ground truths is
//! enumerated; the unique one consistent with greedy rank-order matching is
//! kept, and AP is read off by scanning every rank for the best precision at
//! or below it.

use super::{Detection, GroundTruth};
use crate::error::{Error, Result};

pub const MAX_DETECTIONS: usize = 8;
pub const MAX_GROUND_TRUTHS: usize = 5;

fn iou(d: &Detection, g: &GroundTruth) -> f64 {
    if d.video != g.video {
        return 0.0;
    }
    let inter = (d.end.min(g.end) - d.start.max(g.start)).max(0.0);
    let union = (d.end - d.start) + (g.end - g.start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps the comparison explicit
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&dets[order[j - 1]], &dets[order[j]]);
            let before = b.score > a.score || (b.score == a.score && b.start < a.start);
            if !before {
                break;
            }
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    order
}

/// Whether `assign[k]` (gt index or `None` for the k-th ranked detection) is
/// what greedy matching would produce.
fn consistent(ranked_dets: &[Detection], gts: &[GroundTruth], assign: &[Option<usize>], thresh: f64) -> bool {
    let mut taken = vec![false; gts.len()];
    for (k, d) in ranked_dets.iter().enumerate() {
        let avail: Vec<usize> = (0..gts.len()).filter(|&j| !taken[j] && gts[j].video == d.video).collect();
        let best = avail.iter().map(|&j| iou(d, &gts[j])).fold(f64::NEG_INFINITY, f64::max);
        match assign[k] {
            Some(j) => {
                if taken[j] || gts[j].video != d.video {
                    return false;
                }
                let v = iou(d, &gts[j]);
                if v < thresh || v < best {
                    return false;
                }
                // lowest index among the maximisers
                if avail.iter().any(|&i| i < j && iou(d, &gts[i]) == v) {
                    return false;
                }
                taken[j] = true;
            }
            None => {
                if !avail.is_empty() && best >= thresh {
                    return false;
                }
            }
        }
    }
    true
}

fn enumerate(k: usize, n: usize, g: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
    if k == n {
        out.push(cur.clone());
        return;
    }
    cur.push(None);
    enumerate(k + 1, n, g, used, cur, out);
    cur.pop();
    for j in 0..g {
        if !used[j] {
            used[j] = true;
            cur.push(Some(j));
            enumerate(k + 1, n, g, used, cur, out);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Exhaustive AP. Errors above [`MAX_DETECTIONS`] detections or
/// [`MAX_GROUND_TRUTHS`] ground truths.
pub fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Result<f64> {
    if dets.len() > MAX_DETECTIONS || gts.len() > MAX_GROUND_TRUTHS {
        return Err(Error::invalid(format!(
            "oracle supports at most {MAX_DETECTIONS} detections and {MAX_GROUND_TRUTHS} ground truths"
        )));
    }
    if gts.is_empty() {
        return Ok(if dets.is_empty() { 1.0 } else { 0.0 });
    }
    let ranked_dets: Vec<Detection> = ranked(dets).into_iter().map(|i| dets[i]).collect();
    let mut all = Vec::new();
    enumerate(0, dets.len(), gts.len(), &mut vec![false; gts.len()], &mut Vec::new(), &mut all);
    let valid: Vec<&Vec<Option<usize>>> = all
        .iter()
        .filter(|a| consistent(&ranked_dets, gts, a, thresh))
        .collect();
    if valid.len() != 1 {
        return Err(Error::invalid(format!("{} consistent matchings, expected one", valid.len())));
    }
    let tp: Vec<bool> = valid[0].iter().map(Option::is_some).collect();
    let prec_at = |k: usize| tp[..=k].iter().filter(|t| **t).count() as f64 / (k + 1) as f64;
    let mut sum = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            sum += (k..tp.len()).map(prec_at).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(sum / gts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_large_inputs() {
        let d = Detection {
            video: 0,
            start: 0.0,
            end: 1.0,
            score: 0.5,
        };
        assert!(oracle_ap(&[d; 9], &[], 0.5).is_err());
    }

    #[test]
    fn hand_example() {
        let d = |s: f64, e: f64, sc: f64| Detection {
            video: 0,
            start: s,
            end: e,
            score: sc,
        };
        let g = GroundTruth {
            video: 0,
            start: 0.0,
            end: 1.0,
        };
        assert_eq!(oracle_ap(&[d(5.0, 6.0, 0.9), d(0.0, 1.0, 0.8)], &[g], 0.5).unwrap(), 0.5);
    }
}
