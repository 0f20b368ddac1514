//! Anchor-free detection head.
//!
//! Every timestep of a `T' x C` feature sequence emits one class-score vector
//! and a pair of nonnegative distances `(d_s, d_e)` to the action start and
//! end, measured in feature-grid units. This module also owns decoding to
//! intervals, the positive/negative assignment, the three detection losses
//! and class-wise NMS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softplus, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{overlap_terms, rank_order, tiou_with_grad};
use crate::params::{Binder, ParamStore};
use crate::types::{ActionInstance, AnnotationSet, LossWeights, Prediction, PredictionSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Initial foreground probability of the classifier bias.
    pub prior_prob: f64,
    /// Initial offset (grid units) produced by the regressor bias.
    pub init_offset: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            in_dim: 8,
            hidden: 16,
            num_classes: 4,
            prior_prob: 0.1,
            init_offset: 2.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) || !(self.init_offset > 0.0) {
            return Err(Error::invalid("prior_prob must be in (0, 1) and init_offset positive"));
        }
        Ok(())
    }

    pub fn init<R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let h = self.hidden;
        p.init_normal(&format!("{prefix}.trunk.w"), &[h, self.in_dim, 3], self.in_dim * 3, 1.5, rng);
        p.init_zeros(&format!("{prefix}.trunk.b"), &[h]);
        p.init_normal(&format!("{prefix}.cls.w"), &[self.num_classes, h, 1], h, 0.1, rng);
        let prior = -((1.0 - self.prior_prob) / self.prior_prob).ln();
        p.insert(
            format!("{prefix}.cls.b"),
            Tensor::from_parts(vec![self.num_classes], vec![prior; self.num_classes]),
        );
        p.init_normal(&format!("{prefix}.reg.w"), &[2, h, 1], h, 0.1, rng);
        let inv = self.init_offset.exp_m1().ln();
        p.insert(format!("{prefix}.reg.b"), Tensor::from_parts(vec![2], vec![inv; 2]));
        p
    }

    /// Records the head on `g` for features `z` of shape `[T', in_dim]`.
    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, params: &ParamStore, prefix: &str, z: Var) -> Result<HeadVars> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(format!("head expects [T', {}], got {shape:?}", self.in_dim)));
        }
        let w = binder.bind(g, params, &format!("{prefix}.trunk.w"))?;
        let b = binder.bind(g, params, &format!("{prefix}.trunk.b"))?;
        let pre = g.conv1d(z, w, b)?;
        let h = g.silu(pre);
        let w = binder.bind(g, params, &format!("{prefix}.cls.w"))?;
        let b = binder.bind(g, params, &format!("{prefix}.cls.b"))?;
        let cls_logits = g.conv1d(h, w, b)?;
        let w = binder.bind(g, params, &format!("{prefix}.reg.w"))?;
        let b = binder.bind(g, params, &format!("{prefix}.reg.b"))?;
        let reg = g.conv1d(h, w, b)?;
        let offsets = g.softplus(reg);
        Ok(HeadVars { cls_logits, offsets })
    }

    /// Graph-free forward pass.
    pub fn forward_tensor(&self, params: &ParamStore, prefix: &str, z: Tensor) -> Result<RawHeadOutput> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let zv = g.constant(z);
        let h = self.forward(&mut g, &mut binder, params, prefix, zv)?;
        Ok(h.raw(&g))
    }
}

/// Head outputs recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub cls_logits: Var,
    pub offsets: Var,
}

impl HeadVars {
    pub fn raw(&self, g: &Graph) -> RawHeadOutput {
        RawHeadOutput {
            cls_logits: g.value(self.cls_logits).clone(),
            offsets: g.value(self.offsets).clone(),
        }
    }
}

/// Pre-sigmoid class logits `[T', C]` and nonnegative offsets `[T', 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeadOutput {
    pub cls_logits: Tensor,
    pub offsets: Tensor,
}

impl RawHeadOutput {
    pub fn new(cls_logits: Tensor, offsets: Tensor) -> Result<Self> {
        let (cs, os) = (cls_logits.shape(), offsets.shape());
        if cs.len() != 2 || os.len() != 2 || os[1] != 2 || cs[0] != os[0] {
            return Err(Error::shape(format!("logits {cs:?} and offsets {os:?} do not form a head output")));
        }
        if offsets.data().iter().any(|&d| d < 0.0) {
            return Err(Error::invalid("offsets must be nonnegative"));
        }
        Ok(Self { cls_logits, offsets })
    }

    pub fn len(&self) -> usize {
        self.cls_logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.cls_logits.cols()
    }

    pub fn probabilities(&self) -> Tensor {
        self.cls_logits.map(sigmoid)
    }
}

/// Maps feature-grid positions to seconds: timestep `t` sits at
/// `t * stride / fps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub stride: usize,
    pub fps: f64,
}

impl Grid {
    pub fn new(stride: usize, fps: f64) -> Self {
        Self { stride, fps }
    }

    pub fn seconds(&self, grid_units: f64) -> f64 {
        grid_units * self.stride as f64 / self.fps
    }

    pub fn units(&self, seconds: f64) -> f64 {
        seconds * self.fps / self.stride as f64
    }

    /// Ground-truth offsets `(d_s, d_e)` of `inst` seen from timestep `t`.
    pub fn encode_offsets(&self, t: usize, inst: &ActionInstance) -> [f64; 2] {
        [t as f64 - self.units(inst.start), self.units(inst.end) - t as f64]
    }
}

/// Turns raw head output into one prediction per timestep. Intervals are
/// clamped to `[0, duration]`; degenerate ones are kept here (so indices
/// line up with timesteps) and dropped by [`nms`].
pub fn decode(raw: &RawHeadOutput, grid: Grid, duration: f64) -> PredictionSet {
    let preds = (0..raw.len())
        .map(|t| {
            let o = raw.offsets.row(t);
            let start = grid.seconds(t as f64 - o[0]).clamp(0.0, duration);
            let end = grid.seconds(t as f64 + o[1]).clamp(0.0, duration);
            Prediction {
                start,
                end,
                scores: raw.cls_logits.row(t).iter().map(|&x| sigmoid(x)).collect(),
                source_timestep: t,
                label: None,
            }
        })
        .collect();
    PredictionSet::unassigned(preds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMode {
    CenterInside,
    IouThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub mode: AssignMode,
    pub iou_pos_threshold: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            mode: AssignMode::CenterInside,
            iou_pos_threshold: 0.5,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_pos_threshold > 0.0 && self.iou_pos_threshold <= 1.0) {
            return Err(Error::invalid("iou_pos_threshold must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Fills the positive/negative partition of `preds` against `gt`.
pub fn assign(mut preds: PredictionSet, gt: &AnnotationSet, cfg: &AssignConfig, grid: Grid) -> PredictionSet {
    preds.positive_idx.clear();
    preds.negative_idx.clear();
    preds.matched_gt.clear();
    for (i, p) in preds.predictions.iter().enumerate() {
        let matched = match cfg.mode {
            AssignMode::CenterInside => {
                let tau = grid.seconds(p.source_timestep as f64);
                gt.instances
                    .iter()
                    .filter(|g| g.start <= tau && tau <= g.end)
                    .min_by(|a, b| {
                        a.duration()
                            .total_cmp(&b.duration())
                            .then(a.start.total_cmp(&b.start))
                    })
                    .copied()
            }
            AssignMode::IouThreshold => {
                let mut best: Option<(f64, ActionInstance)> = None;
                if p.start < p.end {
                    for g in &gt.instances {
                        let (inter, union) = overlap_terms(p.start, p.end, g.start, g.end);
                        let iou = inter / union;
                        if best.is_none_or(|(b, _)| iou > b) {
                            best = Some((iou, *g));
                        }
                    }
                }
                best.filter(|(iou, _)| *iou >= cfg.iou_pos_threshold).map(|(_, g)| g)
            }
        };
        match matched {
            Some(g) => {
                preds.positive_idx.push(i);
                preds.matched_gt.insert(i, g);
            }
            None => preds.negative_idx.push(i),
        }
    }
    preds
}

/// Loss targets on the feature grid, derived from a filled partition.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub num_classes: usize,
    /// `(timestep, matched interval in grid units, class)`.
    pub positives: Vec<(usize, [f64; 2], usize)>,
    pub negatives: Vec<usize>,
}

impl DetectionTargets {
    pub fn from_partition(set: &PredictionSet, grid: Grid, num_classes: usize) -> Result<Self> {
        set.check_partition()?;
        let positives = set
            .positive_idx
            .iter()
            .map(|&i| {
                let g = set.matched_gt[&i];
                if g.label >= num_classes {
                    return Err(Error::invalid(format!("label {} out of range", g.label)));
                }
                Ok((set.predictions[i].source_timestep, [grid.units(g.start), grid.units(g.end)], g.label))
            })
            .collect::<Result<Vec<_>>>()?;
        let negatives = set.negative_idx.iter().map(|&i| set.predictions[i].source_timestep).collect();
        Ok(Self {
            num_classes,
            positives,
            negatives,
        })
    }

    /// Decodes, assigns and converts in one go.
    pub fn build(raw: &RawHeadOutput, gt: &AnnotationSet, cfg: &AssignConfig, grid: Grid) -> Result<Self> {
        let set = assign(decode(raw, grid, gt.duration), gt, cfg, grid);
        Self::from_partition(&set, grid, raw.num_classes())
    }
}

fn focal_value(p: f64, log_p: f64, log_1mp: f64, q: f64, gamma: f64) -> f64 {
    let mut bce = 0.0;
    if q > 0.0 {
        bce -= q * log_p;
    }
    if q < 1.0 {
        bce -= (1.0 - q) * log_1mp;
    }
    (q - p).abs().powf(gamma) * bce
}

/// Focal binary term for probability `p` against a target `q` in `[0, 1]`:
/// `|q - p|^gamma * BCE(p, q)`. For `q` in `{0, 1}` this is the usual focal
/// loss; for soft targets it is minimised (at zero) by `p = q`.
pub fn focal_term(p: f64, q: f64, gamma: f64) -> f64 {
    focal_value(p, p.ln(), (-p).ln_1p(), q, gamma)
}

/// [`focal_term`] evaluated from a logit, with its derivative.
pub(crate) fn focal_term_logit(x: f64, q: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let value = focal_value(p, -softplus(-x), -softplus(x), q, gamma);
    let mut bce = 0.0;
    if q > 0.0 {
        bce += q * softplus(-x);
    }
    if q < 1.0 {
        bce += (1.0 - q) * softplus(x);
    }
    let d = p - q;
    let m = d.abs().powf(gamma);
    let dm = if gamma == 0.0 || d == 0.0 {
        0.0
    } else {
        gamma * d.abs().powf(gamma - 1.0) * d.signum() * p * (1.0 - p)
    };
    (value, m * d + bce * dm)
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    if beta > 0.0 && d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

pub(crate) fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if beta > 0.0 && d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// A loss value with gradients with respect to the raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_logits: Vec<f64>,
    pub d_offsets: Vec<f64>,
}

impl LossGrad {
    fn zeros(raw: &RawHeadOutput) -> Self {
        Self {
            value: 0.0,
            d_logits: vec![0.0; raw.cls_logits.len()],
            d_offsets: vec![0.0; raw.offsets.len()],
        }
    }
}

/// Focal classification loss, each set normalised by its own size.
pub fn loss_cls(raw: &RawHeadOutput, targets: &DetectionTargets, w: &LossWeights) -> LossGrad {
    let mut out = LossGrad::zeros(raw);
    let c = raw.num_classes();
    let add = |t: usize, label: Option<usize>, scale: f64, out: &mut LossGrad| {
        for k in 0..c {
            let q = if label == Some(k) { 1.0 } else { 0.0 };
            let (v, d) = focal_term_logit(raw.cls_logits.at2(t, k), q, w.focal_gamma);
            out.value += scale * v;
            out.d_logits[t * c + k] += scale * d;
        }
    };
    if !targets.positives.is_empty() {
        let scale = w.alpha_pos / targets.positives.len() as f64;
        for &(t, _, label) in &targets.positives {
            add(t, Some(label), scale, &mut out);
        }
    }
    if !targets.negatives.is_empty() {
        let scale = w.alpha_neg / targets.negatives.len() as f64;
        for &t in &targets.negatives {
            add(t, None, scale, &mut out);
        }
    }
    out
}

/// Smooth-L1 on `(d_s, d_e)` over positives, averaged over both components.
pub fn loss_reg(raw: &RawHeadOutput, targets: &DetectionTargets, w: &LossWeights) -> LossGrad {
    let mut out = LossGrad::zeros(raw);
    if targets.positives.is_empty() {
        return out;
    }
    let scale = 0.5 / targets.positives.len() as f64;
    for &(t, [s, e], _) in &targets.positives {
        let want = [t as f64 - s, e - t as f64];
        for k in 0..2 {
            let d = raw.offsets.at2(t, k) - want[k];
            out.value += scale * smooth_l1(d, w.smooth_l1_beta);
            out.d_offsets[2 * t + k] += scale * smooth_l1_grad(d, w.smooth_l1_beta);
        }
    }
    out
}

/// Mean of `1 - tIoU` between each positive's predicted interval and its
/// matched instance, in grid units and without clamping.
pub fn loss_comp(raw: &RawHeadOutput, targets: &DetectionTargets) -> LossGrad {
    let mut out = LossGrad::zeros(raw);
    if targets.positives.is_empty() {
        return out;
    }
    let scale = 1.0 / targets.positives.len() as f64;
    for &(t, [s, e], _) in &targets.positives {
        let o = raw.offsets.row(t);
        let pred = (t as f64 - o[0], t as f64 + o[1]);
        let (iou, d_start, d_end) = tiou_with_grad(pred, (s, e));
        out.value += scale * (1.0 - iou);
        // start = t - d_s, end = t + d_e
        out.d_offsets[2 * t] += scale * d_start;
        out.d_offsets[2 * t + 1] -= scale * d_end;
    }
    out
}

/// Unweighted detection loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionLoss {
    pub cls: f64,
    pub reg: f64,
    pub comp: f64,
}

impl DetectionLoss {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_cls * self.cls + w.lambda_reg * self.reg + w.lambda_comp * self.comp
    }
}

/// `lambda_cls L_cls + lambda_reg L_reg + lambda_comp L_comp`.
pub fn detection_loss(raw: &RawHeadOutput, targets: &DetectionTargets, w: &LossWeights) -> (f64, DetectionLoss) {
    let parts = DetectionLoss {
        cls: loss_cls(raw, targets, w).value,
        reg: loss_reg(raw, targets, w).value,
        comp: loss_comp(raw, targets).value,
    };
    (parts.total(w), parts)
}

/// The three detection loss components as graph scalars.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLossVars {
    pub cls: Var,
    pub reg: Var,
    pub comp: Var,
}

/// Records the three detection losses on `g` as differentiable scalars.
pub fn detection_loss_vars(g: &mut Graph, head: &HeadVars, targets: &DetectionTargets, w: &LossWeights) -> DetectionLossVars {
    let raw = head.raw(g);
    let cls = loss_cls(&raw, targets, w);
    let reg = loss_reg(&raw, targets, w);
    let comp = loss_comp(&raw, targets);
    DetectionLossVars {
        cls: g.scalar_fn(&[head.cls_logits], cls.value, vec![cls.d_logits]),
        reg: g.scalar_fn(&[head.offsets], reg.value, vec![reg.d_offsets]),
        comp: g.scalar_fn(&[head.offsets], comp.value, vec![comp.d_offsets]),
    }
}

/// Class-wise greedy NMS. Degenerate intervals are dropped first. Output
/// predictions are bound to their class and sorted by score, at most
/// `top_k` of them.
pub fn nms(preds: &PredictionSet, iou_thresh: f64, top_k: usize) -> PredictionSet {
    let num_classes = preds.predictions.iter().map(|p| p.scores.len()).max().unwrap_or(0);
    let mut kept: Vec<Prediction> = Vec::new();
    for c in 0..num_classes {
        let cands: Vec<&Prediction> = preds
            .predictions
            .iter()
            .filter(|p| p.start < p.end && c < p.scores.len() && p.label.is_none_or(|l| l == c))
            .collect();
        let order = rank_order(&cands, |p| (p.scores[c], p.start));
        let mut chosen: Vec<&Prediction> = Vec::new();
        for i in order {
            let p = cands[i];
            let suppressed = chosen.iter().any(|k| {
                let (inter, union) = overlap_terms(p.start, p.end, k.start, k.end);
                inter / union > iou_thresh
            });
            if !suppressed {
                chosen.push(p);
            }
        }
        kept.extend(chosen.into_iter().map(|p| Prediction {
            label: Some(c),
            ..p.clone()
        }));
    }
    let order = rank_order(&kept, |p| (p.score(), p.start));
    let out = order.into_iter().take(top_k).map(|i| kept[i].clone()).collect();
    PredictionSet::unassigned(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(logits: Vec<f64>, c: usize, offsets: Vec<f64>) -> RawHeadOutput {
        let t = offsets.len() / 2;
        RawHeadOutput::new(
            Tensor::new(vec![t, c], logits).unwrap(),
            Tensor::new(vec![t, 2], offsets).unwrap(),
        )
        .unwrap()
    }

    fn one_positive(t: usize, interval: [f64; 2]) -> DetectionTargets {
        DetectionTargets {
            num_classes: 1,
            positives: vec![(t, interval, 0)],
            negatives: vec![],
        }
    }

    #[test]
    fn shapes() {
        let cfg = HeadConfig {
            in_dim: 6,
            num_classes: 4,
            ..Default::default()
        };
        let p = cfg.init("h", &mut ChaCha8Rng::seed_from_u64(0));
        let out = cfg.forward_tensor(&p, "h", Tensor::zeros(&[8, 6])).unwrap();
        assert_eq!(out.cls_logits.shape(), &[8, 4]);
        assert_eq!(out.offsets.shape(), &[8, 2]);
        assert!(out.offsets.data().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn zero_final_layers_give_half_probability() {
        let cfg = HeadConfig::default();
        let mut p = cfg.init("h", &mut ChaCha8Rng::seed_from_u64(0));
        for n in ["h.cls.w", "h.cls.b"] {
            p.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let out = cfg.forward_tensor(&p, "h", Tensor::zeros(&[5, cfg.in_dim])).unwrap();
        assert!(out.probabilities().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decode_arithmetic_and_clamp() {
        let mut offs = vec![0.0; 10];
        offs[8] = 1.5;
        offs[9] = 2.5;
        offs[0] = 3.0;
        offs[1] = 1.0;
        let r = raw(vec![0.0; 5], 1, offs);
        let set = decode(&r, Grid::new(1, 1.0), 100.0);
        assert_eq!((set.predictions[4].start, set.predictions[4].end), (2.5, 6.5));
        assert_eq!(set.predictions[0].start, 0.0);
        assert_eq!(set.predictions[2].start, set.predictions[2].end);
        assert_eq!(set.len(), 5);
        assert!(nms(&set, 0.5, 10).predictions.iter().all(|p| p.start < p.end));
    }

    fn gt(instances: Vec<ActionInstance>) -> AnnotationSet {
        AnnotationSet::new("v", 20.0, instances)
    }

    #[test]
    fn center_inside_assignment() {
        let r = raw(vec![0.0; 12], 1, vec![1.0; 24]);
        let set = decode(&r, Grid::new(1, 1.0), 20.0);
        let a = assign(set, &gt(vec![ActionInstance::new(2.0, 8.0, 0), ActionInstance::new(3.0, 5.0, 0)]), &AssignConfig::default(), Grid::new(1, 1.0));
        a.check_partition().unwrap();
        assert_eq!(a.matched_gt[&4], ActionInstance::new(3.0, 5.0, 0));
        assert_eq!(a.matched_gt[&7], ActionInstance::new(2.0, 8.0, 0));
        assert!(a.negative_idx.contains(&10));
    }

    #[test]
    fn iou_threshold_assignment() {
        let mut offs = vec![0.5; 24];
        offs[8] = 2.0;
        offs[9] = 2.0;
        let r = raw(vec![0.0; 12], 1, offs);
        let cfg = AssignConfig {
            mode: AssignMode::IouThreshold,
            iou_pos_threshold: 0.9,
        };
        let a = assign(decode(&r, Grid::new(1, 1.0), 20.0), &gt(vec![ActionInstance::new(2.0, 6.0, 0)]), &cfg, Grid::new(1, 1.0));
        assert_eq!(a.positive_idx, vec![4]);
    }

    #[test]
    fn loss_oracle_values() {
        let w = LossWeights::default();
        let r = raw(vec![0.0], 1, vec![1.0, 1.0]);
        let v = loss_cls(&r, &one_positive(0, [-1.0, 1.0]), &w).value;
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
        let neg = DetectionTargets {
            num_classes: 1,
            positives: vec![],
            negatives: vec![0],
        };
        assert!((loss_cls(&r, &neg, &w).value - 0.25 * 2f64.ln()).abs() < 1e-12);

        let r = raw(vec![0.0; 2], 1, vec![0.0, 0.0, 1.0, 1.0]);
        assert!((loss_comp(&r, &one_positive(1, [1.0, 3.0])).value - 2.0 / 3.0).abs() < 1e-15);

        let r = raw(vec![0.0], 1, vec![1.5, 1.5]);
        assert!((loss_reg(&r, &one_positive(0, [-1.0, 1.0]), &w).value - 0.125).abs() < 1e-15);
        let r = raw(vec![0.0], 1, vec![3.0, 3.0]);
        assert!((loss_reg(&r, &one_positive(0, [-1.0, 1.0]), &w).value - 1.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_zero_focal_loss() {
        assert_eq!(focal_term(1.0, 1.0, 2.0), 0.0);
        assert_eq!(focal_term(0.0, 0.0, 2.0), 0.0);
    }

    #[test]
    fn soft_focal_is_minimised_at_target() {
        for &q in &[0.1, 0.3, 0.5, 0.8] {
            let at = focal_term(q, q, 2.0);
            for i in 1..1000 {
                let p = i as f64 / 1000.0;
                assert!(focal_term(p, q, 2.0) >= at);
            }
        }
    }

    #[test]
    fn empty_positive_set_is_zero() {
        let r = raw(vec![0.0; 2], 1, vec![1.0; 4]);
        let t = DetectionTargets {
            num_classes: 1,
            positives: vec![],
            negatives: vec![0, 1],
        };
        assert_eq!(loss_reg(&r, &t, &LossWeights::default()).value, 0.0);
        assert_eq!(loss_comp(&r, &t).value, 0.0);
    }

    #[test]
    fn detection_loss_weights() {
        let parts = DetectionLoss {
            cls: 0.2,
            reg: 0.1,
            comp: 0.3,
        };
        assert!((parts.total(&LossWeights::default()) - 0.6).abs() < 1e-15);
        let w = LossWeights {
            lambda_comp: 0.0,
            ..Default::default()
        };
        assert!((parts.total(&w) - 0.3).abs() < 1e-15);
        assert_eq!(DetectionLoss::default().total(&w), 0.0);
    }

    fn p(s: f64, e: f64, scores: Vec<f64>) -> Prediction {
        Prediction {
            start: s,
            end: e,
            scores,
            source_timestep: 0,
            label: None,
        }
    }

    #[test]
    fn nms_examples() {
        // tIoU([0,10],[1,10]) = 0.9
        let set = PredictionSet::unassigned(vec![p(0.0, 10.0, vec![0.9]), p(1.0, 10.0, vec![0.7])]);
        let out = nms(&set, 0.5, 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out.predictions[0].score(), 0.9);

        let set = PredictionSet::unassigned(vec![p(0.0, 1.0, vec![0.9]), p(2.0, 3.0, vec![0.7])]);
        assert_eq!(nms(&set, 0.5, 10).len(), 2);

        let set = PredictionSet::unassigned(vec![p(0.0, 10.0, vec![0.9, 0.0]), p(1.0, 10.0, vec![0.0, 0.7])]);
        let out = nms(&set, 0.5, 10);
        let labels: Vec<_> = out.predictions.iter().filter(|q| q.score() > 0.5).map(|q| q.label).collect();
        assert_eq!(labels, vec![Some(0), Some(1)]);
        assert_eq!(nms(&set, 0.5, 1).len(), 1);
    }

    proptest! {
        #[test]
        fn offsets_round_trip_through_decode(t in 0usize..40, before in 0usize..20, after in 0usize..20, fps in 1u32..9, stride in 1usize..5) {
            let grid = Grid::new(stride, fps as f64);
            let tau = grid.seconds(t as f64);
            // instance boundaries on the frame grid, containing timestep t
            let frame = 1.0 / fps as f64;
            let s = ((tau / frame).floor() - before as f64).max(0.0) * frame;
            let e = ((tau / frame).ceil() + after as f64 + 1.0) * frame;
            let inst = ActionInstance::new(s, e, 0);
            let off = grid.encode_offsets(t, &inst);
            let mut offsets = vec![0.0; 2 * (t + 1)];
            offsets[2 * t] = off[0];
            offsets[2 * t + 1] = off[1];
            let r = raw(vec![0.0; t + 1], 1, offsets);
            let d = &decode(&r, grid, 1e9).predictions[t];
            prop_assert!((d.start - s).abs() <= 1e-12 * e.max(1.0));
            prop_assert!((d.end - e).abs() <= 1e-12 * e.max(1.0));
        }

        #[test]
        fn losses_are_bounded(logits in proptest::collection::vec(-8.0..8.0f64, 6), offs in proptest::collection::vec(0.0..6.0f64, 6), s in 0.0..2.0f64, len in 0.1..3.0f64) {
            let r = raw(logits, 2, offs);
            let t = DetectionTargets { num_classes: 2, positives: vec![(1, [s, s + len], 1)], negatives: vec![0, 2] };
            let w = LossWeights::default();
            prop_assert!(loss_cls(&r, &t, &w).value >= 0.0);
            prop_assert!(loss_reg(&r, &t, &w).value >= 0.0);
            let c = loss_comp(&r, &t).value;
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn assignment_is_a_partition(starts in proptest::collection::vec((0.0..15.0f64, 0.5..5.0f64), 0..4), n in 1usize..20) {
            let inst: Vec<ActionInstance> = starts.iter().map(|&(s, l)| ActionInstance::new(s, s + l, 0)).collect();
            let r = raw(vec![0.0; n], 1, vec![1.0; 2 * n]);
            for mode in [AssignMode::CenterInside, AssignMode::IouThreshold] {
                let cfg = AssignConfig { mode, iou_pos_threshold: 0.3 };
                let a = assign(decode(&r, Grid::new(1, 1.0), 20.0), &gt(inst.clone()), &cfg, Grid::new(1, 1.0));
                prop_assert!(a.check_partition().is_ok());
            }
        }
    }
}
