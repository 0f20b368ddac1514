//! Student model: branch decomposition, shared branch head, local attentive
//! fusion, joint head, the training objective and RGB-only inference.
//!
//! Parameter layout by preset:
//!
//! | preset                  | parameters                                                        |
//! |-------------------------|-------------------------------------------------------------------|
//! | `rgb_baseline`          | `backbone`, `proj`, `head`                                        |
//! | `conventional_distill`  | `backbone`, `proj`, `head`                                        |
//! | `decomposed_concat`     | `backbone`, `proj_app`, `proj_mot`, `branch_head`, `joint_head`   |
//! | `decomposed_local_attn` | the above plus `fusion.app.*`, `fusion.mot.*`                     |
//!
//! The appearance and motion branches both bind `branch_head.*`, so they run
//! on one parameter storage and their gradients add up in it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::BackboneConfig;
use crate::distill::{loss_feature_var, response_loss_vars, TeacherOutput};
use crate::error::{Error, Result};
use crate::head::{decode, detection_loss_vars, nms, AssignConfig, DetectionTargets, Grid, HeadConfig, HeadVars, RawHeadOutput};
use crate::params::{Binder, ParamStore};
use crate::types::{AnnotationSet, LossWeights, PredictionSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    RgbBaseline,
    ConventionalDistill,
    DecomposedConcat,
    DecomposedLocalAttn,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::RgbBaseline,
        Preset::ConventionalDistill,
        Preset::DecomposedConcat,
        Preset::DecomposedLocalAttn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::RgbBaseline => "rgb_baseline",
            Preset::ConventionalDistill => "conventional_distill",
            Preset::DecomposedConcat => "decomposed_concat",
            Preset::DecomposedLocalAttn => "decomposed_local_attn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }

    pub fn is_decomposed(self) -> bool {
        matches!(self, Preset::DecomposedConcat | Preset::DecomposedLocalAttn)
    }

    pub fn uses_teacher(self) -> bool {
        self != Preset::RgbBaseline
    }

    fn default_fusion(self) -> FusionKind {
        match self {
            Preset::DecomposedLocalAttn => FusionKind::LocalAttn,
            _ => FusionKind::Concat,
        }
    }

    /// Loss components logged by this preset.
    pub fn component_keys(self) -> &'static [&'static str] {
        match self {
            Preset::RgbBaseline => &["cls", "reg", "comp"],
            Preset::ConventionalDistill => &["cls", "reg", "comp", "respon_cls", "respon_reg", "feat"],
            _ => &[
                "app_cls",
                "app_reg",
                "app_comp",
                "respon_cls",
                "respon_reg",
                "feat",
                "joint_cls",
                "joint_reg",
                "joint_comp",
            ],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    LocalAttn,
    Concat,
    Sum,
}

/// Temporal pooling used to summarise the target features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Per-loss switches that cut the loss off from the shared backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopGrad {
    pub app: bool,
    pub distill: bool,
    pub joint: bool,
}

/// Multipliers on the three parts of the objective. Setting `distill` to 0
/// gives the dual-branch model without distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossScales {
    pub app: f64,
    pub distill: f64,
    pub joint: f64,
}

impl Default for LossScales {
    fn default() -> Self {
        Self {
            app: 1.0,
            distill: 1.0,
            joint: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub preset: Preset,
    pub backbone: BackboneConfig,
    /// Projection dimension `D`; 0 means `feat_channels / 2`.
    pub proj_dim: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub prior_prob: f64,
    pub init_offset: f64,
    /// Overrides the preset's fusion (decomposed presets only).
    pub fusion: Option<FusionKind>,
    pub pooling: Pooling,
    pub stop_grad: StopGrad,
    pub scales: LossScales,
    /// Teacher top-class probability below which a timestep is left out of
    /// the response loss. Off by default.
    pub confidence_mask: Option<f64>,
    pub assign: AssignConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::DecomposedLocalAttn,
            backbone: BackboneConfig::default(),
            proj_dim: 0,
            head_hidden: 16,
            num_classes: 4,
            prior_prob: 0.1,
            init_offset: 2.0,
            fusion: None,
            pooling: Pooling::Mean,
            stop_grad: StopGrad::default(),
            scales: LossScales::default(),
            confidence_mask: None,
            assign: AssignConfig::default(),
        }
    }
}

impl StudentConfig {
    pub fn d(&self) -> usize {
        if self.proj_dim == 0 {
            (self.backbone.feat_channels / 2).max(1)
        } else {
            self.proj_dim
        }
    }

    pub fn fusion_kind(&self) -> FusionKind {
        self.fusion.unwrap_or_else(|| self.preset.default_fusion())
    }

    pub fn grid(&self, fps: f64) -> Grid {
        Grid::new(self.backbone.r_t, fps)
    }

    pub fn head_config(&self, in_dim: usize) -> HeadConfig {
        HeadConfig {
            in_dim,
            hidden: self.head_hidden,
            num_classes: self.num_classes,
            prior_prob: self.prior_prob,
            init_offset: self.init_offset,
        }
    }

    fn joint_in(&self) -> usize {
        match self.fusion_kind() {
            FusionKind::Sum => self.d(),
            _ => 2 * self.d(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.in_channels != 3 {
            return Err(Error::Config("the student backbone takes RGB (in_channels = 3)".into()));
        }
        self.head_config(self.d()).validate()?;
        self.assign.validate()?;
        if self.fusion.is_some() && !self.preset.is_decomposed() {
            return Err(Error::Config(format!("fusion override has no effect on {}", self.preset)));
        }
        if let Some(tau) = self.confidence_mask {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config("confidence_mask must lie in [0, 1]".into()));
            }
        }
        let s = self.scales;
        if [s.app, s.distill, s.joint].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss scales must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Fresh parameters for this preset.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let d = self.d();
        let mut p = self.backbone.init("backbone", rng);
        if self.preset.is_decomposed() {
            p.extend(init_projection("proj_app", self.backbone.feat_channels, d, rng));
            p.extend(init_projection("proj_mot", self.backbone.feat_channels, d, rng));
            p.extend(self.head_config(d).init("branch_head", rng));
            p.extend(self.head_config(self.joint_in()).init("joint_head", rng));
            if self.fusion_kind() == FusionKind::LocalAttn {
                for dir in ["app", "mot"] {
                    for m in ["w_query", "w_key"] {
                        p.init_normal(&format!("fusion.{dir}.{m}"), &[d, d], d, 1.0, rng);
                    }
                }
            }
        } else {
            p.extend(init_projection("proj", self.backbone.feat_channels, d, rng));
            p.extend(self.head_config(d).init("head", rng));
        }
        p
    }
}

fn init_projection<R: Rng>(prefix: &str, c_in: usize, d: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    p.init_normal(&format!("{prefix}.l1.w"), &[d, c_in, 3], c_in * 3, 1.5, rng);
    p.init_zeros(&format!("{prefix}.l1.b"), &[d]);
    p.init_normal(&format!("{prefix}.l2.w"), &[d, d, 3], d * 3, 1.0, rng);
    p.init_zeros(&format!("{prefix}.l2.b"), &[d]);
    p
}

/// Two temporal conv layers (kernel 3) with SiLU between: `[T', C] -> [T', D]`.
pub fn project(g: &mut Graph, binder: &mut Binder, params: &ParamStore, prefix: &str, z: Var) -> Result<Var> {
    let w = binder.bind(g, params, &format!("{prefix}.l1.w"))?;
    let b = binder.bind(g, params, &format!("{prefix}.l1.b"))?;
    let h = g.conv1d(z, w, b)?;
    let h = g.silu(h);
    let w = binder.bind(g, params, &format!("{prefix}.l2.w"))?;
    let b = binder.bind(g, params, &format!("{prefix}.l2.b"))?;
    g.conv1d(h, w, b)
}

/// Appearance and motion projections of the same features.
pub fn decompose(g: &mut Graph, binder: &mut Binder, params: &ParamStore, z: Var) -> Result<(Var, Var)> {
    let f_app = project(g, binder, params, "proj_app", z)?;
    let f_mot = project(g, binder, params, "proj_mot", z)?;
    Ok((f_app, f_mot))
}

/// Temporal pooling `[T', D] -> [D]`.
pub fn aggregate(g: &mut Graph, f: Var, kind: Pooling) -> Var {
    match kind {
        Pooling::Mean => g.mean_time(f),
        Pooling::Max => g.max_time(f),
    }
}

/// Channel gating of `f_target` by a per-timestep weight
/// `w_t = sigmoid((W_q^T pool(f_target)) * (W_k^T f_ref[t]))`.
/// Returns the enhanced features and the weights.
pub fn local_attentive_fusion(
    g: &mut Graph,
    f_target: Var,
    f_ref: Var,
    w_query: Var,
    w_key: Var,
    pooling: Pooling,
) -> Result<(Var, Var)> {
    if g.shape(f_target) != g.shape(f_ref) {
        return Err(Error::shape(format!(
            "fusion target {:?} vs reference {:?}",
            g.shape(f_target),
            g.shape(f_ref)
        )));
    }
    let pooled = aggregate(g, f_target, pooling);
    let q = g.vec_matmul(pooled, w_query)?;
    let k = g.row_matmul(f_ref, w_key)?;
    let logits = g.mul_rows(k, q)?;
    let omega = g.sigmoid(logits);
    let out = g.mul(omega, f_target)?;
    Ok((out, omega))
}

/// Graph-free [`local_attentive_fusion`].
pub fn local_attentive_fusion_tensor(
    f_target: &Tensor,
    f_ref: &Tensor,
    w_query: &Tensor,
    w_key: &Tensor,
    pooling: Pooling,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(f_target.clone()), g.constant(f_ref.clone()));
    let (q, k) = (g.constant(w_query.clone()), g.constant(w_key.clone()));
    let (out, omega) = local_attentive_fusion(&mut g, a, b, q, k, pooling)?;
    Ok((g.value(out).clone(), g.value(omega).clone()))
}

/// Early fusion without attention: channel concat (`[T', 2D]`) or sum (`[T', D]`).
pub fn baseline_fuse(g: &mut Graph, f_app: Var, f_mot: Var, kind: FusionKind) -> Result<Var> {
    match kind {
        FusionKind::Concat => g.concat(f_app, f_mot),
        FusionKind::Sum => g.add(f_app, f_mot),
        FusionKind::LocalAttn => Err(Error::invalid("baseline_fuse takes concat or sum")),
    }
}

/// Fuses the two branches and runs the joint head.
pub fn fuse_and_detect(
    g: &mut Graph,
    binder: &mut Binder,
    params: &ParamStore,
    cfg: &StudentConfig,
    f_app: Var,
    f_mot: Var,
) -> Result<HeadVars> {
    let joint_in = match cfg.fusion_kind() {
        FusionKind::LocalAttn => {
            let wq = binder.bind(g, params, "fusion.app.w_query")?;
            let wk = binder.bind(g, params, "fusion.app.w_key")?;
            let (app, _) = local_attentive_fusion(g, f_app, f_mot, wq, wk, cfg.pooling)?;
            let wq = binder.bind(g, params, "fusion.mot.w_query")?;
            let wk = binder.bind(g, params, "fusion.mot.w_key")?;
            let (mot, _) = local_attentive_fusion(g, f_mot, f_app, wq, wk, cfg.pooling)?;
            g.concat(app, mot)?
        }
        kind => baseline_fuse(g, f_app, f_mot, kind)?,
    };
    cfg.head_config(cfg.joint_in()).forward(g, binder, params, "joint_head", joint_in)
}

/// Inputs for one training video.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    /// Centred RGB input `[T, 3, H, W]`.
    pub rgb: &'a Tensor,
    pub annotation: &'a AnnotationSet,
    pub fps: f64,
    /// Cached, detached teacher outputs; required by distilling presets
    /// unless the distillation scale is zero.
    pub teacher: Option<&'a TeacherOutput>,
}

/// A recorded training forward pass.
#[derive(Debug)]
pub struct TrainForward {
    pub graph: Graph,
    pub binder: Binder,
    pub total: Var,
    pub components: BTreeMap<String, Var>,
    /// The head used at inference (joint head, or the single head).
    pub infer_head: HeadVars,
}

impl TrainForward {
    pub fn total_value(&self) -> f64 {
        self.graph.value(self.total).item()
    }

    pub fn component_values(&self) -> BTreeMap<String, f64> {
        self.components
            .iter()
            .map(|(k, v)| (k.clone(), self.graph.value(*v).item()))
            .collect()
    }

    pub fn infer_raw(&self) -> RawHeadOutput {
        self.infer_head.raw(&self.graph)
    }

    /// Gradients of the total loss for every bound parameter.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        let grads = self.graph.backward(self.total);
        self.binder.collect(&self.graph, &grads)
    }
}

fn check_teacher<'a>(sample: &TrainSample<'a>, t_len: usize, needed: bool) -> Result<Option<&'a TeacherOutput>> {
    match sample.teacher {
        Some(t) if needed => {
            if t.raw.len() != t_len || t.z_mot.rows() != t_len {
                return Err(Error::shape(format!(
                    "teacher covers {} timesteps, student {}",
                    t.raw.len(),
                    t_len
                )));
            }
            Ok(Some(t))
        }
        None if needed => Err(Error::Precondition("this preset needs teacher outputs".into())),
        _ => Ok(None),
    }
}

/// Records the full training objective for one video.
pub fn forward_train(cfg: &StudentConfig, params: &ParamStore, sample: &TrainSample<'_>, w: &LossWeights) -> Result<TrainForward> {
    let mut g = Graph::new();
    let mut binder = Binder::new();
    let x = g.constant(sample.rgb.clone());
    let z = cfg.backbone.encode(&mut g, &mut binder, params, "backbone", x)?;
    let z_cut = g.detach(z);
    let input = |stop: bool| if stop { z_cut } else { z };
    let grid = cfg.grid(sample.fps);
    let t_len = g.shape(z)[0];
    let sd = cfg.scales.distill;
    let teacher = check_teacher(sample, t_len, cfg.preset.uses_teacher() && sd != 0.0)?;

    let mut comps: BTreeMap<String, Var> = BTreeMap::new();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let add_det = |prefix: &str, scale: f64, head: &HeadVars, targets: &DetectionTargets, g: &mut Graph, comps: &mut BTreeMap<String, Var>, terms: &mut Vec<(Var, f64)>| {
        let l = detection_loss_vars(g, head, targets, w);
        for (name, v, lambda) in [("cls", l.cls, w.lambda_cls), ("reg", l.reg, w.lambda_reg), ("comp", l.comp, w.lambda_comp)] {
            comps.insert(format!("{prefix}{name}"), v);
            terms.push((v, scale * lambda));
        }
    };
    let add_distill = |head: &HeadVars, f: Var, t: Option<&TeacherOutput>, g: &mut Graph, comps: &mut BTreeMap<String, Var>, terms: &mut Vec<(Var, f64)>| -> Result<()> {
        let (rc, rr, feat) = match t {
            Some(t) => {
                let (rc, rr) = response_loss_vars(g, head, &t.raw, w, cfg.confidence_mask)?;
                (rc, rr, loss_feature_var(g, f, &t.z_mot)?)
            }
            None => {
                let zero = g.constant(Tensor::scalar(0.0));
                (zero, zero, zero)
            }
        };
        for (name, v, lambda) in [("respon_cls", rc, w.lambda_cls), ("respon_reg", rr, w.lambda_reg), ("feat", feat, w.lambda_feat)] {
            comps.insert(name.to_string(), v);
            terms.push((v, sd * lambda));
        }
        Ok(())
    };

    let infer_head;
    if cfg.preset.is_decomposed() {
        let mut feats: HashMap<bool, (Var, Var)> = HashMap::new();
        let mut branch = |g: &mut Graph, binder: &mut Binder, stop: bool| -> Result<(Var, Var)> {
            if let Some(f) = feats.get(&stop) {
                return Ok(*f);
            }
            let f = decompose(g, binder, params, input(stop))?;
            feats.insert(stop, f);
            Ok(f)
        };
        let branch_head = cfg.head_config(cfg.d());
        let (fa_j, fm_j) = branch(&mut g, &mut binder, cfg.stop_grad.joint)?;
        let joint = fuse_and_detect(&mut g, &mut binder, params, cfg, fa_j, fm_j)?;
        infer_head = joint;
        let targets = DetectionTargets::build(&joint.raw(&g), sample.annotation, &cfg.assign, grid)?;

        let (fa, _) = branch(&mut g, &mut binder, cfg.stop_grad.app)?;
        let app = branch_head.forward(&mut g, &mut binder, params, "branch_head", fa)?;
        add_det("app_", cfg.scales.app, &app, &targets, &mut g, &mut comps, &mut terms);

        let (_, fm) = branch(&mut g, &mut binder, cfg.stop_grad.distill)?;
        let mot = branch_head.forward(&mut g, &mut binder, params, "branch_head", fm)?;
        add_distill(&mot, fm, teacher, &mut g, &mut comps, &mut terms)?;

        add_det("joint_", cfg.scales.joint, &joint, &targets, &mut g, &mut comps, &mut terms);
    } else {
        let head_cfg = cfg.head_config(cfg.d());
        let f_det = project(&mut g, &mut binder, params, "proj", input(cfg.stop_grad.app))?;
        let head = head_cfg.forward(&mut g, &mut binder, params, "head", f_det)?;
        infer_head = head;
        let targets = DetectionTargets::build(&head.raw(&g), sample.annotation, &cfg.assign, grid)?;
        add_det("", cfg.scales.app, &head, &targets, &mut g, &mut comps, &mut terms);
        if cfg.preset == Preset::ConventionalDistill {
            let (f, h) = if cfg.stop_grad.distill == cfg.stop_grad.app {
                (f_det, head)
            } else {
                let f = project(&mut g, &mut binder, params, "proj", input(cfg.stop_grad.distill))?;
                (f, head_cfg.forward(&mut g, &mut binder, params, "head", f)?)
            };
            add_distill(&h, f, teacher, &mut g, &mut comps, &mut terms)?;
        }
    }
    let total = g.weighted_sum(&terms)?;
    Ok(TrainForward {
        graph: g,
        binder,
        total,
        components: comps,
        infer_head,
    })
}

/// Inference-time head output from RGB alone.
pub fn infer_raw(cfg: &StudentConfig, params: &ParamStore, rgb: &Tensor) -> Result<RawHeadOutput> {
    let mut g = Graph::new();
    let mut binder = Binder::frozen();
    let x = g.constant(rgb.clone());
    let z = cfg.backbone.encode(&mut g, &mut binder, params, "backbone", x)?;
    let head = if cfg.preset.is_decomposed() {
        let (fa, fm) = decompose(&mut g, &mut binder, params, z)?;
        fuse_and_detect(&mut g, &mut binder, params, cfg, fa, fm)?
    } else {
        let f = project(&mut g, &mut binder, params, "proj", z)?;
        cfg.head_config(cfg.d()).forward(&mut g, &mut binder, params, "head", f)?
    };
    Ok(head.raw(&g))
}

/// RGB-only detection: encode, decompose, fuse, joint head, decode, NMS.
/// Branch heads and any teacher are never touched.
pub fn forward_infer(
    cfg: &StudentConfig,
    params: &ParamStore,
    rgb: &Tensor,
    fps: f64,
    duration: f64,
    nms_iou: f64,
    top_k: usize,
) -> Result<PredictionSet> {
    let raw = infer_raw(cfg, params, rgb)?;
    Ok(nms(&decode(&raw, cfg.grid(fps), duration), nms_iou, top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ActionInstance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(preset: Preset) -> StudentConfig {
        StudentConfig {
            preset,
            backbone: BackboneConfig {
                stem_channels: 4,
                feat_channels: 8,
                ..Default::default()
            },
            head_hidden: 4,
            num_classes: 2,
            ..Default::default()
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn teacher_out(t: usize, d: usize, c: usize, rng: &mut ChaCha8Rng) -> TeacherOutput {
        let raw = RawHeadOutput::new(rand_tensor(&[t, c], rng), rand_tensor(&[t, 2], rng).map(f64::abs)).unwrap();
        TeacherOutput {
            z_mot: rand_tensor(&[t, d], rng),
            preds: decode(&raw, Grid::new(2, 4.0), 4.0),
            raw,
        }
    }

    #[test]
    fn decompose_shapes_and_distinct_branches() {
        let cfg = tiny(Preset::DecomposedConcat);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = cfg.init(&mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let z = g.constant(rand_tensor(&[8, 8], &mut rng));
        let (a, m) = decompose(&mut g, &mut b, &p, z).unwrap();
        assert_eq!(g.shape(a), &[8, 4]);
        assert_ne!(g.value(a), g.value(m));
    }

    #[test]
    fn aggregate_examples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap());
        let m = aggregate(&mut g, f, Pooling::Mean);
        assert_eq!(g.value(m).data(), &[1.0, 1.0]);
        let c = g.constant(Tensor::new(vec![3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap());
        let m = aggregate(&mut g, c, Pooling::Mean);
        assert_eq!(g.value(m).data(), &[1.5, -2.0]);
    }

    #[test]
    fn zero_weights_halve_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ft = rand_tensor(&[5, 3], &mut rng);
        let fr = rand_tensor(&[5, 3], &mut rng);
        let z = Tensor::zeros(&[3, 3]);
        let (out, omega) = local_attentive_fusion_tensor(&ft, &fr, &z, &z, Pooling::Mean).unwrap();
        assert!(omega.data().iter().all(|&w| w == 0.5));
        assert_eq!(out, ft.map(|x| 0.5 * x));
        let (out, _) = local_attentive_fusion_tensor(&Tensor::zeros(&[5, 3]), &fr, &rand_tensor(&[3, 3], &mut rng), &rand_tensor(&[3, 3], &mut rng), Pooling::Max).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sum_and_concat() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let s = baseline_fuse(&mut g, a, zero, FusionKind::Sum).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let c = baseline_fuse(&mut g, a, zero, FusionKind::Concat).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let s2 = baseline_fuse(&mut g, zero, a, FusionKind::Sum).unwrap();
        assert_eq!(g.value(s2), g.value(s));
    }

    fn sample_parts(cfg: &StudentConfig, rng: &mut ChaCha8Rng) -> (Tensor, AnnotationSet, TeacherOutput) {
        let rgb = rand_tensor(&[16, 3, 8, 8], rng).map(|x| 0.5 * x);
        let ann = AnnotationSet::new("v", 4.0, vec![ActionInstance::new(1.0, 2.5, 1)]);
        let t = teacher_out(8, cfg.d(), cfg.num_classes, rng);
        (rgb, ann, t)
    }

    #[test]
    fn component_keys_match_presets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for preset in Preset::ALL {
            let cfg = tiny(preset);
            let p = cfg.init(&mut rng);
            let (rgb, ann, t) = sample_parts(&cfg, &mut rng);
            let s = TrainSample {
                rgb: &rgb,
                annotation: &ann,
                fps: 4.0,
                teacher: Some(&t),
            };
            let out = forward_train(&cfg, &p, &s, &LossWeights::default()).unwrap();
            let keys: Vec<&str> = out.components.keys().map(String::as_str).collect();
            let mut want = preset.component_keys().to_vec();
            want.sort();
            assert_eq!(keys, want, "{preset}");
            assert!(out.total_value().is_finite());
            let all_zero = LossWeights {
                lambda_cls: 0.0,
                lambda_reg: 0.0,
                lambda_comp: 0.0,
                lambda_feat: 0.0,
                ..Default::default()
            };
            assert_eq!(forward_train(&cfg, &p, &s, &all_zero).unwrap().total_value(), 0.0);
        }
    }

    #[test]
    fn distilling_preset_requires_teacher() {
        let cfg = tiny(Preset::ConventionalDistill);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = cfg.init(&mut rng);
        let (rgb, ann, _) = sample_parts(&cfg, &mut rng);
        let s = TrainSample {
            rgb: &rgb,
            annotation: &ann,
            fps: 4.0,
            teacher: None,
        };
        assert!(matches!(forward_train(&cfg, &p, &s, &LossWeights::default()), Err(Error::Precondition(_))));
        let off = StudentConfig {
            scales: LossScales {
                distill: 0.0,
                ..Default::default()
            },
            ..cfg
        };
        assert!(forward_train(&off, &p, &s, &LossWeights::default()).is_ok());
    }

    #[test]
    fn inference_matches_training_joint_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for preset in Preset::ALL {
            let cfg = tiny(preset);
            let p = cfg.init(&mut rng);
            let (rgb, ann, t) = sample_parts(&cfg, &mut rng);
            let s = TrainSample {
                rgb: &rgb,
                annotation: &ann,
                fps: 4.0,
                teacher: Some(&t),
            };
            let train = forward_train(&cfg, &p, &s, &LossWeights::default()).unwrap();
            assert_eq!(train.infer_raw(), infer_raw(&cfg, &p, &rgb).unwrap());
            let a = nms(&decode(&train.infer_raw(), cfg.grid(4.0), 4.0), 0.5, 50);
            assert_eq!(a, forward_infer(&cfg, &p, &rgb, 4.0, 4.0, 0.5, 50).unwrap());
        }
    }

    #[test]
    fn stop_grad_cuts_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = tiny(Preset::DecomposedLocalAttn);
        cfg.stop_grad = StopGrad {
            app: true,
            distill: true,
            joint: true,
        };
        let p = cfg.init(&mut rng);
        let (rgb, ann, t) = sample_parts(&cfg, &mut rng);
        let s = TrainSample {
            rgb: &rgb,
            annotation: &ann,
            fps: 4.0,
            teacher: Some(&t),
        };
        let grads = forward_train(&cfg, &p, &s, &LossWeights::default()).unwrap().gradients();
        assert!(grads["backbone.stem.w"].data().iter().all(|&x| x == 0.0));
        assert!(grads["proj_app.l1.w"].data().iter().any(|&x| x != 0.0));
    }
}
