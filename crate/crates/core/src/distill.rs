//! Frozen motion teacher and the two distillation losses.
//!
//! The response loss treats the teacher's per-timestep outputs as soft
//! pseudo-labels for the student prediction at the same timestep. The
//! feature loss pulls the student's motion-space features toward the
//! teacher's backbone features.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::{decode, focal_term_logit, Grid, HeadConfig, HeadVars, RawHeadOutput};
use crate::params::{load_checkpoint, save_checkpoint, Binder, ParamStore};
use crate::synth::{MotionKind, MotionMaps};
use crate::types::{LossWeights, PredictionSet};

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

/// A trained motion model. Parameters are private and only readable, so a
/// bundle cannot be modified after construction.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub modality: MotionKind,
    params: ParamStore,
}

impl TeacherBundle {
    /// Fresh, untrained parameters.
    pub fn init<R: Rng>(backbone: BackboneConfig, head: HeadConfig, modality: MotionKind, rng: &mut R) -> Result<Self> {
        let mut params = backbone.init(BACKBONE_PREFIX, rng);
        params.extend(head.init(HEAD_PREFIX, rng));
        Self::new(backbone, head, modality, params)
    }

    /// Checks that `params` has exactly the tensors the configs describe.
    pub fn new(backbone: BackboneConfig, head: HeadConfig, modality: MotionKind, params: ParamStore) -> Result<Self> {
        backbone.validate()?;
        head.validate()?;
        if backbone.in_channels != modality.channels() {
            return Err(Error::Config(format!(
                "{} input has {} channels but the backbone expects {}",
                modality.as_str(),
                modality.channels(),
                backbone.in_channels
            )));
        }
        if head.in_dim != backbone.feat_channels {
            return Err(Error::Config("teacher head in_dim must equal backbone feat_channels".into()));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut template = backbone.init(BACKBONE_PREFIX, &mut rng);
        template.extend(head.init(HEAD_PREFIX, &mut rng));
        crate::params::check_same_layout(&template, &params)?;
        Ok(Self {
            backbone,
            head,
            modality,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn grid(&self, fps: f64) -> Grid {
        Grid::new(self.backbone.r_t, fps)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("role".into(), "teacher".into());
        m.insert("modality".into(), self.modality.as_str().into());
        m.insert("backbone".into(), serde_json::to_string(&self.backbone).expect("config serializes"));
        m.insert("head".into(), serde_json::to_string(&self.head).expect("config serializes"));
        m
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = self.metadata();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        save_checkpoint(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata {k:?}", path.display())))
        };
        if field("role")? != "teacher" {
            return Err(Error::Checkpoint(format!("{} is not a teacher checkpoint", path.display())));
        }
        let modality = MotionKind::parse(field("modality")?)?;
        let parse = |k: &str, e: serde_json::Error| Error::Checkpoint(format!("{}: metadata {k}: {e}", path.display()));
        let backbone = serde_json::from_str(field("backbone")?).map_err(|e| parse("backbone", e))?;
        let head = serde_json::from_str(field("head")?).map_err(|e| parse("head", e))?;
        Self::new(backbone, head, modality, params)
    }

    /// Records the teacher on `g` with constant leaves, so nothing upstream
    /// of its outputs can receive gradient.
    pub fn record(&self, g: &mut Graph, x: Var) -> Result<(Var, HeadVars)> {
        let mut binder = Binder::frozen();
        let z = self.backbone.encode(g, &mut binder, &self.params, BACKBONE_PREFIX, x)?;
        let z = g.detach(z);
        let h = self.head.forward(g, &mut binder, &self.params, HEAD_PREFIX, z)?;
        Ok((z, h))
    }
}

/// Detached teacher outputs for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub z_mot: Tensor,
    pub raw: RawHeadOutput,
    pub preds: PredictionSet,
}

/// Runs the teacher on a motion input of its own modality.
pub fn teacher_forward(motion: &MotionMaps, teacher: &TeacherBundle, fps: f64, duration: f64) -> Result<TeacherOutput> {
    if motion.kind != teacher.modality {
        return Err(Error::Modality {
            expected: teacher.modality.as_str().into(),
            actual: motion.kind.as_str().into(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(motion.to_tensor());
    let (z, h) = teacher.record(&mut g, x)?;
    let raw = h.raw(&g);
    let preds = decode(&raw, teacher.grid(fps), duration);
    Ok(TeacherOutput {
        z_mot: g.value(z).clone(),
        raw,
        preds,
    })
}

/// Unweighted response-loss terms with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseLoss {
    pub cls: f64,
    pub reg: f64,
    pub d_logits: Vec<f64>,
    pub d_offsets: Vec<f64>,
}

impl ResponseLoss {
    /// `lambda_cls * cls + lambda_reg * reg`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_cls * self.cls + w.lambda_reg * self.reg
    }
}

/// Response distillation against the teacher's outputs at the same
/// timesteps, averaged over all of them. With `confidence_mask = Some(tau)`
/// only timesteps where the teacher's top class probability reaches `tau`
/// count.
pub fn loss_response(
    student: &RawHeadOutput,
    teacher: &RawHeadOutput,
    w: &LossWeights,
    confidence_mask: Option<f64>,
) -> Result<ResponseLoss> {
    if student.cls_logits.shape() != teacher.cls_logits.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.cls_logits.shape(),
            teacher.cls_logits.shape()
        )));
    }
    let (n, c) = (student.len(), student.num_classes());
    let q = teacher.probabilities();
    let keep: Vec<usize> = (0..n)
        .filter(|&t| match confidence_mask {
            Some(tau) => q.row(t).iter().copied().fold(0.0, f64::max) >= tau,
            None => true,
        })
        .collect();
    let mut out = ResponseLoss {
        cls: 0.0,
        reg: 0.0,
        d_logits: vec![0.0; n * c],
        d_offsets: vec![0.0; n * 2],
    };
    if keep.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / keep.len() as f64;
    for &t in &keep {
        for k in 0..c {
            let (v, d) = focal_term_logit(student.cls_logits.at2(t, k), q.at2(t, k), w.focal_gamma);
            out.cls += scale * v;
            out.d_logits[t * c + k] = scale * d;
        }
        for k in 0..2 {
            let d = student.offsets.at2(t, k) - teacher.offsets.at2(t, k);
            out.reg += 0.5 * scale * crate::head::smooth_l1(d, w.smooth_l1_beta);
            out.d_offsets[2 * t + k] = 0.5 * scale * crate::head::smooth_l1_grad(d, w.smooth_l1_beta);
        }
    }
    Ok(out)
}

/// Records the response terms on `g`; returns `(cls, reg)` scalars.
pub fn response_loss_vars(
    g: &mut Graph,
    student: &HeadVars,
    teacher: &RawHeadOutput,
    w: &LossWeights,
    confidence_mask: Option<f64>,
) -> Result<(Var, Var)> {
    let l = loss_response(&student.raw(g), teacher, w, confidence_mask)?;
    let cls = g.scalar_fn(&[student.cls_logits], l.cls, vec![l.d_logits]);
    let reg = g.scalar_fn(&[student.offsets], l.reg, vec![l.d_offsets]);
    Ok((cls, reg))
}

/// `(1/T') Σ_t ||z_proj[t] - z_mot[t]||²` and its gradient in `z_proj`.
pub fn loss_feature(z_proj: &Tensor, z_mot: &Tensor) -> Result<(f64, Vec<f64>)> {
    if z_proj.shape() != z_mot.shape() || z_proj.shape().len() != 2 {
        return Err(Error::shape(format!(
            "projected features {:?} vs teacher features {:?}",
            z_proj.shape(),
            z_mot.shape()
        )));
    }
    let t = z_proj.rows().max(1) as f64;
    let mut value = 0.0;
    let grad = z_proj
        .data()
        .iter()
        .zip(z_mot.data())
        .map(|(a, b)| {
            let d = a - b;
            value += d * d;
            2.0 * d / t
        })
        .collect();
    Ok((value / t, grad))
}

/// Records the feature loss on `g` with the teacher side held constant.
pub fn loss_feature_var(g: &mut Graph, z_proj: Var, z_mot: &Tensor) -> Result<Var> {
    let (value, grad) = loss_feature(g.value(z_proj), z_mot)?;
    Ok(g.scalar_fn(&[z_proj], value, vec![grad]))
}

/// `response + lambda_feat * feature`.
pub fn distill_loss(response: f64, feature: f64, w: &LossWeights) -> f64 {
    response + w.lambda_feat * feature
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::focal_term;
    use crate::synth::{generate_video, motion_maps, SynthSpec};
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

    fn teacher(kind: MotionKind) -> TeacherBundle {
        let bb = BackboneConfig {
            in_channels: kind.channels(),
            stem_channels: 4,
            feat_channels: 4,
            ..Default::default()
        };
        let head = HeadConfig {
            in_dim: 4,
            hidden: 4,
            num_classes: 4,
            ..Default::default()
        };
        TeacherBundle::init(bb, head, kind, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn small_video() -> crate::synth::VideoSample {
        let spec = SynthSpec {
            duration_range: [8.0, 8.0],
            instance_count: [1, 1],
            instance_duration: [2.0, 2.0],
            height: 8,
            width: 8,
            ..Default::default()
        };
        generate_video(&spec, 3).unwrap().0
    }

    #[test]
    fn modality_mismatch_is_an_error() {
        let v = small_video();
        let tg = motion_maps(&v, MotionKind::TemporalGradient).unwrap();
        let t = teacher(MotionKind::SyntheticFlow);
        assert!(matches!(teacher_forward(&tg, &t, v.fps, v.duration()), Err(Error::Modality { .. })));
    }

    #[test]
    fn teacher_is_deterministic() {
        let v = small_video();
        let flow = motion_maps(&v, MotionKind::SyntheticFlow).unwrap();
        let t = teacher(MotionKind::SyntheticFlow);
        let a = teacher_forward(&flow, &t, v.fps, v.duration()).unwrap();
        let b = teacher_forward(&flow, &t, v.fps, v.duration()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = teacher(MotionKind::TemporalGradient);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.safetensors");
        t.save(&path, &BTreeMap::new()).unwrap();
        let back = TeacherBundle::load(&path).unwrap();
        assert_eq!(back.modality, MotionKind::TemporalGradient);
        assert_eq!(back.params(), &t.params().quantized());
    }

    #[test]
    fn hard_teacher_reduces_to_focal() {
        let w = LossWeights {
            lambda_reg: 0.0,
            ..Default::default()
        };
        let s = raw(vec![0.0], 1, vec![1.0, 1.0]);
        let t = raw(vec![f64::INFINITY], 1, vec![1.0, 1.0]);
        let l = loss_response(&s, &t, &w, None).unwrap();
        assert!((l.total(&w) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.total(&LossWeights::zeros()), 0.0);
    }

    #[test]
    fn student_equal_to_teacher_is_a_minimum() {
        let t = raw(vec![-0.7, 1.2], 2, vec![1.0, 2.0]);
        let l = loss_response(&t, &t, &LossWeights::default(), None).unwrap();
        assert_eq!(l.reg, 0.0);
        for (i, &x) in t.cls_logits.data().iter().enumerate() {
            let q = crate::autograd::sigmoid(x);
            let at = focal_term(q, q, 2.0);
            assert!(at >= 0.0);
            for j in 1..200 {
                assert!(focal_term(j as f64 / 200.0, q, 2.0) >= at, "class {i}");
            }
        }
    }

    #[test]
    fn confidence_mask_drops_background() {
        let s = raw(vec![0.0, 0.0], 1, vec![1.0; 4]);
        let t = raw(vec![-10.0, 3.0], 1, vec![1.0; 4]);
        let w = LossWeights::default();
        let all = loss_response(&s, &t, &w, None).unwrap();
        let masked = loss_response(&s, &t, &w, Some(0.5)).unwrap();
        assert_eq!(masked.d_logits[0], 0.0);
        assert!(masked.cls != all.cls);
    }

    #[test]
    fn feature_loss_values() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1, 2]);
        assert_eq!(loss_feature(&a, &b).unwrap().0, 2.0);
        assert_eq!(loss_feature(&a, &a).unwrap().0, 0.0);
        let a2 = a.map(|x| 2.0 * x);
        assert_eq!(loss_feature(&a2, &b).unwrap().0, 8.0);
        assert!(loss_feature(&a, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn distill_combination() {
        let w = LossWeights::default();
        assert!((distill_loss(0.3, 0.2, &w) - 0.5).abs() < 1e-15);
        let w0 = LossWeights {
            lambda_feat: 0.0,
            ..w
        };
        assert_eq!(distill_loss(0.3, 0.2, &w0), 0.3);
        assert_eq!(distill_loss(0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn response_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let logits: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let offs: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.0..4.0)).collect();
        let tl: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let to: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.0..4.0)).collect();
        let perm = [3, 0, 5, 1, 4, 2];
        let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| v[2 * i..2 * i + 2].to_vec()).collect() };
        let w = LossWeights::default();
        let a = loss_response(&raw(logits.clone(), 2, offs.clone()), &raw(tl.clone(), 2, to.clone()), &w, None).unwrap();
        let b = loss_response(
            &raw(permute(&logits), 2, permute(&offs)),
            &raw(permute(&tl), 2, permute(&to)),
            &w,
            None,
        )
        .unwrap();
        assert!((a.total(&w) - b.total(&w)).abs() < 1e-12);
        assert_eq!(permute(&a.d_logits), b.d_logits);
    }
}
