//! Experiment driver: configs, datasets, teacher and student training,
//! evaluation and the preset ablation.
//!
//! Everything is single-threaded and seeded, so each run is bitwise
//! reproducible. Video seeds per split: train `i`, validation
//! `1_000_000 + i`, test `2_000_000 + i`, all combined with
//! `data.synth.seed` by the generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::backbone::BackboneConfig;
use crate::distill::{teacher_forward, TeacherBundle, TeacherOutput, BACKBONE_PREFIX, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::eval::{collect_class_detections, format_table, mean_average_precision, pr_curve, EvalConfig, MapReport};
use crate::fusion::{forward_infer, forward_train, FusionKind, LossScales, Pooling, Preset, StopGrad, StudentConfig, TrainSample};
use crate::head::{detection_loss_vars, nms, AssignConfig, DetectionTargets, HeadConfig};
use crate::params::{accumulate, load_checkpoint, save_checkpoint, Adam, Binder, ParamStore};
use crate::plot::line_plot;
use crate::synth::{generate_video, motion_maps, MotionKind, MotionMaps, SynthSpec};
use crate::types::{AnnotationSet, LossWeights, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthSpec,
    pub num_train: usize,
    /// Validation videos as a fraction of `num_train`.
    pub val_fraction: f64,
    pub num_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            num_train: 40,
            val_fraction: 0.2,
            num_test: 16,
        }
    }
}

impl DataConfig {
    pub fn num_val(&self) -> usize {
        ((self.num_train as f64 * self.val_fraction).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub backbone: BackboneConfig,
    pub proj_dim: usize,
    pub head_hidden: usize,
    pub prior_prob: f64,
    pub init_offset: f64,
    pub fusion: Option<FusionKind>,
    pub pooling: Pooling,
    pub stop_grad: StopGrad,
    pub scales: LossScales,
    pub confidence_mask: Option<f64>,
    pub assign: AssignConfig,
    pub teacher_modality: MotionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = StudentConfig::default();
        Self {
            preset: s.preset,
            backbone: s.backbone,
            proj_dim: s.proj_dim,
            head_hidden: s.head_hidden,
            prior_prob: s.prior_prob,
            init_offset: s.init_offset,
            fusion: s.fusion,
            pooling: s.pooling,
            stop_grad: s.stop_grad,
            scales: s.scales,
            confidence_mask: s.confidence_mask,
            assign: s.assign,
            teacher_modality: MotionKind::SyntheticFlow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Teacher learning rate; defaults to `lr`.
    pub teacher_lr: Option<f64>,
    /// Teacher epochs; defaults to `epochs`.
    pub teacher_epochs: Option<usize>,
    /// Seed for the teacher's initialisation and shuffling.
    pub teacher_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 20,
            batch_size: 8,
            teacher_lr: None,
            teacher_epochs: None,
            teacher_seed: 0,
        }
    }
}

/// Full experiment description; loaded from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str, json: bool) -> Result<Self> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` or `.json` config.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::from_str(&text, json).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.data.synth.validate().map_err(cfg)?;
        if self.data.num_train == 0 {
            return Err(Error::Config("data.num_train must be positive".into()));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction.is_finite()) {
            return Err(Error::Config("data.val_fraction must be positive".into()));
        }
        self.loss.validate().map_err(cfg)?;
        self.eval.validate().map_err(cfg)?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.batch_size == 0 {
            return Err(Error::Config("optim.lr must be positive and batch_size at least 1".into()));
        }
        self.student().validate().map_err(cfg)?;
        let (bb, head) = self.teacher_arch();
        bb.validate().map_err(cfg)?;
        head.validate().map_err(cfg)?;
        Ok(())
    }

    pub fn student(&self) -> StudentConfig {
        let m = &self.model;
        StudentConfig {
            preset: m.preset,
            backbone: m.backbone,
            proj_dim: m.proj_dim,
            head_hidden: m.head_hidden,
            num_classes: self.data.synth.num_classes,
            prior_prob: m.prior_prob,
            init_offset: m.init_offset,
            fusion: m.fusion,
            pooling: m.pooling,
            stop_grad: m.stop_grad,
            scales: m.scales,
            confidence_mask: m.confidence_mask,
            assign: m.assign,
        }
    }

    /// Teacher architecture: the student's backbone on the motion modality,
    /// with output width equal to the student's projection dimension so the
    /// feature loss compares like with like.
    pub fn teacher_arch(&self) -> (BackboneConfig, HeadConfig) {
        let s = self.student();
        let backbone = BackboneConfig {
            in_channels: self.model.teacher_modality.channels(),
            feat_channels: s.d(),
            ..self.model.backbone
        };
        (backbone, s.head_config(s.d()))
    }

    pub fn with_preset(&self, preset: Preset) -> Self {
        let mut c = self.clone();
        c.model.preset = preset;
        if !preset.is_decomposed() {
            c.model.fusion = None;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }

    pub fn len(self, data: &DataConfig) -> usize {
        match self {
            Split::Train => data.num_train,
            Split::Val => data.num_val(),
            Split::Test => data.num_test,
        }
    }
}

/// One video ready for the models.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub rgb: Tensor,
    pub motion: MotionMaps,
    pub annotation: AnnotationSet,
    pub fps: f64,
}

/// Generates a split with the given motion modality.
pub fn build_split(data: &DataConfig, split: Split, modality: MotionKind) -> Result<Vec<PreparedVideo>> {
    (0..split.len(data) as u64)
        .map(|i| {
            let (video, annotation) = generate_video(&data.synth, split.seed_offset() + i)?;
            Ok(PreparedVideo {
                rgb: video.rgb_input(),
                motion: motion_maps(&video, modality)?,
                annotation,
                fps: video.fps,
            })
        })
        .collect()
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub val_avg_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub role: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_avg_map: f64,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
    /// Best-validation parameters (as stored in the checkpoint).
    pub params: ParamStore,
}

#[derive(Serialize)]
struct DivergenceSnapshot<'a> {
    epoch: usize,
    step: usize,
    video: &'a str,
    components: BTreeMap<String, f64>,
    nonfinite_params: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Shared loop: shuffled minibatches, mean gradient per batch, Adam,
/// per-epoch validation and best-checkpoint selection.
#[allow(clippy::too_many_arguments)]
fn fit(
    out_dir: &Path,
    role: &str,
    preset: Option<Preset>,
    seed: u64,
    mut params: ParamStore,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    train: &[PreparedVideo],
    mut step: impl FnMut(&ParamStore, usize) -> Result<(BTreeMap<String, f64>, f64, BTreeMap<String, Tensor>)>,
    mut validate: impl FnMut(&ParamStore) -> Result<f64>,
    save: impl Fn(&Path, &ParamStore, &TrainLog) -> Result<()>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_5A17);
    let mut opt = Adam::new(lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        role: role.into(),
        preset: preset.map(|p| p.as_str().to_string()),
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_avg_map: f64::NEG_INFINITY,
    };
    let initial = params.quantized();
    let mut best = initial.clone();
    let mut global_step = 0;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut total_sum = 0.0;
        for batch in order.chunks(batch_size) {
            let mut grads = BTreeMap::new();
            for &i in batch {
                let (comps, total, g) = step(&params, i)?;
                if !total.is_finite() {
                    let snap = DivergenceSnapshot {
                        epoch,
                        step: global_step,
                        video: &train[i].annotation.video_id,
                        components: comps,
                        nonfinite_params: params
                            .iter()
                            .filter(|(_, t)| t.data().iter().any(|x| !x.is_finite()))
                            .map(|(k, _)| k.clone())
                            .collect(),
                    };
                    write_json(&out_dir.join("divergence.json"), &snap)?;
                    return Err(Error::Divergence {
                        epoch,
                        step: global_step,
                        detail: format!("non-finite loss on {}; snapshot in {}", train[i].annotation.video_id, out_dir.join("divergence.json").display()),
                    });
                }
                for (k, v) in comps {
                    *sums.entry(k).or_default() += v;
                }
                total_sum += total;
                accumulate(&mut grads, &g, 1.0 / batch.len() as f64);
            }
            opt.step(&mut params, &grads);
            global_step += 1;
        }
        let n = train.len().max(1) as f64;
        let snapshot = params.quantized();
        let val = if snapshot.all_finite() { validate(&snapshot)? } else { f64::NAN };
        log.epochs.push(EpochLog {
            epoch,
            total: total_sum / n,
            components: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            val_avg_map: val,
        });
        if val > log.best_val_avg_map {
            log.best_val_avg_map = val;
            log.best_epoch = epoch;
            best = snapshot;
        }
    }
    if log.best_epoch == 0 {
        log.best_val_avg_map = validate(&initial)?;
    }
    let ckpt = out_dir.join(format!("{role}.safetensors"));
    save(&ckpt, &best, &log)?;
    write_json(&out_dir.join("log.json"), &log)?;
    plot_log(&out_dir.join("loss_curve.svg"), &log)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        params: best,
    })
}

fn plot_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut series = vec![(
        "total".to_string(),
        log.epochs.iter().map(|e| (e.epoch as f64, e.total)).collect(),
    )];
    if let Some(first) = log.epochs.first() {
        for k in first.components.keys() {
            series.push((k.clone(), log.epochs.iter().map(|e| (e.epoch as f64, e.components[k])).collect()));
        }
    }
    series.push((
        "val avg mAP".to_string(),
        log.epochs.iter().map(|e| (e.epoch as f64, e.val_avg_map)).collect(),
    ));
    let title = match &log.preset {
        Some(p) => format!("{} ({p}, seed {})", log.role, log.seed),
        None => format!("{} (seed {})", log.role, log.seed),
    };
    line_plot(path, &title, "epoch", "loss / mAP", &series)
}

/// Detections of the teacher on a split, after NMS.
pub fn teacher_predictions(teacher: &TeacherBundle, split: &[PreparedVideo], eval: &EvalConfig) -> Result<Vec<(AnnotationSet, Vec<Prediction>)>> {
    split
        .iter()
        .map(|v| {
            let out = teacher_forward(&v.motion, teacher, v.fps, v.annotation.duration)?;
            let kept = nms(&out.preds, eval.nms_iou, eval.top_k);
            Ok((v.annotation.clone(), kept.predictions))
        })
        .collect()
}

/// Detections of a student on a split, after NMS.
pub fn student_predictions(cfg: &StudentConfig, params: &ParamStore, split: &[PreparedVideo], eval: &EvalConfig) -> Result<Vec<(AnnotationSet, Vec<Prediction>)>> {
    split
        .iter()
        .map(|v| {
            let kept = forward_infer(cfg, params, &v.rgb, v.fps, v.annotation.duration, eval.nms_iou, eval.top_k)?;
            Ok((v.annotation.clone(), kept.predictions))
        })
        .collect()
}

fn map_of(results: &[(AnnotationSet, Vec<Prediction>)], num_classes: usize, eval: &EvalConfig) -> MapReport {
    mean_average_precision(results, num_classes, eval)
}

/// Trains the motion teacher on `cfg`'s training split.
pub fn train_teacher(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let modality = cfg.model.teacher_modality;
    let train = build_split(&cfg.data, Split::Train, modality)?;
    let val = build_split(&cfg.data, Split::Val, modality)?;
    train_teacher_on(cfg, &train, &val, out_dir)
}

/// [`train_teacher`] on prepared splits.
pub fn train_teacher_on(cfg: &ExperimentConfig, train: &[PreparedVideo], val: &[PreparedVideo], out_dir: &Path) -> Result<TrainOutcome> {
    let (bb, head) = cfg.teacher_arch();
    let modality = cfg.model.teacher_modality;
    let seed = cfg.optim.teacher_seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = TeacherBundle::init(bb, head, modality, &mut rng)?;
    let w = cfg.loss;
    let step = |params: &ParamStore, i: usize| {
        let v = &train[i];
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let x = g.constant(v.motion.to_tensor());
        let z = bb.encode(&mut g, &mut binder, params, BACKBONE_PREFIX, x)?;
        let h = head.forward(&mut g, &mut binder, params, HEAD_PREFIX, z)?;
        let targets = DetectionTargets::build(&h.raw(&g), &v.annotation, &cfg.model.assign, init.grid(v.fps))?;
        let l = detection_loss_vars(&mut g, &h, &targets, &w);
        let total = g.weighted_sum(&[(l.cls, w.lambda_cls), (l.reg, w.lambda_reg), (l.comp, w.lambda_comp)])?;
        let comps: BTreeMap<String, f64> = [("cls", l.cls), ("reg", l.reg), ("comp", l.comp)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), g.value(v).item()))
            .collect();
        let grads = g.backward(total);
        Ok((comps, g.value(total).item(), binder.collect(&g, &grads)))
    };
    let validate = |params: &ParamStore| {
        let t = TeacherBundle::new(bb, head, modality, params.clone())?;
        Ok(map_of(&teacher_predictions(&t, val, &cfg.eval)?, head.num_classes, &cfg.eval).average)
    };
    let save = |path: &Path, params: &ParamStore, log: &TrainLog| {
        let t = TeacherBundle::new(bb, head, modality, params.clone())?;
        let mut extra = BTreeMap::new();
        extra.insert("seed".into(), seed.to_string());
        extra.insert("best_val_avg_map".into(), log.best_val_avg_map.to_string());
        t.save(path, &extra)
    };
    fit(
        out_dir,
        "teacher",
        None,
        seed,
        init.params().clone(),
        cfg.optim.teacher_lr.unwrap_or(cfg.optim.lr),
        cfg.optim.teacher_epochs.unwrap_or(cfg.optim.epochs),
        cfg.optim.batch_size,
        train,
        step,
        validate,
        save,
    )
}

/// Runs the frozen teacher once over a split.
pub fn teacher_cache(teacher: &TeacherBundle, split: &[PreparedVideo]) -> Result<Vec<TeacherOutput>> {
    split
        .iter()
        .map(|v| teacher_forward(&v.motion, teacher, v.fps, v.annotation.duration))
        .collect()
}

/// Trains one student preset. `teacher` is only opened by presets that
/// distil.
pub fn train_student(cfg: &ExperimentConfig, seed: u64, teacher: Option<&Path>, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let s = cfg.student();
    let bundle = if s.preset.uses_teacher() && s.scales.distill != 0.0 {
        let path = teacher.ok_or_else(|| Error::Precondition(format!("preset {} needs a teacher checkpoint", s.preset)))?;
        Some(TeacherBundle::load(path)?)
    } else {
        None
    };
    let modality = bundle.as_ref().map_or(cfg.model.teacher_modality, |b| b.modality);
    let train = build_split(&cfg.data, Split::Train, modality)?;
    let val = build_split(&cfg.data, Split::Val, modality)?;
    train_student_on(cfg, seed, bundle.as_ref(), &train, &val, out_dir)
}

/// [`train_student`] on prepared splits with an in-memory teacher.
pub fn train_student_on(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: Option<&TeacherBundle>,
    train: &[PreparedVideo],
    val: &[PreparedVideo],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let s = cfg.student();
    let needs = s.preset.uses_teacher() && s.scales.distill != 0.0;
    let cache = match (needs, teacher) {
        (true, Some(t)) => {
            let (bb, head) = cfg.teacher_arch();
            if t.backbone.feat_channels != bb.feat_channels || t.head.num_classes != head.num_classes || t.backbone.r_t != bb.r_t {
                return Err(Error::Config(
                    "teacher checkpoint does not match the student's projection dimension, classes or stride".into(),
                ));
            }
            Some(teacher_cache(t, train)?)
        }
        (true, None) => return Err(Error::Precondition(format!("preset {} needs a teacher", s.preset))),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = s.init(&mut rng);
    let w = cfg.loss;
    let step = |params: &ParamStore, i: usize| {
        let v = &train[i];
        let sample = TrainSample {
            rgb: &v.rgb,
            annotation: &v.annotation,
            fps: v.fps,
            teacher: cache.as_ref().map(|c| &c[i]),
        };
        let f = forward_train(&s, params, &sample, &w)?;
        Ok((f.component_values(), f.total_value(), f.gradients()))
    };
    let validate = |params: &ParamStore| Ok(map_of(&student_predictions(&s, params, val, &cfg.eval)?, s.num_classes, &cfg.eval).average);
    let save = |path: &Path, params: &ParamStore, log: &TrainLog| {
        let mut meta = BTreeMap::new();
        meta.insert("role".into(), "student".into());
        meta.insert("preset".into(), s.preset.as_str().into());
        meta.insert("config".into(), serde_json::to_string(&s).expect("config serializes"));
        meta.insert("seed".into(), seed.to_string());
        meta.insert("best_val_avg_map".into(), log.best_val_avg_map.to_string());
        save_checkpoint(path, params, &meta)
    };
    fit(
        out_dir,
        "student",
        Some(s.preset),
        seed,
        init,
        cfg.optim.lr,
        cfg.optim.epochs,
        cfg.optim.batch_size,
        train,
        step,
        validate,
        save,
    )
}

/// A model restored from any checkpoint this crate writes.
pub enum LoadedModel {
    Teacher(TeacherBundle),
    Student(StudentConfig, ParamStore),
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let (params, meta) = load_checkpoint(path)?;
    match meta.get("role").map(String::as_str) {
        Some("teacher") => Ok(LoadedModel::Teacher(TeacherBundle::load(path)?)),
        Some("student") => {
            let text = meta
                .get("config")
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing student config", path.display())))?;
            let cfg: StudentConfig =
                serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("{}: config: {e}", path.display())))?;
            let template = cfg.init(&mut ChaCha8Rng::seed_from_u64(0));
            crate::params::check_same_layout(&template, &params)?;
            Ok(LoadedModel::Student(cfg, params))
        }
        _ => Err(Error::Checkpoint(format!("{}: unknown checkpoint role", path.display()))),
    }
}

/// Evaluation result of one checkpoint on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MapReport,
    pub results: Vec<(AnnotationSet, Vec<Prediction>)>,
}

/// Scores a checkpoint on a split of `cfg`'s data and writes `report.json`,
/// `report.txt` and a PR-curve plot into `out_dir`.
pub fn evaluate(checkpoint: &Path, cfg: &ExperimentConfig, split: Split, out_dir: &Path) -> Result<EvalOutcome> {
    let model = load_model(checkpoint)?;
    let modality = match &model {
        LoadedModel::Teacher(t) => t.modality,
        LoadedModel::Student(..) => cfg.model.teacher_modality,
    };
    let videos = build_split(&cfg.data, split, modality)?;
    if videos.is_empty() {
        return Err(Error::Precondition("the evaluation split is empty".into()));
    }
    let (results, num_classes, name) = match &model {
        LoadedModel::Teacher(t) => (teacher_predictions(t, &videos, &cfg.eval)?, t.head.num_classes, "teacher".to_string()),
        LoadedModel::Student(s, p) => {
            if s.num_classes != cfg.data.synth.num_classes {
                return Err(Error::Config(format!(
                    "checkpoint has {} classes, data config {}",
                    s.num_classes, cfg.data.synth.num_classes
                )));
            }
            (student_predictions(s, p, &videos, &cfg.eval)?, s.num_classes, s.preset.as_str().to_string())
        }
    };
    let report = map_of(&results, num_classes, &cfg.eval);
    let labels = crate::io::default_labels(num_classes);
    write_json(&out_dir.join("report.json"), &report.to_json(&labels))?;
    std::fs::write(out_dir.join("report.txt"), report.to_table(&name)).map_err(|e| Error::io(out_dir, e))?;
    plot_pr(&out_dir.join("pr_curve.svg"), &results, num_classes, &cfg.eval)?;
    Ok(EvalOutcome { report, results })
}

fn plot_pr(path: &Path, results: &[(AnnotationSet, Vec<Prediction>)], num_classes: usize, eval: &EvalConfig) -> Result<()> {
    let (dets, gts) = collect_class_detections(results, num_classes);
    let thresh = eval.tiou_thresholds[eval.tiou_thresholds.len() / 2];
    let series: Vec<(String, Vec<(f64, f64)>)> = (0..num_classes)
        .filter(|&c| !gts[c].is_empty())
        .map(|c| (format!("action_{c}"), pr_curve(&dets[c], &gts[c], thresh)))
        .collect();
    line_plot(path, &format!("precision / recall at tIoU {thresh}"), "recall", "precision", &series)
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-preset ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub per_seed_avg_map: Vec<f64>,
    pub mean_map: Vec<f64>,
    pub mean_avg_map: f64,
    pub sd_avg_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub thresholds: Vec<f64>,
    pub teacher_val_avg_map: f64,
    pub teacher_test_avg_map: f64,
    pub rows: Vec<AblationRow>,
    /// `decomposed_local_attn >= decomposed_concat >= conventional_distill >= rgb_baseline` on means.
    pub ordering_holds: bool,
    /// `mean(local_attn) - mean(baseline)` over the larger of their across-seed sds.
    pub margin_in_sd: f64,
    pub margin_holds: bool,
}

impl AblationReport {
    pub fn row(&self, preset: Preset) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.preset == preset.as_str())
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, Vec<f64>, f64, Option<f64>)> = self
            .rows
            .iter()
            .map(|r| (r.preset.clone(), r.mean_map.clone(), r.mean_avg_map, Some(r.sd_avg_map)))
            .collect();
        let mut out = format_table(&self.thresholds, &rows);
        out.push_str(&format!(
            "\nteacher avg mAP: val {:.1}, test {:.1}\nordering {}: local_attn >= concat >= conventional >= baseline\nmargin local_attn - baseline = {:.2} sd ({})\n",
            100.0 * self.teacher_val_avg_map,
            100.0 * self.teacher_test_avg_map,
            if self.ordering_holds { "holds" } else { "FAILS" },
            self.margin_in_sd,
            if self.margin_holds { ">= 2, holds" } else { "< 2, FAILS" },
        ));
        out
    }
}

/// Trains one teacher, then every preset for every seed, and scores all of
/// them on the test split.
pub fn run_ablation(cfg: &ExperimentConfig, out_dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.seeds.len() < 3 {
        return Err(Error::Precondition(format!(
            "the ablation needs at least 3 seeds, got {}",
            cfg.seeds.len()
        )));
    }
    let modality = cfg.model.teacher_modality;
    let train = build_split(&cfg.data, Split::Train, modality)?;
    let val = build_split(&cfg.data, Split::Val, modality)?;
    let test = build_split(&cfg.data, Split::Test, modality)?;
    if test.is_empty() {
        return Err(Error::Precondition("the test split is empty".into()));
    }
    let t = train_teacher_on(cfg, &train, &val, &out_dir.join("teacher"))?;
    let (bb, head) = cfg.teacher_arch();
    let teacher = TeacherBundle::new(bb, head, modality, t.params.clone())?;
    let teacher_test = map_of(&teacher_predictions(&teacher, &test, &cfg.eval)?, head.num_classes, &cfg.eval).average;

    let mut rows = Vec::new();
    for preset in Preset::ALL {
        let pcfg = cfg.with_preset(preset);
        let s = pcfg.student();
        let mut per_seed = Vec::new();
        let mut maps = Vec::new();
        for &seed in &cfg.seeds {
            let dir = out_dir.join(format!("{}_seed{seed}", preset.as_str()));
            let run = train_student_on(&pcfg, seed, Some(&teacher), &train, &val, &dir)?;
            let report = map_of(&student_predictions(&s, &run.params, &test, &cfg.eval)?, s.num_classes, &cfg.eval);
            write_json(&dir.join("test_report.json"), &report.to_json(&crate::io::default_labels(s.num_classes)))?;
            per_seed.push(report.average);
            maps.push(report.map);
        }
        let (mean, sd) = mean_sd(&per_seed);
        let k = cfg.eval.tiou_thresholds.len();
        let mean_map = (0..k).map(|j| maps.iter().map(|m| m[j]).sum::<f64>() / maps.len() as f64).collect();
        rows.push(AblationRow {
            preset: preset.as_str().into(),
            per_seed_avg_map: per_seed,
            mean_map,
            mean_avg_map: mean,
            sd_avg_map: sd,
        });
    }
    let m: Vec<f64> = rows.iter().map(|r| r.mean_avg_map).collect();
    let ordering_holds = m[3] >= m[2] && m[2] >= m[1] && m[1] >= m[0];
    let sd = rows[3].sd_avg_map.max(rows[0].sd_avg_map);
    let gap = m[3] - m[0];
    let margin_in_sd = if sd > 0.0 { gap / sd } else if gap > 0.0 { f64::INFINITY } else { 0.0 };
    let report = AblationReport {
        seeds: cfg.seeds.clone(),
        thresholds: cfg.eval.tiou_thresholds.clone(),
        teacher_val_avg_map: t.log.best_val_avg_map,
        teacher_test_avg_map: teacher_test,
        rows,
        ordering_holds,
        margin_in_sd,
        margin_holds: gap >= 2.0 * sd && gap > 0.0,
    };
    write_json(&out_dir.join("ablation.json"), &report)?;
    std::fs::write(out_dir.join("ablation.txt"), report.to_table()).map_err(|e| Error::io(out_dir, e))?;
    Ok(report)
}

/// Writes the splits' annotation files and raw video tensors.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    let labels = crate::io::default_labels(cfg.data.synth.num_classes);
    for (split, name) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
        let mut sets = Vec::new();
        for i in 0..split.len(&cfg.data) as u64 {
            let (video, ann) = generate_video(&cfg.data.synth, split.seed_offset() + i)?;
            crate::io::save_video(&video, &out_dir.join(name).join(&ann.video_id))?;
            sets.push(ann);
        }
        crate::io::save_annotations(&sets, &labels, &out_dir.join(format!("{name}.json")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_recipe() {
        let c = ExperimentConfig::default();
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.optim.epochs, 20);
        assert_eq!(c.optim.batch_size, 8);
        assert_eq!(c.data.num_val(), 8);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_str(&c.to_toml(), false).unwrap();
        assert_eq!(back, c);
        let bad = "[optim]\nlearning_rate = 0.1\n";
        assert!(matches!(ExperimentConfig::from_str(bad, false), Err(Error::Config(_))));
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_str(&json, true).unwrap(), c);
    }

    #[test]
    fn teacher_width_equals_projection_dim() {
        let c = ExperimentConfig::default();
        let (bb, head) = c.teacher_arch();
        assert_eq!(bb.feat_channels, c.student().d());
        assert_eq!(head.in_dim, c.student().d());
        assert_eq!(bb.in_channels, 2);
    }

    #[test]
    fn mean_sd_sample() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
