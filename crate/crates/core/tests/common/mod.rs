#![allow(dead_code)]

use dcd_core::autograd::Tensor;
use dcd_core::backbone::BackboneConfig;
use dcd_core::distill::TeacherOutput;
use dcd_core::fusion::{Preset, StudentConfig};
use dcd_core::head::{decode, DetectionTargets, Grid, RawHeadOutput};
use dcd_core::{ActionInstance, AnnotationSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rand_raw(t: usize, c: usize, rng: &mut ChaCha8Rng) -> RawHeadOutput {
    RawHeadOutput::new(rand_tensor(&[t, c], -3.0, 3.0, rng), rand_tensor(&[t, 2], 0.2, 4.0, rng)).unwrap()
}

/// Random positives (with intervals around their timestep) and negatives.
pub fn rand_targets(t: usize, c: usize, rng: &mut ChaCha8Rng) -> DetectionTargets {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..t {
        if rng.gen_bool(0.4) {
            let s = i as f64 - rng.gen_range(0.1..3.0);
            let e = i as f64 + rng.gen_range(0.1..3.0);
            positives.push((i, [s, e], rng.gen_range(0..c)));
        } else {
            negatives.push(i);
        }
    }
    if positives.is_empty() {
        let i = negatives.remove(0);
        positives.push((i, [i as f64 - 1.0, i as f64 + 1.5], 0));
    }
    DetectionTargets {
        num_classes: c,
        positives,
        negatives,
    }
}

/// Small student used by the full-model checks: `T = 8` frames of `8 x 8`,
/// projection width `D = 4`.
pub fn tiny_student(preset: Preset) -> StudentConfig {
    StudentConfig {
        preset,
        backbone: BackboneConfig {
            stem_channels: 4,
            feat_channels: 8,
            r_t: 2,
            ..Default::default()
        },
        proj_dim: 4,
        head_hidden: 4,
        num_classes: 2,
        ..Default::default()
    }
}

pub struct TinySample {
    pub rgb: Tensor,
    pub annotation: AnnotationSet,
    pub fps: f64,
    pub teacher: TeacherOutput,
}

/// Random clip of 8 frames at 4 fps with one instance, and random
/// teacher outputs of matching length (`T' = 4`, `D = 4`).
pub fn tiny_sample(cfg: &StudentConfig, rng: &mut ChaCha8Rng) -> TinySample {
    let (t, fps) = (8, 4.0);
    let rgb = rand_tensor(&[t, 3, 8, 8], -1.0, 1.0, rng);
    let s = rng.gen_range(0.0..0.8);
    let annotation = AnnotationSet::new("clip", 2.0, vec![ActionInstance::new(s, s + rng.gen_range(0.6..1.2), rng.gen_range(0..cfg.num_classes))]);
    let tp = t / cfg.backbone.r_t;
    let raw = rand_raw(tp, cfg.num_classes, rng);
    let teacher = TeacherOutput {
        z_mot: rand_tensor(&[tp, cfg.d()], -1.0, 1.0, rng),
        preds: decode(&raw, Grid::new(cfg.backbone.r_t, fps), 2.0),
        raw,
    };
    TinySample {
        rgb,
        annotation,
        fps,
        teacher,
    }
}

pub fn workspace_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}
