//! Synthetic untrimmed videos with independently controllable appearance and
//! motion cues, plus the two motion modalities derived from them.
//!
//! Every video shows one textured object on a faintly textured background
//! with per-frame sensor noise. Outside action instances the object sits
//! still. Inside an instance of class `c` it either takes the class colour
//! (appearance cue), translates with the class velocity (motion cue), or
//! both. With [`CueMode::MotionOnly`] the object's colour statistics are the
//! same for every class, so only motion tells the classes apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::types::{validate_annotations, ActionInstance, AnnotationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueMode {
    AppearanceOnly,
    MotionOnly,
    Both,
}

impl CueMode {
    fn appearance(self) -> bool {
        matches!(self, CueMode::AppearanceOnly | CueMode::Both)
    }

    fn motion(self) -> bool {
        matches!(self, CueMode::MotionOnly | CueMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    TemporalGradient,
    SyntheticFlow,
}

impl MotionKind {
    pub fn channels(self) -> usize {
        match self {
            MotionKind::TemporalGradient => 3,
            MotionKind::SyntheticFlow => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionKind::TemporalGradient => "temporal_gradient",
            MotionKind::SyntheticFlow => "synthetic_flow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "temporal_gradient" => Ok(MotionKind::TemporalGradient),
            "synthetic_flow" => Ok(MotionKind::SyntheticFlow),
            other => Err(Error::invalid(format!("unknown motion modality {other:?}"))),
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Video length range in seconds (inclusive).
    pub duration_range: [f64; 2],
    /// Instance count range per video (inclusive, uniform).
    pub instance_count: [usize; 2],
    /// Instance length range in seconds.
    pub instance_duration: [f64; 2],
    /// Minimum background gap before, between and after instances, seconds.
    pub min_gap: f64,
    pub num_classes: usize,
    pub cue_mode: CueMode,
    /// Standard deviation of the per-pixel, per-frame noise.
    pub noise: f64,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Side length of the square object; 0 means half the frame.
    pub object_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            duration_range: [24.0, 64.0],
            instance_count: [3, 8],
            instance_duration: [2.0, 6.0],
            min_gap: 1.0,
            num_classes: 4,
            cue_mode: CueMode::MotionOnly,
            noise: 0.02,
            height: 32,
            width: 32,
            fps: 4.0,
            object_size: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [dmin, dmax] = self.duration_range;
        let [cmin, cmax] = self.instance_count;
        let [imin, imax] = self.instance_duration;
        if !(dmin > 0.0 && dmin <= dmax && dmax.is_finite()) {
            return Err(Error::invalid("duration_range must be a nonempty positive range"));
        }
        if cmin > cmax {
            return Err(Error::invalid("instance_count range is empty"));
        }
        if !(imin > 0.0 && imin <= imax && imax.is_finite()) {
            return Err(Error::invalid("instance_duration must be a nonempty positive range"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::invalid("fps must be positive"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::invalid("frames must be at least 4x4"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || self.min_gap < 0.0 {
            return Err(Error::invalid("noise and min_gap must be nonnegative"));
        }
        if self.object_patch() > self.height.min(self.width) {
            return Err(Error::invalid("object_size exceeds frame"));
        }
        let needed = cmin as f64 * imin + (cmin as f64 + 1.0) * self.min_gap;
        if cmin > 0 && needed > dmin {
            return Err(Error::Infeasible(format!(
                "instance_count.min * instance_duration.min + gaps = {needed}s exceeds duration_range.min = {dmin}s"
            )));
        }
        Ok(())
    }

    pub fn object_patch(&self) -> usize {
        if self.object_size == 0 {
            (self.height.min(self.width) / 2).max(2)
        } else {
            self.object_size
        }
    }
}

/// Per-class object velocity in pixels per frame, `(dx, dy)`.
pub fn class_velocity(class: usize) -> (i64, i64) {
    const DIRS: [(i64, i64); 8] = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)];
    let (dx, dy) = DIRS[class % 8];
    let speed = 1 + (class / 8) as i64;
    (dx * speed, dy * speed)
}

/// Per-class RGB tint used by the appearance cue: evenly spaced hues.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = 6.0 * (class % num_classes.max(1)) as f64 / num_classes.max(1) as f64;
    let (sat, val) = (0.8, 0.9);
    let chroma = val * sat;
    let x = chroma * (1.0 - (hue % 2.0 - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = val - chroma;
    [r + m, g + m, b + m]
}

/// Recorded object trajectory: the generator state that synthetic flow is
/// read back from.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub size: usize,
    /// Top-left corner per frame (wrapping on the frame torus).
    pub positions: Vec<(i64, i64)>,
    /// Displacement from frame `t-1` to frame `t`.
    pub displacements: Vec<(i64, i64)>,
}

/// RGB frames in `[0, 1]`, layout `[T, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub annotation: AnnotationSet,
    pub track: Option<ObjectTrack>,
}

impl VideoSample {
    pub const CHANNELS: usize = 3;

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = Self::CHANNELS * self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn duration(&self) -> f64 {
        self.annotation.duration
    }

    /// Frames as `f64`, the model's input precision.
    pub fn frames_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&x| x as f64).collect()
    }

    /// Model input: `[T, 3, H, W]`, centred around zero at roughly unit scale.
    pub fn rgb_input(&self) -> Tensor {
        let data = self.frames.iter().map(|&x| (x as f64 - 0.5) * 4.0).collect();
        Tensor::from_parts(vec![self.num_frames, Self::CHANNELS, self.height, self.width], data)
    }
}

/// A motion modality, layout `[T, C_m, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMaps {
    pub kind: MotionKind,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub maps: Vec<f64>,
}

impl MotionMaps {
    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.channels() * self.height * self.width;
        &self.maps[t * n..(t + 1) * n]
    }

    /// Model input: `[T, C_m, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.num_frames, self.channels(), self.height, self.width],
            self.maps.clone(),
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws instance intervals (already snapped to the frame grid) for one video.
fn place_instances(spec: &SynthSpec, rng: &mut ChaCha8Rng, num_frames: usize) -> Vec<(usize, usize)> {
    let fps = spec.fps;
    let total = num_frames as f64 / fps;
    let [cmin, cmax] = spec.instance_count;
    let [imin, imax] = spec.instance_duration;
    let mut count = rng.gen_range(cmin..=cmax);
    let mut lengths: Vec<f64>;
    let mut tries = 0;
    loop {
        lengths = (0..count).map(|_| uniform(rng, imin, imax)).collect();
        let used: f64 = lengths.iter().sum::<f64>() + (count as f64 + 1.0) * spec.min_gap;
        if used <= total {
            break;
        }
        tries += 1;
        if tries % 4 == 0 && count > cmin {
            count -= 1;
        } else if tries > 64 {
            lengths = vec![imin; count];
            break;
        }
    }
    // snap lengths to at least one frame
    let lens: Vec<usize> = lengths
        .iter()
        .map(|l| ((l * fps).round() as usize).max(1))
        .collect();
    let gap = (spec.min_gap * fps).ceil() as usize;
    let used: usize = lens.iter().sum::<usize>() + (count + 1) * gap;
    let free = num_frames.saturating_sub(used);
    // split free frames into count+1 slack buckets
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, len) in lens.iter().enumerate() {
        cursor += gap + (cuts[i] - prev_cut);
        prev_cut = cuts[i];
        if cursor >= num_frames {
            break;
        }
        let s = cursor;
        let e = (s + len).min(num_frames);
        if e > s {
            out.push((s, e));
        }
        cursor = e;
    }
    out
}

/// Generates one video and its annotation. A pure function of `(spec, seed)`.
pub fn generate_video(spec: &SynthSpec, seed: u64) -> Result<(VideoSample, AnnotationSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w, fps) = (spec.height, spec.width, spec.fps);
    let duration = uniform(&mut rng, spec.duration_range[0], spec.duration_range[1]);
    let num_frames = ((duration * fps).round() as usize).max(1);
    let duration = num_frames as f64 / fps;

    let intervals = place_instances(spec, &mut rng, num_frames);
    let labels: Vec<usize> = intervals.iter().map(|_| rng.gen_range(0..spec.num_classes)).collect();
    let instances: Vec<ActionInstance> = intervals
        .iter()
        .zip(&labels)
        .map(|(&(s, e), &c)| ActionInstance::new(s as f64 / fps, e as f64 / fps, c))
        .collect();
    let annotation = AnnotationSet::new(format!("synth_{seed:08}"), duration, instances);

    // per-frame active class
    let mut active: Vec<Option<usize>> = vec![None; num_frames];
    for (&(s, e), &c) in intervals.iter().zip(&labels) {
        for a in &mut active[s..e] {
            *a = Some(c);
        }
    }

    let size = spec.object_patch();
    let plane = h * w;
    let background: Vec<f64> = (0..3 * plane).map(|_| 0.45 + 0.1 * rng.gen::<f64>()).collect();
    let texture: Vec<f64> = (0..3 * size * size).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect();
    let mut pos = (rng.gen_range(0..w as i64), rng.gen_range(0..h as i64));

    let mut positions = Vec::with_capacity(num_frames);
    let mut displacements = Vec::with_capacity(num_frames);
    for a in &active {
        let d = match a {
            Some(c) if spec.cue_mode.motion() => class_velocity(*c),
            _ => (0, 0),
        };
        pos = ((pos.0 + d.0).rem_euclid(w as i64), (pos.1 + d.1).rem_euclid(h as i64));
        positions.push(pos);
        displacements.push(d);
    }

    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut frames = vec![0f32; num_frames * 3 * plane];
    let mut buf = vec![0.0f64; 3 * plane];
    for t in 0..num_frames {
        buf.copy_from_slice(&background);
        let tint = match active[t] {
            Some(c) if spec.cue_mode.appearance() => Some(class_color(c, spec.num_classes)),
            _ => None,
        };
        let (x0, y0) = positions[t];
        for ch in 0..3 {
            for py in 0..size {
                let y = (y0 + py as i64).rem_euclid(h as i64) as usize;
                for px in 0..size {
                    let x = (x0 + px as i64).rem_euclid(w as i64) as usize;
                    let mut v = texture[(ch * size + py) * size + px];
                    if let Some(col) = tint {
                        v = 0.4 * v + 0.6 * col[ch];
                    }
                    buf[ch * plane + y * w + x] = v;
                }
            }
        }
        let dst = &mut frames[t * 3 * plane..(t + 1) * 3 * plane];
        for (o, v) in dst.iter_mut().zip(&buf) {
            let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *o = (v + n).clamp(0.0, 1.0) as f32;
        }
    }

    debug_assert!(validate_annotations(&annotation, Some(spec.num_classes)).is_empty());
    let video = VideoSample {
        frames,
        num_frames,
        height: h,
        width: w,
        fps,
        annotation: annotation.clone(),
        track: Some(ObjectTrack {
            size,
            positions,
            displacements,
        }),
    };
    Ok((video, annotation))
}

/// Signed frame differences `G_t = V_t - V_{t-1}`, with `G_1 = 0`.
pub fn temporal_gradient(video: &VideoSample) -> MotionMaps {
    let n = VideoSample::CHANNELS * video.height * video.width;
    let mut maps = vec![0.0; video.num_frames * n];
    for t in 1..video.num_frames {
        let (prev, cur) = (video.frame(t - 1), video.frame(t));
        for (i, m) in maps[t * n..(t + 1) * n].iter_mut().enumerate() {
            *m = cur[i] as f64 - prev[i] as f64;
        }
    }
    MotionMaps {
        kind: MotionKind::TemporalGradient,
        num_frames: video.num_frames,
        height: video.height,
        width: video.width,
        maps,
    }
}

/// Ground-truth displacement field `(dx, dy)` of the object at every frame,
/// read back from the generator's recorded track.
pub fn synthetic_flow(video: &VideoSample) -> Result<MotionMaps> {
    let track = video
        .track
        .as_ref()
        .ok_or_else(|| Error::Precondition("video has no recorded displacements; synthetic flow unavailable".into()))?;
    let (h, w) = (video.height, video.width);
    let plane = h * w;
    let mut maps = vec![0.0; video.num_frames * 2 * plane];
    for t in 0..video.num_frames {
        let (dx, dy) = track.displacements[t];
        if dx == 0 && dy == 0 {
            continue;
        }
        let (x0, y0) = track.positions[t];
        let base = t * 2 * plane;
        for py in 0..track.size {
            let y = (y0 + py as i64).rem_euclid(h as i64) as usize;
            for px in 0..track.size {
                let x = (x0 + px as i64).rem_euclid(w as i64) as usize;
                maps[base + y * w + x] = dx as f64;
                maps[base + plane + y * w + x] = dy as f64;
            }
        }
    }
    Ok(MotionMaps {
        kind: MotionKind::SyntheticFlow,
        num_frames: video.num_frames,
        height: h,
        width: w,
        maps,
    })
}

/// Computes the requested motion modality.
pub fn motion_maps(video: &VideoSample, kind: MotionKind) -> Result<MotionMaps> {
    match kind {
        MotionKind::TemporalGradient => Ok(temporal_gradient(video)),
        MotionKind::SyntheticFlow => synthetic_flow(video),
    }
}
