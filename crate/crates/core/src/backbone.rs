//! Video encoder: frames (or motion maps) to a spatially pooled feature
//! sequence downsampled in time by `r_t`.
//!
//! Layout: a spatio-temporal stem (3D conv, SiLU, global spatial mean), then
//! `depth - 1` temporal conv blocks (kernel 3, SiLU), stride-`r_t` average
//! pooling in time, and a pointwise projection to `feat_channels`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub feat_channels: usize,
    pub r_t: usize,
    pub depth: usize,
    pub kernel_t: usize,
    pub kernel_s: usize,
    pub stride_s: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            feat_channels: 16,
            r_t: 2,
            depth: 2,
            kernel_t: 3,
            kernel_s: 4,
            stride_s: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 2 || self.in_channels == 3) {
            return Err(Error::invalid(format!("in_channels must be 2 or 3, got {}", self.in_channels)));
        }
        if self.r_t == 0 || self.feat_channels == 0 || self.stem_channels == 0 || self.depth == 0 {
            return Err(Error::invalid("r_t, feat_channels, stem_channels and depth must be >= 1"));
        }
        if self.kernel_t.is_multiple_of(2) || self.kernel_s == 0 || self.stride_s == 0 {
            return Err(Error::invalid("kernel_t must be odd; kernel_s and stride_s positive"));
        }
        Ok(())
    }

    /// Output length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        frames / self.r_t
    }

    /// Creates freshly initialised parameters under `prefix`.
    pub fn init<R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        let (cs, ks, kt) = (self.stem_channels, self.kernel_s, self.kernel_t);
        p.init_normal(
            &format!("{prefix}.stem.w"),
            &[cs, self.in_channels, kt, ks, ks],
            self.in_channels * kt * ks * ks,
            2.0,
            rng,
        );
        p.init_zeros(&format!("{prefix}.stem.b"), &[cs]);
        for i in 1..self.depth {
            p.init_normal(&format!("{prefix}.block{i}.w"), &[cs, cs, 3], cs * 3, 1.5, rng);
            p.init_zeros(&format!("{prefix}.block{i}.b"), &[cs]);
        }
        p.init_normal(&format!("{prefix}.out.w"), &[self.feat_channels, cs, 1], cs, 1.0, rng);
        p.init_zeros(&format!("{prefix}.out.b"), &[self.feat_channels]);
        p
    }

    /// Records the encoder on `g`. `x` must be `[T, in_channels, H, W]`.
    pub fn encode(&self, g: &mut Graph, binder: &mut Binder, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects [T, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        if shape[0] < self.r_t {
            return Err(Error::shape(format!(
                "input has {} frames, fewer than r_t = {}",
                shape[0], self.r_t
            )));
        }
        let w = binder.bind(g, params, &format!("{prefix}.stem.w"))?;
        let b = binder.bind(g, params, &format!("{prefix}.stem.b"))?;
        let mut h = g.stem(x, w, b, self.kernel_s, self.stride_s)?;
        for i in 1..self.depth {
            let w = binder.bind(g, params, &format!("{prefix}.block{i}.w"))?;
            let b = binder.bind(g, params, &format!("{prefix}.block{i}.b"))?;
            let c = g.conv1d(h, w, b)?;
            h = g.silu(c);
        }
        let pooled = g.avg_pool_time(h, self.r_t)?;
        let w = binder.bind(g, params, &format!("{prefix}.out.w"))?;
        let b = binder.bind(g, params, &format!("{prefix}.out.b"))?;
        g.conv1d(pooled, w, b)
    }

    /// Graph-free convenience wrapper around [`BackboneConfig::encode`].
    pub fn encode_tensor(&self, params: &ParamStore, prefix: &str, x: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut binder = Binder::frozen();
        let xv = g.constant(x);
        let z = self.encode(&mut g, &mut binder, params, prefix, xv)?;
        Ok(g.value(z).clone())
    }
}
