//! Random patch sampling and the weak/strong augmentation pipelines.
//!
//! Weak augmentation is purely geometric (flips and quarter turns) and moves
//! the label with the frames. Strong augmentation combines photometric
//! transforms that touch frames only (cutout, noise, blur, contrast) with an
//! elastic warp that resamples frames bilinearly and the label by nearest
//! neighbour.

use dias_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DsaSequence, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    Labeled,
    PseudoLabeled,
}

/// A co-located crop of a sequence and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `[F, h, w]`
    pub seq_patch: Tensor,
    pub label_patch: LabelMap,
    pub source: PatchSource,
}

impl PatchSample {
    pub fn new(seq_patch: Tensor, label_patch: LabelMap, source: PatchSource) -> Result<Self> {
        if seq_patch.ndim() != 3
            || seq_patch.shape()[1] != label_patch.height
            || seq_patch.shape()[2] != label_patch.width
        {
            return Err(Error::shape(
                ("F", label_patch.height, label_patch.width),
                seq_patch.shape(),
            ));
        }
        Ok(Self {
            seq_patch,
            label_patch,
            source,
        })
    }

    pub fn frames(&self) -> usize {
        self.seq_patch.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.label_patch.height
    }

    pub fn width(&self) -> usize {
        self.label_patch.width
    }
}

/// Crops a `size x size` window at a uniformly random corner. The same
/// window is applied to every frame and to the label.
pub fn sample_patch<R: Rng + ?Sized>(
    seq: &DsaSequence,
    label: &LabelMap,
    size: usize,
    source: PatchSource,
    rng: &mut R,
) -> Result<PatchSample> {
    let (h, w) = (seq.height(), seq.width());
    if label.height != h || label.width != w {
        return Err(Error::shape((h, w), (label.height, label.width)));
    }
    if size == 0 || size > h || size > w {
        return Err(Error::PatchTooLarge {
            patch: size,
            height: h,
            width: w,
        });
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    Ok(crop(seq, label, y0, x0, size, source))
}

pub fn crop(seq: &DsaSequence, label: &LabelMap, y0: usize, x0: usize, size: usize, source: PatchSource) -> PatchSample {
    let f = seq.num_frames();
    let w = seq.width();
    let mut data = Vec::with_capacity(f * size * size);
    for t in 0..f {
        let frame = seq.frame(t);
        for y in y0..y0 + size {
            data.extend_from_slice(&frame[y * w + x0..y * w + x0 + size]);
        }
    }
    let mut pixels = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        pixels.extend_from_slice(&label.pixels[y * w + x0..y * w + x0 + size]);
    }
    PatchSample {
        seq_patch: Tensor::from_vec(&[f, size, size], data),
        label_patch: LabelMap {
            height: size,
            width: size,
            pixels,
        },
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rotate: true,
        }
    }
}

/// One realisation of the weak geometric transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeakDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
}

impl WeakDraw {
    pub fn sample<R: Rng + ?Sized>(cfg: &WeakConfig, rng: &mut R) -> Self {
        let hflip = rng.random_bool(0.5) && cfg.hflip;
        let vflip = rng.random_bool(0.5) && cfg.vflip;
        let turns = rng.random_range(0..4u8);
        Self {
            hflip,
            vflip,
            quarter_turns: if cfg.rotate { turns } else { 0 },
        }
    }

    /// Source coordinate for output pixel `(y, x)` of a `size x size` grid.
    fn source(&self, y: usize, x: usize, size: usize) -> (usize, usize) {
        // undo the rotation first, then the flips
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.quarter_turns {
            // out[y][x] = in[x][n-1-y] for one CCW turn
            let (ny, nx) = (sx, size - 1 - sy);
            sy = ny;
            sx = nx;
        }
        if self.vflip {
            sy = size - 1 - sy;
        }
        if self.hflip {
            sx = size - 1 - sx;
        }
        (sy, sx)
    }

    /// `map[p]` is the source pixel of output pixel `p` on a `size x size`
    /// grid.
    pub fn index_map(&self, size: usize) -> Vec<usize> {
        let mut map = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (sy, sx) = self.source(y, x, size);
                map.push(sy * size + sx);
            }
        }
        map
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.quarter_turns == 0
    }
}

fn remap<T: Copy>(src: &[T], size: usize, draw: &WeakDraw) -> Vec<T> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (sy, sx) = draw.source(y, x, size);
            out.push(src[sy * size + sx]);
        }
    }
    out
}

/// Applies a given weak draw to every frame and to the label.
pub fn apply_weak(p: &PatchSample, draw: &WeakDraw) -> PatchSample {
    if draw.is_identity() {
        return p.clone();
    }
    assert_eq!(p.height(), p.width(), "weak augmentation needs square patches");
    let size = p.height();
    let mut data = Vec::with_capacity(p.seq_patch.numel());
    for t in 0..p.frames() {
        data.extend(remap(p.seq_patch.slab(t), size, draw));
    }
    PatchSample {
        seq_patch: Tensor::from_vec(p.seq_patch.shape(), data),
        label_patch: LabelMap {
            height: size,
            width: size,
            pixels: remap(&p.label_patch.pixels, size, draw),
        },
        source: p.source,
    }
}

pub fn weak_augment<R: Rng + ?Sized>(p: &PatchSample, cfg: &WeakConfig, rng: &mut R) -> PatchSample {
    let draw = WeakDraw::sample(cfg, rng);
    apply_weak(p, &draw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongConfig {
    pub cutout_prob: f64,
    pub cutout_min: usize,
    pub cutout_max: usize,
    pub noise_prob: f64,
    pub noise_std: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub elastic_prob: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub contrast_prob: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self {
            cutout_prob: 0.5,
            cutout_min: 8,
            cutout_max: 24,
            noise_prob: 0.5,
            noise_std: 0.1,
            blur_prob: 0.5,
            blur_sigma_min: 0.5,
            blur_sigma_max: 1.5,
            elastic_prob: 0.5,
            elastic_alpha: 20.0,
            elastic_sigma: 4.0,
            contrast_prob: 0.5,
            contrast_min: 0.7,
            contrast_max: 1.4,
        }
    }
}

impl StrongConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        Self {
            cutout_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            elastic_prob: 0.0,
            contrast_prob: 0.0,
            ..Self::default()
        }
    }

    /// Photometric transforms only; keeps pixel alignment with the input.
    pub fn without_elastic(&self) -> Self {
        Self {
            elastic_prob: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak: WeakConfig,
    pub strong: StrongConfig,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Smooth random displacement field `(dy, dx)`: uniform noise in `[-1, 1]`
/// blurred with `sigma` and scaled by `alpha`.
pub fn elastic_field<R: Rng + ?Sized>(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || -> Vec<f64> {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        gaussian_blur(&raw, h, w, sigma).into_iter().map(|v| v * alpha).collect()
    };
    let dy = draw();
    let dx = draw();
    (dy, dx)
}

/// Warps every frame (bilinear) and the label (nearest neighbour) with the
/// same displacement field.
pub fn apply_elastic(p: &PatchSample, dy: &[f64], dx: &[f64]) -> PatchSample {
    let (h, w) = (p.height(), p.width());
    let mut data = Vec::with_capacity(p.seq_patch.numel());
    for t in 0..p.frames() {
        let plane = p.seq_patch.slab(t);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                data.push(bilinear_sample(plane, h, w, y as f64 + dy[i], x as f64 + dx[i]));
            }
        }
    }
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (y as f64 + dy[i]).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (x as f64 + dx[i]).round().clamp(0.0, (w - 1) as f64) as usize;
            pixels.push(p.label_patch.pixels[sy * w + sx]);
        }
    }
    PatchSample {
        seq_patch: Tensor::from_vec(p.seq_patch.shape(), data),
        label_patch: LabelMap {
            height: h,
            width: w,
            pixels,
        },
        source: p.source,
    }
}

/// Strong augmentation. Each transform fires independently with its
/// configured probability, in the order elastic, contrast, blur, noise,
/// cutout.
pub fn strong_augment<R: Rng + ?Sized>(p: &PatchSample, cfg: &StrongConfig, rng: &mut R) -> PatchSample {
    let (h, w) = (p.height(), p.width());
    let f = p.frames();
    let mut out = p.clone();

    if cfg.elastic_prob > 0.0 && rng.random_bool(cfg.elastic_prob.min(1.0)) {
        let (dy, dx) = elastic_field(h, w, cfg.elastic_alpha, cfg.elastic_sigma, rng);
        out = apply_elastic(&out, &dy, &dx);
    }
    if cfg.contrast_prob > 0.0 && rng.random_bool(cfg.contrast_prob.min(1.0)) {
        for t in 0..f {
            let factor = rng.random_range(cfg.contrast_min..=cfg.contrast_max);
            let plane = &mut out.seq_patch.data_mut()[t * h * w..(t + 1) * h * w];
            plane.iter_mut().for_each(|v| *v *= factor);
        }
    }
    if cfg.blur_prob > 0.0 && rng.random_bool(cfg.blur_prob.min(1.0)) {
        let sigma = rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        for t in 0..f {
            let plane = &mut out.seq_patch.data_mut()[t * h * w..(t + 1) * h * w];
            let blurred = gaussian_blur(plane, h, w, sigma);
            plane.copy_from_slice(&blurred);
        }
    }
    if cfg.noise_prob > 0.0 && rng.random_bool(cfg.noise_prob.min(1.0)) {
        let normal = Normal::new(0.0, cfg.noise_std).expect("noise std must be finite and >= 0");
        for v in out.seq_patch.data_mut() {
            *v += normal.sample(rng);
        }
    }
    if cfg.cutout_prob > 0.0 && rng.random_bool(cfg.cutout_prob.min(1.0)) {
        let side = rng.random_range(cfg.cutout_min..=cfg.cutout_max.max(cfg.cutout_min));
        let (sh, sw) = (side.min(h), side.min(w));
        let y0 = rng.random_range(0..=h - sh);
        let x0 = rng.random_range(0..=w - sw);
        for t in 0..f {
            for y in y0..y0 + sh {
                let base = t * h * w + y * w;
                out.seq_patch.data_mut()[base + x0..base + x0 + sw].fill(0.0);
            }
        }
    }
    out
}
