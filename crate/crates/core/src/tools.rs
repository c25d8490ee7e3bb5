//! Scribble generation from full annotations (RDFA), temporal projections,
//! and a synthetic angiography sequence generator.

use std::collections::VecDeque;

use dias_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DsaSequence, ScribbleMask, VesselMask, View, BACKGROUND, NOMINAL_FRAME_RATE, UNANNOTATED, VESSEL};

/// Zhang-Suen thinning of a binary image to one-pixel-wide curves.
pub fn thin(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut img = fg.to_vec();
    let at = |img: &[bool], y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[y as usize * w + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if !img[y as usize * w + x as usize] {
                        continue;
                    }
                    // neighbours P2..P9 clockwise from north
                    let n = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let keep = if pass == 0 {
                        p2 && p4 && p6 || p4 && p6 && p8
                    } else {
                        p2 && p4 && p8 || p2 && p6 && p8
                    };
                    if !keep {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for k in remove {
                img[k] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Binary dilation with a disk of the given radius.
pub fn dilate(fg: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !fg[y * w + x] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        out[ny as usize * w + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn neighbours(k: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (k / w, k % w);
    (y.saturating_sub(1)..=(y + 1).min(h - 1))
        .flat_map(move |ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).map(move |nx| ny * w + nx))
        .filter(move |&q| q != k)
}

/// Randomly removes whole skeleton segments (runs between junctions) until
/// at most `keep_fraction` of the skeleton pixels remain.
pub fn prune_skeleton<R: Rng + ?Sized>(skel: &[bool], h: usize, w: usize, keep_fraction: f64, rng: &mut R) -> Vec<bool> {
    let total = skel.iter().filter(|&&v| v).count();
    let budget = (keep_fraction * total as f64).floor() as usize;
    if budget >= total {
        return skel.to_vec();
    }
    let junction: Vec<bool> = (0..h * w)
        .map(|k| skel[k] && neighbours(k, h, w).filter(|&q| skel[q]).count() > 2)
        .collect();
    // label segments: connected runs of non-junction skeleton pixels
    const NONE: usize = usize::MAX;
    let mut seg_of = vec![NONE; h * w];
    let mut seg_pixels: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !skel[start] || junction[start] || seg_of[start] != NONE {
            continue;
        }
        let id = seg_pixels.len();
        let mut pixels = vec![start];
        seg_of[start] = id;
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            for q in neighbours(k, h, w) {
                if skel[q] && !junction[q] && seg_of[q] == NONE {
                    seg_of[q] = id;
                    pixels.push(q);
                    queue.push_back(q);
                }
            }
        }
        seg_pixels.push(pixels);
    }
    // junction pixels survive while any neighbouring segment does; isolated
    // junction pixels become one-pixel segments of their own
    let mut junctions: Vec<(usize, Vec<usize>)> = Vec::new();
    for k in (0..h * w).filter(|&k| junction[k]) {
        let mut adj: Vec<usize> = neighbours(k, h, w).map(|q| seg_of[q]).filter(|&s| s != NONE).collect();
        adj.sort_unstable();
        adj.dedup();
        if adj.is_empty() {
            seg_of[k] = seg_pixels.len();
            seg_pixels.push(vec![k]);
        } else {
            junctions.push((k, adj));
        }
    }
    let mut seg_junctions: Vec<Vec<usize>> = vec![Vec::new(); seg_pixels.len()];
    let mut alive_adj: Vec<usize> = Vec::with_capacity(junctions.len());
    for (j, (_, adj)) in junctions.iter().enumerate() {
        for &s in adj {
            seg_junctions[s].push(j);
        }
        alive_adj.push(adj.len());
    }
    let mut order: Vec<usize> = (0..seg_pixels.len()).collect();
    order.shuffle(rng);
    let mut alive = vec![true; seg_pixels.len()];
    let mut count = total;
    for s in order {
        if count <= budget {
            break;
        }
        alive[s] = false;
        count -= seg_pixels[s].len();
        for &j in &seg_junctions[s] {
            alive_adj[j] -= 1;
            if alive_adj[j] == 0 {
                count -= 1;
            }
        }
    }
    let mut out = vec![false; h * w];
    for (s, pixels) in seg_pixels.iter().enumerate() {
        if alive[s] {
            for &k in pixels {
                out[k] = true;
            }
        }
    }
    for (j, (k, _)) in junctions.iter().enumerate() {
        if alive_adj[j] > 0 {
            out[*k] = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdfaConfig {
    pub keep_fraction: f64,
    /// Background strokes come from the complement of the vessel mask
    /// dilated by this radius.
    pub background_margin: usize,
}

impl Default for RdfaConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 0.5,
            background_margin: 3,
        }
    }
}

/// Scribbles from a full annotation: skeletons of the vessel class and of
/// the margin-shrunk background, each randomly pruned.
pub fn generate_rdfa<R: Rng + ?Sized>(full: &VesselMask, cfg: &RdfaConfig, rng: &mut R) -> Result<ScribbleMask> {
    if !(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_fraction {} must lie in (0, 1]",
            cfg.keep_fraction
        )));
    }
    let (h, w) = (full.height(), full.width());
    let vessel: Vec<bool> = full.pixels().iter().map(|&v| v == VESSEL).collect();
    let grown = dilate(&vessel, h, w, cfg.background_margin);
    let background: Vec<bool> = grown.iter().map(|&v| !v).collect();
    let v_skel = prune_skeleton(&thin(&vessel, h, w), h, w, cfg.keep_fraction, rng);
    let b_skel = prune_skeleton(&thin(&background, h, w), h, w, cfg.keep_fraction, rng);
    let pixels = (0..h * w)
        .map(|k| {
            if v_skel[k] {
                VESSEL
            } else if b_skel[k] {
                BACKGROUND
            } else {
                UNANNOTATED
            }
        })
        .collect();
    ScribbleMask::new(h, w, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    First,
    Last,
    FirstLast,
    Mean,
    Min,
    Full,
}

impl ProjectionMode {
    /// Frame count of the projected sequence given `f` input frames.
    pub fn output_frames(self, f: usize) -> usize {
        match self {
            ProjectionMode::First | ProjectionMode::Last | ProjectionMode::Mean | ProjectionMode::Min => 1,
            ProjectionMode::FirstLast => 2,
            ProjectionMode::Full => f,
        }
    }
}

impl std::str::FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown projection mode {s}")))
    }
}

pub fn project(seq: &DsaSequence, mode: ProjectionMode) -> Result<DsaSequence> {
    let (f, h, w) = (seq.num_frames(), seq.height(), seq.width());
    let hw = h * w;
    let frames = seq.frames();
    let out = match mode {
        ProjectionMode::Full => return Ok(seq.clone()),
        ProjectionMode::First => frames.select_leading(&[0]),
        ProjectionMode::Last => frames.select_leading(&[f - 1]),
        ProjectionMode::FirstLast => frames.select_leading(&[0, f - 1]),
        ProjectionMode::Mean => {
            let mut acc = vec![0.0; hw];
            for t in 0..f {
                for (a, v) in acc.iter_mut().zip(seq.frame(t)) {
                    *a += v;
                }
            }
            Tensor::from_vec(&[1, h, w], acc.into_iter().map(|a| a / f as f64).collect())
        }
        ProjectionMode::Min => {
            let mut acc = seq.frame(0).to_vec();
            for t in 1..f {
                for (a, &v) in acc.iter_mut().zip(seq.frame(t)) {
                    *a = a.min(v);
                }
            }
            Tensor::from_vec(&[1, h, w], acc)
        }
    };
    seq.with_frames(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    pub frames: usize,
    /// Deepest branching level; the root has depth 0.
    pub tree_depth: usize,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise: f64,
    /// Vessel radius at the root, in pixels.
    pub root_radius: f64,
    /// Intensity of unfilled tissue.
    pub background: f64,
    /// Intensity drop of a contrast-filled vessel.
    pub contrast: f64,
    /// Per-sequence contrast is drawn uniformly from
    /// `contrast * (1 +- contrast_jitter)`.
    pub contrast_jitter: f64,
    /// Accepted band for the vessel pixel fraction.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            frames: 8,
            tree_depth: 4,
            noise: 0.05,
            root_radius: 2.5,
            background: 0.8,
            contrast: 0.6,
            contrast_jitter: 0.0,
            min_fraction: 0.02,
            max_fraction: 0.15,
        }
    }
}

/// Per-pixel depth of the shallowest branch covering it.
struct Tree {
    depth: Vec<Option<usize>>,
}

fn grow_tree<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Tree {
    let n = spec.size;
    let mut depth: Vec<Option<usize>> = vec![None; n * n];
    let side = n as f64;
    // root enters from a random border heading roughly inwards
    let edge = rng.random_range(0..4);
    let along = rng.random_range(0.3..0.7) * side;
    let (x0, y0, base_angle) = match edge {
        0 => (along, 0.0, std::f64::consts::FRAC_PI_2),
        1 => (side - 1.0, along, std::f64::consts::PI),
        2 => (along, side - 1.0, -std::f64::consts::FRAC_PI_2),
        _ => (0.0, along, 0.0),
    };
    let angle = base_angle + rng.random_range(-0.3..0.3);
    let mut stack = vec![(x0, y0, angle, spec.root_radius, 0usize, 0.45 * side)];
    while let Some((x, y, a, r, d, len)) = stack.pop() {
        let steps = len.ceil() as usize;
        let (mut cx, mut cy, mut ca) = (x, y, a);
        for _ in 0..steps {
            ca += rng.random_range(-0.08..0.08);
            cx += ca.cos();
            cy += ca.sin();
            paint_disk(&mut depth, n, cx, cy, r, d);
        }
        if d < spec.tree_depth {
            let spread = rng.random_range(0.35..0.8);
            let child_r = (r * 0.72).max(0.6);
            let child_len = len * rng.random_range(0.6..0.8);
            stack.push((cx, cy, ca + spread, child_r, d + 1, child_len));
            stack.push((cx, cy, ca - spread, child_r, d + 1, child_len));
        }
    }
    Tree { depth }
}

fn paint_disk(depth: &mut [Option<usize>], n: usize, cx: f64, cy: f64, r: f64, d: usize) {
    let reach = r.ceil() as isize;
    let (ix, iy) = (cx.round() as isize, cy.round() as isize);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (px, py) = (ix + dx, iy + dy);
            if px < 0 || py < 0 || px as usize >= n || py as usize >= n {
                continue;
            }
            let (fx, fy) = (px as f64 - cx, py as f64 - cy);
            if fx * fx + fy * fy <= r * r {
                let slot = &mut depth[py as usize * n + px as usize];
                *slot = Some(slot.map_or(d, |old| old.min(d)));
            }
        }
    }
}

/// A random vessel tree and the sequence of its progressive filling. Frame
/// `t` (1-based) shows every branch of depth `<= t * tree_depth / frames`,
/// dark on a light background, plus Gaussian noise.
pub fn synthesize_sequence<R: Rng + ?Sized>(id: &str, spec: &SynthSpec, rng: &mut R) -> Result<(DsaSequence, VesselMask)> {
    if spec.frames < 2 {
        return Err(Error::InvalidArgument("synthetic sequences need at least 2 frames".into()));
    }
    if spec.size < 8 {
        return Err(Error::InvalidArgument("synthetic images must be at least 8 pixels wide".into()));
    }
    let n = spec.size;
    let mut tree = grow_tree(spec, rng);
    let mut tries = 1;
    loop {
        let fraction = tree.depth.iter().filter(|d| d.is_some()).count() as f64 / (n * n) as f64;
        if (spec.min_fraction..=spec.max_fraction).contains(&fraction) {
            break;
        }
        if tries >= 200 {
            return Err(Error::InvalidArgument(format!(
                "could not grow a tree with vessel fraction in [{}, {}]",
                spec.min_fraction, spec.max_fraction
            )));
        }
        tree = grow_tree(spec, rng);
        tries += 1;
    }
    let contrast = if spec.contrast_jitter > 0.0 {
        spec.contrast * (1.0 + rng.random_range(-spec.contrast_jitter..=spec.contrast_jitter))
    } else {
        spec.contrast
    };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(spec.frames * n * n);
    for t in 1..=spec.frames {
        let reach = (t * spec.tree_depth) as f64 / spec.frames as f64;
        for d in &tree.depth {
            let filled = d.is_some_and(|d| d as f64 <= reach);
            let base = if filled { spec.background - contrast } else { spec.background };
            let eps = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(base + eps);
        }
    }
    let seq = DsaSequence::new(id, Tensor::from_vec(&[spec.frames, n, n], data), View::Synthetic, NOMINAL_FRAME_RATE)?;
    let mask = VesselMask::from_bools(n, n, &tree.depth.iter().map(Option::is_some).collect::<Vec<_>>())?;
    Ok((seq, mask))
}
