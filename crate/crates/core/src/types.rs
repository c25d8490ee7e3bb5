//! Domain types shared by every pipeline stage, plus the label-value
//! conventions: vessel masks hold `{0, 1}` and scribbles `{0, 1, 255}` with
//! 255 marking unannotated pixels.

use dias_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const VESSEL: u8 = 1;
pub const UNANNOTATED: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Anteroposterior,
    Lateral,
    Synthetic,
}

/// An ordered stack of co-registered grayscale frames, shape `[F, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence", into = "RawSequence")]
pub struct DsaSequence {
    id: String,
    frames: Tensor,
    view: View,
    frame_rate_fps: f64,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    id: String,
    frames: Tensor,
    view: View,
    frame_rate_fps: f64,
}

impl TryFrom<RawSequence> for DsaSequence {
    type Error = Error;
    fn try_from(r: RawSequence) -> Result<Self> {
        DsaSequence::new(r.id, r.frames, r.view, r.frame_rate_fps)
    }
}

impl From<DsaSequence> for RawSequence {
    fn from(s: DsaSequence) -> Self {
        RawSequence {
            id: s.id,
            frames: s.frames,
            view: s.view,
            frame_rate_fps: s.frame_rate_fps,
        }
    }
}

pub const NOMINAL_FRAME_RATE: f64 = 4.0;

impl DsaSequence {
    pub fn new(id: impl Into<String>, frames: Tensor, view: View, frame_rate_fps: f64) -> Result<Self> {
        if frames.ndim() != 3 {
            return Err(Error::shape("[F, H, W]", frames.shape()));
        }
        if frames.shape()[0] == 0 {
            return Err(Error::EmptySequence);
        }
        if !(frame_rate_fps > 0.0 && frame_rate_fps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "frame rate must be positive, got {frame_rate_fps}"
            )));
        }
        Ok(Self {
            id: id.into(),
            frames,
            view,
            frame_rate_fps,
        })
    }

    /// Builds a sequence from individual `H x W` frames.
    pub fn from_frames(id: impl Into<String>, frames: &[Vec<f64>], height: usize, width: usize, view: View) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(frames.len() * height * width);
        for f in frames {
            if f.len() != height * width {
                return Err(Error::shape(height * width, f.len()));
            }
            data.extend_from_slice(f);
        }
        Self::new(
            id,
            Tensor::from_vec(&[frames.len(), height, width], data),
            view,
            NOMINAL_FRAME_RATE,
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn frame_rate_fps(&self) -> f64 {
        self.frame_rate_fps
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.slab(t)
    }

    /// Same metadata, new frame stack.
    pub fn with_frames(&self, frames: Tensor) -> Result<Self> {
        Self::new(self.id.clone(), frames, self.view, self.frame_rate_fps)
    }
}

/// A raw `H x W` grid of label bytes. Its value set is not checked; use
/// [`VesselMask`] or [`ScribbleMask`] for validated labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(height * width, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Vessel,
    Scribble,
}

impl LabelKind {
    pub fn allows(self, v: u8) -> bool {
        match self {
            LabelKind::Vessel => v == BACKGROUND || v == VESSEL,
            LabelKind::Scribble => v == BACKGROUND || v == VESSEL || v == UNANNOTATED,
        }
    }
}

fn check_values(map: &LabelMap, kind: LabelKind) -> Result<()> {
    match map.pixels.iter().position(|&v| !kind.allows(v)) {
        Some(index) => Err(Error::IllegalLabelValue {
            value: map.pixels[index],
            index,
        }),
        None => Ok(()),
    }
}

macro_rules! validated_mask {
    ($name:ident, $kind:expr) => {
        #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(try_from = "LabelMap", into = "LabelMap")]
        pub struct $name(LabelMap);

        impl $name {
            pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
                Self::try_from(LabelMap::new(height, width, pixels)?)
            }

            pub fn height(&self) -> usize {
                self.0.height
            }

            pub fn width(&self) -> usize {
                self.0.width
            }

            pub fn pixels(&self) -> &[u8] {
                &self.0.pixels
            }

            pub fn get(&self, y: usize, x: usize) -> u8 {
                self.0.get(y, x)
            }

            pub fn as_map(&self) -> &LabelMap {
                &self.0
            }

            pub fn into_map(self) -> LabelMap {
                self.0
            }
        }

        impl TryFrom<LabelMap> for $name {
            type Error = Error;
            fn try_from(map: LabelMap) -> Result<Self> {
                check_values(&map, $kind)?;
                Ok(Self(map))
            }
        }

        impl From<$name> for LabelMap {
            fn from(m: $name) -> LabelMap {
                m.0
            }
        }
    };
}

validated_mask!(VesselMask, LabelKind::Vessel);
validated_mask!(ScribbleMask, LabelKind::Scribble);

impl VesselMask {
    pub fn from_bools(height: usize, width: usize, fg: &[bool]) -> Result<Self> {
        Self::new(height, width, fg.iter().map(|&b| u8::from(b)).collect())
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels().iter().filter(|&&v| v == VESSEL).count()
    }
}

impl ScribbleMask {
    pub fn annotated_count(&self) -> usize {
        self.pixels().iter().filter(|&&v| v != UNANNOTATED).count()
    }
}

/// Per-pixel vessel probability, every entry finite and in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbs", into = "RawProbs")]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawProbs {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl TryFrom<RawProbs> for ProbabilityMap {
    type Error = Error;
    fn try_from(r: RawProbs) -> Result<Self> {
        ProbabilityMap::new(r.height, r.width, r.probs)
    }
}

impl From<ProbabilityMap> for RawProbs {
    fn from(p: ProbabilityMap) -> Self {
        RawProbs {
            height: p.height,
            width: p.width,
            probs: p.probs,
        }
    }
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::shape(height * width, probs.len()));
        }
        if let Some(index) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidProbability {
                value: probs[index],
                index,
            });
        }
        Ok(Self {
            height,
            width,
            probs,
        })
    }

    /// The map `p = mask` (0 or 1 everywhere).
    pub fn from_mask(mask: &VesselMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            probs: mask.pixels().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Hard labels `p >= threshold`.
    pub fn binarize(&self, threshold: f64) -> VesselMask {
        let pixels = self.probs.iter().map(|&p| u8::from(p >= threshold)).collect();
        VesselMask(LabelMap {
            height: self.height,
            width: self.width,
            pixels,
        })
    }
}

/// One bundle of evaluation metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub iou: f64,
    pub auc: f64,
    pub vc: f64,
}

impl MetricsReport {
    pub fn is_valid(&self) -> bool {
        let unit = [self.dsc, self.acc, self.sen, self.spe, self.iou, self.auc];
        unit.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && self.vc.is_finite() && self.vc >= 0.0
    }
}

/// Multi-frame feature maps at one encoder stage, shape `[T, C, H_s, W_s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFeatureState {
    pub stage: usize,
    pub maps: Tensor,
}

/// Checks that a label grid pairs with a sequence: equal spatial size and a
/// legal value set for its kind.
pub fn validate_pairing(seq: &DsaSequence, label: &LabelMap, kind: LabelKind) -> Result<()> {
    if label.height != seq.height() || label.width != seq.width() {
        return Err(Error::shape(
            (seq.height(), seq.width()),
            (label.height, label.width),
        ));
    }
    check_values(label, kind)
}
