//! Dataset ingestion: PNG frame directories, temporal resampling, z-score
//! normalisation and patient-level splits.
//!
//! On-disk layout:
//!
//! ```text
//! root/{labeled,unlabeled}/<patient_id>/<sequence_id>/frame_###.png
//!                                                    /label.png     (labeled only)
//!                                                    /scribble.png  (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dias_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DsaSequence, LabelMap, ScribbleMask, VesselMask, View, NOMINAL_FRAME_RATE};

pub const LABEL_FILE: &str = "label.png";
pub const SCRIBBLE_FILE: &str = "scribble.png";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

fn parse_frame_index(name: &str) -> Option<usize> {
    let stem = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if stem.len() < 3 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

/// A decoded grayscale image: samples widened to `u16`, plus bit depth.
struct GrayImage {
    width: usize,
    height: usize,
    bit_depth: u8,
    samples: Vec<u16>,
}

fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| unsupported(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| unsupported(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(unsupported(format!("expected grayscale, got {:?}", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let samples = match info.bit_depth {
        png::BitDepth::Eight => (0..height)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + width];
                row.iter().map(|&b| u16::from(b))
            })
            .collect(),
        png::BitDepth::Sixteen => (0..height)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + 2 * width];
                row.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]))
            })
            .collect(),
        other => return Err(unsupported(format!("unsupported bit depth {other:?}"))),
    };
    Ok(GrayImage {
        width,
        height,
        bit_depth: if info.bit_depth == png::BitDepth::Eight { 8 } else { 16 },
        samples,
    })
}

fn write_gray_png(path: &Path, width: usize, height: usize, samples: &[u16], sixteen: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    let bytes: Vec<u8> = if sixteen {
        enc.set_depth(png::BitDepth::Sixteen);
        samples.iter().flat_map(|v| v.to_be_bytes()).collect()
    } else {
        enc.set_depth(png::BitDepth::Eight);
        samples.iter().map(|&v| v.min(255) as u8).collect()
    };
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}

/// Stacks `frame_000.png, frame_001.png, ...` from `dir` into a sequence
/// with intensities scaled to `[0, 1]` by bit depth.
/// The sequence id is the directory's last two path components
/// (`patient/sequence`).
pub fn load_sequence(dir: &Path) -> Result<DsaSequence> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            indices.insert(i);
        }
    }
    if indices.is_empty() {
        return Err(Error::MissingFrames {
            dir: dir.to_path_buf(),
            expected: 0,
        });
    }
    for (expected, &found) in indices.iter().enumerate() {
        if expected != found {
            return Err(Error::MissingFrames {
                dir: dir.to_path_buf(),
                expected,
            });
        }
    }
    let mut data = Vec::new();
    let mut dims = None;
    for &i in &indices {
        let img = read_gray_png(&dir.join(frame_file_name(i)))?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(Error::MixedResolution {
                    index: i,
                    expected: d,
                    found: (img.height, img.width),
                })
            }
            _ => {}
        }
        let scale = if img.bit_depth == 8 { 255.0 } else { 65535.0 };
        data.extend(img.samples.iter().map(|&s| f64::from(s) / scale));
    }
    let (h, w) = dims.expect("at least one frame");
    DsaSequence::new(
        sequence_id_from_dir(dir),
        Tensor::from_vec(&[indices.len(), h, w], data),
        View::Synthetic,
        NOMINAL_FRAME_RATE,
    )
}

fn sequence_id_from_dir(dir: &Path) -> String {
    let comps: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    comps.into_iter().rev().collect::<Vec<_>>().join("/")
}

/// Writes frames as 16-bit PNGs. Intensities are clamped to `[0, 1]` and
/// scaled to the full 16-bit range.
pub fn save_sequence(dir: &Path, seq: &DsaSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..seq.num_frames() {
        let samples: Vec<u16> = seq
            .frame(t)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        write_gray_png(&dir.join(frame_file_name(t)), seq.width(), seq.height(), &samples, true)?;
    }
    Ok(())
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let img = read_gray_png(path)?;
    if img.bit_depth != 8 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "label images must be 8-bit".into(),
        });
    }
    LabelMap::new(img.height, img.width, img.samples.iter().map(|&v| v as u8).collect())
}

pub fn save_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    let samples: Vec<u16> = map.pixels.iter().map(|&v| u16::from(v)).collect();
    write_gray_png(path, map.width, map.height, &samples, false)
}

pub fn load_vessel_mask(path: &Path) -> Result<VesselMask> {
    VesselMask::try_from(load_label_map(path)?)
}

pub fn load_scribble(path: &Path) -> Result<ScribbleMask> {
    ScribbleMask::try_from(load_label_map(path)?)
}

/// Writes a probability map as a 16-bit PNG (`p * 65535`).
pub fn save_probability_png(path: &Path, probs: &crate::types::ProbabilityMap) -> Result<()> {
    let samples: Vec<u16> = probs.probs().iter().map(|&p| (p * 65535.0).round() as u16).collect();
    write_gray_png(path, probs.width(), probs.height(), &samples, true)
}

pub fn load_probability_png(path: &Path) -> Result<crate::types::ProbabilityMap> {
    let img = read_gray_png(path)?;
    let scale = if img.bit_depth == 8 { 255.0 } else { 65535.0 };
    crate::types::ProbabilityMap::new(
        img.height,
        img.width,
        img.samples.iter().map(|&v| f64::from(v) / scale).collect(),
    )
}

/// Frame indices selected when resampling `f_in` frames to `target_len`.
pub fn resample_indices(f_in: usize, target_len: usize) -> Vec<usize> {
    assert!(f_in >= 1 && target_len >= 1, "lengths must be positive");
    if target_len == 1 {
        return vec![(f_in - 1) / 2];
    }
    (0..target_len)
        .map(|i| {
            let pos = i as f64 * (f_in - 1) as f64 / (target_len - 1) as f64;
            (pos.round() as usize).min(f_in - 1)
        })
        .collect()
}

/// Resamples to `target_len` frames by nearest-index selection; frames are
/// never blended.
pub fn resample_length(seq: &DsaSequence, target_len: usize) -> Result<DsaSequence> {
    if target_len == 0 {
        return Err(Error::InvalidArgument("target length must be at least 1".into()));
    }
    if seq.num_frames() == target_len {
        return Ok(seq.clone());
    }
    let idx = resample_indices(seq.num_frames(), target_len);
    seq.with_frames(seq.frames().select_leading(&idx))
}

/// Pooled z-score over every pixel of every frame. Constant sequences map
/// to all zeros.
pub fn zscore_normalize(seq: &DsaSequence) -> DsaSequence {
    let data = seq.frames().data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let frames = if std <= 1e-12 * mean.abs().max(1.0) {
        Tensor::zeros(seq.frames().shape())
    } else {
        seq.frames().map(|v| (v - mean) / std)
    };
    seq.with_frames(frames).expect("shape unchanged")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sequence_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub scribble_path: Option<PathBuf>,
    pub patient_id: String,
    pub split: Split,
}

impl IndexEntry {
    pub fn sequence_id(&self) -> String {
        sequence_id_from_dir(&self.sequence_path)
    }
}

/// Fractions of labeled patients assigned to each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        // 30 / 10 / 20 sequences at the patient level
        Self {
            train: 0.5,
            val: 1.0 / 6.0,
            test: 1.0 / 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Returns an error naming the first patient found in two splits.
    pub fn check_no_patient_leak(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.patient_id, e.split) {
                if prev != e.split {
                    return Err(Error::PatientLeak(e.patient_id.clone()));
                }
            }
        }
        Ok(())
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scans `root` and assigns labeled patients to train/val/test.
pub fn build_index(root: &Path, spec: &SplitSpec) -> Result<DatasetIndex> {
    let fractions = [spec.train, spec.val, spec.test];
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidSplit(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut labeled: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for patient in sorted_subdirs(&root.join("labeled"))? {
        let seqs = sorted_subdirs(&patient)?;
        if !seqs.is_empty() {
            labeled.insert(dir_name(&patient), seqs);
        }
    }
    if labeled.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no labeled sequences under {}",
            root.join("labeled").display()
        )));
    }

    let mut patients: Vec<String> = labeled.keys().cloned().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n = patients.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut entries = Vec::new();
    for (rank, patient) in patients.iter().enumerate() {
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        for seq_dir in &labeled[patient] {
            let label = seq_dir.join(LABEL_FILE);
            let scribble = seq_dir.join(SCRIBBLE_FILE);
            entries.push(IndexEntry {
                sequence_path: seq_dir.clone(),
                label_path: label.is_file().then_some(label),
                scribble_path: scribble.is_file().then_some(scribble),
                patient_id: patient.clone(),
                split,
            });
        }
    }
    for patient in sorted_subdirs(&root.join("unlabeled"))? {
        for seq_dir in sorted_subdirs(&patient)? {
            entries.push(IndexEntry {
                sequence_path: seq_dir,
                label_path: None,
                scribble_path: None,
                patient_id: dir_name(&patient),
                split: Split::Unlabeled,
            });
        }
    }
    entries.sort_by(|a, b| (a.split, &a.sequence_path).cmp(&(b.split, &b.sequence_path)));
    let index = DatasetIndex { entries };
    index.check_no_patient_leak()?;
    if let Some(e) = index.split(Split::Train).chain(index.split(Split::Val)).chain(index.split(Split::Test)).find(|e| e.label_path.is_none()) {
        return Err(Error::EmptyDataset(format!(
            "labeled sequence {} has no {LABEL_FILE}",
            e.sequence_path.display()
        )));
    }
    Ok(index)
}

/// A loaded, resampled and normalised training/evaluation example.
#[derive(Clone, Debug)]
pub struct Example {
    pub sequence: DsaSequence,
    pub label: Option<VesselMask>,
    pub scribble: Option<ScribbleMask>,
}

/// Loads one entry, resampling to `frames` and z-scoring afterwards.
pub fn load_example(entry: &IndexEntry, frames: usize) -> Result<Example> {
    let raw = load_sequence(&entry.sequence_path)?;
    let sequence = zscore_normalize(&resample_length(&raw, frames)?);
    let label = entry.label_path.as_deref().map(load_vessel_mask).transpose()?;
    let scribble = entry.scribble_path.as_deref().map(load_scribble).transpose()?;
    for m in label.iter().map(VesselMask::as_map).chain(scribble.iter().map(ScribbleMask::as_map)) {
        if m.height != sequence.height() || m.width != sequence.width() {
            return Err(Error::shape((sequence.height(), sequence.width()), (m.height, m.width)));
        }
    }
    Ok(Example {
        sequence,
        label,
        scribble,
    })
}

pub fn load_split(index: &DatasetIndex, split: Split, frames: usize) -> Result<Vec<Example>> {
    index.split(split).map(|e| load_example(e, frames)).collect()
}
