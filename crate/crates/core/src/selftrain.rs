//! Random patch-based self-training: a teacher labels the unlabeled pool,
//! then fresh students train on randomly mixed labeled and pseudo-labeled
//! patches, optionally relabeling between iterations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_patch, strong_augment, weak_augment, AugmentConfig, PatchSample, PatchSource};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::mean_dsc;
use crate::model::{Model, ModelConfig};
use crate::train::{train_fss, train_with_batches, TrainConfig, TrainOutcome};
use crate::types::{DsaSequence, VesselMask};

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub sequence_id: String,
    pub mask: VesselMask,
    /// 0 for the teacher, k for the student of iteration k.
    pub teacher_generation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledPool {
    pub entries: Vec<PoolEntry>,
}

impl PseudoLabeledPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Generation of the model that produced the pool.
    pub fn generation(&self) -> Option<usize> {
        self.entries.first().map(|e| e.teacher_generation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpstConfig {
    pub iterations: usize,
    /// A slot takes a labeled patch when `r > p`.
    pub p: f64,
    pub threshold: f64,
    /// Strong augmentation on the augmented branch; off gives the weak-only
    /// ablation.
    pub strong_augmentation: bool,
    /// Put strong augmentation on pseudo-labeled patches instead of labeled
    /// ones.
    pub swap_augmentation: bool,
}

impl Default for RpstConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            p: 0.5,
            threshold: 0.5,
            strong_augmentation: true,
            swap_augmentation: false,
        }
    }
}

/// Trains the teacher on labeled data only.
pub fn train_teacher<R: Rng + ?Sized>(
    model_cfg: &ModelConfig,
    labeled: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    train_fss(model_cfg, labeled, val, cfg, rng)
}

/// Hard pseudo-labels (`p >= threshold`) for every unlabeled sequence.
pub fn pseudo_label_pool(
    model: &Model,
    unlabeled: &[DsaSequence],
    threshold: f64,
    tile: usize,
    generation: usize,
) -> Result<PseudoLabeledPool> {
    let entries = unlabeled
        .iter()
        .map(|seq| {
            Ok(PoolEntry {
                sequence_id: seq.id().to_string(),
                mask: model.predict(seq, tile)?.binarize(threshold),
                teacher_generation: generation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabeledPool { entries })
}

/// Draws `batch_size` mixed patches. Each slot takes a labeled patch when a
/// uniform draw exceeds `cfg.p`, else a pseudo-labeled one.
#[allow(clippy::too_many_arguments)]
pub fn rpst_batch<R: Rng + ?Sized>(
    labeled: &[&Example],
    unlabeled: &[DsaSequence],
    pool: &PseudoLabeledPool,
    cfg: &RpstConfig,
    batch_size: usize,
    patch_size: usize,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    if labeled.is_empty() {
        return Err(Error::EmptyPool("labeled"));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool("pseudo-labeled"));
    }
    if pool.len() != unlabeled.len() {
        return Err(Error::InvalidArgument(format!(
            "pool has {} entries for {} unlabeled sequences",
            pool.len(),
            unlabeled.len()
        )));
    }
    (0..batch_size)
        .map(|_| {
            let r: f64 = rng.random();
            let (patch, strong) = if r > cfg.p {
                let ex = labeled[rng.random_range(0..labeled.len())];
                let label = ex.label.as_ref().expect("labeled example").as_map();
                let p = sample_patch(&ex.sequence, label, patch_size, PatchSource::Labeled, rng)?;
                (p, !cfg.swap_augmentation)
            } else {
                let k = rng.random_range(0..pool.len());
                let entry = &pool.entries[k];
                debug_assert_eq!(entry.sequence_id, unlabeled[k].id());
                let p = sample_patch(&unlabeled[k], entry.mask.as_map(), patch_size, PatchSource::PseudoLabeled, rng)?;
                (p, cfg.swap_augmentation)
            };
            let patch = weak_augment(&patch, &aug.weak, rng);
            Ok(if strong && cfg.strong_augmentation {
                strong_augment(&patch, &aug.strong, rng)
            } else {
                patch
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RpstOutcome {
    pub teacher: TrainOutcome,
    pub students: Vec<TrainOutcome>,
    /// Generation of the pool each student trained on.
    pub pool_generations: Vec<usize>,
    pub teacher_val_dsc: Option<f64>,
    pub student_val_dsc: Option<f64>,
}

impl RpstOutcome {
    /// The last student.
    pub fn model(&self) -> &Model {
        &self.students.last().expect("at least one iteration").model
    }

    /// Number of students trained.
    pub fn generation(&self) -> usize {
        self.students.len()
    }
}

/// Full self-training run. Every iteration trains a fresh student; the pool
/// is regenerated by each student except the last.
pub fn rpst_train<R: Rng + ?Sized>(
    model_cfg: &ModelConfig,
    labeled: &[Example],
    unlabeled: &[Example],
    val: &[Example],
    train_cfg: &TrainConfig,
    cfg: &RpstConfig,
    rng: &mut R,
) -> Result<RpstOutcome> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("rpst needs at least one iteration".into()));
    }
    if !(cfg.p > 0.0 && cfg.p < 1.0) {
        return Err(Error::InvalidArgument(format!("P must lie in (0, 1), got {}", cfg.p)));
    }
    let labeled_refs: Vec<&Example> = labeled.iter().filter(|e| e.label.is_some()).collect();
    let unlabeled_seqs: Vec<DsaSequence> = unlabeled.iter().map(|e| e.sequence.clone()).collect();
    if unlabeled_seqs.is_empty() {
        return Err(Error::EmptyPool("unlabeled"));
    }
    let teacher = train_teacher(model_cfg, labeled, val, train_cfg, rng)?;
    let mut pool = pseudo_label_pool(&teacher.model, &unlabeled_seqs, cfg.threshold, train_cfg.tile, 0)?;
    let mut students = Vec::with_capacity(cfg.iterations);
    let mut pool_generations = Vec::with_capacity(cfg.iterations);
    for k in 1..=cfg.iterations {
        assert_eq!(pool.generation(), Some(k - 1), "pool must come from the previous model");
        pool_generations.push(k - 1);
        let student = Model::new(model_cfg.clone(), rng)?;
        let outcome = train_with_batches(student, val, train_cfg, rng, |r| {
            rpst_batch(
                &labeled_refs,
                &unlabeled_seqs,
                &pool,
                cfg,
                train_cfg.batch_size,
                train_cfg.patch_size,
                &train_cfg.augment,
                r,
            )
        })?;
        if k < cfg.iterations {
            pool = pseudo_label_pool(&outcome.model, &unlabeled_seqs, cfg.threshold, train_cfg.tile, k)?;
        }
        log::info!("rpst iteration {k}: student val dsc {:?}", outcome.best_val_dsc);
        students.push(outcome);
    }
    let score = |m: &Model| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            mean_dsc(m, val, train_cfg.tile).map(Some)
        }
    };
    let teacher_val_dsc = score(&teacher.model)?;
    let student_val_dsc = score(&students.last().expect("iterations >= 1").model)?;
    Ok(RpstOutcome {
        teacher,
        students,
        pool_generations,
        teacher_val_dsc,
        student_val_dsc,
    })
}
