//! Fully- and scribble-supervised training loops on random patches.

use dias_tensor::{cosine_lr, AdamW, AdamWConfig, Graph};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_patch, strong_augment, weak_augment, AugmentConfig, PatchSample, PatchSource};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval::mean_dsc;
use crate::model::{Model, ModelConfig};
use crate::supervision::{batch_tensors, graph_dice_ce, graph_pce, prepare_sscr_batch, sscr_step, LossBundle, WssConfig, WssVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub iters_per_epoch: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Tile size for full-image validation inference.
    pub tile: usize,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    /// Apply strong augmentation to labeled patches in fully-supervised
    /// training.
    pub strong_labeled: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            iters_per_epoch: 10,
            patch_size: 64,
            lr: 5e-4,
            min_lr: 1e-6,
            weight_decay: 1e-4,
            tile: 64,
            val_every: 1,
            strong_labeled: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.iters_per_epoch == 0 || self.val_every == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch_size, iters_per_epoch and val_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must satisfy 0 <= min_lr <= lr, got {} and {}",
                self.min_lr, self.lr
            )));
        }
        Ok(())
    }

    fn optimizer(&self, model: &Model) -> AdamW {
        AdamW::new(
            AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            model.params(),
        )
    }

    fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
    /// Mean loss components, for scribble-supervised dual training.
    pub components: Option<LossBundle>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best model by validation DSC, or the final one without validation data.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_dsc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Tracks the best validation DSC and the model that reached it.
struct Selector<'a> {
    val: &'a [Example],
    tile: usize,
    best: Option<(f64, usize, Model)>,
}

impl<'a> Selector<'a> {
    fn new(val: &'a [Example], tile: usize) -> Self {
        Self { val, tile, best: None }
    }

    fn observe(&mut self, epoch: usize, model: &Model) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let dsc = mean_dsc(model, self.val, self.tile)?;
        if self.best.as_ref().is_none_or(|(b, _, _)| dsc > *b) {
            self.best = Some((dsc, epoch, model.clone()));
        }
        Ok(Some(dsc))
    }

    fn finish(self, last: Model, epochs: usize, history: Vec<EpochRecord>) -> TrainOutcome {
        match self.best {
            Some((dsc, epoch, model)) => TrainOutcome {
                model,
                best_epoch: epoch,
                best_val_dsc: Some(dsc),
                history,
            },
            None => TrainOutcome {
                model: last,
                best_epoch: epochs,
                best_val_dsc: None,
                history,
            },
        }
    }
}

fn is_val_epoch(cfg: &TrainConfig, epoch: usize) -> bool {
    epoch.is_multiple_of(cfg.val_every) || epoch == cfg.epochs
}

/// Examples that carry a full annotation.
fn labeled_only(examples: &[Example]) -> Vec<&Example> {
    examples.iter().filter(|e| e.label.is_some()).collect()
}

/// Random labeled patches, weak and optionally strong augmented.
pub fn labeled_batch<R: Rng + ?Sized>(labeled: &[&Example], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<PatchSample>> {
    if labeled.is_empty() {
        return Err(Error::EmptyPool("labeled"));
    }
    (0..cfg.batch_size)
        .map(|_| {
            let ex = labeled[rng.random_range(0..labeled.len())];
            let label = ex.label.as_ref().expect("labeled example").as_map();
            let p = sample_patch(&ex.sequence, label, cfg.patch_size, PatchSource::Labeled, rng)?;
            let p = weak_augment(&p, &cfg.augment.weak, rng);
            Ok(if cfg.strong_labeled {
                strong_augment(&p, &cfg.augment.strong, rng)
            } else {
                p
            })
        })
        .collect()
}

/// One Dice+CE step on a batch of label patches; returns the loss.
pub fn supervised_step(model: &mut Model, opt: &mut AdamW, batch: &[PatchSample], lr: f64) -> Result<f64> {
    let (x, y) = batch_tensors(batch)?;
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &x)?;
    let loss = graph_dice_ce(&mut g, logits, &y);
    let value = g.value(loss).item();
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads, model.params());
    drop(g);
    opt.step(model.params_mut(), &pg, lr);
    Ok(value)
}

/// Fully-supervised training of `model` on batches from `next_batch`, with
/// cosine-annealed AdamW and best-DSC selection on `val`.
pub fn train_with_batches<R, F>(
    mut model: Model,
    val: &[Example],
    cfg: &TrainConfig,
    rng: &mut R,
    mut next_batch: F,
) -> Result<TrainOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<Vec<PatchSample>>,
{
    cfg.validate()?;
    let mut opt = cfg.optimizer(&model);
    let total = cfg.total_steps();
    let mut selector = Selector::new(val, cfg.tile);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for _ in 0..cfg.iters_per_epoch {
            lr = cosine_lr(cfg.lr, cfg.min_lr, step, total);
            let batch = next_batch(rng)?;
            loss_sum += supervised_step(&mut model, &mut opt, &batch, lr)?;
            step += 1;
        }
        let val_dsc = if is_val_epoch(cfg, epoch) {
            selector.observe(epoch, &model)?
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / cfg.iters_per_epoch as f64,
            val_dsc,
            components: None,
        };
        log::debug!("epoch {epoch} loss {:.5} val_dsc {:?}", record.train_loss, val_dsc);
        history.push(record);
    }
    Ok(selector.finish(model, cfg.epochs, history))
}

/// Fully-supervised training from a fresh model.
pub fn train_fss<R: Rng + ?Sized>(
    model_cfg: &ModelConfig,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    let labeled = labeled_only(train);
    if labeled.is_empty() {
        return Err(Error::EmptyDataset("no labeled training sequences".into()));
    }
    let model = Model::new(model_cfg.clone(), rng)?;
    train_with_batches(model, val, cfg, rng, |r| labeled_batch(&labeled, cfg, r))
}

#[derive(Clone, Debug)]
pub struct WssOutcome {
    /// Network A (the one used for evaluation), selected by validation DSC.
    pub outcome: TrainOutcome,
    /// Final network B for the dual variant.
    pub net_b: Option<Model>,
}

fn scribble_patches<R: Rng + ?Sized>(scribbled: &[&Example], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<PatchSample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let ex = scribbled[rng.random_range(0..scribbled.len())];
            let s = ex.scribble.as_ref().expect("scribbled example").as_map();
            sample_patch(&ex.sequence, s, cfg.patch_size, PatchSource::Labeled, rng)
        })
        .collect()
}

/// Scribble-supervised training. The pCE variant trains one network on
/// weakly augmented patches; the SSCR variant trains two networks jointly
/// and reports network A.
pub fn train_wss<R: Rng + ?Sized>(
    model_cfg: &ModelConfig,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    wss: &WssConfig,
    rng: &mut R,
) -> Result<WssOutcome> {
    cfg.validate()?;
    let scribbled: Vec<&Example> = train.iter().filter(|e| e.scribble.is_some()).collect();
    if scribbled.is_empty() {
        return Err(Error::EmptyDataset("no scribble-annotated training sequences".into()));
    }
    let total = cfg.total_steps();
    let mut selector = Selector::new(val, cfg.tile);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    match wss.variant {
        WssVariant::Pce => {
            let mut model = Model::new(model_cfg.clone(), rng)?;
            let mut opt = cfg.optimizer(&model);
            for epoch in 1..=cfg.epochs {
                let mut loss_sum = 0.0;
                let mut lr = cfg.lr;
                for _ in 0..cfg.iters_per_epoch {
                    lr = cosine_lr(cfg.lr, cfg.min_lr, step, total);
                    let batch: Vec<PatchSample> = scribble_patches(&scribbled, cfg, rng)?
                        .iter()
                        .map(|p| weak_augment(p, &cfg.augment.weak, rng))
                        .collect();
                    let (x, y) = batch_tensors(&batch)?;
                    let mut g = Graph::new();
                    let logits = model.forward(&mut g, &x)?;
                    let loss = graph_pce(&mut g, logits, &y, wss.normalize_pce);
                    loss_sum += g.value(loss).item();
                    let grads = g.backward(loss);
                    let pg = g.param_grads(&grads, model.params());
                    drop(g);
                    opt.step(model.params_mut(), &pg, lr);
                    step += 1;
                }
                let val_dsc = if is_val_epoch(cfg, epoch) {
                    selector.observe(epoch, &model)?
                } else {
                    None
                };
                history.push(EpochRecord {
                    epoch,
                    lr,
                    train_loss: loss_sum / cfg.iters_per_epoch as f64,
                    val_dsc,
                    components: None,
                });
            }
            Ok(WssOutcome {
                outcome: selector.finish(model, cfg.epochs, history),
                net_b: None,
            })
        }
        WssVariant::Sscr => {
            let mut net_a = Model::new(model_cfg.clone(), rng)?;
            let mut net_b = Model::new(model_cfg.clone(), rng)?;
            let mut opt_a = cfg.optimizer(&net_a);
            let mut opt_b = cfg.optimizer(&net_b);
            for epoch in 1..=cfg.epochs {
                let mut sums = [0.0; 4];
                let mut lr = cfg.lr;
                for _ in 0..cfg.iters_per_epoch {
                    lr = cosine_lr(cfg.lr, cfg.min_lr, step, total);
                    let patches = scribble_patches(&scribbled, cfg, rng)?;
                    let batch = prepare_sscr_batch(&patches, &cfg.augment, wss.strong_for_b, rng)?;
                    let progress = step as f64 / cfg.iters_per_epoch as f64;
                    let weights = wss.at_progress(progress);
                    let b = sscr_step(&mut net_a, &mut net_b, &mut opt_a, &mut opt_b, &batch, &weights, lr)?;
                    assert!(b.is_consistent(), "loss composition identity violated");
                    for (s, v) in sums.iter_mut().zip([b.l_scr, b.l_cps, b.l_con, b.l_total]) {
                        *s += v;
                    }
                    step += 1;
                }
                let n = cfg.iters_per_epoch as f64;
                let weights = wss.at_progress(step as f64 / cfg.iters_per_epoch as f64);
                let mean = LossBundle::compose(sums[0] / n, sums[1] / n, sums[2] / n, weights.lambda1, weights.lambda2);
                let val_dsc = if is_val_epoch(cfg, epoch) {
                    selector.observe(epoch, &net_a)?
                } else {
                    None
                };
                history.push(EpochRecord {
                    epoch,
                    lr,
                    train_loss: sums[3] / n,
                    val_dsc,
                    components: Some(mean),
                });
            }
            Ok(WssOutcome {
                outcome: selector.finish(net_a, cfg.epochs, history),
                net_b: Some(net_b),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::weights_digest;
    use crate::model::Architecture;
    use crate::tools::{generate_rdfa, synthesize_sequence, RdfaConfig, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn examples(n: usize, size: usize, seed: u64) -> Vec<Example> {
        let spec = SynthSpec {
            size,
            frames: 4,
            tree_depth: 3,
            root_radius: 1.2,
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (sequence, label) = synthesize_sequence(&format!("p{i}/s{i}"), &spec, &mut rng).unwrap();
                let scribble = generate_rdfa(&label, &RdfaConfig::default(), &mut rng).unwrap();
                Example {
                    sequence,
                    label: Some(label),
                    scribble: Some(scribble),
                }
            })
            .collect()
    }

    fn tiny() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            architecture: Architecture::Dr2d,
            seq_len: 4,
            channels: vec![4, 8],
            ..ModelConfig::default()
        };
        let t = TrainConfig {
            epochs: 2,
            batch_size: 2,
            iters_per_epoch: 2,
            patch_size: 16,
            tile: 16,
            ..TrainConfig::default()
        };
        (m, t)
    }

    #[test]
    fn fss_history_and_selection() {
        let (m, t) = tiny();
        let data = examples(2, 32, 0);
        let out = train_fss(&m, &data, &data, &t, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.history.len(), 2);
        let best = out.history.iter().filter_map(|r| r.val_dsc).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_dsc, Some(best));
        assert!(out.history.iter().all(|r| r.train_loss.is_finite()));
    }

    #[test]
    fn fss_is_deterministic() {
        let (m, t) = tiny();
        let data = examples(2, 32, 0);
        let a = train_fss(&m, &data, &[], &t, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = train_fss(&m, &data, &[], &t, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(weights_digest(&a.model), weights_digest(&b.model));
        assert_eq!(a.best_val_dsc, None);
    }

    #[test]
    fn unlabeled_training_set_rejected() {
        let (m, t) = tiny();
        let mut data = examples(1, 32, 0);
        data[0].label = None;
        data[0].scribble = None;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(train_fss(&m, &data, &[], &t, &mut rng), Err(Error::EmptyDataset(_))));
        let wss = WssConfig::default();
        assert!(matches!(train_wss(&m, &data, &[], &t, &wss, &mut rng), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn wss_variants_run() {
        let (m, t) = tiny();
        let data = examples(2, 32, 3);
        for variant in [WssVariant::Pce, WssVariant::Sscr] {
            let wss = WssConfig {
                variant,
                ..WssConfig::default()
            };
            let out = train_wss(&m, &data, &data, &t, &wss, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(out.net_b.is_some(), variant == WssVariant::Sscr);
            for r in &out.outcome.history {
                assert_eq!(r.components.is_some(), variant == WssVariant::Sscr);
                if let Some(c) = &r.components {
                    assert!(c.is_consistent());
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let (m, mut t) = tiny();
        t.epochs = 0;
        let data = examples(1, 32, 0);
        assert!(train_fss(&m, &data, &[], &t, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
