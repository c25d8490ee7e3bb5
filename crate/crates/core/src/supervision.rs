//! Loss functions, scribble pseudo-labels and the dual-network scribble
//! trainer (SSCR: scribble supervision plus consistency regularisation).
//!
//! Every loss comes in two forms: a plain function over probability maps
//! `[2, H, W]`, and a graph builder over logits `[N, 2, H, W]` used during
//! training. Batched graph losses pool pixels across the batch, except the
//! Dice term which is averaged per sample.

use dias_tensor::{log_softmax_channels, AdamW, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_weak, strong_augment, AugmentConfig, PatchSample, WeakDraw};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::types::{ScribbleMask, VesselMask, BACKGROUND, UNANNOTATED, VESSEL};

/// Probabilities are clamped to this before taking logs.
pub const PROB_EPS: f64 = 1e-12;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_scr: f64,
    pub l_cps: f64,
    pub l_con: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBundle {
    pub fn compose(l_scr: f64, l_cps: f64, l_con: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            l_scr,
            l_cps,
            l_con,
            l_total: l_scr + lambda1 * l_cps + lambda2 * l_con,
            lambda1,
            lambda2,
        }
    }

    /// Exact composition check, bit for bit.
    pub fn is_consistent(&self) -> bool {
        self.l_total == self.l_scr + self.lambda1 * self.l_cps + self.lambda2 * self.l_con
    }
}

fn check_pred(pred: &Tensor, h: usize, w: usize) -> Result<()> {
    if pred.shape() != [2, h, w] {
        return Err(Error::shape([2, h, w], pred.shape()));
    }
    Ok(())
}

fn nll(p: f64) -> f64 {
    -p.max(PROB_EPS).ln()
}

/// Mean pixel cross-entropy of `[2, H, W]` probabilities against hard labels.
pub fn ce_loss(pred: &Tensor, target: &VesselMask) -> Result<f64> {
    let (h, w) = (target.height(), target.width());
    check_pred(pred, h, w)?;
    let hw = h * w;
    let d = pred.data();
    let total: f64 = target.pixels().iter().enumerate().map(|(i, &c)| nll(d[c as usize * hw + i])).sum();
    Ok(total / hw as f64)
}

/// `0.5 * soft Dice loss on the vessel channel + 0.5 * pixel cross-entropy`.
pub fn dice_ce_loss(pred: &Tensor, target: &VesselMask) -> Result<f64> {
    let ce = ce_loss(pred, target)?;
    let hw = target.height() * target.width();
    let p1 = &pred.data()[hw..];
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    for (i, &c) in target.pixels().iter().enumerate() {
        let y = f64::from(c == VESSEL);
        inter += p1[i] * y;
        psum += p1[i];
        ysum += y;
    }
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + ysum + DICE_SMOOTH);
    Ok(0.5 * dice + 0.5 * ce)
}

/// Partial cross-entropy over annotated pixels. Unannotated pixels add
/// nothing; an empty annotation gives 0.
pub fn pce_loss(pred: &Tensor, scribble: &ScribbleMask, normalize: bool) -> Result<f64> {
    let (h, w) = (scribble.height(), scribble.width());
    check_pred(pred, h, w)?;
    let hw = h * w;
    let d = pred.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &c) in scribble.pixels().iter().enumerate() {
        if c != UNANNOTATED {
            total += nll(d[c as usize * hw + i]);
            count += 1;
        }
    }
    Ok(match (count, normalize) {
        (0, _) => 0.0,
        (n, true) => total / n as f64,
        (_, false) => total,
    })
}

/// Scribble pixels keep their class; every other pixel takes the argmax of
/// the two class channels, ties going to background.
pub fn make_pseudo_label(pred: &Tensor, scribble: &ScribbleMask) -> Result<VesselMask> {
    let (h, w) = (scribble.height(), scribble.width());
    check_pred(pred, h, w)?;
    let hw = h * w;
    let d = pred.data();
    let pixels = scribble
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &c)| if c != UNANNOTATED { c } else { argmax_label(d[i], d[hw + i]) })
        .collect();
    VesselMask::new(h, w, pixels)
}

fn argmax_label(score0: f64, score1: f64) -> u8 {
    if score1 > score0 {
        VESSEL
    } else {
        BACKGROUND
    }
}

/// Mean squared difference of two one-hot label maps over both channels.
pub fn one_hot_mse(a: &VesselMask, b: &VesselMask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape((a.height(), a.width()), (b.height(), b.width())));
    }
    let differ = a.pixels().iter().zip(b.pixels()).filter(|(x, y)| x != y).count();
    // each disagreeing pixel is off by one in both channels
    Ok(2.0 * differ as f64 / (2 * a.pixels().len()) as f64)
}

/// SSCR loss components for one pair of aligned probability maps.
pub fn sscr_loss_bundle(pa: &Tensor, pb: &Tensor, scribble: &ScribbleMask, cfg: &WssConfig) -> Result<LossBundle> {
    let pl_a = make_pseudo_label(pa, scribble)?;
    let pl_b = make_pseudo_label(pb, scribble)?;
    let l_scr = 0.5 * (pce_loss(pa, scribble, cfg.normalize_pce)? + pce_loss(pb, scribble, cfg.normalize_pce)?);
    let l_cps = 0.5 * (ce_loss(pa, &pl_b)? + ce_loss(pb, &pl_a)?);
    let l_con = if cfg.con_on_probs {
        pa.data().iter().zip(pb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.numel() as f64
    } else {
        one_hot_mse(&pl_a, &pl_b)?
    };
    Ok(LossBundle::compose(l_scr, l_cps, l_con, cfg.lambda1, cfg.lambda2))
}

/// Per-class indicator weights `[N, 2, H, W]` for labels over `N * H * W`
/// pixels; unannotated pixels get zero in both channels.
fn class_weights(labels: &[u8], n: usize, hw: usize) -> (Tensor, usize) {
    let mut wts = vec![0.0; n * 2 * hw];
    let mut count = 0;
    for s in 0..n {
        for p in 0..hw {
            let c = labels[s * hw + p];
            if c != UNANNOTATED {
                wts[(s * 2 + c as usize) * hw + p] = 1.0;
                count += 1;
            }
        }
    }
    (Tensor::from_vec(&[n, 2, hw], wts), count)
}

fn logits_dims(g: &Graph, logits: Var, labels: &[u8]) -> (usize, usize) {
    let (n, c, h, w) = g.value(logits).dims4();
    assert_eq!(c, 2, "binary logits expected");
    assert_eq!(labels.len(), n * h * w, "one label per pixel");
    (n, h * w)
}

/// Cross-entropy restricted to annotated pixels, pooled over the batch.
/// With `normalize` the sum is divided by the annotated count.
pub fn graph_pce(g: &mut Graph, logits: Var, labels: &[u8], normalize: bool) -> Var {
    let (n, hw) = logits_dims(g, logits, labels);
    let (wts, count) = class_weights(labels, n, hw);
    if count == 0 {
        return g.input(Tensor::scalar(0.0));
    }
    let logp = g.log_softmax_channels(logits);
    let picked = g.mul_const(logp, wts.into_reshape(g.shape(logits)));
    let total = g.sum(picked);
    let scale = if normalize { 1.0 / count as f64 } else { 1.0 };
    g.mul_scalar(total, -scale)
}

/// Mean cross-entropy against hard labels over every pixel of the batch.
pub fn graph_ce(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    debug_assert!(labels.iter().all(|&c| c != UNANNOTATED));
    graph_pce(g, logits, labels, true)
}

/// Dice + cross-entropy, equal weights; Dice averaged per sample.
pub fn graph_dice_ce(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let (n, hw) = logits_dims(g, logits, labels);
    let ce = graph_ce(g, logits, labels);
    let probs = g.softmax_channels(logits);
    let vessel = g.narrow_channels(probs, 1, 1);
    let mut dice_sum: Option<Var> = None;
    for s in 0..n {
        let ys = &labels[s * hw..(s + 1) * hw];
        let y: Vec<f64> = ys.iter().map(|&c| f64::from(c == VESSEL)).collect();
        let ysum: f64 = y.iter().sum();
        let ps = g.narrow_batch(vessel, s, 1);
        let inter = g.mul_const(ps, Tensor::from_vec(g.shape(ps), y));
        let inter = g.sum(inter);
        let num = g.mul_scalar(inter, 2.0);
        let num = g.add_scalar(num, DICE_SMOOTH);
        let den = g.sum(ps);
        let den = g.add_scalar(den, ysum + DICE_SMOOTH);
        let ratio = g.div(num, den);
        let loss = g.one_minus(ratio);
        dice_sum = Some(match dice_sum {
            None => loss,
            Some(acc) => g.add(acc, loss),
        });
    }
    let dice = g.mul_scalar(dice_sum.expect("nonempty batch"), 0.5 / n as f64);
    let ce = g.mul_scalar(ce, 0.5);
    g.add(dice, ce)
}

/// Pseudo-labels for a batch of logits `[N, 2, H, W]` and flat scribbles.
pub fn pseudo_labels_from_logits(logits: &Tensor, scribbles: &[u8]) -> Vec<u8> {
    let (n, _, h, w) = logits.dims4();
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let c = scribbles[s * hw + p];
            out.push(if c != UNANNOTATED {
                c
            } else {
                // softmax is monotone, so comparing logits is comparing probabilities
                argmax_label(d[(s * 2) * hw + p], d[(s * 2 + 1) * hw + p])
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WssVariant {
    /// One network trained with partial cross-entropy only.
    Pce,
    /// Two networks with scribble supervision, cross pseudo supervision and
    /// consistency regularisation.
    Sscr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WssConfig {
    pub variant: WssVariant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub normalize_pce: bool,
    /// Consistency on softmax probabilities instead of one-hot pseudo-labels.
    pub con_on_probs: bool,
    /// Net B sees weak plus strong augmentation; otherwise weak only.
    pub strong_for_b: bool,
    /// Epochs over which both lambdas ramp up along `exp(-5 (1 - t)^2)`;
    /// 0 uses the full weights from the first step.
    pub rampup_epochs: usize,
}

impl WssConfig {
    /// Scale applied to both lambdas at a fractional epoch position.
    pub fn rampup_factor(&self, epoch_progress: f64) -> f64 {
        if self.rampup_epochs == 0 {
            return 1.0;
        }
        let t = (epoch_progress / self.rampup_epochs as f64).clamp(0.0, 1.0);
        (-5.0 * (1.0 - t) * (1.0 - t)).exp()
    }

    /// A copy whose lambdas are scaled for the given training position.
    pub fn at_progress(&self, epoch_progress: f64) -> Self {
        let f = self.rampup_factor(epoch_progress);
        Self {
            lambda1: self.lambda1 * f,
            lambda2: self.lambda2 * f,
            ..self.clone()
        }
    }
}

impl Default for WssConfig {
    fn default() -> Self {
        Self {
            variant: WssVariant::Sscr,
            lambda1: 1.0,
            lambda2: 0.5,
            normalize_pce: true,
            con_on_probs: false,
            strong_for_b: true,
            rampup_epochs: 0,
        }
    }
}

/// One augmented scribble batch for both networks. The two views come from
/// independent weak draws, so labels are carried between them with exact
/// pixel permutations.
pub struct SscrBatch {
    pub inputs_a: Tensor,
    pub inputs_b: Tensor,
    pub scribble_a: Vec<u8>,
    pub scribble_b: Vec<u8>,
    /// For every pixel of view B (flat over the batch), its pixel in view A.
    pub b_to_a: Vec<usize>,
    /// For every pixel of view A, its pixel in view B.
    pub a_to_b: Vec<usize>,
}

fn stack_patches(patches: &[PatchSample]) -> (Tensor, Vec<u8>) {
    let (f, h, w) = (patches[0].frames(), patches[0].height(), patches[0].width());
    let mut data = Vec::with_capacity(patches.len() * f * h * w);
    let mut labels = Vec::with_capacity(patches.len() * h * w);
    for p in patches {
        data.extend_from_slice(p.seq_patch.data());
        labels.extend_from_slice(&p.label_patch.pixels);
    }
    (Tensor::from_vec(&[patches.len(), f, h, w], data), labels)
}

/// Stacks patches into a `[N, F, h, w]` input and flat labels.
pub fn batch_tensors(patches: &[PatchSample]) -> Result<(Tensor, Vec<u8>)> {
    let first = patches.first().ok_or(Error::EmptyPool("batch"))?;
    let dims = (first.frames(), first.height(), first.width());
    if let Some(p) = patches.iter().find(|p| (p.frames(), p.height(), p.width()) != dims) {
        return Err(Error::shape(dims, (p.frames(), p.height(), p.width())));
    }
    Ok(stack_patches(patches))
}

pub fn prepare_sscr_batch<R: Rng + ?Sized>(
    patches: &[PatchSample],
    aug: &AugmentConfig,
    strong_for_b: bool,
    rng: &mut R,
) -> Result<SscrBatch> {
    batch_tensors(patches)?;
    let size = patches[0].height();
    if patches[0].width() != size {
        return Err(Error::InvalidArgument("scribble patches must be square".into()));
    }
    let hw = size * size;
    let strong = aug.strong.without_elastic();
    let mut view_a = Vec::with_capacity(patches.len());
    let mut view_b = Vec::with_capacity(patches.len());
    let mut b_to_a = Vec::with_capacity(patches.len() * hw);
    let mut a_to_b = vec![0usize; patches.len() * hw];
    for (s, p) in patches.iter().enumerate() {
        let da = WeakDraw::sample(&aug.weak, rng);
        let db = WeakDraw::sample(&aug.weak, rng);
        view_a.push(apply_weak(p, &da));
        let b = apply_weak(p, &db);
        view_b.push(if strong_for_b { strong_augment(&b, &strong, rng) } else { b });
        let (map_a, map_b) = (da.index_map(size), db.index_map(size));
        let mut inv_a = vec![0usize; hw];
        for (q, &src) in map_a.iter().enumerate() {
            inv_a[src] = q;
        }
        for (q, &src) in map_b.iter().enumerate() {
            let qa = inv_a[src];
            b_to_a.push(s * hw + qa);
            a_to_b[s * hw + qa] = s * hw + q;
        }
    }
    let (inputs_a, scribble_a) = stack_patches(&view_a);
    let (inputs_b, scribble_b) = stack_patches(&view_b);
    Ok(SscrBatch {
        inputs_a,
        inputs_b,
        scribble_a,
        scribble_b,
        b_to_a,
        a_to_b,
    })
}

/// Builds the full SSCR objective on one graph over both networks and
/// returns the total loss node with its components. Pseudo-labels are
/// computed from values and enter the graph as constants.
pub fn sscr_objective(
    g: &mut Graph,
    net_a: &Model,
    net_b: &Model,
    batch: &SscrBatch,
    cfg: &WssConfig,
) -> Result<(Var, LossBundle)> {
    let la = net_a.forward(g, &batch.inputs_a)?;
    let lb = net_b.forward(g, &batch.inputs_b)?;
    let pl_a = pseudo_labels_from_logits(g.value(la), &batch.scribble_a);
    let pl_b = pseudo_labels_from_logits(g.value(lb), &batch.scribble_b);
    // carry each network's pseudo-labels into the other view
    let pl_b_in_a: Vec<u8> = batch.a_to_b.iter().map(|&q| pl_b[q]).collect();
    let pl_a_in_b: Vec<u8> = batch.b_to_a.iter().map(|&q| pl_a[q]).collect();

    let scr_a = graph_pce(g, la, &batch.scribble_a, cfg.normalize_pce);
    let scr_b = graph_pce(g, lb, &batch.scribble_b, cfg.normalize_pce);
    let scr = g.add(scr_a, scr_b);
    let scr = g.mul_scalar(scr, 0.5);

    let cps_a = graph_ce(g, la, &pl_b_in_a);
    let cps_b = graph_ce(g, lb, &pl_a_in_b);
    let cps = g.add(cps_a, cps_b);
    let cps = g.mul_scalar(cps, 0.5);

    let con = if cfg.con_on_probs {
        let (n, _, h, w) = g.value(la).dims4();
        let hw = h * w;
        let pa = g.softmax_channels(la);
        let pb = g.softmax_channels(lb);
        let idx: Vec<usize> = (0..n * 2 * hw)
            .map(|k| {
                let (s, c, p) = (k / (2 * hw), (k / hw) % 2, k % hw);
                let q = batch.a_to_b[s * hw + p] % hw;
                (s * 2 + c) * hw + q
            })
            .collect();
        let pb_in_a = g.gather(pb, idx, &[n, 2, h, w]);
        let diff = g.sub(pa, pb_in_a);
        let sq = g.mul(diff, diff);
        g.mean(sq)
    } else {
        let differ = pl_a.iter().zip(&pl_b_in_a).filter(|(x, y)| x != y).count();
        g.input(Tensor::scalar(differ as f64 / pl_a.len() as f64))
    };

    let weighted_cps = g.mul_scalar(cps, cfg.lambda1);
    let total = g.add(scr, weighted_cps);
    let weighted_con = g.mul_scalar(con, cfg.lambda2);
    let total = g.add(total, weighted_con);
    let bundle = LossBundle::compose(
        g.value(scr).item(),
        g.value(cps).item(),
        g.value(con).item(),
        cfg.lambda1,
        cfg.lambda2,
    );
    assert!(
        bundle.l_total == g.value(total).item(),
        "loss composition drifted: {} vs {}",
        bundle.l_total,
        g.value(total).item()
    );
    Ok((total, bundle))
}

/// One optimisation step on both networks.
pub fn sscr_step(
    net_a: &mut Model,
    net_b: &mut Model,
    opt_a: &mut AdamW,
    opt_b: &mut AdamW,
    batch: &SscrBatch,
    cfg: &WssConfig,
    lr: f64,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let (total, bundle) = sscr_objective(&mut g, net_a, net_b, batch, cfg)?;
    let grads = g.backward(total);
    let ga = g.param_grads(&grads, net_a.params());
    let gb = g.param_grads(&grads, net_b.params());
    drop(g);
    opt_a.step(net_a.params_mut(), &ga, lr);
    opt_b.step(net_b.params_mut(), &gb, lr);
    debug_assert!(bundle.is_consistent());
    Ok(bundle)
}

/// Softmax probabilities of `[1, 2, H, W]` logits as `[2, H, W]`.
pub fn probs_of_logits(logits: &Tensor) -> Tensor {
    let (_, c, h, w) = logits.dims4();
    log_softmax_channels(logits).map(f64::exp).into_reshape(&[c, h, w])
}
