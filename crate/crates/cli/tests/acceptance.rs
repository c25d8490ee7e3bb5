//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p dias-cli --test acceptance -- 1 4 10`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dias_core::augment::{sample_patch, AugmentConfig, PatchSource};
use dias_core::data::{zscore_normalize, Example};
use dias_core::eval::{auc, confusion, count_components, mean_dsc, metrics_for, scalar_metrics, vascular_connectivity};
use dias_core::model::{dr_wrap_2d, dr_wrap_3d, vssnet_forward, Architecture, ConvGruCell, Model, ModelConfig};
use dias_core::selftrain::{pseudo_label_pool, rpst_batch, rpst_train, RpstConfig};
use dias_core::supervision::{
    ce_loss, graph_dice_ce, make_pseudo_label, pce_loss, prepare_sscr_batch, pseudo_labels_from_logits,
    sscr_objective, LossBundle, SscrBatch, WssConfig, WssVariant,
};
use dias_core::tools::{generate_rdfa, project, synthesize_sequence, ProjectionMode, RdfaConfig, SynthSpec};
use dias_core::train::{train_fss, train_wss, TrainConfig};
use dias_core::types::{ProbabilityMap, ScribbleMask, VesselMask, BACKGROUND, UNANNOTATED, VESSEL};
use dias_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// synthetic data, z-scored the way the loader does it

fn raw_set(n: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng, tag: &str, rdfa: Option<&RdfaConfig>) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let (sequence, mask) = synthesize_sequence(&format!("{tag}{i:03}/s000"), spec, rng).expect("synthesize");
            let scribble = rdfa.map(|c| generate_rdfa(&mask, c, rng).expect("rdfa"));
            Example {
                sequence,
                label: Some(mask),
                scribble,
            }
        })
        .collect()
}

fn normalized(ex: &[Example]) -> Vec<Example> {
    ex.iter()
        .map(|e| Example {
            sequence: zscore_normalize(&e.sequence),
            ..e.clone()
        })
        .collect()
}

fn projected(ex: &[Example], mode: ProjectionMode) -> Vec<Example> {
    ex.iter()
        .map(|e| Example {
            sequence: zscore_normalize(&project(&e.sequence, mode).expect("project")),
            ..e.clone()
        })
        .collect()
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        iters_per_epoch: 1,
        patch_size: 32,
        tile: 32,
        lr: 2e-3,
        min_lr: 2e-5,
        val_every: 5,
        ..TrainConfig::default()
    }
}

// 1. ConvGRU against a scalar implementation

fn c1_convgru_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let c = rng.random_range(1..=3);
        let mut store = ParamStore::new();
        let cell = ConvGruCell::new(&mut store, "gru", c, 3, true, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-1.5..1.5);
            }
        }
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let with_state = case % 4 != 0;

        let mut g = Graph::new();
        let xv = g.input(Tensor::from_vec(&[1, c, 1, 1], x.clone()));
        let hv = with_state.then(|| g.input(Tensor::from_vec(&[1, c, 1, 1], h.clone())));
        let out = cell.step(&mut g, &store, xv, hv);
        let got = g.value(out).data().to_vec();

        // only the centre tap of a 3x3 kernel sees a 1x1 grid
        let tap = |id, o: usize, i: usize| store.get(id).data()[((o * c + i) * 3 + 1) * 3 + 1];
        let bias = |k: usize, o: usize| cell.biases.map_or(0.0, |b| store.get(b[k]).data()[o]);
        let h0: Vec<f64> = if with_state { h.clone() } else { vec![0.0; c] };
        let lin = |w, u, hh: &[f64], o: usize| -> f64 {
            (0..c).map(|i| tap(w, o, i) * x[i] + tap(u, o, i) * hh[i]).sum()
        };
        let z: Vec<f64> = (0..c).map(|o| sigmoid(lin(cell.w_z, cell.u_z, &h0, o) + bias(0, o))).collect();
        let r: Vec<f64> = (0..c).map(|o| sigmoid(lin(cell.w_r, cell.u_r, &h0, o) + bias(1, o))).collect();
        let rh: Vec<f64> = (0..c).map(|i| r[i] * h0[i]).collect();
        for o in 0..c {
            let cand = (lin(cell.w_h, cell.u_h, &rh, o) + bias(2, o)).tanh();
            let want = (1.0 - z[o]) * h0[o] + z[o] * cand;
            worst = worst.max((want - got[o]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max abs error {worst:e} over 100 cells"))?;
    Ok(format!("100 parameterisations, max abs error {worst:.1e}"))
}

// 2. gradients against central differences

struct GradStats {
    checked: usize,
    skipped: usize,
    worst: f64,
}

fn grad_matches(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    // an absolute floor for entries that are zero up to rounding
    (diff <= 1e-3 * scale || diff <= 1e-9, if scale > 1e-6 { diff / scale } else { 0.0 })
}

/// Up to `per_tensor` random entries of every parameter tensor.
fn sample_entries(store: &ParamStore, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        for _ in 0..per_tensor.min(n) {
            out.push((t, rng.random_range(0..n)));
        }
    }
    out
}

fn nudge(model: &mut Model, tensor: usize, entry: usize, delta: f64) {
    let id = model.params().ids().nth(tensor).expect("tensor index");
    model.params_mut().get_mut(id).data_mut()[entry] += delta;
}

/// Moves every parameter off its initial value. Zero-initialised biases put
/// pixels with an all-zero receptive field exactly on a ReLU kink, where
/// central differences average the two one-sided slopes.
fn jitter(model: &mut Model, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
}

fn check_vssnet_gradients(rng: &mut ChaCha8Rng) -> Result<GradStats, String> {
    let cfg = ModelConfig {
        channels: vec![4, 4],
        seq_len: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, rng).map_err(err)?;
    jitter(&mut model, rng);
    let x = Tensor::randn(&[1, 4, 16, 16], 1.0, rng);
    let labels: Vec<u8> = (0..256).map(|_| rng.random_range(0..2)).collect();
    let loss = |m: &Model| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let logits = m.forward(&mut g, &x).expect("forward");
        let l = graph_dice_ce(&mut g, logits, &labels);
        let grads = g.backward(l);
        (g.value(l).item(), g.param_grads(&grads, m.params()))
    };
    let (_, analytic) = loss(&model);
    let eps = 1e-5;
    let mut stats = GradStats {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for (t, k) in sample_entries(model.params(), 6, rng) {
        nudge(&mut model, t, k, eps);
        let up = loss(&model).0;
        nudge(&mut model, t, k, -2.0 * eps);
        let down = loss(&model).0;
        nudge(&mut model, t, k, eps);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[t].data()[k];
        let (ok, rel) = grad_matches(a, numeric);
        ensure(ok, || format!("VSS-Net tensor {t} entry {k}: analytic {a:e} numeric {numeric:e}"))?;
        stats.worst = stats.worst.max(rel);
        stats.checked += 1;
    }
    Ok(stats)
}

fn sscr_batch_for_check(rng: &mut ChaCha8Rng) -> SscrBatch {
    let spec = SynthSpec {
        size: 32,
        frames: 4,
        tree_depth: 3,
        root_radius: 1.2,
        ..SynthSpec::default()
    };
    let ex = normalized(&raw_set(2, &spec, rng, "g", Some(&RdfaConfig::default())));
    let patches: Vec<_> = ex
        .iter()
        .map(|e| {
            let s = e.scribble.as_ref().expect("scribble");
            sample_patch(&e.sequence, s.as_map(), 16, PatchSource::Labeled, rng).expect("patch")
        })
        .collect();
    prepare_sscr_batch(&patches, &AugmentConfig::default(), true, rng).expect("sscr batch")
}

fn pseudo_labels(a: &Model, b: &Model, batch: &SscrBatch) -> (Vec<u8>, Vec<u8>) {
    let mut g = Graph::new();
    let la = a.forward(&mut g, &batch.inputs_a).expect("forward a");
    let lb = b.forward(&mut g, &batch.inputs_b).expect("forward b");
    (
        pseudo_labels_from_logits(g.value(la), &batch.scribble_a),
        pseudo_labels_from_logits(g.value(lb), &batch.scribble_b),
    )
}

/// The SSCR objective over both networks. Pseudo-labels are constants of
/// the objective, so a finite difference is only meaningful when the nudge
/// leaves every pseudo-label unchanged; other entries are counted as skipped.
fn check_sscr_gradients(con_on_probs: bool, rng: &mut ChaCha8Rng) -> Result<GradStats, String> {
    let cfg = ModelConfig {
        channels: vec![4, 4],
        seq_len: 4,
        ..ModelConfig::default()
    };
    let mut nets = [Model::new(cfg.clone(), rng).map_err(err)?, Model::new(cfg, rng).map_err(err)?];
    for net in &mut nets {
        jitter(net, rng);
    }
    let batch = sscr_batch_for_check(rng);
    let wss = WssConfig {
        con_on_probs,
        ..WssConfig::default()
    };
    let objective = |a: &Model, b: &Model| -> (f64, LossBundle, Vec<Tensor>, Vec<Tensor>) {
        let mut g = Graph::new();
        let (total, bundle) = sscr_objective(&mut g, a, b, &batch, &wss).expect("objective");
        let grads = g.backward(total);
        let ga = g.param_grads(&grads, a.params());
        let gb = g.param_grads(&grads, b.params());
        (g.value(total).item(), bundle, ga, gb)
    };
    let (_, bundle, ga, gb) = objective(&nets[0], &nets[1]);
    ensure(bundle.is_consistent(), || "bundle does not compose".into())?;
    let base_pl = pseudo_labels(&nets[0], &nets[1], &batch);
    let eps = 1e-5;
    let mut stats = GradStats {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for which in 0..2 {
        let analytic = if which == 0 { &ga } else { &gb };
        for (t, k) in sample_entries(nets[which].params(), 4, rng) {
            let eval = |delta: f64, nets: &mut [Model; 2]| {
                nudge(&mut nets[which], t, k, delta);
                let v = objective(&nets[0], &nets[1]).0;
                let same = pseudo_labels(&nets[0], &nets[1], &batch) == base_pl;
                nudge(&mut nets[which], t, k, -delta);
                (v, same)
            };
            let (up, same_up) = eval(eps, &mut nets);
            let (down, same_down) = eval(-eps, &mut nets);
            if !(same_up && same_down) {
                stats.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[t].data()[k];
            let (ok, rel) = grad_matches(a, numeric);
            ensure(ok, || {
                format!("SSCR net {which} tensor {t} entry {k}: analytic {a:e} numeric {numeric:e}")
            })?;
            stats.worst = stats.worst.max(rel);
            stats.checked += 1;
        }
    }
    ensure(stats.skipped * 10 <= stats.checked, || {
        format!("{} of {} entries flipped a pseudo-label", stats.skipped, stats.checked + stats.skipped)
    })?;
    Ok(stats)
}

fn c2_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = check_vssnet_gradients(&mut rng)?;
    let s = check_sscr_gradients(false, &mut rng)?;
    let p = check_sscr_gradients(true, &mut rng)?;
    Ok(format!(
        "VSS-Net {} entries (max rel {:.1e}); SSCR {} entries (max rel {:.1e}, {} skipped); \
         SSCR with probability consistency {} entries (max rel {:.1e}, {} skipped)",
        v.checked, v.worst, s.checked, s.worst, s.skipped, p.checked, p.worst, p.skipped
    ))
}

// 3. loss identities

fn random_probs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let fg: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.001..0.999)).collect();
    let mut data: Vec<f64> = fg.iter().map(|p| 1.0 - p).collect();
    data.extend(fg);
    Tensor::from_vec(&[2, h, w], data)
}

fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> VesselMask {
    let fg: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
    VesselMask::from_bools(h, w, &fg).expect("mask")
}

fn c3_loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_pce = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let pred = random_probs(h, w, &mut rng);
        let gt = random_mask(h, w, 0.3, &mut rng);
        let full = ScribbleMask::new(h, w, gt.pixels().to_vec()).map_err(err)?;
        let d = (pce_loss(&pred, &full, true).map_err(err)? - ce_loss(&pred, &gt).map_err(err)?).abs();
        worst_pce = worst_pce.max(d);
    }
    ensure(worst_pce <= 1e-7, || format!("pCE vs CE differ by {worst_pce:e}"))?;

    for _ in 0..1000 {
        let (s, c, n) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..1.0));
        let (l1, l2) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let b = LossBundle::compose(s, c, n, l1, l2);
        ensure(b.is_consistent() && b.l_total == s + l1 * c + l2 * n, || "bundle composition inexact".into())?;
    }

    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let pred = random_probs(h, w, &mut rng);
        let pixels: Vec<u8> = (0..h * w)
            .map(|_| match rng.random_range(0..3) {
                0 => BACKGROUND,
                1 => VESSEL,
                _ => UNANNOTATED,
            })
            .collect();
        let scribble = ScribbleMask::new(h, w, pixels.clone()).map_err(err)?;
        let pl = make_pseudo_label(&pred, &scribble).map_err(err)?;
        for (i, &s) in pixels.iter().enumerate() {
            if s != UNANNOTATED {
                ensure(pl.pixels()[i] == s, || format!("case {case}: pseudo-label overrides scribble at {i}"))?;
            } else {
                let want = if pred.data()[h * w + i] > pred.data()[i] { VESSEL } else { BACKGROUND };
                ensure(pl.pixels()[i] == want, || format!("case {case}: pseudo-label is not the argmax at {i}"))?;
            }
        }
    }
    Ok(format!("pCE=CE max diff {worst_pce:.1e}; 1000 exact compositions; 1000 pseudo-label cases"))
}

// 4. metrics against brute force

fn roc_trapezoid(p: &[f64], gt: &[u8]) -> f64 {
    let pos = gt.iter().filter(|&&g| g == VESSEL).count() as f64;
    let neg = gt.len() as f64 - pos;
    let mut thresholds: Vec<f64> = p.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = p.iter().zip(gt).filter(|(&v, &g)| v >= t && g == VESSEL).count() as f64;
        let fp = p.iter().zip(gt).filter(|(&v, &g)| v >= t && g != VESSEL).count() as f64;
        pts.push((fp / neg, tp / pos));
    }
    pts.windows(2).map(|s| (s[1].0 - s[0].0) * (s[1].1 + s[0].1) / 2.0).sum()
}

/// Recursive 8-connected flood fill, separate from the queue-based one.
fn flood_components(px: &[u8], h: usize, w: usize) -> usize {
    fn fill(px: &[u8], seen: &mut [bool], h: usize, w: usize, y: isize, x: isize) {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            return;
        }
        let k = y as usize * w + x as usize;
        if seen[k] || px[k] != VESSEL {
            return;
        }
        seen[k] = true;
        for dy in -1..=1 {
            for dx in -1..=1 {
                fill(px, seen, h, w, y + dy, x + dx);
            }
        }
    }
    let mut seen = vec![false; h * w];
    let mut n = 0;
    for k in 0..h * w {
        if px[k] == VESSEL && !seen[k] {
            n += 1;
            fill(px, &mut seen, h, w, (k / w) as isize, (k % w) as isize);
        }
    }
    n
}

fn c4_metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (16, 16);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let gt = loop {
            let m = random_mask(h, w, rng.random_range(0.05..0.5), &mut rng);
            let fg = m.foreground_count();
            if fg > 0 && fg < h * w {
                break m;
            }
        };
        // coarse levels so that ties exercise the ROC and the threshold
        let levels = rng.random_range(3..40) as f64;
        let probs: Vec<f64> = (0..h * w).map(|_| (rng.random_range(0.0..1.0f64) * levels).floor() / levels).collect();
        let pm = ProbabilityMap::new(h, w, probs.clone()).map_err(err)?;
        let pred = pm.binarize(0.5);
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &g) in probs.iter().zip(gt.pixels()) {
            match (p >= 0.5, g == VESSEL) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        ensure(pred.pixels().iter().zip(&probs).all(|(&b, &p)| (b == VESSEL) == (p >= 0.5)), || {
            format!("case {case}: binarisation is not p >= 0.5")
        })?;
        let c = confusion(&pred, &gt).map_err(err)?;
        ensure((c.tp, c.fp, c.tn, c.fn_) == (tp as u64, fp as u64, tn as u64, fn_ as u64), || {
            format!("case {case}: confusion counts differ")
        })?;
        let s = scalar_metrics(&c);
        let r = metrics_for(&pm, &gt).map_err(err)?;
        let safe = |n: f64, d: f64| if d == 0.0 { 1.0 } else { n / d };
        let vc_want = flood_components(pred.pixels(), h, w) as f64 / flood_components(gt.pixels(), h, w) as f64;
        let pairs = [
            (s.dsc, safe(2.0 * tp, 2.0 * tp + fp + fn_)),
            (s.acc, (tp + tn) / (h * w) as f64),
            (s.sen, safe(tp, tp + fn_)),
            (s.spe, safe(tn, tn + fp)),
            (s.iou, safe(tp, tp + fp + fn_)),
            (r.dsc, s.dsc),
            (r.auc, roc_trapezoid(&probs, gt.pixels())),
            (auc(&pm, &gt).map_err(err)?, r.auc),
            (r.vc, vc_want),
            (vascular_connectivity(&pred, &gt).map_err(err)?, vc_want),
            (count_components(&gt) as f64, flood_components(gt.pixels(), h, w) as f64),
        ];
        for (i, (got, want)) in pairs.iter().enumerate() {
            let d = (got - want).abs();
            worst = worst.max(d);
            ensure(d <= 1e-9, || format!("case {case}, check {i}: {got} vs {want}"))?;
        }
    }
    Ok(format!("200 instances, max abs error {worst:.1e}"))
}

// 5. shape contracts

fn c5_shapes() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[1, 8, 64, 64], 1.0, &mut rng);
    let mut notes = Vec::new();
    for arch in [Architecture::Dr2d, Architecture::Dr3d, Architecture::VssNet] {
        let m = Model::new(
            ModelConfig {
                architecture: arch,
                ..ModelConfig::default()
            },
            &mut rng,
        )
        .map_err(err)?;
        let map = match arch {
            Architecture::Dr2d => dr_wrap_2d(&m, &x),
            Architecture::Dr3d => dr_wrap_3d(&m, &x),
            Architecture::VssNet => vssnet_forward(&m, &x),
        }
        .map_err(err)?;
        ensure((map.height(), map.width()) == (64, 64), || {
            format!("{arch:?} gave {}x{}", map.height(), map.width())
        })?;
        ensure(map.probs().iter().all(|p| (0.0..=1.0).contains(p)), || format!("{arch:?} left [0, 1]"))?;
        notes.push(format!("{arch:?} 64x64"));
        if arch == Architecture::VssNet {
            let mut g = Graph::new();
            let maps = m.sfem_maps(&mut g, &x).map_err(err)?;
            let sizes: Vec<usize> = maps.iter().map(|&v| g.shape(v)[g.shape(v).len() - 1]).collect();
            let heights: Vec<usize> = maps.iter().map(|&v| g.shape(v)[g.shape(v).len() - 2]).collect();
            ensure(sizes == [64, 32, 16, 8] && heights == sizes, || format!("SFEM map sizes {sizes:?}"))?;
            notes.push(format!("SFEM maps {sizes:?}"));
        }
    }
    Ok(notes.join(", "))
}

// 6. overfitting four sequences

fn c6_overfit() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = normalized(&raw_set(4, &SynthSpec::default(), &mut rng, "p", None));
    let model = ModelConfig {
        channels: vec![8, 16, 32, 64],
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 4,
        iters_per_epoch: 1,
        patch_size: 64,
        tile: 64,
        lr: 2e-3,
        min_lr: 2e-5,
        strong_labeled: false,
        val_every: 10,
        ..TrainConfig::default()
    };
    let out = train_fss(&model, &train, &train, &cfg, &mut rng).map_err(err)?;
    let dsc = out.best_val_dsc.unwrap_or(0.0);
    ensure(dsc >= 0.90, || format!("training DSC {dsc:.4} after 200 epochs"))?;
    Ok(format!("training DSC {dsc:.4} (epoch {})", out.best_epoch))
}

// 7. input ablation

fn c7_ablation() -> Check {
    let modes = [ProjectionMode::First, ProjectionMode::Last, ProjectionMode::Full];
    let mut votes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SynthSpec {
            size: 32,
            frames: 8,
            tree_depth: 4,
            root_radius: 1.2,
            noise: 0.3,
            ..SynthSpec::default()
        };
        let train = raw_set(8, &spec, &mut rng, "tr", None);
        let val = raw_set(4, &spec, &mut rng, "va", None);
        let test = raw_set(8, &spec, &mut rng, "te", None);
        let mut dsc = Vec::new();
        for mode in modes {
            let model = ModelConfig {
                channels: vec![8, 16, 32],
                seq_len: mode.output_frames(spec.frames),
                ..ModelConfig::default()
            };
            let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
            let out = train_fss(&model, &projected(&train, mode), &projected(&val, mode), &desk_train(300), &mut r)
                .map_err(err)?;
            dsc.push(mean_dsc(&out.model, &projected(&test, mode), 32).map_err(err)?);
        }
        let ok = dsc[0] < dsc[1] && dsc[1] <= dsc[2];
        votes += ok as usize;
        lines.push(format!(
            "seed {seed}: first {:.3} last {:.3} full {:.3}{}",
            dsc[0],
            dsc[1],
            dsc[2],
            if ok { "" } else { " (out of order)" }
        ));
    }
    let detail = lines.join("; ");
    ensure(votes >= 2, || format!("ordering held in {votes}/3 seeds: {detail}"))?;
    Ok(format!("ordering held in {votes}/3 seeds: {detail}"))
}

// 8. self-training

fn c8_rpst() -> Check {
    let mut teacher = Vec::new();
    let mut student = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SynthSpec {
            noise: 0.3,
            contrast_jitter: 0.5,
            ..SynthSpec::default()
        };
        let labeled = normalized(&raw_set(1, &spec, &mut rng, "l", None));
        let mut unlabeled = normalized(&raw_set(8, &spec, &mut rng, "u", None));
        for e in &mut unlabeled {
            e.label = None;
        }
        let val = normalized(&raw_set(4, &spec, &mut rng, "v", None));
        let model = ModelConfig {
            channels: vec![8, 16, 32],
            ..ModelConfig::default()
        };
        let out = rpst_train(&model, &labeled, &unlabeled, &val, &desk_train(150), &RpstConfig::default(), &mut rng)
            .map_err(err)?;
        teacher.push(out.teacher_val_dsc.ok_or("teacher has no val DSC")?);
        student.push(out.student_val_dsc.ok_or("student has no val DSC")?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = student.iter().zip(&teacher).filter(|(s, t)| s >= t).count();
    let detail = format!(
        "teacher {:.3?} student {:.3?}, means {:.4} / {:.4}, student >= teacher in {wins}/3",
        teacher,
        student,
        mean(&teacher),
        mean(&student)
    );
    ensure(mean(&student) >= mean(&teacher) - 0.02 && wins >= 2, || detail.clone())?;
    Ok(detail)
}

// 9. SSCR against plain pCE

fn c9_sscr_vs_pce() -> Check {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SynthSpec {
            noise: 0.5,
            contrast_jitter: 0.5,
            ..SynthSpec::default()
        };
        let rdfa = RdfaConfig::default();
        let train = normalized(&raw_set(4, &spec, &mut rng, "t", Some(&rdfa)));
        let val = normalized(&raw_set(4, &spec, &mut rng, "v", Some(&rdfa)));
        let model = ModelConfig {
            channels: vec![8, 16, 32],
            ..ModelConfig::default()
        };
        let mut dsc = Vec::new();
        for variant in [WssVariant::Pce, WssVariant::Sscr] {
            let wss = WssConfig {
                variant,
                rampup_epochs: 100,
                ..WssConfig::default()
            };
            let mut r = ChaCha8Rng::seed_from_u64(seed + 50);
            let out = train_wss(&model, &train, &val, &desk_train(200), &wss, &mut r).map_err(err)?;
            dsc.push(out.outcome.best_val_dsc.ok_or("no val DSC")?);
        }
        wins += (dsc[1] >= dsc[0]) as usize;
        lines.push(format!("seed {seed}: pCE {:.3} SSCR {:.3}", dsc[0], dsc[1]));
    }
    let detail = format!("SSCR >= pCE in {wins}/3 ({})", lines.join("; "));
    ensure(wins >= 2, || detail.clone())?;
    Ok(detail)
}

// 10. batch mixing

fn c10_mixing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = SynthSpec {
        size: 32,
        frames: 4,
        tree_depth: 3,
        root_radius: 1.2,
        ..SynthSpec::default()
    };
    let labeled = normalized(&raw_set(2, &spec, &mut rng, "l", None));
    let unlabeled: Vec<_> = normalized(&raw_set(2, &spec, &mut rng, "u", None))
        .into_iter()
        .map(|e| e.sequence)
        .collect();
    let model = Model::new(
        ModelConfig {
            architecture: Architecture::Dr2d,
            seq_len: 4,
            channels: vec![4, 8],
            ..ModelConfig::default()
        },
        &mut rng,
    )
    .map_err(err)?;
    let pool = pseudo_label_pool(&model, &unlabeled, 0.5, 32, 0).map_err(err)?;
    let refs: Vec<&Example> = labeled.iter().collect();
    let cfg = RpstConfig {
        p: 0.5,
        ..RpstConfig::default()
    };
    let aug = AugmentConfig::default();
    let (slots, per_batch) = (100_000, 1000);
    let mut n_labeled = 0;
    for _ in 0..slots / per_batch {
        let batch = rpst_batch(&refs, &unlabeled, &pool, &cfg, per_batch, 8, &aug, &mut rng).map_err(err)?;
        n_labeled += batch.iter().filter(|p| p.source == PatchSource::Labeled).count();
    }
    let frac = n_labeled as f64 / slots as f64;
    ensure((0.49..=0.51).contains(&frac), || format!("labeled fraction {frac:.4}"))?;
    Ok(format!("labeled fraction {frac:.4} over {slots} slots"))
}

// 11. determinism of the binary

const DETERMINISM_CONFIG: &str = r#"
seed = 11
[data]
root = "data"
[model]
channels = [4, 8]
seq_len = 4
[train]
epochs = 3
batch_size = 2
iters_per_epoch = 2
patch_size = 16
tile = 16
[rpst]
iterations = 2
[synth]
labeled = 6
unlabeled = 3
[synth.spec]
size = 32
frames = 4
tree_depth = 3
root_radius = 1.2
"#;

fn run_dias(dir: &Path, args: &[&str]) -> Result<std::path::PathBuf, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dias"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("dias {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(dir.join(String::from_utf8_lossy(&out.stdout).trim()))
}

fn c11_determinism() -> Check {
    let commands: [&[&str]; 7] = [
        &["synth"],
        &["train-fss"],
        &["train-wss", "--override", "wss.variant=\"sscr\""],
        &["train-wss", "--override", "wss.variant=\"pce\""],
        &["rpst"],
        &["gen-scribble"],
        &["project", "--mode", "mean", "--out", "projected"],
    ];
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    let mut runs = [Vec::new(), Vec::new()];
    for (d, out) in dirs.iter().zip(runs.iter_mut()) {
        std::fs::write(d.path().join("c.toml"), DETERMINISM_CONFIG).map_err(err)?;
        for c in commands {
            let mut args = c.to_vec();
            args.extend(["--config", "c.toml"]);
            let run = run_dias(d.path(), &args)?;
            if c[0] == "train-fss" {
                std::fs::copy(run.join("checkpoints/best.ckpt"), d.path().join("model.ckpt")).map_err(err)?;
                out.push(run_dias(d.path(), &["eval", "--config", "c.toml", "--checkpoint", "model.ckpt"])?);
            }
            out.push(run);
        }
    }
    let mut compared = 0;
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        let read = |p: &Path| std::fs::read(p.join("metrics.json")).map_err(err);
        ensure(read(a)? == read(b)?, || format!("metrics differ between {} and {}", a.display(), b.display()))?;
        compared += 1;
        for ck in ["best.ckpt", "net_b.ckpt", "teacher.ckpt"] {
            let (pa, pb) = (a.join("checkpoints").join(ck), b.join("checkpoints").join(ck));
            if pa.is_file() {
                ensure(std::fs::read(&pa).map_err(err)? == std::fs::read(&pb).map_err(err)?, || {
                    format!("{ck} differs for {}", a.display())
                })?;
            }
        }
    }
    Ok(format!("{compared} commands reproduced metrics.json and checkpoints byte for byte"))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: 1, name: "ConvGRU oracle equivalence", budget: Duration::from_secs(5), run: c1_convgru_oracle },
        Criterion { id: 2, name: "gradient check", budget: min(2), run: c2_gradients },
        Criterion { id: 3, name: "loss identities", budget: Duration::from_secs(10), run: c3_loss_identities },
        Criterion { id: 4, name: "metric oracles", budget: Duration::from_secs(30), run: c4_metric_oracles },
        Criterion { id: 5, name: "shape contracts", budget: Duration::from_secs(10), run: c5_shapes },
        Criterion { id: 6, name: "synthetic overfit", budget: min(15), run: c6_overfit },
        Criterion { id: 7, name: "input-ablation trend", budget: min(45), run: c7_ablation },
        Criterion { id: 8, name: "self-training trend", budget: min(60), run: c8_rpst },
        Criterion { id: 9, name: "SSCR vs pCE", budget: min(60), run: c9_sscr_vs_pce },
        Criterion { id: 10, name: "batch mixing", budget: min(5), run: c10_mixing },
        Criterion { id: 11, name: "determinism", budget: min(10), run: c11_determinism },
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let result = (c.run)();
        let took = start.elapsed();
        let result = result.and_then(|d| {
            if took <= c.budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {:.1} s, budget {} s", took.as_secs_f64(), c.budget.as_secs()))
            }
        });
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2} {}: {detail} ({:.1} s)", c.id, c.name, took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
