use dias_tensor::{cosine_lr, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A loss touching every shape-changing op: conv, pool, upsample, concat,
/// narrow, gather, softmax and the reductions.
fn composite(g: &mut Graph, store: &ParamStore, x: &Tensor) -> dias_tensor::Var {
    let ids: Vec<_> = store.ids().collect();
    let xv = g.input(x.clone());
    let w = g.param(store, ids[0]);
    let b = g.param(store, ids[1]);
    let c = g.conv2d(xv, w, Some(b), 1, 1);
    let t = g.tanh(c);
    let p = g.max_pool2(t);
    let u = g.upsample2(p);
    let cat = g.concat_channels(&[u, t]);
    let n = g.narrow_channels(cat, 1, 3);
    let (batch, _, h, wd) = g.value(n).dims4();
    let idx: Vec<usize> = (0..batch * 3 * h * wd).rev().collect();
    let gathered = g.gather(n, idx, &[batch, 3, h, wd]);
    let s = g.softmax_channels(gathered);
    let l = g.ln(s);
    let m = g.mul(l, s);
    g.mean(m)
}

fn store(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::randn(&[2, 2, 3, 3], 0.5, rng));
    s.insert("b", Tensor::randn(&[2], 0.5, rng));
    s
}

#[test]
fn composite_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);
    let mut s = store(&mut rng);
    let mut g = Graph::new();
    let loss = composite(&mut g, &s, &x);
    let grads = g.backward(loss);
    let analytic = g.param_grads(&grads, &s);
    let ids: Vec<_> = s.ids().collect();
    let eps = 1e-6;
    for (t, id) in ids.iter().enumerate() {
        for k in 0..s.get(*id).numel() {
            let mut eval = |d: f64| {
                s.get_mut(*id).data_mut()[k] += d;
                let mut g = Graph::new();
                let l = composite(&mut g, &s, &x);
                let v = g.value(l).item();
                s.get_mut(*id).data_mut()[k] -= d;
                v
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic[t].data()[k];
            assert!((a - fd).abs() <= 1e-6 * (1.0 + a.abs()), "param {t}[{k}]: {a} vs {fd}");
        }
    }
}

#[test]
fn adamw_minimises_a_quadratic() {
    let mut s = ParamStore::new();
    let id = s.insert("x", Tensor::from_vec(&[3], vec![4.0, -3.0, 1.5]));
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &s);
    for _ in 0..2000 {
        let mut g = Graph::new();
        let x = g.param(&s, id);
        let sq = g.mul(x, x);
        let l = g.sum(sq);
        let grads = g.backward(l);
        let gs = g.param_grads(&grads, &s);
        opt.step(&mut s, &gs, 0.05);
    }
    assert_eq!(opt.steps_taken(), 2000);
    assert!(s.get(id).max_abs() < 1e-3, "{:?}", s.get(id).data());
}

#[test]
fn detached_values_carry_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let id = s.insert("a", Tensor::randn(&[4], 1.0, &mut rng));
    let mut g = Graph::new();
    let a = g.param(&s, id);
    let d = g.detach(a);
    let prod = g.mul(a, d);
    let l = g.sum(prod);
    let grads = g.backward(l);
    let ga = &g.param_grads(&grads, &s)[0];
    // d(a * stop(a)) / da = stop(a), not 2a
    for (x, v) in ga.data().iter().zip(s.get(id).data()) {
        assert!((x - v).abs() < 1e-12);
    }
}

#[test]
fn cosine_schedule_runs_from_base_to_min() {
    let total = 100;
    assert!((cosine_lr(1e-3, 1e-5, 0, total) - 1e-3).abs() < 1e-15);
    assert!((cosine_lr(1e-3, 1e-5, total, total) - 1e-5).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let a = rng.random_range(0..total);
        assert!(cosine_lr(1e-3, 1e-5, a, total) >= cosine_lr(1e-3, 1e-5, a + 1, total));
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn narrow_inverts_concat(n in 1usize..4, c1 in 1usize..4, c2 in 1usize..4, hw in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[n, c1, hw, hw], 1.0, &mut rng);
            let b = Tensor::randn(&[n, c2, hw, hw], 1.0, &mut rng);
            let cat = Tensor::concat_channels(&[&a, &b]);
            prop_assert_eq!(cat.narrow_channels(0, c1), a.clone());
            prop_assert_eq!(cat.narrow_channels(c1, c2), b.clone());
            let lead = Tensor::concat_leading(&[&a, &a]);
            prop_assert_eq!(lead.narrow_leading(n, n), a);
        }

        #[test]
        fn softmax_rows_sum_to_one(c in 1usize..5, hw in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[2, c, hw, hw], 3.0, &mut rng);
            let mut g = Graph::new();
            let v = g.input(x);
            let s = g.softmax_channels(v);
            let d = g.value(s).data();
            let plane = hw * hw;
            for n in 0..2 {
                for p in 0..plane {
                    let total: f64 = (0..c).map(|k| d[(n * c + k) * plane + p]).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
