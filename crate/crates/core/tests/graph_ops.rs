//! Every differentiable op against central differences, plus a few
//! value-level identities of the kernels.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechlm_core::attention::{AttnDims, AttnSegment};
use speechlm_core::gradcheck::eval;
use speechlm_core::kernels::RopeTable;
use speechlm_core::{AttentionMask, Graph, ParamId, ParamStore, Result, Tensor, Var};

const EPS: f64 = 1e-6;

/// Autodiff vs central differences on every coordinate, allclose-style so
/// gradients that are zero up to rounding do not blow up a relative error.
fn check<F>(store: &mut ParamStore<f64>, f: F)
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g).unwrap();
        g.backward(loss).unwrap()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for i in 0..store.tensor(id).numel() {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + EPS;
            let plus = eval(store, &f).unwrap();
            store.get_mut(id).tensor.data_mut()[i] = orig - EPS;
            let minus = eval(store, &f).unwrap();
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * EPS);
            let ad = grads.get(id).map_or(0.0, |t| t.data()[i]);
            let tol = 1e-7 + 1e-5 * ad.abs().max(fd.abs());
            assert!(
                (ad - fd).abs() <= tol,
                "{}[{i}]: autodiff {ad} vs numeric {fd}",
                store.get(id).name
            );
        }
    }
}

struct Case {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    fn param(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = Tensor::randn(shape, 1.0, &mut self.rng);
        self.store.add(name, t, false).unwrap()
    }

    fn weights(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }
}

/// `sum(x * w)` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<'_, f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_shared_and_batched(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut c = Case::new(seed);
        let a = c.param("a", &[2, m, k]);
        let b = c.param("b", &[k, n]);
        let bb = c.param("bb", &[2, k, n]);
        let w = c.weights(&[2, m, n]);
        check(&mut c.store, |g| {
            let (a, b, bb) = (g.param(a), g.param(b), g.param(bb));
            let x = g.matmul(a, b)?;
            let y = g.matmul(a, bb)?;
            let s = g.add(x, y)?;
            let s = g.mul(s, y)?;
            project(g, s, &w)
        });
    }

    #[test]
    fn elementwise_and_broadcast(seed in any::<u64>(), r in 1usize..4, d in 1usize..5) {
        let mut c = Case::new(seed);
        let x = c.param("x", &[r, d]);
        let b = c.param("b", &[d]);
        let w = c.weights(&[r, d]);
        check(&mut c.store, |g| {
            let (x, b) = (g.param(x), g.param(b));
            let y = g.add(x, b)?;
            let y = g.silu(y);
            let y = g.scale(y, -1.7);
            let z = g.mul(y, x)?;
            project(g, z, &w)
        });
    }

    #[test]
    fn softmax_family(seed in any::<u64>(), r in 1usize..4, d in 1usize..6) {
        let mut c = Case::new(seed);
        let x = c.param("x", &[r, d]);
        let (w1, w2, w3) = (c.weights(&[r, d]), c.weights(&[r, d]), c.weights(&[r]));
        check(&mut c.store, |g| {
            let x = g.param(x);
            let s = g.softmax(x);
            let l = g.log_softmax(x);
            let e = g.logsumexp(x);
            let a = project(g, s, &w1)?;
            let b = project(g, l, &w2)?;
            let e = project(g, e, &w3)?;
            let ab = g.add(a, b)?;
            g.add(ab, e)
        });
    }

    #[test]
    fn rmsnorm_input_and_gain(seed in any::<u64>(), r in 1usize..4, d in 2usize..6) {
        let mut c = Case::new(seed);
        let x = c.param("x", &[r, d]);
        let gain = c.param("gain", &[d]);
        let w = c.weights(&[r, d]);
        check(&mut c.store, |g| {
            let (x, gain) = (g.param(x), g.param(gain));
            let y = g.rmsnorm(x, gain, 1e-5)?;
            project(g, y, &w)
        });
    }

    #[test]
    fn embedding_and_cross_entropy(seed in any::<u64>(), v in 3usize..7, n in 2usize..6) {
        let mut c = Case::new(seed);
        let table = c.param("table", &[v, 4]);
        let head = c.param("head", &[4, v]);
        let ids: Vec<usize> = (0..n).map(|_| c.rng.random_range(0..v)).collect();
        let mut targets: Vec<usize> = (0..n).map(|_| c.rng.random_range(1..v)).collect();
        targets[0] = 0;
        check(&mut c.store, |g| {
            let (t, h) = (g.param(table), g.param(head));
            let e = g.embedding(t, &ids)?;
            let logits = g.matmul(e, h)?;
            g.cross_entropy(logits, &targets, 0)
        });
    }

    #[test]
    fn convolutions(seed in any::<u64>(), len in 3usize..8, stride in 1usize..3, pad in 0usize..2) {
        let mut c = Case::new(seed);
        let x1 = c.param("x1", &[len, 2]);
        let w1 = c.param("w1", &[3, 2, 3]);
        let b1 = c.param("b1", &[3]);
        let x2 = c.param("x2", &[2, len, 4]);
        let w2 = c.param("w2", &[2, 2, 3, 3]);
        let b2 = c.param("b2", &[2]);
        let out1 = (len + 2 * pad - 3) / stride + 1;
        let (oh, ow) = ((len + 2 * pad - 3) / stride + 1, (4 + 2 * pad - 3) / stride + 1);
        let (m1, m2) = (c.weights(&[out1, 3]), c.weights(&[2, oh, ow]));
        check(&mut c.store, |g| {
            let (x1, w1, b1) = (g.param(x1), g.param(w1), g.param(b1));
            let y1 = g.conv1d(x1, w1, b1, stride, pad)?;
            assert_eq!(g.shape(y1), [out1, 3]);
            let (x2, w2, b2) = (g.param(x2), g.param(w2), g.param(b2));
            let y2 = g.conv2d(x2, w2, b2, stride, pad)?;
            assert_eq!(g.shape(y2), [2, oh, ow]);
            let a = project(g, y1, &m1)?;
            let b = project(g, y2, &m2)?;
            g.add(a, b)
        });
    }

    #[test]
    fn attention_under_every_mask(seed in any::<u64>(), t1 in 1usize..5, t2 in 1usize..5, p in 0usize..5) {
        let mut c = Case::new(seed);
        let dims = AttnDims { heads: 2, head_dim: 2 };
        let rows = t1 + t2;
        let q = c.param("q", &[rows, 4]);
        let k = c.param("k", &[rows, 4]);
        let v = c.param("v", &[rows, 4]);
        let segs: Rc<[AttnSegment]> = vec![
            AttnSegment::self_attn(0, t1, AttentionMask::PrefixNonCausal { prefix_len: p.min(t1) }),
            AttnSegment::self_attn(t1, t2, AttentionMask::Causal),
        ]
        .into();
        let w = c.weights(&[rows, 4]);
        check(&mut c.store, |g| {
            let (q, k, v) = (g.param(q), g.param(k), g.param(v));
            let a = g.attention(q, k, v, segs.clone(), dims)?;
            project(g, a, &w)
        });
    }

    #[test]
    fn rope_and_row_plumbing(seed in any::<u64>(), r in 2usize..5) {
        let mut c = Case::new(seed);
        let x = c.param("x", &[r, 4]);
        let table = Rc::new(RopeTable::new(4, 10000.0, 16));
        let positions: Rc<[usize]> = (0..r).map(|i| 3 * i + 1).collect::<Vec<_>>().into();
        let idx: Vec<usize> = (0..r + 2).map(|i| (i * 7) % r).collect();
        let w = c.weights(&[2, r + 2 + r, 2]);
        let m = c.weights(&[]);
        check(&mut c.store, |g| {
            let x = g.param(x);
            let y = g.rope(x, positions.clone(), table.clone())?;
            let picked = g.gather_rows(y, &idx)?;
            let cat = g.concat_rows(&[picked, x])?;
            let cube = g.reshape(cat, &[r + 2 + r, 2, 2])?;
            let sw = g.swap01(cube)?;
            let a = project(g, sw, &w)?;
            let mean = g.mean(y);
            let b = project(g, mean, &m)?;
            g.add(a, b)
        });
    }

    #[test]
    fn ctc_through_log_softmax(seed in any::<u64>(), t in 3usize..7, c_n in 2usize..5) {
        let mut c = Case::new(seed);
        let logits = c.param("logits", &[t, c_n]);
        let len = c.rng.random_range(1..=(t / 2).max(1));
        let target: Vec<usize> = (0..len).map(|_| c.rng.random_range(1..c_n)).collect();
        check(&mut c.store, |g| {
            let x = g.param(logits);
            let lp = g.log_softmax(x);
            g.ctc_loss(lp, &target)
        });
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), r in 1usize..5, d in 1usize..8, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::<f64>::randn(&[r, d], scale, &mut rng));
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn rope_scores_depend_on_offset_only(seed in any::<u64>(), m in 0usize..20, n in 0usize..20, shift in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = RopeTable::<f64>::new(8, 10000.0, 64);
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let score = |pq: usize, pk: usize| {
            let (mut a, mut b) = (q.clone(), k.clone());
            table.rotate(&mut a, pq, false);
            table.rotate(&mut b, pk, false);
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        prop_assert!((score(m, n) - score(m + shift, n + shift)).abs() < 1e-9);
        let mut a = q.clone();
        table.rotate(&mut a, m, false);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((norm(&a) - norm(&q)).abs() < 1e-12);
        table.rotate(&mut a, m, true);
        prop_assert!(a.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
