//! Exact algorithms checked against enumeration or a second implementation.

use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechlm_core::ctc::{collapse, compress_blank_remove, compress_frame_average, ctc_loss, runs};
use speechlm_core::decoder::{Decoder, DecoderConfig, SeqLayout};
use speechlm_core::kernels::log_softmax_inplace;
use speechlm_core::lora::{self, LoraConfig};
use speechlm_core::metrics::corpus_bleu;
use speechlm_core::nn::Span;
use speechlm_core::search::{beam_search, greedy, BeamConfig, FnScorer};
use speechlm_core::seq2seq::CtcPrefixScorer;
use speechlm_core::{AttentionMask, Graph, ParamStore, Tensor};

fn log_probs(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..t * v).map(|_| rng.random_range(-3.0..3.0)).collect();
    for row in data.chunks_mut(v) {
        log_softmax_inplace(row);
    }
    Tensor::new(vec![t, v], data).unwrap()
}

/// Every alignment of `t` frames over `v` classes with its log-probability.
fn alignments(lp: &Tensor<f64>) -> Vec<(Vec<usize>, f64)> {
    let (t, v) = lp.rows_cols();
    let mut out = vec![(Vec::new(), 0.0)];
    for f in 0..t {
        out = out
            .into_iter()
            .flat_map(|(path, s): (Vec<usize>, f64)| {
                (0..v).map(move |k| {
                    let mut p = path.clone();
                    p.push(k);
                    (p, s + lp.row(f)[k])
                })
            })
            .collect();
    }
    out
}

fn log_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn target_strategy() -> impl Strategy<Value = (u64, usize, usize, Vec<usize>)> {
    (any::<u64>(), 1usize..=6, 2usize..=4).prop_flat_map(|(seed, t, v)| {
        (Just(seed), Just(t), Just(v), prop::collection::vec(1..v, 1..=t))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ctc_loss_is_the_alignment_sum((seed, t, v, target) in target_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = log_probs(t, v, &mut rng);
        let paths = alignments(&lp);
        let feasible = paths.iter().any(|(p, _)| collapse(p) == target);
        match ctc_loss(&lp, &target) {
            Ok(loss) => {
                let brute = -log_sum(paths.iter().filter(|(p, _)| collapse(p) == target).map(|(_, s)| *s));
                prop_assert!(feasible);
                prop_assert!((loss - brute).abs() <= 1e-10, "{loss} vs {brute}");
            }
            Err(_) => prop_assert!(!feasible),
        }
    }

    #[test]
    fn prefix_probability_is_the_alignment_sum(seed in any::<u64>(), t in 1usize..=5, v in 2usize..=4, steps in prop::collection::vec(1usize..4, 0..3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = log_probs(t, v, &mut rng);
        let paths = alignments(&lp);
        let eos = v;
        let scorer = CtcPrefixScorer::new(lp, eos).unwrap();
        let mut state = scorer.initial();
        let mut prefix = Vec::new();
        for c in steps.into_iter().map(|c| 1 + (c - 1) % (v - 1)) {
            prefix.push(c);
            let (psi, next) = scorer.extend(&state, c);
            let brute = log_sum(paths.iter().filter(|(p, _)| collapse(p).starts_with(&prefix)).map(|(_, s)| *s));
            if brute == f64::NEG_INFINITY {
                prop_assert_eq!(psi, f64::NEG_INFINITY);
                return Ok(());
            }
            prop_assert!((psi - brute).abs() <= 1e-10, "{:?}: {} vs {}", prefix, psi, brute);
            state = next.unwrap();
        }
        let (full, _) = scorer.extend(&state, eos);
        let brute = log_sum(paths.iter().filter(|(p, _)| collapse(p) == prefix).map(|(_, s)| *s));
        prop_assert!((full - brute).abs() <= 1e-10 || full == brute);
    }

    #[test]
    fn compression_lengths_follow_the_alignment(seed in any::<u64>(), align in prop::collection::vec(0usize..4, 1..16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Tensor::<f64>::randn(&[align.len(), 3], 1.0, &mut rng);
        let non_blank = align.iter().filter(|&&a| a != 0).count();
        let kept = compress_blank_remove(&hidden, &align).unwrap();
        prop_assert_eq!(kept.rows_cols().0, non_blank.max(1));

        let avg = compress_frame_average(&hidden, &align, false).unwrap();
        let rs = runs(&align);
        prop_assert_eq!(avg.rows_cols().0, rs.len());
        for (row, (_, range)) in rs.iter().enumerate() {
            for c in 0..3 {
                let mean = range.clone().map(|r| hidden.row(r)[c]).sum::<f64>() / range.len() as f64;
                prop_assert!((avg.row(row)[c] - mean).abs() < 1e-12);
            }
        }
        let dropped = compress_frame_average(&hidden, &align, true).unwrap();
        let label_runs = rs.iter().filter(|(l, _)| *l != 0).count();
        prop_assert_eq!(dropped.rows_cols().0, label_runs.max(1));
    }
}

/// Deterministic pseudo-random log-distribution for each prefix.
fn table_scorer(seed: u64, vocab: usize) -> impl FnMut(&[usize]) -> Vec<f64> {
    move |prefix: &[usize]| {
        let mut h = seed;
        for &t in prefix {
            h = h.wrapping_mul(0x100000001b3).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ prefix.len() as u64);
        let mut row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        log_softmax_inplace(&mut row);
        row
    }
}

/// All complete outputs: sequences ending in `eos`, or `max_len` long.
fn enumerate(score: &mut impl FnMut(&[usize]) -> Vec<f64>, vocab: usize, max_len: usize, eos: Option<usize>) -> Vec<(Vec<usize>, f64)> {
    let mut done = Vec::new();
    let mut frontier = vec![(Vec::new(), 0.0)];
    for step in 0..max_len {
        let mut next = Vec::new();
        for (p, s) in frontier {
            let row = score(&p);
            for (tok, &l) in row.iter().enumerate().take(vocab) {
                let mut q: Vec<usize> = p.clone();
                q.push(tok);
                if Some(tok) == eos || step + 1 == max_len {
                    done.push((q, s + l));
                } else {
                    next.push((q, s + l));
                }
            }
        }
        frontier = next;
    }
    done.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    done
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_width_beam_is_exhaustive(seed in any::<u64>(), vocab in 2usize..=4, max_len in 1usize..=3, use_eos in any::<bool>()) {
        let eos = use_eos.then_some(vocab - 1);
        let expected = enumerate(&mut table_scorer(seed, vocab), vocab, max_len, eos);
        let beam = vocab.pow(max_len as u32);
        let got = beam_search(&mut FnScorer(table_scorer(seed, vocab)), (), BeamConfig::new(beam, max_len, eos)).unwrap();
        prop_assert_eq!(got.len(), expected.len());
        for (h, (toks, score)) in got.iter().zip(&expected) {
            prop_assert_eq!(&h.tokens, toks);
            prop_assert!((h.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_of_one_is_greedy(seed in any::<u64>(), vocab in 2usize..=6, max_len in 1usize..=6, use_eos in any::<bool>()) {
        let eos = use_eos.then_some(0);
        let b = beam_search(&mut FnScorer(table_scorer(seed, vocab)), (), BeamConfig::new(1, max_len, eos)).unwrap();
        let (tokens, score) = greedy(&mut FnScorer(table_scorer(seed, vocab)), (), max_len, eos).unwrap();
        prop_assert_eq!(&b[0].tokens, &tokens);
        prop_assert!((b[0].score - score).abs() < 1e-12);
    }
}

/// Straightforward corpus BLEU-4, no smoothing.
fn reference_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let grams = |s: &[usize], n: usize| {
        let mut m: HashMap<Vec<usize>, usize> = HashMap::new();
        for i in 0..(s.len() + 1).saturating_sub(n) {
            *m.entry(s[i..i + n].to_vec()).or_default() += 1;
        }
        m
    };
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (mut hit, mut tot) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let rg = grams(r, n);
            for (g, c) in grams(h, n) {
                hit += c.min(*rg.get(&g).unwrap_or(&0));
                tot += c;
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / tot as f64).ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

fn corpus_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
    prop::collection::vec(
        (prop::collection::vec(0usize..5, 1..9), prop::collection::vec(0usize..5, 1..9)),
        1..6,
    )
}

proptest! {
    #[test]
    fn bleu_matches_a_second_implementation(pairs in corpus_strategy()) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let got = corpus_bleu(&hyps, &refs).unwrap().bleu;
        let want = reference_bleu(&hyps, &refs);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn bleu_ignores_sentence_order(pairs in corpus_strategy(), rot in 0usize..6) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        let a = corpus_bleu(&hyps, &refs).unwrap().bleu;
        let b = corpus_bleu(&h2, &r2).unwrap().bleu;
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn bleu_hand_example() {
    // 4-token hypothesis matching the first four of a 5-token reference:
    // every precision is 1 and the brevity penalty is exp(1 - 5/4).
    let r = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]]).unwrap();
    assert_eq!(r.precisions, [1.0; 4]);
    assert!((r.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
    assert!((r.bleu - 77.88).abs() < 0.01, "{}", r.bleu);
    let same = vec![vec![3, 1, 4, 1, 5], vec![9, 2, 6, 5]];
    assert_eq!(corpus_bleu(&same, &same).unwrap().bleu, 100.0);
}

fn tiny_decoder(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Decoder {
    let cfg = DecoderConfig {
        n_layers: 2,
        n_heads: 2,
        model_dim: 16,
        ffn_dim: 24,
        vocab_size: 11,
        ..Default::default()
    };
    Decoder::new(store, "lm", cfg, rng).unwrap()
}

fn logits(dec: &Decoder, store: &ParamStore<f32>, ids: &[usize]) -> Tensor<f32> {
    let mut g = Graph::new(store);
    let x = dec.embed(&mut g, ids).unwrap();
    let layout = SeqLayout {
        span: Span::new(0, ids.len()),
        mask: AttentionMask::Causal,
    };
    let out = dec.forward(&mut g, x, &[layout], None).unwrap();
    g.value(out).clone()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lora_identity_merge_and_reinjection(seed in any::<u64>(), ids in prop::collection::vec(0usize..11, 1..8)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut dec = tiny_decoder(&mut store, &mut rng);
        let base = logits(&dec, &store, &ids);
        let cfg = LoraConfig::with_rank(2);
        store.set_frozen_prefix("lm.", true);
        prop_assert_eq!(lora::inject(&mut store, dec.attention_linears_mut(), &cfg, &mut rng).unwrap(), 8);
        prop_assert_eq!(bits(&logits(&dec, &store, &ids)), bits(&base));
        prop_assert_eq!(store.trainable_count(), lora::param_count(&cfg, 2, 16, 16).unwrap());

        for (id, p) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            if p.starts_with("lora.") && p.ends_with(".b") {
                let shape = store.tensor(id).shape().to_vec();
                store.set_tensor(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
            }
        }
        let adapted = logits(&dec, &store, &ids);
        prop_assert!(adapted.max_abs_diff(&base) > 1e-4);

        let mut merged_store = store.clone();
        let mut merged = dec.clone();
        for lin in merged.attention_linears_mut() {
            lora::merge(&mut merged_store, lin).unwrap();
        }
        prop_assert!(lora::attached(merged.attention_linears()).is_empty());
        prop_assert!(logits(&merged, &merged_store, &ids).max_abs_diff(&adapted) <= 1e-5);

        lora::inject(&mut store, dec.attention_linears_mut(), &cfg, &mut rng).unwrap();
        prop_assert_eq!(bits(&logits(&dec, &store, &ids)), bits(&base));
    }
}

#[test]
fn lora_accounting_at_full_scale() {
    assert_eq!(lora::param_count(&LoraConfig::with_rank(2), 32, 4096, 4096).unwrap(), 2_097_152);
    assert!(lora::param_count(&LoraConfig::with_rank(5), 1, 16, 16).is_err());
}
