use super::*;
use crate::diff::{finite_diff_check, Tape};
use crate::nn::position_grid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dummy_queries(tape: &Tape, n: usize) -> ObjectQuerySet<'_> {
    ObjectQuerySet {
        embeddings: tape.constant((0..n * 2).map(|i| i as f64).collect(), &[n, 2]),
        confidence: vec![0.0; n],
        origin_ids: (0..n).collect(),
    }
}

#[test]
fn eq4_hand_example() {
    let a_s = vec![1.0 / 3.0; 9];
    let a_c = vec![0.5, 0.5, 0.5, 0.25, 0.25, 0.25];
    let s = confidence_scores(&a_s, &a_c, 3, 2);
    for v in s {
        assert!((v - 0.5 * (2.0 / 3.0) - 0.5).abs() < 1e-15);
        assert!((v - 0.833_333_333_333_333_4).abs() < 1e-12);
    }
}

#[test]
fn ignored_query_scores_zero() {
    // query 1 gets nothing from query 0 and nothing from the text token
    let a_s = vec![1.0, 0.0, 0.3, 0.7];
    let a_c = vec![1.0, 0.0];
    assert_eq!(confidence_scores(&a_s, &a_c, 2, 1)[1], 0.0);
    assert_eq!(confidence_scores(&[1.0], &[0.4], 1, 1), vec![0.4]);
}

#[test]
fn scores_match_two_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.gen_range(1..9);
        let k = rng.gen_range(1..5);
        let a_s: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        let a_c: Vec<f64> = (0..k * n).map(|_| rng.gen::<f64>()).collect();
        let got = confidence_scores(&a_s, &a_c, n, k);
        for j in 0..n {
            let mut first = 0.0;
            for i in 0..n {
                if i != j {
                    first += a_s[i * n + j];
                }
            }
            if n > 1 {
                first /= (n - 1) as f64;
            }
            let mut second = f64::NEG_INFINITY;
            for t in 0..k {
                second = second.max(a_c[t * n + j]);
            }
            assert_eq!(got[j], first + second);
        }
    }
}

#[test]
fn prune_examples() {
    let tape = Tape::new();
    let q = dummy_queries(&tape, 4);
    let same = prune(&q, &[0.3, 0.2, 0.1, 0.0], 1);
    assert_eq!(same.origin_ids, q.origin_ids);
    assert_eq!(same.embeddings.to_vec(), q.embeddings.to_vec());

    let kept = prune(&q, &[0.1, 0.9, 0.5, 0.9], 2);
    assert_eq!(kept.origin_ids, vec![1, 3]);
    assert_eq!(kept.confidence, vec![0.9, 0.9]);
    assert_eq!(kept.embeddings.to_vec(), vec![2.0, 3.0, 6.0, 7.0]);

    let one = prune(&q, &[0.9, 0.5, 0.9, 0.9], 4);
    assert_eq!(one.origin_ids, vec![0]);
}

#[test]
fn prune_passes_gradient_only_to_survivors() {
    let tape = Tape::new();
    let emb = tape.leaf(vec![1.0; 8], &[4, 2]);
    let q = ObjectQuerySet {
        embeddings: emb,
        confidence: vec![0.0; 4],
        origin_ids: vec![0, 1, 2, 3],
    };
    let kept = prune(&q, &[0.0, 1.0, 0.0, 2.0], 2);
    tape.backward(kept.embeddings.sum()).unwrap();
    assert_eq!(emb.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn nine_hundred_queries_shrink_to_fifteen() {
    let tape = Tape::new();
    let mut q = dummy_queries(&tape, 900);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..6 {
        let scores: Vec<f64> = (0..q.len()).map(|_| rng.gen()).collect();
        q = prune(&q, &scores, 2);
    }
    assert_eq!(q.len(), 15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cardinality_follows_ceil_chain(n in 1usize..300, k in 1usize..5, layers in 0usize..7, seed in any::<u64>()) {
        let tape = Tape::new();
        let mut q = dummy_queries(&tape, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut expect = n;
        for _ in 0..layers {
            let scores: Vec<f64> = (0..q.len()).map(|_| rng.gen_range(0..4) as f64).collect();
            q = prune(&q, &scores, k);
            expect = expect.div_ceil(k);
        }
        prop_assert_eq!(q.len(), expect);
        prop_assert!(q.origin_ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn survivors_dominate_dropped(n in 1usize..60, k in 1usize..5, seed in any::<u64>()) {
        let tape = Tape::new();
        let q = dummy_queries(&tape, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let kept = prune(&q, &scores, k);
        let dropped: Vec<usize> = (0..n).filter(|i| !kept.origin_ids.contains(i)).collect();
        let min_kept = kept.confidence.iter().cloned().fold(f64::INFINITY, f64::min);
        for &i in &dropped {
            prop_assert!(scores[i] <= min_kept);
            if scores[i] == min_kept {
                // equal scores: the dropped query must come after every kept one
                prop_assert!(kept.origin_ids.iter().filter(|&&o| scores[o] == min_kept).all(|&o| o < i));
            }
        }
    }
}

fn text_features<'t>(tape: &'t Tape, tokens: Vec<f64>, k: usize, d: usize) -> TextFeatures<'t> {
    TextFeatures { tokens: tape.constant(tokens, &[k, d]) }
}

#[test]
fn init_selects_everything_when_asked() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = tape.constant(random(&mut rng, 16 * 4), &[16, 4]);
    let text = text_features(&tape, random(&mut rng, 3 * 4), 3, 4);
    let q = init_queries(16, img, text).unwrap();
    assert_eq!(q.len(), 16);
    let mut rows: Vec<Vec<f64>> = q.embeddings.to_vec().chunks(4).map(<[f64]>::to_vec).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut want: Vec<Vec<f64>> = img.to_vec().chunks(4).map(<[f64]>::to_vec).collect();
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(rows, want);
    assert!(matches!(init_queries(17, img, text), Err(Error::Config(_))));
}

#[test]
fn orthogonal_text_keeps_position_order() {
    let tape = Tape::new();
    // image features live in channels 0..2, text in channels 2..4
    let img: Vec<f64> = (0..16).flat_map(|i| [i as f64, 1.0, 0.0, 0.0]).collect();
    let img = tape.constant(img, &[16, 4]);
    let text = text_features(&tape, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], 2, 4);
    let q = init_queries(5, img, text).unwrap();
    assert_eq!(q.embeddings.to_vec().chunks(4).map(|r| r[0]).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    assert_eq!(q.confidence, vec![0.0; 5]);
}

#[test]
fn init_matches_full_sort_oracle() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, k) = (4, 3);
    let img_v = random(&mut rng, 16 * d);
    let txt_v = random(&mut rng, k * d);
    let q = init_queries(4, tape.constant(img_v.clone(), &[16, d]), text_features(&tape, txt_v.clone(), k, d)).unwrap();
    let mut sims: Vec<(f64, usize)> = (0..16)
        .map(|p| {
            let best = (1..k)
                .map(|t| (0..d).map(|c| img_v[p * d + c] * txt_v[t * d + c]).sum::<f64>() / 2.0)
                .fold(f64::NEG_INFINITY, f64::max);
            (best, p)
        })
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let want: Vec<f64> = sims[..4].iter().flat_map(|&(_, p)| img_v[p * d..(p + 1) * d].to_vec()).collect();
    assert_eq!(q.embeddings.to_vec(), want);
    for (c, (s, _)) in q.confidence.iter().zip(&sims) {
        assert!((c - s).abs() < 1e-12);
    }
}

fn small_decoder(store: &mut ParamStore, d: usize, layers: usize, k: usize, n_q: usize) -> QueryDecoder {
    QueryDecoder::new(
        store,
        DecoderConfig {
            dim: d,
            heads: 2,
            num_queries: n_q,
            layers,
            keep_divisor: k,
            min_keep: 1,
        },
    )
    .unwrap()
}

#[test]
fn single_query_attends_to_itself() {
    let mut store = ParamStore::new(1);
    let dec = small_decoder(&mut store, 8, 1, 2, 1);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = ObjectQuerySet {
        embeddings: tape.constant(random(&mut rng, 8), &[1, 8]),
        confidence: vec![0.0],
        origin_ids: vec![0],
    };
    let img = tape.constant(random(&mut rng, 4 * 8), &[4, 8]);
    let text = text_features(&tape, random(&mut rng, 3 * 8), 3, 8);
    let out = dec.layers[0].forward(&p, &q, img, text);
    assert!((out.self_weights[0] - 1.0).abs() < 1e-15);
    assert_eq!(out.queries.embeddings.shape(), vec![1, 8]);
    assert_eq!(out.text_weights.len(), 3);
}

#[test]
fn layer_gradient_matches_finite_differences() {
    let mut store = ParamStore::new(2);
    let dec = small_decoder(&mut store, 16, 1, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, 3 * 16);
    let img = random(&mut rng, 5 * 16);
    let txt = random(&mut rng, 3 * 16);
    let w = random(&mut rng, 3 * 16);
    let err = finite_diff_check(
        |tape, x| {
            let p = store.bind_frozen(tape);
            let q = ObjectQuerySet {
                embeddings: x,
                confidence: vec![0.0; 3],
                origin_ids: vec![0, 1, 2],
            };
            let out = dec.layers[0].forward(
                &p,
                &q,
                tape.constant(img.clone(), &[5, 16]),
                text_features(tape, txt.clone(), 3, 16),
            );
            out.queries.embeddings.mul(tape.constant(w.clone(), &[3, 16])).sum()
        },
        &x,
        &[3, 16],
    );
    assert!(err <= 1e-5, "{err}");
}

fn frame_features(tape: &Tape, h: usize, w: usize, d: usize, seed: u64) -> FrameFeatures<'_> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f64> = random(&mut rng, h * w * d)
        .iter()
        .zip(position_grid(h, w, d))
        .map(|(a, b)| a + b)
        .collect();
    FrameFeatures {
        f_img: tape.constant(f, &[h, w, d]),
        f_seg: tape.zeros(&[2 * h, 2 * w, d]),
    }
}

#[test]
fn decode_ledger_matches_planner() {
    for (k, n_q, layers) in [(1, 20, 3), (2, 37, 4), (3, 64, 5)] {
        let mut store = ParamStore::new(3);
        let dec = small_decoder(&mut store, 8, layers, k, n_q);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let frame = frame_features(&tape, 8, 8, 8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let text = text_features(&tape, random(&mut rng, 4 * 8), 4, 8);
        let (objs, ledger) = dec.decode_frame(&p, &frame, text, Pruning::Confidence).unwrap();
        assert_eq!(ledger, CostLedger::plan(n_q, 8, layers, k, 4, 1));
        if k == 1 {
            assert_eq!(ledger.total(), unpruned_total(n_q, 8, layers));
        }
        let mut n = n_q;
        for _ in 0..layers {
            n = n.div_ceil(k);
        }
        assert_eq!(objs.len(), n);
        assert_eq!(ledger.text_total(), ledger.layers.iter().map(|l| l.n_queries as u128 * 32).sum());
    }
}

#[test]
fn random_pruning_keeps_the_same_count() {
    let mut store = ParamStore::new(4);
    let dec = small_decoder(&mut store, 8, 3, 2, 30);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let frame = frame_features(&tape, 8, 8, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let text = text_features(&tape, random(&mut rng, 3 * 8), 3, 8);
    let (a, _) = dec.decode_frame(&p, &frame, text, Pruning::Confidence).unwrap();
    let (b, _) = dec.decode_frame(&p, &frame, text, Pruning::Random { seed: 5 }).unwrap();
    let (c, _) = dec.decode_frame(&p, &frame, text, Pruning::Random { seed: 5 }).unwrap();
    assert_eq!(a.len(), b.len());
    assert_eq!(b.origin_ids, c.origin_ids);
}

#[test]
fn classification_examples() {
    let tape = Tape::new();
    let obj = tape.constant(vec![1.0, 0.0, 0.0, 0.0], &[1, 4]);
    // CLS is aligned with the object but must be ignored.
    let text = text_features(&tape, vec![5.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], 2, 4);
    assert_eq!(classification_score(obj, text).to_vec(), vec![0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, k, d) = (3, 4, 6);
    let o = random(&mut rng, n * d);
    let t = random(&mut rng, k * d);
    let got = classification_score(tape.constant(o.clone(), &[n, d]), text_features(&tape, t.clone(), k, d)).to_vec();
    for i in 0..n {
        let mut best = f64::NEG_INFINITY;
        for j in 1..k {
            let mut s = 0.0;
            for c in 0..d {
                s += o[i * d + c] * t[j * d + c];
            }
            best = best.max(s / (d as f64).sqrt());
        }
        assert!((got[i] - 1.0 / (1.0 + (-best).exp())).abs() < 1e-14);
    }
}

#[test]
fn classification_is_monotone_in_best_token() {
    let tape = Tape::new();
    let obj = tape.constant(vec![1.0, 1.0], &[1, 2]);
    let mut last = 0.0;
    for step in 0..20 {
        let a = step as f64 * 0.25 - 2.0;
        let text = text_features(&tape, vec![0.0, 0.0, a, 0.0, -1.0, 0.0], 3, 2);
        let s = classification_score(obj, text).item();
        assert!(s >= last);
        last = s;
    }
}
