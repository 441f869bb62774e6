use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_projector() {
    let tape = Tape::new();
    let m = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
    assert_eq!(eye.matmul(m).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    let proj = tape.constant(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]);
    let b = tape.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
    assert_eq!(proj.matmul(b).to_vec(), vec![5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, 12), random(&mut rng, 8));
    let tape = Tape::new();
    let c = tape.constant(a.clone(), &[3, 4]).matmul(tape.constant(b.clone(), &[4, 2])).to_vec();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a[i * 4 + k] * b[k * 2 + j];
            }
            assert_eq!(c[i * 2 + j], s);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let err = tape.zeros(&[2, 3]).try_matmul(tape.zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(vec![0.0; 3], &[1, 3]).softmax_rows().to_vec();
    assert!(close(&s, &[1.0 / 3.0; 3], 1e-15));
    let s = tape.constant(vec![2f64.ln(), 0.0], &[1, 2]).softmax_rows().to_vec();
    assert!(close(&s, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
}

#[test]
fn softmax_rejects_nan() {
    let tape = Tape::new();
    let x = tape.constant(vec![0.0, f64::NAN], &[1, 2]);
    assert!(matches!(x.try_softmax_rows(), Err(Error::NonFinite(_))));
}

#[test]
fn softmax_rows_sum_to_one_on_wide_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    for _ in 0..50 {
        let cols = rng.gen_range(1..20);
        let v: Vec<f64> = (0..4 * cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let s = tape.constant(v, &[4, cols]).softmax_rows().to_vec();
        for row in s.chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 6);
    let w = random(&mut rng, 6);
    let err = finite_diff_check(|t, x| x.softmax_rows().mul(t.constant(w.clone(), &[1, 6])).sum(), &x, &[1, 6]);
    assert!(err <= 1e-6, "{err}");
}

/// The fused multi-head op spelled out with slices, matmuls and row softmax.
fn composed_attention<'t>(q: Tensor<'t>, k: Tensor<'t>, v: Tensor<'t>, heads: usize) -> Tensor<'t> {
    let dh = q.shape()[1] / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<_> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh));
            qh.matmul_nt(kh).scale(scale).softmax_rows().matmul(vh)
        })
        .collect();
    Tensor::concat_cols(&outs)
}

#[test]
fn fused_attention_matches_composed_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (qv, kv, vv, w) = (random(&mut rng, 3 * 6), random(&mut rng, 5 * 6), random(&mut rng, 5 * 6), random(&mut rng, 18));
    let mut grads = Vec::new();
    let mut values = Vec::new();
    for fused in [true, false] {
        let tape = Tape::new();
        let (q, k, v) = (tape.leaf(qv.clone(), &[3, 6]), tape.leaf(kv.clone(), &[5, 6]), tape.leaf(vv.clone(), &[5, 6]));
        let y = if fused {
            let parts = q.multi_head_attention(k, v, 2, true);
            assert_eq!(parts.logits.len(), 2);
            for row in parts.weights.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            parts.output
        } else {
            composed_attention(q, k, v, 2)
        };
        values.push(y.to_vec());
        tape.backward(y.mul(tape.constant(w.clone(), &[3, 6])).sum()).unwrap();
        grads.push([q, k, v].map(|t| t.grad().unwrap()));
    }
    assert!(close(&values[0], &values[1], 1e-13));
    for i in 0..3 {
        assert!(close(&grads[0][i], &grads[1][i], 1e-13));
    }
}

#[test]
fn fused_attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![(random(&mut rng, 8), vec![2, 4]), (random(&mut rng, 12), vec![3, 4]), (random(&mut rng, 12), vec![3, 4])];
    let w = random(&mut rng, 8);
    let err = finite_diff_check_many(
        |t, xs| xs[0].multi_head_attention(xs[1], xs[2], 2, false).output.mul(t.constant(w.clone(), &[2, 4])).sum(),
        &inputs,
    );
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn frozen_attention_keeps_no_weights() {
    let tape = Tape::new();
    let x = tape.constant(vec![0.5; 8], &[2, 4]);
    let parts = x.multi_head_attention(x, x, 4, false);
    assert!(parts.logits.is_empty());
    assert!(parts.weights.iter().all(|&w| w == 0.5));
    assert_eq!(parts.output.to_vec(), vec![0.5; 8]);
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let (g, b) = (tape.constant(vec![1.0; 4], &[4]), tape.zeros(&[4]));
    let y = tape.constant(vec![3.0; 4], &[1, 4]).layer_norm(g, b).to_vec();
    assert!(y.iter().all(|&v| v == 0.0));

    let (g, b) = (tape.constant(vec![1.0; 2], &[2]), tape.zeros(&[2]));
    let y = tape.constant(vec![1.0, -1.0], &[1, 2]).layer_norm(g, b).to_vec();
    // mean 0, variance 1: x / sqrt(1 + eps)
    let want = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert!(close(&y, &[want, -want], 1e-15));
    assert!((y[0] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![
        (random(&mut rng, 10), vec![2, 5]),
        (random(&mut rng, 5), vec![5]),
        (random(&mut rng, 5), vec![5]),
    ];
    let w = random(&mut rng, 10);
    let err = finite_diff_check_many(
        |t, xs| xs[0].layer_norm(xs[1], xs[2]).mul(t.constant(w.clone(), &[2, 5])).sum(),
        &inputs,
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn bilinear_hits_pixel_centres_and_midpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = random(&mut rng, 3 * 4 * 2);
    let tape = Tape::new();
    let m = tape.constant(map.clone(), &[3, 4, 2]);
    // pixel (x=2, y=1): u = 2/3, v = 1/2
    let at = m.bilinear_sample(tape.constant(vec![2.0 / 3.0, 0.5], &[1, 2])).to_vec();
    let px = &map[(4 + 2) * 2..(4 + 3) * 2];
    assert!(close(&at, px, 1e-12));
    // centre of pixels (1,0),(2,0),(1,1),(2,1): x = 1.5, y = 0.5
    let mid = m.bilinear_sample(tape.constant(vec![1.5 / 3.0, 0.25], &[1, 2])).to_vec();
    for c in 0..2 {
        let mean = (map[2 + c] + map[4 + c] + map[10 + c] + map[12 + c]) / 4.0;
        assert!((mid[c] - mean).abs() < 1e-12);
    }
}

#[test]
fn bilinear_clamps_outside_coordinates() {
    let tape = Tape::new();
    let m = tape.constant((0..8).map(f64::from).collect(), &[2, 2, 2]);
    let out = m.bilinear_sample(tape.constant(vec![-0.5, 1.7], &[1, 2])).to_vec();
    // clamps to (u, v) = (0, 1): bottom-left pixel
    assert_eq!(out, vec![4.0, 5.0]);
}

#[test]
fn bilinear_coordinate_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let map = random(&mut rng, 5 * 6 * 3);
        let pts: Vec<f64> = (0..8).map(|_| rng.gen_range(0.05..0.95)).collect();
        let w = random(&mut rng, 12);
        let err = finite_diff_check_many(
            |t, xs| xs[0].bilinear_sample(xs[1]).mul(t.constant(w.clone(), &[4, 3])).sum(),
            &[(map, vec![5, 6, 3]), (pts, vec![4, 2])],
        );
        assert!(err <= 1e-5, "{err}");
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, -2.0, 0.5], &[3]);
    tape.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);

    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, -2.0, 0.5], &[3]);
    tape.backward(x.dot_rows(x)).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], &[2]);
    assert!(matches!(tape.backward(x.scale(2.0)), Err(Error::Contract(_))));
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.3, 0.7], &[2]);
    tape.backward(x.add(x).sum()).unwrap();
    let twice = x.grad().unwrap();
    let tape = Tape::new();
    let x = tape.leaf(vec![0.3, 0.7], &[2]);
    tape.backward(x.sum()).unwrap();
    let once = x.grad().unwrap();
    assert_eq!(twice, once.iter().map(|g| 2.0 * g).collect::<Vec<_>>());
}

#[test]
fn reachable_tracked_tensors_get_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]);
    let h = x.matmul(x).sigmoid();
    let loss = h.sum();
    tape.backward(loss).unwrap();
    for t in [x, h, loss] {
        assert_eq!(t.grad().map(|g| g.len()), Some(t.numel()));
    }
}

#[test]
fn softmax_cross_entropy_composite_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&mut rng, 12);
    let target = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let err = finite_diff_check(
        |t, x| x.softmax_rows().ln().mul(t.constant(target.to_vec(), &[3, 4])).sum().neg(),
        &logits,
        &[3, 4],
    );
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let a = tape.leaf(random(&mut rng, 12), &[3, 4]);
        let b = tape.leaf(random(&mut rng, 8), &[4, 2]);
        let loss = a.matmul(b).gelu().softmax_rows().square().sum();
        tape.backward(loss).unwrap();
        (loss.item().to_bits(), a.grad().unwrap(), b.grad().unwrap())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert_eq!(l1, l2);
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn im2col_then_matmul_is_a_convolution() {
    // 3x3 map, one channel, 2x2 kernel of ones, stride 1, no padding: window sums.
    let tape = Tape::new();
    let x = tape.constant((1..=9).map(f64::from).collect(), &[3, 3, 1]);
    let cols = x.im2col(2, 1, 0);
    assert_eq!(cols.shape(), vec![4, 4]);
    let y = cols.matmul(tape.constant(vec![1.0; 4], &[4, 1])).to_vec();
    assert_eq!(y, vec![12.0, 16.0, 24.0, 28.0]);
}

#[test]
fn upsample_nearest_repeats_pixels() {
    let tape = Tape::new();
    let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2, 1]);
    let y = x.upsample_nearest(2);
    assert_eq!(y.shape(), vec![4, 4, 1]);
    assert_eq!(y.to_vec()[..4], [1.0, 1.0, 2.0, 2.0]);
}
