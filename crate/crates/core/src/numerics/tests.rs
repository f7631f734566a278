use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Dense reference attention written with plain loops.
fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rows: usize,
    width: usize,
    spec: &AttentionSpec,
) -> Vec<f64> {
    let dk = width / spec.n_heads;
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let g = r / spec.group_len;
        if !spec.group_active[g] {
            continue;
        }
        let keys: Vec<usize> = (g * spec.group_len..(g + 1) * spec.group_len)
            .filter(|&j| spec.key_valid[j])
            .collect();
        for h in 0..spec.n_heads {
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    (0..dk).map(|c| q[r * width + h * dk + c] * k[j * width + h * dk + c]).sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (s, &j) in scores.iter().zip(&keys) {
                let p = (s - max).exp() / z;
                for c in 0..dk {
                    out[r * width + h * dk + c] += p * v[j * width + h * dk + c];
                }
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let a = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
    let c = tape.matmul(i2, a).unwrap();
    assert_eq!(tape.value(c), &[1., 2., 3., 4.]);
    let col = tape.constant(&t(&[2, 1], &[0., 1.]));
    let c = tape.matmul(a, col).unwrap();
    assert_eq!(tape.value(c), &[2., 4.]);
    assert!(matches!(tape.matmul(col, col), Err(NestError::Dimension(_))));
}

#[test]
fn matmul_grad_of_sum_is_row_broadcast() {
    let mut params = ParamSet::new();
    let a = params.add("a", t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, 1.5, -0.2]));
    let mut tape = Tape::new();
    let av = tape.param(&params, a);
    let b = tape.constant(&t(&[2, 1], &[1., 1.]));
    let c = tape.matmul(av, b).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss, &mut params).unwrap();
    assert_eq!(params.get(a).grad().unwrap(), &[1.0; 6]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 3], &[0., 0., 0.]));
    let y = tape.softmax_rows(x, None).unwrap();
    for &p in tape.value(y) {
        assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
    }
    let x = tape.constant(&t(&[1, 2], &[2f64.ln(), 0.]));
    let y = tape.softmax_rows(x, None).unwrap();
    assert_abs_diff_eq!(tape.value(y)[0], 2.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(y)[1], 1.0 / 3.0, epsilon = 1e-15);
    let x = tape.constant(&t(&[1, 2], &[5., 1.]));
    let y = tape.softmax_rows(x, Some(&[false, true])).unwrap();
    assert_eq!(tape.value(y), &[0.0, 1.0]);
    let err = tape.softmax_rows(x, Some(&[false, false])).unwrap_err();
    assert!(matches!(err, NestError::DegenerateRow { row: 0 }));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(&t(&[4], &[1.; 4]));
    let x = tape.constant(&t(&[1, 4], &[1.; 4]));
    let y = tape.layer_norm(x, ones).unwrap();
    assert_eq!(tape.value(y), &[0.0; 4]);

    let g1 = tape.constant(&t(&[2], &[1., 1.]));
    let g2 = tape.constant(&t(&[2], &[2., 2.]));
    let x = tape.constant(&t(&[1, 2], &[-1., 1.]));
    let y1 = tape.layer_norm(x, g1).unwrap();
    assert_abs_diff_eq!(tape.value(y1)[0], -1.0, epsilon = 1e-5);
    assert_abs_diff_eq!(tape.value(y1)[1], 1.0, epsilon = 1e-5);
    let y1 = tape.value(y1).to_vec();
    let y2 = tape.layer_norm(x, g2).unwrap();
    for (a, b) in y1.iter().zip(tape.value(y2)) {
        assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-15);
    }
    let narrow = tape.constant(&t(&[1, 1], &[3.]));
    let g = tape.constant(&t(&[1], &[1.]));
    assert!(tape.layer_norm(narrow, g).is_err());
}

#[test]
fn swiglu_examples() {
    let mut tape = Tape::new();
    let w = tape.constant(&t(&[1, 1], &[1.]));
    let zero = tape.constant(&t(&[1, 1], &[0.]));
    let y = tape.swiglu(zero, w, w, w).unwrap();
    assert_eq!(tape.value(y), &[0.0]);
    let one = tape.constant(&t(&[1, 1], &[1.]));
    let y = tape.swiglu(one, w, w, w).unwrap();
    assert_abs_diff_eq!(tape.value(y)[0], 0.731059, epsilon = 1e-6);
    let bad = tape.constant(&t(&[2, 1], &[1., 1.]));
    assert!(tape.swiglu(one, bad, w, w).is_err());
}

#[test]
fn swiglu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&mut rng, &[3, 4]));
    let wi = params.add("wi", random(&mut rng, &[4, 5]));
    let wg = params.add("wg", random(&mut rng, &[4, 5]));
    let wo = params.add("wo", random(&mut rng, &[5, 4]));
    let err = finite_diff_check(
        |tape, p| {
            let (x, wi, wg, wo) = (tape.param(p, x), tape.param(p, wi), tape.param(p, wg), tape.param(p, wo));
            let y = tape.swiglu(x, wi, wg, wo)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        },
        &mut params,
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn rope_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 4], &[0.3, -0.7, 1.1, 0.2]));
    let y = tape.rope(x, &[0.0], 1, 10000.0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let x = tape.constant(&t(&[1, 2], &[1.0, 0.0]));
    let y = tape.rope(x, &[1.0], 1, 10000.0).unwrap();
    assert_abs_diff_eq!(tape.value(y)[0], 1f64.cos(), epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(y)[1], 1f64.sin(), epsilon = 1e-15);
    let odd = tape.constant(&t(&[1, 3], &[1., 2., 3.]));
    assert!(matches!(tape.rope(odd, &[1.0], 1, 10000.0), Err(NestError::Config(_))));
}

fn rope_score(q: &[f64], k: &[f64], i: f64, j: f64) -> f64 {
    let mut tape = Tape::new();
    let qv = tape.constant(&t(&[1, q.len()], q));
    let kv = tape.constant(&t(&[1, k.len()], k));
    let qr = tape.rope(qv, &[i], 2, 10000.0).unwrap();
    let kr = tape.rope(kv, &[j], 2, 10000.0).unwrap();
    tape.value(qr).iter().zip(tape.value(kr)).map(|(a, b)| a * b).sum()
}

proptest! {
    #[test]
    fn rope_scores_depend_only_on_offset(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        i in 0usize..64,
        j in 0usize..64,
    ) {
        let base = rope_score(&q, &k, i as f64, j as f64);
        for s in [1.0, 5.0, 100.0] {
            let shifted = rope_score(&q, &k, i as f64 + s, j as f64 + s);
            prop_assert!((base - shifted).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        x in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for r in 0..3 { mask[r * 4] = true; }
        let mut tape = Tape::new();
        let xv = tape.constant(&t(&[3, 4], &x));
        let y = tape.softmax_rows(xv, Some(&mask)).unwrap();
        for r in 0..3 {
            let row = &tape.value(y)[r * 4..r * 4 + 4];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..4 {
                if !mask[r * 4 + c] { prop_assert_eq!(row[c], 0.0); }
            }
        }
    }

    #[test]
    fn kl_gradient_is_pi_minus_p(
        logits in prop::collection::vec(-5.0f64..5.0, 2..64),
        weights in prop::collection::vec(0.0f64..1.0, 64),
    ) {
        let v = logits.len();
        let mut w: Vec<f64> = weights[..v].to_vec();
        w[0] += 0.1;
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / z).collect();
        let mut params = ParamSet::new();
        let o = params.add("o", t(&[1, v], &logits));
        let mut tape = Tape::new();
        let ov = tape.param(&params, o);
        let loss = kl_simplex_loss(&mut tape, &t(&[v], &p), ov).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zs: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        for i in 0..v {
            let pi = (logits[i] - max).exp() / zs;
            prop_assert!((params.get(o).grad().unwrap()[i] - (pi - p[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn split_backward_equals_joint_backward(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let a = params.add("a", random(&mut rng, &[3, 4]));
        let b = params.add("b", random(&mut rng, &[4, 2]));
        let g = params.add("g", random(&mut rng, &[2]));
        let l1 = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
            let (a, b) = (tape.param(p, a), tape.param(p, b));
            let c = tape.matmul(a, b).unwrap();
            let c = tape.silu(c);
            tape.sum(c)
        };
        let l2 = |tape: &mut Tape<f64>, p: &ParamSet<f64>| {
            let (a, b, g) = (tape.param(p, a), tape.param(p, b), tape.param(p, g));
            let c = tape.matmul(a, b).unwrap();
            let c = tape.layer_norm(c, g).unwrap();
            let c = tape.gelu(c);
            tape.mean(c)
        };
        let mut sep = params.clone();
        let mut tape = Tape::new();
        let x = l1(&mut tape, &sep);
        tape.backward(x, &mut sep).unwrap();
        let mut tape = Tape::new();
        let y = l2(&mut tape, &sep);
        tape.backward(y, &mut sep).unwrap();

        let mut joint = params.clone();
        let mut tape = Tape::new();
        let x = l1(&mut tape, &joint);
        let y = l2(&mut tape, &joint);
        let s = tape.add(x, y).unwrap();
        tape.backward(s, &mut joint).unwrap();
        for id in params.ids() {
            for (u, v) in sep.get(id).grad().unwrap().iter().zip(joint.get(id).grad().unwrap()) {
                prop_assert!((u - v).abs() <= 1e-12 * (u.abs() + v.abs()).max(1e-300));
            }
        }
    }
}

#[test]
fn kl_examples() {
    let mut tape = Tape::new();
    let o = tape.constant(&t(&[1, 3], &[0.2, -1.0, 0.7]));
    let pi = tape.softmax_rows(o, None).unwrap();
    let p = t(&[3], tape.value(pi));
    let loss = kl_simplex_loss(&mut tape, &p, o).unwrap();
    assert_abs_diff_eq!(tape.item(loss), 0.0, epsilon = 1e-15);

    let mut params = ParamSet::new();
    let o = params.add("o", t(&[1, 4], &[0.0; 4]));
    let mut tape = Tape::new();
    let ov = tape.param(&params, o);
    let loss = kl_simplex_loss(&mut tape, &t(&[4], &[0.5, 0.5, 0., 0.]), ov).unwrap();
    assert_abs_diff_eq!(tape.item(loss), 2f64.ln(), epsilon = 1e-15);
    tape.backward(loss, &mut params).unwrap();
    let g = params.get(o).grad().unwrap();
    for (a, b) in g.iter().zip([-0.25, -0.25, 0.25, 0.25]) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
    }

    let v = 45000;
    let mut p = vec![0.0; v];
    p[10..42].iter_mut().for_each(|x| *x = 1.0 / 32.0);
    let mut tape = Tape::new();
    let o = tape.constant(&Tensor::zeros(&[1, v]));
    let loss = kl_simplex_loss(&mut tape, &t(&[v], &p), o).unwrap();
    assert_abs_diff_eq!(tape.item(loss), 7.248682, epsilon = 1e-6);
    assert_abs_diff_eq!(tape.item(loss), (45000f64 / 32.0).ln(), epsilon = 1e-12);

    let o = tape.constant(&Tensor::zeros(&[1, 3]));
    assert!(matches!(
        kl_simplex_loss(&mut tape, &t(&[3], &[0.5, 0.4, 0.0]), o),
        Err(NestError::Input(_))
    ));
}

#[test]
fn kl_gradient_agrees_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::new();
    let o = params.add("o", random(&mut rng, &[1, 9]));
    let p = t(&[9], &[0.2, 0.0, 0.3, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0]);
    let err = finite_diff_check(|tape, ps| {
        let ov = tape.param(ps, o);
        kl_simplex_loss(tape, &p, ov)
    }, &mut params, 1e-5, None)
    .unwrap();
    assert!(err < 1e-8, "relative error {err}");
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let confident = tape.constant(&t(&[2, 3], &[100., 0., 0., 0., 0., 100.]));
    let loss = tape.cross_entropy(confident, &[0, 2], &[true, true]).unwrap();
    assert!(tape.item(loss) < 1e-30);
    let uniform = tape.constant(&Tensor::zeros(&[2, 7]));
    let loss = tape.cross_entropy(uniform, &[3, 4], &[true, true]).unwrap();
    assert_abs_diff_eq!(tape.item(loss), 7f64.ln(), epsilon = 1e-15);

    let logits = tape.constant(&t(&[2, 3], &[0.1, 0.9, -0.4, 2.0, 0.0, 1.0]));
    let one = tape.cross_entropy(logits, &[1, 0], &[true, false]).unwrap();
    let row = tape.constant(&t(&[1, 3], &[0.1, 0.9, -0.4]));
    let single = tape.cross_entropy(row, &[1], &[true]).unwrap();
    assert_eq!(tape.item(one), tape.item(single));
    assert!(matches!(
        tape.cross_entropy(logits, &[1, 0], &[false, false]),
        Err(NestError::EmptySupervision)
    ));
}

#[test]
fn backward_examples() {
    let mut params = ParamSet::new();
    let x = params.add("x", t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
    let y = params.add("y", t(&[3], &[0.5, -1.5, 2.0]));
    let z = params.add("z", t(&[3], &[4.0, 1.0, -3.0]));
    let mut tape = Tape::new();
    let xv = tape.param(&params, x);
    let s = tape.sum(xv);
    tape.backward(s, &mut params).unwrap();
    assert_eq!(params.get(x).grad().unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let (yv, zv) = (tape.param(&params, y), tape.param(&params, z));
    let prod = tape.mul(yv, zv).unwrap();
    let dot = tape.sum(prod);
    tape.backward(dot, &mut params).unwrap();
    assert_eq!(params.get(y).grad().unwrap(), params.get(z).data());

    let mut tape = Tape::new();
    let xv = tape.param(&params, x);
    assert!(matches!(tape.backward(xv, &mut params), Err(NestError::Usage(_))));
}

#[test]
fn quadratic_gradient_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::new();
    params.add("x", random(&mut rng, &[5]));
    let err = finite_diff_check(
        |tape, p| {
            let x = tape.param(p, ParamId(0));
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        },
        &mut params,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-9, "relative error {err}");
    assert!(matches!(
        finite_diff_check(|tape, p| Ok(tape.param(p, ParamId(0))), &mut params, 1.0, None),
        Err(NestError::Oracle(_))
    ));
}

#[test]
fn attention_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // three groups of five rows, two heads of width 4; the last group is inactive
    let (rows, width) = (15, 8);
    let q = random(&mut rng, &[rows, width]);
    let k = random(&mut rng, &[rows, width]);
    let v = random(&mut rng, &[rows, width]);
    let mut key_valid = vec![true; rows];
    key_valid[1] = false;
    key_valid[7] = false;
    key_valid[9] = false;
    let spec = AttentionSpec {
        n_heads: 2,
        group_len: 5,
        key_valid,
        group_active: vec![true, true, false],
    };
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
    let out = tape.attention(qv, kv, vv, spec.clone()).unwrap();
    let expect = naive_attention(q.data(), k.data(), v.data(), rows, width, &spec);
    for (a, b) in tape.value(out).iter().zip(&expect) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }

    let mut degenerate = spec;
    degenerate.key_valid[10..15].iter_mut().for_each(|x| *x = false);
    degenerate.group_active[2] = true;
    assert!(matches!(
        tape.attention(qv, kv, vv, degenerate),
        Err(NestError::DegenerateRow { row: 10 })
    ));
}

#[test]
fn large_group_attention_matches_reference() {
    // group longer than one query block exercises the blocked path
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (rows, width) = (150, 4);
    let q = random(&mut rng, &[rows, width]);
    let k = random(&mut rng, &[rows, width]);
    let v = random(&mut rng, &[rows, width]);
    let mut spec = AttentionSpec::dense(2, rows);
    spec.key_valid[3] = false;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
    let out = tape.attention(qv, kv, vv, spec.clone()).unwrap();
    let expect = naive_attention(q.data(), k.data(), v.data(), rows, width, &spec);
    for (a, b) in tape.value(out).iter().zip(&expect) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn differentiable_ops_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = ParamSet::new();
    let x = params.add("x", random(&mut rng, &[6, 4]));
    let w = params.add("w", random(&mut rng, &[4, 4]));
    let gain = params.add("gain", random(&mut rng, &[4]));
    let omega = params.add("omega", random(&mut rng, &[4]));
    let phi = params.add("phi", random(&mut rng, &[4]));
    let emb = params.add("emb", random(&mut rng, &[5, 4]));
    let keys = vec![true, false, true, true, true, true];
    let positions = [0.0, 1.0, 2.0, 3.0, 7.0, 9.0];
    let times = [0.5, 1.5, 3.0];
    let err = finite_diff_check(
        |tape, p| {
            let x = tape.param(p, x);
            let w = tape.param(p, w);
            let gain = tape.param(p, gain);
            let h = tape.layer_norm(x, gain)?;
            let (om, ph) = (tape.param(p, omega), tape.param(p, phi));
            let tv = tape.time2vec(&times, om, ph)?;
            let tv = tape.expand_rows(tv, 2, true);
            let h = tape.add(h, tv)?;
            let q = tape.matmul(h, w)?;
            let q = tape.rope(q, &positions, 2, 10000.0)?;
            let k = tape.matmul_nt(h, w)?;
            let k = tape.rope(k, &positions, 2, 10000.0)?;
            let spec = AttentionSpec {
                n_heads: 2,
                group_len: 3,
                key_valid: keys.clone(),
                group_active: vec![true, true],
            };
            let a = tape.attention(q, k, h, spec)?;
            let a = tape.gelu(a);
            let picked = tape.gather_rows(a, &[0, 3, 5])?;
            let e = tape.param(p, emb);
            let tok = tape.embedding(e, &[4, 1, 1])?;
            let mixed = tape.add(picked, tok)?;
            let back = tape.scatter_rows(a, mixed, &[1, 4, 2])?;
            let logits = tape.matmul_nt(back, e)?;
            let ce = tape.cross_entropy(logits, &[0, 1, 2, 3, 4, 0], &[true, false, true, true, false, true])?;
            let sm = tape.softmax_rows(logits, None)?;
            let sm = tape.silu(sm);
            let extra = tape.mean(sm);
            let two = tape.scale(extra, 2.0);
            let kl_rows = tape.gather_rows(logits, &[0, 2])?;
            let kl = tape.kl_simplex(kl_rows, &[vec![(1, 0.5), (3, 0.5)], vec![(0, 1.0)]])?;
            let s = tape.add(ce, two)?;
            tape.add(s, kl)
        },
        &mut params,
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn dropout_gradient_follows_the_kept_mask() {
    let mut params = ParamSet::new();
    let x = params.add("x", t(&[1, 200], &[1.0; 200]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let xv = tape.param(&params, x);
    let y = tape.dropout(xv, 0.5, &mut rng);
    let s = tape.sum(y);
    tape.backward(s, &mut params).unwrap();
    let g = params.get(x).grad().unwrap();
    for (gi, yi) in g.iter().zip(tape.value(y)) {
        assert_eq!(gi, yi);
        assert!(*gi == 0.0 || *gi == 2.0);
    }
    let mut tape = Tape::new();
    let xv = tape.param(&params, x);
    assert_eq!(tape.dropout(xv, 0.0, &mut rng), xv);
}

#[test]
fn single_precision_engine_runs() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(&Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = tape.matmul(a, a).unwrap();
    assert_eq!(tape.value(b), &[7.0f32, 10.0, 15.0, 22.0]);
}
