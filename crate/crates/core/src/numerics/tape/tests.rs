use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `f` on fresh tapes and compares autograd against central
/// differences for every input element.
fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] += H;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[e], fd));
        }
    }
    worst
}

/// Random tensor with entries bounded away from zero (keeps relu kinks out
/// of the finite-difference stencil).
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2f64.copysign(*v);
        }
    }
    t
}

/// Weighted sum so every output element gets a distinct cotangent.
fn project(t: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(t.value(y).shape(), 1.0, &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

#[test]
fn sum_gives_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[2, 3], 0.7));
    let l = t.sum(x);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[4]));
    let s = t.sigmoid(x);
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn backward_twice_rejected() {
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[2], 1.0));
    let l = t.sum(x);
    t.backward(l).unwrap();
    assert!(matches!(t.backward(l), Err(Error::BackwardConsumed)));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[2], 1.0));
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_get_no_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[2], 1.0));
    let c = t.constant(Tensor::full(&[2], 3.0));
    let y = t.mul(x, c).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = away_from_zero(&[3, 4], &mut rng);
    let mut b = away_from_zero(&[3, 4], &mut rng);
    for v in b.data_mut() {
        *v = v.abs() + 0.5;
    }
    let err = check(&[a, b], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let q = t.div(m, v[1]).unwrap();
        let r = t.relu(q);
        let sg = t.sigmoid(v[0]);
        let th = t.tanh(v[1]);
        let e = t.exp(v[0]);
        let e = t.scale(e, 0.3);
        let e = t.add_scalar(e, 1.0);
        let x = t.add(r, sg).unwrap();
        let x = t.mul(x, th).unwrap();
        let x = t.add(x, e).unwrap();
        project(t, x, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn broadcast_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 3, 2, 2, 2], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let c = Tensor::randn(&[3], 1.0, &mut rng);
    let err = check(&[x, b, c], |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        let y = t.mul_bias(y, v[2]).unwrap();
        let r = t.reshape(y, &[6, 8]).unwrap();
        let p = project(t, r, 3);
        let m = t.mean(y);
        let s = t.add(p, m).unwrap();
        t.scale(s, 0.5)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_and_rms_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng);
    let err = check(&[a, w, b], |t, v| {
        let n = t.rms_norm(v[0], 1e-6).unwrap();
        let y = t.dense(n, v[1], v[2]).unwrap();
        project(t, y, 4)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[2, 2, 5, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3, 3], 0.5, &mut rng);
    let wt = Tensor::randn(&[3, 2, 3, 3, 3], 0.5, &mut rng);
    let err = check(&[x, w, wt], |t, v| {
        let y = t.conv3d(v[0], v[1], 2, 1).unwrap();
        let z = t.conv_transpose3d(y, v[2], 2, 1, 0).unwrap();
        assert_eq!(t.value(z).shape(), &[2, 2, 5, 5, 5]);
        project(t, z, 5)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn row_and_column_plumbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 6], 1.0, &mut rng);
    let err = check(&[a, b], |t, v| {
        let g = t.gather_rows(v[0], &[3, 0, 0, 2]).unwrap();
        let c = t.concat_rows(&[g, v[1]]).unwrap();
        let s = t.slice_cols(c, 2, 3).unwrap();
        project(t, s, 6)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn favor_features_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let map = Arc::new(KernelFeatureMap::softmax_favor(3, 7, 11).unwrap());
    let x = Tensor::randn(&[4, 3], 0.5, &mut rng);
    let err = check(&[x], |t, v| {
        let f = t.favor_features(v[0], map.clone()).unwrap();
        project(t, f, 7)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn causal_linear_attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Two sequences of length 3, positive features.
    let map = Arc::new(KernelFeatureMap::softmax_favor(3, 5, 2).unwrap());
    let q = Tensor::randn(&[6, 3], 0.5, &mut rng);
    let k = Tensor::randn(&[6, 3], 0.5, &mut rng);
    let v = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let err = check(&[q, k, v], |t, vs| {
        let fq = t.favor_features(vs[0], map.clone()).unwrap();
        let fk = t.favor_features(vs[1], map.clone()).unwrap();
        let y = t.causal_linear_attention(fq, fk, vs[2], 3).unwrap();
        project(t, y, 8)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn causal_linear_relu_features_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut q = away_from_zero(&[4, 3], &mut rng);
    let mut k = away_from_zero(&[4, 3], &mut rng);
    // Keep every row's support overlapping so no row is degenerate.
    for r in 0..4 {
        q.data_mut()[r * 3] = 1.0 + r as f64 * 0.1;
        k.data_mut()[r * 3] = 0.5 + r as f64 * 0.2;
    }
    let v = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let err = check(&[q, k, v], |t, vs| {
        let fq = t.relu(vs[0]);
        let fk = t.relu(vs[1]);
        let y = t.causal_linear_attention(fq, fk, vs[2], 4).unwrap();
        project(t, y, 9)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn causal_exact_attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = Tensor::randn(&[6, 3], 0.7, &mut rng);
    let k = Tensor::randn(&[6, 3], 0.7, &mut rng);
    let v = Tensor::randn(&[6, 2], 1.0, &mut rng);
    let err = check(&[q.clone(), k.clone(), v.clone()], |t, vs| {
        let y = t.causal_exact_attention(vs[0], vs[1], vs[2], 3, KernelKind::Softmax).unwrap();
        project(t, y, 10)
    });
    assert!(err < 1e-4, "{err}");

    let mut q = away_from_zero(&[4, 3], &mut rng);
    let mut k = away_from_zero(&[4, 3], &mut rng);
    for r in 0..4 {
        q.data_mut()[r * 3] = 1.0;
        k.data_mut()[r * 3] = 0.3 + 0.1 * r as f64;
    }
    let err = check(&[q, k, v.clone().reshape(&[6, 2]).unwrap()], |t, vs| {
        let vv = t.gather_rows(vs[2], &[0, 1, 2, 3]).unwrap();
        let y = t.causal_exact_attention(vs[0], vs[1], vv, 4, KernelKind::Relu).unwrap();
        project(t, y, 11)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn relu_linear_and_exact_agree_including_degenerate_rows() {
    // Row 0 of q overlaps nothing: both paths fall back to v_0.
    let q = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let k = Tensor::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.0]]).unwrap();
    let v = Tensor::from_rows(&[vec![3.0], vec![5.0]]).unwrap();
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.param(q), t.param(k), t.param(v));
    let fq = t.relu(qv);
    let fk = t.relu(kv);
    let lin = t.causal_linear_attention(fq, fk, vv, 2).unwrap();
    let ex = t.causal_exact_attention(qv, kv, vv, 2, KernelKind::Relu).unwrap();
    assert!((t.value(lin).data()[0] - 3.0).abs() < 1e-15);
    assert!((t.value(lin).data()[1] - 13.0 / 3.0).abs() < 1e-12);
    assert!(t.value(lin).max_abs_diff(t.value(ex)) < 1e-15);
    let l = t.sum(lin);
    let g = t.backward(l).unwrap();
    // d out_0 / d v_0 = 1 through the fallback.
    assert!(g.get(vv).unwrap().data()[0] >= 1.0);
}

#[test]
fn bce_values_and_gradient() {
    let mut t = Tape::new();
    let p = t.param(Tensor::full(&[8], 0.5));
    let target = Tensor::new(vec![8], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = t.bce_mean(p, &target, 1e-7).unwrap();
    assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z = Tensor::randn(&[10], 1.0, &mut rng);
    let target = Tensor::new(vec![10], (0..10).map(|i| (i % 2) as f64).collect()).unwrap();
    let err = check(&[z], |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce_mean(p, &target, 1e-7).unwrap()
    });
    assert!(err < 1e-6, "{err}");

    let mut t = Tape::new();
    let p = t.param(Tensor::full(&[2], 0.5));
    let bad = Tensor::new(vec![2], vec![0.0, 1.5]).unwrap();
    assert!(t.bce_mean(p, &bad, 1e-7).is_err());
}

#[test]
fn forward_values_finite_and_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[1, 1, 6, 6, 6], 1.0, &mut rng));
        let w = t.param(Tensor::randn(&[2, 1, 3, 3, 3], 1.0, &mut rng));
        let y = t.conv3d(x, w, 2, 1).unwrap();
        let y = t.sigmoid(y);
        t.value(y).clone()
    };
    let a = build();
    assert!(a.is_finite());
    assert_eq!(a, build());
}
