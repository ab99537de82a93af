use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Central-difference check of `f` at `inputs`; `f` must build a scalar.
fn check<Fn_>(inputs: Vec<Tensor<f64>>, f: Fn_)
where
    Fn_: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-5, "input {i} elem {j}: fd {fd} vs analytic {an}");
        }
    }
}

/// Weighted sum to turn any tensor into a scalar with non-trivial upstream gradient.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(x), &mut rng);
    let n = w.numel();
    let wv = g.constant(w);
    let xf = g.reshape(x, &[1, n]);
    let wf = g.reshape(wv, &[n, 1]);
    let prod = g.matmul(xf, wf);
    g.sum(prod)
}

#[test]
fn matmul_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[4, 3], &mut rng) } else { random(&[3, 4], &mut rng) };
        let b = if tb { random(&[2, 4], &mut rng) } else { random(&[4, 2], &mut rng) };
        check(vec![a, b], |g, v| {
            let y = g.matmul_t(v[0], v[1], ta, tb);
            readout(g, y, 9)
        });
    }
}

#[test]
fn broadcast_scale_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let s = random(&[], &mut rng);
    check(vec![x, b, s], |g, v| {
        let y = g.add_broadcast(v[0], v[1]);
        let y = g.gelu(y);
        let y = g.scale_by(y, v[2]);
        let y = g.scale(y, 0.7);
        let r = g.relu(y);
        let y = g.add(y, r);
        readout(g, y, 3)
    });
}

#[test]
fn layer_norm_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 5], &mut rng);
    let gamma = random(&[5], &mut rng);
    let beta = random(&[5], &mut rng);
    check(vec![x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        readout(g, y, 4)
    });
}

#[test]
fn conv_and_pool_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 5, 6, 2], &mut rng);
    let w = random(&[9 * 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad);
            readout(g, y, 5)
        });
    }
    let x = random(&[2, 4, 4, 3], &mut rng);
    check(vec![x], |g, v| {
        let y = g.max_pool2(v[0]);
        readout(g, y, 6)
    });
}

#[test]
fn attention_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qkv = random(&[2, 3, 12], &mut rng);
    for heads in [1, 2] {
        check(vec![qkv.clone()], |g, v| {
            let y = g.attention(v[0], heads);
            readout(g, y, 7)
        });
    }
}

#[test]
fn set_ops_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 3, 4], &mut rng);
    check(vec![x], |g, v| {
        let m = g.mean_axis1(v[0]);
        let n = g.l2_normalize_rows(m);
        let r = g.reshape(v[0], &[6, 4]);
        let gathered = g.gather_rows(r, vec![5, 0, 0, 2]);
        let s = g.row_scale(gathered, vec![0.5, 2.0, 1.0, 0.0]);
        let a = readout(g, n, 8);
        let b = readout(g, s, 10);
        let both = g.add(a, b);
        g.sum(both)
    });
}

#[test]
fn soft_cross_entropy_grad_and_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&[3, 4], &mut rng);
    let mut t = random(&[3, 4], &mut rng).map(f64::abs);
    for r in 0..3 {
        let s: f64 = t.row(r).iter().sum();
        for j in 0..4 {
            t.data_mut()[r * 4 + j] /= s;
        }
    }
    let weights = vec![1.0, 0.5, 2.0];
    let tt = t.clone();
    let ww = weights.clone();
    check(vec![logits.clone()], move |g, v| {
        g.soft_cross_entropy(v[0], tt.clone(), ww.clone())
    });
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = g.soft_cross_entropy(l, t.clone(), weights.clone());
    let mut expect = 0.0;
    for r in 0..3 {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            expect -= weights[r] * t.row(r)[j] * (row[j].exp() / z).ln();
        }
    }
    assert!((g.value(out).item() - expect).abs() < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let c = g.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let p = g.param(Tensor::from_vec(&[2], vec![3.0, 4.0]));
    let y = g.add(c, p);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn token_ops_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 4], &mut rng);
    let tok = random(&[4], &mut rng);
    check(vec![x, tok], |g, v| {
        let y = g.prepend_token(v[0], v[1]);
        let s = g.slice_tokens(y, 1, 2);
        let a = readout(g, y, 11);
        let b = readout(g, s, 12);
        let both = g.add(a, b);
        g.sum(both)
    });
}
