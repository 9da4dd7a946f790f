//! Finite-difference verification of every primitive's reverse-mode gradient.
//!
//! Central differences at step 1e-5 in double precision; relative error
//! `|a - b| / max(1, |a|, |b|)` must stay below 1e-4 on random inputs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spmix::tensor::{Graph, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Checks analytic gradients of `f` against central differences for every
/// element of every input.
fn gradcheck(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], f: impl Fn(&mut Graph, &[Tensor]) -> Tensor) {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| {
            Tensor::new(shape.clone(), data.clone())
                .unwrap()
                .requires_grad(true)
        })
        .collect();
    let mut g = Graph::new();
    let loss = f(&mut g, &leaves);
    assert!(loss.is_scalar(), "{name}: loss must be scalar");
    g.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| t.grad_or_zeros()).collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(data)
            .map(|((shape, _), d)| Tensor::new(shape.clone(), d.clone()).unwrap())
            .collect();
        let mut g = Graph::new();
        f(&mut g, &ts).item()
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    for (ti, (_, data)) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[ti][ei] += STEP;
            let mut minus = base.clone();
            minus[ti][ei] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let an = analytic[ti][ei];
            assert!(
                rel_err(an, fd) < TOL,
                "{name}: input {ti} element {ei}: analytic {an} vs fd {fd}"
            );
        }
    }
}

fn randu(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn elementwise_same_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = randu(&mut rng, 6, -2.0, 2.0);
    let b = randu(&mut rng, 6, 0.5, 2.0);
    gradcheck("add", &[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())], |g, t| {
        let y = g.add(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
    gradcheck("sub", &[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())], |g, t| {
        let y = g.sub(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
    gradcheck("mul", &[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())], |g, t| {
        let y = g.mul(&t[0], &t[1]).unwrap();
        let y2 = g.mul(&y, &y).unwrap(); // exercise fan-out through both
        g.sum_all(&y2).unwrap()
    });
    gradcheck("div", &[(vec![2, 3], a), (vec![2, 3], b)], |g, t| {
        let y = g.div(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
}

#[test]
fn elementwise_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // bias-style suffix broadcast [2,3,4] + [4]
    let x = randu(&mut rng, 24, -1.0, 1.0);
    let b = randu(&mut rng, 4, -1.0, 1.0);
    gradcheck("add [2,3,4]+[4]", &[(vec![2, 3, 4], x.clone()), (vec![4], b)], |g, t| {
        let y = g.add(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
    // ratio-style trailing-one broadcast [2,3,4] * [2,3,1]
    let r = randu(&mut rng, 6, 0.1, 0.9);
    gradcheck("mul [2,3,4]*[2,3,1]", &[(vec![2, 3, 4], x.clone()), (vec![2, 3, 1], r.clone())], |g, t| {
        let y = g.mul(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
    // rank-extension broadcast [3,4] with [2,3,4]
    let w = randu(&mut rng, 12, 0.5, 1.5);
    gradcheck("div [2,3,4]/[3,4]", &[(vec![2, 3, 4], x.clone()), (vec![3, 4], w)], |g, t| {
        let y = g.div(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
    // scalar [] against matrix
    let s = randu(&mut rng, 1, 0.5, 1.5);
    gradcheck("mul []*[2,3,4]", &[(vec![], s), (vec![2, 3, 4], x)], |g, t| {
        let y = g.mul(&t[0], &t[1]).unwrap();
        g.sum_all(&y).unwrap()
    });
    // column vs row: [3,1] + [1,4]
    let c = randu(&mut rng, 3, -1.0, 1.0);
    let rr = randu(&mut rng, 4, -1.0, 1.0);
    gradcheck("add [3,1]+[1,4]", &[(vec![3, 1], c), (vec![1, 4], rr)], |g, t| {
        let y = g.add(&t[0], &t[1]).unwrap();
        let y2 = g.mul(&y, &y).unwrap();
        g.sum_all(&y2).unwrap()
    });
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randu(&mut rng, 8, -1.5, 1.5);
    gradcheck("exp", &[(vec![8], x.clone())], |g, t| {
        let y = g.exp(&t[0]).unwrap();
        g.sum_all(&y).unwrap()
    });
    gradcheck("add_scalar/mul_scalar", &[(vec![8], x.clone())], |g, t| {
        let y = g.add_scalar(&t[0], 0.7).unwrap();
        let y = g.mul_scalar(&y, -2.5).unwrap();
        let y = g.mul(&y, &y).unwrap();
        g.sum_all(&y).unwrap()
    });
    let pos = randu(&mut rng, 8, 0.3, 3.0);
    gradcheck("log", &[(vec![8], pos.clone())], |g, t| {
        let y = g.log(&t[0]).unwrap();
        g.sum_all(&y).unwrap()
    });
    gradcheck("sqrt", &[(vec![8], pos)], |g, t| {
        let y = g.sqrt(&t[0]).unwrap();
        g.sum_all(&y).unwrap()
    });
    // keep values away from the relu kink so central differences are valid
    let gap: Vec<f64> = randu(&mut rng, 8, 0.1, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v } else { -v })
        .collect();
    gradcheck("relu", &[(vec![8], gap)], |g, t| {
        let y = g.relu(&t[0]).unwrap();
        let y2 = g.mul(&y, &y).unwrap();
        g.sum_all(&y2).unwrap()
    });
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = randu(&mut rng, 6, -1.0, 1.0);
    let b = randu(&mut rng, 12, -1.0, 1.0);
    gradcheck("matmul 2d", &[(vec![2, 3], a), (vec![3, 4], b.clone())], |g, t| {
        let y = g.matmul(&t[0], &t[1]).unwrap();
        let y2 = g.mul(&y, &y).unwrap();
        g.sum_all(&y2).unwrap()
    });
    let ab = randu(&mut rng, 24, -1.0, 1.0);
    let bb = randu(&mut rng, 24, -1.0, 1.0);
    gradcheck(
        "matmul batched",
        &[(vec![2, 2, 3, 2], ab.clone()), (vec![2, 2, 2, 3], bb)],
        |g, t| {
            let y = g.matmul(&t[0], &t[1]).unwrap();
            let y2 = g.mul(&y, &y).unwrap();
            g.sum_all(&y2).unwrap()
        },
    );
    // batched lhs with shared rank-2 rhs (linear layer on tokens)
    gradcheck(
        "matmul shared rhs",
        &[(vec![2, 2, 3, 2], ab), (vec![2, 5], randu(&mut rng, 10, -1.0, 1.0))],
        |g, t| {
            let y = g.matmul(&t[0], &t[1]).unwrap();
            let y2 = g.mul(&y, &y).unwrap();
            g.sum_all(&y2).unwrap()
        },
    );
}

#[test]
fn conv2d_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for &(h, w, c, kh, kw, oc, stride, pad) in &[
        (5usize, 5usize, 1usize, 3usize, 3usize, 2usize, 1usize, 0usize),
        (5, 4, 2, 3, 3, 2, 1, 1),
        (6, 6, 3, 3, 3, 2, 2, 1),
        (4, 4, 2, 2, 2, 3, 2, 0),
    ] {
        let x = randu(&mut rng, 2 * h * w * c, -1.0, 1.0);
        let k = randu(&mut rng, kh * kw * c * oc, -0.7, 0.7);
        gradcheck(
            &format!("conv2d s{stride} p{pad}"),
            &[(vec![2, h, w, c], x), (vec![kh, kw, c, oc], k)],
            |g, t| {
                let y = g.conv2d(&t[0], &t[1], stride, pad).unwrap();
                let y2 = g.mul(&y, &y).unwrap();
                g.sum_all(&y2).unwrap()
            },
        );
    }
}

#[test]
fn normalization_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = randu(&mut rng, 12, -2.0, 2.0);
    let gain = randu(&mut rng, 4, 0.5, 1.5);
    let bias = randu(&mut rng, 4, -0.5, 0.5);
    gradcheck(
        "layer_norm",
        &[(vec![3, 4], x.clone()), (vec![4], gain), (vec![4], bias)],
        |g, t| {
            let y = g.layer_norm(&t[0], &t[1], &t[2], 1e-5).unwrap();
            let y2 = g.mul(&y, &y).unwrap();
            g.sum_all(&y2).unwrap()
        },
    );
    gradcheck("softmax", &[(vec![3, 4], x)], |g, t| {
        let y = g.softmax(&t[0]).unwrap();
        let y2 = g.mul(&y, &y).unwrap();
        g.sum_all(&y2).unwrap()
    });
}

#[test]
fn reductions_and_movement() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = randu(&mut rng, 24, -1.0, 1.0);
    for axis in 0..3 {
        for keepdim in [false, true] {
            gradcheck(
                &format!("sum_axis {axis} keep {keepdim}"),
                &[(vec![2, 3, 4], x.clone())],
                |g, t| {
                    let y = g.sum_axis(&t[0], axis, keepdim).unwrap();
                    let y2 = g.mul(&y, &y).unwrap();
                    g.sum_all(&y2).unwrap()
                },
            );
            gradcheck(
                &format!("mean_axis {axis} keep {keepdim}"),
                &[(vec![2, 3, 4], x.clone())],
                |g, t| {
                    let y = g.mean_axis(&t[0], axis, keepdim).unwrap();
                    let y2 = g.mul(&y, &y).unwrap();
                    g.sum_all(&y2).unwrap()
                },
            );
        }
    }
    gradcheck("mean_all", &[(vec![2, 3, 4], x.clone())], |g, t| {
        let y = g.mul(&t[0], &t[0]).unwrap();
        g.mean_all(&y).unwrap()
    });
    gradcheck("permute+reshape", &[(vec![2, 3, 4], x.clone())], |g, t| {
        let p = g.permute(&t[0], &[2, 0, 1]).unwrap();
        let r = g.reshape(&p, &[4, 6]).unwrap();
        let y2 = g.mul(&r, &r).unwrap();
        g.sum_all(&y2).unwrap()
    });
    let y = randu(&mut rng, 8, -1.0, 1.0);
    gradcheck(
        "concat axis0",
        &[(vec![2, 4], x[..8].to_vec()), (vec![2, 4], y.clone())],
        |g, t| {
            let c = g.concat(&[&t[0], &t[1]], 0).unwrap();
            let y2 = g.mul(&c, &c).unwrap();
            g.sum_all(&y2).unwrap()
        },
    );
    gradcheck(
        "concat axis1",
        &[(vec![2, 4], x[..8].to_vec()), (vec![2, 4], y)],
        |g, t| {
            let c = g.concat(&[&t[0], &t[1]], 1).unwrap();
            let y2 = g.mul(&c, &c).unwrap();
            g.sum_all(&y2).unwrap()
        },
    );
}

/// A composite expression mixing many ops, checked end to end.
#[test]
fn composite_expression() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = randu(&mut rng, 12, -1.0, 1.0);
    let w = randu(&mut rng, 12, -0.8, 0.8);
    let b = randu(&mut rng, 4, -0.3, 0.3);
    gradcheck(
        "composite",
        &[(vec![4, 3], x), (vec![3, 4], w), (vec![4], b)],
        |g, t| {
            let h = g.matmul(&t[0], &t[1]).unwrap();
            let h = g.add(&h, &t[2]).unwrap();
            let h = g.softmax(&h).unwrap();
            let h = g.add_scalar(&h, 1e-3).unwrap();
            let h = g.log(&h).unwrap();
            let m = g.mean_axis(&h, 1, false).unwrap();
            let s = g.mul(&m, &m).unwrap();
            g.sum_all(&s).unwrap()
        },
    );
}

/// Two backward passes over one graph must agree bit for bit.
#[test]
fn backward_determinism_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = Tensor::new(vec![4, 4], randu(&mut rng, 16, -1.0, 1.0))
        .unwrap()
        .requires_grad(true);
    let w = Tensor::new(vec![4, 4], randu(&mut rng, 16, -1.0, 1.0))
        .unwrap()
        .requires_grad(true);
    let mut g = Graph::new();
    let h = g.matmul(&x, &w).unwrap();
    let s = g.softmax(&h).unwrap();
    let loss = g.mean_all(&s).unwrap();
    g.backward(&loss).unwrap();
    let gx1 = x.grad().unwrap();
    let gw1 = w.grad().unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(gx1, x.grad().unwrap());
    assert_eq!(gw1, w.grad().unwrap());
}
