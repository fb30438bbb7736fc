use efaseg::numerics::gradcheck::{self, distinct_tensor, random_tensor};
use efaseg::numerics::{Graph, Tensor, Var, LN_EPS};
use efaseg::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-6;
const SEEDS: u64 = 20;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn grid_1_to_16() -> Tensor {
    Tensor::new(&[1, 4, 4, 1], (1..=16).map(f64::from).collect()).unwrap()
}

fn eval1(x: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}

/// Runs a gradient check over `SEEDS` random draws of the given shapes.
fn sweep<F>(shapes: &[&[usize]], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let r = gradcheck::check(&inputs, 1000 + seed, &f).unwrap();
        worst = worst.max(r.max_rel_err);
    }
    worst
}

/// Single input with well-separated entries, for ops with kinks at ties.
fn sweep_distinct<F>(shape: &[usize], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    (0..SEEDS)
        .map(|seed| {
            let x = distinct_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed));
            gradcheck::check(&[x], 1000 + seed, &f).unwrap().max_rel_err
        })
        .fold(0.0, f64::max)
}

// ---- forward examples ----

#[test]
fn matmul_identity_and_hand_product() {
    let x = t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]);
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let xv = g.constant(x.clone());
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn sum_of_product_gradient_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let mut g = Graph::new();
    let av = g.leaf(a);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    let ga = g.grad(av).unwrap();
    // row sums of B give every row of ones·Bᵀ
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.get(&[k, j])).sum();
            assert!((ga.get(&[i, k]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let y = eval1(t(&[3], &[0.0, 0.0, 0.0]), |g, x| g.softmax_lastdim(x));
    y.data().iter().for_each(|v| assert!((v - 1.0 / 3.0).abs() < 1e-15));
    let y = eval1(t(&[2], &[1000.0, 1000.0]), |g, x| g.softmax_lastdim(x));
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = eval1(t(&[2], &[0.0, 2f64.ln()]), |g, x| g.softmax_lastdim(x));
    assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.25));
    let ones = g.constant(Tensor::ones(&[5]));
    let zeros = g.constant(Tensor::zeros(&[5]));
    let y = g.layer_norm(x, ones, zeros, LN_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xr = g.constant(random_tensor(&[4, 8], &mut rng));
    let gamma0 = g.constant(Tensor::zeros(&[8]));
    let b = g.constant(Tensor::full(&[8], 0.75));
    let y = g.layer_norm(xr, gamma0, b, LN_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));

    let (o8, z8) = (ones_of(&mut g, 8), zeros_of(&mut g, 8));
    let y = g.layer_norm(xr, o8, z8, LN_EPS).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-5);
    }

    let bad = g.constant(Tensor::ones(&[7]));
    assert!(g.layer_norm(xr, bad, zeros, LN_EPS).is_err());
}

fn ones_of(g: &mut Graph, c: usize) -> Var {
    g.constant(Tensor::ones(&[c]))
}

fn zeros_of(g: &mut Graph, c: usize) -> Var {
    g.constant(Tensor::zeros(&[c]))
}

#[test]
fn avg_pool_examples() {
    let x = grid_1_to_16();
    assert_eq!(eval1(x.clone(), |g, v| g.avg_pool2d(v, 1)), x);
    let y = eval1(x.clone(), |g, v| g.avg_pool2d(v, 2));
    assert_eq!(y.shape(), &[1, 2, 2, 1]);
    assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
    let c = eval1(Tensor::full(&[1, 5, 3, 2], 4.0), |g, v| g.avg_pool2d(v, 2));
    assert_eq!(c.shape(), &[1, 3, 2, 2]);
    assert!(c.data().iter().all(|&v| v == 4.0));
    // edge window on a 3-wide axis averages its single trailing member
    let e = eval1(t(&[1, 1, 3, 1], &[1.0, 2.0, 9.0]), |g, v| g.avg_pool2d(v, 2));
    assert_eq!(e.data(), &[1.5, 9.0]);
    let mut g = Graph::new();
    let v = g.constant(x);
    assert!(matches!(g.avg_pool2d(v, 0), Err(efaseg::Error::Config(_))));
}

#[test]
fn max_and_overlapped_pool_examples() {
    let x = grid_1_to_16();
    let y = eval1(x.clone(), |g, v| g.max_pool2d(v, 2));
    assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    let c = eval1(Tensor::full(&[1, 4, 4, 3], -2.0), |g, v| g.max_pool2d(v, 3));
    assert!(c.data().iter().all(|&v| v == -2.0));

    // r = 1: each cell averages itself with its right, lower and diagonal
    // neighbours that exist.
    let y = eval1(x.clone(), |g, v| g.overlapped_avg_pool2d(v, 1));
    assert_eq!(y.shape(), &[1, 4, 4, 1]);
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            let mut n = 0.0;
            for di in 0..2 {
                for dj in 0..2 {
                    if i + di < 4 && j + dj < 4 {
                        s += x.get(&[0, i + di, j + dj, 0]);
                        n += 1.0;
                    }
                }
            }
            assert_eq!(y.get(&[0, i, j, 0]), s / n);
        }
    }
}

#[test]
fn conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[1, 5, 4, 1], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::ones(&[1, 6, 6, 2]));
    let dk = g.constant(Tensor::ones(&[3, 3, 2]));
    let y = g.depthwise_conv2d(ones, dk).unwrap();
    let yt = g.value(y);
    for i in 1..5 {
        for j in 1..5 {
            assert_eq!(yt.get(&[0, i, j, 1]), 9.0);
        }
    }
    assert_eq!(yt.get(&[0, 0, 0, 0]), 4.0);

    let img = g.constant(Tensor::zeros(&[1, 64, 64, 3]));
    let k7 = g.constant(Tensor::zeros(&[7, 7, 3, 8]));
    let y = g.conv2d(img, k7, 4, 3).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 16, 8]);

    let wrong = g.constant(Tensor::zeros(&[3, 3, 2, 4]));
    assert!(matches!(g.conv2d(img, wrong, 1, 1), Err(efaseg::Error::Dimension(_))));
    let tiny = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
    assert!(matches!(g.conv2d(tiny, k7, 1, 0), Err(efaseg::Error::Config(_))));
}

#[test]
fn bilinear_examples() {
    let x = grid_1_to_16();
    assert_eq!(eval1(x.clone(), |g, v| g.bilinear_upsample(v, 4, 4)), x);
    let c = eval1(Tensor::full(&[1, 2, 3, 2], 1.25), |g, v| g.bilinear_upsample(v, 7, 9));
    assert!(c.data().iter().all(|v| (v - 1.25).abs() < 1e-15));
    let y = eval1(t(&[1, 1, 2, 1], &[0.0, 1.0]), |g, v| g.bilinear_upsample(v, 1, 4));
    assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    let mut g = Graph::new();
    let v = g.constant(x);
    assert!(matches!(g.bilinear_upsample(v, 2, 2), Err(efaseg::Error::Config(_))));
}

#[test]
fn elementwise_gradients_closed_form() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let y = g.leaf(t(&[3], &[4.0, 5.0, -6.0]));
    let p = g.mul(x, y).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 5.0, -6.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
}

// ---- finite-difference suite ----

#[test]
fn fd_matmul() {
    assert!(sweep(&[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])) < OP_TOL);
    assert!(sweep(&[&[2, 3, 4], &[2, 4, 2]], |g, v| g.matmul(v[0], v[1])) < OP_TOL);
    assert!(sweep(&[&[2, 1, 3, 4], &[3, 4, 2]], |g, v| g.matmul(v[0], v[1])) < OP_TOL);
}

#[test]
fn fd_elementwise() {
    assert!(sweep(&[&[2, 3], &[3]], |g, v| g.add(v[0], v[1])) < OP_TOL);
    assert!(sweep(&[&[2, 1, 3], &[4, 1]], |g, v| g.mul(v[0], v[1])) < OP_TOL);
    assert!(sweep(&[&[2, 3]], |g, v| g.scale(v[0], -1.7)) < OP_TOL);
    assert!(sweep(&[&[3, 5]], |g, v| g.gelu(v[0])) < OP_TOL);
}

#[test]
fn fd_softmax_and_layer_norm() {
    assert!(sweep(&[&[3, 6]], |g, v| g.softmax_lastdim(v[0])) < OP_TOL);
    assert!(sweep(&[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], LN_EPS)) < OP_TOL);
}

#[test]
fn fd_pooling() {
    for r in [1, 2, 3] {
        assert!(sweep(&[&[1, 5, 4, 2]], |g, v| g.avg_pool2d(v[0], r)) < OP_TOL);
        assert!(sweep(&[&[1, 5, 4, 2]], |g, v| g.overlapped_avg_pool2d(v[0], r)) < OP_TOL);
        assert!(sweep_distinct(&[2, 4, 5, 2], |g, v| g.max_pool2d(v[0], r)) < OP_TOL);
    }
}

#[test]
fn fd_convolutions() {
    assert!(sweep(&[&[1, 5, 5, 2], &[3, 3, 2, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1)) < OP_TOL);
    assert!(sweep(&[&[2, 7, 6, 3], &[7, 7, 3, 2]], |g, v| g.conv2d(v[0], v[1], 4, 3)) < OP_TOL);
    assert!(sweep(&[&[1, 4, 5, 3], &[3, 3, 3]], |g, v| g.depthwise_conv2d(v[0], v[1])) < OP_TOL);
}

#[test]
fn fd_resampling_and_shape_ops() {
    assert!(sweep(&[&[1, 2, 3, 2]], |g, v| g.bilinear_upsample(v[0], 5, 7)) < OP_TOL);
    assert!(sweep(&[&[2, 3, 4]], |g, v| g.reshape(v[0], &[6, 4])) < OP_TOL);
    assert!(sweep(&[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])) < OP_TOL);
    assert!(sweep(&[&[2, 3], &[2, 2]], |g, v| g.concat_lastdim(&[v[0], v[1]])) < OP_TOL);
    assert!(sweep(&[&[2, 3]], |g, v| g.sum(v[0])) < OP_TOL);
    assert!(sweep(&[&[2, 3]], |g, v| g.mean(v[0])) < OP_TOL);
}

#[test]
fn fd_cross_entropy() {
    let targets = [Some(0), Some(2), None, Some(1)];
    assert!(sweep(&[&[4, 3]], |g, v| g.cross_entropy(v[0], &targets)) < OP_TOL);
}

// ---- properties ----

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random_tensor(&[1, 4, 4, 3], &mut rng);
        let k = random_tensor(&[3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, kv) = (g.leaf(x), g.leaf(k));
        let y = g.depthwise_conv2d(xv, kv).unwrap();
        let y = g.gelu(y).unwrap();
        let p = g.avg_pool2d(y, 2).unwrap();
        let s = g.softmax_lastdim(p).unwrap();
        let l = g.mean(s).unwrap();
        g.backward(l).unwrap();
        (g.grad(xv).unwrap(), g.grad(kv).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_commute_with_permutation(
        vals in prop::collection::vec(-30.0f64..30.0, 6),
        rot in 0usize..6,
    ) {
        let y = eval1(t(&[6], &vals), |g, v| g.softmax_lastdim(v));
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let mut perm = vals.clone();
        perm.rotate_left(rot);
        let yp = eval1(t(&[6], &perm), |g, v| g.softmax_lastdim(v));
        let mut expect = y.data().to_vec();
        expect.rotate_left(rot);
        for (a, b) in yp.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn avg_pool_preserves_mean_when_ratio_divides(
        seed in 0u64..1000, r in 1usize..4, bh in 1usize..4, bw in 1usize..4, c in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[1, bh * r, bw * r, c], &mut rng);
        let mean_in = x.data().iter().sum::<f64>() / x.numel() as f64;
        let y = eval1(x, |g, v| g.avg_pool2d(v, r));
        let mean_out = y.data().iter().sum::<f64>() / y.numel() as f64;
        prop_assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn reshape_and_transpose_round_trip_bitwise(seed in 0u64..1000, a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[a, b, c], &mut rng);
        let y = eval1(x.clone(), |g, v| {
            let r = g.reshape(v, &[a * b, c])?;
            g.reshape(r, &[a, b, c])
        });
        prop_assert_eq!(&y, &x);
        let y = eval1(x.clone(), |g, v| {
            let r = g.transpose(v)?;
            g.transpose(r)
        });
        prop_assert_eq!(&y, &x);
    }

    #[test]
    fn serialization_round_trip(seed in 0u64..1000, a in 1usize..4, b in 1usize..6) {
        use efaseg::numerics::serialize::{read_tensor, tensor_to_bytes, Dtype};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[a, b], &mut rng);
        let back = read_tensor(&mut tensor_to_bytes(&x, Dtype::F64).as_slice()).unwrap();
        prop_assert_eq!(back, x);
    }
}
