use bitprune::autodiff::{Tape, Var};
use bitprune::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Builds `sum(op(inputs) * probe)` and returns its value and the gradient
/// of every input.
fn eval(
    inputs: &[Tensor],
    probe_seed: u64,
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let shape = tape.value(out).shape().to_vec();
    let probe = tape.constant(rand_tensor(&mut rng, &shape));
    let weighted = tape.mul(out, probe).unwrap();
    let loss = tape.sum(weighted);
    let g = tape.backward(loss).unwrap();
    (
        tape.value(loss).item(),
        vars.iter().map(|v| g.get(*v).unwrap().to_vec()).collect(),
    )
}

fn max_rel_error(inputs: &[Tensor], op: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (_, grads) = eval(inputs, 9, op);
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for (i, &a) in grads[k].iter().enumerate().take(t.len()) {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += H;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= H;
            let fd = (eval(&up, 9, op).0 - eval(&down, 9, op).0) / (2.0 * H);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

/// Moves values at least `gap` away from each point in `avoid`.
fn nudge(mut t: Tensor, avoid: &[f64], gap: f64) -> Tensor {
    for v in t.data_mut() {
        for &p in avoid {
            if (*v - p).abs() < gap {
                *v = p + gap.copysign(*v - p);
            }
        }
    }
    t
}

/// Spreads values so that no two differ by less than `gap`.
fn distinct(t: Tensor, gap: f64) -> Tensor {
    let mut idx: Vec<usize> = (0..t.len()).collect();
    idx.sort_by(|&a, &b| t.data()[a].partial_cmp(&t.data()[b]).unwrap());
    let mut data = t.data().to_vec();
    for w in 1..idx.len() {
        let (prev, cur) = (idx[w - 1], idx[w]);
        if data[cur] - data[prev] < gap {
            data[cur] = data[prev] + gap;
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])];
        let e = max_rel_error(&inputs, &|t, v| t.matmul(v[0], v[1]).unwrap());
        prop_assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn add_and_bias_gradients(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let same = [rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[m, n])];
        prop_assert!(max_rel_error(&same, &|t, v| t.add(v[0], v[1]).unwrap()) < 1e-4);
        let bias = [rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[n])];
        prop_assert!(max_rel_error(&bias, &|t, v| t.add(v[0], v[1]).unwrap()) < 1e-4);
    }

    #[test]
    fn elementwise_gradients(seed in any::<u64>(), n in 1usize..8, s in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = [rand_tensor(&mut rng, &[n]), rand_tensor(&mut rng, &[n])];
        prop_assert!(max_rel_error(&pair, &|t, v| t.mul(v[0], v[1]).unwrap()) < 1e-4);
        let one = [rand_tensor(&mut rng, &[2, n])];
        prop_assert!(max_rel_error(&one, &|t, v| t.mul_scalar(v[0], s)) < 1e-4);
        let sum = max_rel_error(&one, &|t, v| {
            let s = t.sum(v[0]);
            t.reshape(s, vec![1]).unwrap()
        });
        let mean = max_rel_error(&one, &|t, v| {
            let s = t.mean(v[0]);
            t.reshape(s, vec![1]).unwrap()
        });
        prop_assert!(sum < 1e-4 && mean < 1e-4);
        let kinks = [nudge(rand_tensor(&mut rng, &[n]), &[0.0], 1e-2)];
        prop_assert!(max_rel_error(&kinks, &|t, v| t.relu(v[0])) < 1e-4);
        // outside the bounds the clamp passes inward-pointing gradients on purpose
        let inside = [rand_tensor(&mut rng, &[n])];
        prop_assert!(max_rel_error(&inside, &|t, v| t.clamp(v[0], -1.6, 1.6)) < 1e-4);
    }

    #[test]
    fn shape_op_gradients(seed in any::<u64>(), b in 1usize..3, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = [rand_tensor(&mut rng, &[b, c, 2, 3])];
        prop_assert!(max_rel_error(&x, &|t, v| t.flatten(v[0]).unwrap()) < 1e-4);
        prop_assert!(max_rel_error(&x, &|t, v| t.reshape(v[0], vec![b * c * 6]).unwrap()) < 1e-4);
    }

    #[test]
    fn maxpool_gradients(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, h in 2usize..6, w in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = [distinct(rand_tensor(&mut rng, &[b, c, h, w]), 1e-2)];
        prop_assert!(max_rel_error(&x, &|t, v| t.maxpool2d(v[0], 2).unwrap()) < 1e-4);
    }

    #[test]
    fn conv_gradients(
        seed in any::<u64>(),
        c in 1usize..3,
        o in 1usize..3,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            rand_tensor(&mut rng, &[2, c, 5, 4]),
            rand_tensor(&mut rng, &[o, c, k, k]),
            rand_tensor(&mut rng, &[o]),
        ];
        let e = max_rel_error(&inputs, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, k / 2).unwrap());
        prop_assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn cross_entropy_gradients(seed in any::<u64>(), b in 1usize..5, classes in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..classes)).collect();
        let x = [rand_tensor(&mut rng, &[b, classes])];
        let e = max_rel_error(&x, &|t, v| {
            let l = t.softmax_cross_entropy(v[0], &labels).unwrap();
            t.reshape(l, vec![1]).unwrap()
        });
        prop_assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), m in 1usize..4, n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xa, wa) = (rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[n, 2]));
        let build = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(xa.clone(), true);
            let w = tape.leaf(wa.clone(), true);
            let y = tape.matmul(x, w).unwrap();
            let r = tape.relu(y);
            let l1 = tape.sum(r);
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.mean(sq);
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss).unwrap().get(x).unwrap().to_vec()
        };
        let (g1, g2, g12) = (build(0), build(1), build(2));
        for i in 0..g12.len() {
            prop_assert!((g12[i] - (g1[i] + g2[i])).abs() <= 1e-12 * (1.0 + g12[i].abs()));
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            rand_tensor(&mut rng, &[2, 2, 4, 4]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let op = |t: &mut Tape, v: &[Var]| {
            let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            let r = t.relu(c);
            t.maxpool2d(r, 2).unwrap()
        };
        let (a, ga) = eval(&inputs, 3, &op);
        let (b, gb) = eval(&inputs, 3, &op);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        for (x, y) in ga.iter().flatten().zip(gb.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
