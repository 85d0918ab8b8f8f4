//! Every differentiable primitive against central differences in f64.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rtd_core::rng::seeded;
use rtd_core::tape::{ParamStore, Tape, Var};
use rtd_core::verify::{finite_difference_gradient, relative_error, FD_STEP, PRIMITIVE_TOLERANCE};
use rtd_core::{Result, Tensor};

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

/// Reduces `build`'s output with fixed random weights, so that outputs
/// with a constant sum (softmax rows) still have informative gradients.
fn check(shapes: &[&[usize]], seed: u64, build: &Build) -> f64 {
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(s, data).unwrap()
        })
        .collect();
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let n_out: usize = probe_shape.iter().product();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights = Tensor::new(&probe_shape, weights).unwrap();

    let objective = |tape: &mut Tape<'_, f64>, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };

    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("x{i}"), t.clone(), false).unwrap())
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let loss = objective(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = ids
        .iter()
        .zip(&inputs)
        .flat_map(|(&id, t)| {
            grads
                .get(id)
                .map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec())
        })
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_difference_gradient(
        |theta| {
            let mut tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let t = Tensor::new(s, theta[off..off + n].to_vec()).unwrap();
                    off += n;
                    tape.constant(t)
                })
                .collect();
            let loss = objective(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        },
        &flat,
        FD_STEP,
    )
    .unwrap();
    relative_error(&analytic, &numeric)
}

macro_rules! fd_test {
    ($name:ident, $shapes:expr, $build:expr) => {
        #[test]
        fn $name() {
            for seed in 0..3 {
                let e = check($shapes, seed, &$build);
                assert!(e <= PRIMITIVE_TOLERANCE, "seed {seed}: rel error {e:.3e}");
            }
        }
    };
}

fd_test!(matmul, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
fd_test!(matmul_nt, &[&[3, 4], &[5, 4]], |t, v| t.matmul_nt(v[0], v[1]));
fd_test!(transpose, &[&[3, 4]], |t, v| t.transpose(v[0]));
fd_test!(add, &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
fd_test!(add_bias, &[&[4, 3], &[3]], |t, v| t.add_bias(v[0], v[1]));
fd_test!(mul, &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]));
fd_test!(scale, &[&[2, 3]], |t, v| Ok(t.scale(v[0], -1.7)));
fd_test!(scale_rows, &[&[3, 2]], |t, v| t.scale_rows(v[0], vec![0.0, 1.0, 2.5]));
fd_test!(gelu, &[&[3, 5]], |t, v| Ok(t.gelu(v[0])));
fd_test!(layer_norm, &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-7));
fd_test!(gather_rows_with_repeats, &[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
fd_test!(conv1d, &[&[8, 3], &[3, 3, 2], &[2]], |t, v| t.conv1d(v[0], v[1], v[2], 4));
fd_test!(concat_cols, &[&[2, 3], &[2, 1]], |t, v| t.concat_cols(&[v[0], v[1]]));
fd_test!(concat_rows, &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[0], v[1]]));
fd_test!(slice_cols, &[&[3, 5]], |t, v| t.slice_cols(v[0], 1, 3));
fd_test!(slice_rows, &[&[4, 2]], |t, v| t.slice_rows(v[0], 1, 2));
fd_test!(reshape, &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
fd_test!(softmax_rows, &[&[3, 4]], |t, v| t.softmax(v[0], 1));
fd_test!(softmax_cols, &[&[3, 4]], |t, v| t.softmax(v[0], 0));
fd_test!(masked_softmax, &[&[3, 4]], |t, v| t.masked_softmax_rows(
    v[0],
    &[true, false, true, true]
));
fd_test!(gather_rel, &[&[3, 5]], |t, v| t.gather_rel(
    v[0],
    &[0, 1, 4, 4, 2, 2, 3, 0, 1],
    3
));
fd_test!(cross_entropy, &[&[3, 6]], |t, v| t.cross_entropy(v[0], &[(0, 1), (2, 5)]));
fd_test!(binary_cross_entropy, &[&[2, 3]], |t, v| t
    .binary_cross_entropy(v[0], &[1, 0, -1, 0, 1, 1]));
fd_test!(mean, &[&[2, 3]], |t, v| Ok(t.mean(v[0])));

#[test]
fn stop_gradient_blocks_exactly() {
    let mut store = ParamStore::new();
    let id = store
        .register("x", Tensor::new(&[2], vec![1.5, -2.0]).unwrap(), false)
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let s = tape.stop_gradient(x);
    let sq = tape.mul(s, s).unwrap();
    let total = tape.sum(sq);
    let g = tape.backward(total).unwrap();
    assert!(g.get(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn stop_gradient_sum_matches_hand_derivative() {
    // d/dx [x² + sg(x)³] = 2x
    let mut store = ParamStore::new();
    let id = store
        .register("x", Tensor::new(&[1], vec![1.25]).unwrap(), false)
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.stop_gradient(x);
    let s2 = tape.mul(s, s).unwrap();
    let cube = tape.mul(s2, s).unwrap();
    let y = tape.add(sq, cube).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(id).unwrap().data(), &[2.5]);
}

#[test]
fn conv1d_matches_naive_oracle() {
    let mut rng = seeded(4);
    let (b, l, cin, cout, k) = (2, 5, 3, 2, 3);
    let x: Vec<f64> = (0..b * l * cin).map(|_| StandardNormal.sample(&mut rng)).collect();
    let w: Vec<f64> = (0..k * cin * cout).map(|_| StandardNormal.sample(&mut rng)).collect();
    let bias = [0.3, -0.1];
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(&[b * l, cin], x.clone()).unwrap());
    let wv = tape.constant(Tensor::new(&[k, cin, cout], w.clone()).unwrap());
    let bv = tape.constant(Tensor::new(&[cout], bias.to_vec()).unwrap());
    let out = tape.conv1d(xv, wv, bv, l).unwrap();
    let got = tape.value(out).data();
    for s in 0..b {
        for t in 0..l {
            for o in 0..cout {
                let mut want = bias[o];
                for tap in 0..k {
                    let src = t as isize + tap as isize - (k / 2) as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for c in 0..cin {
                        want += x[(s * l + src as usize) * cin + c] * w[(tap * cin + c) * cout + o];
                    }
                }
                let g = got[(s * l + t) * cout + o];
                assert!((g - want).abs() < 1e-12, "{s} {t} {o}: {g} vs {want}");
            }
        }
    }
}

#[test]
fn masked_columns_get_exactly_zero_probability() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::new(&[2, 3], vec![5.0, 1.0, -2.0, 0.0, 100.0, 0.0]).unwrap());
    let p = tape.masked_softmax_rows(a, &[true, false, true]).unwrap();
    let p = tape.value(p).data();
    assert_eq!(p[1], 0.0);
    assert_eq!(p[4], 0.0);
    assert!(((p[3] + p[5]) - 1.0).abs() < 1e-6);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(rtd_core::Error::Shape { .. })));
}
