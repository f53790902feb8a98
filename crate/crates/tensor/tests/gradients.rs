//! Finite-difference checks for every differentiable operation, plus the
//! small closed-form examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slowfast_tensor::{grad_check, Bound, GradCheckConfig, ParamStore, Result, Tape, Tensor, Var};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Builds a store of random inputs, applies `op` and contracts the result
/// with a fixed random projection so every output element matters.
fn check_op<O>(name: &str, shapes: &[&[usize]], op: O)
where
    O: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.insert(format!("in{i}"), randn(&mut rng, s)).unwrap();
        }
        // probe shape learned from one forward pass
        let out_shape = {
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &store);
            let vars: Vec<Var> = (0..shapes.len()).map(|i| b.get(&format!("in{i}")).unwrap()).collect();
            let y = op(&mut tape, &vars).unwrap();
            tape.shape(y).to_vec()
        };
        let proj = randn(&mut rng, &out_shape);
        let report = grad_check(
            &mut store,
            |tape, b| {
                let vars: Vec<Var> = (0..shapes.len()).map(|i| b.get(&format!("in{i}")).unwrap()).collect();
                let y = op(tape, &vars)?;
                let p = tape.constant(proj.clone());
                let prod = tape.mul(y, p)?;
                tape.sum(prod)
            },
            GradCheckConfig {
                tolerance: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.passed(),
            "{name} seed {seed}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst()
        );
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    check_op("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op("add_broadcast", &[&[2, 3, 4], &[3, 1]], |t, v| t.add(v[0], v[1]));
    check_op("sub_broadcast", &[&[2, 3, 4], &[4]], |t, v| t.sub(v[0], v[1]));
    check_op("mul_broadcast", &[&[2, 3, 4], &[2, 1, 4]], |t, v| t.mul(v[0], v[1]));
    check_op("scale", &[&[5]], |t, v| t.scale(v[0], 2.5));
    check_op("add_scalar", &[&[5]], |t, v| t.add_scalar(v[0], -1.5));
    check_op("silu", &[&[4, 5]], |t, v| t.silu(v[0]));
}

#[test]
fn products_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check_op("matmul_ta", &[&[4, 3], &[4, 2]], |t, v| t.matmul_t(v[0], v[1], true, false));
    check_op("matmul_tb", &[&[3, 4], &[2, 4]], |t, v| t.matmul_t(v[0], v[1], false, true));
    check_op("matmul_tt", &[&[4, 3], &[2, 4]], |t, v| t.matmul_t(v[0], v[1], true, true));
    check_op("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1], false));
    check_op("bmm_tb", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true));
}

#[test]
fn convolutions_match_finite_differences() {
    check_op("conv2d_s1", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1));
    check_op("conv2d_s2", &[&[2, 2, 6, 6], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1));
    check_op("upsample2x", &[&[1, 2, 3, 3]], |t, v| t.upsample2x(v[0]));
    check_op("temporal_conv", &[&[2, 4, 3, 5], &[2, 3, 3], &[2]], |t, v| t.temporal_conv(v[0], v[1], v[2]));
}

#[test]
fn normalisation_and_layout_match_finite_differences() {
    check_op("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5));
    check_op("softmax", &[&[3, 5]], |t, v| t.softmax(v[0]));
    check_op("concat", &[&[2, 3, 2], &[2, 1, 2]], |t, v| t.concat(&[v[0], v[1]], 1));
    check_op("slice", &[&[2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 3));
    check_op("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check_op("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]));
    check_op("mean", &[&[2, 3]], |t, v| t.mean(v[0]));
    check_op("gather_rows", &[&[4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2]));
    check_op("cross_entropy", &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[1, 3, 0]));
    check_op("mse", &[&[3, 4], &[3, 4]], |t, v| t.mse(v[0], v[1]));
}

#[test]
fn three_layer_network_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, (o, n)) in [(6, 4), (5, 6), (1, 5)].into_iter().enumerate() {
            store.insert(format!("w{i}"), randn(&mut rng, &[n, o])).unwrap();
            store.insert(format!("b{i}"), randn(&mut rng, &[o])).unwrap();
        }
        let x = randn(&mut rng, &[7, 4]);
        let report = grad_check(
            &mut store,
            |tape, b| {
                let mut h = tape.constant(x.clone());
                for i in 0..3 {
                    h = tape.matmul(h, b.get(&format!("w{i}"))?)?;
                    h = tape.add(h, b.get(&format!("b{i}"))?)?;
                    if i < 2 {
                        h = tape.silu(h)?;
                    }
                }
                tape.mean(h)
            },
            GradCheckConfig {
                tolerance: 1e-5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn linear_layer_mse_grad_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut store = ParamStore::new();
    store.insert("w", randn(&mut rng, &[3, 2])).unwrap();
    store.insert("b", randn(&mut rng, &[2])).unwrap();
    let x = randn(&mut rng, &[8, 3]);
    let y = randn(&mut rng, &[8, 2]);
    let report = grad_check(
        &mut store,
        |tape, b| {
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let h = tape.matmul(xv, b.get("w")?)?;
            let h = tape.add(h, b.get("b")?)?;
            tape.mse(h, yv)
        },
        GradCheckConfig {
            tolerance: 1e-6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.entries.len(), 2);
}

#[test]
fn constant_network_is_a_vacuous_pass() {
    let mut store: ParamStore<f64> = ParamStore::new();
    let report = grad_check(
        &mut store,
        |tape, _| {
            let c = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
            tape.sum(c)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.entries.is_empty());
    assert!(report.passed());
}

#[test]
fn sum_of_squares_gradient_is_two_x() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn disconnected_parameter_gets_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let used = store.insert("used", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
    let unused = store.insert("unused", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &store);
    let loss = tape.sum(b.var(used)).unwrap();
    tape.backward(loss).unwrap();
    store.accumulate_grads(&tape).unwrap();
    assert_eq!(store.grad(used).unwrap(), &[1.0, 1.0]);
    assert!(store.grad(unused).map_or(true, |g| g.iter().all(|&x| x == 0.0)));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut store = ParamStore::<f64>::new();
    let p = store.insert("p", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &store);
        let l = tape.sum(b.var(p)).unwrap();
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape).unwrap();
    }
    assert_eq!(store.grad(p).unwrap(), &[2.0, 2.0]);
    store.zero_grads();
    assert!(store.grad(p).is_none());
}

#[test]
fn concat_then_slice_routes_gradients_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let a = tape.variable(randn(&mut rng, &[2, 3, 4]));
    let b = tape.variable(randn(&mut rng, &[2, 2, 4]));
    let c = tape.concat(&[a, b], 1).unwrap();
    let back_a = tape.slice(c, 1, 0, 3).unwrap();
    let back_b = tape.slice(c, 1, 3, 2).unwrap();
    assert_eq!(tape.value(back_a), tape.value(a));
    assert_eq!(tape.value(back_b), tape.value(b));
    let wa = randn(&mut rng, &[2, 3, 4]);
    let wb = randn(&mut rng, &[2, 2, 4]);
    let wav = tape.constant(wa.clone());
    let wbv = tape.constant(wb.clone());
    let pa = tape.mul(back_a, wav).unwrap();
    let pb = tape.mul(back_b, wbv).unwrap();
    let sa = tape.sum(pa).unwrap();
    let sb = tape.sum(pb).unwrap();
    let total = tape.add(sa, sb).unwrap();
    tape.backward(total).unwrap();
    assert_eq!(tape.grad(a).unwrap(), wa.data());
    assert_eq!(tape.grad(b).unwrap(), wb.data());
}
