use cmkd::gradcheck::{gradients, relative_error, run_gradcheck, GradcheckConfig, KERNELS};
use cmkd::tensor::{Tape, Tensor, Var};
use cmkd::Result;
use rand::Rng;

const INSTANCES: usize = 20;

fn random(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an op output to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = cmkd::seeded_rng(seed, 7);
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p)?)
}

fn check_op(
    name: &str,
    make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    let mut rng = cmkd::seeded_rng(42, name.len() as u64);
    for i in 0..INSTANCES {
        let inputs = make(&mut rng);
        let (a, n) = gradients(&inputs, 1e-5, |tape, ts| {
            let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
            let y = op(tape, &vars)?;
            Ok((project(tape, y, i as u64)?, vars))
        })
        .unwrap();
        let err = relative_error(&a, &n);
        assert!(err <= 1e-6, "{name} instance {i}: relative error {err}");
    }
}

fn dims(rng: &mut impl Rng) -> (usize, usize) {
    (rng.random_range(1..=5), rng.random_range(1..=5))
}

#[test]
fn elementwise_binary_ops() {
    let pair = |rng: &mut rand_chacha::ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c, -2.0, 2.0)]
    };
    check_op("add", pair, |t, v| Ok(t.add(v[0], v[1])?));
    check_op("sub", pair, |t, v| Ok(t.sub(v[0], v[1])?));
    check_op("mul", pair, |t, v| Ok(t.mul(v[0], v[1])?));
    check_op(
        "div",
        |rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c, 0.5, 2.0)]
        },
        |t, v| Ok(t.div(v[0], v[1])?),
    );
    check_op(
        "scalar_broadcast",
        |rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, -2.0, 2.0), random(rng, 1, 1, -2.0, 2.0)]
        },
        |t, v| Ok(t.mul(v[0], v[1])?),
    );
}

#[test]
fn elementwise_unary_ops() {
    let one = |lo: f64, hi: f64| {
        move |rng: &mut rand_chacha::ChaCha8Rng| {
            let (r, c) = dims(rng);
            vec![random(rng, r, c, lo, hi)]
        }
    };
    check_op("exp", one(-2.0, 2.0), |t, v| Ok(t.exp(v[0])?));
    check_op("log", one(0.2, 3.0), |t, v| Ok(t.log(v[0])?));
    check_op("tanh", one(-2.0, 2.0), |t, v| Ok(t.tanh(v[0])?));
    check_op("relu", one(0.1, 2.0), |t, v| Ok(t.relu(v[0])?));
    check_op("relu_negative", one(-2.0, -0.1), |t, v| Ok(t.relu(v[0])?));
    check_op("neg", one(-2.0, 2.0), |t, v| Ok(t.neg(v[0])?));
    check_op("scale", one(-2.0, 2.0), |t, v| Ok(t.scale(v[0], -1.7)?));
    check_op("add_scalar", one(-2.0, 2.0), |t, v| Ok(t.add_scalar(v[0], 0.3)?));
    check_op("square", one(-2.0, 2.0), |t, v| Ok(t.square(v[0])?));
    check_op("clamp_below", one(-2.0, 0.9), |t, v| Ok(t.clamp_max(v[0], 1.0)?));
    check_op("clamp_above", one(1.1, 2.0), |t, v| Ok(t.clamp_max(v[0], 1.0)?));
    check_op("clamp_under_floor", one(-3.0, -2.1), |t, v| {
        Ok(t.clamp(v[0], -2.0, 1.0)?)
    });
    check_op("clamp_inside", one(-1.9, 0.9), |t, v| Ok(t.clamp(v[0], -2.0, 1.0)?));
}

#[test]
fn reductions_and_shape_ops() {
    let one = |rng: &mut rand_chacha::ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![random(rng, r, c, -2.0, 2.0)]
    };
    check_op("sum", one, |t, v| Ok(t.sum(v[0])?));
    check_op("mean", one, |t, v| Ok(t.mean(v[0])?));
    check_op("sum_axis0", one, |t, v| Ok(t.sum_axis(v[0], 0)?));
    check_op("sum_axis1", one, |t, v| Ok(t.sum_axis(v[0], 1)?));
    check_op("transpose", one, |t, v| Ok(t.transpose(v[0])?));
    check_op("reshape", one, |t, v| {
        let n = t.shape(v[0]).iter().product();
        Ok(t.reshape(v[0], vec![1, n])?)
    });
    check_op("l2_normalize", one, |t, v| Ok(t.row_l2_normalize(v[0])?));
    check_op("softmax", one, |t, v| Ok(t.softmax_rows(v[0])?));
    check_op("log_softmax", one, |t, v| Ok(t.log_softmax_rows(v[0])?));
    check_op("slice_cols", one, |t, v| {
        let c = t.shape(v[0])[1];
        Ok(t.slice(v[0], 1, c / 2, c)?)
    });
    check_op("slice_rows", one, |t, v| {
        let r = t.shape(v[0])[0];
        Ok(t.slice(v[0], 0, 0, r.div_ceil(2))?)
    });
    check_op(
        "diagonal",
        |rng| {
            let n = rng.random_range(1..=5);
            vec![random(rng, n, n, -2.0, 2.0)]
        },
        |t, v| Ok(t.gather_diagonal(v[0])?),
    );
    check_op("gather_cols", one, |t, v| {
        let shape = t.shape(v[0]).to_vec();
        let cols: Vec<usize> = (0..shape[0]).map(|i| (i * 7 + 3) % shape[1]).collect();
        Ok(t.gather_cols(v[0], &cols)?)
    });
}

#[test]
fn matrix_ops() {
    check_op(
        "matmul",
        |rng| {
            let (n, k) = dims(rng);
            let m = rng.random_range(1..=5);
            vec![random(rng, n, k, -2.0, 2.0), random(rng, k, m, -2.0, 2.0)]
        },
        |t, v| Ok(t.matmul(v[0], v[1])?),
    );
    check_op(
        "add_row",
        |rng| {
            let (n, m) = dims(rng);
            vec![random(rng, n, m, -2.0, 2.0), random(rng, 1, m, -2.0, 2.0)]
        },
        |t, v| Ok(t.add_row(v[0], v[1])?),
    );
    check_op(
        "concat_cols",
        |rng| {
            let (n, a) = dims(rng);
            let b = rng.random_range(1..=4);
            vec![random(rng, n, a, -2.0, 2.0), random(rng, n, b, -2.0, 2.0)]
        },
        |t, v| Ok(t.concat(&[v[0], v[1]], 1)?),
    );
    check_op(
        "concat_rows",
        |rng| {
            let (a, m) = dims(rng);
            let b = rng.random_range(1..=4);
            vec![random(rng, a, m, -2.0, 2.0), random(rng, b, m, -2.0, 2.0)]
        },
        |t, v| Ok(t.concat(&[v[0], v[1]], 0)?),
    );
}

#[test]
fn every_loss_kernel_passes() {
    let reports = run_gradcheck(&GradcheckConfig::default()).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, KERNELS);
    for r in &reports {
        assert!(r.passed, "{} failed with relative error {}", r.name, r.max_rel_error);
        assert_eq!(r.instances, 20);
    }
}

#[test]
fn corrupted_gradient_is_caught_by_name() {
    let cfg = GradcheckConfig {
        instances: 3,
        corrupt: Some("loss_kd".into()),
        ..Default::default()
    };
    let reports = run_gradcheck(&cfg).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert_eq!(failed, ["loss_kd"]);
}
