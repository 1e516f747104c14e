//! Kernels against independent hand-rolled evaluations. Shared by the
//! `oracles` test target and the acceptance runner.

use cmkd::data::{generate, parse_dataset, split_group_by_trial, GeneratorSpec, Label};
use cmkd::gradcheck::{gradients, relative_error};
use cmkd::losses::{
    info_nce, loss_ccc, loss_ce, loss_kd, loss_sim, loss_total, similarity_matrix, LossParts, LossWeights, Task,
};
use cmkd::metrics::{accuracy, ccc, macro_f1, mean_std, pcc, rmse};
use cmkd::models::{Activation, ExtractorConfig, HeadConfig, Linear, ModelParams};
use cmkd::prototypes::{dirichlet_alpha, init_prototypes, loss_unc, uncertainty, UncertaintyForm};
use cmkd::report::embeddings_csv;
use cmkd::tensor::{Tape, Tensor};
use rand::Rng;
use std::path::Path;

type Rows = Vec<Vec<f64>>;

fn rng(stream: u64) -> rand_chacha::ChaCha8Rng {
    cmkd::seeded_rng(2024, stream)
}

fn rows(rng: &mut impl Rng, n: usize, d: usize) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn tensor(r: &Rows) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Neumaier-compensated sum.
fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + neumaier(row.iter().map(|v| (v - m).exp())).ln()
}

fn dense(x: &[f64], l: &Linear) -> Vec<f64> {
    let (fan_in, fan_out) = (l.weight.rows(), l.weight.cols());
    (0..fan_out)
        .map(|j| l.bias.data()[j] + (0..fan_in).map(|i| x[i] * l.weight.get(i, j)).sum::<f64>())
        .collect()
}

fn act(v: Vec<f64>, a: Activation) -> Vec<f64> {
    v.into_iter()
        .map(|x| match a {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        })
        .collect()
}

fn head_oracle(layers: &[Linear], x: &[f64], a: Activation) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        h = dense(&h, l);
        if i + 1 != layers.len() {
            h = act(h, a);
        }
    }
    h
}

fn small_model(seed: u64, activation: Activation) -> ModelParams {
    let ext = ExtractorConfig {
        input_dim: 5,
        hidden_dims: vec![7, 4],
        feature_dim: 6,
        embed_dim: 3,
        activation,
    };
    let head = HeadConfig {
        layer_dims: vec![5, 4, 3],
        injection_layer: 1,
    };
    let mut m = ModelParams::new(ext, head, &mut cmkd::seeded_rng(seed, 0)).unwrap();
    // non-zero biases so the oracle exercises them
    let mut r = rng(seed);
    for t in m.tensors_mut() {
        let data = t.data().iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
        t.set_data(data).unwrap();
    }
    m
}

pub fn matmul_gradient_3x4_by_4x2() {
    let mut r = rng(1);
    let a = tensor(&rows(&mut r, 3, 4));
    let b = tensor(&rows(&mut r, 4, 2));
    let (an, nu) = gradients(&[a, b], 1e-5, |tape, ts| {
        let (x, y) = (tape.leaf(&ts[0]), tape.leaf(&ts[1]));
        let p = tape.matmul(x, y)?;
        let s = tape.tanh(p)?;
        Ok((tape.sum(s)?, vec![x, y]))
    })
    .unwrap();
    assert!(relative_error(&an, &nu) <= 1e-4);
}

pub fn similarity_loss_gradient_on_random_batch() {
    let mut r = rng(2);
    let es = tensor(&rows(&mut r, 6, 4));
    let et = tensor(&rows(&mut r, 6, 4));
    let (an, nu) = gradients(&[es, et], 1e-5, |tape, ts| {
        let (a, b) = (tape.leaf(&ts[0]), tape.leaf(&ts[1]));
        Ok((loss_sim(tape, a, b, 1.3)?, vec![a, b]))
    })
    .unwrap();
    assert!(relative_error(&an, &nu) <= 1e-4);
}

pub fn extractor_head_and_injection_match_straight_line_evaluation() {
    for (seed, activation) in [(1, Activation::Relu), (2, Activation::Tanh)] {
        let m = small_model(seed, activation);
        let x = rows(&mut rng(10 + seed), 4, 5);
        let (f, e) = m.extract_values(&tensor(&x)).unwrap();
        let y = m.predict_values(&tensor(&x)).unwrap();
        for (i, xi) in x.iter().enumerate() {
            let mut h = xi.clone();
            for l in &m.extractor {
                h = act(dense(&h, l), activation);
            }
            let emb = dense(&h, &m.projection);
            let out = head_oracle(&m.head, &h, activation);
            for (a, b) in f.row(i).iter().zip(&h) {
                assert!(close(*a, *b, 1e-12));
            }
            for (a, b) in e.row(i).iter().zip(&emb) {
                assert!(close(*a, *b, 1e-12));
            }
            for (a, b) in y.row(i).iter().zip(&out) {
                assert!(close(*a, *b, 1e-12));
            }
        }

        // injected width-5 features through layers 1..end
        let fs = rows(&mut rng(20 + seed), 3, 5);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let v = tape.constant(&tensor(&fs));
        let y = bound.head_forward_from_layer(&mut tape, v, 1).unwrap();
        for (i, row) in fs.iter().enumerate() {
            let expect = head_oracle(&m.head[1..], row, activation);
            for (a, b) in tape.value(y)[i * 3..(i + 1) * 3].iter().zip(&expect) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }
}

pub fn similarity_matches_double_loop_cosine() {
    let mut r = rng(3);
    let (a, b) = (rows(&mut r, 4, 3), rows(&mut r, 5, 3));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(&tensor(&a)), tape.constant(&tensor(&b)));
    let q = similarity_matrix(&mut tape, va, vb, 0.7).unwrap();
    assert_eq!(tape.shape(q), &[4, 5]);
    for i in 0..4 {
        for j in 0..5 {
            assert!(close(tape.value(q)[i * 5 + j], 0.7 * cosine(&a[i], &b[j]), 1e-12));
        }
    }
}

pub fn info_nce_matches_compensated_log_sum_exp() {
    let mut r = rng(4);
    let (es, et) = (rows(&mut r, 5, 4), rows(&mut r, 5, 4));
    let beta = 2.5;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(&tensor(&es)), tape.constant(&tensor(&et)));
    let l = loss_sim(&mut tape, a, b, beta).unwrap();
    let q: Rows = es
        .iter()
        .map(|s| et.iter().map(|t| beta * cosine(s, t)).collect())
        .collect();
    let expect = neumaier((0..5).map(|i| log_sum_exp(&q[i]) - q[i][i])) / 5.0;
    assert!(close(tape.item(l), expect, 1e-10));

    let mut tape = Tape::new();
    let qv = tape.constant(&tensor(&q));
    let l2 = info_nce(&mut tape, qv).unwrap();
    assert!(close(tape.item(l2), expect, 1e-10));
}

pub fn kl_hand_example() {
    let mut tape = Tape::new();
    // logits whose softmax is (0.9, 0.1) and (0.5, 0.5)
    let t = tape.constant(&Tensor::from_rows(&[[9f64.ln(), 0.0]]).unwrap());
    let s = tape.constant(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let l = loss_kd(&mut tape, t, s, Task::Dec).unwrap();
    let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((tape.item(l) - expect).abs() < 1e-12);
    assert!((tape.item(l) - 0.3681).abs() < 1e-4);
}

pub fn cross_entropy_matches_per_row_log_softmax() {
    let mut r = rng(5);
    let logits = rows(&mut r, 6, 4);
    let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
    let mut tape = Tape::new();
    let v = tape.constant(&tensor(&logits));
    let l = loss_ce(&mut tape, v, &labels).unwrap();
    let expect: f64 = logits
        .iter()
        .zip(&labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum::<f64>()
        / 6.0;
    assert!(close(tape.item(l), expect, 1e-12));
}

fn two_pass_ccc(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vp = p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = p.iter().zip(y).map(|(a, b)| (a - mp) * (b - my)).sum::<f64>() / n;
    2.0 * cov / (vp + vy + (mp - my).powi(2))
}

pub fn ccc_hand_fixture() {
    let p = [1.0, 2.0, 3.0, 4.0];
    let y = [1.1, 2.1, 2.9, 4.2];
    let mut tape = Tape::new();
    let v = tape.constant(&Tensor::column(&p).unwrap());
    let l = loss_ccc(&mut tape, v, &y).unwrap();
    assert!(close(1.0 - tape.item(l), two_pass_ccc(&p, &y), 1e-12));
    assert!(close(ccc(&p, &y).unwrap(), two_pass_ccc(&p, &y), 1e-12));
}

pub fn total_gradient_is_weighted_sum_of_term_gradients() {
    let mut r = rng(6);
    let x = tensor(&rows(&mut r, 4, 3)).with_requires_grad(true);
    let weights = LossWeights {
        sim: 0.3,
        unc: 1.7,
        kd: 0.6,
        task: 2.2,
    };
    let phi = tensor(&rows(&mut r, 3, 3));
    let labels = [0usize, 2, 1, 1];
    let teacher = tensor(&rows(&mut r, 4, 3));
    // every term is a function of one shared leaf x
    let build = |tape: &mut Tape, only: Option<usize>| {
        let xv = tape.leaf(&x);
        let tv = tape.constant(&teacher);
        let pv = tape.constant(&phi);
        let q = similarity_matrix(tape, xv, tv, 1.5).unwrap();
        let sim = info_nce(tape, q).unwrap();
        let alpha = dirichlet_alpha(tape, xv, pv, 1.5, 0.8).unwrap();
        let u = uncertainty(tape, alpha, UncertaintyForm::AsPrinted).unwrap();
        let unc = loss_unc(tape, u, q, 0.4).unwrap();
        let kd = loss_kd(tape, tv, xv, Task::Dec).unwrap();
        let task = loss_ce(tape, xv, &labels).unwrap();
        let all = [sim, unc, kd, task];
        let loss = match only {
            None => loss_total(
                tape,
                &LossParts {
                    sim: Some(sim),
                    unc: Some(unc),
                    kd: Some(kd),
                    task: Some(task),
                },
                &weights,
            )
            .unwrap(),
            Some(k) => all[k],
        };
        (xv, loss)
    };
    let grad_of = |only| {
        let mut tape = Tape::new();
        let (xv, loss) = build(&mut tape, only);
        tape.backward(loss).unwrap().get(xv).unwrap().to_vec()
    };
    let total = grad_of(None);
    let lambdas = [weights.sim, weights.unc, weights.kd, weights.task];
    let mut combined = vec![0.0; total.len()];
    for (k, lam) in lambdas.iter().enumerate() {
        for (c, g) in combined.iter_mut().zip(grad_of(Some(k))) {
            *c += lam * g;
        }
    }
    for (a, b) in total.iter().zip(&combined) {
        assert!((a - b).abs() <= 1e-10);
    }
}

pub fn prototypes_match_group_mean_oracle() {
    let mut r = rng(7);
    let centers = rows(&mut r, 3, 4);
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30 {
        let c = i % 3;
        labels.push(c);
        emb.push(
            centers[c]
                .iter()
                .map(|v| v + r.random_range(-0.3..0.3))
                .collect::<Vec<f64>>(),
        );
    }
    let bank = init_prototypes(&tensor(&emb), &labels, 3).unwrap();
    for c in 0..3 {
        let members: Vec<&Vec<f64>> = emb
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .map(|(e, _)| e)
            .collect();
        let mean: Vec<f64> = (0..4)
            .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64)
            .collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in bank.phi.row(c).iter().zip(&mean) {
            assert!(close(*a, b / norm, 1e-12));
        }
    }
}

pub fn evidence_and_uncertainty_match_scalar_loops() {
    let mut r = rng(8);
    let (e, phi) = (rows(&mut r, 5, 3), rows(&mut r, 4, 3));
    let (beta, tau) = (1.8, 0.6);
    let mut tape = Tape::new();
    let (ev, pv) = (tape.constant(&tensor(&e)), tape.constant(&tensor(&phi)));
    let alpha = dirichlet_alpha(&mut tape, ev, pv, beta, tau).unwrap();
    let u = uncertainty(&mut tape, alpha, UncertaintyForm::AsPrinted).unwrap();
    let ui = uncertainty(&mut tape, alpha, UncertaintyForm::Inverse).unwrap();
    for i in 0..5 {
        let row: Vec<f64> = (0..4)
            .map(|j| (beta * cosine(&e[i], &phi[j]) / tau).clamp(-36.0, 60.0).exp() + 1.0)
            .collect();
        for j in 0..4 {
            assert!(close(tape.value(alpha)[i * 4 + j], row[j], 1e-12));
        }
        let total: f64 = row.iter().sum();
        assert!(close(tape.value(u)[i], 1.0 - 4.0 / total, 1e-12));
        assert!(close(tape.value(ui)[i], 4.0 / total, 1e-12));
    }
}

pub fn uncertainty_hand_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::from_rows(&[[2.0, 2.0]]).unwrap());
    let u = uncertainty(&mut tape, a, UncertaintyForm::AsPrinted).unwrap();
    assert_eq!(tape.value(u), &[0.5]);

    let e = tape.constant(&Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap());
    let phi = tape.constant(&Tensor::from_rows(&[[3.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap());
    let alpha = dirichlet_alpha(&mut tape, e, phi, 1.0, 1.0).unwrap();
    assert!((tape.value(alpha)[0] - (1f64.exp() + 1.0)).abs() < 1e-15);

    let u = tape.constant(&Tensor::column(&[0.5, 0.5]).unwrap());
    let q = tape.constant(&Tensor::from_rows(&[[1.0, 0.2], [0.6, 1.0]]).unwrap());
    let l = loss_unc(&mut tape, u, q, 1.0).unwrap();
    assert!((tape.item(l) - 0.05).abs() < 1e-15);
}

pub fn uncertainty_loss_matches_double_loop() {
    let mut r = rng(9);
    let n = 6;
    let u: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let q = rows(&mut r, n, n);
    let delta = 0.35;
    let mut tape = Tape::new();
    let (uv, qv) = (tape.constant(&Tensor::column(&u).unwrap()), tape.constant(&tensor(&q)));
    let l = loss_unc(&mut tape, uv, qv, delta).unwrap();
    let mut expect = 0.0;
    for j in 0..n {
        let mut h = 0.0;
        for k in 0..n {
            if k != j {
                h += q[j][k];
            }
        }
        h /= (n - 1) as f64;
        expect += (u[j] - delta * h).powi(2);
    }
    assert!(close(tape.item(l), expect / n as f64, 1e-12));
}

pub fn full_flip_rate_disagrees_with_clean_labels() {
    let spec = GeneratorSpec {
        n_trials: 100,
        samples_per_trial: 100,
        label_noise: 1.0,
        student_dim: 2,
        teacher_dim: 2,
        ..Default::default()
    };
    let ds = generate(&spec).unwrap();
    assert_eq!(ds.len(), 10_000);
    let agree = ds.samples.iter().filter(|s| Some(s.label) == s.clean_label()).count() as f64 / 1e4;
    assert!(agree <= 0.02, "agreement {agree}");
}

pub fn flip_rate_is_calibrated() {
    let spec = GeneratorSpec {
        n_trials: 100,
        samples_per_trial: 100,
        label_noise: 0.3,
        student_dim: 2,
        teacher_dim: 2,
        seed: 5,
        ..Default::default()
    };
    let ds = generate(&spec).unwrap();
    let flipped = ds.samples.iter().filter(|s| Some(s.label) != s.clean_label()).count() as f64 / 1e4;
    assert!((flipped - 0.3).abs() <= 0.02, "flip rate {flipped}");
}

pub fn no_trial_spans_two_folds_over_100_seeds() {
    let ds = generate(&GeneratorSpec {
        n_trials: 13,
        samples_per_trial: 3,
        student_dim: 2,
        teacher_dim: 2,
        ..Default::default()
    })
    .unwrap();
    for seed in 0..100 {
        let plan = split_group_by_trial(&ds, 5, seed).unwrap();
        for fold in 0..5 {
            let (train, val) = plan.split(&ds, fold);
            assert_eq!(train.len() + val.len(), ds.len());
            let val_trials: std::collections::BTreeSet<u64> = val.iter().map(|&i| ds.samples[i].trial_id).collect();
            assert!(train.iter().all(|&i| !val_trials.contains(&ds.samples[i].trial_id)));
        }
    }
}

pub fn constructed_file_with_declared_widths() {
    let mut text = String::from("#cmkd v1 task=dec S=8 T=16 C=2\ntrial_id,y");
    for j in 0..8 {
        text.push_str(&format!(",xs_{j}"));
    }
    for j in 0..16 {
        text.push_str(&format!(",xt_{j}"));
    }
    text.push('\n');
    for i in 0..4 {
        let cells: Vec<String> = (0..24).map(|k| format!("{}", (i * 24 + k) as f64 / 10.0)).collect();
        text.push_str(&format!("{},{},{}\n", i / 2, i % 2, cells.join(",")));
    }
    let ds = parse_dataset(&text, Path::new("fixture.csv")).unwrap();
    assert_eq!((ds.student_dim, ds.teacher_dim, ds.len()), (8, 16, 4));
    assert_eq!(ds.samples[3].x_t[15], 9.5);
    assert_eq!(ds.samples[1].label, Label::Class(1));
}

pub fn aggregation_matches_two_pass_oracle() {
    let mut r = rng(11);
    let v: Vec<f64> = (0..7).map(|_| r.random_range(0.0..1.0)).collect();
    let m = v.iter().sum::<f64>() / 7.0;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0).sqrt();
    let got = mean_std(&v);
    assert!((got.mean - m).abs() <= 1e-12 && (got.std - s).abs() <= 1e-12);
}

pub fn classification_metrics_match_confusion_matrix() {
    let mut r = rng(12);
    for _ in 0..20 {
        let c = r.random_range(2..=5);
        let n = r.random_range(5..40);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut cm = vec![vec![0usize; c]; c];
        for (&t, &p) in truth.iter().zip(&pred) {
            cm[t][p] += 1;
        }
        let acc = (0..c).map(|k| cm[k][k]).sum::<usize>() as f64 / n as f64;
        let mut f1s = Vec::new();
        for k in 0..c {
            let tp = cm[k][k] as f64;
            let row: f64 = cm[k].iter().sum::<usize>() as f64;
            let col: f64 = (0..c).map(|t| cm[t][k]).sum::<usize>() as f64;
            if row + col == 0.0 {
                continue;
            }
            let (prec, rec) = (
                if col > 0.0 { tp / col } else { 0.0 },
                if row > 0.0 { tp / row } else { 0.0 },
            );
            f1s.push(if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            });
        }
        let f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
        assert!((accuracy(&pred, &truth).unwrap() - acc).abs() <= 1e-12);
        assert!((macro_f1(&pred, &truth, c).unwrap() - f1).abs() <= 1e-12);
    }
}

pub fn regression_metrics_match_two_pass_oracles() {
    let mut r = rng(13);
    for _ in 0..20 {
        let n = r.random_range(3..30);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| 0.7 * v + r.random_range(-1.0..1.0)).collect();
        let nf = n as f64;
        let (mp, my) = (p.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
        let cov: f64 = p.iter().zip(&y).map(|(a, b)| (a - mp) * (b - my)).sum();
        let sp = p.iter().map(|v| (v - mp).powi(2)).sum::<f64>().sqrt();
        let sy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>().sqrt();
        let mse = p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nf;
        assert!((rmse(&p, &y).unwrap() - mse.sqrt()).abs() <= 1e-12);
        assert!((pcc(&p, &y).unwrap() - cov / (sp * sy)).abs() <= 1e-12);
        assert!((ccc(&p, &y).unwrap() - two_pass_ccc(&p, &y)).abs() <= 1e-12);
    }
    let y = [-1.5, -0.5, 0.5, 1.5];
    let p: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
    assert!((ccc(&p, &y).unwrap() - 0.8).abs() <= 1e-12);
}

pub fn exported_embeddings_equal_extract_output() {
    let ds = generate(&GeneratorSpec {
        n_trials: 3,
        samples_per_trial: 4,
        student_dim: 5,
        teacher_dim: 6,
        ..Default::default()
    })
    .unwrap();
    let m = small_model(4, Activation::Relu);
    let idx = ds.all_indices();
    let csv = embeddings_csv(&m, &ds, &idx).unwrap();
    let (_, e) = m.extract_values(&ds.student_inputs(&idx)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), ds.len() + 1);
    assert_eq!(lines[0], "trial_id,y,e_0,e_1,e_2");
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 2 + 3);
        assert_eq!(cells[0].parse::<u64>().unwrap(), ds.samples[i].trial_id);
        for j in 0..3 {
            assert_eq!(cells[2 + j].parse::<f64>().unwrap(), e.get(i, j));
        }
    }
}

pub const CASES: &[(&str, fn())] = &[
    ("matmul_gradient_3x4_by_4x2", matmul_gradient_3x4_by_4x2),
    (
        "similarity_loss_gradient_on_random_batch",
        similarity_loss_gradient_on_random_batch,
    ),
    (
        "extractor_head_and_injection_match_straight_line_evaluation",
        extractor_head_and_injection_match_straight_line_evaluation,
    ),
    (
        "similarity_matches_double_loop_cosine",
        similarity_matches_double_loop_cosine,
    ),
    (
        "info_nce_matches_compensated_log_sum_exp",
        info_nce_matches_compensated_log_sum_exp,
    ),
    ("kl_hand_example", kl_hand_example),
    (
        "cross_entropy_matches_per_row_log_softmax",
        cross_entropy_matches_per_row_log_softmax,
    ),
    ("ccc_hand_fixture", ccc_hand_fixture),
    (
        "total_gradient_is_weighted_sum_of_term_gradients",
        total_gradient_is_weighted_sum_of_term_gradients,
    ),
    ("prototypes_match_group_mean_oracle", prototypes_match_group_mean_oracle),
    (
        "evidence_and_uncertainty_match_scalar_loops",
        evidence_and_uncertainty_match_scalar_loops,
    ),
    ("uncertainty_hand_examples", uncertainty_hand_examples),
    (
        "uncertainty_loss_matches_double_loop",
        uncertainty_loss_matches_double_loop,
    ),
    (
        "full_flip_rate_disagrees_with_clean_labels",
        full_flip_rate_disagrees_with_clean_labels,
    ),
    ("flip_rate_is_calibrated", flip_rate_is_calibrated),
    (
        "no_trial_spans_two_folds_over_100_seeds",
        no_trial_spans_two_folds_over_100_seeds,
    ),
    (
        "constructed_file_with_declared_widths",
        constructed_file_with_declared_widths,
    ),
    (
        "aggregation_matches_two_pass_oracle",
        aggregation_matches_two_pass_oracle,
    ),
    (
        "classification_metrics_match_confusion_matrix",
        classification_metrics_match_confusion_matrix,
    ),
    (
        "regression_metrics_match_two_pass_oracles",
        regression_metrics_match_two_pass_oracles,
    ),
    (
        "exported_embeddings_equal_extract_output",
        exported_embeddings_equal_extract_output,
    ),
];
