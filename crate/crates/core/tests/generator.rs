use cmkd::data::{generate, split_group_by_trial, Dataset, GeneratorSpec};
use cmkd::losses::loss_ce;
use cmkd::metrics::{accuracy, argmax_rows};
use cmkd::models::{Activation, ExtractorConfig, HeadConfig, ModelParams};
use cmkd::tensor::{Tape, Tensor};
use cmkd::training::OptimizerState;

/// Small MLP probe trained on one modality; returns held-out clean accuracy.
fn probe(ds: &Dataset, teacher_view: bool, seed: u64) -> f64 {
    let plan = split_group_by_trial(ds, 5, seed).unwrap();
    let (train, val) = plan.split(ds, 0);
    let inputs = |idx: &[usize]| -> Tensor {
        if teacher_view {
            ds.teacher_inputs(idx)
        } else {
            ds.student_inputs(idx)
        }
    };
    let ext = ExtractorConfig {
        input_dim: if teacher_view { ds.teacher_dim } else { ds.student_dim },
        hidden_dims: vec![],
        feature_dim: 16,
        embed_dim: 2,
        activation: Activation::Relu,
    };
    let head = HeadConfig {
        layer_dims: vec![ds.num_classes],
        injection_layer: 1,
    };
    let mut m = ModelParams::new(ext, head, &mut cmkd::seeded_rng(seed, 1)).unwrap();
    let mut opt = OptimizerState::new(m.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let x = inputs(&train);
    let y = ds.class_labels(&train);
    for _ in 0..200 {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.constant(&x);
        let (f, _) = b.extract(&mut tape, xv).unwrap();
        let out = b.head_forward(&mut tape, f).unwrap();
        let loss = loss_ce(&mut tape, out, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        m.collect_grads(&b, &g).unwrap();
        opt.step(&mut m.tensors_mut(), 1e-2).unwrap();
    }
    let pred = argmax_rows(&m.predict_values(&inputs(&val)).unwrap());
    let clean: Vec<usize> = ds
        .clean_labels(&val)
        .unwrap()
        .iter()
        .map(|l| l.class().unwrap())
        .collect();
    accuracy(&pred, &clean).unwrap()
}

#[test]
fn teacher_view_is_learnably_better() {
    let mut margins = Vec::new();
    for seed in 0..5 {
        let ds = generate(&GeneratorSpec {
            seed,
            student_noise_scale: 1.0,
            ..Default::default()
        })
        .unwrap();
        margins.push(probe(&ds, true, seed) - probe(&ds, false, seed));
    }
    let mean = margins.iter().sum::<f64>() / 5.0;
    assert!(mean > 0.0, "margins {margins:?}");
    assert!(margins.iter().filter(|&&m| m > 0.0).count() >= 4, "margins {margins:?}");
}

#[test]
fn regeneration_is_byte_identical() {
    let spec = GeneratorSpec {
        seed: 11,
        n_trials: 4,
        samples_per_trial: 5,
        ..Default::default()
    };
    assert_eq!(generate(&spec).unwrap().to_csv(), generate(&spec).unwrap().to_csv());
}
