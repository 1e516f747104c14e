//! Central finite-difference checks of every loss kernel and of the full
//! distillation objective.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{loss_ccc, loss_ce, loss_kd, loss_sim, similarity_matrix, LossConfig, LossWeights, Task};
use crate::models::{Activation, ExtractorConfig, HeadConfig, ModelParams};
use crate::prototypes::{dirichlet_alpha, loss_unc, uncertainty, UncertaintyForm};
use crate::seeded_rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{distillation_loss, KdMode, StepInputs, Targets};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradient norms below this are compared in absolute terms.
pub const NORM_FLOOR: f64 = 1e-8;

/// Names of the checked kernels, in report order.
pub const KERNELS: [&str; 6] = ["loss_sim", "loss_unc", "loss_kd", "loss_ce", "loss_ccc", "total"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: perturbs the analytic gradient of the named kernel.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, NORM_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied())
        .max(norm(&mut b.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Analytic and central-difference gradients of a scalar objective. The
/// closure registers the given tensors on the tape and returns the loss
/// with the var of each tensor.
pub fn gradients<F>(inputs: &[Tensor], step: f64, objective: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let (loss, vars) = objective(&mut tape, &inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&inputs)
        .flat_map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.clone();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].numel() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = inputs[k].data().to_vec();
                data[i] += delta;
                probe[k].set_data(data)?;
                let mut tape = Tape::new();
                let (loss, _) = objective(&mut tape, &probe)?;
                Ok(tape.item(loss))
            };
            let up = eval(step)?;
            let down = eval(-step)?;
            probe[k].set_data(inputs[k].data().to_vec())?;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    Ok((analytic, numeric))
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t)).collect()
}

/// Builds the scalar objective and returns it with the leaves to differentiate.
type Objective = Box<dyn Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>>;

struct Instance {
    inputs: Vec<Tensor>,
    objective: Objective,
}

fn leaf_instance(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        objective: Box::new(move |tape, ts| {
            let vars = leaves(tape, ts);
            Ok((f(tape, &vars)?, vars))
        }),
    }
}

fn sim_instance<R: Rng>(rng: &mut R) -> Instance {
    let (n, d) = (rng.random_range(2..=6), rng.random_range(2..=5));
    let beta = rng.random_range(0.5..3.0);
    leaf_instance(
        vec![random_matrix(rng, n, d), random_matrix(rng, n, d)],
        move |tape, v| loss_sim(tape, v[0], v[1], beta),
    )
}

fn unc_instance<R: Rng>(rng: &mut R, index: usize) -> Instance {
    let (n, d, c) = (
        rng.random_range(2..=6),
        rng.random_range(2..=5),
        rng.random_range(2..=4),
    );
    let beta = rng.random_range(0.5..3.0);
    let tau = rng.random_range(0.5..2.0);
    let delta = rng.random_range(0.05..1.0);
    let form = if index.is_multiple_of(2) {
        UncertaintyForm::AsPrinted
    } else {
        UncertaintyForm::Inverse
    };
    let inputs = vec![
        random_matrix(rng, n, d),
        random_matrix(rng, n, d),
        random_matrix(rng, c, d),
    ];
    leaf_instance(inputs, move |tape, v| {
        let q = similarity_matrix(tape, v[0], v[1], beta)?;
        let alpha = dirichlet_alpha(tape, v[0], v[2], beta, tau)?;
        let u = uncertainty(tape, alpha, form)?;
        loss_unc(tape, u, q, delta)
    })
}

fn kd_instance<R: Rng>(rng: &mut R, index: usize) -> Instance {
    let n = rng.random_range(2..=6);
    let (task, width) = if index.is_multiple_of(2) {
        (Task::Dec, rng.random_range(2..=4))
    } else {
        (Task::Cer, 1)
    };
    let y_t = random_matrix(rng, n, width);
    leaf_instance(vec![random_matrix(rng, n, width)], move |tape, v| {
        let t = tape.constant(&y_t);
        loss_kd(tape, t, v[0], task)
    })
}

fn ce_instance<R: Rng>(rng: &mut R) -> Instance {
    let (n, c) = (rng.random_range(1..=6), rng.random_range(2..=5));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    leaf_instance(vec![random_matrix(rng, n, c)], move |tape, v| {
        loss_ce(tape, v[0], &labels)
    })
}

fn ccc_instance<R: Rng>(rng: &mut R) -> Instance {
    let n = rng.random_range(3..=8);
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    leaf_instance(vec![random_matrix(rng, n, 1)], move |tape, v| {
        loss_ccc(tape, v[0], &target)
    })
}

/// Full weighted objective through the student extractor and head, the
/// frozen teacher, the prototype bank and the injection path.
fn total_instance<R: Rng>(rng: &mut R, index: usize) -> Instance {
    let task = if index.is_multiple_of(2) { Task::Dec } else { Task::Cer };
    let out = if task == Task::Dec { rng.random_range(2..=3) } else { 1 };
    let n = rng.random_range(3..=5);
    let (s_dim, t_dim, c) = (3, 4, rng.random_range(2..=3));
    let ext = |input_dim, feature_dim| ExtractorConfig {
        input_dim,
        hidden_dims: vec![3],
        feature_dim,
        embed_dim: 2,
        activation: Activation::Tanh,
    };
    let head = HeadConfig {
        layer_dims: vec![3, out],
        injection_layer: 1,
    };
    let mut teacher = ModelParams::new(ext(t_dim, 4), head.clone(), rng).expect("valid");
    teacher.freeze();
    let student = ModelParams::new(ext(s_dim, 3), head, rng).expect("valid");
    let x_s = random_matrix(rng, n, s_dim);
    let x_t = random_matrix(rng, n, t_dim);
    let targets = match task {
        Task::Dec => Targets::Classes((0..n).map(|_| rng.random_range(0..out)).collect()),
        Task::Cer => Targets::Values((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
    };
    let loss = LossConfig {
        beta: rng.random_range(0.5..3.0),
        tau: rng.random_range(0.5..2.0),
        delta: rng.random_range(0.05..1.0),
    };
    let mut inputs: Vec<Tensor> = student.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(random_matrix(rng, c, 2));
    Instance {
        inputs,
        objective: Box::new(move |tape, ts| {
            let mut s = student.clone();
            for (slot, t) in s.tensors_mut().into_iter().zip(ts) {
                *slot = t.clone();
            }
            let sb = s.bind(tape);
            let tb = teacher.bind(tape);
            let phi = tape.leaf(ts.last().expect("phi"));
            let xs = tape.constant(&x_s);
            let xt = tape.constant(&x_t);
            let (total, _) = distillation_loss(
                tape,
                &StepInputs {
                    student: &sb,
                    teacher: Some(&tb),
                    phi: Some(phi),
                    x_s: xs,
                    x_t: Some(xt),
                    targets: &targets,
                    task,
                    loss: &loss,
                    weights: &LossWeights::ALL,
                    uncertainty_form: UncertaintyForm::AsPrinted,
                    injection_layer: 1,
                    kd_mode: KdMode::CrossHead,
                },
            )?;
            let mut vars = sb.vars();
            vars.push(phi);
            Ok((total, vars))
        }),
    }
}

/// Runs every kernel on `instances` random problems each.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<Vec<KernelReport>> {
    let mut reports = Vec::new();
    for (k, name) in KERNELS.iter().enumerate() {
        let mut rng = seeded_rng(config.seed, 1000 + k as u64);
        let mut worst: f64 = 0.0;
        for i in 0..config.instances {
            let inst = match *name {
                "loss_sim" => sim_instance(&mut rng),
                "loss_unc" => unc_instance(&mut rng, i),
                "loss_kd" => kd_instance(&mut rng, i),
                "loss_ce" => ce_instance(&mut rng),
                "loss_ccc" => ccc_instance(&mut rng),
                _ => total_instance(&mut rng, i),
            };
            let (mut analytic, numeric) = gradients(&inst.inputs, config.step, &inst.objective)?;
            if config.corrupt.as_deref() == Some(name) {
                analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
            }
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        reports.push(KernelReport {
            name: name.to_string(),
            instances: config.instances,
            max_rel_error: worst,
            passed: worst <= config.tolerance,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quadratic_oracle() {
        let x = Tensor::column(&[0.3, -1.2]).unwrap();
        let (a, n) = gradients(&[x], 1e-5, |tape, ts| {
            let v = tape.leaf(&ts[0]);
            let sq = tape.square(v)?;
            Ok((tape.sum(sq)?, vec![v]))
        })
        .unwrap();
        assert_eq!(a, vec![0.6, -2.4]);
        assert!(relative_error(&a, &n) < 1e-9);
    }
}
