//! Fully connected feature extractors and task heads.
//!
//! An extractor maps an input batch to the feature `f` (last hidden layer,
//! activated) and the embedding `e`, a linear projection of `f` into the
//! latent space shared by both modalities. A head is a dense stack whose last
//! layer has no activation. The teacher head can also be entered part-way
//! through at an injection layer, which is how student features are read by
//! the teacher's decision layers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.embed_dim];
        if dims.iter().chain(&self.hidden_dims).any(|&d| d == 0) {
            return Err(Error::Config(format!("extractor dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Widths of every dense layer; the last entry is the output width.
    pub layer_dims: Vec<usize>,
    /// First teacher-head layer applied to injected student features.
    pub injection_layer: usize,
}

impl HeadConfig {
    pub fn output_dim(&self) -> usize {
        self.layer_dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "head layer widths must be >= 1: {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    /// Width expected at the input of head layer `layer`.
    pub fn input_width_at(&self, head_input_dim: usize, layer: usize) -> usize {
        if layer == 0 {
            head_input_dim
        } else {
            self.layer_dims[layer - 1]
        }
    }
}

/// Checks that student features can enter the teacher head at its
/// injection layer without an adapter.
pub fn check_injection(student: &ExtractorConfig, teacher: &ExtractorConfig, teacher_head: &HeadConfig) -> Result<()> {
    let l = teacher_head.injection_layer;
    let n = teacher_head.layer_dims.len();
    if l < 1 || l >= n {
        return Err(Error::Config(format!(
            "injection layer {l} must satisfy 1 <= l < {n} (number of teacher head layers)"
        )));
    }
    let width = teacher_head.input_width_at(teacher.feature_dim, l);
    if width != student.feature_dim {
        return Err(Error::Config(format!(
            "student feature_dim {} does not match teacher head layer {l} input width {width}",
            student.feature_dim
        )));
    }
    if student.embed_dim != teacher.embed_dim {
        return Err(Error::Config(format!(
            "student embed_dim {} differs from teacher embed_dim {}",
            student.embed_dim, teacher.embed_dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![1, fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor_config: ExtractorConfig,
    pub head_config: HeadConfig,
    pub extractor: Vec<Linear>,
    pub projection: Linear,
    pub head: Vec<Linear>,
    frozen: bool,
}

impl ModelParams {
    /// Uniform(±1/√fan_in) weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        extractor_config: ExtractorConfig,
        head_config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(extractor_config, head_config, |i, o| Linear::init(i, o, rng))
    }

    pub fn zeros(extractor_config: ExtractorConfig, head_config: HeadConfig) -> Result<Self> {
        Self::build(extractor_config, head_config, Linear::zeros)
    }

    fn build(
        extractor_config: ExtractorConfig,
        head_config: HeadConfig,
        mut make: impl FnMut(usize, usize) -> Linear,
    ) -> Result<Self> {
        extractor_config.validate()?;
        head_config.validate()?;
        let extractor = extractor_config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| make(i, o))
            .collect();
        let projection = make(extractor_config.feature_dim, extractor_config.embed_dim);
        let mut widths = vec![extractor_config.feature_dim];
        widths.extend(&head_config.layer_dims);
        let head = widths.windows(2).map(|w| make(w[0], w[1])).collect();
        let mut params = Self {
            extractor_config,
            head_config,
            extractor,
            projection,
            head,
            frozen: false,
        };
        params.set_trainable(true);
        Ok(params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter as constant for subsequent tapes.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.set_trainable(false);
    }

    fn set_trainable(&mut self, trainable: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(trainable);
            t.zero_grad();
        }
    }

    /// Parameters in a fixed order: extractor, projection, head.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &l.weight));
            out.push((format!("extractor.{i}.bias"), &l.bias));
        }
        out.push(("projection.weight".into(), &self.projection.weight));
        out.push(("projection.bias".into(), &self.projection.bias));
        for (i, l) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), &l.weight));
            out.push((format!("head.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .chain(self.head.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut bind = |l: &Linear| (tape.leaf(&l.weight), tape.leaf(&l.bias));
        let extractor = self.extractor.iter().map(&mut bind).collect();
        let projection = bind(&self.projection);
        let head = self.head.iter().map(&mut bind).collect();
        BoundModel {
            extractor_config: self.extractor_config.clone(),
            head_config: self.head_config.clone(),
            extractor,
            projection,
            head,
        }
    }

    /// Copies gradients from a backward pass into each parameter's `grad`.
    pub fn collect_grads(&mut self, bound: &BoundModel, grads: &crate::tensor::Gradients) -> Result<()> {
        let vars = bound.vars();
        for (t, v) in self.tensors_mut().into_iter().zip(vars) {
            grads.write_into(v, t)?;
        }
        Ok(())
    }

    /// Forward pass without gradients: `(f, e)`.
    pub fn extract_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let (f, e) = bound.extract(&mut tape, xv)?;
        Ok((tape.tensor(f), tape.tensor(e)))
    }

    /// Extractor followed by the full head, without gradients.
    pub fn predict_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let (f, _) = bound.extract(&mut tape, xv)?;
        let y = bound.head_forward(&mut tape, f)?;
        Ok(tape.tensor(y))
    }
}

/// A [`ModelParams`] registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    extractor_config: ExtractorConfig,
    head_config: HeadConfig,
    extractor: Vec<(Var, Var)>,
    projection: (Var, Var),
    head: Vec<(Var, Var)>,
}

fn dense(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    Ok(tape.add_row(xw, b)?)
}

fn activate(tape: &mut Tape, x: Var, activation: Activation) -> Result<Var> {
    Ok(match activation {
        Activation::Relu => tape.relu(x)?,
        Activation::Tanh => tape.tanh(x)?,
    })
}

fn expect_width(op: &'static str, tape: &Tape, x: Var, width: usize) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(TensorError::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![width],
        }
        .into());
    }
    Ok(())
}

impl BoundModel {
    /// Parameter vars in the order of [`ModelParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.projection))
            .chain(&self.head)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// `(f, e)` for a `batch × input_dim` input.
    pub fn extract(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        expect_width("extract", tape, x, self.extractor_config.input_dim)?;
        let mut h = x;
        for &layer in &self.extractor {
            let z = dense(tape, h, layer)?;
            h = activate(tape, z, self.extractor_config.activation)?;
        }
        let e = dense(tape, h, self.projection)?;
        Ok((h, e))
    }

    /// Full head. DEC heads return raw logits.
    pub fn head_forward(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        expect_width("head_forward", tape, f, self.extractor_config.feature_dim)?;
        self.head_suffix(tape, f, 0)
    }

    /// Teacher head from `layer` onward applied to injected features.
    pub fn head_forward_from_layer(&self, tape: &mut Tape, f_s: Var, layer: usize) -> Result<Var> {
        let n = self.head.len();
        if layer < 1 || layer >= n {
            return Err(Error::Config(format!("injection layer {layer} outside 1..{n}")));
        }
        let width = self
            .head_config
            .input_width_at(self.extractor_config.feature_dim, layer);
        expect_width("head_forward_from_layer", tape, f_s, width)?;
        instrument::injection();
        self.head_suffix(tape, f_s, layer)
    }

    fn head_suffix(&self, tape: &mut Tape, input: Var, from: usize) -> Result<Var> {
        let last = self.head.len() - 1;
        let mut h = input;
        for (i, &layer) in self.head.iter().enumerate().skip(from) {
            h = dense(tape, h, layer)?;
            if i != last {
                h = activate(tape, h, self.extractor_config.activation)?;
            }
        }
        Ok(h)
    }
}
