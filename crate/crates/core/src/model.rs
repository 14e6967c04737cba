//! The three-layer CNN: two 256-filter convolutional feature extractors
//! followed by a 14-way fully connected output layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Structural hyperparameters of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchitectureConfig {
    /// Pixels per side of the square input.
    pub input_size: usize,
    pub input_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    /// Square kernel size; must be odd so same-padding preserves size.
    pub kernel: usize,
    pub pool: usize,
    pub num_classes: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            input_size: 64,
            input_channels: 3,
            conv1_filters: 256,
            conv2_filters: 256,
            kernel: 3,
            pool: 2,
            num_classes: 14,
        }
    }
}

impl ArchitectureConfig {
    /// The reduced 16/16-filter layout used for fast experiments.
    pub fn reduced(input_size: usize, num_classes: usize) -> Self {
        ArchitectureConfig {
            input_size,
            conv1_filters: 16,
            conv2_filters: 16,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let fail = |m: String| Err(TensorError::Config(m));
        if self.pool != 2 {
            return fail(format!("pool must be 2, got {}", self.pool));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.pool * self.pool) {
            return fail(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.pool * self.pool
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 {
            return fail("channel and filter counts must be at least 1".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.kernel / 2 >= self.input_size / 2 {
            return fail(format!(
                "kernel {} is too large for input size {}",
                self.kernel, self.input_size
            ));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Width of the flattened features feeding the dense layer.
    pub fn dense_inputs(&self) -> usize {
        let side = self.input_size / (self.pool * self.pool);
        self.conv2_filters * side * side
    }

    /// Expected tensor shapes in checkpoint record order.
    pub fn param_shapes(&self) -> [(&'static str, Vec<usize>); 6] {
        let k = self.kernel;
        [
            ("conv1_weight", vec![self.conv1_filters, self.input_channels, k, k]),
            ("conv1_bias", vec![self.conv1_filters]),
            ("conv2_weight", vec![self.conv2_filters, self.conv1_filters, k, k]),
            ("conv2_bias", vec![self.conv2_filters]),
            ("dense_weight", vec![self.dense_inputs(), self.num_classes]),
            ("dense_bias", vec![self.num_classes]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub const PARAM_NAMES: [&str; 6] = [
    "conv1_weight",
    "conv1_bias",
    "conv2_weight",
    "conv2_bias",
    "dense_weight",
    "dense_bias",
];

/// Weights and biases of the network along with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    config: ArchitectureConfig,
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
    pub dense_weight: Tensor<T>,
    pub dense_bias: Tensor<T>,
}

/// Builds a He-initialised model in single precision.
pub fn build_model(config: ArchitectureConfig, seed: u64) -> Result<ModelParams<f32>, TensorError> {
    ModelParams::init(config, seed)
}

impl<T: Real> ModelParams<T> {
    /// He initialisation: weights ~ N(0, 2 / fan_in), biases zero.
    ///
    /// Draws come from ChaCha8 seeded with `seed`, in the order conv1, conv2,
    /// dense, row-major within each tensor. Values are drawn in f64 so both
    /// precisions see the same underlying numbers.
    pub fn init(config: ArchitectureConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], fan_in: usize| -> Result<Tensor<T>, TensorError> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| TensorError::Config(e.to_string()))?;
            Tensor::from_fn(shape, |_| T::from_f64(normal.sample(&mut rng)))
        };
        let [s1, b1, s2, b2, sd, bd] = config.param_shapes().map(|(_, s)| s);
        let k2 = config.kernel * config.kernel;
        let conv1_weight = draw(&s1, config.input_channels * k2)?;
        let conv2_weight = draw(&s2, config.conv1_filters * k2)?;
        let dense_weight = draw(&sd, config.dense_inputs())?;
        Ok(ModelParams {
            config,
            conv1_weight,
            conv1_bias: Tensor::zeros(&b1)?,
            conv2_weight,
            conv2_bias: Tensor::zeros(&b2)?,
            dense_weight,
            dense_bias: Tensor::zeros(&bd)?,
        })
    }

    /// Assembles a model from tensors in record order, validating shapes.
    pub fn from_tensors(
        config: ArchitectureConfig,
        tensors: [Tensor<T>; 6],
    ) -> Result<Self, TensorError> {
        config.validate()?;
        for ((name, expected), t) in config.param_shapes().iter().zip(&tensors) {
            if t.shape() != expected.as_slice() {
                return Err(TensorError::Dimension(format!(
                    "{name} has shape {:?}, config implies {expected:?}",
                    t.shape()
                )));
            }
        }
        let [conv1_weight, conv1_bias, conv2_weight, conv2_bias, dense_weight, dense_bias] =
            tensors;
        Ok(ModelParams {
            config,
            conv1_weight,
            conv1_bias,
            conv2_weight,
            conv2_bias,
            dense_weight,
            dense_bias,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn tensors(&self) -> [&Tensor<T>; 6] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
            &self.dense_weight,
            &self.dense_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.dense_weight,
            &mut self.dense_bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            conv1_weight: self.conv1_weight.cast(),
            conv1_bias: self.conv1_bias.cast(),
            conv2_weight: self.conv2_weight.cast(),
            conv2_bias: self.conv2_bias.cast(),
            dense_weight: self.dense_weight.cast(),
            dense_bias: self.dense_bias.cast(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), TensorError> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_size, c.input_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(TensorError::Dimension(format!(
                "model expects input [N, {}, {}, {}], got {shape:?}",
                expected[0], expected[1], expected[2]
            )));
        }
        Ok(())
    }

    /// Raw logits `[N, num_classes]` without recording anything.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_input(batch.shape())?;
        let pad = self.config.padding();
        let h = ops::conv2d(batch, &self.conv1_weight, &self.conv1_bias, 1, pad)?;
        let (h, _) = ops::maxpool2(&ops::relu(&h))?;
        let h = ops::conv2d(&h, &self.conv2_weight, &self.conv2_bias, 1, pad)?;
        let (h, _) = ops::maxpool2(&ops::relu(&h))?;
        let n = h.dim(0);
        let f = h.len() / n;
        let h = h.reshape(&[n, f])?;
        ops::dense(&h, &self.dense_weight, &self.dense_bias)
    }

    /// Registers the parameters as tape leaves and records the forward pass.
    pub fn forward_taped(
        &self,
        tape: &mut Tape<T>,
        batch: Var,
    ) -> Result<(Var, ParamVars), TensorError> {
        self.check_input(tape.value(batch).shape())?;
        let vars = ParamVars::register(tape, self);
        let logits = forward_on_tape(tape, &vars, batch, self.config.padding())?;
        Ok((logits, vars))
    }
}

/// Tape handles of the six parameter leaves, in record order.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars(pub [Var; 6]);

impl ParamVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Self {
        ParamVars(params.tensors().map(|t| tape.leaf(t.clone())))
    }

    /// Gradients of the six leaves after a backward pass.
    pub fn grads<T: Real>(&self, tape: &mut Tape<T>) -> Result<[Vec<T>; 6], TensorError> {
        let mut out: [Vec<T>; 6] = Default::default();
        for (slot, var) in out.iter_mut().zip(self.0) {
            *slot = tape
                .take_grad(var)
                .ok_or_else(|| TensorError::Usage("backward has not been run".into()))?;
        }
        Ok(out)
    }
}

/// Records conv -> relu -> pool -> conv -> relu -> pool -> flatten -> dense.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    batch: Var,
    padding: usize,
) -> Result<Var, TensorError> {
    let [w1, b1, w2, b2, wd, bd] = params.0;
    let h = tape.conv2d(batch, w1, b1, 1, padding)?;
    let h = tape.relu(h);
    let h = tape.maxpool2(h)?;
    let h = tape.conv2d(h, w2, b2, 1, padding)?;
    let h = tape.relu(h);
    let h = tape.maxpool2(h)?;
    let h = tape.flatten(h)?;
    tape.dense(h, wd, bd)
}

/// Anything that maps an image batch to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_size(&self) -> usize;
    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, TensorError>;
}

impl Classifier for ModelParams<f32> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
        self.forward(batch)
    }
}
