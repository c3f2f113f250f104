//! Two-stage encoder-decoder model `M(T_MP, τ; θ)` with a diagonal flip
//! between the stages, plus parameter initialization and the Adam optimizer.
//!
//! The architecture is described by a flat program of steps derived from
//! [`ModelConfig`]; initialization, parameter layout (checkpoint order), and
//! the forward pass all walk the same program, so they cannot drift apart.

use serde::{Deserialize, Serialize};

use crate::autodiff::{FlipKind, Scalar, Tape, Tensor4, Var};
use crate::stochastic::{SeededRng, Stream};

/// Architecture hyperparameters. `levels` counts encoder scales per stage
/// (so `levels − 1` poolings); widths double per level from `base_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Channels handed from stage 1 to stage 2 across the flip.
    pub inter_channels: usize,
    /// Batch normalization after every hidden conv (off keeps training
    /// deterministic w.r.t. batch composition).
    pub batch_norm: bool,
    pub flip: FlipKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 2,
            base_channels: 16,
            inter_channels: 1,
            batch_norm: false,
            flip: FlipKind::Transpose,
        }
    }
}

/// One step of the architecture program. Conv/ConvT steps consume parameter
/// tensors in order; the rest are parameter-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    /// 3×3 same conv to `out_c` channels; `relu` selects hidden vs head.
    Conv { out_c: usize, relu: bool },
    /// 2×2 stride-2 transposed conv to `out_c` channels.
    ConvT { out_c: usize },
    Pool,
    PushSkip,
    PopConcat,
    Flip,
}

fn stage_program(cfg: &ModelConfig, out_c: usize, program: &mut Vec<Step>) {
    let base = cfg.base_channels;
    for l in 0..cfg.levels {
        program.push(Step::Conv { out_c: base << l, relu: true });
        if l + 1 < cfg.levels {
            program.push(Step::PushSkip);
            program.push(Step::Pool);
        }
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        program.push(Step::ConvT { out_c: base << l });
        program.push(Step::PopConcat);
        program.push(Step::Conv { out_c: base << l, relu: true });
    }
    program.push(Step::Conv { out_c, relu: false });
}

fn model_program(cfg: &ModelConfig) -> Vec<Step> {
    let mut program = Vec::new();
    stage_program(cfg, cfg.inter_channels, &mut program);
    program.push(Step::Flip);
    stage_program(cfg, 1, &mut program);
    program
}

/// Shapes of the parameter tensors a step consumes, given its input channels.
fn step_param_shapes(
    step: &Step,
    in_c: usize,
    batch_norm: bool,
) -> Vec<(usize, usize, usize, usize)> {
    match *step {
        Step::Conv { out_c, relu } => {
            let mut shapes = vec![(out_c, in_c, 3, 3), (1, out_c, 1, 1)];
            if batch_norm && relu {
                shapes.push((1, out_c, 1, 1)); // gamma
                shapes.push((1, out_c, 1, 1)); // beta
            }
            shapes
        }
        Step::ConvT { out_c } => vec![(in_c, out_c, 2, 2), (1, out_c, 1, 1)],
        _ => Vec::new(),
    }
}

/// Ordered parameter shapes for the whole model; defines checkpoint layout.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(usize, usize, usize, usize)> {
    let mut shapes = Vec::new();
    let mut in_c = 2usize;
    let mut skip_channels: Vec<usize> = Vec::new();
    for step in model_program(cfg) {
        shapes.extend(step_param_shapes(&step, in_c, cfg.batch_norm));
        in_c = match step {
            Step::Conv { out_c, .. } | Step::ConvT { out_c } => out_c,
            Step::PushSkip => {
                skip_channels.push(in_c);
                in_c
            }
            Step::PopConcat => in_c + skip_channels.pop().expect("skip stack nonempty"),
            Step::Pool | Step::Flip => in_c,
        };
    }
    shapes
}

/// Model parameters θ: the ordered tensors plus the architecture they
/// belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor4<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Kaiming-uniform fan-in initialization: kernels uniform in
    /// ±√(6 / fan_in) with fan_in = dim1·kh·kw, biases and batch-norm betas
    /// zero, batch-norm gammas one. Seeded and reproducible.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed, Stream::Init);
        let shapes = param_shapes(&config);
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut idx = 0usize;
        let mut in_c = 2usize;
        let mut skip_channels: Vec<usize> = Vec::new();
        for step in model_program(&config) {
            let step_shapes = step_param_shapes(&step, in_c, config.batch_norm);
            for (slot, shape) in step_shapes.iter().enumerate() {
                debug_assert_eq!(*shape, shapes[idx]);
                idx += 1;
                let tensor = match slot {
                    0 => {
                        let fan_in = (shape.1 * shape.2 * shape.3) as f64;
                        let bound = (6.0 / fan_in).sqrt();
                        let mut t = Tensor4::zeros(*shape);
                        for v in t.iter_mut() {
                            *v = S::from_f64((rng.next_f64_open() * 2.0 - 1.0) * bound);
                        }
                        t
                    }
                    2 => Tensor4::from_elem(*shape, S::one()), // gamma
                    _ => Tensor4::zeros(*shape),               // bias, beta
                };
                tensors.push(tensor);
            }
            in_c = match step {
                Step::Conv { out_c, .. } | Step::ConvT { out_c } => out_c,
                Step::PushSkip => {
                    skip_channels.push(in_c);
                    in_c
                }
                Step::PopConcat => in_c + skip_channels.pop().expect("skip stack nonempty"),
                Step::Pool | Step::Flip => in_c,
            };
        }
        ModelParams { config, tensors }
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Convert element precision (f32 ↔ f64) keeping values.
    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| T::from_f64(v.to_f64())))
                .collect(),
        }
    }

    /// Register every parameter on `tape` and return the handle used to run
    /// forward passes and read gradients.
    pub fn bind(&self, tape: &mut Tape<S>) -> BoundModel {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundModel { config: self.config, vars }
    }
}

/// Model parameters registered on one tape.
pub struct BoundModel {
    config: ModelConfig,
    pub vars: Vec<Var>,
}

impl BoundModel {
    /// Run the two-stage forward pass. `input` must be (B, 2, H, W) with
    /// H = W divisible by 2^(levels−1).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, input: Var) -> Var {
        let (_, c, h, w) = tape.value(input).dim();
        assert_eq!(c, 2, "model input must have 2 channels (MP image, quantile image)");
        assert_eq!(h, w, "diagonal flip requires square inputs");
        let divisor = 1usize << (self.config.levels - 1);
        assert!(
            h % divisor == 0,
            "spatial size {h} not divisible by 2^(levels-1) = {divisor}"
        );

        let mut next_var = 0usize;
        let mut take = |n: usize| {
            let vars = &self.vars[next_var..next_var + n];
            next_var += n;
            vars.to_vec()
        };

        let mut x = input;
        let mut skips: Vec<Var> = Vec::new();
        for step in model_program(&self.config) {
            match step {
                Step::Conv { relu, .. } => {
                    let bn = self.config.batch_norm && relu;
                    let vars = take(if bn { 4 } else { 2 });
                    x = tape.conv2d(x, vars[0]);
                    x = tape.add_bias(x, vars[1]);
                    if bn {
                        x = tape.batch_norm(x, vars[2], vars[3], 1e-5);
                    }
                    if relu {
                        x = tape.relu(x);
                    }
                }
                Step::ConvT { .. } => {
                    let vars = take(2);
                    x = tape.conv_transpose2x2(x, vars[0]);
                    x = tape.add_bias(x, vars[1]);
                }
                Step::Pool => x = tape.maxpool2x2(x),
                Step::PushSkip => skips.push(x),
                Step::PopConcat => {
                    let skip = skips.pop().expect("skip stack nonempty");
                    x = tape.concat_channels(x, skip);
                }
                Step::Flip => x = tape.diag_flip(x, self.config.flip),
            }
        }
        debug_assert_eq!(next_var, self.vars.len(), "all parameters consumed");
        x
    }
}

/// Adam optimizer state: first/second moment per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Tensor4<S>>,
    v: Vec<Tensor4<S>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        AdamState {
            m: params.tensors.iter().map(|t| Tensor4::zeros(t.raw_dim())).collect(),
            v: params.tensors.iter().map(|t| Tensor4::zeros(t.raw_dim())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter tensor in place.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Tensor4<S>],
    state: &mut AdamState<S>,
    lr: f64,
) {
    assert_eq!(grads.len(), params.tensors.len(), "gradient/parameter count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let one = S::one();
    let bc1 = S::from_f64(1.0 - state.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - state.beta2.powi(t));
    let eps = S::from_f64(state.eps);
    let lr = S::from_f64(lr);
    for ((theta, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(theta.raw_dim(), g.raw_dim(), "gradient shape mismatch");
        ndarray::Zip::from(theta)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|th, &gv, mv, vv| {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *th = *th - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}
