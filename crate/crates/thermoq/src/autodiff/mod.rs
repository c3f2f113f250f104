//! Minimal reverse-mode automatic differentiation over dense 4-D tensors.
//!
//! Operations are recorded on an arena [`Tape`]; [`Tape::backward`] walks the
//! records in reverse and accumulates gradients for every node, returning
//! them keyed by [`Var`]. Values are generic over [`Scalar`] so training runs
//! in f32 while the gradient-check suite runs the identical code in f64.

mod gradcheck;
mod ops;

pub use gradcheck::{
    check_all, check_composite_net, finite_diff, max_rel_err, GradCheckReport, PASS_THRESHOLD,
};

use ndarray::{Array2, Array4, ArrayView4, LinalgScalar, ScalarOperand};
use num_traits::Float;
use thiserror::Error;

/// Element type for tensors: f32 for training, f64 for verification.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with shape (batch, channels, height, width).
pub type Tensor4<S> = Array4<S>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("backward root must be a scalar (1,1,1,1) node, got shape {0:?}")]
    NonScalarRoot([usize; 4]),
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Whether the diagonal flip is the main-diagonal transpose or the
/// anti-diagonal flip (transpose composed with a 180° rotation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipKind {
    #[default]
    Transpose,
    AntiTranspose,
}

enum Op<S: Scalar> {
    Leaf,
    Conv2d { input: usize, kernel: usize },
    AddBias { input: usize, bias: usize },
    Relu { input: usize },
    MaxPool2x2 { input: usize, argmax: Vec<u8> },
    UpsampleNearest2 { input: usize },
    ConvTranspose2x2 { input: usize, kernel: usize },
    ConcatChannels { a: usize, b: usize },
    DiagFlip { input: usize, kind: FlipKind },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { input: usize },
    Abs { input: usize },
    Square { input: usize },
    Scale { input: usize, factor: S },
    AddScalar { input: usize },
    DiffX { input: usize },
    DiffY { input: usize },
    Crop { input: usize, top: usize, left: usize },
    MaskedSum { input: usize, mask: Array2<bool> },
    SumAll { input: usize },
    BatchNorm { input: usize, gamma: usize, beta: usize, xhat: Tensor4<S>, inv_std: Vec<S> },
}

struct Node<S: Scalar> {
    value: Tensor4<S>,
    op: Op<S>,
}

/// Gradients of the backward root with respect to every tape node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor4<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient w.r.t. `v`; zero tensor if the node did not influence the root.
    pub fn wrt(&self, v: Var, tape: &Tape<S>) -> Tensor4<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor4::zeros(tape.value(v).raw_dim()),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor4<S>> {
        self.grads[v.0].as_ref()
    }
}

/// Arena of recorded operations. Build a computation by calling the op
/// methods, then differentiate once with [`Tape::backward`].
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<S> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a (1,1,1,1) node.
    pub fn scalar(&self, v: Var) -> S {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1, 1, 1), "node is not scalar-shaped");
        t[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Tensor4<S>, op: Op<S>) -> Var {
        // Non-finite values are allowed to propagate; training detects them
        // at the loss terms and reports a structured divergence error.
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or constant.
    pub fn leaf(&mut self, value: Tensor4<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same-padded stride-1 convolution. `kernel` shape (C_out, C_in, k, k)
    /// with odd k; output spatial size equals input.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Var {
        let out = ops::conv2d_forward(self.value(input), self.value(kernel));
        self.push(out, Op::Conv2d { input: input.0, kernel: kernel.0 })
    }

    /// Per-channel bias add; `bias` shape (1, C, 1, 1).
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Var {
        let x = self.value(input);
        let b = self.value(bias);
        let (_, c, _, _) = x.dim();
        assert_eq!(b.dim(), (1, c, 1, 1), "bias must be (1,C,1,1)");
        let mut out = x.clone();
        for ci in 0..c {
            let bv = b[[0, ci, 0, 0]];
            out.index_axis_mut(ndarray::Axis(1), ci).mapv_inplace(|v| v + bv);
        }
        self.push(out, Op::AddBias { input: input.0, bias: bias.0 })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).mapv(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu { input: input.0 })
    }

    /// 2×2 max pool, stride 2; requires even spatial dims. Ties resolve to
    /// the first maximum in row-major window order.
    pub fn maxpool2x2(&mut self, input: Var) -> Var {
        let (out, argmax) = ops::maxpool_forward(self.value(input));
        self.push(out, Op::MaxPool2x2 { input: input.0, argmax })
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Var {
        let out = ops::upsample_forward(self.value(input));
        self.push(out, Op::UpsampleNearest2 { input: input.0 })
    }

    /// Transposed convolution with 2×2 kernel, stride 2 (doubles H and W).
    /// `kernel` shape (C_in, C_out, 2, 2).
    pub fn conv_transpose2x2(&mut self, input: Var, kernel: Var) -> Var {
        let out = ops::conv_transpose_forward(self.value(input), self.value(kernel));
        self.push(out, Op::ConvTranspose2x2 { input: input.0, kernel: kernel.0 })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let (ba, ca, h, w) = ta.dim();
        let (bb, cb, hb, wb) = tb.dim();
        assert_eq!((ba, h, w), (bb, hb, wb), "concat operands must agree outside channels");
        let mut out = Tensor4::zeros((ba, ca + cb, h, w));
        out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(ta);
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(tb);
        self.push(out, Op::ConcatChannels { a: a.0, b: b.0 })
    }

    /// Flip each spatial map about a diagonal; requires H = W.
    pub fn diag_flip(&mut self, input: Var, kind: FlipKind) -> Var {
        let out = ops::diag_flip_forward(self.value(input), kind);
        self.push(out, Op::DiagFlip { input: input.0, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x + y);
        self.push(out, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x - y);
        self.push(out, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary_elementwise(a, b, |x, y| x * y);
        self.push(out, Op::Mul { a: a.0, b: b.0 })
    }

    fn binary_elementwise(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor4<S> {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.raw_dim(), tb.raw_dim(), "elementwise operands must match shape");
        let mut out = ta.clone();
        out.zip_mut_with(tb, |x, &y| *x = f(*x, y));
        out
    }

    pub fn neg(&mut self, input: Var) -> Var {
        let out = self.value(input).mapv(|v| -v);
        self.push(out, Op::Neg { input: input.0 })
    }

    /// |x|; gradient is sign(x), taken as 0 at x = 0.
    pub fn abs(&mut self, input: Var) -> Var {
        let out = self.value(input).mapv(|v| v.abs());
        self.push(out, Op::Abs { input: input.0 })
    }

    pub fn square(&mut self, input: Var) -> Var {
        let out = self.value(input).mapv(|v| v * v);
        self.push(out, Op::Square { input: input.0 })
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let out = self.value(input).mapv(|v| v * factor);
        self.push(out, Op::Scale { input: input.0, factor })
    }

    pub fn add_scalar(&mut self, input: Var, value: S) -> Var {
        let out = self.value(input).mapv(|v| v + value);
        self.push(out, Op::AddScalar { input: input.0 })
    }

    /// Forward difference along width: out[.., x] = in[.., x+1] − in[.., x].
    pub fn diff_x(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (b, c, h, w) = x.dim();
        assert!(w >= 2, "diff_x needs width >= 2");
        let mut out = Tensor4::zeros((b, c, h, w - 1));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xi in 0..w - 1 {
                        out[[bi, ci, y, xi]] = x[[bi, ci, y, xi + 1]] - x[[bi, ci, y, xi]];
                    }
                }
            }
        }
        self.push(out, Op::DiffX { input: input.0 })
    }

    /// Forward difference along height: out[.., y, .] = in[.., y+1, .] − in[.., y, .].
    pub fn diff_y(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (b, c, h, w) = x.dim();
        assert!(h >= 2, "diff_y needs height >= 2");
        let mut out = Tensor4::zeros((b, c, h - 1, w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h - 1 {
                    for xi in 0..w {
                        out[[bi, ci, y, xi]] = x[[bi, ci, y + 1, xi]] - x[[bi, ci, y, xi]];
                    }
                }
            }
        }
        self.push(out, Op::DiffY { input: input.0 })
    }

    /// Spatial crop to `h × w` starting at (top, left).
    pub fn crop(&mut self, input: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let x = self.value(input);
        let (_, _, ih, iw) = x.dim();
        assert!(top + h <= ih && left + w <= iw, "crop window exceeds input");
        let out = x.slice(ndarray::s![.., .., top..top + h, left..left + w]).to_owned();
        self.push(out, Op::Crop { input: input.0, top, left })
    }

    /// Sum of all elements at pixels where `mask` is true, over every batch
    /// and channel; yields a (1,1,1,1) scalar node.
    pub fn masked_sum(&mut self, input: Var, mask: &Array2<bool>) -> Var {
        let x = self.value(input);
        let (b, c, h, w) = x.dim();
        assert_eq!(mask.dim(), (h, w), "mask must match spatial dims");
        let mut acc = S::zero();
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xi in 0..w {
                        if mask[[y, xi]] {
                            acc = acc + x[[bi, ci, y, xi]];
                        }
                    }
                }
            }
        }
        let out = Tensor4::from_elem((1, 1, 1, 1), acc);
        self.push(out, Op::MaskedSum { input: input.0, mask: mask.clone() })
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(input).iter() {
            acc = acc + v;
        }
        let out = Tensor4::from_elem((1, 1, 1, 1), acc);
        self.push(out, Op::SumAll { input: input.0 })
    }

    /// Batch normalization over (B, H, W) per channel with affine parameters
    /// `gamma`, `beta` of shape (1, C, 1, 1). Uses biased batch statistics.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (out, xhat, inv_std) =
            ops::batch_norm_forward(self.value(input), self.value(gamma), self.value(beta), eps);
        self.push(
            out,
            Op::BatchNorm { input: input.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
        )
    }

    /// Reverse-mode differentiation from the scalar node `root`. Each tape
    /// supports exactly one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<S>, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        self.consumed = true;
        if self.value(root).dim() != (1, 1, 1, 1) {
            let s = self.value(root).shape();
            return Err(AutodiffError::NonScalarRoot([s[0], s[1], s[2], s[3]]));
        }

        let mut grads: Vec<Option<Tensor4<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor4::from_elem((1, 1, 1, 1), S::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor4<S>, grads: &mut [Option<Tensor4<S>>]) {
        let value_of = |idx: usize| -> ArrayView4<'_, S> { self.nodes[idx].value.view() };
        let mut add_to = |idx: usize, delta: Tensor4<S>| {
            match &mut grads[idx] {
                Some(existing) => {
                    existing.zip_mut_with(&delta, |a, &b| *a = *a + b);
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel } => {
                let (din, dker) =
                    ops::conv2d_backward(value_of(*input), value_of(*kernel), g.view());
                add_to(*input, din);
                add_to(*kernel, dker);
            }
            Op::AddBias { input, bias } => {
                add_to(*input, g.clone());
                let (_, c, _, _) = g.dim();
                let mut db = Tensor4::zeros((1, c, 1, 1));
                for ci in 0..c {
                    let mut acc = S::zero();
                    for &v in g.index_axis(ndarray::Axis(1), ci).iter() {
                        acc = acc + v;
                    }
                    db[[0, ci, 0, 0]] = acc;
                }
                add_to(*bias, db);
            }
            Op::Relu { input } => {
                let x = value_of(*input);
                let mut din = g.clone();
                din.zip_mut_with(&x, |gv, &xv| {
                    if xv <= S::zero() {
                        *gv = S::zero();
                    }
                });
                add_to(*input, din);
            }
            Op::MaxPool2x2 { input, argmax } => {
                let din = ops::maxpool_backward(value_of(*input).dim(), argmax, g.view());
                add_to(*input, din);
            }
            Op::UpsampleNearest2 { input } => {
                add_to(*input, ops::upsample_backward(g.view()));
            }
            Op::ConvTranspose2x2 { input, kernel } => {
                let (din, dker) =
                    ops::conv_transpose_backward(value_of(*input), value_of(*kernel), g.view());
                add_to(*input, din);
                add_to(*kernel, dker);
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.nodes[*a].value.raw_dim()[1];
                add_to(*a, g.slice(ndarray::s![.., ..ca, .., ..]).to_owned());
                add_to(*b, g.slice(ndarray::s![.., ca.., .., ..]).to_owned());
            }
            Op::DiagFlip { input, kind } => {
                add_to(*input, ops::diag_flip_forward(&g.to_owned(), *kind));
            }
            Op::Add { a, b } => {
                add_to(*a, g.clone());
                add_to(*b, g.clone());
            }
            Op::Sub { a, b } => {
                add_to(*a, g.clone());
                add_to(*b, g.mapv(|v| -v));
            }
            Op::Mul { a, b } => {
                let mut da = g.clone();
                da.zip_mut_with(&value_of(*b), |gv, &bv| *gv = *gv * bv);
                let mut db = g.clone();
                db.zip_mut_with(&value_of(*a), |gv, &av| *gv = *gv * av);
                add_to(*a, da);
                add_to(*b, db);
            }
            Op::Neg { input } => add_to(*input, g.mapv(|v| -v)),
            Op::Abs { input } => {
                let mut din = g.clone();
                din.zip_mut_with(&value_of(*input), |gv, &xv| {
                    *gv = if xv > S::zero() {
                        *gv
                    } else if xv < S::zero() {
                        -*gv
                    } else {
                        S::zero()
                    };
                });
                add_to(*input, din);
            }
            Op::Square { input } => {
                let two = S::from_f64(2.0);
                let mut din = g.clone();
                din.zip_mut_with(&value_of(*input), |gv, &xv| *gv = *gv * two * xv);
                add_to(*input, din);
            }
            Op::Scale { input, factor } => add_to(*input, g.mapv(|v| v * *factor)),
            Op::AddScalar { input } => add_to(*input, g.clone()),
            Op::DiffX { input } => {
                let (b, c, h, wm1) = g.dim();
                let mut din = Tensor4::zeros((b, c, h, wm1 + 1));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xi in 0..wm1 {
                                let gv = g[[bi, ci, y, xi]];
                                din[[bi, ci, y, xi + 1]] = din[[bi, ci, y, xi + 1]] + gv;
                                din[[bi, ci, y, xi]] = din[[bi, ci, y, xi]] - gv;
                            }
                        }
                    }
                }
                add_to(*input, din);
            }
            Op::DiffY { input } => {
                let (b, c, hm1, w) = g.dim();
                let mut din = Tensor4::zeros((b, c, hm1 + 1, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..hm1 {
                            for xi in 0..w {
                                let gv = g[[bi, ci, y, xi]];
                                din[[bi, ci, y + 1, xi]] = din[[bi, ci, y + 1, xi]] + gv;
                                din[[bi, ci, y, xi]] = din[[bi, ci, y, xi]] - gv;
                            }
                        }
                    }
                }
                add_to(*input, din);
            }
            Op::Crop { input, top, left } => {
                let full = value_of(*input).raw_dim();
                let (_, _, gh, gw) = g.dim();
                let mut din = Tensor4::zeros(full);
                din.slice_mut(ndarray::s![.., .., *top..top + gh, *left..left + gw]).assign(g);
                add_to(*input, din);
            }
            Op::MaskedSum { input, mask } => {
                let gv = g[[0, 0, 0, 0]];
                let (b, c, h, w) = value_of(*input).dim();
                let mut din = Tensor4::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xi in 0..w {
                                if mask[[y, xi]] {
                                    din[[bi, ci, y, xi]] = gv;
                                }
                            }
                        }
                    }
                }
                add_to(*input, din);
            }
            Op::SumAll { input } => {
                let gv = g[[0, 0, 0, 0]];
                add_to(*input, Tensor4::from_elem(value_of(*input).raw_dim(), gv));
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                let (din, dgamma, dbeta) =
                    ops::batch_norm_backward(value_of(*gamma), xhat, inv_std, g.view());
                add_to(*input, din);
                add_to(*gamma, dgamma);
                add_to(*beta, dbeta);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t4(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor4<f64> {
        Tensor4::from_shape_vec(shape, data).unwrap()
    }

    #[test]
    fn relu_and_square_forward() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![-2.0, -0.5, 0.0, 3.0], (1, 1, 2, 2)));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).as_slice().unwrap(), &[0.0, 0.0, 0.0, 3.0]);
        let s = tape.square(x);
        assert_eq!(tape.value(s).as_slice().unwrap(), &[4.0, 0.25, 0.0, 9.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first_in_row_major_scan() {
        let mut tape: Tape<f64> = Tape::new();
        // All four equal: argmax must be position (0,0) of the window.
        let x = tape.leaf(t4(vec![5.0, 5.0, 5.0, 5.0], (1, 1, 2, 2)));
        let p = tape.maxpool2x2(x);
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 2.0, 4.0, 3.0], (1, 1, 2, 2)));
        let p = tape.maxpool2x2(x);
        assert_eq!(tape.value(p)[[0, 0, 0, 0]], 4.0);
        let s = tape.sum_all(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn diag_flip_is_involution() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4((0..9).map(|v| v as f64).collect(), (1, 1, 3, 3)));
        for kind in [FlipKind::Transpose, FlipKind::AntiTranspose] {
            let f1 = tape.diag_flip(x, kind);
            let f2 = tape.diag_flip(f1, kind);
            assert_eq!(tape.value(f2), tape.value(x));
        }
    }

    #[test]
    fn transpose_flip_swaps_axes() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let f = tape.diag_flip(x, FlipKind::Transpose);
        let expect = array![[1.0, 3.0], [2.0, 4.0]];
        assert_eq!(tape.value(f).index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0), expect);
    }

    #[test]
    fn concat_then_split_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let b = tape.leaf(t4(vec![5.0, 6.0, 7.0, 8.0], (1, 1, 2, 2)));
        let cat = tape.concat_channels(a, b);
        assert_eq!(tape.value(cat).dim(), (1, 2, 2, 2));
        let sq = tape.square(cat);
        let s = tape.sum_all(sq);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[10.0, 12.0, 14.0, 16.0]);
    }

    #[test]
    fn masked_sum_selects_pixels() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let mask = array![[true, false], [false, true]];
        let s = tape.masked_sum(x, &mask);
        assert_eq!(tape.scalar(s), 5.0);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_doubles_and_backward_sums() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let u = tape.upsample_nearest2x(x);
        assert_eq!(tape.value(u).dim(), (1, 1, 4, 4));
        assert_eq!(tape.value(u)[[0, 0, 0, 1]], 1.0);
        assert_eq!(tape.value(u)[[0, 0, 3, 3]], 4.0);
        let s = tape.sum_all(u);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn tape_consumed_twice_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0], (1, 1, 1, 1)));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(AutodiffError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 2.0], (1, 1, 1, 2)));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn relu_negative_preactivation_blocks_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![-1.0, 2.0], (1, 1, 1, 2)));
        let r = tape.relu(x);
        let s = tape.sum_all(r);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn diff_ops_forward_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 4.0, 9.0, 16.0, 25.0, 36.0], (1, 1, 2, 3)));
        let dx = tape.diff_x(x);
        assert_eq!(tape.value(dx).as_slice().unwrap(), &[3.0, 5.0, 9.0, 11.0]);
        let dy = tape.diff_y(x);
        assert_eq!(tape.value(dy).as_slice().unwrap(), &[15.0, 21.0, 27.0]);
    }

    #[test]
    fn forward_is_pure() {
        let x = t4((0..16).map(|v| (v as f64) * 0.3 - 2.0).collect(), (1, 1, 4, 4));
        let k = t4((0..9).map(|v| (v as f64) * 0.1 - 0.4).collect(), (1, 1, 3, 3));
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let c = tape.conv2d(xv, kv);
            tape.value(c).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conv2d_hand_value() {
        // 3x3 input, 3x3 kernel of ones, same padding: center output is the
        // sum of all inputs; corner output sums the 2x2 in-bounds block.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4((1..=9).map(|v| v as f64).collect(), (1, 1, 3, 3)));
        let k = tape.leaf(Tensor4::from_elem((1, 1, 3, 3), 1.0));
        let c = tape.conv2d(x, k);
        assert_eq!(tape.value(c)[[0, 0, 1, 1]], 45.0);
        assert_eq!(tape.value(c)[[0, 0, 0, 0]], 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn conv_transpose_hand_value() {
        // 1x1 input through a 2x2 kernel paints the kernel scaled by input.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor4::from_elem((1, 1, 1, 1), 3.0));
        let k = tape.leaf(t4(vec![1.0, 2.0, 3.0, 4.0], (1, 1, 2, 2)));
        let c = tape.conv_transpose2x2(x, k);
        assert_eq!(tape.value(c).as_slice().unwrap(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, -2.0, 0.5, 3.0], (1, 1, 2, 2)));
        let k = tape.leaf(t4(vec![0.3], (1, 1, 1, 1)));
        let c = tape.conv2d(x, k);
        let z = tape.scale(c, 0.0);
        let s = tape.sum_all(z);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(k).unwrap().iter().all(|&g| g == 0.0));
        assert!(grads.get(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t4(vec![1.0, 3.0, 5.0, 7.0], (1, 1, 2, 2)));
        let gamma = tape.leaf(Tensor4::from_elem((1, 1, 1, 1), 1.0));
        let beta = tape.leaf(Tensor4::from_elem((1, 1, 1, 1), 0.0));
        let y = tape.batch_norm(x, gamma, beta, 1e-12);
        let v = tape.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|&a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}
