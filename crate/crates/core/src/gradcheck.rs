//! Central-difference verification of tape gradients.
//!
//! The analytic gradient comes from an `f32` tape. The numerical one is
//! taken from the same graph re-evaluated in `f64`, so the comparison
//! measures the backward rules rather than `f32` cancellation noise.
//!
//! The suite only compares at probe points where central differences are
//! meaningful: no single-element step may cross a relu or row-max kink,
//! and no nonzero gradient element may be so small relative to the rest
//! that rounding alone exceeds the tolerance. Other points are redrawn.

use crate::autodiff::{BnMode, Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, PartitionedAdjacency, SkeletonSequence, SkeletonTemplate, DEFAULT_ALPHA};
use crate::nn::BatchNorm;
use crate::param::ParamSet;
use crate::resnet::ResidualBlock;
use crate::rng::Rng;
use crate::stgcn::{gcn_layer_forward, joint_weights_on_tape, StGcnLayer};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_STEP: f32 = 1e-3;

/// A deterministic scalar function of one tensor, written once for any
/// element type.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var>;
}

impl<F: ScalarFn> ScalarFn for &F {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        (*self).eval(tape, input)
    }
}

fn value_at<F: ScalarFn>(f: &F, input: Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::inference();
    let x = tape.leaf(input, false);
    let y = f.eval(&mut tape, x)?;
    let v = tape.value(y);
    if !v.is_scalar() {
        return Err(Error::usage(format!("gradient check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Branch signature of every piecewise operation `f` evaluates at `input`.
fn signature_at<F: ScalarFn>(f: &F, input: Tensor<f64>) -> Result<Vec<i64>> {
    let mut tape = Tape::<f64>::inference();
    let x = tape.leaf(input, false);
    f.eval(&mut tape, x)?;
    Ok(tape.branch_signature())
}

/// True when no `±step` perturbation of a single element of `input` moves
/// a piecewise operation (relu, abs, row-max pivot) onto another branch,
/// so central differences at `input` see one smooth piece.
pub fn branch_stable<F: ScalarFn>(f: &F, input: &Tensor, step: f32) -> Result<bool> {
    let base = input.cast::<f64>();
    let reference = signature_at(f, base.clone())?;
    let h = step as f64;
    for i in 0..base.numel() {
        for delta in [h, -h] {
            let mut moved = base.clone();
            moved.data_mut()[i] += delta;
            if signature_at(f, moved)? != reference {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Analytic gradient of `f` at `input` on an `f32` tape.
pub fn analytic_gradient<F: ScalarFn>(f: &F, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new().freeze_params();
    let x = tape.leaf(input.clone(), true);
    let y = f.eval(&mut tape, x)?;
    let mut grads = tape.backward(y, &mut [])?;
    Ok(grads.take(x).unwrap_or_else(|| Tensor::zeros(input.shape())))
}

/// Central differences of `f` at `input`, evaluated in `f64`.
pub fn central_gradient<F: ScalarFn>(f: &F, input: &Tensor, step: f32) -> Result<Tensor<f64>> {
    if !(step > 0.0) {
        return Err(Error::usage(format!("finite-difference step must be positive, got {step}")));
    }
    let base = input.cast::<f64>();
    let first = value_at(f, base.clone())?;
    let second = value_at(f, base.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::usage("function is not deterministic: two evaluations differ"));
    }
    let h = step as f64;
    let mut out = Vec::with_capacity(base.numel());
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        out.push((value_at(f, plus)? - value_at(f, minus)?) / (2.0 * h));
    }
    Tensor::new(input.shape(), out)
}

/// Max over elements of `|analytic - central| / max(|analytic|, |central|, 1e-6)`.
pub fn finite_diff_check<F: ScalarFn>(f: &F, input: &Tensor, step: f32) -> Result<f32> {
    let central = central_gradient(f, input, step)?;
    let analytic = analytic_gradient(f, input)?;
    Ok(max_relative_error(&analytic, &central))
}

fn max_relative_error(analytic: &Tensor, central: &Tensor<f64>) -> f32 {
    let mut worst = 0.0f64;
    for (&a, &c) in analytic.data().iter().zip(central.data()) {
        let a = a as f64;
        let rel = (a - c).abs() / a.abs().max(c.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst as f32
}

/// One row of [`gradient_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f32,
    /// Probe points discarded because a step crossed a relu or max kink.
    pub redraws: usize,
}

/// Probe points drawn per case before giving up on a well-conditioned one.
pub const MAX_REDRAWS: usize = 64;

/// Smallest nonzero gradient element, relative to the largest, that a
/// probe point may have. Below it the element's `f32` rounding and the
/// step's truncation error exceed the relative tolerance on their own.
pub const MIN_GRADIENT_RATIO: f64 = 1e-4;

/// True when every central-difference element is either exactly zero or at
/// least [`MIN_GRADIENT_RATIO`] of the largest one.
pub fn well_conditioned(central: &Tensor<f64>) -> bool {
    let scale = central.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    central.data().iter().all(|&c| c == 0.0 || c.abs() >= MIN_GRADIENT_RATIO * scale)
}

/// Draw probe points from `make` until one is [`branch_stable`] and
/// [`well_conditioned`], then compare gradients there.
fn smooth_case<C: ScalarFn>(
    name: &'static str,
    rng: &mut Rng,
    mut make: impl FnMut(&mut Rng) -> Result<(C, Tensor)>,
) -> Result<GradCase> {
    for redraws in 0..MAX_REDRAWS {
        let (case, x) = make(rng)?;
        if !branch_stable(&case, &x, DEFAULT_STEP)? {
            continue;
        }
        let central = central_gradient(&case, &x, DEFAULT_STEP)?;
        if !well_conditioned(&central) {
            continue;
        }
        let max_rel_error = max_relative_error(&analytic_gradient(&case, &x)?, &central);
        return Ok(GradCase { name, max_rel_error, redraws });
    }
    Err(Error::Numeric(format!("{name}: no well-conditioned probe point in {MAX_REDRAWS} draws")))
}

/// `sum(y * coeffs)`: a scalar whose gradient is `coeffs`-shaped noise
/// rather than something that might vanish by symmetry.
fn probe<T: Scalar>(tape: &mut Tape<T>, y: Var, coeffs: &Tensor) -> Result<Var> {
    let c = tape.constant(coeffs.cast::<T>());
    let p = tape.mul(y, c)?;
    tape.sum_all(p)
}

struct ConvInput {
    kernel: Tensor,
    coeffs: Tensor,
}

impl ScalarFn for ConvInput {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.constant(self.kernel.cast::<T>());
        let y = tape.conv2d(x, k, Conv2dSpec::new((2, 1), (1, 1)))?;
        probe(tape, y, &self.coeffs)
    }
}

struct ConvKernel {
    input: Tensor,
    coeffs: Tensor,
}

impl ScalarFn for ConvKernel {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, k: Var) -> Result<Var> {
        let x = tape.constant(self.input.cast::<T>());
        let y = tape.conv2d(x, k, Conv2dSpec::new((2, 1), (1, 1)))?;
        probe(tape, y, &self.coeffs)
    }
}

struct MatmulLeft {
    right: Tensor,
}

impl ScalarFn for MatmulLeft {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, a: Var) -> Result<Var> {
        let b = tape.constant(self.right.cast::<T>());
        let y = tape.matmul(a, b)?;
        let sq = tape.square(y)?;
        tape.sum_all(sq)
    }
}

struct MatmulRight {
    left: Tensor,
}

impl ScalarFn for MatmulRight {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, b: Var) -> Result<Var> {
        let a = tape.constant(self.left.cast::<T>());
        let y = tape.matmul(a, b)?;
        let sq = tape.square(y)?;
        tape.sum_all(sq)
    }
}

struct BatchNormTrain {
    params: ParamSet,
    bn: BatchNorm,
    coeffs: Tensor,
}

impl ScalarFn for BatchNormTrain {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(tape, x, &self.params, BnMode::Train, &mut Vec::new())?;
        probe(tape, y, &self.coeffs)
    }
}

struct SoftmaxLoss {
    target: Tensor,
}

impl ScalarFn for SoftmaxLoss {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var> {
        let probs = tape.softmax(logits)?;
        crate::train::squared_error(tape, probs, &self.target.cast::<T>())
    }
}

struct GcnLayerCase {
    params: ParamSet,
    layer: StGcnLayer,
    adjacency: PartitionedAdjacency,
    input: Tensor,
    coeffs: Tensor,
    /// Differentiate with respect to the first edge mask instead of the input.
    wrt_mask: bool,
}

impl ScalarFn for GcnLayerCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        let x = if self.wrt_mask {
            tape.bind_param(&self.params, self.layer.masks[0], v)?;
            tape.constant(self.input.cast::<T>())
        } else {
            v
        };
        let y = gcn_layer_forward(tape, x, &self.layer, &self.adjacency, &self.params, BnMode::Train, &mut Vec::new())?;
        probe(tape, y, &self.coeffs)
    }
}

struct ResidualCase {
    params: ParamSet,
    block: ResidualBlock,
    coeffs: Tensor,
}

impl ScalarFn for ResidualCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = crate::resnet::residual_block_forward(tape, x, &self.block, &self.params, BnMode::Train, &mut Vec::new())?;
        probe(tape, y, &self.coeffs)
    }
}

/// Region-of-interest weighting driven by the skeleton layer's joint
/// weights, differentiated with respect to an edge mask.
struct SoftWeightingCase {
    gcn: GcnLayerCase,
    parts: Vec<usize>,
    grid: Tensor,
    coeffs: Tensor,
}

impl ScalarFn for SoftWeightingCase {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, mask: Var) -> Result<Var> {
        let g = &self.gcn;
        tape.bind_param(&g.params, g.layer.masks[0], mask)?;
        let x = tape.constant(g.input.cast::<T>());
        let features = gcn_layer_forward(tape, x, &g.layer, &g.adjacency, &g.params, BnMode::Train, &mut Vec::new())?;
        let jw = joint_weights_on_tape(tape, features)?;
        let parts = tape.gather_cols(jw, &self.parts)?;
        let parts = tape.normalize_rows_by_max(parts)?;
        let grid = tape.constant(self.grid.cast::<T>());
        let weighted = tape.scale_blocks(grid, parts, self.parts.len(), 1)?;
        probe(tape, weighted, &self.coeffs)
    }
}

fn gcn_case(rng: &mut Rng, wrt_mask: bool) -> Result<GcnLayerCase> {
    let template = SkeletonTemplate::stick_figure();
    let v = template.joint_count();
    let reference = SkeletonSequence::single(Tensor::normal(&[1, v, 3], 1.0, rng), 0)?;
    let adjacency = build_adjacency(&template, &reference, DEFAULT_ALPHA)?;
    let mut params = ParamSet::new();
    let layer = StGcnLayer::new("probe", 3, 4, v, 3, 1, &mut params, rng);
    for &m in &layer.masks {
        params.get_mut(m).value = Tensor::uniform(&[v, v], 0.5, 1.5, rng);
    }
    Ok(GcnLayerCase {
        params,
        layer,
        adjacency,
        input: Tensor::normal(&[2, 3, 4, v], 1.0, rng),
        coeffs: Tensor::normal(&[2, 4, 4, v], 1.0, rng),
        wrt_mask,
    })
}

/// Finite-difference checks of every differentiable building block the
/// training pipeline relies on, on small seeded inputs.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = Rng::new(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    out.push(smooth_case("conv2d/input", rng, |rng| {
        let x = Tensor::normal(&[2, 3, 6, 5], 1.0, rng);
        let kernel = Tensor::normal(&[4, 3, 3, 3], 0.5, rng);
        let coeffs = Tensor::normal(&[2, 4, 3, 5], 1.0, rng);
        Ok((ConvInput { kernel, coeffs }, x))
    })?);
    out.push(smooth_case("conv2d/kernel", rng, |rng| {
        let input = Tensor::normal(&[2, 3, 6, 5], 1.0, rng);
        let kernel = Tensor::normal(&[4, 3, 3, 3], 0.5, rng);
        let coeffs = Tensor::normal(&[2, 4, 3, 5], 1.0, rng);
        Ok((ConvKernel { input, coeffs }, kernel))
    })?);
    out.push(smooth_case("matmul/left", rng, |rng| {
        let a = Tensor::normal(&[4, 6], 1.0, rng);
        let right = Tensor::normal(&[6, 3], 1.0, rng);
        Ok((MatmulLeft { right }, a))
    })?);
    out.push(smooth_case("matmul/right", rng, |rng| {
        let left = Tensor::normal(&[4, 6], 1.0, rng);
        let b = Tensor::normal(&[6, 3], 1.0, rng);
        Ok((MatmulRight { left }, b))
    })?);
    out.push(smooth_case("batch_norm", rng, |rng| {
        let mut params = ParamSet::new();
        let bn = BatchNorm::new("probe.bn", 3, &mut params);
        params.get_mut(bn.gamma).value = Tensor::uniform(&[3], 0.5, 1.5, rng);
        params.get_mut(bn.beta).value = Tensor::normal(&[3], 0.5, rng);
        let x = Tensor::normal(&[4, 3, 2, 3], 1.0, rng);
        let coeffs = Tensor::normal(&[4, 3, 2, 3], 1.0, rng);
        Ok((BatchNormTrain { params, bn, coeffs }, x))
    })?);
    out.push(smooth_case("softmax+squared_error", rng, |rng| {
        let target = crate::train::one_hot(&[2, 0, 1], 4)?;
        let logits = Tensor::normal(&[3, 4], 1.0, rng);
        Ok((SoftmaxLoss { target }, logits))
    })?);
    out.push(smooth_case("gcn_layer/input", rng, |rng| {
        let case = gcn_case(rng, false)?;
        let x = case.input.clone();
        Ok((case, x))
    })?);
    out.push(smooth_case("gcn_layer/edge_mask", rng, |rng| {
        let case = gcn_case(rng, true)?;
        let m = case.params.get(case.layer.masks[0]).value.clone();
        Ok((case, m))
    })?);
    out.push(smooth_case("residual_block", rng, |rng| {
        let mut params = ParamSet::new();
        let block = ResidualBlock::new("probe", 3, 4, 2, &mut params, rng);
        let x = Tensor::normal(&[2, 3, 6, 6], 1.0, rng);
        let coeffs = Tensor::normal(&[2, 4, 3, 3], 1.0, rng);
        Ok((ResidualCase { params, block, coeffs }, x))
    })?);
    out.push(smooth_case("joint_weighting/soft", rng, |rng| {
        let gcn = gcn_case(rng, true)?;
        let parts = SkeletonTemplate::stick_figure().part_joints();
        let (k, patch, samples) = (parts.len(), 2, 2);
        let grid = Tensor::uniform(&[2, 3, k * patch, samples * patch], 0.0, 1.0, rng);
        let coeffs = Tensor::normal(grid.shape(), 1.0, rng);
        let m = gcn.params.get(gcn.layer.masks[0]).value.clone();
        Ok((SoftWeightingCase { gcn, parts, grid, coeffs }, m))
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl ScalarFn for SumSquares {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let sq = tape.square(x)?;
            tape.sum_all(sq)
        }
    }

    struct Sum;
    impl ScalarFn for Sum {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            tape.sum_all(x)
        }
    }

    struct Flaky(std::cell::Cell<f64>);
    impl ScalarFn for Flaky {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            self.0.set(self.0.get() + 1.0);
            let s = tape.sum_all(x)?;
            tape.scale(s, self.0.get())
        }
    }

    #[test]
    fn quadratic_and_linear() {
        let mut rng = crate::rng::Rng::new(5);
        let x = Tensor::<f32>::normal(&[4, 3], 1.0, &mut rng);
        assert!(finite_diff_check(&SumSquares, &x, DEFAULT_STEP).unwrap() < 1e-4);
        assert!(finite_diff_check(&Sum, &x, DEFAULT_STEP).unwrap() < 1e-6);
    }

    #[test]
    fn nondeterminism_detected() {
        let x = Tensor::<f32>::ones(&[2]);
        let r = finite_diff_check(&Flaky(std::cell::Cell::new(0.0)), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
