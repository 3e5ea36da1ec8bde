use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Separable bilinear interpolation weights with half-pixel centers:
/// output pixel `o` samples input coordinate `(o + 0.5) * in / out - 0.5`,
/// clamped to the valid range.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if [in_h, in_w, out_h, out_w].contains(&0) {
            return Err(Error::usage("resize extents must be positive"));
        }
        Ok(ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: axis_taps(in_h, out_h),
            cols: axis_taps(in_w, out_w),
        })
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Resize one `[H, W]` plane.
    pub fn apply<T: Scalar>(&self, plane: &[T], out: &mut [T]) {
        for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - fy), T::of(fy));
            for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                let (wx0, wx1) = (T::of(1.0 - fx), T::of(fx));
                let at = |y: usize, x: usize| plane[y * self.in_w + x];
                out[oy * self.out_w + ox] = wy0 * (wx0 * at(y0, x0) + wx1 * at(y0, x1))
                    + wy1 * (wx0 * at(y1, x0) + wx1 * at(y1, x1));
            }
        }
    }

    /// Adjoint of [`ResizePlan::apply`], accumulating into `dplane`.
    pub fn apply_adjoint<T: Scalar>(&self, grad: &[T], dplane: &mut [T]) {
        for (oy, &(y0, y1, fy)) in self.rows.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - fy), T::of(fy));
            for (ox, &(x0, x1, fx)) in self.cols.iter().enumerate() {
                let (wx0, wx1) = (T::of(1.0 - fx), T::of(fx));
                let g = grad[oy * self.out_w + ox];
                let w = self.in_w;
                dplane[y0 * w + x0] = dplane[y0 * w + x0] + g * wy0 * wx0;
                dplane[y0 * w + x1] = dplane[y0 * w + x1] + g * wy0 * wx1;
                dplane[y1 * w + x0] = dplane[y1 * w + x0] + g * wy1 * wx0;
                dplane[y1 * w + x1] = dplane[y1 * w + x1] + g * wy1 * wx1;
            }
        }
    }

    /// Resize every plane of a `[.., H, W]` tensor.
    pub fn resize<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rank = x.rank();
        if rank < 2 || x.shape()[rank - 2] != self.in_h || x.shape()[rank - 1] != self.in_w {
            return Err(Error::shape("resize", x.shape(), &[self.in_h, self.in_w]));
        }
        let planes = x.numel() / (self.in_h * self.in_w);
        let mut out = vec![T::zero(); planes * self.out_h * self.out_w];
        for (src, dst) in x
            .data()
            .chunks(self.in_h * self.in_w)
            .zip(out.chunks_mut(self.out_h * self.out_w))
        {
            self.apply(src, dst);
        }
        let mut shape = x.shape().to_vec();
        shape[rank - 2] = self.out_h;
        shape[rank - 1] = self.out_w;
        debug_assert_eq!(planes * self.out_h * self.out_w, out.len());
        Tensor::new(&shape, out)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn resize_bilinear(&mut self, x: Var, plan: &ResizePlan) -> Result<Var> {
        let out = plan.resize(self.value(x))?;
        let plan = plan.clone();
        self.record("resize_bilinear", out, &[x], move |g, xs, _, _| {
            let plane_in = plan.in_h * plan.in_w;
            let plane_out = plan.out_h * plan.out_w;
            let mut dx = vec![T::zero(); xs[0].numel()];
            for (gp, dp) in g.data().chunks(plane_out).zip(dx.chunks_mut(plane_in)) {
                plan.apply_adjoint(gp, dp);
            }
            Ok(vec![Some(Tensor::new(xs[0].shape(), dx)?)])
        })
    }
}
