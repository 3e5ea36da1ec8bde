use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stride and zero padding of a 2-D cross-correlation, as (vertical, horizontal).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2dSpec { stride, padding }
    }
}

/// `floor((extent + 2 * pad - kernel) / stride) + 1`, or `None` when the
/// padded input is smaller than the kernel.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one `[C, H, W]` sample into `[C*kh*kw, OH*OW]`.
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let cols = self.col_cols();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add columns back into a sample.
    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let cols = self.col_cols();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] = line[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `[N, C_in, H, W]` with a `[C_out, C_in, kh, kw]`
    /// kernel, zero padded.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (oh, ow) = match (
            conv2d_output_extent(h, kh, spec.stride.0, spec.padding.0),
            conv2d_output_extent(w, kw, spec.stride.1, spec.padding.1),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::shape("conv2d", x.shape(), k.shape())),
        };
        let geo = Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let (rows, cols) = (geo.col_rows(), geo.col_cols());
        let sample = c_in * h * w;
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); n * c_out * cols];
        for ni in 0..n {
            geo.im2col(&x.data()[ni * sample..(ni + 1) * sample], &mut col);
            T::gemm(
                c_out,
                rows,
                cols,
                T::one(),
                k.data(),
                (rows as isize, 1),
                &col,
                (cols as isize, 1),
                T::zero(),
                &mut out[ni * c_out * cols..(ni + 1) * c_out * cols],
                (cols as isize, 1),
            );
        }
        let out = Tensor::new(&[n, c_out, oh, ow], out)?;
        self.record("conv2d", out, &[input, kernel], move |g, xs, _, needs| {
            let (x, k) = (xs[0], xs[1]);
            let mut col = vec![T::zero(); rows * cols];
            let mut dcol = vec![T::zero(); rows * cols];
            let mut dx = if needs[0] { Some(vec![T::zero(); x.numel()]) } else { None };
            let mut dk = vec![T::zero(); k.numel()];
            for ni in 0..n {
                let gy = &g.data()[ni * c_out * cols..(ni + 1) * c_out * cols];
                if needs[1] {
                    geo.im2col(&x.data()[ni * sample..(ni + 1) * sample], &mut col);
                    // dk += gy @ col^T
                    T::gemm(
                        c_out,
                        cols,
                        rows,
                        T::one(),
                        gy,
                        (cols as isize, 1),
                        &col,
                        (1, cols as isize),
                        T::one(),
                        &mut dk,
                        (rows as isize, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol = k^T @ gy
                    T::gemm(
                        rows,
                        c_out,
                        cols,
                        T::one(),
                        k.data(),
                        (1, rows as isize),
                        gy,
                        (cols as isize, 1),
                        T::zero(),
                        &mut dcol,
                        (cols as isize, 1),
                    );
                    geo.col2im(&dcol, &mut dx[ni * sample..(ni + 1) * sample]);
                }
            }
            Ok(vec![
                dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                if needs[1] { Some(Tensor::new(k.shape(), dk)?) } else { None },
            ])
        })
    }
}
