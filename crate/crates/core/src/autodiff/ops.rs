use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides_of, Scalar, Tensor};

/// Pointwise operation kinds. Binary kinds need identical shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Abs,
    Sqrt,
    Square,
    Add,
    Mul,
    Scale(f64),
}

/// For each input element, the flat index of the output element it reduces
/// into, plus the output shape and the number of elements per output slot.
fn reduction_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::usage(format!("reduction axis {a} out of range for rank {rank}")));
        }
        if reduced[a] {
            return Err(Error::usage(format!("reduction axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let kept: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| shape[a]).collect();
    let out_shape = if kept.is_empty() { vec![1] } else { kept };
    let kept_strides = strides_of(&out_shape);
    let mut axis_stride = vec![0usize; rank];
    let mut k = 0;
    for a in 0..rank {
        if !reduced[a] {
            axis_stride[a] = kept_strides[k];
            k += 1;
        }
    }
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut dst = 0usize;
    for _ in 0..total {
        map.push(dst);
        for a in (0..rank).rev() {
            index[a] += 1;
            dst += axis_stride[a];
            if index[a] < shape[a] {
                break;
            }
            dst -= axis_stride[a] * shape[a];
            index[a] = 0;
        }
    }
    Ok((out_shape, map, count))
}

impl<T: Scalar> Tape<T> {
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::usage(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Relu => self.relu(operands[0]),
            Elementwise::Abs => self.abs(operands[0]),
            Elementwise::Sqrt => self.sqrt(operands[0]),
            Elementwise::Square => self.square(operands[0]),
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Scale(s) => self.scale(operands[0], s),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record("add", out, &[a, b], |g, _, _, _| Ok(vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record("sub", out, &[a, b], |g, _, _, _| {
            Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record("mul", out, &[a, b], |g, xs, _, needs| {
            let da = if needs[0] { Some(g.zip_map(xs[1], "mul", |g, y| g * y)?) } else { None };
            let db = if needs[1] { Some(g.zip_map(xs[0], "mul", |g, x| g * x)?) } else { None };
            Ok(vec![da, db])
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, &[a], move |g, _, _, _| Ok(vec![Some(g.map(|v| v * s))]))
    }

    /// Subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.record("relu", out, &[a], |g, xs, _, _| {
            Ok(vec![Some(g.zip_map(xs[0], "relu", |g, x| if x > T::zero() { g } else { T::zero() })?)])
        })
    }

    /// Subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.record("abs", out, &[a], |g, xs, _, _| {
            Ok(vec![Some(g.zip_map(xs[0], "abs", |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    /// Gradient exists only for strictly positive inputs; a zero input
    /// reaching backward is a numeric error.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < T::zero()) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = self.value(a).map(|x| x.sqrt());
        self.record("sqrt", out, &[a], |g, _, y, _| {
            if y.data().iter().any(|&v| v == T::zero()) {
                return Err(Error::Numeric("sqrt gradient at zero".into()));
            }
            let two = T::of(2.0);
            Ok(vec![Some(g.zip_map(y, "sqrt", |g, y| g / (two * y))?)])
        })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.record("square", out, &[a], |g, xs, _, _| {
            let two = T::of(2.0);
            Ok(vec![Some(g.zip_map(xs[0], "square", |g, x| two * g * x)?)])
        })
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let out = self.value(a).map(|x| x.ln());
        self.record("ln", out, &[a], |g, xs, _, _| {
            Ok(vec![Some(g.zip_map(xs[0], "ln", |g, x| g / x)?)])
        })
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let x = self.value(a);
        let (out_shape, map, count) = reduction_plan(x.shape(), axes)?;
        let mut acc = vec![0.0f64; numel(&out_shape)];
        for (&v, &dst) in x.data().iter().zip(&map) {
            acc[dst] += v.as_f64();
        }
        let div = if mean { count as f64 } else { 1.0 };
        let out = Tensor::new(&out_shape, acc.iter().map(|&s| T::of(s / div)).collect())?;
        let in_shape = x.shape().to_vec();
        let op = if mean { "mean" } else { "sum" };
        self.record(op, out, &[a], move |g, _, _, _| {
            let inv = T::of(1.0 / div);
            let data = map.iter().map(|&dst| g.data()[dst] * inv).collect();
            Ok(vec![Some(Tensor::new(&in_shape, data)?)])
        })
    }

    /// Sum over `axes`; reduced axes are removed (all removed gives shape `[1]`).
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(a, &axes, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.value(a).shape().to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", out, &[a], move |g, _, _, _| {
            Ok(vec![Some(g.clone().reshape(&in_shape)?)])
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.record("permute", out, &[a], move |g, _, _, _| Ok(vec![Some(g.permute(&inverse)?)]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape("transpose", self.value(a).shape(), &[0, 0]));
        }
        self.permute(a, &[1, 0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let out = Tensor::new(&[m, n], out)?;
        self.record("matmul", out, &[a, b], move |g, xs, _, needs| {
            let da = if needs[0] {
                let mut da = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    (n as isize, 1),
                    xs[1].data(),
                    (1, n as isize),
                    T::zero(),
                    &mut da,
                    (k as isize, 1),
                );
                Some(Tensor::new(&[m, k], da)?)
            } else {
                None
            };
            let db = if needs[1] {
                let mut db = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    xs[0].data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    T::zero(),
                    &mut db,
                    (n as isize, 1),
                );
                Some(Tensor::new(&[k, n], db)?)
            } else {
                None
            };
            Ok(vec![da, db])
        })
    }

    /// Row-wise softmax of an `[N, C]` tensor, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("softmax", x.shape(), &[0, 0]));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let c = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.record("softmax", out, &[a], move |g, _, y, _| {
            let mut dx = Vec::with_capacity(y.numel());
            for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                dx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
            }
            Ok(vec![Some(Tensor::new(y.shape(), dx)?)])
        })
    }

    /// Row-wise log-softmax of an `[N, C]` tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("log_softmax", x.shape(), &[0, 0]));
        }
        let c = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let out = Tensor::new(x.shape(), out)?;
        self.record("log_softmax", out, &[a], move |g, _, y, _| {
            let mut dx = Vec::with_capacity(y.numel());
            for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                let total: T = gr.iter().copied().sum();
                dx.extend(gr.iter().zip(yr).map(|(&g, &ly)| g - ly.exp() * total));
            }
            Ok(vec![Some(Tensor::new(y.shape(), dx)?)])
        })
    }

    /// Repeat a `[C]` vector into `times` rows: `[times, C]`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 1 || times == 0 {
            return Err(Error::shape("tile_rows", x.shape(), &[times]));
        }
        let c = x.numel();
        let data = x.data().repeat(times);
        let out = Tensor::new(&[times, c], data)?;
        self.record("tile_rows", out, &[a], move |g, _, _, _| {
            let mut acc = vec![T::zero(); c];
            for row in g.data().chunks(c) {
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s = *s + v;
                }
            }
            Ok(vec![Some(Tensor::new(&[c], acc)?)])
        })
    }

    /// New leading-axis rows as weighted sums of input rows:
    /// `out[r] = sum_(i, w) in plan[r] of w * x[i]`.
    pub fn combine_rows(&mut self, a: Var, plan: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let x = self.value(a);
        let rows = x.shape()[0];
        if plan.is_empty() || plan.iter().flatten().any(|&(i, _)| i >= rows) {
            return Err(Error::usage("combine_rows plan references a missing row"));
        }
        let inner = x.numel() / rows;
        let mut shape = x.shape().to_vec();
        shape[0] = plan.len();
        let mut out = vec![T::zero(); plan.len() * inner];
        for (r, terms) in plan.iter().enumerate() {
            let dst = &mut out[r * inner..(r + 1) * inner];
            for &(i, w) in terms {
                let w = T::of(w);
                for (d, &s) in dst.iter_mut().zip(&x.data()[i * inner..(i + 1) * inner]) {
                    *d = *d + w * s;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        self.record("combine_rows", out, &[a], move |g, _, _, _| {
            let mut dx = vec![T::zero(); numel(&in_shape)];
            for (r, terms) in plan.iter().enumerate() {
                let src = &g.data()[r * inner..(r + 1) * inner];
                for &(i, w) in terms {
                    let w = T::of(w);
                    for (d, &s) in dx[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *d = *d + w * s;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&in_shape, dx)?)])
        })
    }

    /// Select columns of an `[N, M]` tensor: `out[n, k] = x[n, index[k]]`.
    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || index.iter().any(|&i| i >= x.shape()[1]) || index.is_empty() {
            return Err(Error::usage(format!(
                "gather_cols index {index:?} invalid for shape {:?}",
                x.shape()
            )));
        }
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let k = index.len();
        let mut out = Vec::with_capacity(n * k);
        for row in x.data().chunks(m) {
            out.extend(index.iter().map(|&i| row[i]));
        }
        let index = index.to_vec();
        let out = Tensor::new(&[n, k], out)?;
        self.record("gather_cols", out, &[a], move |g, _, _, _| {
            let mut dx = vec![T::zero(); n * m];
            for (r, grow) in g.data().chunks(k).enumerate() {
                for (&i, &v) in index.iter().zip(grow) {
                    dx[r * m + i] = dx[r * m + i] + v;
                }
            }
            Ok(vec![Some(Tensor::new(&[n, m], dx)?)])
        })
    }

    /// Divide each row of `[N, K]` by its maximum; rows whose maximum is not
    /// positive become all ones (and pass no gradient).
    pub fn normalize_rows_by_max(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("normalize_rows_by_max", x.shape(), &[0, 0]));
        }
        let k = x.shape()[1];
        let mut out = Vec::with_capacity(x.numel());
        // (argmax, max) per row, or None for the all-ones fallback.
        let mut pivots = Vec::new();
        for row in x.data().chunks(k) {
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
            if max > T::zero() {
                out.extend(row.iter().map(|&v| v / max));
                pivots.push(Some((arg, max)));
            } else {
                out.extend(std::iter::repeat(T::one()).take(k));
                pivots.push(None);
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.record("normalize_rows_by_max", out, &[a], move |g, xs, _, _| {
            let mut dx = vec![T::zero(); g.numel()];
            for (r, pivot) in pivots.iter().enumerate() {
                let Some((arg, max)) = *pivot else { continue };
                let grow = &g.data()[r * k..(r + 1) * k];
                let xrow = &xs[0].data()[r * k..(r + 1) * k];
                let drow = &mut dx[r * k..(r + 1) * k];
                let mut cross = T::zero();
                for j in 0..k {
                    drow[j] = grow[j] / max;
                    cross = cross + grow[j] * xrow[j];
                }
                drow[arg] = drow[arg] - cross / (max * max);
            }
            Ok(vec![Some(Tensor::new(g.shape(), dx)?)])
        })
    }

    /// Multiply each `(row-block, column-group)` rectangle of an
    /// `[N, C, H, W]` image by its own weight.
    ///
    /// `weights` is `[N, groups * blocks]`, group-major: the weight of row
    /// block `k` in column group `g` is `weights[n, g * blocks + k]`.
    pub fn scale_blocks(&mut self, x: Var, weights: Var, blocks: usize, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        if xv.rank() != 4 {
            return Err(Error::shape("scale_blocks", xv.shape(), &[0, 0, 0, 0]));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        if blocks == 0 || groups == 0 || h % blocks != 0 || w % groups != 0 {
            return Err(Error::usage(format!(
                "image {h}x{w} does not split into {blocks} row blocks and {groups} column groups"
            )));
        }
        if wv.shape() != [n, groups * blocks] {
            return Err(Error::shape("scale_blocks", wv.shape(), &[n, groups * blocks]));
        }
        if wv.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::usage("negative part weight"));
        }
        let (bh, gw) = (h / blocks, w / groups);
        let weight_at = move |wd: &[T], ni: usize, y: usize, xcol: usize| {
            wd[ni * groups * blocks + (xcol / gw) * blocks + y / bh]
        };
        let mut out = xv.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    let base = ((ni * c + ci) * h + y) * w;
                    for xcol in 0..w {
                        out[base + xcol] = out[base + xcol] * weight_at(wv.data(), ni, y, xcol);
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.record("scale_blocks", out, &[x, weights], move |g, xs, _, needs| {
            let (xd, wd) = (xs[0].data(), xs[1].data());
            let mut dx = if needs[0] { Some(vec![T::zero(); g.numel()]) } else { None };
            let mut dw = vec![T::zero(); n * groups * blocks];
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        let base = ((ni * c + ci) * h + y) * w;
                        for xcol in 0..w {
                            let gi = g.data()[base + xcol];
                            if let Some(dx) = dx.as_mut() {
                                dx[base + xcol] = gi * weight_at(wd, ni, y, xcol);
                            }
                            let slot = ni * groups * blocks + (xcol / gw) * blocks + y / bh;
                            dw[slot] = dw[slot] + gi * xd[base + xcol];
                        }
                    }
                }
            }
            Ok(vec![
                dx.map(|d| Tensor::new(xs[0].shape(), d)).transpose()?,
                Some(Tensor::new(xs[1].shape(), dw)?),
            ])
        })
    }

    /// Fixed per-channel affine map on `[N, C, ...]`: `y = x * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 || xv.shape()[1] != scale.len() || scale.len() != shift.len() {
            return Err(Error::shape("channel_affine", xv.shape(), &[scale.len()]));
        }
        let c = xv.shape()[1];
        let inner: usize = xv.shape()[2..].iter().product();
        let scale: Vec<T> = scale.iter().map(|&s| T::of(s)).collect();
        let shift: Vec<T> = shift.iter().map(|&s| T::of(s)).collect();
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let ci = i % c;
            chunk.iter_mut().for_each(|v| *v = *v * scale[ci] + shift[ci]);
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.record("channel_affine", out, &[x], move |g, _, _, _| {
            let mut dx = g.data().to_vec();
            for (i, chunk) in dx.chunks_mut(inner).enumerate() {
                let s = scale[i % c];
                chunk.iter_mut().for_each(|v| *v = *v * s);
            }
            Ok(vec![Some(Tensor::new(g.shape(), dx)?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.elementwise(Elementwise::Relu, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.5, -2.0, 3.0, 0.25]), false);
        let ones = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.elementwise(Elementwise::Mul, &[x, ones]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sqrt_of_square_is_abs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[-3.0]), false);
        let sq = tape.square(x).unwrap();
        let r = tape.sqrt(sq).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0]);
    }

    #[test]
    fn sqrt_of_negative_is_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[-1.0]), false);
        assert!(matches!(tape.sqrt(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn binary_shape_mismatch_is_sized_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::ones(&[3]), false);
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::full(&[3], 2.0), false);
        let m = tape.mean_all(c).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        let ones = tape.leaf(Tensor::ones(&[3, 4]), false);
        let s = tape.sum(ones, &[0]).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0; 4]);
        assert!(matches!(tape.sum(ones, &[2]), Err(Error::Usage(_))));
        assert!(matches!(tape.sum(ones, &[0, 0]), Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        let eye = tape.leaf(Tensor::eye(2), false);
        let d = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(d), tape.value(a));
        assert!(matches!(tape.matmul(b, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[3, 2], vec![0.0, 0.0, 1000.0, 1000.0, 2f32.ln(), 0.0]).unwrap(), false);
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 2.0 / 3.0).abs() < 1e-6);
        assert!((v[5] - 1.0 / 3.0).abs() < 1e-6);
        let bad = tape.leaf(Tensor::new(&[1, 2], vec![f32::NAN, 0.0]).unwrap(), false);
        assert!(matches!(tape.softmax(bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn normalize_rows_by_max_with_fallback() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[2.0, 4.0, 2.0, 0.0, 0.0, 0.0]), false);
        let y = tape.normalize_rows_by_max(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 1.0, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn scale_blocks_rejects_negative_weight() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), false);
        let w = tape.leaf(t(&[1, 2], &[1.0, -0.5]), false);
        assert!(matches!(tape.scale_blocks(x, w, 2, 1), Err(Error::Usage(_))));
    }
}
