//! Naive-loop oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use skelfuse::autodiff::{conv2d_output_extent, Conv2dSpec, Tape};
use skelfuse::graph::SkeletonTemplate;
use skelfuse::stroi::{assemble_stroi, FrameSequence, Image, JointTrack, StRoiGeometry, SubjectLayout};
use skelfuse::rng::Rng;
use skelfuse::tensor::Scalar;
use skelfuse::Tensor;

/// Random conv problem: `(input [N,C,H,W], kernel [O,C,kh,kw], spec)`.
pub fn conv_problem(rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>, Conv2dSpec) {
    loop {
        let n = 1 + rng.below(3);
        let c = 1 + rng.below(4);
        let o = 1 + rng.below(5);
        let (h, w) = (3 + rng.below(10), 3 + rng.below(10));
        let (kh, kw) = (1 + rng.below(5), 1 + rng.below(5));
        let stride = (1 + rng.below(3), 1 + rng.below(3));
        let pad = (rng.below(3), rng.below(3));
        if conv2d_output_extent(h, kh, stride.0, pad.0).is_none() || conv2d_output_extent(w, kw, stride.1, pad.1).is_none() {
            continue;
        }
        let x = Tensor::<f64>::normal(&[n, c, h, w], 1.0, rng);
        let k = Tensor::<f64>::normal(&[o, c, kh, kw], 1.0, rng);
        return (x, k, Conv2dSpec::new(stride, pad));
    }
}

/// Direct convolution; returns the output and, per element, the sum of the
/// absolute values of its terms.
pub fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, spec: Conv2dSpec) -> (Tensor<f64>, Tensor<f64>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
    let oh = conv2d_output_extent(h, kh, spec.stride.0, spec.padding.0).unwrap();
    let ow = conv2d_output_extent(w, kw, spec.stride.1, spec.padding.1).unwrap();
    let mut out = Tensor::<f64>::zeros(&[n, o, oh, ow]);
    let mut mag = Tensor::<f64>::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let (mut s, mut m) = (0.0, 0.0);
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * spec.stride.0 + dy) as i64 - spec.padding.0 as i64;
                                let ix = (xo * spec.stride.1 + dx) as i64 - spec.padding.1 as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let t = x.at(&[b, ic, iy as usize, ix as usize]) * k.at(&[oc, ic, dy, dx]);
                                s += t;
                                m += t.abs();
                            }
                        }
                    }
                    out.set(&[b, oc, y, xo], s);
                    mag.set(&[b, oc, y, xo], m);
                }
            }
        }
    }
    (out, mag)
}

pub fn conv_tape<T: Scalar>(x: &Tensor<f64>, k: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<T> {
    let mut tape = Tape::<T>::inference();
    let xv = tape.constant(x.cast::<T>());
    let kv = tape.constant(k.cast::<T>());
    let y = tape.conv2d(xv, kv, spec).unwrap();
    tape.value(y).clone()
}

pub fn matmul_problem(rng: &mut Rng) -> (Tensor<f64>, Tensor<f64>) {
    let (m, k, n) = (1 + rng.below(40), 1 + rng.below(40), 1 + rng.below(40));
    (Tensor::<f64>::normal(&[m, k], 1.0, rng), Tensor::<f64>::normal(&[k, n], 1.0, rng))
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::<f64>::zeros(&[m, n]);
    let mut mag = Tensor::<f64>::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let (mut s, mut g) = (0.0, 0.0);
            for p in 0..k {
                let t = a.at(&[i, p]) * b.at(&[p, j]);
                s += t;
                g += t.abs();
            }
            out.set(&[i, j], s);
            mag.set(&[i, j], g);
        }
    }
    (out, mag)
}

pub fn matmul_tape<T: Scalar>(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<T> {
    let mut tape = Tape::<T>::inference();
    let (av, bv) = (tape.constant(a.cast::<T>()), tape.constant(b.cast::<T>()));
    let y = tape.matmul(av, bv).unwrap();
    tape.value(y).clone()
}

/// Random tensor of rank 1-4 and a non-empty, increasing set of axes.
pub fn reduce_problem(rng: &mut Rng) -> (Tensor<f64>, Vec<usize>) {
    let rank = 1 + rng.below(4);
    let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6)).collect();
    let mut axes: Vec<usize> = (0..rank).filter(|_| rng.below(2) == 1).collect();
    if axes.is_empty() {
        axes.push(rng.below(rank));
    }
    (Tensor::<f64>::normal(&shape, 1.0, rng), axes)
}

/// Sum over `axes` by enumerating every multi-index.
pub fn reduce_oracle(x: &Tensor<f64>, axes: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
    let shape = x.shape();
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() { vec![1] } else { kept.iter().map(|&a| shape[a]).collect() };
    let mut out = Tensor::<f64>::zeros(&out_shape);
    let mut mag = Tensor::<f64>::zeros(&out_shape);
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..x.numel() {
        let mut r = flat;
        for d in (0..shape.len()).rev() {
            idx[d] = r % shape[d];
            r /= shape[d];
        }
        let dst: Vec<usize> = if kept.is_empty() { vec![0] } else { kept.iter().map(|&a| idx[a]).collect() };
        let v = x.at(&idx);
        out.set(&dst, out.at(&dst) + v);
        mag.set(&dst, mag.at(&dst) + v.abs());
    }
    (out, mag)
}

pub fn reduce_tape<T: Scalar>(x: &Tensor<f64>, axes: &[usize]) -> Tensor<T> {
    let mut tape = Tape::<T>::inference();
    let xv = tape.constant(x.cast::<T>());
    let y = tape.sum(xv, axes).unwrap();
    tape.value(y).clone()
}

/// Largest `|got - want| / max(|want|, floor)`.
pub fn rel_error<T: Scalar>(got: &Tensor<T>, want: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(got.shape(), want.shape());
    got.data()
        .iter()
        .zip(want.data())
        .map(|(&g, &w)| (g.as_f64() - w).abs() / w.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Largest error relative to the absolute sum of each element's terms,
/// the scale at which floating-point accumulation errs.
pub fn rel_error_to_magnitude<T: Scalar>(got: &Tensor<T>, want: &Tensor<f64>, magnitude: &Tensor<f64>) -> f64 {
    got.data()
        .iter()
        .zip(want.data())
        .zip(magnitude.data())
        .map(|((&g, &w), &m)| if m == 0.0 { (g.as_f64() - w).abs() } else { (g.as_f64() - w).abs() / m })
        .fold(0.0, f64::max)
}

/// Random symmetric-free 0/1 adjacency on `m` vertices with self loops.
pub fn random_adjacency(m: usize, rng: &mut Rng) -> Tensor {
    let mut a = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            if i == j || rng.below(2) == 1 {
                a.set(&[i, j], 1.0);
            }
        }
    }
    a
}

/// `A_ij / sqrt((d_i + alpha)(d_j + alpha))` element by element.
pub fn normalized_oracle(a: &Tensor, alpha: f32) -> Tensor {
    let m = a.shape()[0];
    let d: Vec<f32> = (0..m).map(|i| (0..m).map(|j| a.at(&[i, j])).sum()).collect();
    let mut out = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            out.set(&[i, j], a.at(&[i, j]) / ((d[i] + alpha) * (d[j] + alpha)).sqrt());
        }
    }
    out
}

/// Triple loop over channels, time and vertices of `[C, T, V]`.
pub fn joint_weight_oracle(y: &Tensor) -> Vec<f64> {
    let [c, t, v] = [y.shape()[0], y.shape()[1], y.shape()[2]];
    (0..v)
        .map(|vi| {
            let mut s = 0.0f64;
            for ci in 0..c {
                for ti in 0..t {
                    s += (y.at(&[ci, ti, vi]) as f64).abs();
                }
            }
            s / (c * t) as f64
        })
        .collect()
}

/// Frames whose pixel `(x, y)` of frame `t` is `[t * 100 + 1, x, y]`, so
/// every copied pixel names its source.
fn sentinel_frames(frames: usize, side: usize) -> FrameSequence {
    let images = (0..frames)
        .map(|t| {
            let mut img = Image::filled(side, side, [0, 0, 0]);
            for y in 0..side {
                for x in 0..side {
                    img.set_pixel(x, y, [(t * 100 + 1) as u8, x as u8, y as u8]);
                }
            }
            img
        })
        .collect();
    FrameSequence::new(images, "sentinel").unwrap()
}

fn track(frames: usize, at: impl Fn(usize, usize) -> Option<(f32, f32)>) -> JointTrack {
    let mut pixels = Tensor::zeros(&[frames, 15, 2]);
    let mut conf = Tensor::zeros(&[frames, 15]);
    for t in 0..frames {
        for j in 0..15 {
            if let Some((x, y)) = at(t, j) {
                pixels.set(&[t, j, 0], x);
                pixels.set(&[t, j, 1], y);
                conf.set(&[t, j], 1.0);
            }
        }
    }
    JointTrack::new(pixels, conf).unwrap()
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

/// Every pixel of every single-layout block names its source frame and
/// crop window.
pub fn check_block_placement(seed: u64) -> Result<(), String> {
    let template = SkeletonTemplate::stick_figure();
    let parts = template.part_joints();
    let mut rng = Rng::new(seed);
    let positions: Vec<Vec<(f32, f32)>> = (0..10)
        .map(|_| (0..15).map(|_| (8.0 + 40.0 * rng.uniform() as f32, 8.0 + 40.0 * rng.uniform() as f32)).collect())
        .collect();
    let frames = sentinel_frames(10, 64);
    let tr = track(10, |t, j| Some(positions[t][j]));
    let geometry = StRoiGeometry::new(5, 5, 8, SubjectLayout::Single).unwrap();
    let grid = assemble_stroi(&frames, &[tr], &template, geometry).unwrap();
    let times = [1, 3, 5, 7, 9];
    for (j, &joint) in parts.iter().enumerate() {
        for (l, &t) in times.iter().enumerate() {
            let block = grid.block(j, l, 0);
            let (cx, cy) = positions[t][joint];
            let (x0, y0) = (cx.round() as usize - 4, cy.round() as usize - 4);
            for py in 0..8 {
                for px in 0..8 {
                    let got = [0, 1, 2].map(|c| to_u8(block.at(&[c, py, px])));
                    let want = [(t * 100 + 1) as u8, (x0 + px) as u8, (y0 + py) as u8];
                    if got != want {
                        return Err(format!("block ({j}, {l}) pixel ({px}, {py}): {got:?} != {want:?}"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Hand-computed two-subject image: 5 parts, 2 samples, P = 2, with one
/// missed detection.
pub fn check_two_subject_golden() -> Result<(), String> {
    let template = SkeletonTemplate::stick_figure();
    let parts = template.part_joints();
    let frames = sentinel_frames(2, 64);
    let part_of = |j: usize| parts.iter().position(|&p| p == j);
    let first = track(2, |t, j| part_of(j).map(|k| ((10 * k + t) as f32, (20 + k) as f32)));
    let second = track(2, |t, j| match part_of(j) {
        Some(4) if t == 1 => None,
        Some(k) => Some(((50 + k) as f32, (30 + t) as f32)),
        None => Some((0.0, 0.0)),
    });
    let geometry = StRoiGeometry::new(5, 2, 2, SubjectLayout::Pair).unwrap();
    let grid = assemble_stroi(&frames, &[first, second], &template, geometry).map_err(|e| e.to_string())?;
    if grid.image.shape() != [3, 10, 4] {
        return Err(format!("shape {:?}", grid.image.shape()));
    }

    #[rustfmt::skip]
    let golden: [[[u8; 4]; 10]; 3] = [
        [
            [1, 101, 1, 101], [1, 101, 1, 101],
            [1, 101, 1, 101], [1, 101, 1, 101],
            [1, 101, 1, 101], [1, 101, 1, 101],
            [1, 101, 1, 101], [1, 101, 1, 101],
            [1, 101, 1, 0],   [1, 101, 1, 0],
        ],
        [
            [0, 1, 50, 50],   [0, 1, 50, 50],
            [10, 11, 51, 51], [10, 11, 51, 51],
            [20, 21, 52, 52], [20, 21, 52, 52],
            [30, 31, 53, 53], [30, 31, 53, 53],
            [40, 41, 54, 0],  [40, 41, 54, 0],
        ],
        [
            [19, 19, 29, 30], [20, 20, 30, 31],
            [20, 20, 29, 30], [21, 21, 30, 31],
            [21, 21, 29, 30], [22, 22, 30, 31],
            [22, 22, 29, 30], [23, 23, 30, 31],
            [23, 23, 29, 0],  [24, 24, 30, 0],
        ],
    ];
    for c in 0..3 {
        for y in 0..10 {
            let row: Vec<u8> = (0..4).map(|x| to_u8(grid.image.at(&[c, y, x]))).collect();
            if row != golden[c][y] {
                return Err(format!("channel {c} row {y}: {row:?} != {:?}", golden[c][y]));
            }
        }
    }
    Ok(())
}
