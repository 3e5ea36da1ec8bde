//! Spatial-temporal region-of-interest images: body-part crops (rows) across
//! sampled frames (columns), optionally re-weighted per part.

use crate::autodiff::ResizePlan;
use crate::error::{Error, Result};
use crate::graph::SkeletonTemplate;
use crate::rng::Rng;
use crate::stgcn::JointWeights;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major `H x W x 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::data(format!(
                "image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let data = color.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Fill the clipped rectangle with top-left `(x0, y0)`.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: usize, h: usize, color: [u8; 3]) {
        let xs = x0.max(0)..(x0 + w as i64).min(self.width as i64);
        let ys = y0.max(0)..(y0 + h as i64).min(self.height as i64);
        for y in ys {
            for x in xs.clone() {
                self.set_pixel(x as usize, y as usize, color);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Image>,
    pub source: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>, source: impl Into<String>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::data("frame sequence is empty"))?;
        let (w, h) = (first.width, first.height);
        if let Some(bad) = frames.iter().position(|f| f.width != w || f.height != h) {
            return Err(Error::data(format!(
                "frame {bad} is {}x{}, expected {w}x{h}",
                frames[bad].width, frames[bad].height
            )));
        }
        Ok(FrameSequence {
            frames,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// 2-D joint positions in pixels with per-detection confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTrack {
    /// `[T, M, 2]`, (x, y).
    pub pixels: Tensor,
    /// `[T, M]` in `[0, 1]`; 0 marks a missed detection.
    pub confidence: Tensor,
}

impl JointTrack {
    pub fn new(pixels: Tensor, confidence: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 2 || confidence.shape() != [s[0], s[1]] {
            return Err(Error::shape("JointTrack::new", s, confidence.shape()));
        }
        if !pixels.all_finite() || confidence.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::data("joint track has non-finite positions or confidence outside [0, 1]"));
        }
        Ok(JointTrack { pixels, confidence })
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn position(&self, t: usize, joint: usize) -> Option<(f32, f32)> {
        (self.confidence.at(&[t, joint]) > 0.0).then(|| (self.pixels.at(&[t, joint, 0]), self.pixels.at(&[t, joint, 1])))
    }
}

/// Centers of `samples` equal bins over `frames`, clamped to the last frame.
pub fn temporal_sample_indices(frames: usize, samples: usize) -> Vec<usize> {
    let (t, l) = (frames as f64, samples as f64);
    (1..=samples)
        .map(|i| {
            let center = (i as f64 * t) / l - t / (2.0 * l);
            (center.floor().max(0.0) as usize).min(frames.saturating_sub(1))
        })
        .collect()
}

/// One uniformly drawn frame inside each of `samples` equal bins over
/// `frames`: the random frame selection used to augment small datasets.
pub fn random_temporal_indices(frames: usize, samples: usize, rng: &mut Rng) -> Vec<usize> {
    (0..samples)
        .map(|i| {
            let lo = i * frames / samples;
            let hi = ((i + 1) * frames / samples).max(lo + 1);
            (lo + rng.below(hi - lo)).min(frames.saturating_sub(1))
        })
        .collect()
}

/// `[3, height, width]` crop in `[0, 1]` whose top-left corner is
/// `(round(x) - width/2, round(y) - height/2)`; pixels outside the frame are 0.
pub fn crop_patch(frame: &Image, center: (f32, f32), width: usize, height: usize) -> Tensor {
    let x0 = center.0.round() as i64 - (width / 2) as i64;
    let y0 = center.1.round() as i64 - (height / 2) as i64;
    let mut out = Tensor::zeros(&[3, height, width]);
    let plane = width * height;
    let data = out.data_mut();
    for py in 0..height {
        let fy = y0 + py as i64;
        if fy < 0 || fy >= frame.height as i64 {
            continue;
        }
        for px in 0..width {
            let fx = x0 + px as i64;
            if fx < 0 || fx >= frame.width as i64 {
                continue;
            }
            let rgb = frame.pixel(fx as usize, fy as usize);
            for (c, &v) in rgb.iter().enumerate() {
                data[c * plane + py * width + px] = v as f32 / 255.0;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubjectLayout {
    /// One `P x P` block per (part, sample).
    Single,
    /// Two side-by-side half-width grids of `P x P/2` blocks, one per subject.
    Pair,
}

impl SubjectLayout {
    pub fn groups(self) -> usize {
        match self {
            SubjectLayout::Single => 1,
            SubjectLayout::Pair => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StRoiGeometry {
    pub parts: usize,
    pub samples: usize,
    pub patch: usize,
    pub layout: SubjectLayout,
}

impl StRoiGeometry {
    pub fn new(parts: usize, samples: usize, patch: usize, layout: SubjectLayout) -> Result<Self> {
        if parts == 0 || samples == 0 || patch == 0 {
            return Err(Error::usage("parts, samples and patch size must be positive"));
        }
        if layout == SubjectLayout::Pair && patch % 2 != 0 {
            return Err(Error::usage(format!("two-subject layout needs an even patch size, got {patch}")));
        }
        Ok(StRoiGeometry {
            parts,
            samples,
            patch,
            layout,
        })
    }

    /// `(height, width)` of the assembled image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.parts * self.patch, self.samples * self.patch)
    }

    pub fn block_width(&self) -> usize {
        self.patch / self.layout.groups()
    }

    /// `(row0, col0, height, width)` of block `(part, sample)` for `subject`.
    pub fn block_rect(&self, part: usize, sample: usize, subject: usize) -> (usize, usize, usize, usize) {
        let bw = self.block_width();
        let col0 = subject * self.samples * bw + sample * bw;
        (part * self.patch, col0, self.patch, bw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StRoiGrid {
    /// `[3, parts * P, samples * P]` in `[0, 1]`.
    pub image: Tensor,
    pub geometry: StRoiGeometry,
    pub subject_count: usize,
}

impl StRoiGrid {
    /// Write `patch` (`[3, h, w]` matching the block) into block `(part, sample)`.
    pub fn put_block(&mut self, part: usize, sample: usize, subject: usize, patch: &Tensor) {
        let (r0, c0, h, w) = self.geometry.block_rect(part, sample, subject);
        let (ih, iw) = self.geometry.image_size();
        assert_eq!(patch.shape(), [3, h, w], "patch does not match block size");
        let data = self.image.data_mut();
        for c in 0..3 {
            for y in 0..h {
                let dst = c * ih * iw + (r0 + y) * iw + c0;
                let src = c * h * w + y * w;
                data[dst..dst + w].copy_from_slice(&patch.data()[src..src + w]);
            }
        }
    }

    pub fn block(&self, part: usize, sample: usize, subject: usize) -> Tensor {
        let (r0, c0, h, w) = self.geometry.block_rect(part, sample, subject);
        let (ih, iw) = self.geometry.image_size();
        let mut out = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                let src = c * ih * iw + (r0 + y) * iw + c0;
                out.extend_from_slice(&self.image.data()[src..src + w]);
            }
        }
        Tensor::new(&[3, h, w], out).expect("block extents")
    }
}

/// Cut the part crops of each subject out of `frames` at the sampled time
/// points. In the two-subject layout a sample with one track leaves the
/// second half zero.
pub fn assemble_stroi(
    frames: &FrameSequence,
    tracks: &[JointTrack],
    template: &SkeletonTemplate,
    geometry: StRoiGeometry,
) -> Result<StRoiGrid> {
    let times = temporal_sample_indices(frames.len(), geometry.samples);
    assemble_stroi_at(frames, tracks, template, geometry, &times)
}

/// [`assemble_stroi`] at explicit frame indices, one per grid column.
pub fn assemble_stroi_at(
    frames: &FrameSequence,
    tracks: &[JointTrack],
    template: &SkeletonTemplate,
    geometry: StRoiGeometry,
    times: &[usize],
) -> Result<StRoiGrid> {
    if times.len() != geometry.samples || times.iter().any(|&t| t >= frames.len()) {
        return Err(Error::usage(format!(
            "need {} frame indices below {}, got {times:?}",
            geometry.samples,
            frames.len()
        )));
    }
    let parts = template.part_joints();
    if parts.len() != geometry.parts {
        return Err(Error::usage(format!(
            "template defines {} parts, geometry expects {}",
            parts.len(),
            geometry.parts
        )));
    }
    if tracks.is_empty() || tracks.len() > geometry.layout.groups() {
        return Err(Error::usage(format!(
            "{} subject tracks do not fit the {:?} layout",
            tracks.len(),
            geometry.layout
        )));
    }
    for track in tracks {
        if track.frames() != frames.len() {
            return Err(Error::data(format!(
                "joint track has {} frames, video has {}",
                track.frames(),
                frames.len()
            )));
        }
        if let Some(&bad) = parts.iter().find(|&&j| j >= track.joints()) {
            return Err(Error::data(format!(
                "part joint {bad} out of range for a {}-joint track",
                track.joints()
            )));
        }
    }
    let (h, w) = geometry.image_size();
    let mut grid = StRoiGrid {
        image: Tensor::zeros(&[3, h, w]),
        geometry,
        subject_count: tracks.len(),
    };
    for (s, track) in tracks.iter().enumerate() {
        for (l, &t) in times.iter().enumerate() {
            for (j, &joint) in parts.iter().enumerate() {
                if let Some(center) = track.position(t, joint) {
                    let patch = crop_patch(&frames.frames[t], center, geometry.block_width(), geometry.patch);
                    grid.put_block(j, l, s, &patch);
                }
            }
        }
    }
    Ok(grid)
}

/// Per-part weights `w[part joint]`, rescaled so the largest is 1. All-zero
/// input yields all ones.
pub fn map_vertex_weights_to_parts(weights: &JointWeights, template: &SkeletonTemplate) -> Result<Vec<f32>> {
    let w = weights.values();
    let picked = template
        .part_joints()
        .into_iter()
        .map(|j| {
            w.get(j)
                .copied()
                .ok_or_else(|| Error::data(format!("no weight for part joint {j} (have {})", w.len())))
        })
        .collect::<Result<Vec<f32>>>()?;
    let max = picked.iter().copied().fold(0.0f32, f32::max);
    Ok(if max > 0.0 {
        picked.iter().map(|&v| v / max).collect()
    } else {
        vec![1.0; picked.len()]
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedStRoi {
    pub image: Tensor,
    pub weights_used: Vec<f32>,
}

/// Multiply every pixel of row block `j` by its part weight. In the
/// two-subject layout `part_weights` holds one weight per part for each
/// subject, first subject first.
pub fn apply_joint_weights(grid: &StRoiGrid, part_weights: &[f32]) -> Result<WeightedStRoi> {
    let g = grid.geometry;
    let groups = g.layout.groups();
    if part_weights.len() != g.parts * groups {
        return Err(Error::shape("apply_joint_weights", &[part_weights.len()], &[g.parts * groups]));
    }
    if part_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::usage(format!("part weights must be finite and non-negative: {part_weights:?}")));
    }
    let (h, w) = g.image_size();
    let group_width = w / groups;
    let mut image = grid.image.clone();
    for (i, row) in image.data_mut().chunks_mut(w).enumerate() {
        let part = (i % h) / g.patch;
        for (col, v) in row.iter_mut().enumerate() {
            *v *= part_weights[(col / group_width) * g.parts + part];
        }
    }
    Ok(WeightedStRoi {
        image,
        weights_used: part_weights.to_vec(),
    })
}

/// Per-channel normalization constants measured on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Mean and (population) standard deviation per channel over every pixel
    /// of every `[3, H, W]` image.
    pub fn measure<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            if img.rank() != 3 || img.shape()[0] != 3 {
                return Err(Error::shape("ChannelStats::measure", img.shape(), &[3, 0, 0]));
            }
            let plane = img.numel() / 3;
            for (c, chunk) in img.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::data("no images to measure channel statistics on"));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(Self::STD_FLOOR);
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn scale(&self) -> [f64; 3] {
        self.std.map(|s| 1.0 / s)
    }

    pub fn shift(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| -self.mean[c] / self.std[c])
    }
}

/// Bilinear resize of a `[3, H, W]` image to `side x side`.
pub fn resize_square(image: &Tensor, side: usize) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("resize_square", image.shape(), &[3, side, side]));
    }
    ResizePlan::new(image.shape()[1], image.shape()[2], side, side)?.resize(image)
}

/// Resize to `side x side`, then normalize each channel with `stats`.
pub fn preprocess_for_net(image: &Tensor, side: usize, stats: &ChannelStats) -> Result<Tensor> {
    let mut out = resize_square(image, side)?;
    let (scale, shift) = (stats.scale(), stats.shift());
    let plane = side * side;
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v as f64 * scale[c] + shift[c]) as f32;
        }
    }
    Ok(out)
}
