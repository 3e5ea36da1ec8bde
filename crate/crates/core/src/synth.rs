//! Synthetic two-modality activity data.
//!
//! Each class moves one body part of a 15-joint stick figure. The video
//! shows the torso and inner limbs as bones, and every extremity as a
//! square: the moving part carries a class-colored marker, two resting parts
//! carry distractors, the rest are plain. Crops around an extremity show its
//! square only, so a frame reveals color but not which part is moving. With probability
//! `distractor_level` a distractor takes the marker color of the class that
//! owns the part it sits on, which makes appearance alone ambiguous; motion
//! (and therefore joint attention) resolves it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{SkeletonSequence, SkeletonTemplate};
use crate::rng::Rng;
use crate::stroi::{FrameSequence, Image, JointTrack};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Std of per-frame coordinate jitter, in skeleton units.
    pub coord_noise: f64,
    /// Amplitude of uniform per-pixel background noise, in 8-bit levels.
    pub pixel_noise: f64,
    /// Probability that a distractor copies a class marker color.
    pub distractor_level: f64,
    pub two_subject_fraction: f64,
    /// Probability that a tracked joint is reported missing in a frame.
    pub track_dropout: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 100,
            frames: 24,
            frame_width: 96,
            frame_height: 96,
            coord_noise: 0.01,
            pixel_noise: 12.0,
            distractor_level: 0.6,
            two_subject_fraction: 0.0,
            track_dropout: 0.0,
            test_fraction: 0.2,
            seed: 42,
        }
    }
}

/// Class names in label order.
pub const CLASS_NAMES: [&str; 5] = ["wave-left-hand", "wave-right-hand", "kick-left", "nod", "kick-right"];
/// Joint each class moves (stick-figure indices).
pub const ACTIVE_JOINTS: [usize; 5] = [5, 8, 11, 2, 14];
pub const MARKER_COLORS: [[u8; 3]; 5] = [[230, 40, 40], [40, 200, 40], [50, 80, 240], [230, 210, 30], [200, 40, 200]];
const DISTRACTOR_COLORS: [[u8; 3]; 5] = [[40, 200, 200], [240, 140, 20], [235, 235, 235], [120, 70, 20], [255, 150, 180]];
const MARKER_SIDE: usize = 9;
const BONE_COLOR: [u8; 3] = [150, 150, 150];
const JOINT_COLOR: [u8; 3] = [200, 200, 200];
const PLAIN_COLOR: [u8; 3] = [110, 110, 110];
const BACKGROUND: f64 = 30.0;
const DISTRACTORS: usize = 2;

/// Rest pose, x to the image left for "l_" joints, y up, z toward camera.
/// Limbs are long enough that no other drawn element comes within a crop
/// half-width of an extremity, so region-of-interest crops show the
/// extremity's square and background only.
const REST: [[f64; 3]; 15] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.5, 0.0],
    [0.0, 0.86, 0.0],
    [-0.2, 0.5, 0.0],
    [-0.3, 0.24, 0.0],
    [-0.52, -0.16, 0.0],
    [0.2, 0.5, 0.0],
    [0.3, 0.24, 0.0],
    [0.52, -0.16, 0.0],
    [-0.14, 0.0, 0.0],
    [-0.18, -0.42, 0.0],
    [-0.22, -0.84, 0.0],
    [0.14, 0.0, 0.0],
    [0.18, -0.42, 0.0],
    [0.22, -0.84, 0.0],
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::usage(format!(
                "synthetic data supports 2..={} classes, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.samples_per_class < 2 || self.frames == 0 || self.frame_width < 16 || self.frame_height < 16 {
            return Err(Error::usage("synthetic spec needs >= 2 samples per class, >= 1 frame and frames >= 16 px"));
        }
        if !unit(self.distractor_level) || !unit(self.two_subject_fraction) || !unit(self.track_dropout) {
            return Err(Error::usage("synthetic probabilities must lie in [0, 1]"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::usage("test fraction must lie strictly between 0 and 1"));
        }
        if !(self.coord_noise >= 0.0) || !(self.pixel_noise >= 0.0) {
            return Err(Error::usage("noise levels must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Screen placement of one figure.
#[derive(Clone, Debug)]
struct Placement {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl Placement {
    fn project(&self, p: &[f32]) -> (f32, f32) {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        ((self.cx + self.scale * (x + 0.3 * z)) as f32, (self.cy - self.scale * (y - 0.1 * z)) as f32)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub index: usize,
    pub label: usize,
    pub split: Split,
    pub skeleton: SkeletonSequence,
    pub tracks: Vec<JointTrack>,
    placements: Vec<Placement>,
    /// `(joint of subject 0, color)` squares drawn in every frame.
    distractors: Vec<(usize, [u8; 3])>,
    render_seed: u64,
    pixel_noise: f64,
    frame_size: (usize, usize),
}

impl SyntheticSample {
    pub fn id(&self) -> String {
        format!("s{:05}", self.index)
    }

    /// Render the video. Deterministic: the same sample always yields the
    /// same pixels.
    pub fn frames(&self, template: &SkeletonTemplate) -> FrameSequence {
        let (w, h) = self.frame_size;
        let mut rng = Rng::new(self.render_seed);
        let frames = (0..self.skeleton.frames())
            .map(|t| {
                let data = (0..w * h * 3)
                    .map(|_| (BACKGROUND + self.pixel_noise * rng.uniform_range(-1.0, 1.0)).round().clamp(0.0, 255.0) as u8)
                    .collect();
                let mut img = Image::new(w, h, data).expect("frame extents");
                for (s, subject) in self.skeleton.subjects.iter().enumerate() {
                    let place = &self.placements[s];
                    let pos: Vec<(f32, f32)> = (0..subject.shape()[1])
                        .map(|j| place.project(&subject.data()[(t * subject.shape()[1] + j) * 3..][..3]))
                        .collect();
                    let ends = template.part_joints();
                    for &(a, b) in template.edges() {
                        if !ends.contains(&a) && !ends.contains(&b) {
                            draw_line(&mut img, pos[a], pos[b], BONE_COLOR);
                        }
                    }
                    for (j, &p) in pos.iter().enumerate() {
                        if !ends.contains(&j) {
                            draw_square(&mut img, p, 3, JOINT_COLOR);
                        }
                    }
                    for &j in &ends {
                        let color = if s != 0 {
                            PLAIN_COLOR
                        } else if j == ACTIVE_JOINTS[self.label] {
                            MARKER_COLORS[self.label]
                        } else {
                            self.distractors.iter().find(|d| d.0 == j).map_or(PLAIN_COLOR, |d| d.1)
                        };
                        draw_square(&mut img, pos[j], MARKER_SIDE, color);
                    }
                }
                img
            })
            .collect();
        FrameSequence::new(frames, self.id()).expect("uniform frames")
    }
}

fn draw_square(img: &mut Image, center: (f32, f32), side: usize, color: [u8; 3]) {
    let x0 = center.0.round() as i64 - (side / 2) as i64;
    let y0 = center.1.round() as i64 - (side / 2) as i64;
    img.fill_rect(x0, y0, side, side, color);
}

fn draw_line(img: &mut Image, a: (f32, f32), b: (f32, f32), color: [u8; 3]) {
    let len = ((b.0 - a.0).hypot(b.1 - a.1)).ceil().max(1.0) as usize * 2;
    for i in 0..=len {
        let f = i as f32 / len as f32;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        img.fill_rect(x.round() as i64, y.round() as i64, 1, 1, color);
    }
}

/// Rotate `joint` about `pivot` in the image plane; positive angles turn
/// counter-clockwise as seen by the camera.
fn swing(pose: &mut [[f64; 3]; 15], pivot: usize, joint: usize, angle: f64) {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (pose[joint][0] - pose[pivot][0], pose[joint][1] - pose[pivot][1]);
    pose[joint][0] = pose[pivot][0] + c * dx - s * dy;
    pose[joint][1] = pose[pivot][1] + s * dx + c * dy;
}

/// Joint trajectories `[T, 15, 3]` of a figure performing `class`, or
/// idling when `class` is `None`.
fn perform(class: Option<usize>, frames: usize, noise: f64, rng: &mut Rng) -> Tensor {
    let amp = rng.uniform_range(0.8, 1.2);
    let cycles = rng.uniform_range(1.0, 2.0);
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let body_scale = rng.uniform_range(0.92, 1.08);
    let offset = [rng.uniform_range(-0.05, 0.05), rng.uniform_range(-0.05, 0.05), rng.uniform_range(-0.1, 0.1)];
    let mut data = Vec::with_capacity(frames * 15 * 3);
    for t in 0..frames {
        let theta = 2.0 * PI * cycles * t as f64 / frames as f64 + phase;
        let s = theta.sin();
        let mut pose = REST.map(|p| p.map(|v| v * body_scale));
        match class {
            // Swing the forearm outward and up about the elbow.
            Some(k @ (0 | 1)) => {
                let (side, hand, elbow) = if k == 0 { (-1.0, 5, 4) } else { (1.0, 8, 7) };
                swing(&mut pose, elbow, hand, side * amp * 0.8 * 0.5 * (1.0 + s));
            }
            // Kick the shin outward and forward about the knee.
            Some(k @ (2 | 4)) => {
                let (side, foot, knee) = if k == 2 { (-1.0, 11, 10) } else { (1.0, 14, 13) };
                let lift = 0.5 * (1.0 + s);
                swing(&mut pose, knee, foot, side * amp * 0.7 * lift);
                pose[foot][2] += amp * 0.2 * lift;
            }
            // Tilt the head side to side and nod it forward.
            Some(3) => {
                swing(&mut pose, 1, 2, amp * 0.4 * s);
                pose[2][2] += amp * 0.25 * s;
            }
            _ => {
                for (j, p) in pose.iter_mut().enumerate() {
                    p[0] += 0.02 * (theta + j as f64).sin();
                }
            }
        }
        for p in pose {
            for (i, v) in p.iter().enumerate() {
                data.push((v + offset[i] + noise * rng.normal()) as f32);
            }
        }
    }
    Tensor::new(&[frames, 15, 3], data).expect("trajectory extents")
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub template: SkeletonTemplate,
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let template = SkeletonTemplate::stick_figure();
    let root = Rng::new(spec.seed);
    let (w, h) = (spec.frame_width as f64, spec.frame_height as f64);
    let total = spec.num_classes * spec.samples_per_class;

    // Stratified split: the first `test_fraction` of each class's shuffled
    // members go to the test set.
    let mut split = vec![Split::Train; total];
    let mut split_rng = root.fork(1);
    for class in 0..spec.num_classes {
        let mut members: Vec<usize> = (0..total).filter(|i| i % spec.num_classes == class).collect();
        split_rng.shuffle(&mut members);
        let n_test = ((members.len() as f64 * spec.test_fraction).round() as usize).clamp(1, members.len() - 1);
        for &i in &members[..n_test] {
            split[i] = Split::Test;
        }
    }

    let class_parts: Vec<usize> = ACTIVE_JOINTS[..spec.num_classes].to_vec();
    let mut samples = Vec::with_capacity(total);
    for (index, &split) in split.iter().enumerate() {
        let label = index % spec.num_classes;
        let mut rng = root.fork(1000 + index as u64);
        let two = rng.uniform() < spec.two_subject_fraction;
        let mut subjects = vec![perform(Some(label), spec.frames, spec.coord_noise, &mut rng)];
        let placements = if two {
            subjects.push(perform(None, spec.frames, spec.coord_noise, &mut rng));
            vec![
                Placement {
                    cx: w * 0.3 + rng.uniform_range(-2.0, 2.0),
                    cy: h * 0.52,
                    scale: h * 0.32,
                },
                Placement {
                    cx: w * 0.72 + rng.uniform_range(-2.0, 2.0),
                    cy: h * 0.52,
                    scale: h * 0.32,
                },
            ]
        } else {
            vec![Placement {
                cx: w * 0.5 + rng.uniform_range(-0.06, 0.06) * w,
                cy: h * 0.52 + rng.uniform_range(-0.03, 0.03) * h,
                scale: h * 0.42 * rng.uniform_range(0.95, 1.05),
            }]
        };

        // Distractors on resting parts.
        let mut resting: Vec<usize> = template.part_joints().into_iter().filter(|&j| j != ACTIVE_JOINTS[label]).collect();
        rng.shuffle(&mut resting);
        let distractors = resting
            .into_iter()
            .take(DISTRACTORS)
            .map(|joint| {
                let owner = class_parts.iter().position(|&p| p == joint);
                let color = if rng.uniform() < spec.distractor_level {
                    match owner {
                        Some(k) => MARKER_COLORS[k],
                        None => {
                            let others: Vec<usize> = (0..spec.num_classes).filter(|&k| k != label).collect();
                            MARKER_COLORS[others[rng.below(others.len())]]
                        }
                    }
                } else {
                    DISTRACTOR_COLORS[rng.below(DISTRACTOR_COLORS.len())]
                };
                (joint, color)
            })
            .collect();

        let tracks = subjects
            .iter()
            .zip(&placements)
            .map(|(coords, place)| {
                let m = coords.shape()[1];
                let mut pixels = Vec::with_capacity(spec.frames * m * 2);
                let mut conf = Vec::with_capacity(spec.frames * m);
                for p in coords.data().chunks(3) {
                    let (x, y) = place.project(p);
                    pixels.extend([x, y]);
                    conf.push(if rng.uniform() < spec.track_dropout { 0.0 } else { 1.0 });
                }
                JointTrack::new(Tensor::new(&[spec.frames, m, 2], pixels)?, Tensor::new(&[spec.frames, m], conf)?)
            })
            .collect::<Result<Vec<_>>>()?;

        samples.push(SyntheticSample {
            index,
            label,
            split,
            skeleton: SkeletonSequence::new(subjects, label)?,
            tracks,
            placements,
            distractors,
            render_seed: spec.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            pixel_noise: spec.pixel_noise,
            frame_size: (spec.frame_width, spec.frame_height),
        });
    }
    Ok(SyntheticDataset { spec: spec.clone(), template, samples })
}

/// Per-joint variance of the position over time, summed over channels.
pub fn joint_motion_variance(coords: &Tensor) -> Vec<f64> {
    let (t, m, c) = (coords.shape()[0], coords.shape()[1], coords.shape()[2]);
    (0..m)
        .map(|j| {
            (0..c)
                .map(|ch| {
                    let xs: Vec<f64> = (0..t).map(|ti| coords.at(&[ti, j, ch]) as f64).collect();
                    let mean = xs.iter().sum::<f64>() / t as f64;
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn active_joint_moves_most() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        for s in &data.samples {
            let var = joint_motion_variance(&s.skeleton.subjects[0]);
            let arg = (0..var.len()).max_by(|&a, &b| var[a].total_cmp(&var[b])).unwrap();
            assert_eq!(arg, ACTIVE_JOINTS[s.label], "sample {}", s.index);
        }
    }

    #[test]
    fn split_is_stratified() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        for class in 0..4 {
            let test = data.split(Split::Test).filter(|s| s.label == class).count();
            assert_eq!(test, 1);
        }
    }

    #[test]
    fn marker_drawn_at_tracked_active_joint() {
        let data = generate_synthetic_dataset(&small()).unwrap();
        let s = &data.samples[1];
        let frames = s.frames(&data.template);
        let (x, y) = s.tracks[0].position(3, ACTIVE_JOINTS[s.label]).unwrap();
        assert_eq!(frames.frames[3].pixel(x.round() as usize, y.round() as usize), MARKER_COLORS[s.label]);
    }

    #[test]
    fn extremity_crops_see_only_their_square() {
        // Chebyshev clearance in pixels between an extremity and every other
        // drawn element must exceed the half-width of a 16-pixel crop.
        let spec = SyntheticSpec {
            num_classes: 5,
            samples_per_class: 40,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic_dataset(&spec).unwrap();
        let ends = data.template.part_joints();
        let half = 8.0f32;
        let cheb = |a: (f32, f32), b: (f32, f32)| (a.0 - b.0).abs().max((a.1 - b.1).abs());
        let mut worst = f32::INFINITY;
        for s in &data.samples {
            let track = &s.tracks[0];
            for t in 0..track.frames() {
                let pos: Vec<(f32, f32)> = (0..15).map(|j| track.position(t, j).unwrap()).collect();
                for &e in &ends {
                    let mut clear = f32::INFINITY;
                    for &o in &ends {
                        if o != e {
                            clear = clear.min(cheb(pos[e], pos[o]) - (MARKER_SIDE / 2) as f32 - 1.0);
                        }
                    }
                    for j in (0..15).filter(|j| !ends.contains(j)) {
                        clear = clear.min(cheb(pos[e], pos[j]) - 2.0);
                    }
                    for &(a, b) in data.template.edges() {
                        if ends.contains(&a) || ends.contains(&b) {
                            continue;
                        }
                        for i in 0..=50 {
                            let f = i as f32 / 50.0;
                            let q = (pos[a].0 + f * (pos[b].0 - pos[a].0), pos[a].1 + f * (pos[b].1 - pos[a].1));
                            clear = clear.min(cheb(pos[e], q) - 1.0);
                        }
                    }
                    worst = worst.min(clear);
                }
            }
        }
        assert!(worst > half, "closest element {worst} px from an extremity");
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SyntheticSpec {
            num_classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_dataset(&bad).is_err());
        let bad = SyntheticSpec {
            distractor_level: 1.5,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_dataset(&bad).is_err());
    }
}
