//! Skeleton topology, the three-subset neighbor partition, and the
//! degree-normalized adjacency used by the graph convolution.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of partition subsets: root, centripetal, centrifugal.
pub const PARTITION_SUBSETS: usize = 3;

/// Offset added to every degree before normalization so empty rows stay finite.
pub const DEFAULT_ALPHA: f32 = 0.001;

/// Joints, bones, and the joint each region-of-interest body part is cut around.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTemplate {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    names: Vec<String>,
    parts: Vec<(String, usize)>,
}

impl SkeletonTemplate {
    pub fn new(
        joint_count: usize,
        edges: Vec<(usize, usize)>,
        names: Vec<String>,
        parts: Vec<(String, usize)>,
    ) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::data("template needs at least one joint"));
        }
        if names.len() != joint_count {
            return Err(Error::data(format!(
                "template has {joint_count} joints but {} names",
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= joint_count || b >= joint_count {
                return Err(Error::data(format!("edge {a}-{b} references a joint >= {joint_count}")));
            }
            if a == b {
                return Err(Error::data(format!("self-loop on joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::data(format!("duplicate edge {a}-{b}")));
            }
        }
        for (name, j) in &parts {
            if *j >= joint_count {
                return Err(Error::data(format!(
                    "part '{name}' maps to joint {j}, template has {joint_count}"
                )));
            }
        }
        let t = SkeletonTemplate {
            joint_count,
            edges,
            names,
            parts,
        };
        if !t.is_connected() {
            return Err(Error::data("template graph is disconnected"));
        }
        Ok(t)
    }

    /// The 15-joint stick figure the synthetic generator draws.
    pub fn stick_figure() -> Self {
        let names = [
            "pelvis", "neck", "head", "l_shoulder", "l_elbow", "l_hand", "r_shoulder", "r_elbow",
            "r_hand", "l_hip", "l_knee", "l_foot", "r_hip", "r_knee", "r_foot",
        ];
        let edges = vec![
            (0, 1),
            (1, 2),
            (1, 3),
            (3, 4),
            (4, 5),
            (1, 6),
            (6, 7),
            (7, 8),
            (0, 9),
            (9, 10),
            (10, 11),
            (0, 12),
            (12, 13),
            (13, 14),
        ];
        let parts = vec![
            ("head".to_string(), 2),
            ("left_hand".to_string(), 5),
            ("right_hand".to_string(), 8),
            ("left_foot".to_string(), 11),
            ("right_foot".to_string(), 14),
        ];
        SkeletonTemplate::new(15, edges, names.iter().map(|s| s.to_string()).collect(), parts)
            .expect("built-in template is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `(part name, joint index)` in region-of-interest row order.
    pub fn parts(&self) -> &[(String, usize)] {
        &self.parts
    }

    pub fn part_joints(&self) -> Vec<usize> {
        self.parts.iter().map(|(_, j)| *j).collect()
    }

    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == joint {
                    Some(b)
                } else if b == joint {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.joint_count];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(j) = stack.pop() {
            for n in self.neighbors(j) {
                if !std::mem::replace(&mut seen[n], true) {
                    stack.push(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Parse the edge-list format: a joint count, then `i j` edge lines,
    /// then `part <name> <joint>` lines. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (first_no, first) = lines.next().ok_or_else(|| perr(1, "empty template file".into()))?;
        let joint_count: usize = first
            .parse()
            .map_err(|_| perr(first_no, format!("expected joint count, found '{first}'")))?;
        let mut edges = Vec::new();
        let mut parts = Vec::new();
        for (no, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["part", name, joint] => {
                    let j = joint
                        .parse()
                        .map_err(|_| perr(no, format!("bad joint index '{joint}'")))?;
                    parts.push((name.to_string(), j));
                }
                [a, b] if parts.is_empty() => {
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| perr(no, format!("bad joint index '{s}'")));
                    edges.push((parse(a)?, parse(b)?));
                }
                _ => return Err(perr(no, format!("unrecognized line '{line}'"))),
            }
        }
        let names = (0..joint_count).map(|i| format!("joint{i}")).collect();
        SkeletonTemplate::new(joint_count, edges, names, parts).map_err(|e| match e {
            Error::Data(msg) => perr(first_no, msg),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.joint_count);
        for (a, b) in &self.edges {
            s.push_str(&format!("{a} {b}\n"));
        }
        for (name, j) in &self.parts {
            s.push_str(&format!("part {name} {j}\n"));
        }
        s
    }
}

/// Joint coordinates of one sample: one `[T, M, C]` tensor per subject.
///
/// A frame whose coordinates are all zero is missing (padding or an absent
/// subject).
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub subjects: Vec<Tensor>,
    pub label: usize,
}

impl SkeletonSequence {
    pub fn new(subjects: Vec<Tensor>, label: usize) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::data("skeleton sequence without subjects"))?;
        if subjects.len() > 2 {
            return Err(Error::data(format!("at most two subjects supported, got {}", subjects.len())));
        }
        if first.rank() != 3 {
            return Err(Error::data(format!("skeleton coords must be [T, M, C], got {:?}", first.shape())));
        }
        for s in &subjects {
            if s.shape() != first.shape() {
                return Err(Error::shape("SkeletonSequence", first.shape(), s.shape()));
            }
            if !s.all_finite() {
                return Err(Error::data("non-finite joint coordinate"));
            }
        }
        Ok(SkeletonSequence { subjects, label })
    }

    pub fn single(coords: Tensor, label: usize) -> Result<Self> {
        Self::new(vec![coords], label)
    }

    pub fn subject_count(&self) -> usize {
        self.subjects.len()
    }

    pub fn frames(&self) -> usize {
        self.subjects[0].shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.subjects[0].shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.subjects[0].shape()[2]
    }
}

/// Frames whose coordinates are all zero (padding, absent subject) are
/// skipped; every joint of a remaining frame counts.
fn present_frames<'a>(seq: &'a SkeletonSequence) -> impl Iterator<Item = &'a [f32]> + 'a {
    let stride = seq.joints() * seq.channels();
    seq.subjects
        .iter()
        .flat_map(move |s| s.data().chunks(stride))
        .filter(|frame| frame.iter().any(|&v| v != 0.0))
}

/// Mean joint position over all joints of all non-missing frames.
pub fn compute_gravity_center(seq: &SkeletonSequence) -> Result<Vec<f32>> {
    let c = seq.channels();
    let mut acc = vec![0.0f64; c];
    let mut count = 0usize;
    for frame in present_frames(seq) {
        for p in frame.chunks(c) {
            for (a, &v) in acc.iter_mut().zip(p) {
                *a += v as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::data("every frame is missing; gravity center undefined"));
    }
    Ok(acc.into_iter().map(|a| (a / count as f64) as f32).collect())
}

/// One-frame, one-subject pose averaging every non-missing frame of `seqs`,
/// each sequence first shifted to its own gravity center. Used as the fixed
/// reference for the adjacency partition.
pub fn reference_pose(seqs: &[&SkeletonSequence]) -> Result<SkeletonSequence> {
    let first = seqs.first().ok_or_else(|| Error::data("no sequences to average"))?;
    let (m, c) = (first.joints(), first.channels());
    let mut acc = vec![0.0f64; m * c];
    let mut frames = 0usize;
    for seq in seqs {
        if seq.joints() != m || seq.channels() != c {
            return Err(Error::data("sequences disagree on joint or channel count"));
        }
        let center = compute_gravity_center(seq)?;
        for frame in present_frames(seq) {
            for (i, (a, &v)) in acc.iter_mut().zip(frame).enumerate() {
                *a += (v - center[i % c]) as f64;
            }
            frames += 1;
        }
    }
    let data = acc.into_iter().map(|a| (a / frames as f64) as f32).collect();
    SkeletonSequence::single(Tensor::new(&[1, m, c], data)?, 0)
}

/// Per-joint mean position over the non-missing frames.
fn joint_means(seq: &SkeletonSequence) -> Vec<Vec<f64>> {
    let (m, c) = (seq.joints(), seq.channels());
    let mut acc = vec![vec![0.0f64; c]; m];
    let mut frames = 0usize;
    for frame in present_frames(seq) {
        for (j, p) in frame.chunks(c).enumerate() {
            for (a, &v) in acc[j].iter_mut().zip(p) {
                *a += v as f64;
            }
        }
        frames += 1;
    }
    for p in &mut acc {
        p.iter_mut().for_each(|v| *v /= frames.max(1) as f64);
    }
    acc
}

/// Raw partition matrices `A_k` and their degree-normalized forms.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedAdjacency {
    pub raw: Vec<Tensor>,
    pub normalized: Vec<Tensor>,
}

impl PartitionedAdjacency {
    pub fn vertex_count(&self) -> usize {
        self.raw[0].shape()[0]
    }

    pub fn subsets(&self) -> usize {
        self.raw.len()
    }
}

/// Split every vertex's 1-hop neighborhood into root, centripetal and
/// centrifugal subsets by distance of the joints' sequence-mean positions to
/// the gravity center. Ties go to the centripetal subset.
///
/// Only `raw` is filled; `normalized` is left empty for
/// [`normalize_adjacency`].
pub fn partition_neighbors(template: &SkeletonTemplate, seq: &SkeletonSequence) -> Result<PartitionedAdjacency> {
    let m = template.joint_count();
    if seq.joints() != m {
        return Err(Error::data(format!(
            "sequence has {} joints, template {m}",
            seq.joints()
        )));
    }
    let center: Vec<f64> = compute_gravity_center(seq)?.into_iter().map(f64::from).collect();
    let means = joint_means(seq);
    let radius: Vec<f64> = means
        .iter()
        .map(|p| p.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();

    let mut raw: Vec<Tensor> = (0..PARTITION_SUBSETS).map(|_| Tensor::zeros(&[m, m])).collect();
    for i in 0..m {
        raw[0].set(&[i, i], 1.0);
        for j in template.neighbors(i) {
            let subset = if radius[j] <= radius[i] { 1 } else { 2 };
            raw[subset].set(&[i, j], 1.0);
        }
    }
    Ok(PartitionedAdjacency {
        raw,
        normalized: Vec::new(),
    })
}

/// `A_k[i][j] / sqrt((d_i + alpha) (d_j + alpha))` with `d` the row sums of `A_k`.
pub fn normalize_adjacency(mut adj: PartitionedAdjacency, alpha: f32) -> Result<PartitionedAdjacency> {
    if !(alpha > 0.0) {
        return Err(Error::usage(format!("alpha must be positive, got {alpha}")));
    }
    adj.normalized = adj
        .raw
        .iter()
        .map(|a| {
            let m = a.shape()[0];
            let degree: Vec<f32> = a.data().chunks(m).map(|row| row.iter().sum()).collect();
            let mut out = Tensor::zeros(&[m, m]);
            for i in 0..m {
                for j in 0..m {
                    let v = a.at(&[i, j]) / ((degree[i] + alpha) * (degree[j] + alpha)).sqrt();
                    out.set(&[i, j], v);
                }
            }
            out.ensure_finite("normalize_adjacency").map(|_| out)
        })
        .collect::<Result<_>>()?;
    Ok(adj)
}

/// Partition and normalize in one step.
pub fn build_adjacency(template: &SkeletonTemplate, reference: &SkeletonSequence, alpha: f32) -> Result<PartitionedAdjacency> {
    normalize_adjacency(partition_neighbors(template, reference)?, alpha)
}
