//! Skeleton branch: stacked spatial graph convolution + temporal convolution
//! layers, a pooled linear classifier, and per-joint importance weights
//! read off the final feature map.

use std::collections::BTreeMap;

use crate::autodiff::{conv2d_output_extent, BnMode, Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{compute_gravity_center, PartitionedAdjacency, SkeletonSequence, PARTITION_SUBSETS};
use crate::nn::{absorb_updates, export_all, he_uniform, import_all, BatchNorm, BnUpdates, Linear};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StGcnConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerPlan>,
    /// Temporal kernel length; must be odd.
    pub temporal_kernel: usize,
    pub num_classes: usize,
    pub alpha: f32,
    /// Subtract each sample's gravity center before the first layer.
    pub center_input: bool,
}

impl StGcnConfig {
    /// Four layers 16, 16, 32 (stride 2), 32 over 3-D joints, temporal kernel 9.
    pub fn desk(num_classes: usize) -> Self {
        let plan = |channels, stride| LayerPlan { channels, stride };
        StGcnConfig {
            in_channels: 3,
            layers: vec![plan(16, 1), plan(16, 1), plan(32, 2), plan(32, 1)],
            temporal_kernel: 9,
            num_classes,
            alpha: crate::graph::DEFAULT_ALPHA,
            center_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 || self.layers.is_empty() {
            return Err(Error::usage("skeleton network needs input channels, classes and layers"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::usage(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        let mut prev = 0;
        for l in &self.layers {
            if l.channels == 0 || l.stride == 0 || l.channels < prev {
                return Err(Error::usage(format!(
                    "layer channels must be positive and non-decreasing, strides positive: {:?}",
                    self.layers
                )));
            }
            prev = l.channels;
        }
        if !(self.alpha > 0.0) {
            return Err(Error::usage("alpha must be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }

    /// Temporal length after the stack, or `None` if a stride collapses it.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        let pad = (self.temporal_kernel - 1) / 2;
        self.layers.iter().try_fold(frames, |t, l| {
            conv2d_output_extent(t, self.temporal_kernel, l.stride, pad).filter(|&t| t > 0)
        })
    }
}

/// One graph-convolution layer: per-subset channel maps `W_k`, edge
/// importance masks `M_k`, then a temporal convolution, batch norm and relu.
#[derive(Clone, Debug)]
pub struct StGcnLayer {
    pub weights: Vec<ParamId>,
    pub masks: Vec<ParamId>,
    pub temporal: ParamId,
    pub temporal_kernel: usize,
    pub stride: usize,
    pub bn: BatchNorm,
    pub name: String,
}

impl StGcnLayer {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        vertices: usize,
        temporal_kernel: usize,
        stride: usize,
        params: &mut ParamSet,
        rng: &mut Rng,
    ) -> Self {
        let weights = (0..PARTITION_SUBSETS)
            .map(|k| {
                params.add(
                    format!("{name}.w{k}"),
                    he_uniform(&[in_channels, out_channels], in_channels, rng),
                )
            })
            .collect();
        let masks = (0..PARTITION_SUBSETS)
            .map(|k| params.add(format!("{name}.mask{k}"), Tensor::ones(&[vertices, vertices])))
            .collect();
        let temporal = params.add(
            format!("{name}.temporal"),
            he_uniform(
                &[out_channels, out_channels, temporal_kernel, 1],
                out_channels * temporal_kernel,
                rng,
            ),
        );
        StGcnLayer {
            weights,
            masks,
            temporal,
            temporal_kernel,
            stride,
            bn: BatchNorm::new(&format!("{name}.bn"), out_channels, params),
            name: name.to_string(),
        }
    }
}

/// `sum_k (x W_k)` mixed over vertices by `normalize(A_k) * M_k`:
/// `out[n, c', t, i] = sum_k sum_j G_k[i, j] * (x W_k)[n, c', t, j]`.
pub fn spatial_step<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &StGcnLayer,
    adjacency: &PartitionedAdjacency,
    params: &ParamSet,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("gcn_layer_forward", &shape, &[0, 0, 0, 0]));
    }
    let [n, c, t, v] = [shape[0], shape[1], shape[2], shape[3]];
    if v != adjacency.vertex_count() || adjacency.normalized.len() != layer.weights.len() {
        return Err(Error::shape("gcn_layer_forward", &shape, &[adjacency.vertex_count()]));
    }
    let rows = tape.permute(x, &[0, 2, 3, 1])?;
    let rows = tape.reshape(rows, &[n * t * v, c])?;
    let mut total = None;
    for k in 0..layer.weights.len() {
        let w = tape.param(params, layer.weights[k]);
        let c_out = tape.shape(w)[1];
        if tape.shape(w)[0] != c {
            return Err(Error::shape("gcn_layer_forward", &shape, tape.shape(w)));
        }
        let mixed = tape.matmul(rows, w)?;
        let mixed = tape.reshape(mixed, &[n, t, v, c_out])?;
        let mixed = tape.permute(mixed, &[0, 3, 1, 2])?;
        let mixed = tape.reshape(mixed, &[n * c_out * t, v])?;
        let a_hat = tape.constant(adjacency.normalized[k].cast::<T>());
        let mask = tape.param(params, layer.masks[k]);
        let g = tape.mul(a_hat, mask)?;
        let gt = tape.transpose(g)?;
        let out = tape.matmul(mixed, gt)?;
        let out = tape.reshape(out, &[n, c_out, t, v])?;
        total = Some(match total {
            None => out,
            Some(acc) => tape.add(acc, out)?,
        });
    }
    total.ok_or_else(|| Error::usage("layer without partition subsets"))
}

/// Spatial step, temporal convolution, batch norm, relu.
pub fn gcn_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &StGcnLayer,
    adjacency: &PartitionedAdjacency,
    params: &ParamSet,
    mode: BnMode,
    updates: &mut BnUpdates,
) -> Result<Var> {
    let tag = |e: Error| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{} ({msg})", layer.name)),
        other => other,
    };
    let spatial = spatial_step(tape, x, layer, adjacency, params).map_err(tag)?;
    let kernel = tape.param(params, layer.temporal);
    let pad = (layer.temporal_kernel - 1) / 2;
    let temporal = tape
        .conv2d(spatial, kernel, Conv2dSpec::new((layer.stride, 1), (pad, 0)))
        .map_err(tag)?;
    let normed = layer.bn.forward(tape, temporal, params, mode, updates).map_err(tag)?;
    tape.relu(normed).map_err(tag)
}

/// Shift every non-missing frame of a `[T, M, C]` subject by `-center`.
fn recenter(subject: &Tensor, center: &[f32]) -> Tensor {
    let c = center.len();
    let stride = subject.shape()[1] * c;
    let mut out = subject.clone();
    for frame in out.data_mut().chunks_mut(stride) {
        if frame.iter().any(|&v| v != 0.0) {
            for (i, v) in frame.iter_mut().enumerate() {
                *v -= center[i % c];
            }
        }
    }
    out
}

/// Outputs of a batched forward pass.
pub struct GcnOutput {
    pub logits: Var,
    pub probs: Var,
    /// Final feature maps, one row per subject: `[R, C, T', V]`.
    pub features: Var,
    /// For each sample, the feature-map rows of its subjects.
    pub subject_rows: Vec<Vec<usize>>,
}

/// Per-vertex importance: mean over time and channels of `|Y|`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointWeights(Vec<f32>);

impl JointWeights {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::usage("joint weights must be finite and non-negative"));
        }
        Ok(JointWeights(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// `J[v] = 1/(t c) * sum_t sum_c sqrt(Y[c, t, v]^2)` for a `[c, t, v]` map.
pub fn extract_joint_weights(features: &Tensor) -> Result<JointWeights> {
    if features.rank() != 3 {
        return Err(Error::shape("extract_joint_weights", features.shape(), &[0, 0, 0]));
    }
    features.ensure_finite("extract_joint_weights input")?;
    let v = features.shape()[2];
    let count = features.numel() / v;
    let mut acc = vec![0.0f64; v];
    for row in features.data().chunks(v) {
        for (a, &y) in acc.iter_mut().zip(row) {
            *a += (y as f64).abs();
        }
    }
    JointWeights::new(acc.into_iter().map(|a| (a / count as f64) as f32).collect())
}

/// Differentiable form of [`extract_joint_weights`] over `[R, C, T, V]`,
/// giving `[R, V]`.
pub fn joint_weights_on_tape<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let a = tape.abs(features)?;
    tape.mean(a, &[1, 2])
}

/// Direct per-vertex evaluation of the neighbor-sum graph convolution:
/// `out[:, t, i] = sum_{j in N(i)} f[:, t, j] W_k / Z_k(i)` where `k` is the
/// subset `j` falls in and `Z_k(i)` its size within `N(i)`. Empty subsets
/// contribute nothing.
pub fn gcn_reference_forward(features: &Tensor, adjacency: &PartitionedAdjacency, weights: &[Tensor]) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape("gcn_reference_forward", features.shape(), &[0, 0, 0]));
    }
    let (c, t, v) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if v != adjacency.vertex_count() || weights.len() != adjacency.subsets() {
        return Err(Error::shape("gcn_reference_forward", features.shape(), &[weights.len()]));
    }
    let c_out = weights[0].shape()[1];
    for w in weights {
        if w.shape() != [c, c_out] {
            return Err(Error::shape("gcn_reference_forward", w.shape(), &[c, c_out]));
        }
    }
    let mut out = Tensor::zeros(&[c_out, t, v]);
    for (k, a) in adjacency.raw.iter().enumerate() {
        for i in 0..v {
            let z: f32 = (0..v).map(|j| a.at(&[i, j])).sum();
            if z == 0.0 {
                continue;
            }
            for j in (0..v).filter(|&j| a.at(&[i, j]) != 0.0) {
                for ti in 0..t {
                    for co in 0..c_out {
                        let mut s = 0.0f32;
                        for ci in 0..c {
                            s += features.at(&[ci, ti, j]) * weights[k].at(&[ci, co]);
                        }
                        let cur = out.at(&[co, ti, i]);
                        out.set(&[co, ti, i], cur + s / z);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// The whole skeleton branch with its own parameters and graph.
#[derive(Clone, Debug)]
pub struct StGcn {
    pub config: StGcnConfig,
    pub params: ParamSet,
    pub layers: Vec<StGcnLayer>,
    pub head: Linear,
    pub adjacency: PartitionedAdjacency,
}

impl StGcn {
    pub fn new(config: StGcnConfig, adjacency: PartitionedAdjacency, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if adjacency.normalized.len() != PARTITION_SUBSETS {
            return Err(Error::usage("adjacency must be normalized with three subsets"));
        }
        let vertices = adjacency.vertex_count();
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut c_in = config.in_channels;
        for (i, plan) in config.layers.iter().enumerate() {
            layers.push(StGcnLayer::new(
                &format!("gcn.l{i}"),
                c_in,
                plan.channels,
                vertices,
                config.temporal_kernel,
                plan.stride,
                &mut params,
                rng,
            ));
            c_in = plan.channels;
        }
        let head = Linear::new("gcn.head", c_in, config.num_classes, &mut params, rng);
        Ok(StGcn {
            config,
            params,
            layers,
            head,
            adjacency,
        })
    }

    pub fn vertices(&self) -> usize {
        self.adjacency.vertex_count()
    }

    /// Stack the subjects of `batch` into `[R, C, T, V]`.
    fn input_tensor(&self, batch: &[&SkeletonSequence]) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let first = batch.first().ok_or_else(|| Error::data("empty skeleton batch"))?;
        let frames = first.frames();
        if self.config.output_frames(frames).is_none() {
            return Err(Error::data(format!("sequence of {frames} frames is too short for the layer strides")));
        }
        let mut planes = Vec::new();
        let mut rows = Vec::new();
        for seq in batch {
            if seq.frames() != frames {
                return Err(Error::data(format!(
                    "batched sequences must share a length: {} vs {frames}",
                    seq.frames()
                )));
            }
            if seq.joints() != self.vertices() || seq.channels() != self.config.in_channels {
                return Err(Error::data(format!(
                    "sequence is {}x{} (joints x channels), model expects {}x{}",
                    seq.joints(),
                    seq.channels(),
                    self.vertices(),
                    self.config.in_channels
                )));
            }
            let center = if self.config.center_input {
                Some(compute_gravity_center(seq)?)
            } else {
                None
            };
            let mut mine = Vec::new();
            for s in &seq.subjects {
                mine.push(planes.len());
                let plane = match &center {
                    Some(g) => recenter(s, g),
                    None => s.clone(),
                };
                planes.push(plane.permute(&[2, 0, 1])?);
            }
            rows.push(mine);
        }
        let refs: Vec<&Tensor> = planes.iter().collect();
        Ok((Tensor::stack(&refs)?, rows))
    }

    /// Batched forward pass. Two-subject samples average their subjects'
    /// final feature maps before pooling.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &[&SkeletonSequence],
        mode: BnMode,
        updates: &mut BnUpdates,
    ) -> Result<GcnOutput> {
        let (input, subject_rows) = self.input_tensor(batch)?;
        let mut x = tape.constant(input.cast::<T>());
        for layer in &self.layers {
            x = gcn_layer_forward(tape, x, layer, &self.adjacency, &self.params, mode, updates)?;
        }
        let features = x;
        let merged = if subject_rows.iter().all(|r| r.len() == 1) {
            features
        } else {
            let plan = subject_rows
                .iter()
                .map(|r| r.iter().map(|&i| (i, 1.0 / r.len() as f64)).collect())
                .collect();
            tape.combine_rows(features, plan)?
        };
        let pooled = tape.mean(merged, &[2, 3])?;
        let logits = self.head.forward(tape, pooled, &self.params)?;
        let probs = tape.softmax(logits)?;
        Ok(GcnOutput {
            logits,
            probs,
            features,
            subject_rows,
        })
    }

    pub fn absorb(&mut self, updates: &BnUpdates) {
        absorb_updates(self.layers.iter_mut().map(|l| &mut l.bn), updates);
    }

    pub fn export(&self) -> BTreeMap<String, Tensor> {
        let mut out = export_all(&self.params, self.layers.iter().map(|l| &l.bn));
        for (k, a) in self.adjacency.raw.iter().enumerate() {
            out.insert(format!("gcn.adjacency.raw{k}"), a.clone());
        }
        out
    }

    /// Rebuild from exported tensors; the partition is read back from the
    /// bundle rather than recomputed.
    pub fn import(config: StGcnConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let raw = (0..PARTITION_SUBSETS)
            .map(|k| {
                tensors
                    .get(&format!("gcn.adjacency.raw{k}"))
                    .cloned()
                    .ok_or_else(|| Error::data(format!("checkpoint lacks adjacency subset {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha = config.alpha;
        let adjacency = crate::graph::normalize_adjacency(PartitionedAdjacency { raw, normalized: vec![] }, alpha)?;
        let mut model = StGcn::new(config, adjacency, &mut Rng::new(0))?;
        let StGcn { params, layers, .. } = &mut model;
        import_all(params, layers.iter_mut().map(|l| &mut l.bn), tensors)?;
        Ok(model)
    }
}

/// Single-sample evaluation-mode classification.
pub struct Classification {
    pub logits: Tensor,
    pub probs: Tensor,
    /// Final `[c, t, v]` feature map of each subject.
    pub features: Vec<Tensor>,
}

pub fn stgcn_classify(seq: &SkeletonSequence, model: &StGcn) -> Result<Classification> {
    let mut tape = Tape::<f32>::inference();
    let out = model.forward(&mut tape, &[seq], BnMode::Eval, &mut Vec::new())?;
    let features = tape.value(out.features);
    Ok(Classification {
        logits: tape.value(out.logits).slice0(0),
        probs: tape.value(out.probs).slice0(0),
        features: out.subject_rows[0].iter().map(|&r| features.slice0(r)).collect(),
    })
}
