//! Objective, learning-rate schedule, the staged training pipeline and
//! ensemble inference.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, ResizePlan, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{SkeletonSequence, SkeletonTemplate};
use crate::nn::BnUpdates;
use crate::optim::sgd_step;
use crate::param::ParamSet;
use crate::resnet::RgbNet;
use crate::rng::Rng;
use crate::stgcn::{extract_joint_weights, joint_weights_on_tape, StGcn};
use crate::stroi::{apply_joint_weights, map_vertex_weights_to_parts, resize_square, ChannelStats, StRoiGrid};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared distance between the softmax output and the one-hot target.
    SquaredError,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Unweighted ST-ROI.
    None,
    /// Skeleton network frozen in evaluation mode; weights are constants.
    Fixed,
    /// Skeleton network trained jointly through the weighting.
    Soft,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Fixed => "fixed",
            AttentionMode::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "fixed" => Ok(AttentionMode::Fixed),
            "soft" => Ok(AttentionMode::Soft),
            other => Err(Error::usage(format!("unknown attention mode '{other}' (none|fixed|soft)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// 1-based epochs at which the rate is divided by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f32,
    pub seed: u64,
    pub loss: LossKind,
    /// Probability of mirroring an RGB training input horizontally.
    pub flip_prob: f64,
}

impl TrainConfig {
    /// 65 epochs, batch 64, 0.1 divided by 10 at the 45th and 55th epochs.
    pub fn reference_schedule() -> Self {
        TrainConfig {
            epochs: 65,
            batch_size: 64,
            lr0: 0.1,
            decay_epochs: vec![45, 55],
            decay_factor: 10.0,
            momentum: 0.9,
            seed: 42,
            loss: LossKind::SquaredError,
            flip_prob: 0.0,
        }
    }

    /// Same three-plateau shape over 20 epochs with batch 16.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            decay_epochs: vec![12, 16],
            ..Self::reference_schedule()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr0 > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::usage("epochs, batch size, learning rate and decay factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) || self.decay_epochs.iter().any(|&d| d == 0 || d >= self.epochs) {
            return Err(Error::usage(format!(
                "decay epochs {:?} must be strictly increasing, positive and below {}",
                self.decay_epochs, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::usage("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Rate for 0-based `epoch`: the 1-based decay epoch `d` first applies at
/// index `d - 1`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::usage(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let decays = cfg.decay_epochs.iter().filter(|&&d| epoch + 1 >= d).count();
    Ok(if decays == 0 {
        cfg.lr0
    } else {
        cfg.lr0 / cfg.decay_factor.powi(decays as i32)
    })
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    if labels.is_empty() {
        return Err(Error::data("no labels"));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::data(format!("label {l} outside {classes} classes")));
        }
        t.set(&[i, l], 1.0);
    }
    Ok(t)
}

fn check_one_hot<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    let ok = y.rank() == 2
        && y.data().chunks(y.shape()[1]).all(|row| {
            row.iter().filter(|&&v| v == T::one()).count() == 1 && row.iter().all(|&v| v == T::one() || v == T::zero())
        });
    if ok {
        Ok(())
    } else {
        Err(Error::usage("target is not a one-hot matrix"))
    }
}

/// `1/N * sum_n ||probs_n - y_n||^2`.
pub fn squared_error<T: Scalar>(tape: &mut Tape<T>, probs: Var, y: &Tensor<T>) -> Result<Var> {
    check_one_hot(y)?;
    if tape.shape(probs) != y.shape() {
        return Err(Error::shape("multimodal_loss", tape.shape(probs), y.shape()));
    }
    let n = y.shape()[0];
    let target = tape.constant(y.clone());
    let diff = tape.sub(probs, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `-1/N * sum_n y_n . log_softmax(logits_n)`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &Tensor<T>) -> Result<Var> {
    check_one_hot(y)?;
    if tape.shape(logits) != y.shape() {
        return Err(Error::shape("cross_entropy", tape.shape(logits), y.shape()));
    }
    let n = y.shape()[0];
    let logp = tape.log_softmax(logits)?;
    let target = tape.constant(y.clone());
    let picked = tape.mul(logp, target)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Loss term of one branch.
pub fn branch_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, probs: Var, y: &Tensor<T>, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::SquaredError => squared_error(tape, probs, y),
        LossKind::CrossEntropy => cross_entropy(tape, logits, y),
    }
}

/// Sum of the two branches' squared-error terms.
pub fn multimodal_loss<T: Scalar>(tape: &mut Tape<T>, probs_skeleton: Var, probs_rgb: Var, y: &Tensor<T>) -> Result<Var> {
    let a = squared_error(tape, probs_skeleton, y)?;
    let b = squared_error(tape, probs_rgb, y)?;
    tape.add(a, b)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

pub fn metrics_jsonl(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
        .collect()
}

pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    crate::io::write_bytes(path, metrics_jsonl(records).as_bytes())
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f32>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// skeleton stage

/// Train the skeleton network alone on its own loss term.
pub fn train_skeleton_stage(
    model: &mut StGcn,
    train: &[&SkeletonSequence],
    test: &[&SkeletonSequence],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("skeleton training split is empty"));
    }
    let classes = model.config.num_classes;
    let mut rng = Rng::new(cfg.seed).fork(11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let seqs: Vec<&SkeletonSequence> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = seqs.iter().map(|s| s.label).collect();
            let y = one_hot(&labels, classes)?;
            let mut tape = Tape::<f32>::new();
            let mut updates = Vec::new();
            let out = model.forward(&mut tape, &seqs, BnMode::Train, &mut updates)?;
            let loss = branch_loss(&mut tape, out.logits, out.probs, &y, cfg.loss)?;
            loss_sum += tape.value(loss).item() as f64 * seqs.len() as f64;
            correct += rows_of(tape.value(out.probs))
                .iter()
                .zip(&labels)
                .filter(|(p, &l)| argmax(p) == l)
                .count();
            tape.backward(loss, &mut [&mut model.params])?;
            sgd_step(&mut model.params, lr as f32, cfg.momentum)?;
            model.absorb(&updates);
        }
        let val_acc = if test.is_empty() {
            None
        } else {
            let probs = predict_skeleton(model, test, cfg.batch_size)?;
            let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            Some(accuracy(&preds, &test.iter().map(|s| s.label).collect::<Vec<_>>()))
        };
        records.push(EpochRecord {
            epoch,
            stage: "skeleton".into(),
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        });
    }
    Ok(records)
}

/// Evaluation-mode class probabilities, one row per sequence.
pub fn predict_skeleton(model: &StGcn, seqs: &[&SkeletonSequence], batch: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch.max(1)) {
        let mut tape = Tape::<f32>::inference();
        let o = model.forward(&mut tape, chunk, BnMode::Eval, &mut Vec::new())?;
        out.extend(rows_of(tape.value(o.probs)));
    }
    Ok(out)
}

/// Per-part weights for `seq` from the network in evaluation mode, laid out
/// for `groups` subject slots (slot `g` holds parts `g*K .. (g+1)*K`).
/// Unused slots get ones.
pub fn skeleton_part_weights(model: &StGcn, seq: &SkeletonSequence, template: &SkeletonTemplate, groups: usize) -> Result<Vec<f32>> {
    if seq.subject_count() > groups {
        return Err(Error::usage(format!(
            "{} subjects do not fit {groups} weight slots",
            seq.subject_count()
        )));
    }
    let mut tape = Tape::<f32>::inference();
    let out = model.forward(&mut tape, &[seq], BnMode::Eval, &mut Vec::new())?;
    let features = tape.value(out.features);
    let k = template.part_joints().len();
    let mut weights = Vec::with_capacity(k * groups);
    for g in 0..groups {
        match out.subject_rows[0].get(g) {
            Some(&row) => {
                let jw = extract_joint_weights(&features.slice0(row))?;
                weights.extend(map_vertex_weights_to_parts(&jw, template)?);
            }
            None => weights.extend(std::iter::repeat(1.0).take(k)),
        }
    }
    Ok(weights)
}

// ---------------------------------------------------------------------------
// rgb stage

#[derive(Clone, Copy, Debug)]
pub struct RgbExample<'a> {
    pub grid: &'a StRoiGrid,
    pub skeleton: &'a SkeletonSequence,
    pub label: usize,
}

/// The RGB branch's input pipeline: weighting, resize and normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbInputSpec {
    pub mode: AttentionMode,
    pub side: usize,
    pub stats: ChannelStats,
}

/// Weighted (per `mode`) and resized, but not yet normalized, image.
fn weighted_resized(
    example: &RgbExample,
    mode: AttentionMode,
    side: usize,
    gcn: &StGcn,
    template: &SkeletonTemplate,
) -> Result<Tensor> {
    let image = match mode {
        AttentionMode::None => example.grid.image.clone(),
        AttentionMode::Fixed | AttentionMode::Soft => {
            let groups = example.grid.geometry.layout.groups();
            let w = skeleton_part_weights(gcn, example.skeleton, template, groups)?;
            apply_joint_weights(example.grid, &w)?.image
        }
    };
    resize_square(&image, side)
}

fn normalize(mut x: Tensor, stats: &ChannelStats) -> Tensor {
    let (scale, shift) = (stats.scale(), stats.shift());
    let plane = x.numel() / 3;
    for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v as f64 * scale[c] + shift[c]) as f32;
        }
    }
    x
}

/// Network input for one example under `spec`, with the skeleton network
/// (if any) in evaluation mode.
pub fn rgb_input(example: &RgbExample, spec: &RgbInputSpec, gcn: &StGcn, template: &SkeletonTemplate) -> Result<Tensor> {
    Ok(normalize(weighted_resized(example, spec.mode, spec.side, gcn, template)?, &spec.stats))
}

/// Mirror the last axis of a `[.., W]` tensor.
fn flip_width(x: &Tensor) -> Tensor {
    let w = *x.shape().last().expect("rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// The jointly trained forward pass: joint weights read off the skeleton
/// network's features scale the region-of-interest rows on the tape, so the
/// RGB loss reaches the skeleton parameters.
struct SoftBatch<'a> {
    gcn: &'a StGcn,
    rgb: &'a RgbNet,
    template: &'a SkeletonTemplate,
    plan: &'a ResizePlan,
    stats: &'a ChannelStats,
    loss: LossKind,
}

impl SoftBatch<'_> {
    /// Two-term loss and RGB probabilities for `batch`; `flips` mirrors
    /// images (and swaps the subject slots) per example.
    fn loss(
        &self,
        tape: &mut Tape<f32>,
        batch: &[&RgbExample],
        flips: &[bool],
        y: &Tensor,
        gcn_updates: &mut BnUpdates,
        rgb_updates: &mut BnUpdates,
    ) -> Result<(Var, Var)> {
        let part_joints = self.template.part_joints();
        let geometry = batch[0].grid.geometry;
        let seqs: Vec<&SkeletonSequence> = batch.iter().map(|e| e.skeleton).collect();
        let g_out = self.gcn.forward(tape, &seqs, BnMode::Train, gcn_updates)?;
        let jw = joint_weights_on_tape(tape, g_out.features)?;
        let parts = tape.gather_cols(jw, &part_joints)?;
        let parts = tape.normalize_rows_by_max(parts)?;
        let groups = geometry.layout.groups();
        let slots = g_out
            .subject_rows
            .iter()
            .zip(flips)
            .flat_map(|(rows, &flip)| {
                (0..groups).map(move |g| {
                    let subject = if flip { groups - 1 - g } else { g };
                    rows.get(subject).map(|&r| vec![(r, 1.0)]).unwrap_or_default()
                })
            })
            .collect();
        let slots = tape.combine_rows(parts, slots)?;
        let weights = tape.reshape(slots, &[batch.len(), groups * part_joints.len()])?;
        let images: Vec<Tensor> = batch
            .iter()
            .zip(flips)
            .map(|(e, &f)| if f { flip_width(&e.grid.image) } else { e.grid.image.clone() })
            .collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let raw = tape.constant(Tensor::stack(&refs)?);
        let weighted = tape.scale_blocks(raw, weights, part_joints.len(), groups)?;
        let small = tape.resize_bilinear(weighted, self.plan)?;
        let x = tape.channel_affine(small, &self.stats.scale(), &self.stats.shift())?;
        let r_out = self.rgb.forward(tape, x, BnMode::Train, rgb_updates)?;
        let a = branch_loss(tape, g_out.logits, g_out.probs, y, self.loss)?;
        let b = branch_loss(tape, r_out.logits, r_out.probs, y, self.loss)?;
        Ok((tape.add(a, b)?, r_out.probs))
    }
}

/// Gradient magnitudes from one jointly trained forward/backward pass,
/// without updating any parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftProbe {
    pub loss: f64,
    /// L2 norm of the loss gradient over every edge-importance mask.
    pub mask_grad_norm: f64,
    /// L2 norm of the loss gradient over all skeleton parameters.
    pub skeleton_grad_norm: f64,
}

/// Run the joint objective on `batch` and report how strongly it pulls on
/// the skeleton network. Gradients are cleared afterwards.
pub fn soft_mode_probe(
    rgb: &mut RgbNet,
    gcn: &mut StGcn,
    template: &SkeletonTemplate,
    batch: &[RgbExample],
    stats: &ChannelStats,
    loss: LossKind,
) -> Result<SoftProbe> {
    let first = batch.first().ok_or_else(|| Error::data("empty probe batch"))?;
    let (h, w) = first.grid.geometry.image_size();
    let side = rgb.config.input_side;
    let plan = ResizePlan::new(h, w, side, side)?;
    let y = one_hot(&batch.iter().map(|e| e.label).collect::<Vec<_>>(), rgb.config.num_classes)?;
    let refs: Vec<&RgbExample> = batch.iter().collect();
    let mut tape = Tape::<f32>::new();
    let soft = SoftBatch { gcn, rgb, template, plan: &plan, stats, loss };
    let (l, _) = soft.loss(&mut tape, &refs, &vec![false; batch.len()], &y, &mut Vec::new(), &mut Vec::new())?;
    let value = tape.value(l).item() as f64;
    tape.backward(l, &mut [&mut gcn.params, &mut rgb.params])?;
    let norm = |set: &ParamSet, pick: &dyn Fn(&str) -> bool| {
        set.iter()
            .filter(|(name, _)| pick(name))
            .flat_map(|(_, p)| p.grad.data().iter().map(|&g| g as f64 * g as f64))
            .sum::<f64>()
            .sqrt()
    };
    let probe = SoftProbe {
        loss: value,
        mask_grad_norm: norm(&gcn.params, &|n| n.contains(".mask")),
        skeleton_grad_norm: norm(&gcn.params, &|_| true),
    };
    gcn.params.zero_grad();
    rgb.params.zero_grad();
    Ok(probe)
}

pub struct RgbStageOutput {
    pub input: RgbInputSpec,
    pub records: Vec<EpochRecord>,
}

/// Train the RGB branch. `None` and `Fixed` leave `gcn` untouched; `Soft`
/// updates it jointly on the two-term objective and requires
/// `train_skeleton`.
#[allow(clippy::too_many_arguments)]
pub fn train_rgb_stage(
    rgb: &mut RgbNet,
    gcn: &mut StGcn,
    template: &SkeletonTemplate,
    train: &[RgbExample],
    test: &[RgbExample],
    cfg: &TrainConfig,
    mode: AttentionMode,
    train_skeleton: bool,
) -> Result<RgbStageOutput> {
    cfg.validate()?;
    if train_skeleton != (mode == AttentionMode::Soft) {
        return Err(Error::usage(format!(
            "attention mode '{}' {} skeleton gradients",
            mode.name(),
            if mode == AttentionMode::Soft { "requires" } else { "cannot be used with" }
        )));
    }
    if train.is_empty() {
        return Err(Error::data("rgb training split is empty"));
    }
    let side = rgb.config.input_side;
    let classes = rgb.config.num_classes;
    if gcn.config.num_classes != classes {
        return Err(Error::usage("skeleton and rgb networks disagree on the class count"));
    }
    let geometry = train[0].grid.geometry;
    if train.iter().chain(test).any(|e| e.grid.geometry != geometry) {
        return Err(Error::data("all ST-ROI grids must share one geometry"));
    }

    let resized = train
        .iter()
        .map(|e| weighted_resized(e, mode, side, gcn, template))
        .collect::<Result<Vec<_>>>()?;
    let stats = ChannelStats::measure(&resized)?;
    let spec = RgbInputSpec { mode, side, stats };
    // Soft mode recomputes the weighting every step; the others reuse these.
    let inputs: Vec<Tensor> = if mode == AttentionMode::Soft {
        Vec::new()
    } else {
        resized.into_iter().map(|x| normalize(x, &spec.stats)).collect()
    };
    let (h, w) = geometry.image_size();
    let plan = ResizePlan::new(h, w, side, side)?;

    let mut rng = Rng::new(cfg.seed).fork(23);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let flips: Vec<bool> = idx.iter().map(|_| cfg.flip_prob > 0.0 && rng.uniform() < cfg.flip_prob).collect();
            let y = one_hot(&labels, classes)?;
            let mut tape = Tape::<f32>::new();
            let mut rgb_updates = Vec::new();
            let mut gcn_updates = Vec::new();
            let (loss, probs) = if mode == AttentionMode::Soft {
                let batch: Vec<&RgbExample> = idx.iter().map(|&i| &train[i]).collect();
                let soft = SoftBatch { gcn, rgb, template, plan: &plan, stats: &spec.stats, loss: cfg.loss };
                soft.loss(&mut tape, &batch, &flips, &y, &mut gcn_updates, &mut rgb_updates)?
            } else {
                let batch: Vec<Tensor> = idx
                    .iter()
                    .zip(&flips)
                    .map(|(&i, &f)| if f { flip_width(&inputs[i]) } else { inputs[i].clone() })
                    .collect();
                let refs: Vec<&Tensor> = batch.iter().collect();
                let x = tape.constant(Tensor::stack(&refs)?);
                let r_out = rgb.forward(&mut tape, x, BnMode::Train, &mut rgb_updates)?;
                (branch_loss(&mut tape, r_out.logits, r_out.probs, &y, cfg.loss)?, r_out.probs)
            };
            loss_sum += tape.value(loss).item() as f64 * idx.len() as f64;
            correct += rows_of(tape.value(probs))
                .iter()
                .zip(&labels)
                .filter(|(p, &l)| argmax(p) == l)
                .count();
            if mode == AttentionMode::Soft {
                tape.backward(loss, &mut [&mut gcn.params, &mut rgb.params])?;
                sgd_step(&mut gcn.params, lr as f32, cfg.momentum)?;
                gcn.absorb(&gcn_updates);
            } else {
                tape.backward(loss, &mut [&mut rgb.params])?;
            }
            sgd_step(&mut rgb.params, lr as f32, cfg.momentum)?;
            rgb.absorb(&rgb_updates);
        }
        let val_acc = if test.is_empty() {
            None
        } else {
            let probs = predict_rgb(rgb, gcn, template, test, &spec, cfg.batch_size)?;
            let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            Some(accuracy(&preds, &test.iter().map(|e| e.label).collect::<Vec<_>>()))
        };
        records.push(EpochRecord {
            epoch,
            stage: format!("rgb-{}", mode.name()),
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        });
    }
    Ok(RgbStageOutput { input: spec, records })
}

/// Evaluation-mode RGB class probabilities.
pub fn predict_rgb(
    rgb: &RgbNet,
    gcn: &StGcn,
    template: &SkeletonTemplate,
    examples: &[RgbExample],
    spec: &RgbInputSpec,
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch.max(1)) {
        let inputs = chunk
            .iter()
            .map(|e| rgb_input(e, spec, gcn, template))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(Tensor::stack(&refs)?);
        let o = rgb.forward(&mut tape, x, BnMode::Eval, &mut Vec::new())?;
        out.extend(rows_of(tape.value(o.probs)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// ensembling and reporting

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleEntry {
    pub combined: Vec<f32>,
    pub class: usize,
}

/// Mean of the two probability vectors; the argmax breaks ties low.
pub fn ensemble_predict(skeleton: &[f32], rgb: &[f32]) -> Result<EnsembleEntry> {
    if skeleton.len() != rgb.len() || skeleton.is_empty() {
        return Err(Error::shape("ensemble_predict", &[skeleton.len()], &[rgb.len()]));
    }
    let combined: Vec<f32> = skeleton.iter().zip(rgb).map(|(a, b)| (a + b) / 2.0).collect();
    let class = argmax(&combined);
    Ok(EnsembleEntry { combined, class })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub entries: Vec<EnsembleEntry>,
    pub skeleton_accuracy: f64,
    pub rgb_accuracy: f64,
    pub combined_accuracy: f64,
}

pub fn ensemble(skeleton: &[Vec<f32>], rgb: &[Vec<f32>], labels: &[usize]) -> Result<EnsembleResult> {
    if skeleton.len() != rgb.len() || skeleton.len() != labels.len() {
        return Err(Error::shape("ensemble", &[skeleton.len(), rgb.len()], &[labels.len()]));
    }
    let entries = skeleton
        .iter()
        .zip(rgb)
        .map(|(a, b)| ensemble_predict(a, b))
        .collect::<Result<Vec<_>>>()?;
    let preds = |rows: &[Vec<f32>]| rows.iter().map(|r| argmax(r)).collect::<Vec<_>>();
    Ok(EnsembleResult {
        skeleton_accuracy: accuracy(&preds(skeleton), labels),
        rgb_accuracy: accuracy(&preds(rgb), labels),
        combined_accuracy: accuracy(&entries.iter().map(|e| e.class).collect::<Vec<_>>(), labels),
        entries,
    })
}

/// Branch involvement in an ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Unused,
    Trained,
    /// Used in evaluation mode only.
    Frozen,
}

impl Role {
    fn mark(self) -> &'static str {
        match self {
            Role::Unused => "-",
            Role::Trained => "yes",
            Role::Frozen => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub index: usize,
    pub method: &'static str,
    pub skeleton: Role,
    pub rgb: Role,
    pub accuracy: Option<f64>,
}

/// Class probabilities on one split for each available model.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub skeleton: Option<Vec<Vec<f32>>>,
    pub rgb_plain: Option<Vec<Vec<f32>>>,
    pub rgb_soft: Option<Vec<Vec<f32>>>,
    pub rgb_fixed: Option<Vec<Vec<f32>>>,
}

/// The seven-row ablation grid: each branch alone, the RGB branch with
/// jointly trained and with frozen weighting, and the skeleton branch
/// ensembled with each RGB variant. Rows lacking a model report `None`.
pub fn ablation_report(p: &Predictions, labels: &[usize]) -> Result<Vec<AblationRow>> {
    let single = |rows: &Option<Vec<Vec<f32>>>| -> Result<Option<f64>> {
        rows.as_ref()
            .map(|r| {
                if r.len() != labels.len() {
                    return Err(Error::shape("ablation_report", &[r.len()], &[labels.len()]));
                }
                Ok(accuracy(&r.iter().map(|x| argmax(x)).collect::<Vec<_>>(), labels))
            })
            .transpose()
    };
    let pair = |rgb: &Option<Vec<Vec<f32>>>| -> Result<Option<f64>> {
        match (&p.skeleton, rgb) {
            (Some(s), Some(r)) => Ok(Some(ensemble(s, r, labels)?.combined_accuracy)),
            _ => Ok(None),
        }
    };
    use Role::*;
    Ok(vec![
        AblationRow { index: 1, method: "GCN", skeleton: Trained, rgb: Unused, accuracy: single(&p.skeleton)? },
        AblationRow { index: 2, method: "ResNet", skeleton: Unused, rgb: Trained, accuracy: single(&p.rgb_plain)? },
        AblationRow { index: 3, method: "ResNet+Weights", skeleton: Trained, rgb: Trained, accuracy: single(&p.rgb_soft)? },
        AblationRow { index: 4, method: "ResNet+Weights", skeleton: Frozen, rgb: Trained, accuracy: single(&p.rgb_fixed)? },
        AblationRow { index: 5, method: "Ensemble (1+2)", skeleton: Frozen, rgb: Frozen, accuracy: pair(&p.rgb_plain)? },
        AblationRow { index: 6, method: "Ensemble (1+3)", skeleton: Frozen, rgb: Frozen, accuracy: pair(&p.rgb_soft)? },
        AblationRow { index: 7, method: "Ensemble (1+4)", skeleton: Frozen, rgb: Frozen, accuracy: pair(&p.rgb_fixed)? },
    ])
}

pub fn format_report(rows: &[AblationRow]) -> String {
    let mut out = String::from("#  method          skeleton  rgb   accuracy\n");
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "n/a".to_string(), |a| format!("{:.2}", a * 100.0));
        let _ = writeln!(
            out,
            "{}  {:<15} {:<9} {:<5} {}",
            r.index,
            r.method,
            r.skeleton.mark(),
            r.rgb.mark(),
            acc
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_rates() {
        let cfg = TrainConfig::reference_schedule();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 43).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 44).unwrap(), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 54).unwrap(), 0.001);
        assert_eq!(lr_at_epoch(&cfg, 64).unwrap(), 0.001);
        assert!(lr_at_epoch(&cfg, 65).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            decay_epochs: vec![16, 12],
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            decay_epochs: vec![12, 20],
            ..TrainConfig::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let y = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        let pj = tape.constant(y.clone());
        let pr = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
        let l = multimodal_loss(&mut tape, pj, pr, &y).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
        let l0 = multimodal_loss(&mut tape, pj, pj, &y).unwrap();
        assert_eq!(tape.value(l0).item(), 0.0);
        let not_hot = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert!(matches!(multimodal_loss(&mut tape, pj, pr, &not_hot), Err(Error::Usage(_))));
    }

    #[test]
    fn ensemble_examples() {
        let e = ensemble_predict(&[0.6, 0.4], &[0.2, 0.8]).unwrap();
        assert_eq!(e.class, 1);
        assert!((e.combined[0] - 0.4).abs() < 1e-7 && (e.combined[1] - 0.6).abs() < 1e-7);
        assert_eq!(ensemble_predict(&[0.5, 0.5], &[0.5, 0.5]).unwrap().class, 0);
        assert!(matches!(ensemble_predict(&[1.0], &[0.5, 0.5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn report_has_seven_rows() {
        let labels = vec![0, 1];
        let p = Predictions {
            skeleton: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            ..Default::default()
        };
        let rows = ablation_report(&p, &labels).unwrap();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].accuracy, Some(1.0));
        assert!(rows[1..].iter().all(|r| r.accuracy.is_none()));
        assert_eq!(format_report(&rows).lines().count(), 8);
    }
}
