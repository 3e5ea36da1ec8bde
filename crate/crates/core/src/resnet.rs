//! Residual CNN over ST-ROI images.

use std::collections::BTreeMap;

use crate::autodiff::{conv2d_output_extent, BnMode, Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{absorb_updates, export_all, he_uniform, import_all, BatchNorm, BnUpdates, Linear};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbNetConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// The first stage keeps the stem resolution; each later one halves it.
    pub stages: Vec<StagePlan>,
    pub input_side: usize,
    pub num_classes: usize,
}

impl RgbNetConfig {
    /// 3x3/16 stem, stages 16x2, 32x2, 64x2 on 64x64 inputs.
    pub fn desk(num_classes: usize) -> Self {
        Self::compact(64, [16, 32, 64], num_classes)
    }

    /// Desk layout with custom input side and stage widths.
    pub fn compact(input_side: usize, widths: [usize; 3], num_classes: usize) -> Self {
        RgbNetConfig {
            stem_channels: widths[0],
            stem_kernel: 3,
            stem_stride: 1,
            stages: widths.iter().map(|&channels| StagePlan { channels, blocks: 2 }).collect(),
            input_side,
            num_classes,
        }
    }

    /// ResNet18 layout (7x7/2 stem, 64-128-256-512) on 225x225 inputs,
    /// without the stem max-pool.
    pub fn resnet18(num_classes: usize) -> Self {
        RgbNetConfig {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stages: [64, 128, 256, 512].iter().map(|&channels| StagePlan { channels, blocks: 2 }).collect(),
            input_side: 225,
            num_classes,
        }
    }

    fn stride_of(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Spatial side before pooling.
    pub fn final_side(&self) -> Option<usize> {
        let mut side = conv2d_output_extent(self.input_side, self.stem_kernel, self.stem_stride, self.stem_kernel / 2)?;
        for i in 0..self.stages.len() {
            side = conv2d_output_extent(side, 3, Self::stride_of(i), 1)?;
        }
        Some(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0
            || self.stem_kernel % 2 == 0
            || self.stem_stride == 0
            || self.stages.is_empty()
            || self.num_classes == 0
            || self.stages.iter().any(|s| s.channels == 0 || s.blocks == 0)
        {
            return Err(Error::usage(format!("invalid rgb network config {self:?}")));
        }
        match self.final_side() {
            Some(s) if s >= 4 => Ok(()),
            other => Err(Error::usage(format!(
                "input side {} shrinks to {other:?} before pooling; need at least 4",
                self.input_side
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ParamId,
    pub bn1: BatchNorm,
    pub conv2: ParamId,
    pub bn2: BatchNorm,
    /// 1x1 convolution + batch norm on the shortcut when the shape changes.
    pub projection: Option<(ParamId, BatchNorm)>,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let projection = (stride != 1 || c_in != c_out).then(|| {
            (
                params.add(format!("{name}.proj"), he_uniform(&[c_out, c_in, 1, 1], c_in, rng)),
                BatchNorm::new(&format!("{name}.proj_bn"), c_out, params),
            )
        });
        ResidualBlock {
            conv1: params.add(format!("{name}.conv1"), he_uniform(&[c_out, c_in, 3, 3], c_in * 9, rng)),
            bn1: BatchNorm::new(&format!("{name}.bn1"), c_out, params),
            conv2: params.add(format!("{name}.conv2"), he_uniform(&[c_out, c_out, 3, 3], c_out * 9, rng)),
            bn2: BatchNorm::new(&format!("{name}.bn2"), c_out, params),
            projection,
            stride,
        }
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        [&mut self.bn1, &mut self.bn2]
            .into_iter()
            .chain(self.projection.as_mut().map(|(_, bn)| bn))
    }

    fn norms(&self) -> impl Iterator<Item = &BatchNorm> {
        [&self.bn1, &self.bn2].into_iter().chain(self.projection.as_ref().map(|(_, bn)| bn))
    }
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
pub fn residual_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    block: &ResidualBlock,
    params: &ParamSet,
    mode: BnMode,
    updates: &mut BnUpdates,
) -> Result<Var> {
    let k1 = tape.param(params, block.conv1);
    let h = tape.conv2d(x, k1, Conv2dSpec::new((block.stride, block.stride), (1, 1)))?;
    let h = block.bn1.forward(tape, h, params, mode, updates)?;
    let h = tape.relu(h)?;
    let k2 = tape.param(params, block.conv2);
    let h = tape.conv2d(h, k2, Conv2dSpec::new((1, 1), (1, 1)))?;
    let h = block.bn2.forward(tape, h, params, mode, updates)?;
    let shortcut = match &block.projection {
        Some((k, bn)) => {
            let k = tape.param(params, *k);
            let s = tape.conv2d(x, k, Conv2dSpec::new((block.stride, block.stride), (0, 0)))?;
            bn.forward(tape, s, params, mode, updates)?
        }
        None => x,
    };
    if tape.shape(h) != tape.shape(shortcut) {
        return Err(Error::shape("residual_block_forward", tape.shape(h), tape.shape(shortcut)));
    }
    let sum = tape.add(h, shortcut)?;
    tape.relu(sum)
}

#[derive(Clone, Debug)]
pub struct RgbNet {
    pub config: RgbNetConfig,
    pub params: ParamSet,
    pub stem: ParamId,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

pub struct RgbOutput {
    pub logits: Var,
    pub probs: Var,
}

impl RgbNet {
    pub fn new(config: RgbNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let k = config.stem_kernel;
        let stem = params.add("rgb.stem", he_uniform(&[config.stem_channels, 3, k, k], 3 * k * k, rng));
        let stem_bn = BatchNorm::new("rgb.stem_bn", config.stem_channels, &mut params);
        let mut blocks = Vec::new();
        let mut c_in = config.stem_channels;
        for (s, plan) in config.stages.iter().enumerate() {
            for b in 0..plan.blocks {
                let stride = if b == 0 { RgbNetConfig::stride_of(s) } else { 1 };
                blocks.push(ResidualBlock::new(
                    &format!("rgb.s{s}.b{b}"),
                    c_in,
                    plan.channels,
                    stride,
                    &mut params,
                    rng,
                ));
                c_in = plan.channels;
            }
        }
        let head = Linear::new("rgb.head", c_in, config.num_classes, &mut params, rng);
        Ok(RgbNet {
            config,
            params,
            stem,
            stem_bn,
            blocks,
            head,
        })
    }

    /// `x` is `[N, 3, S, S]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, mode: BnMode, updates: &mut BnUpdates) -> Result<RgbOutput> {
        let s = self.config.input_side;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::shape("rgb_classify", shape, &[0, 3, s, s]));
        }
        let k = tape.param(&self.params, self.stem);
        let pad = self.config.stem_kernel / 2;
        let stride = self.config.stem_stride;
        let mut h = tape.conv2d(x, k, Conv2dSpec::new((stride, stride), (pad, pad)))?;
        h = self.stem_bn.forward(tape, h, &self.params, mode, updates)?;
        h = tape.relu(h)?;
        for block in &self.blocks {
            h = residual_block_forward(tape, h, block, &self.params, mode, updates)?;
        }
        let pooled = tape.mean(h, &[2, 3])?;
        let logits = self.head.forward(tape, pooled, &self.params)?;
        let probs = tape.softmax(logits)?;
        Ok(RgbOutput { logits, probs })
    }

    fn norms(&self) -> impl Iterator<Item = &BatchNorm> {
        std::iter::once(&self.stem_bn).chain(self.blocks.iter().flat_map(|b| b.norms()))
    }

    pub fn absorb(&mut self, updates: &BnUpdates) {
        let RgbNet { stem_bn, blocks, .. } = self;
        absorb_updates(std::iter::once(stem_bn).chain(blocks.iter_mut().flat_map(|b| b.norms_mut())), updates);
    }

    pub fn export(&self) -> BTreeMap<String, Tensor> {
        export_all(&self.params, self.norms())
    }

    pub fn import(config: RgbNetConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut model = RgbNet::new(config, &mut Rng::new(0))?;
        let RgbNet {
            params, stem_bn, blocks, ..
        } = &mut model;
        import_all(
            params,
            std::iter::once(stem_bn).chain(blocks.iter_mut().flat_map(|b| b.norms_mut())),
            tensors,
        )?;
        Ok(model)
    }
}

/// Evaluation-mode logits and probabilities for a `[N, 3, S, S]` batch.
pub fn rgb_classify(x: &Tensor, model: &RgbNet) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::<f32>::inference();
    let input = tape.constant(x.clone());
    let out = model.forward(&mut tape, input, BnMode::Eval, &mut Vec::new())?;
    Ok((tape.value(out.logits).clone(), tape.value(out.probs).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        assert_eq!(RgbNetConfig::desk(4).final_side(), Some(16));
        assert!(RgbNetConfig::desk(4).validate().is_ok());
        assert!(RgbNetConfig::resnet18(60).validate().is_ok());
        assert!(RgbNetConfig::compact(8, [4, 4, 4], 2).validate().is_err());
    }

    #[test]
    fn zero_convs_reduce_block_to_skip() {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(3);
        let block = ResidualBlock::new("b", 2, 2, 1, &mut params, &mut rng);
        params.get_mut(block.conv1).value.fill(0.0);
        params.get_mut(block.conv2).value.fill(0.0);
        let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let y = residual_block_forward(&mut tape, xv, &block, &params, BnMode::Train, &mut Vec::new()).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn probabilities_sum_to_one_and_wrong_side_rejected() {
        let mut rng = Rng::new(4);
        let model = RgbNet::new(RgbNetConfig::compact(16, [4, 4, 8], 3), &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let (_, p) = rgb_classify(&x, &model).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let bad = Tensor::zeros(&[1, 3, 12, 12]);
        assert!(matches!(rgb_classify(&bad, &model), Err(Error::Shape { .. })));
    }
}
