//! Layer building blocks shared by the two branches.

use std::collections::BTreeMap;

use crate::autodiff::{BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Uniform in `+-sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Batch statistics gathered during one training forward pass, keyed by the
/// batch-norm layer's name.
pub type BnUpdates = Vec<(String, BatchStats)>;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BatchStats,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize, params: &mut ParamSet) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running: BatchStats::identity(channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        params: &ParamSet,
        mode: BnMode,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        let (y, stats) = tape.batch_norm(x, g, b, mode, &self.running)?;
        if let Some(stats) = stats {
            updates.push((self.name.clone(), stats));
        }
        Ok(y)
    }

    pub fn export(&self, out: &mut BTreeMap<String, Tensor>) {
        let c = self.running.mean.len();
        out.insert(
            format!("{}.running_mean", self.name),
            Tensor::new(&[c], self.running.mean.clone()).expect("channel count"),
        );
        out.insert(
            format!("{}.running_var", self.name),
            Tensor::new(&[c], self.running.var.clone()).expect("channel count"),
        );
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let c = self.running.mean.len();
        for (suffix, slot) in [("running_mean", &mut self.running.mean), ("running_var", &mut self.running.var)] {
            let key = format!("{}.{suffix}", self.name);
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::data(format!("checkpoint lacks tensor '{key}'")))?;
            if t.shape() != [c] {
                return Err(Error::shape("BatchNorm::import", &[c], t.shape()));
            }
            *slot = t.data().to_vec();
        }
        Ok(())
    }
}

/// Fold batch statistics into the matching layers' running statistics.
pub fn absorb_updates<'a>(layers: impl IntoIterator<Item = &'a mut BatchNorm>, updates: &BnUpdates) {
    for layer in layers {
        for (name, stats) in updates {
            if *name == layer.name {
                layer.running.absorb(stats);
            }
        }
    }
}

/// Fully connected `[N, in] -> [N, out]` with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, params: &mut ParamSet, rng: &mut Rng) -> Self {
        Linear {
            weight: params.add(format!("{name}.w"), he_uniform(&[inputs, outputs], inputs, rng)),
            bias: params.add(format!("{name}.b"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, params: &ParamSet) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(x, w)?;
        let bias = tape.tile_rows(b, rows)?;
        tape.add(y, bias)
    }
}

/// Parameters and running statistics of a model as one name-keyed map.
pub fn export_all<'a>(params: &ParamSet, norms: impl IntoIterator<Item = &'a BatchNorm>) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect();
    for bn in norms {
        bn.export(&mut out);
    }
    out
}

/// Inverse of [`export_all`].
pub fn import_all<'a>(
    params: &mut ParamSet,
    norms: impl IntoIterator<Item = &'a mut BatchNorm>,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    params.load_values(|name| tensors.get(name))?;
    for bn in norms {
        bn.import(tensors)?;
    }
    Ok(())
}
