use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Per-channel running mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchStats {
    pub fn identity(channels: usize) -> Self {
        BatchStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn absorb(&mut self, batch: &BatchStats) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over every axis except 1 of `[N, C, ...]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: &BatchStats,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("batch_norm", xv.shape(), &[0, 0]));
        }
        let c = xv.shape()[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", xv.shape(), self.value(gamma).shape()));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm", xv.shape(), &[running.mean.len()]));
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let n = xv.shape()[0];
        let count = n * inner;

        let (mean, var) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::usage(format!(
                        "batch_norm in training mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut sum = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for (i, chunk) in xv.data().chunks(inner).enumerate() {
                    let ci = i % c;
                    for &v in chunk {
                        let v = v.as_f64();
                        sum[ci] += v;
                        sq[ci] += v * v;
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
                let var: Vec<f64> = sq
                    .iter()
                    .zip(&mean)
                    .map(|(q, m)| (q / count as f64 - m * m).max(0.0))
                    .collect();
                (mean, var)
            }
            BnMode::Eval => (
                running.mean.iter().map(|&v| v as f64).collect(),
                running.var.iter().map(|&v| v as f64).collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();

        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let ci = i % c;
            let (m, s, gi, bi) = (mean_t[ci], inv_std[ci], g[ci], b[ci]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s * gi + bi);
        }
        let out = Tensor::new(xv.shape(), out)?;
        let stats = match mode {
            BnMode::Train => Some(BatchStats {
                mean: mean.iter().map(|&v| v as f32).collect(),
                var: var.iter().map(|&v| v as f32).collect(),
            }),
            BnMode::Eval => None,
        };
        let (mean_f, inv_std_f): (Vec<f64>, Vec<f64>) =
            (mean.clone(), var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect());
        // Reductions and the centred difference run in f64: the three terms
        // of the input gradient nearly cancel for small batches.
        let var_out = self.record("batch_norm", out, &[x, gamma, beta], move |gy, xs, _, needs| {
            let (xd, gd) = (xs[0].data(), xs[1].data());
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            for (i, (xc, gc)) in xd.chunks(inner).zip(gy.data().chunks(inner)).enumerate() {
                let ci = i % c;
                for (&xv, &gv) in xc.iter().zip(gc) {
                    let xhat = (xv.as_f64() - mean_f[ci]) * inv_std_f[ci];
                    dgamma[ci] += gv.as_f64() * xhat;
                    dbeta[ci] += gv.as_f64();
                }
            }
            let dx = if needs[0] {
                let mut dx = vec![T::zero(); xd.len()];
                let m = count as f64;
                for (i, ((xc, gc), dc)) in xd
                    .chunks(inner)
                    .zip(gy.data().chunks(inner))
                    .zip(dx.chunks_mut(inner))
                    .enumerate()
                {
                    let ci = i % c;
                    let s = inv_std_f[ci];
                    let gamma = gd[ci].as_f64();
                    match mode {
                        BnMode::Train => {
                            let k = gamma * s / m;
                            for ((&xv, &gv), d) in xc.iter().zip(gc).zip(dc.iter_mut()) {
                                let xhat = (xv.as_f64() - mean_f[ci]) * s;
                                *d = T::of(k * (m * gv.as_f64() - dbeta[ci] - xhat * dgamma[ci]));
                            }
                        }
                        BnMode::Eval => {
                            for (&gv, d) in gc.iter().zip(dc.iter_mut()) {
                                *d = T::of(gv.as_f64() * gamma * s);
                            }
                        }
                    }
                }
                Some(Tensor::new(xs[0].shape(), dx)?)
            } else {
                None
            };
            let dgamma: Vec<T> = dgamma.into_iter().map(T::of).collect();
            let dbeta: Vec<T> = dbeta.into_iter().map(T::of).collect();
            Ok(vec![
                dx,
                Some(Tensor::new(&[c], dgamma)?),
                Some(Tensor::new(&[c], dbeta)?),
            ])
        })?;
        Ok((var_out, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor<f64>, gamma: f64, beta: f64, mode: BnMode, running: &BatchStats) -> Tensor<f64> {
        let c = x.shape()[1];
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x, false);
        let g = tape.leaf(Tensor::full(&[c], gamma), false);
        let b = tape.leaf(Tensor::full(&[c], beta), false);
        let (y, _) = tape.batch_norm(xv, g, b, mode, running).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = crate::rng::Rng::new(3);
        let x = Tensor::<f64>::normal(&[6, 2, 5], 3.0, &mut rng).map(|v| v + 1.5);
        let y = run(x, 1.0, 0.0, BnMode::Train, &BatchStats::identity(2));
        for ci in 0..2 {
            let vals: Vec<f64> = (0..6)
                .flat_map(|n| (0..5).map(move |k| (n, k)))
                .map(|(n, k)| y.at(&[n, ci, k]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = crate::rng::Rng::new(4);
        let x = Tensor::<f64>::normal(&[4, 3, 2], 1.0, &mut rng);
        let y = run(x, 0.0, 0.75, BnMode::Train, &BatchStats::identity(3));
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let running = BatchStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let x = Tensor::<f64>::from_f64(&[3, 1], &[1.0, 3.0, -1.0]).unwrap();
        let y = run(x, 2.0, 0.5, BnMode::Eval, &running);
        let s = (4.0f32 as f64 + BN_EPS).sqrt();
        let expect = [0.5, 2.0 * 2.0 / s + 0.5, 2.0 * -2.0 / s + 0.5];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_value_per_channel_rejected_in_training() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 1]), false);
        let g = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let r = tape.batch_norm(x, g, b, BnMode::Train, &BatchStats::identity(2));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn running_stats_momentum() {
        let mut r = BatchStats::identity(1);
        r.absorb(&BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        });
        assert!((r.mean[0] - 0.1).abs() < 1e-7);
        assert!((r.var[0] - 1.2).abs() < 1e-6);
    }
}
