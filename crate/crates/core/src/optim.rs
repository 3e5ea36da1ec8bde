use crate::error::{Error, Result};
use crate::param::ParamSet;

/// One SGD step with classical momentum, then zero the gradients.
///
/// `buffer <- momentum * buffer + grad; value <- value - lr * buffer`.
pub fn sgd_step(params: &mut ParamSet, lr: f32, momentum: f32) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::usage(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    for (name, p) in params.iter_mut() {
        let value = p.value.data_mut();
        let buf = p.momentum.data_mut();
        let grad = p.grad.data_mut();
        for ((v, b), g) in value.iter_mut().zip(buf.iter_mut()).zip(grad.iter_mut()) {
            *b = momentum * *b + *g;
            *v -= lr * *b;
            *g = 0.0;
        }
        if !p.value.all_finite() {
            return Err(Error::Numeric(format!("sgd update of {name}")));
        }
    }
    Ok(())
}
