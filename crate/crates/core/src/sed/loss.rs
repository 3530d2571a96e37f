//! Binary cross-entropy.

use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BCE_CLAMP: f64 = 1e-7;

fn check<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.numel() == 0 {
        return Err(Error::shape("bce_loss", "empty input"));
    }
    Ok(())
}

/// Mean of `−t ln p − (1 − t) ln(1 − p)` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let t = t.as_f64();
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

struct BceOp;

impl<T: Scalar> Backward<T> for BceOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (pred, target) = (inputs[0], inputs[1]);
        let scale = grad.data()[0].as_f64() / pred.numel() as f64;
        let dp = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let (p, t) = (p.as_f64(), t.as_f64());
                if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                    T::zero()
                } else {
                    T::of(scale * ((1.0 - t) / (1.0 - p) - t / p))
                }
            })
            .collect();
        let dt = pred
            .data()
            .iter()
            .map(|&p| {
                let p = p.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                T::of(scale * ((1.0 - p).ln() - p.ln()))
            })
            .collect();
        Ok(vec![
            Some(Tensor::new(pred.shape().to_vec(), dp)?),
            Some(Tensor::new(pred.shape().to_vec(), dt)?),
        ])
    }
}

impl<T: Scalar> Tape<T> {
    /// Scalar `[1]` BCE between `pred` and `target`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = bce_loss(self.value(pred), self.value(target))?;
        self.push(Tensor::scalar(T::of(loss)), vec![pred, target], BceOp)
    }
}
