use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::Scalar;

/// Mean over frames of the cross entropy between each target distribution
/// row and the softmax of the logits.
pub fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, target: Tensor<S>) -> Result<Var> {
    g.cross_entropy(logits, target)
}

/// Mean absolute error. The subgradient at exact ties is 0.
pub fn mae_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("mae_loss", format!("{:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean squared error over all elements.
pub fn mse_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim("mse_loss", format!("{:?} vs {:?}", g.shape(pred), g.shape(target))));
    }
    let d = g.sub(pred, target)?;
    let s = g.square(d);
    Ok(g.mean(s))
}

/// `[T, K]` one-hot rows for class ids.
pub fn one_hot<S: Scalar>(ids: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[ids.len(), classes]);
    for (r, &c) in ids.iter().enumerate() {
        if c >= classes {
            return Err(Error::Validation(format!("class id {c} outside 0..{classes}")));
        }
        t.set(r, c, S::one());
    }
    Ok(t)
}

/// `[T, K]` rows of the uniform distribution.
pub fn uniform_rows<S: Scalar>(frames: usize, classes: usize) -> Tensor<S> {
    Tensor::full(&[frames, classes], S::one() / S::lit(classes as f64))
}
