//! Model library. Every network keeps its parameters in one flat vector so the optimizer,
//! gradient checks and serialization treat all kinds the same way.

mod gru;
mod linear;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub use gru::GruModel;
pub use linear::LinearModel;

/// One example in model space (already imputed and normalized).
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, F> {
    pub statics: &'a [F],
    /// `T x C` row-major.
    pub temporal: &'a [F],
    /// `T x C` row-major, 0 or 1.
    pub mask: &'a [F],
}

/// A named, shaped slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Network<F: Scalar> {
    fn params(&self) -> &[F];

    fn params_mut(&mut self) -> &mut [F];

    /// Layout of [`Network::params`] for serialization.
    fn segments(&self) -> Vec<Segment>;

    /// Inference-mode logit.
    fn logit(&self, x: &Sample<'_, F>) -> F;

    /// Adds the gradient of the binary cross-entropy for one example to `grad` and returns
    /// that example's loss. With `dropout` the forward pass samples dropout masks.
    fn accumulate_grad(
        &self,
        x: &Sample<'_, F>,
        target: F,
        grad: &mut [F],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> F;

    /// Adds the regularization gradient and returns the penalty.
    fn regularize(&self, _grad: &mut [F]) -> F {
        F::zero()
    }

    fn probability(&self, x: &Sample<'_, F>) -> F {
        self.logit(x).sigmoid()
    }
}

/// Binary cross-entropy of a logit and its derivative with respect to the logit.
pub fn bce_with_logit<F: Scalar>(logit: F, target: F) -> (F, F) {
    let loss = logit.softplus() - target * logit;
    (loss, logit.sigmoid() - target)
}

/// Mean loss and gradient over a batch, including regularization.
pub fn batch_loss_and_grad<F: Scalar, N: Network<F> + ?Sized>(
    net: &N,
    batch: &[(Sample<'_, F>, F)],
    grad: &mut [F],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> F {
    grad.iter_mut().for_each(|g| *g = F::zero());
    let mut loss = F::zero();
    for (x, y) in batch {
        loss += net.accumulate_grad(x, *y, grad, dropout.as_deref_mut());
    }
    let scale = F::one() / F::lit(batch.len().max(1) as f64);
    grad.iter_mut().for_each(|g| *g *= scale);
    loss * scale + net.regularize(grad)
}

/// Mean loss over a batch without dropout, matching [`batch_loss_and_grad`].
pub fn batch_loss<F: Scalar, N: Network<F> + ?Sized>(net: &N, batch: &[(Sample<'_, F>, F)]) -> F {
    let mut scratch = vec![F::zero(); net.params().len()];
    let mut loss = F::zero();
    for (x, y) in batch {
        loss += bce_with_logit(net.logit(x), *y).0;
    }
    let penalty = net.regularize(&mut scratch);
    loss / F::lit(batch.len().max(1) as f64) + penalty
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_definition() {
        for (z, y) in [(0.3f64, 1.0), (-2.0, 0.0), (4.0, 0.0)] {
            let p = 1.0 / (1.0 + (-z).exp());
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            let (loss, d) = bce_with_logit(z, y);
            assert!((loss - direct).abs() < 1e-12);
            assert!((d - (p - y)).abs() < 1e-12);
        }
    }
}
