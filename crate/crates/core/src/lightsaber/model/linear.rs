use rand_chacha::ChaCha8Rng;

use super::{bce_with_logit, Network, Sample, Segment};
use crate::scalar::Scalar;

/// L2-regularized logistic regression over `[static, flattened temporal]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<F> {
    n_inputs: usize,
    l2: F,
    /// `n_inputs` weights followed by the bias.
    params: Vec<F>,
}

impl<F: Scalar> LinearModel<F> {
    pub fn zeros(n_inputs: usize, l2: F) -> Self {
        Self {
            n_inputs,
            l2,
            params: vec![F::zero(); n_inputs + 1],
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn weights(&self) -> &[F] {
        &self.params[..self.n_inputs]
    }

    pub fn bias(&self) -> F {
        self.params[self.n_inputs]
    }

    fn inputs<'a>(x: &'a Sample<'a, F>) -> impl Iterator<Item = &'a F> + 'a {
        x.statics.iter().chain(x.temporal.iter())
    }
}

impl<F: Scalar> Network<F> for LinearModel<F> {
    fn params(&self) -> &[F] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn segments(&self) -> Vec<Segment> {
        vec![
            Segment {
                name: "weights".into(),
                shape: vec![self.n_inputs],
                offset: 0,
            },
            Segment {
                name: "bias".into(),
                shape: vec![1],
                offset: self.n_inputs,
            },
        ]
    }

    fn logit(&self, x: &Sample<'_, F>) -> F {
        debug_assert_eq!(x.statics.len() + x.temporal.len(), self.n_inputs);
        Self::inputs(x)
            .zip(self.weights())
            .fold(self.bias(), |acc, (v, w)| acc + *v * *w)
    }

    fn accumulate_grad(
        &self,
        x: &Sample<'_, F>,
        target: F,
        grad: &mut [F],
        _dropout: Option<&mut ChaCha8Rng>,
    ) -> F {
        let (loss, d) = bce_with_logit(self.logit(x), target);
        for (g, v) in grad.iter_mut().zip(Self::inputs(x)) {
            *g += d * *v;
        }
        grad[self.n_inputs] += d;
        loss
    }

    fn regularize(&self, grad: &mut [F]) -> F {
        let mut penalty = F::zero();
        for (g, w) in grad.iter_mut().zip(self.weights()) {
            *g += self.l2 * *w;
            penalty += *w * *w;
        }
        penalty * self.l2 * F::lit(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_predicts_half() {
        let m = LinearModel::<f64>::zeros(3, 0.0);
        let x = Sample {
            statics: &[1.0],
            temporal: &[2.0, -3.0],
            mask: &[1.0, 1.0],
        };
        assert_eq!(m.probability(&x), 0.5);
    }
}
