use ndarray::ArrayD;

use crate::model::{Classifier, Gradients};
use crate::Real;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<R: Real> {
    momentum: R,
    weight_decay: R,
    velocity: Vec<ArrayD<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(model: &Classifier<R>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: R::lit(momentum),
            weight_decay: R::lit(weight_decay),
            velocity: model.zero_grads().tensors,
        }
    }

    pub fn step(&mut self, model: &mut Classifier<R>, grads: &Gradients<R>, lr: f64) {
        let lr = R::lit(lr);
        for ((mut w, g), v) in model
            .parameters_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.velocity)
        {
            ndarray::Zip::from(&mut w).and(g).and(v).for_each(|w, &g, v| {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w = *w - lr * *v;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneSpec;

    #[test]
    fn matches_hand_rolled_update() {
        let mut model = Classifier::<f64>::new(BackboneSpec::PointwiseOnly { widths: vec![2] }, 2, 0).unwrap();
        let w0 = model.head()[[1, 0]];
        let mut grads = model.zero_grads();
        let last = grads.tensors.len() - 1;
        grads.tensors[last][[1, 0]] = 0.5;
        let mut opt = Sgd::new(&model, 0.9, 0.1);
        opt.step(&mut model, &grads, 0.2);
        let v1 = 0.5 + 0.1 * w0;
        let w1 = w0 - 0.2 * v1;
        assert!((model.head()[[1, 0]] - w1).abs() < 1e-15);
        opt.step(&mut model, &grads, 0.2);
        let v2 = 0.9 * v1 + 0.5 + 0.1 * w1;
        assert!((model.head()[[1, 0]] - (w1 - 0.2 * v2)).abs() < 1e-15);
    }
}
