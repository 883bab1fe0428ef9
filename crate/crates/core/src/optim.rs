//! AdaGrad: `acc += g²; θ -= lr · g / (sqrt(acc) + eps)` per coordinate.

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaGrad {
    pub lr: f64,
    pub eps: f64,
    accumulators: Vec<Tensor>,
}

impl AdaGrad {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            eps,
            accumulators: Vec::new(),
        }
    }

    /// Running sums of squared gradients, one per parameter in step order.
    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    pub fn set_accumulators(&mut self, acc: Vec<Tensor>) {
        self.accumulators = acc;
    }

    /// Applies one update from each parameter's `grad`. Nothing is modified
    /// if any gradient is non-finite; the error names the offending parameter.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Parameter>,
        step: u64,
    ) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite {
                param: bad.name().to_string(),
                step,
            });
        }
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.accumulators.len() != params.len()
            || self
                .accumulators
                .iter()
                .zip(&params)
                .any(|(a, p)| a.shape() != p.value.shape())
        {
            return Err(Error::Usage(
                "AdaGrad state does not match the parameter list".into(),
            ));
        }
        for (p, acc) in params.iter_mut().zip(&mut self.accumulators) {
            let Parameter { value, grad, .. } = &mut **p;
            for ((v, &g), a) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(acc.data_mut())
            {
                if g == 0.0 {
                    continue;
                }
                *a += g * g;
                *v -= self.lr * g / (a.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new("w", Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn first_and_second_steps() {
        let mut p = scalar_param(0.0);
        let mut opt = AdaGrad::new(0.1, 0.0);
        p.grad = Tensor::full(&[1], 1.0);
        opt.step([&mut p], 1).unwrap();
        assert!((p.value.item() + 0.1).abs() < 1e-15);
        opt.step([&mut p], 2).unwrap();
        assert!((p.value.item() + 0.1 + 0.1 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(opt.accumulators()[0].item(), 2.0);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = scalar_param(1.5);
        let mut opt = AdaGrad::new(0.1, 0.0);
        opt.step([&mut p], 1).unwrap();
        assert_eq!(p.value.item(), 1.5);
        assert_eq!(opt.accumulators()[0].item(), 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut a = scalar_param(1.0);
        let mut b = scalar_param(2.0);
        b.set_name("bad");
        a.grad = Tensor::full(&[1], 1.0);
        b.grad = Tensor::full(&[1], f64::NAN);
        let mut opt = AdaGrad::new(0.1, 1e-8);
        match opt.step([&mut a, &mut b], 17) {
            Err(Error::NonFinite { param, step }) => {
                assert_eq!(param, "bad");
                assert_eq!(step, 17);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(a.value.item(), 1.0);
    }

    #[test]
    fn effective_step_is_bounded_and_shrinks() {
        let mut p = scalar_param(0.0);
        let mut opt = AdaGrad::new(0.05, 1e-8);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let before = p.value.item();
            p.grad = Tensor::full(&[1], 3.0);
            opt.step([&mut p], k).unwrap();
            let delta = (p.value.item() - before).abs();
            assert!(delta <= 0.05 + 1e-15);
            assert!(delta <= last);
            last = delta;
        }
    }
}
