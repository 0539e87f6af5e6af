use super::graph::Op;
use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Graph<T> {
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|x| x.as_f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s: f64 = v.data().iter().map(|x| x.as_f64()).sum();
        let m = s / v.numel().max(1) as f64;
        self.push(Tensor::scalar(T::of(m)), Op::Mean { input }, &[input])
    }

    /// Scalar node `value` whose gradient with respect to `input` is `local_grad`.
    ///
    /// Used by fused loss kernels that compute value and gradient in one pass.
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Vec<T>) -> Result<Var> {
        let n = self.value(input).numel();
        if local_grad.len() != n {
            return Err(Error::shape(
                "scalar_fn",
                "local gradient",
                format!("{} entries for an input of {n}", local_grad.len()),
            ));
        }
        Ok(self.push(
            Tensor::scalar(T::of(value)),
            Op::ScalarFn { input, local_grad },
            &[input],
        ))
    }
}
