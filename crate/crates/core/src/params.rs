//! Named-tensor traversal shared by serialization, optimizers and gradient
//! checks. Parameter structs and their gradient mirrors have the same type,
//! so `visit` on both yields tensors in matching order.

use crate::tensor::{Conv2dParams, Scalar, Tensor};

pub trait NamedTensors<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut out);
        out
    }

    fn numel(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> NamedTensors<T> for Conv2dParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
