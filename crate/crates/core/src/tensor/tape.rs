use smallvec::SmallVec;

use super::op::{backward, forward, Op};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operator application. Inputs always refer to earlier entries.
#[derive(Debug, Clone)]
pub struct Entry<T> {
    pub op: Op,
    pub inputs: SmallVec<[Var; 3]>,
    pub value: Tensor<T>,
}

/// Ordered record of a forward computation. Values are computed eagerly as
/// operators are applied; [`Tape::gradients`] walks the record in reverse.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    entries: Vec<Entry<T>>,
}

/// Gradients of a scalar output with respect to requested leaves.
#[derive(Debug, Clone)]
pub struct GradientSet<T> {
    grads: Vec<(Var, Tensor<T>)>,
    unreachable: Vec<Var>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(v, _)| *v == var).map(|(_, g)| g)
    }

    /// Leaves the output does not depend on. Their gradient is reported as zero.
    pub fn unreachable(&self) -> &[Var] {
        &self.unreachable
    }

    pub fn is_unreachable(&self, var: Var) -> bool {
        self.unreachable.contains(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }

    pub fn into_vec(self) -> Vec<(Var, Tensor<T>)> {
        self.grads
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.entries.push(Entry { op: Op::Leaf, inputs: SmallVec::new(), value });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.entries[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.entries[var.0].value.shape()
    }

    /// Applies `op` to recorded inputs, evaluating it immediately.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if matches!(op, Op::Leaf) {
            return Err(Error::InvalidArgument("use Tape::leaf to record leaves".into()));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.entries.len()) {
            return Err(Error::InvalidArgument(format!("unknown variable {bad:?}")));
        }
        let value = {
            let args: SmallVec<[&Tensor<T>; 3]> = inputs.iter().map(|v| &self.entries[v.0].value).collect();
            forward(&op, &args)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        self.entries.push(Entry { op, inputs: inputs.iter().copied().collect(), value });
        Ok(Var(self.entries.len() - 1))
    }

    /// Re-evaluates every non-leaf entry after substituting new leaf values.
    pub fn replay(&mut self, leaf_values: &[(Var, Tensor<T>)]) -> Result<()> {
        for (var, value) in leaf_values {
            let entry = self
                .entries
                .get_mut(var.0)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown variable {var:?}")))?;
            if !matches!(entry.op, Op::Leaf) {
                return Err(Error::InvalidArgument(format!("{var:?} is not a leaf")));
            }
            if entry.value.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "replay: leaf {var:?} has shape {:?}, replacement has {:?}",
                    entry.value.shape(),
                    value.shape()
                )));
            }
            entry.value = value.clone();
        }
        for k in 0..self.entries.len() {
            if matches!(self.entries[k].op, Op::Leaf) {
                continue;
            }
            let value = {
                let e = &self.entries[k];
                let args: SmallVec<[&Tensor<T>; 3]> = e.inputs.iter().map(|v| &self.entries[v.0].value).collect();
                forward(&e.op, &args)?
            };
            if !value.is_finite() {
                return Err(Error::NonFinite { op: self.entries[k].op.name().to_string() });
            }
            self.entries[k].value = value;
        }
        Ok(())
    }

    /// Reverse accumulation of d(output)/d(leaf) for every requested leaf.
    pub fn gradients(&self, output: Var, leaves: &[Var]) -> Result<GradientSet<T>> {
        let out_entry = self
            .entries
            .get(output.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variable {output:?}")))?;
        if out_entry.value.len() != 1 || !out_entry.value.shape().is_empty() {
            return Err(Error::NonScalarOutput(out_entry.value.shape().to_vec()));
        }
        for (i, leaf) in leaves.iter().enumerate() {
            if leaf.0 >= self.entries.len() {
                return Err(Error::InvalidArgument(format!("unknown variable {leaf:?}")));
            }
            if leaves[..i].contains(leaf) {
                return Err(Error::InvalidArgument(format!("leaf {leaf:?} requested twice")));
            }
        }

        // An entry needs a gradient when it depends on some requested leaf.
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        let mut requested = vec![false; n];
        for leaf in leaves {
            if leaf.0 < n {
                needs[leaf.0] = true;
                requested[leaf.0] = true;
            }
        }
        for k in 0..n {
            if !needs[k] && self.entries[k].inputs.iter().any(|v| needs[v.0]) {
                needs[k] = true;
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for k in (0..n).rev() {
            if !needs[k] {
                continue;
            }
            let entry = &self.entries[k];
            if matches!(entry.op, Op::Leaf) {
                continue;
            }
            let g = if requested[k] { grads[k].clone() } else { grads[k].take() };
            let Some(g) = g else { continue };
            let args: SmallVec<[&Tensor<T>; 3]> = entry.inputs.iter().map(|v| &self.entries[v.0].value).collect();
            let input_needs: SmallVec<[bool; 3]> = entry.inputs.iter().map(|v| needs[v.0]).collect();
            let input_grads = backward(&entry.op, &args, &entry.value, &g, &input_needs);
            for (var, ig) in entry.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !ig.is_finite() {
                    return Err(Error::NonFinite { op: format!("{} (backward)", entry.op.name()) });
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut out = Vec::with_capacity(leaves.len());
        let mut unreachable = Vec::new();
        for leaf in leaves {
            let grad = if leaf.0 < n { grads[leaf.0].take() } else { None };
            match grad {
                Some(g) => out.push((*leaf, g)),
                None => {
                    unreachable.push(*leaf);
                    out.push((*leaf, Tensor::zeros(self.entries[leaf.0].value.shape())));
                }
            }
        }
        Ok(GradientSet { grads: out, unreachable })
    }

    // ---- operator shorthands ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::BatchedMatMul, &[a, b])
    }

    pub fn channel_map(&mut self, weight: Var, x: Var) -> Result<Var> {
        self.apply(Op::ChannelMap, &[weight, x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn rsqrt(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::Rsqrt { eps }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Sum { axes: axes.to_vec() }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.apply(Op::Sum { axes }, &[x])
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Mean { axes: axes.to_vec() }, &[x])
    }

    pub fn expand(&mut self, x: Var, axis: usize, size: usize) -> Result<Var> {
        self.apply(Op::Expand { axis, size }, &[x])
    }

    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var, axis: usize) -> Result<Var> {
        self.apply(Op::ChannelAffine { axis }, &[x, scale, shift])
    }

    pub fn temporal_conv(&mut self, x: Var, weight: Var, stride: usize) -> Result<Var> {
        self.apply(Op::TemporalConv { stride }, &[x, weight])
    }

    pub fn pair_average(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::PairAverage { axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute { perm: perm.to_vec() }, &[x])
    }
}
