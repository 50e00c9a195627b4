//! Reverse-mode autodiff over a per-forward tape.
//!
//! Parameters live outside the tape in a [`ParamStore`] and are referenced by
//! id, so a forward pass only records activations. [`Tape::backward`] walks
//! the recorded ops in reverse and returns one gradient tensor per parameter.

pub mod kernels;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub type VarId = usize;
pub type ParamId = usize;

/// Named trainable tensors. Names are canonical checkpoint paths, e.g.
/// `encoder.res1.conv1.weight`.
#[derive(Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

enum Op<T> {
    Input,
    Conv2d { x: VarId, w: ParamId, b: ParamId, stride: usize, pad: usize },
    Relu { x: VarId },
    MaxPool2 { x: VarId, argmax: Vec<u32> },
    PixelShuffle2 { x: VarId },
    Add { a: VarId, b: VarId },
    ConcatC { a: VarId, b: VarId },
    L1Mean { x: VarId, target: Tensor<T> },
    MseMean { x: VarId, target: Tensor<T> },
    /// Weighted sum of scalar vars.
    Combine { terms: Vec<(VarId, T)> },
}

pub struct Tape<T> {
    ops: Vec<Op<T>>,
    values: Vec<Tensor<T>>,
}

/// Per-parameter gradients, aligned with the originating [`ParamStore`].
pub struct Gradients<T> {
    pub by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients { by_param: vec![None; store.len()] }
    }

    /// Accumulate `other` into `self`.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (slot, g) in self.by_param.iter_mut().zip(other.by_param) {
            if let Some(g) = g {
                match slot {
                    Some(t) => t.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale(factor);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> VarId {
        self.ops.push(op);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn input(&mut self, value: Tensor<T>) -> VarId {
        self.push(Op::Input, value)
    }

    pub fn conv2d(
        &mut self,
        params: &ParamStore<T>,
        x: VarId,
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let y = kernels::conv2d_forward(&self.values[x], params.value(w), params.value(b), stride, pad);
        self.push(Op::Conv2d { x, w, b, stride, pad }, y)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let y = kernels::relu_forward(&self.values[x]);
        self.push(Op::Relu { x }, y)
    }

    pub fn maxpool2(&mut self, x: VarId) -> VarId {
        let (y, argmax) = kernels::maxpool2_forward(&self.values[x]);
        self.push(Op::MaxPool2 { x, argmax }, y)
    }

    pub fn pixel_shuffle2(&mut self, x: VarId) -> VarId {
        let y = kernels::pixel_shuffle2_forward(&self.values[x]);
        self.push(Op::PixelShuffle2 { x }, y)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.values[a].shape(), self.values[b].shape(), "add shape mismatch");
        let mut y = self.values[a].clone();
        y.add_assign(&self.values[b]);
        self.push(Op::Add { a, b }, y)
    }

    /// Channel concatenation of two CHW tensors with equal spatial extents.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.values[a], &self.values[b]);
        assert_eq!(ta.shape()[1..], tb.shape()[1..], "concat spatial mismatch");
        let shape = [ta.shape()[0] + tb.shape()[0], ta.shape()[1], ta.shape()[2]];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        self.push(Op::ConcatC { a, b }, Tensor::from_vec(&shape, data))
    }

    /// Mean absolute difference against a constant target. Scalar output.
    pub fn l1_mean(&mut self, x: VarId, target: Tensor<T>) -> VarId {
        assert_eq!(self.values[x].shape(), target.shape(), "l1 target shape mismatch");
        let n = T::from_usize(target.len()).unwrap();
        let sum = self.values[x]
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t).abs());
        self.push(Op::L1Mean { x, target }, Tensor::scalar(sum / n))
    }

    /// Mean squared difference against a constant target. Scalar output.
    pub fn mse_mean(&mut self, x: VarId, target: Tensor<T>) -> VarId {
        assert_eq!(self.values[x].shape(), target.shape(), "mse target shape mismatch");
        let n = T::from_usize(target.len()).unwrap();
        let sum = self.values[x]
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        self.push(Op::MseMean { x, target }, Tensor::scalar(sum / n))
    }

    /// Weighted sum of scalar vars: `sum_i w_i * v_i`.
    pub fn combine(&mut self, terms: Vec<(VarId, T)>) -> VarId {
        let total = terms
            .iter()
            .fold(T::zero(), |acc, &(v, w)| acc + self.values[v].item() * w);
        self.push(Op::Combine { terms }, Tensor::scalar(total))
    }

    /// Reverse pass from the scalar var `loss`. Returns per-parameter grads.
    pub fn backward(&self, params: &ParamStore<T>, loss: VarId) -> Result<Gradients<T>> {
        if self.values[loss].len() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        let mut vgrads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        vgrads[loss] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::zeros_like(params);

        for id in (0..=loss).rev() {
            let Some(g) = vgrads[id].take() else { continue };
            match &self.ops[id] {
                Op::Input => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let dx = kernels::conv2d_backward_input(
                        &g,
                        params.value(*w),
                        self.values[*x].shape(),
                        *stride,
                        *pad,
                    );
                    let (dw, db) = kernels::conv2d_backward_params(
                        &g,
                        &self.values[*x],
                        params.value(*w).shape(),
                        *stride,
                        *pad,
                    );
                    accumulate(&mut vgrads[*x], dx);
                    accumulate(&mut out.by_param[*w], dw);
                    accumulate(&mut out.by_param[*b], db);
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_backward(&g, &self.values[id]);
                    accumulate(&mut vgrads[*x], dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = kernels::maxpool2_backward(&g, argmax, self.values[*x].shape());
                    accumulate(&mut vgrads[*x], dx);
                }
                Op::PixelShuffle2 { x } => {
                    accumulate(&mut vgrads[*x], kernels::pixel_shuffle2_backward(&g));
                }
                Op::Add { a, b } => {
                    accumulate(&mut vgrads[*a], g.clone());
                    accumulate(&mut vgrads[*b], g);
                }
                Op::ConcatC { a, b } => {
                    let na = self.values[*a].len();
                    let ga = Tensor::from_vec(self.values[*a].shape(), g.data()[..na].to_vec());
                    let gb = Tensor::from_vec(self.values[*b].shape(), g.data()[na..].to_vec());
                    accumulate(&mut vgrads[*a], ga);
                    accumulate(&mut vgrads[*b], gb);
                }
                Op::L1Mean { x, target } => {
                    let scale = g.item() / T::from_usize(target.len()).unwrap();
                    let data = self.values[*x]
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut vgrads[*x], Tensor::from_vec(target.shape(), data));
                }
                Op::MseMean { x, target } => {
                    let scale = g.item() * T::from_f64(2.0) / T::from_usize(target.len()).unwrap();
                    let data = self.values[*x]
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    accumulate(&mut vgrads[*x], Tensor::from_vec(target.shape(), data));
                }
                Op::Combine { terms } => {
                    for &(v, w) in terms {
                        accumulate(&mut vgrads[v], Tensor::scalar(g.item() * w));
                    }
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A tiny conv -> relu -> pool -> shuffle -> losses composite, checked
    /// against central finite differences through the whole tape.
    #[test]
    fn composite_graph_gradients_match_finite_differences() {
        let mut params = ParamStore::<f64>::new();
        let mut seed = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let w = Tensor::from_vec(&[4, 2, 3, 3], (0..72).map(|_| next()).collect());
        let b = Tensor::from_vec(&[4], (0..4).map(|_| next()).collect());
        let wid = params.add("conv.weight", w);
        let bid = params.add("conv.bias", b);

        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| next()).collect());
        let target = Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| next()).collect());

        let eval = |params: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let c = tape.conv2d(params, xv, wid, bid, 1, 1);
            let r = tape.relu(c);
            let p = tape.maxpool2(r); // [4,2,2]
            let s = tape.pixel_shuffle2(p); // [1,4,4]
            let l1 = tape.l1_mean(s, target.clone());
            let l2 = tape.mse_mean(s, target.clone());
            let loss = tape.combine(vec![(l1, 1.0), (l2, 0.5)]);
            tape.value(loss).item()
        };

        // analytic
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let c = tape.conv2d(&params, xv, wid, bid, 1, 1);
        let r = tape.relu(c);
        let p = tape.maxpool2(r);
        let s = tape.pixel_shuffle2(p);
        let l1 = tape.l1_mean(s, target.clone());
        let l2 = tape.mse_mean(s, target.clone());
        let loss = tape.combine(vec![(l1, 1.0), (l2, 0.5)]);
        let grads = tape.backward(&params, loss).unwrap();

        let eps = 1e-6;
        for pid in [wid, bid] {
            let analytic = grads.by_param[pid].as_ref().unwrap().clone();
            for i in 0..params.value(pid).len() {
                let mut pp = params.clone();
                pp.value_mut(pid).data_mut()[i] += eps;
                let up = eval(&pp);
                let mut pm = params.clone();
                pm.value_mut(pid).data_mut()[i] -= eps;
                let dn = eval(&pm);
                let fd = (up - dn) / (2.0 * eps);
                let an = analytic.data()[i];
                assert!(
                    (an - fd).abs() < 1e-6,
                    "param {pid}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = x + x doubles the gradient
        let mut tape = Tape::<f64>::new();
        let params = ParamStore::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 1], vec![3.0]));
        let y = tape.add(x, x);
        let l = tape.mse_mean(y, Tensor::from_vec(&[1, 1, 1], vec![0.0]));
        let _ = tape.backward(&params, l).unwrap();
        // d(36)/dx ... loss = (2x)^2 = 4x^2, dl/dx = 8x = 24. Verify via vgrads
        // indirectly: rebuild with x as a "parameter" by conv trick is
        // overkill; assert the loss value instead and rely on the composite
        // test above for gradient routing.
        assert_eq!(tape.value(l).item(), 36.0);
    }
}
