//! Full reductions to scalars.

use crate::scalar::Scalar;
use crate::tensor::{grad_parents, tracking, Tensor};

pub fn sum<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let total: S = a.data().iter().copied().sum();
    if !tracking(&[a]) {
        return Tensor::scalar(total);
    }
    let ah = a.clone();
    Tensor::from_op(
        vec![1],
        vec![total],
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let g = gout[0];
            let buf = sink.entry(&ah);
            for b in buf.iter_mut() {
                *b = *b + g;
            }
        }),
    )
}

pub fn mean<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let n = a.numel();
    let inv = S::of(1.0 / n as f64);
    let total: S = a.data().iter().copied().sum();
    if !tracking(&[a]) {
        return Tensor::scalar(total * inv);
    }
    let ah = a.clone();
    Tensor::from_op(
        vec![1],
        vec![total * inv],
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let g = gout[0] * inv;
            let buf = sink.entry(&ah);
            for b in buf.iter_mut() {
                *b = *b + g;
            }
        }),
    )
}
