//! Softmax over the last dimension, computed with max-subtraction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{grad_parents, tracking, Tensor};

pub fn softmax_lastdim<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = logits.shape();
    let n = *shape.last().ok_or_else(|| {
        Error::invalid("softmax_lastdim", "rank must be at least 1".to_string())
    })?;
    if n == 0 {
        return Err(Error::invalid(
            "softmax_lastdim",
            "last extent must be >= 1".to_string(),
        ));
    }
    {
        let d = logits.data();
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "softmax_lastdim",
                detail: "input contains a non-finite logit".to_string(),
            });
        }
    }
    let rows = logits.numel() / n;
    let mut out = vec![S::zero(); logits.numel()];
    {
        let d = logits.data();
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            let mut mx = row[0];
            for v in row.iter() {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut denom = S::zero();
            for (o, v) in orow.iter_mut().zip(row) {
                let e = (*v - mx).exp();
                *o = e;
                denom = denom + e;
            }
            let inv = S::one() / denom;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
    }
    if !tracking(&[logits]) {
        return Tensor::from_vec(shape, out);
    }
    let lh = logits.clone();
    let saved = out.clone();
    Ok(Tensor::from_op(
        shape,
        out,
        grad_parents(&[logits]),
        Box::new(move |gout, sink| {
            // dx_j = y_j * (g_j - sum_k g_k y_k) per row
            let mut delta = vec![S::zero(); saved.len()];
            for r in 0..rows {
                let y = &saved[r * n..(r + 1) * n];
                let g = &gout[r * n..(r + 1) * n];
                let mut dot = S::zero();
                for (yv, gv) in y.iter().zip(g) {
                    dot = dot + *yv * *gv;
                }
                for ((d, yv), gv) in delta[r * n..(r + 1) * n].iter_mut().zip(y).zip(g) {
                    *d = *yv * (*gv - dot);
                }
            }
            sink.add(&lh, &delta);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn equal_logits_are_uniform() {
        let y = softmax_lastdim(&t(vec![4], vec![3.0; 4])).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_element_row_is_one() {
        let y = softmax_lastdim(&t(vec![1], vec![-7.0])).unwrap();
        assert_eq!(y.to_vec(), vec![1.0]);
    }

    #[test]
    fn large_logits_match_closed_form() {
        let y = softmax_lastdim(&t(vec![2], vec![1000.0, 1000.1])).unwrap();
        let v = y.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        // two-term closed form: e^{0.1} / (1 + e^{0.1})
        let p1 = (0.1f64).exp() / (1.0 + (0.1f64).exp());
        assert!((v[1] - p1).abs() < 1e-12);
        assert!((v[0] - (1.0 - p1)).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one() {
        let y = softmax_lastdim(&t(vec![2, 3], vec![5.0, -2.0, 0.3, 100.0, 99.0, 98.5])).unwrap();
        let v = y.to_vec();
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        assert!(softmax_lastdim(&t(vec![2], vec![f64::NAN, 0.0])).is_err());
        assert!(softmax_lastdim(&t(vec![2], vec![f64::INFINITY, 0.0])).is_err());
    }
}
