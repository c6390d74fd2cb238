//! Elementwise operations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{grad_parents, tracking, Tensor};

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("add", a, b)?;
    let data: Vec<S> = {
        let (ad, bd) = (a.data(), b.data());
        ad.iter().zip(bd.iter()).map(|(x, y)| *x + *y).collect()
    };
    if !tracking(&[a, b]) {
        return Tensor::from_vec(a.shape(), data);
    }
    let (ah, bh) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape(),
        data,
        grad_parents(&[a, b]),
        Box::new(move |gout, sink| {
            if ah.needs_grad() {
                sink.add(&ah, gout);
            }
            if bh.needs_grad() {
                sink.add(&bh, gout);
            }
        }),
    ))
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("sub", a, b)?;
    let data: Vec<S> = {
        let (ad, bd) = (a.data(), b.data());
        ad.iter().zip(bd.iter()).map(|(x, y)| *x - *y).collect()
    };
    if !tracking(&[a, b]) {
        return Tensor::from_vec(a.shape(), data);
    }
    let (ah, bh) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape(),
        data,
        grad_parents(&[a, b]),
        Box::new(move |gout, sink| {
            if ah.needs_grad() {
                sink.add(&ah, gout);
            }
            if bh.needs_grad() {
                let buf = sink.entry(&bh);
                for (g, d) in buf.iter_mut().zip(gout) {
                    *g = *g - *d;
                }
            }
        }),
    ))
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_shape("mul", a, b)?;
    let data: Vec<S> = {
        let (ad, bd) = (a.data(), b.data());
        ad.iter().zip(bd.iter()).map(|(x, y)| *x * *y).collect()
    };
    if !tracking(&[a, b]) {
        return Tensor::from_vec(a.shape(), data);
    }
    let (ah, bh) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape(),
        data,
        grad_parents(&[a, b]),
        Box::new(move |gout, sink| {
            if ah.needs_grad() {
                let delta: Vec<S> = {
                    let bd = bh.data();
                    gout.iter().zip(bd.iter()).map(|(g, y)| *g * *y).collect()
                };
                sink.add(&ah, &delta);
            }
            if bh.needs_grad() {
                let delta: Vec<S> = {
                    let ad = ah.data();
                    gout.iter().zip(ad.iter()).map(|(g, x)| *g * *x).collect()
                };
                sink.add(&bh, &delta);
            }
        }),
    ))
}

pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    let data: Vec<S> = a.data().iter().map(|x| *x * c).collect();
    if !tracking(&[a]) {
        return Tensor::from_vec(a.shape(), data).expect("shape preserved");
    }
    let ah = a.clone();
    Tensor::from_op(
        a.shape(),
        data,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let buf = sink.entry(&ah);
            for (g, d) in buf.iter_mut().zip(gout) {
                *g = *g + c * *d;
            }
        }),
    )
}

pub fn relu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = a
        .data()
        .iter()
        .map(|x| if *x > S::zero() { *x } else { S::zero() })
        .collect();
    if !tracking(&[a]) {
        return Tensor::from_vec(a.shape(), data).expect("shape preserved");
    }
    let ah = a.clone();
    Tensor::from_op(
        a.shape(),
        data,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            // Subgradient at 0 is taken as 0.
            let delta: Vec<S> = {
                let ad = ah.data();
                ad.iter()
                    .zip(gout)
                    .map(|(x, g)| if *x > S::zero() { *g } else { S::zero() })
                    .collect()
            };
            sink.add(&ah, &delta);
        }),
    )
}

/// Numerically stable logistic function; output is strictly inside (0, 1).
pub fn sigmoid<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let data: Vec<S> = a.data().iter().map(|x| sigmoid_scalar(*x)).collect();
    if !tracking(&[a]) {
        return Tensor::from_vec(a.shape(), data).expect("shape preserved");
    }
    let ah = a.clone();
    let saved = data.clone();
    Tensor::from_op(
        a.shape(),
        data,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let delta: Vec<S> = saved
                .iter()
                .zip(gout)
                .map(|(y, g)| *g * *y * (S::one() - *y))
                .collect();
            sink.add(&ah, &delta);
        }),
    )
}

pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    let y = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    // saturated values round to exactly 0 or 1; keep the contract strict
    y.max(S::min_positive_value())
        .min(S::one() - S::epsilon())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(&t(&[-2.0, 0.0, 3.0]));
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let y = sigmoid(&t(&[0.0]));
        assert_eq!(y.to_vec(), vec![0.5]);
    }

    #[test]
    fn sigmoid_is_symmetric_about_half() {
        for &x in &[-30.0, -3.2, -0.7, 0.0, 0.7, 3.2, 30.0] {
            let a = sigmoid(&t(&[x])).item();
            let b = sigmoid(&t(&[-x])).item();
            assert!((a + b - 1.0).abs() < 1e-12, "x={x}: {a} + {b}");
        }
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        for &x in &[-800.0, -50.0, 0.0, 50.0, 800.0] {
            let y = sigmoid(&t(&[x])).item();
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
    }

    #[test]
    fn mul_backward_uses_both_operands() {
        let a = t(&[2.0, -3.0]).requires_grad();
        let b = t(&[5.0, 7.0]).requires_grad();
        let y = crate::tensor::reduce::sum(&mul(&a, &b).unwrap());
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, -3.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[1.0, 2.0, 3.0]);
        assert!(add(&a, &b).is_err());
    }
}
