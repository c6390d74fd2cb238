//! Batched matrix multiplication.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{grad_parents, numel_of, tracking, Tensor};

/// c[m,n] += a[m,p] · b[p,n]
pub(crate) fn gemm_nn<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for k in 0..p {
            let av = a[i * p + k];
            if av == S::zero() {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// c[m,p] += a[m,n] · b[p,n]ᵀ
pub(crate) fn gemm_nt<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * p..(i + 1) * p];
        for (k, cv) in crow.iter_mut().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            let mut acc = S::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            *cv = *cv + acc;
        }
    }
}

/// c[p,n] += a[m,p]ᵀ · b[m,n]
pub(crate) fn gemm_tn<S: Scalar>(c: &mut [S], a: &[S], b: &[S], m: usize, p: usize, n: usize) {
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..p {
            let av = a[r * p + i];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// `a` has shape `[..., m, p]`; `b` is either `[p, n]` (broadcast over the
/// leading dims of `a`) or `[..., p, n]` with identical leading dims.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let ashape = a.shape();
    let bshape = b.shape();
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("ranks must be >= 2, got {:?} and {:?}", ashape, bshape),
        ));
    }
    let (m, p) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (bp, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    if p != bp {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner extents differ: {:?} x {:?} ({} vs {})",
                ashape, bshape, p, bp
            ),
        ));
    }
    let lead_a = &ashape[..ashape.len() - 2];
    let lead_b = &bshape[..bshape.len() - 2];
    let broadcast_b = lead_b.is_empty();
    if !broadcast_b && lead_a != lead_b {
        return Err(Error::shape(
            "matmul",
            format!("leading dims differ: {:?} vs {:?}", ashape, bshape),
        ));
    }
    let batches = numel_of(lead_a);
    let mut out_shape = lead_a.to_vec();
    out_shape.push(m);
    out_shape.push(n);

    let mut out = vec![S::zero(); batches * m * n];
    {
        let ad = a.data();
        let bd = b.data();
        for s in 0..batches {
            let asl = &ad[s * m * p..(s + 1) * m * p];
            let bsl = if broadcast_b {
                &bd[..]
            } else {
                &bd[s * p * n..(s + 1) * p * n]
            };
            gemm_nn(&mut out[s * m * n..(s + 1) * m * n], asl, bsl, m, p, n);
        }
    }

    if !tracking(&[a, b]) {
        return Tensor::from_vec(out_shape, out);
    }
    let (ah, bh) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out_shape,
        out,
        grad_parents(&[a, b]),
        Box::new(move |gout, sink| {
            if ah.needs_grad() {
                let delta = {
                    let bd = bh.data();
                    let mut ga = vec![S::zero(); batches * m * p];
                    for s in 0..batches {
                        let gsl = &gout[s * m * n..(s + 1) * m * n];
                        let bsl = if broadcast_b {
                            &bd[..]
                        } else {
                            &bd[s * p * n..(s + 1) * p * n]
                        };
                        gemm_nt(&mut ga[s * m * p..(s + 1) * m * p], gsl, bsl, m, n, p);
                    }
                    ga
                };
                sink.add(&ah, &delta);
            }
            if bh.needs_grad() {
                let delta = {
                    let ad = ah.data();
                    let gb_len = if broadcast_b { p * n } else { batches * p * n };
                    let mut gb = vec![S::zero(); gb_len];
                    for s in 0..batches {
                        let asl = &ad[s * m * p..(s + 1) * m * p];
                        let gsl = &gout[s * m * n..(s + 1) * m * n];
                        let gbsl = if broadcast_b {
                            &mut gb[..]
                        } else {
                            &mut gb[s * p * n..(s + 1) * p * n]
                        };
                        gemm_tn(gbsl, asl, gsl, m, p, n);
                    }
                    gb
                };
                sink.add(&bh, &delta);
            }
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
    fn identity_times_a_is_a() {
        let eye = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = matmul(&eye, &a).unwrap();
        assert_eq!(y.to_vec(), a.to_vec());
    }

    #[test]
    fn zeros_times_a_is_zeros() {
        let z = t(vec![2, 2], vec![0.0; 4]);
        let a = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = matmul(&z, &a).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 6]);
    }

    #[test]
    fn rejects_inner_mismatch() {
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matches_triple_loop_oracle() {
        // random 3x4 · 4x2 against the naive contraction
        let mut rng = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let a: Vec<f64> = (0..12).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let y = matmul(&t(vec![3, 4], a.clone()), &t(vec![4, 2], b.clone())).unwrap();
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expect[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        for (got, want) in y.to_vec().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_rhs_over_batch() {
        let a = t(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
