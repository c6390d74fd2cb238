//! Batch normalization over `(N, H, W)` per channel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{grad_parents, tracking, Tensor};

/// Normalizes each channel of `input [N, C, H, W]`.
///
/// Training mode uses batch statistics (biased variance) and updates the
/// running buffers in place with `new = (1 - momentum) * old + momentum * batch`
/// (running variance stored unbiased). Eval mode normalizes with the running
/// buffers and leaves them untouched.
pub fn batch_norm<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &mut [S],
    running_var: &mut [S],
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<Tensor<S>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "batch_norm",
            format!("expected rank 4, got {:?}", shape),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if gamma.shape() != vec![c] || beta.shape() != vec![c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("parameter extents must be [{}]", c),
        ));
    }
    let m = n * h * w;
    if training && m < 2 {
        return Err(Error::DegenerateBatch { count: m });
    }

    let plane = h * w;
    let (mean, var): (Vec<S>, Vec<S>) = if training {
        let d = input.data();
        let inv_m = S::of(1.0 / m as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for b in 0..n {
                let sl = &d[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                acc = acc + sl.iter().copied().sum();
            }
            let mu = acc * inv_m;
            let mut vacc = S::zero();
            for b in 0..n {
                let sl = &d[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for x in sl {
                    let dv = *x - mu;
                    vacc = vacc + dv * dv;
                }
            }
            mean[ch] = mu;
            var[ch] = vacc * inv_m;
        }
        let mom = S::of(momentum);
        let keep = S::one() - mom;
        let unbias = S::of(m as f64 / (m as f64 - 1.0));
        for ch in 0..c {
            running_mean[ch] = keep * running_mean[ch] + mom * mean[ch];
            running_var[ch] = keep * running_var[ch] + mom * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let istd: Vec<S> = var
        .iter()
        .map(|v| S::one() / (*v + S::of(eps)).sqrt())
        .collect();

    let mut out = vec![S::zero(); input.numel()];
    {
        let d = input.data();
        let g = gamma.data();
        let bt = beta.data();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (mu, is, ga, be) = (mean[ch], istd[ch], g[ch], bt[ch]);
                for i in 0..plane {
                    out[base + i] = ga * (d[base + i] - mu) * is + be;
                }
            }
        }
    }

    if !tracking(&[input, gamma, beta]) {
        return Tensor::from_vec(shape, out);
    }
    let (ih, gh, bh) = (input.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(
        shape,
        out,
        grad_parents(&[input, gamma, beta]),
        Box::new(move |gout, sink| {
            // per channel: sums of g and g * xhat over (N, H, W)
            let mut sum_g = vec![S::zero(); c];
            let mut sum_gx = vec![S::zero(); c];
            {
                let d = ih.data();
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let (mu, is) = (mean[ch], istd[ch]);
                        let mut sg = S::zero();
                        let mut sgx = S::zero();
                        for i in 0..plane {
                            let g = gout[base + i];
                            sg = sg + g;
                            sgx = sgx + g * (d[base + i] - mu) * is;
                        }
                        sum_g[ch] = sum_g[ch] + sg;
                        sum_gx[ch] = sum_gx[ch] + sgx;
                    }
                }
            }
            if gh.needs_grad() {
                sink.add(&gh, &sum_gx);
            }
            if bh.needs_grad() {
                sink.add(&bh, &sum_g);
            }
            if ih.needs_grad() {
                let delta: Vec<S> = {
                    let d = ih.data();
                    let g = gh.data();
                    let mut delta = vec![S::zero(); d.len()];
                    let inv_m = S::of(1.0 / m as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let (mu, is, ga) = (mean[ch], istd[ch], g[ch]);
                            if training {
                                // batch statistics are functions of the input
                                for i in 0..plane {
                                    let go = gout[base + i];
                                    let xhat = (d[base + i] - mu) * is;
                                    delta[base + i] = ga
                                        * is
                                        * (go - inv_m * sum_g[ch] - xhat * inv_m * sum_gx[ch]);
                                }
                            } else {
                                for i in 0..plane {
                                    delta[base + i] = gout[base + i] * ga * is;
                                }
                            }
                        }
                    }
                    delta
                };
                sink.add(&ih, &delta);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn normalized_input_passes_through() {
        // per-channel zero mean, unit variance input; gamma=1, beta=0, eps=0
        let raw = rng_vec(2 * 3 * 4 * 4, 7);
        let mut data = raw;
        for ch in 0..3 {
            let mut vals: Vec<f64> = Vec::new();
            for b in 0..2 {
                let base = (b * 3 + ch) * 16;
                vals.extend_from_slice(&data[base..base + 16]);
            }
            let m = vals.iter().sum::<f64>() / 32.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
            for b in 0..2 {
                let base = (b * 3 + ch) * 16;
                for i in 0..16 {
                    data[base + i] = (data[base + i] - m) / v.sqrt();
                }
            }
        }
        let x = Tensor::from_vec(vec![2, 3, 4, 4], data.clone()).unwrap();
        let gamma = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        let beta = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, 0.0, 0.1, true).unwrap();
        for (a, b) in y.to_vec().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gamma_broadcasts_beta() {
        let x = Tensor::from_vec(vec![1, 2, 2, 2], rng_vec(8, 3)).unwrap();
        let gamma = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![0.25, -1.5]).unwrap();
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let y = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1, true).unwrap();
        let v = y.to_vec();
        assert!(v[..4].iter().all(|a| *a == 0.25));
        assert!(v[4..].iter().all(|a| *a == -1.5));
    }

    #[test]
    fn train_output_statistics_are_standardized() {
        let x = Tensor::from_vec(vec![2, 2, 3, 3], rng_vec(36, 11)).unwrap();
        let gamma = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let y = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, 0.0, 0.1, true).unwrap();
        let v = y.to_vec();
        // recompute statistics from the output buffer
        for ch in 0..2 {
            let mut vals = Vec::new();
            for b in 0..2 {
                let base = (b * 2 + ch) * 9;
                vals.extend_from_slice(&v[base..base + 9]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10, "mean {m}");
            assert!((var - 1.0).abs() < 1e-10, "var {var}");
        }
    }

    #[test]
    fn train_mode_rejects_single_element_batch() {
        let x = Tensor::from_vec(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let gamma = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![0.0; 2]).unwrap();
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let err = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1, true);
        assert!(matches!(err, Err(Error::DegenerateBatch { count: 1 })));
        // eval mode accepts the same extents
        let ok = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, 1e-5, 0.1, false);
        assert!(ok.is_ok());
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let mut rm = vec![2.0];
        let mut rv = vec![4.0];
        let y = batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, 0.0, 0.1, false).unwrap();
        let v = y.to_vec();
        for (got, want) in v.iter().zip(&[-0.5f64, 0.0, 0.5, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(rm, vec![2.0]);
        assert_eq!(rv, vec![4.0]);
    }
}
