//! Training losses: soft Dice and clamped binary cross-entropy, mixed per
//! stage and summed over supervision heads.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::elementwise::{add, scale};
use crate::tensor::{grad_parents, tracking, Tensor};

pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

fn check_pair<S: Scalar>(op: &'static str, m: &Tensor<S>, y: &Tensor<S>) -> Result<()> {
    if m.shape() != y.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs mask {:?}", m.shape(), y.shape()),
        ));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2*sum(M*Y) + eps) / (sum(M) + sum(Y) + eps)`,
/// differentiable in the prediction `M`; the mask `Y` is treated as data.
pub fn dice_loss<S: Scalar>(m: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    check_pair("dice_loss", m, y)?;
    let eps = S::of(DICE_EPS);
    let (numer, denom) = {
        let (md, yd) = (m.data(), y.data());
        let mut inter = S::zero();
        let mut sm = S::zero();
        let mut sy = S::zero();
        for (a, b) in md.iter().zip(yd.iter()) {
            inter = inter + *a * *b;
            sm = sm + *a;
            sy = sy + *b;
        }
        (S::of(2.0) * inter + eps, sm + sy + eps)
    };
    let value = S::one() - numer / denom;
    if !tracking(&[m]) {
        return Ok(Tensor::scalar(value));
    }
    let (mh, yh) = (m.clone(), y.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        grad_parents(&[m]),
        Box::new(move |gout, sink| {
            // d/dM_j [1 - N/D] = -(2*Y_j*D - N) / D^2
            let g = gout[0];
            let delta: Vec<S> = {
                let yd = yh.data();
                let d2 = denom * denom;
                yd.iter()
                    .map(|yj| -g * (S::of(2.0) * *yj * denom - numer) / d2)
                    .collect()
            };
            sink.add(&mh, &delta);
        }),
    ))
}

/// Pixel-mean binary cross-entropy with the prediction clamped to
/// `[1e-7, 1 - 1e-7]` before the logarithms.
pub fn bce_loss<S: Scalar>(m: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
    check_pair("bce_loss", m, y)?;
    let lo = S::of(BCE_CLAMP);
    let hi = S::one() - lo;
    let n = m.numel();
    let inv_n = S::of(1.0 / n as f64);
    let value = {
        let (md, yd) = (m.data(), y.data());
        let mut acc = S::zero();
        for (a, b) in md.iter().zip(yd.iter()) {
            let p = (*a).max(lo).min(hi);
            acc = acc - (*b * p.ln() + (S::one() - *b) * (S::one() - p).ln());
        }
        acc * inv_n
    };
    if !tracking(&[m]) {
        return Ok(Tensor::scalar(value));
    }
    let (mh, yh) = (m.clone(), y.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        grad_parents(&[m]),
        Box::new(move |gout, sink| {
            let g = gout[0] * inv_n;
            let delta: Vec<S> = {
                let (md, yd) = (mh.data(), yh.data());
                md.iter()
                    .zip(yd.iter())
                    .map(|(a, b)| {
                        if *a < lo || *a > hi {
                            S::zero() // clamp plateau
                        } else {
                            g * (-*b / *a + (S::one() - *b) / (S::one() - *a))
                        }
                    })
                    .collect()
            };
            sink.add(&mh, &delta);
        }),
    ))
}

/// `lambda_dice * Dice(M, Y) + lambda_bce * BCE(M, Y)`.
pub fn stage_loss<S: Scalar>(
    m: &Tensor<S>,
    y: &Tensor<S>,
    lambda_dice: f64,
    lambda_bce: f64,
) -> Result<Tensor<S>> {
    let d = scale(&dice_loss(m, y)?, S::of(lambda_dice));
    let b = scale(&bce_loss(m, y)?, S::of(lambda_bce));
    add(&d, &b)
}

/// `sum_i alpha[i] * L_i`; `alpha[0]` weights the full-resolution head.
pub fn total_loss<S: Scalar>(stage_losses: &[Tensor<S>], alpha: &[f64]) -> Result<Tensor<S>> {
    if stage_losses.is_empty() {
        return Err(Error::invalid("total_loss", "no stage losses".to_string()));
    }
    if alpha.len() < stage_losses.len() {
        return Err(Error::invalid(
            "total_loss",
            format!(
                "{} stage losses but only {} alpha weights",
                stage_losses.len(),
                alpha.len()
            ),
        ));
    }
    let mut acc = scale(&stage_losses[0], S::of(alpha[0]));
    for (l, a) in stage_losses.iter().zip(alpha).skip(1) {
        acc = add(&acc, &scale(l, S::of(*a)))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    fn rng_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn dice_of_exact_match_is_zero() {
        let y = t(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let loss = dice_loss(&y, &y).unwrap().item();
        assert!(loss.abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn dice_of_complement_is_one() {
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        let m = t(&[0.0, 1.0, 0.0, 1.0]);
        let loss = dice_loss(&m, &y).unwrap().item();
        assert!((loss - 1.0).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn dice_matches_scalar_loop_oracle() {
        let mut next = rng_stream(41);
        for _ in 0..20 {
            let m: Vec<f64> = (0..32).map(|_| next()).collect();
            let y: Vec<f64> = (0..32).map(|_| if next() > 0.5 { 1.0 } else { 0.0 }).collect();
            let got = dice_loss(&t(&m), &t(&y)).unwrap().item();
            let mut inter = 0.0;
            let mut sm = 0.0;
            let mut sy = 0.0;
            for i in 0..32 {
                inter += m[i] * y[i];
                sm += m[i];
                sy += y[i];
            }
            let want = 1.0 - (2.0 * inter + DICE_EPS) / (sm + sy + DICE_EPS);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_of_uniform_half_is_ln_two() {
        let m = t(&[0.5; 10]);
        let y = t(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let loss = bce_loss(&m, &y).unwrap().item();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn bce_vanishes_as_prediction_approaches_mask() {
        let y = t(&[1.0, 0.0, 1.0]);
        let m = t(&[1.0 - 1e-9, 1e-9, 1.0 - 1e-9]);
        let loss = bce_loss(&m, &y).unwrap().item();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn bce_matches_scalar_loop_oracle() {
        let mut next = rng_stream(99);
        for _ in 0..20 {
            let m: Vec<f64> = (0..24).map(|_| next() * 0.98 + 0.01).collect();
            let y: Vec<f64> = (0..24).map(|_| if next() > 0.5 { 1.0 } else { 0.0 }).collect();
            let got = bce_loss(&t(&m), &t(&y)).unwrap().item();
            let want = m
                .iter()
                .zip(&y)
                .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
                .sum::<f64>()
                / 24.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_loss_reduces_to_each_term() {
        let m = t(&[0.3, 0.8, 0.1]);
        let y = t(&[0.0, 1.0, 0.0]);
        let d = dice_loss(&m, &y).unwrap().item();
        let b = bce_loss(&m, &y).unwrap().item();
        assert_eq!(stage_loss(&m, &y, 1.0, 0.0).unwrap().item(), d);
        assert_eq!(stage_loss(&m, &y, 0.0, 1.0).unwrap().item(), b);
    }

    #[test]
    fn stage_loss_with_default_mix_is_exact_arithmetic() {
        // Dice = 0.4 and BCE = 0.6 under weights (0.7, 0.3) combine to 0.46.
        let l: f64 = 0.7 * 0.4 + 0.3 * 0.6;
        assert!((l - 0.46).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weights_head_losses() {
        let ls: Vec<Tensor<f64>> = [0.4, 0.3, 0.2, 0.1].iter().map(|v| Tensor::scalar(*v)).collect();
        let total = total_loss(&ls, &[1.0, 0.9, 0.8, 0.7]).unwrap().item();
        assert!((total - 0.90).abs() < 1e-12);
        let only_first = total_loss(&ls, &[1.0, 0.0, 0.0, 0.0]).unwrap().item();
        assert!((only_first - 0.4).abs() < 1e-15);
    }

    #[test]
    fn total_loss_matches_loop_oracle() {
        let mut next = rng_stream(1234);
        let vals: Vec<f64> = (0..5).map(|_| next()).collect();
        let alpha: Vec<f64> = (0..5).map(|_| next()).collect();
        let ls: Vec<Tensor<f64>> = vals.iter().map(|v| Tensor::scalar(*v)).collect();
        let got = total_loss(&ls, &alpha).unwrap().item();
        let mut want = 0.0;
        for i in 0..5 {
            want += alpha[i] * vals[i];
        }
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut next = rng_stream(7);
        let m: Vec<f64> = (0..18).map(|_| next() * 0.9 + 0.05).collect();
        let y: Vec<f64> = (0..18).map(|_| if next() > 0.6 { 1.0 } else { 0.0 }).collect();
        let yt = t(&y);

        let mt = t(&m).requires_grad();
        let (mh, yh) = (mt.clone(), yt.clone());
        let report = finite_diff_check("dice_loss", &[mt], move || dice_loss(&mh, &yh).unwrap(), 1e-6);
        assert!(report.passed, "{report}");

        let mt = t(&m).requires_grad();
        let (mh, yh) = (mt.clone(), yt.clone());
        let report = finite_diff_check("bce_loss", &[mt], move || bce_loss(&mh, &yh).unwrap(), 1e-6);
        assert!(report.passed, "{report}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = t(&[0.5, 0.5]);
        let y = t(&[1.0, 0.0, 1.0]);
        assert!(dice_loss(&m, &y).is_err());
        assert!(bce_loss(&m, &y).is_err());
    }
}
