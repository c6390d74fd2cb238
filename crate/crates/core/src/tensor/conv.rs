//! 2-D convolution (cross-correlation convention) with autodiff.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{grad_parents, tracking, Tensor};

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

/// Inclusive output range along one axis for a kernel offset `k`, such that
/// `o * stride + k - padding` stays inside `[0, extent)`.
#[inline]
fn valid_range(out_extent: usize, extent: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi_in = extent + padding - 1;
    if hi_in < k {
        return (1, 0);
    }
    let hi = ((hi_in - k) / stride).min(out_extent.saturating_sub(1));
    (lo, hi)
}

fn conv_forward<S: Scalar>(input: &[S], weight: &[S], bias: &[S], d: ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); d.n * d.cout * d.oh * d.ow];
    for b in 0..d.n {
        for co in 0..d.cout {
            let oplane = &mut out[(b * d.cout + co) * d.oh * d.ow..(b * d.cout + co + 1) * d.oh * d.ow];
            oplane.fill(bias[co]);
            for ci in 0..d.cin {
                let iplane = &input[(b * d.cin + ci) * d.h * d.w..(b * d.cin + ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let (ylo, yhi) = valid_range(d.oh, d.h, ky, d.stride, d.padding);
                    for kx in 0..d.kw {
                        let wv = weight[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (xlo, xhi) = valid_range(d.ow, d.w, kx, d.stride, d.padding);
                        if xlo > xhi || ylo > yhi {
                            continue;
                        }
                        for y in ylo..=yhi {
                            let iy = y * d.stride + ky - d.padding;
                            if d.stride == 1 {
                                let irow = &iplane[iy * d.w + xlo + kx - d.padding
                                    ..iy * d.w + xhi + kx - d.padding + 1];
                                let orow = &mut oplane[y * d.ow + xlo..y * d.ow + xhi + 1];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o = *o + wv * *i;
                                }
                            } else {
                                for x in xlo..=xhi {
                                    let ix = x * d.stride + kx - d.padding;
                                    oplane[y * d.ow + x] =
                                        oplane[y * d.ow + x] + wv * iplane[iy * d.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `input [N, Cin, H, W]` convolved with `weight [Cout, Cin, kh, kw]` plus
/// `bias [Cout]`. Output spatial extent is
/// `floor((H + 2*padding - kh) / stride) + 1`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let bshape = bias.shape();
    if ishape.len() != 4 || wshape.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} / weight {:?} must be rank 4", ishape, wshape),
        ));
    }
    let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels but weight expects {} (input {:?}, weight {:?})",
                cin, wcin, ishape, wshape
            ),
        ));
    }
    if bshape != vec![cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} must be [{}]", bshape, cout),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel extents must be odd, got {}x{}", kh, kw),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1".to_string()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded extent {}x{} smaller than kernel {}x{}",
                h + 2 * padding,
                w + 2 * padding,
                kh,
                kw
            ),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let dims = ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    };

    let out = {
        let (id, wd, bd) = (input.data(), weight.data(), bias.data());
        conv_forward(&id, &wd, &bd, dims)
    };
    let out_shape = vec![n, cout, oh, ow];

    if !tracking(&[input, weight, bias]) {
        return Tensor::from_vec(out_shape, out);
    }
    let (ih, wh, bh) = (input.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        out_shape,
        out,
        grad_parents(&[input, weight, bias]),
        Box::new(move |gout, sink| {
            let d = dims;
            if bh.needs_grad() {
                let mut gb = vec![S::zero(); d.cout];
                for b in 0..d.n {
                    for co in 0..d.cout {
                        let plane =
                            &gout[(b * d.cout + co) * d.oh * d.ow..(b * d.cout + co + 1) * d.oh * d.ow];
                        gb[co] = gb[co] + plane.iter().copied().sum();
                    }
                }
                sink.add(&bh, &gb);
            }
            let want_input = ih.needs_grad();
            let want_weight = wh.needs_grad();
            if !want_input && !want_weight {
                return;
            }
            let mut gw = vec![S::zero(); d.cout * d.cin * d.kh * d.kw];
            {
                let id = ih.data();
                let wd = wh.data();
                let gi: Option<&mut [S]> = if want_input { Some(sink.entry(&ih)) } else { None };
                let mut gi = gi;
                for b in 0..d.n {
                    for co in 0..d.cout {
                        let gplane = &gout
                            [(b * d.cout + co) * d.oh * d.ow..(b * d.cout + co + 1) * d.oh * d.ow];
                        for ci in 0..d.cin {
                            let ibase = (b * d.cin + ci) * d.h * d.w;
                            for ky in 0..d.kh {
                                let (ylo, yhi) = valid_range(d.oh, d.h, ky, d.stride, d.padding);
                                for kx in 0..d.kw {
                                    let (xlo, xhi) =
                                        valid_range(d.ow, d.w, kx, d.stride, d.padding);
                                    if xlo > xhi || ylo > yhi {
                                        continue;
                                    }
                                    let widx = ((co * d.cin + ci) * d.kh + ky) * d.kw + kx;
                                    let wv = wd[widx];
                                    let mut wacc = S::zero();
                                    for y in ylo..=yhi {
                                        let iy = y * d.stride + ky - d.padding;
                                        if d.stride == 1 {
                                            let islice = ibase + iy * d.w + xlo + kx - d.padding;
                                            let glen = xhi - xlo + 1;
                                            let grow = &gplane[y * d.ow + xlo..y * d.ow + xlo + glen];
                                            if want_weight {
                                                let irow = &id[islice..islice + glen];
                                                for (g, i) in grow.iter().zip(irow) {
                                                    wacc = wacc + *g * *i;
                                                }
                                            }
                                            if let Some(gi) = gi.as_deref_mut() {
                                                let girow = &mut gi[islice..islice + glen];
                                                for (gi_v, g) in girow.iter_mut().zip(grow) {
                                                    *gi_v = *gi_v + wv * *g;
                                                }
                                            }
                                        } else {
                                            for x in xlo..=xhi {
                                                let ix = x * d.stride + kx - d.padding;
                                                let g = gplane[y * d.ow + x];
                                                if want_weight {
                                                    wacc = wacc + g * id[ibase + iy * d.w + ix];
                                                }
                                                if let Some(gi) = gi.as_deref_mut() {
                                                    gi[ibase + iy * d.w + ix] =
                                                        gi[ibase + iy * d.w + ix] + wv * g;
                                                }
                                            }
                                        }
                                    }
                                    gw[widx] = gw[widx] + wacc;
                                }
                            }
                        }
                    }
                }
            }
            if want_weight {
                sink.add(&wh, &gw);
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
    fn one_by_one_identity_kernel() {
        let x = t(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = t(vec![1, 1, 1, 1], vec![1.0]);
        let b = t(vec![1], vec![0.0]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn zero_input_gives_constant_bias() {
        let x = t(vec![1, 2, 4, 4], vec![0.0; 32]);
        let w = t(vec![3, 2, 3, 3], vec![0.31; 54]);
        let b = t(vec![3], vec![1.0, -2.0, 0.5]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        let v = y.to_vec();
        for co in 0..3 {
            for i in 0..16 {
                assert_eq!(v[co * 16 + i], b.to_vec()[co]);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = t(vec![1, 2, 4, 4], vec![0.0; 32]);
        let w = t(vec![1, 3, 3, 3], vec![0.0; 27]);
        let b = t(vec![1], vec![0.0]);
        let err = conv2d(&x, &w, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn output_extent_follows_floor_rule() {
        let x = t(vec![1, 1, 7, 5], vec![0.0; 35]);
        let w = t(vec![1, 1, 3, 3], vec![0.0; 9]);
        let b = t(vec![1], vec![0.0]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        // H' = floor((7 + 2 - 3) / 2) + 1 = 4, W' = floor((5 + 2 - 3) / 2) + 1 = 3
        assert_eq!(y.shape(), vec![1, 1, 4, 3]);
    }
}
