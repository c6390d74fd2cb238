//! Reshaping, permutation, concatenation, resampling and pooling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{grad_parents, numel_of, strides_of, tracking, Tensor};

/// Copying reshape; the gradient reshapes back.
pub fn reshape<S: Scalar>(a: &Tensor<S>, new_shape: Vec<usize>) -> Result<Tensor<S>> {
    if numel_of(&new_shape) != a.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?}", a.shape(), new_shape),
        ));
    }
    let data = a.to_vec();
    if !tracking(&[a]) {
        return Tensor::from_vec(new_shape, data);
    }
    let ah = a.clone();
    Ok(Tensor::from_op(
        new_shape,
        data,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            sink.add(&ah, gout);
        }),
    ))
}

/// Dimension permutation: `out_shape[k] = shape[axes[k]]`.
pub fn permute<S: Scalar>(a: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let shape = a.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
        return Err(Error::invalid(
            "permute",
            format!("axes {:?} is not a permutation of 0..{}", axes, rank),
        ));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides_of(&shape);
    let gather: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let out_strides = strides_of(&out_shape);
    let numel = a.numel();

    let map_offsets = move |dst: &mut [S], src: &[S], forward: bool| {
        let mut idx = vec![0usize; rank];
        for o in 0..numel {
            let mut rem = o;
            let mut src_off = 0usize;
            for k in 0..rank {
                idx[k] = rem / out_strides[k];
                rem %= out_strides[k];
                src_off += idx[k] * gather[k];
            }
            if forward {
                dst[o] = src[src_off];
            } else {
                dst[src_off] = dst[src_off] + src[o];
            }
        }
    };

    let mut out = vec![S::zero(); numel];
    map_offsets(&mut out, &a.data(), true);

    if !tracking(&[a]) {
        return Tensor::from_vec(out_shape, out);
    }
    let ah = a.clone();
    Ok(Tensor::from_op(
        out_shape,
        out,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let buf = sink.entry(&ah);
            map_offsets(buf, gout, false);
        }),
    ))
}

/// Concatenation along `axis`; every other extent must agree. The gradient
/// splits exactly back onto the inputs.
pub fn concat<S: Scalar>(axis: usize, inputs: &[Tensor<S>]) -> Result<Tensor<S>> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat", "no inputs".to_string()));
    }
    let first = inputs[0].shape();
    if axis >= first.len() {
        return Err(Error::invalid(
            "concat",
            format!("axis {} out of range for rank {}", axis, first.len()),
        ));
    }
    let mut axis_total = 0usize;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len()
            || s.iter()
                .zip(&first)
                .enumerate()
                .any(|(k, (a, b))| k != axis && a != b)
        {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} (axis {})", s, first, axis),
            ));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;

    let outer = numel_of(&first[..axis]);
    let inner = numel_of(&first[axis + 1..]);
    let out_row = axis_total * inner;

    let mut out = vec![S::zero(); outer * out_row];
    let mut offset = 0usize;
    let mut spans = Vec::with_capacity(inputs.len());
    for t in inputs {
        let extent = t.shape()[axis];
        let block = extent * inner;
        {
            let d = t.data();
            for o in 0..outer {
                out[o * out_row + offset..o * out_row + offset + block]
                    .copy_from_slice(&d[o * block..(o + 1) * block]);
            }
        }
        spans.push((offset, block));
        offset += block;
    }

    let refs: Vec<&Tensor<S>> = inputs.iter().collect();
    if !tracking(&refs) {
        return Tensor::from_vec(out_shape, out);
    }
    let handles: Vec<Tensor<S>> = inputs.to_vec();
    Ok(Tensor::from_op(
        out_shape,
        out,
        grad_parents(&refs),
        Box::new(move |gout, sink| {
            for (t, &(off, block)) in handles.iter().zip(&spans) {
                if !t.needs_grad() {
                    continue;
                }
                let buf = sink.entry(t);
                for o in 0..outer {
                    let src = &gout[o * out_row + off..o * out_row + off + block];
                    for (g, d) in buf[o * block..(o + 1) * block].iter_mut().zip(src) {
                        *g = *g + *d;
                    }
                }
            }
        }),
    ))
}

/// Channel-axis concatenation of feature maps `[N, C_i, H, W]`.
pub fn concat_channels<S: Scalar>(inputs: &[Tensor<S>]) -> Result<Tensor<S>> {
    for t in inputs {
        if t.shape().len() != 4 {
            return Err(Error::shape(
                "concat_channels",
                format!("expected rank-4 feature maps, got {:?}", t.shape()),
            ));
        }
    }
    concat(1, inputs)
}

fn expect_4d<S: Scalar>(op: &'static str, a: &Tensor<S>) -> Result<[usize; 4]> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", s)));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Nearest-neighbor upsampling by an integer factor:
/// `out[y, x] = in[y / factor, x / factor]`.
pub fn nearest_upsample<S: Scalar>(a: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let [n, c, h, w] = expect_4d("nearest_upsample", a)?;
    if factor < 1 {
        return Err(Error::invalid(
            "nearest_upsample",
            "factor must be >= 1".to_string(),
        ));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![S::zero(); n * c * oh * ow];
    {
        let d = a.data();
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / factor) * w..(y / factor + 1) * w];
                let drow = &mut dst[y * ow..(y + 1) * ow];
                for x in 0..ow {
                    drow[x] = srow[x / factor];
                }
            }
        }
    }
    if !tracking(&[a]) {
        return Tensor::from_vec(vec![n, c, oh, ow], out);
    }
    let ah = a.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            // each source cell receives the sum over its replicated block
            let buf = sink.entry(&ah);
            for plane in 0..n * c {
                let gsrc = &gout[plane * oh * ow..(plane + 1) * oh * ow];
                let gdst = &mut buf[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    let grow = &gsrc[y * ow..(y + 1) * ow];
                    let drow = &mut gdst[(y / factor) * w..(y / factor + 1) * w];
                    for x in 0..ow {
                        drow[x / factor] = drow[x / factor] + grow[x];
                    }
                }
            }
        }),
    ))
}

/// Nearest-neighbor downsampling: keeps the top-left cell of each
/// `factor x factor` block. Requires extents divisible by `factor`.
pub fn subsample<S: Scalar>(a: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let [n, c, h, w] = expect_4d("subsample", a)?;
    if factor < 1 {
        return Err(Error::invalid("subsample", "factor must be >= 1".to_string()));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "subsample",
            format!("extents {}x{} not divisible by {}", h, w, factor),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![S::zero(); n * c * oh * ow];
    {
        let d = a.data();
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[y * factor * w + x * factor];
                }
            }
        }
    }
    if !tracking(&[a]) {
        return Tensor::from_vec(vec![n, c, oh, ow], out);
    }
    let ah = a.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let buf = sink.entry(&ah);
            for plane in 0..n * c {
                let gsrc = &gout[plane * oh * ow..(plane + 1) * oh * ow];
                let gdst = &mut buf[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let off = y * factor * w + x * factor;
                        gdst[off] = gdst[off] + gsrc[y * ow + x];
                    }
                }
            }
        }),
    ))
}

/// Nearest-neighbor resize to `(out_h, out_w)`. Each axis must scale by an
/// integer factor, up (block replication) or down (top-left subsampling).
pub fn nearest_resize<S: Scalar>(a: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let [n, c, h, w] = expect_4d("nearest_resize", a)?;
    for (from, to) in [(h, out_h), (w, out_w)] {
        if to == 0 || (to % from != 0 && from % to != 0) {
            return Err(Error::shape(
                "nearest_resize",
                format!("non-integer factor: {}x{} -> {}x{}", h, w, out_h, out_w),
            ));
        }
    }
    if (h, w) == (out_h, out_w) {
        // still a distinct graph node so gradients route normally
        return reshape(a, vec![n, c, h, w]);
    }
    let map_y: Vec<usize> = (0..out_h).map(|y| y * h / out_h).collect();
    let map_x: Vec<usize> = (0..out_w).map(|x| x * w / out_w).collect();

    let mut out = vec![S::zero(); n * c * out_h * out_w];
    {
        let d = a.data();
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for y in 0..out_h {
                let srow = &src[map_y[y] * w..(map_y[y] + 1) * w];
                let drow = &mut dst[y * out_w..(y + 1) * out_w];
                for x in 0..out_w {
                    drow[x] = srow[map_x[x]];
                }
            }
        }
    }
    if !tracking(&[a]) {
        return Tensor::from_vec(vec![n, c, out_h, out_w], out);
    }
    let ah = a.clone();
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        out,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let buf = sink.entry(&ah);
            for plane in 0..n * c {
                let gsrc = &gout[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                let gdst = &mut buf[plane * h * w..(plane + 1) * h * w];
                for y in 0..out_h {
                    let grow = &gsrc[y * out_w..(y + 1) * out_w];
                    let drow = &mut gdst[map_y[y] * w..(map_y[y] + 1) * w];
                    for x in 0..out_w {
                        drow[map_x[x]] = drow[map_x[x]] + grow[x];
                    }
                }
            }
        }),
    ))
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximal element in row-major order.
pub fn maxpool2<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, h, w] = expect_4d("maxpool2", a)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("extents {}x{} must be even", h, w),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![S::zero(); n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    {
        let d = a.data();
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let base = plane * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let offs = [
                        2 * y * w + 2 * x,
                        2 * y * w + 2 * x + 1,
                        (2 * y + 1) * w + 2 * x,
                        (2 * y + 1) * w + 2 * x + 1,
                    ];
                    let mut best = offs[0];
                    let mut bv = src[offs[0]];
                    for &o in &offs[1..] {
                        if src[o] > bv {
                            bv = src[o];
                            best = o;
                        }
                    }
                    out[base + y * ow + x] = bv;
                    argmax[base + y * ow + x] = best as u32;
                }
            }
        }
    }
    if !tracking(&[a]) {
        return Tensor::from_vec(vec![n, c, oh, ow], out);
    }
    let ah = a.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        grad_parents(&[a]),
        Box::new(move |gout, sink| {
            let buf = sink.entry(&ah);
            for plane in 0..n * c {
                let base = plane * oh * ow;
                let gdst = &mut buf[plane * h * w..(plane + 1) * h * w];
                for i in 0..oh * ow {
                    let o = argmax[base + i] as usize;
                    gdst[o] = gdst[o] + gout[base + i];
                }
            }
        }),
    ))
}

/// Broadcast-adds `bias[n]` over the last dimension of `x[..., n]`.
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let xs = x.shape();
    let bs = bias.shape();
    let n = *xs.last().unwrap_or(&0);
    if bs.len() != 1 || bs[0] != n {
        return Err(Error::shape(
            "add_bias",
            format!("bias {:?} does not match last extent of {:?}", bs, xs),
        ));
    }
    let rows = x.numel() / n;
    let mut out = x.to_vec();
    {
        let b = bias.data();
        for r in 0..rows {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.iter()) {
                *o = *o + *bv;
            }
        }
    }
    if !tracking(&[x, bias]) {
        return Tensor::from_vec(xs, out);
    }
    let (xh, bh) = (x.clone(), bias.clone());
    Ok(Tensor::from_op(
        xs,
        out,
        grad_parents(&[x, bias]),
        Box::new(move |gout, sink| {
            if xh.needs_grad() {
                sink.add(&xh, gout);
            }
            if bh.needs_grad() {
                let buf = sink.entry(&bh);
                for r in 0..rows {
                    for (g, d) in buf.iter_mut().zip(&gout[r * n..(r + 1) * n]) {
                        *g = *g + *d;
                    }
                }
            }
        }),
    ))
}
