//! Brute-force reference implementations, kept deliberately independent of
//! the tensor ops they are used to check: plain slices, nested loops, no
//! autodiff. Tests and the `oracle` CLI subcommand compare the optimized
//! paths against these.

/// Six-nested-loop cross-correlation on raw buffers.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y * stride + ky;
                                let ix = x * stride + kx;
                                if iy < padding || ix < padding {
                                    continue;
                                }
                                let (iy, ix) = (iy - padding, ix - padding);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                acc += weight[((co * cin + ci) * kh + ky) * kw + kx]
                                    * input[((b * cin + ci) * h + iy) * w + ix];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

/// 2x2/stride-2 max pool over raw buffers.
pub fn maxpool2_naive(input: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = input[plane * h * w + (2 * y + dy) * w + 2 * x + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[plane * oh * ow + y * ow + x] = best;
            }
        }
    }
    out
}

/// Triple-loop matrix product `a[m,p] * b[p,n]`.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..p {
                acc += a[i * p + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Dense scaled-dot-product attention with explicit loops:
/// `softmax(q kᵀ * scale) v` for `q[m,d]`, `k[l,d]`, `v[l,e]`.
pub fn dense_attention_naive(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    m: usize,
    d: usize,
    l: usize,
    e: usize,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; m * e];
    let mut logits = vec![0.0; l];
    for i in 0..m {
        for (j, logit) in logits.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..d {
                acc += q[i * d + t] * k[j * d + t];
            }
            *logit = acc * scale;
        }
        let mut mx = f64::NEG_INFINITY;
        for &z in logits.iter() {
            if z > mx {
                mx = z;
            }
        }
        let mut denom = 0.0;
        let mut weights = vec![0.0; l];
        for (wgt, &z) in weights.iter_mut().zip(logits.iter()) {
            *wgt = (z - mx).exp();
            denom += *wgt;
        }
        for wgt in weights.iter_mut() {
            *wgt /= denom;
        }
        for (j, wgt) in weights.iter().enumerate() {
            for t in 0..e {
                out[i * e + t] += wgt * v[j * e + t];
            }
        }
    }
    out
}

/// Scalar-loop soft Dice loss.
pub fn dice_loss_naive(m: &[f64], y: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sm = 0.0;
    let mut sy = 0.0;
    for i in 0..m.len() {
        inter += m[i] * y[i];
        sm += m[i];
        sy += y[i];
    }
    1.0 - (2.0 * inter + eps) / (sm + sy + eps)
}

/// Scalar-loop clamped binary cross-entropy.
pub fn bce_loss_naive(m: &[f64], y: &[f64], clamp: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.len() {
        let p = m[i].clamp(clamp, 1.0 - clamp);
        acc -= y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln();
    }
    acc / m.len() as f64
}

/// Pixel-count Dice over binary masks.
pub fn dsc_naive(pred: &[u8], gt: &[u8]) -> f64 {
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            inter += 1;
        }
        if pred[i] == 1 {
            np += 1;
        }
        if gt[i] == 1 {
            ng += 1;
        }
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Pixel-count IoU over binary masks.
pub fn iou_naive(pred: &[u8], gt: &[u8]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            inter += 1;
        }
        if pred[i] == 1 || gt[i] == 1 {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Connected components of a binary mask under 4-connectivity; returns the
/// pixel count of each component.
pub fn component_sizes(mask: &[u8], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] != 1 || seen[start] {
            continue;
        }
        let mut count = 0usize;
        stack.push(start);
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            count += 1;
            let (y, x) = (idx / w, idx % w);
            let mut push = |ny: usize, nx: usize| {
                let nidx = ny * w + nx;
                if mask[nidx] == 1 && !seen[nidx] {
                    seen[nidx] = true;
                    stack.push(nidx);
                }
            };
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < h {
                push(y + 1, x);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < w {
                push(y, x + 1);
            }
        }
        sizes.push(count);
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_sizes_sees_diagonals_as_separate() {
        // two pixels touching only diagonally are distinct under 4-connectivity
        let mask = vec![
            1, 0, 0, //
            0, 1, 1, //
            0, 0, 0,
        ];
        let mut sizes = component_sizes(&mask, 3, 3);
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
    }

    #[test]
    fn dense_attention_uniform_when_logits_equal() {
        // q orthogonal to every key => uniform weights => row mean of v
        let q = vec![0.0, 0.0];
        let k = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let v = vec![3.0, 6.0, 9.0];
        let out = dense_attention_naive(&q, &k, &v, 1, 2, 3, 1, 1.0);
        assert!((out[0] - 6.0).abs() < 1e-12);
    }
}
