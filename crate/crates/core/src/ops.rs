//! Numeric kernels shared by the forward API and the autograd tape.
//!
//! Each kernel has a plain forward and, where the tape needs it, explicit
//! backward companions. Kernels assert on shape errors; the public module
//! APIs validate and return `Result` before reaching them.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `a [M,K] · b [K,N] -> [M,N]`
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose2<S: Scalar>(m: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.at2(i, j);
        }
    }
    Tensor::matrix(c, r, out)
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_cols<S: Scalar>(m: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (m.rows(), m.cols());
    let mut out = vec![S::zero(); r * c];
    for j in 0..c {
        let mut mx = m.at2(0, j);
        for i in 1..r {
            mx = mx.max(m.at2(i, j));
        }
        let mut sum = S::zero();
        for i in 0..r {
            let e = (m.at2(i, j) - mx).exp();
            out[i * c + j] = e;
            sum = sum + e;
        }
        for i in 0..r {
            out[i * c + j] = out[i * c + j] / sum;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Backward of column softmax given the forward output `y`.
pub fn softmax_cols_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (y.rows(), y.cols());
    assert_eq!(y.dims(), dy.dims());
    let mut out = vec![S::zero(); r * c];
    for j in 0..c {
        let mut dot = S::zero();
        for i in 0..r {
            dot = dot + dy.at2(i, j) * y.at2(i, j);
        }
        for i in 0..r {
            out[i * c + j] = y.at2(i, j) * (dy.at2(i, j) - dot);
        }
    }
    Tensor::matrix(r, c, out)
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| {
        if v >= S::zero() {
            S::one() / (S::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (S::one() + e)
        }
    })
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let eff = dilation * (kernel - 1) + 1;
    assert!(
        input + 2 * pad >= eff,
        "conv kernel (effective {eff}) larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - eff) / stride + 1
}

/// 2-D convolution. `x [IC,H,W]`, `w [OC,IC,KH,KW]`, `b [OC]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor<S> {
    let (ic, h, wd) = (x.channels(), x.height(), x.width());
    let wd_dims = w.dims();
    assert_eq!(wd_dims.len(), 4, "conv weight must be 4-D");
    let (oc, wic, kh, kw) = (wd_dims[0], wd_dims[1], wd_dims[2], wd_dims[3]);
    assert_eq!(ic, wic, "conv input channels {ic} vs weight {wic}");
    assert_eq!(b.len(), oc, "conv bias length");
    let oh = conv_out_dim(h, kh, stride, pad, dilation);
    let ow = conv_out_dim(wd, kw, stride, pad, dilation);

    let mut out = vec![S::zero(); oc * oh * ow];
    for o in 0..oc {
        let bias = b.data()[o];
        for v in out[o * oh * ow..(o + 1) * oh * ow].iter_mut() {
            *v = bias;
        }
    }
    let xd = x.data();
    let wdt = w.data();
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdt[((o * ic + i) * kh + ky) * kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (i * h + iy as usize) * wd;
                        let orow = (o * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            out[orow + ox] = out[orow + ox] + wv * xd[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::feature_map(oc, oh, ow, out)
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_input_grad<S: Scalar>(
    dy: &Tensor<S>,
    w: &Tensor<S>,
    input_dims: (usize, usize, usize),
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor<S> {
    let (ic, h, wd) = input_dims;
    let wd_dims = w.dims();
    let (oc, _, kh, kw) = (wd_dims[0], wd_dims[1], wd_dims[2], wd_dims[3]);
    let (oh, ow) = (dy.height(), dy.width());
    assert_eq!(dy.channels(), oc);

    let mut dx = vec![S::zero(); ic * h * wd];
    let dyd = dy.data();
    let wdt = w.data();
    for o in 0..oc {
        for i in 0..ic {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdt[((o * ic + i) * kh + ky) * kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (i * h + iy as usize) * wd;
                        let orow = (o * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            dx[xrow + ix as usize] = dx[xrow + ix as usize] + wv * dyd[orow + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::feature_map(ic, h, wd, dx)
}

/// Gradients of conv2d w.r.t. weight and bias.
pub fn conv2d_param_grads<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    w_dims: &[usize],
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (Tensor<S>, Tensor<S>) {
    let (ic, h, wd) = (x.channels(), x.height(), x.width());
    let (oc, _, kh, kw) = (w_dims[0], w_dims[1], w_dims[2], w_dims[3]);
    let (oh, ow) = (dy.height(), dy.width());

    let mut dw = vec![S::zero(); oc * ic * kh * kw];
    let mut db = vec![S::zero(); oc];
    let xd = x.data();
    let dyd = dy.data();
    for o in 0..oc {
        let mut bsum = S::zero();
        for v in &dyd[o * oh * ow..(o + 1) * oh * ow] {
            bsum = bsum + *v;
        }
        db[o] = bsum;
        for i in 0..ic {
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = S::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (i * h + iy as usize) * wd;
                        let orow = (o * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc = acc + dyd[orow + ox] * xd[xrow + ix as usize];
                        }
                    }
                    dw[((o * ic + i) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    (
        Tensor::new(w_dims.to_vec(), dw),
        Tensor::vector(db),
    )
}

fn bilinear_coeffs(out: usize, inp: usize, o: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(inp - 1);
    let i1 = (i0 + 1).min(inp - 1);
    let f = src - i0 as f64;
    (i0, i1, f.clamp(0.0, 1.0))
}

/// Bilinear resize of a `[C,H,W]` map to `[C,OH,OW]`.
pub fn upsample_bilinear<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Tensor<S> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let mut out = vec![S::zero(); c * oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_coeffs(oh, h, oy);
        let fy = S::from_f64(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_coeffs(ow, w, ox);
            let fx = S::from_f64(fx);
            for ch in 0..c {
                let tl = x.at3(ch, y0, x0);
                let tr = x.at3(ch, y0, x1);
                let bl = x.at3(ch, y1, x0);
                let br = x.at3(ch, y1, x1);
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out[(ch * oh + oy) * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::feature_map(c, oh, ow, out)
}

/// Backward of bilinear resize: scatter output grads onto the input grid.
pub fn upsample_bilinear_backward<S: Scalar>(dy: &Tensor<S>, ih: usize, iw: usize) -> Tensor<S> {
    let (c, oh, ow) = (dy.channels(), dy.height(), dy.width());
    let mut dx = vec![S::zero(); c * ih * iw];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_coeffs(oh, ih, oy);
        let fy = S::from_f64(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_coeffs(ow, iw, ox);
            let fx = S::from_f64(fx);
            let one = S::one();
            for ch in 0..c {
                let g = dy.at3(ch, oy, ox);
                dx[(ch * ih + y0) * iw + x0] =
                    dx[(ch * ih + y0) * iw + x0] + g * (one - fy) * (one - fx);
                dx[(ch * ih + y0) * iw + x1] = dx[(ch * ih + y0) * iw + x1] + g * (one - fy) * fx;
                dx[(ch * ih + y1) * iw + x0] = dx[(ch * ih + y1) * iw + x0] + g * fy * (one - fx);
                dx[(ch * ih + y1) * iw + x1] = dx[(ch * ih + y1) * iw + x1] + g * fy * fx;
            }
        }
    }
    Tensor::feature_map(c, ih, iw, dx)
}

/// `[C,H,W] -> [C,1,1]` channel means.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let n = S::from_usize(h * w);
    let mut out = vec![S::zero(); c];
    for ch in 0..c {
        let mut sum = S::zero();
        for v in &x.data()[ch * h * w..(ch + 1) * h * w] {
            sum = sum + *v;
        }
        out[ch] = sum / n;
    }
    Tensor::feature_map(c, 1, 1, out)
}

pub fn global_avg_pool_backward<S: Scalar>(dy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let c = dy.channels();
    let n = S::from_usize(h * w);
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let g = dy.at3(ch, 0, 0) / n;
        for v in dx[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v = g;
        }
    }
    Tensor::feature_map(c, h, w, dx)
}

/// Tile a length-d vector over an `H×W` grid: `[d] -> [d,H,W]`.
pub fn tile_vector<S: Scalar>(z: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    assert_eq!(z.dims().len(), 1, "tile_vector wants a 1-D input");
    let d = z.len();
    let mut out = vec![S::zero(); d * h * w];
    for c in 0..d {
        let v = z.data()[c];
        for slot in out[c * h * w..(c + 1) * h * w].iter_mut() {
            *slot = v;
        }
    }
    Tensor::feature_map(d, h, w, out)
}

pub fn tile_vector_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (d, h, w) = (dy.channels(), dy.height(), dy.width());
    let mut dz = vec![S::zero(); d];
    for c in 0..d {
        let mut sum = S::zero();
        for v in &dy.data()[c * h * w..(c + 1) * h * w] {
            sum = sum + *v;
        }
        dz[c] = sum;
    }
    Tensor::vector(dz)
}

/// Concatenate feature maps along channels. Channel-major layout makes this
/// plain buffer concatenation.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty());
    let (h, w) = (parts[0].height(), parts[0].width());
    let mut total_c = 0;
    let mut data = Vec::new();
    for p in parts {
        assert_eq!((p.height(), p.width()), (h, w), "concat spatial mismatch");
        total_c += p.channels();
        data.extend_from_slice(p.data());
    }
    Tensor::feature_map(total_c, h, w, data)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<S: Scalar>(dy: &Tensor<S>, channel_sizes: &[usize]) -> Vec<Tensor<S>> {
    let (h, w) = (dy.height(), dy.width());
    assert_eq!(dy.channels(), channel_sizes.iter().sum::<usize>());
    let mut out = Vec::with_capacity(channel_sizes.len());
    let mut offset = 0;
    for &c in channel_sizes {
        let n = c * h * w;
        out.push(Tensor::feature_map(
            c,
            h,
            w,
            dy.data()[offset..offset + n].to_vec(),
        ));
        offset += n;
    }
    out
}

/// Per-pixel two-class softmax probabilities for `[2,H,W]` logits.
pub fn softmax2<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    assert_eq!(logits.channels(), 2, "softmax2 wants 2 channels");
    let (h, w) = (logits.height(), logits.width());
    let mut out = vec![S::zero(); 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let a = logits.at3(0, y, x);
            let b = logits.at3(1, y, x);
            let m = a.max(b);
            let ea = (a - m).exp();
            let eb = (b - m).exp();
            let sum = ea + eb;
            out[y * w + x] = ea / sum;
            out[h * w + y * w + x] = eb / sum;
        }
    }
    Tensor::feature_map(2, h, w, out)
}

/// Mean cross-entropy over valid pixels. `target` holds 0/1 class ids,
/// `valid` holds 1 where the pixel counts. Returns 0 when nothing is valid.
pub fn softmax2_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    target: &Tensor<S>,
    valid: &Tensor<S>,
) -> S {
    let (h, w) = (logits.height(), logits.width());
    assert_eq!(target.dims(), &[h, w], "target shape");
    assert_eq!(valid.dims(), &[h, w], "valid shape");
    let mut loss = S::zero();
    let mut n = S::zero();
    let half = S::from_f64(0.5);
    for y in 0..h {
        for x in 0..w {
            if valid.at2(y, x) <= half {
                continue;
            }
            let a = logits.at3(0, y, x);
            let b = logits.at3(1, y, x);
            let m = a.max(b);
            let lse = ((a - m).exp() + (b - m).exp()).ln() + m;
            let lt = if target.at2(y, x) > half { b } else { a };
            loss = loss - (lt - lse);
            n = n + S::one();
        }
    }
    if n == S::zero() {
        S::zero()
    } else {
        loss / n
    }
}

/// Backward of [`softmax2_cross_entropy`] w.r.t. the logits.
pub fn softmax2_cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    target: &Tensor<S>,
    valid: &Tensor<S>,
    upstream: S,
) -> Tensor<S> {
    let (h, w) = (logits.height(), logits.width());
    let mut n = S::zero();
    let half = S::from_f64(0.5);
    for y in 0..h {
        for x in 0..w {
            if valid.at2(y, x) > half {
                n = n + S::one();
            }
        }
    }
    let mut dx = Tensor::zeros(vec![2, h, w]);
    if n == S::zero() {
        return dx;
    }
    let probs = softmax2(logits);
    let scale = upstream / n;
    for y in 0..h {
        for x in 0..w {
            if valid.at2(y, x) <= half {
                continue;
            }
            let fg = target.at2(y, x) > half;
            let p0 = probs.at3(0, y, x);
            let p1 = probs.at3(1, y, x);
            let t0 = if fg { S::zero() } else { S::one() };
            let t1 = if fg { S::one() } else { S::zero() };
            dx.set3(0, y, x, (p0 - t0) * scale);
            dx.set3(1, y, x, (p1 - t1) * scale);
        }
    }
    dx
}
