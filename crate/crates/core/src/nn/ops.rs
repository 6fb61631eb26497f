//! Differentiable tensor ops built from primitives that have backward passes.

use candle_core::{DType, Device, Tensor, D};

use super::flops;
use crate::error::{Error, Result};

/// Softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Matmul that records its MACs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = a.matmul(b)?;
    let k = a.dim(D::Minus1)?;
    flops::record((out.elem_count() * k) as u64);
    Ok(out)
}

/// Bilinear weights mapping `n_in` samples to `n_out` (half-pixel centers,
/// corners not aligned), laid out `(n_in, n_out)` for right-multiplication.
fn bilinear_matrix_t(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_in * n_out];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let l1 = (src - i0 as f64) as f32;
        m[i0 * n_out + o] += 1.0 - l1;
        m[i1 * n_out + o] += l1;
    }
    m
}

/// Adaptive average-pooling weights, `(n_in, n_out)`.
fn avg_pool_matrix_t(n_in: usize, n_out: usize) -> Vec<f32> {
    let mut m = vec![0f32; n_in * n_out];
    for o in 0..n_out {
        let start = o * n_in / n_out;
        let end = ((o + 1) * n_in).div_ceil(n_out);
        let w = 1.0 / (end - start) as f32;
        for i in start..end {
            m[i * n_out + o] = w;
        }
    }
    m
}

fn matrix(values: Vec<f32>, rows: usize, cols: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), dev)?.to_dtype(dtype)?)
}

/// Applies `(H, oh)` and `(W, ow)` matrices along the spatial axes of a
/// `(B, C, H, W)` tensor.
fn separable(x: &Tensor, rh_t: Option<&Tensor>, rw_t: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut y = x.clone();
    let mut w_now = w;
    if let Some(rw) = rw_t {
        let ow = rw.dim(1)?;
        y = y.contiguous()?.reshape((b * c * h, w))?.matmul(rw)?.reshape((b, c, h, ow))?;
        w_now = ow;
    }
    if let Some(rh) = rh_t {
        let oh = rh.dim(1)?;
        y = y
            .transpose(2, 3)?
            .contiguous()?
            .reshape((b * c * w_now, h))?
            .matmul(rh)?
            .reshape((b, c, w_now, oh))?
            .transpose(2, 3)?
            .contiguous()?;
    }
    Ok(y)
}

/// Bilinear resize of a `(B, C, H, W)` tensor without corner alignment.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (dt, dev) = (x.dtype(), x.device());
    let rh = (h != oh)
        .then(|| matrix(bilinear_matrix_t(h, oh), h, oh, dt, dev))
        .transpose()?;
    let rw = (w != ow)
        .then(|| matrix(bilinear_matrix_t(w, ow), w, ow, dt, dev))
        .transpose()?;
    separable(x, rh.as_ref(), rw.as_ref())
}

/// Adaptive average pooling of a `(B, C, H, W)` tensor to `s x s`.
pub fn adaptive_avg_pool2d(x: &Tensor, s: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (dt, dev) = (x.dtype(), x.device());
    let ph = matrix(avg_pool_matrix_t(h, s), h, s, dt, dev)?;
    let pw = matrix(avg_pool_matrix_t(w, s), w, s, dt, dev)?;
    separable(x, Some(&ph), Some(&pw))
}

/// Every other element along `dim` starting at `start`, `n` elements.
fn strided2(x: &Tensor, dim: usize, start: usize, n: usize) -> Result<Tensor> {
    let s = x.narrow(dim, start, 2 * n)?;
    let mut dims = s.dims().to_vec();
    dims[dim] = n;
    dims.insert(dim + 1, 2);
    Ok(s.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// 3x3 max pooling with stride 2 and padding 1 for non-negative inputs
/// (zero padding then equals -inf padding).
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let oh = (h - 1) / 2 + 1;
    let ow = (w - 1) / 2 + 1;
    let xp = x
        .pad_with_zeros(2, 1, 1 + (2 * oh).saturating_sub(h))?
        .pad_with_zeros(3, 1, 1 + (2 * ow).saturating_sub(w))?;
    let mut rows = strided2(&xp, 2, 0, oh)?;
    for dy in 1..3 {
        rows = rows.maximum(&strided2(&xp, 2, dy, oh)?)?;
    }
    let mut out = strided2(&rows, 3, 0, ow)?;
    for dx in 1..3 {
        out = out.maximum(&strided2(&rows, 3, dx, ow)?)?;
    }
    Ok(out)
}

/// Dense convolution as an explicit im2col followed by one matmul; much
/// faster than the CPU backend's kernel for small channel counts and still
/// differentiable through narrow/cat/matmul. The input is split into
/// `stride x stride` phases once so that every tap is a plain window.
/// `weight` is `(C_out, C_in, k, k)`; no MACs are recorded here.
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!(
            "conv kernel {:?} (stride {stride}, padding {padding}) incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let s = stride;
    let oh = (h + 2 * padding - k) / s + 1;
    let ow = (w + 2 * padding - k) / s + 1;
    let hs = oh + (k - 1) / s;
    let ws = ow + (k - 1) / s;
    let xp = x
        .pad_with_zeros(2, padding, (s * hs).saturating_sub(h + padding))?
        .pad_with_zeros(3, padding, (s * ws).saturating_sub(w + padding))?
        .narrow(2, 0, s * hs)?
        .narrow(3, 0, s * ws)?;
    let phases = if s == 1 {
        xp.unsqueeze(2)?.unsqueeze(2)?
    } else {
        xp.reshape((b, c, hs, s, ws, s))?.permute((0, 1, 3, 5, 2, 4))?.contiguous()?
    };
    let mut cols = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            let tap = phases
                .narrow(2, dy % s, 1)?
                .narrow(3, dx % s, 1)?
                .narrow(4, dy / s, oh)?
                .narrow(5, dx / s, ow)?;
            cols.push(tap.reshape((b, c, 1, oh, ow))?);
        }
    }
    let col = Tensor::cat(&cols, 2)?.reshape((b, c * k * k, oh * ow))?;
    let wm = weight.reshape((co, c * k * k))?;
    Ok(wm.broadcast_matmul(&col)?.reshape((b, co, oh, ow))?)
}

/// Depthwise `k x k` convolution with "same" zero padding and stride 1.
/// `weight` is `(C, 1, k, k)`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (wc, one, k, k2) = weight.dims4()?;
    if wc != c || one != 1 || k != k2 || k % 2 == 0 {
        return Err(Error::Shape(format!(
            "depthwise kernel {:?} incompatible with {c} channels",
            weight.dims()
        )));
    }
    let p = k / 2;
    let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let wk = weight.reshape((c, k * k))?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..k {
        let band = xp.narrow(2, dy, h)?;
        for dx in 0..k {
            let tap = wk.narrow(1, dy * k + dx, 1)?.reshape((1, c, 1, 1))?;
            let term = band.narrow(3, dx, w)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
    }
    flops::record((b * c * h * w * k * k) as u64);
    let mut out = acc.expect("kernel has at least one tap");
    if let Some(bias) = bias {
        out = out.broadcast_add(&bias.reshape((1, c, 1, 1))?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(v: Vec<f32>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(x: &Tensor) -> Vec<f32> {
        x.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn im2col_conv_matches_backend() {
        use candle_core::Var;
        let dev = Device::Cpu;
        for (c, co, hw, k, s, p) in [(3, 5, 19, 7, 2, 3), (4, 6, 9, 3, 1, 1), (2, 3, 8, 3, 2, 1), (3, 4, 16, 4, 4, 0), (2, 2, 5, 2, 1, 0)] {
            let x = Var::from_tensor(&Tensor::randn(0f32, 1., (2, c, hw, hw), &dev).unwrap()).unwrap();
            let w = Var::from_tensor(&Tensor::randn(0f32, 1., (co, c, k, k), &dev).unwrap()).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), p, s, 1, 1).unwrap();
            let ours = conv2d_im2col(x.as_tensor(), w.as_tensor(), p, s).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            for (a, b) in flat(&ours).iter().zip(flat(&reference)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
            }
            let probe = Tensor::randn(0f32, 1., ours.dims(), &dev).unwrap();
            let g1 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let a = flat(g1.get(v.as_tensor()).unwrap());
                let b = flat(g2.get(v.as_tensor()).unwrap());
                for (a, b) in a.iter().zip(b) {
                    assert_abs_diff_eq!(*a, b, epsilon = 1e-3);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [1000., 1000., 1000.]], &Device::Cpu).unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in &s {
            assert_abs_diff_eq!(row.iter().sum::<f32>(), 1.0, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(s[1][0], 1.0 / 3.0, epsilon = 1e-6);
        let e: f32 = (1f32.exp() + 2f32.exp() + 3f32.exp()).recip();
        assert_abs_diff_eq!(s[0][2], 3f32.exp() * e, epsilon = 1e-6);
    }

    #[test]
    fn bilinear_upsample_matches_reference_values() {
        // 1D reference for 2 -> 4 with half-pixel centers: [a, .75a+.25b, .25a+.75b, b]
        let x = t(vec![0., 4.], (1, 1, 1, 2));
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(flat(&y), vec![0., 1., 3., 4.]);
        let c = t(vec![2.5; 9], (1, 1, 3, 3));
        let y = resize_bilinear(&c, 7, 5).unwrap();
        assert!(flat(&y).iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn adaptive_pool_bins() {
        let x = t((0..10).map(|v| v as f32).collect(), (1, 1, 1, 10));
        let y = adaptive_avg_pool2d(&x.broadcast_as((1, 1, 3, 10)).unwrap().contiguous().unwrap(), 3).unwrap();
        // bins over width 10 into 3: [0,4), [3,7), [6,10)
        let r = flat(&y);
        assert_abs_diff_eq!(r[0], 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r[1], 4.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r[2], 7.5, epsilon = 1e-6);
    }

    #[test]
    fn max_pool_matches_naive() {
        for (h, w) in [(8, 8), (7, 9), (5, 4)] {
            let v: Vec<f32> = (0..h * w).map(|i| ((i * 37) % 23) as f32).collect();
            let x = t(v.clone(), (1, 1, h, w));
            let y = max_pool_3x3_s2(&x).unwrap();
            let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
            assert_eq!(y.dims4().unwrap(), (1, 1, oh, ow));
            let got = flat(&y);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = 0f32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = ((2 * oy + dy) as isize - 1, (2 * ox + dx) as isize - 1);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                m = m.max(v[yy as usize * w + xx as usize]);
                            }
                        }
                    }
                    assert_eq!(got[oy * ow + ox], m);
                }
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1., (2, 3, 6, 5), &dev).unwrap();
        let k = Tensor::randn(0f32, 1., (3, 1, 3, 3), &dev).unwrap();
        let a = depthwise_conv2d(&x, &k, None).unwrap();
        let b = x.conv2d(&k, 1, 1, 1, 3).unwrap();
        for (p, q) in flat(&a).iter().zip(flat(&b)) {
            assert_abs_diff_eq!(*p, q, epsilon = 1e-4);
        }
    }
}
