//! Raw forward/backward kernels on `H×W×C` buffers. The graph layer wraps these.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    #[default]
    Nearest,
    Bilinear,
}

fn hwc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("{what} expects H×W×C, got {s:?}"))),
    }
}

pub fn conv2d_output_size(h: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
    }
    if k > h + 2 * padding {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded extent {}",
            h + 2 * padding
        )));
    }
    Ok((h + 2 * padding - k) / stride + 1)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

fn conv_geom(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    let (h, w, cin) = hwc(input, "conv2d input")?;
    let (k, k2, kcin, cout) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return Err(Error::Shape(format!("conv2d kernel must be k×k×Cin×Cout, got {s:?}"))),
    };
    if k != k2 {
        return Err(Error::Shape(format!("non-square kernel {k}×{k2}")));
    }
    if kcin != cin {
        return Err(Error::Shape(format!(
            "input has {cin} channels but kernel expects {kcin}"
        )));
    }
    let ho = conv2d_output_size(h, k, stride, padding)?;
    let wo = conv2d_output_size(w, k, stride, padding)?;
    Ok(ConvGeom {
        h,
        w,
        cin,
        k,
        cout,
        ho,
        wo,
        stride,
        padding,
    })
}

impl ConvGeom {
    /// Input coordinate for output coordinate `o` and kernel tap `kk`, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation `out[y,x,o] = Σ in[y·s+ky−p, x·s+kx−p, i] · k[ky,kx,i,o]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![0.0; g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let orow = &mut out[(oy * g.wo + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let px = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let wbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &v) in px.iter().enumerate() {
                        let wrow = &wt[wbase + ci * g.cout..][..g.cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += v * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.ho, g.wo, g.cout], out)
}

/// Returns `(∂/∂input, ∂/∂kernel)` given the upstream gradient. Either may be skipped.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = conv_geom(input, kernel, stride, padding)?;
    if grad_out.shape() != [g.ho, g.wo, g.cout] {
        return Err(Error::Shape("conv2d upstream gradient shape".into()));
    }
    let x = input.data();
    let wt = kernel.data();
    let go = grad_out.data();
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = want_kernel.then(|| vec![0.0; wt.len()]);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let grow = &go[(oy * g.wo + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let pbase = (iy * g.w + ix) * g.cin;
                    let wbase = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let woff = wbase + ci * g.cout;
                        if let Some(gx) = gx.as_mut() {
                            let wrow = &wt[woff..][..g.cout];
                            gx[pbase + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gw) = gw.as_mut() {
                            let v = x[pbase + ci];
                            for (gwv, &gov) in gw[woff..][..g.cout].iter_mut().zip(grow) {
                                *gwv += v * gov;
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = gx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    let gw = gw.map(|d| Tensor::new(kernel.shape().to_vec(), d)).transpose()?;
    Ok((gx, gw))
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
/// Returns the pooled map and, per output entry, the flat input index of the winner
/// (first maximum in row-major window order).
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = hwc(input, "max_pool2")?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Shape(format!("max_pool2 on {h}×{w}")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut arg = Vec::with_capacity(ho * wo * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if best == usize::MAX || x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![ho, wo, c], out)?, arg))
}

/// Source taps `(index, weight)` for one output coordinate along one axis.
fn axis_taps(out_len: usize, in_len: usize, o: usize, mode: ResizeMode) -> [(usize, f64); 2] {
    match mode {
        ResizeMode::Nearest => {
            let i = (o * in_len) / out_len;
            [(i, 1.0), (i, 0.0)]
        }
        ResizeMode::Bilinear => {
            let scale = in_len as f64 / out_len as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let f = src - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        }
    }
}

/// Spatial resize of an `H×W×C` map. Nearest replicates; bilinear uses
/// half-pixel centers with edge clamping.
pub fn resize(input: &Tensor, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor> {
    let (h, w, c) = hwc(input, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize to empty extent".into()));
    }
    let x = input.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for oy in 0..out_h {
        let ty = axis_taps(out_h, h, oy, mode);
        for ox in 0..out_w {
            let tx = axis_taps(out_w, w, ox, mode);
            let orow = &mut out[(oy * out_w + ox) * c..][..c];
            for &(iy, wy) in &ty {
                for &(ix, wx) in &tx {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let irow = &x[(iy * w + ix) * c..][..c];
                    for (o, &v) in orow.iter_mut().zip(irow) {
                        *o += wgt * v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Transpose of [`resize`]: scatters the upstream gradient back onto the input grid.
pub fn resize_backward(input_shape: &[usize], grad_out: &Tensor, mode: ResizeMode) -> Result<Tensor> {
    let (h, w, c) = match *input_shape {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::Shape("resize_backward input shape".into())),
    };
    let (out_h, out_w, _) = hwc(grad_out, "resize_backward")?;
    let go = grad_out.data();
    let mut gx = vec![0.0; h * w * c];
    for oy in 0..out_h {
        let ty = axis_taps(out_h, h, oy, mode);
        for ox in 0..out_w {
            let tx = axis_taps(out_w, w, ox, mode);
            let grow = &go[(oy * out_w + ox) * c..][..c];
            for &(iy, wy) in &ty {
                for &(ix, wx) in &tx {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let irow = &mut gx[(iy * w + ix) * c..][..c];
                    for (g, &v) in irow.iter_mut().zip(grow) {
                        *g += wgt * v;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Softmax along the last axis.
pub fn softmax_last(input: &Tensor) -> Result<Tensor> {
    let n = *input
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("softmax on a scalar".into()))?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax. Uses `g_j − ⟨g,p⟩ = Σ_i p_i (g_j − g_i)`
/// so saturated rows (some `p_i` rounding to 1) keep their tiny but nonzero gradients.
pub fn softmax_last_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = *probs.shape().last().expect("softmax has an axis");
    let mut gz = vec![0.0; probs.len()];
    for ((prow, grow), zrow) in probs
        .data()
        .chunks(n)
        .zip(grad_out.data().chunks(n))
        .zip(gz.chunks_mut(n))
    {
        for j in 0..n {
            let centered: f64 = (0..n)
                .filter(|&i| i != j)
                .map(|i| prow[i] * (grow[j] - grow[i]))
                .sum();
            zrow[j] = prow[j] * centered;
        }
    }
    Tensor::new(probs.shape().to_vec(), gz).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_scalar_product() {
        let x = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel_with_padding() {
        let x = Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.set(&[1, 1, 0, 0], 1.0);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(&[5, 5, 2], &mut rng);
            let k = random(&[3, 3, 2, 2], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let ho = (5 + 2 * pad - 3) / stride + 1;
            assert_eq!(y.shape(), &[ho, ho, 2]);
            for oy in 0..ho {
                for ox in 0..ho {
                    for o in 0..2 {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for i in 0..2 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    acc += x.get(&[iy as usize, ix as usize, i]) * k.get(&[ky, kx, i, o]);
                                }
                            }
                        }
                        assert!((y.get(&[oy, ox, o]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::zeros(&[4, 4, 2]);
        assert!(matches!(conv2d(&x, &Tensor::zeros(&[3, 3, 3, 1]), 1, 0), Err(Error::Shape(_))));
        assert!(conv2d(&x, &Tensor::zeros(&[7, 7, 2, 1]), 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), 0, 0).is_err());
    }

    #[test]
    fn pool_picks_max() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn nearest_resize_replicates_blocks() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = resize(&x, 4, 4, ResizeMode::Nearest).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn bilinear_preserves_constants_and_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::full(&[3, 5, 2], 1.5);
        let y = resize(&c, 7, 4, ResizeMode::Bilinear).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.5).abs() < 1e-12));
        // <R x, g> == <x, Rᵀ g>
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear] {
            let x = random(&[3, 5, 2], &mut rng);
            let g = random(&[7, 4, 2], &mut rng);
            let lhs: f64 = resize(&x, 7, 4, mode).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gb = resize_backward(x.shape(), &g, mode).unwrap();
            let rhs: f64 = x.data().iter().zip(gb.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetric_and_normalized() {
        let p = softmax_last(&Tensor::from_vec(vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 3, 5], &mut rng).map(|v| 30.0 * v);
        let p = softmax_last(&x).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn saturated_softmax_keeps_gradient() {
        let p = softmax_last(&Tensor::from_vec(vec![0.0, 50.0]).unwrap()).unwrap();
        assert_eq!(p.data()[1], 1.0);
        let g = softmax_last_backward(&p, &Tensor::from_vec(vec![0.0, 1.0]).unwrap());
        assert!(g.data()[1] > 0.0);
        assert!((g.data()[1] / p.data()[0] - 1.0).abs() < 1e-12);
    }
}
