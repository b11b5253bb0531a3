//! Real-input 2-D DFT over the last two axes.
//!
//! Forward is unnormalized, the inverse carries `1/(H*W)`. Spectra keep the
//! `W/2 + 1` non-redundant columns; the original width travels with the
//! [`ComplexPair`] so odd widths invert exactly.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::layout::concat;
use super::{flops, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Real and imaginary parts of a half spectrum, `B x C x H x (W/2+1)` each.
#[derive(Debug, Clone)]
pub struct ComplexPair<T: Scalar> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
    /// Spatial width of the signal the spectrum came from.
    pub width: usize,
}

impl<T: Scalar> ComplexPair<T> {
    pub fn new(real: Tensor<T>, imag: Tensor<T>, width: usize) -> Result<Self> {
        if real.shape() != imag.shape() {
            return dim_err(format!(
                "complex pair parts differ: {:?} vs {:?}",
                real.shape(),
                imag.shape()
            ));
        }
        let [_, _, _, wf] = real.dims4()?;
        if wf != width / 2 + 1 {
            return dim_err(format!("half spectrum has {wf} columns, width {width} needs {}", width / 2 + 1));
        }
        Ok(ComplexPair { real, imag, width })
    }
}

/// Multiplicity of column `l` in the full Hermitian spectrum.
fn column_weight(l: usize, w: usize) -> f64 {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// `1 x 1 x H x (W/2+1)` multiplicities of the stored bins; a weighted sum over the
/// half spectrum equals the plain sum over the full one.
pub fn spectrum_weights<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let wf = w / 2 + 1;
    let data = (0..h * wf).map(|i| T::lit(column_weight(i % wf, w))).collect();
    Tensor::from_vec(data, &[1, 1, h, wf]).expect("weight shape")
}

pub(crate) fn rfft2_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let wf = w / 2 + 1;
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft_forward(w);
    let col = planner.plan_fft_forward(h);
    let mut re = vec![T::zero(); planes * h * wf];
    let mut im = vec![T::zero(); planes * h * wf];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut tbuf = vec![Complex::new(T::zero(), T::zero()); wf * h];
    for p in 0..planes {
        for (b, &v) in buf.iter_mut().zip(&x[p * h * w..(p + 1) * h * w]) {
            *b = Complex::new(v, T::zero());
        }
        row.process(&mut buf);
        for k in 0..h {
            for l in 0..wf {
                tbuf[l * h + k] = buf[k * w + l];
            }
        }
        col.process(&mut tbuf);
        let base = p * h * wf;
        for k in 0..h {
            for l in 0..wf {
                let v = tbuf[l * h + k];
                re[base + k * wf + l] = v.re;
                im[base + k * wf + l] = v.im;
            }
        }
    }
    (re, im)
}

pub(crate) fn irfft2_planes<T: Scalar>(re: &[T], im: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wf = w / 2 + 1;
    let mut planner = FftPlanner::<T>::new();
    let row = planner.plan_fft_inverse(w);
    let col = planner.plan_fft_inverse(h);
    let scale = T::lit(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); planes * h * w];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut tbuf = vec![Complex::new(T::zero(), T::zero()); wf * h];
    for p in 0..planes {
        let base = p * h * wf;
        for k in 0..h {
            for l in 0..wf {
                tbuf[l * h + k] = Complex::new(re[base + k * wf + l], im[base + k * wf + l]);
            }
        }
        col.process(&mut tbuf);
        for n in 0..h {
            for l in 0..w {
                buf[n * w + l] = if l < wf {
                    let y = tbuf[l * h + n];
                    if column_weight(l, w) == 1.0 {
                        Complex::new(y.re, T::zero())
                    } else {
                        y
                    }
                } else {
                    tbuf[(w - l) * h + n].conj()
                };
            }
        }
        row.process(&mut buf);
        for (o, b) in out[p * h * w..(p + 1) * h * w].iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }
    out
}

/// Stacks real parts in channels `[0, C)` and imaginary parts in `[C, 2C)`.
fn rfft2_stacked<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let wf = w / 2 + 1;
    flops::add((b * c) as u64 * flops::fft_plane(h, w));
    let (re, im) = rfft2_planes(x.data(), b * c, h, w);
    let half = c * h * wf;
    let mut out = Vec::with_capacity(2 * b * half);
    for n in 0..b {
        out.extend_from_slice(&re[n * half..(n + 1) * half]);
        out.extend_from_slice(&im[n * half..(n + 1) * half]);
    }
    Ok(Tensor::from_op("rfft2", vec![b, 2 * c, h, wf], out, &[x], move |g, _| {
        // adjoint: dx = H W * irfft2(G / weight)
        let mut gr = Vec::with_capacity(b * half);
        let mut gi = Vec::with_capacity(b * half);
        for n in 0..b {
            gr.extend_from_slice(&g[2 * n * half..(2 * n + 1) * half]);
            gi.extend_from_slice(&g[(2 * n + 1) * half..(2 * n + 2) * half]);
        }
        for idx in 0..gr.len() {
            let inv = T::lit(1.0 / column_weight(idx % wf, w));
            gr[idx] = gr[idx] * inv;
            gi[idx] = gi[idx] * inv;
        }
        let hw = T::lit((h * w) as f64);
        let dx = irfft2_planes(&gr, &gi, b * c, h, w).into_iter().map(|v| v * hw).collect();
        vec![Some(dx)]
    }))
}

fn irfft2_stacked<T: Scalar>(s: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, c2, hs, wf] = s.dims4()?;
    if hs != h || wf != w / 2 + 1 || c2 % 2 != 0 {
        return dim_err(format!("irfft2: spectrum {:?} does not match spatial {h}x{w}", s.shape()));
    }
    let c = c2 / 2;
    flops::add((b * c) as u64 * flops::fft_plane(h, w));
    let half = c * h * wf;
    let sd = s.data();
    let mut re = Vec::with_capacity(b * half);
    let mut im = Vec::with_capacity(b * half);
    for n in 0..b {
        re.extend_from_slice(&sd[2 * n * half..(2 * n + 1) * half]);
        im.extend_from_slice(&sd[(2 * n + 1) * half..(2 * n + 2) * half]);
    }
    let out = irfft2_planes(&re, &im, b * c, h, w);
    Ok(Tensor::from_op("irfft2", vec![b, c, h, w], out, &[s], move |g, _| {
        // adjoint: dX = weight / (H W) * rfft2(g)
        let (gr, gi) = rfft2_planes(g, b * c, h, w);
        let inv_hw = 1.0 / (h * w) as f64;
        let mut ds = Vec::with_capacity(2 * b * half);
        for n in 0..b {
            for part in [&gr, &gi] {
                ds.extend(
                    part[n * half..(n + 1) * half]
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * T::lit(column_weight(i % wf, w) * inv_hw)),
                );
            }
        }
        vec![Some(ds)]
    }))
}

/// Forward real-input 2-D DFT of a `B x C x H x W` tensor.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexPair<T>> {
    let [_, c, _, w] = x.dims4()?;
    let stacked = rfft2_stacked(x)?;
    Ok(ComplexPair {
        real: stacked.narrow(1, 0, c)?,
        imag: stacked.narrow(1, c, c)?,
        width: w,
    })
}

/// Inverse of [`fft2`], producing a `B x C x H x W` real tensor.
pub fn ifft2<T: Scalar>(f: &ComplexPair<T>, spatial: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w) = spatial;
    if w != f.width {
        return dim_err(format!("ifft2: spectrum was taken at width {}, asked for {w}", f.width));
    }
    let stacked = concat(&[&f.real, &f.imag], 1)?;
    irfft2_stacked(&stacked, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_only_dc() {
        let (h, w, c) = (6, 5, 0.25);
        let x = Tensor::<f64>::full(&[1, 1, h, w], c);
        let f = fft2(&x).unwrap();
        assert_eq!(f.real.shape(), &[1, 1, h, w / 2 + 1]);
        assert!((f.real.data()[0] - c * (h * w) as f64).abs() < 1e-12);
        for i in 1..f.real.numel() {
            assert!(f.real.data()[i].abs() < 1e-12);
            assert!(f.imag.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_even_and_odd() {
        for &(h, w) in &[(4usize, 6usize), (15, 17), (1, 3), (8, 1)] {
            let n = 2 * 4 * h * w;
            let x = Tensor::<f64>::from_vec((0..n).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect(), &[2, 4, h, w])
                .unwrap();
            let y = ifft2(&fft2(&x).unwrap(), (h, w)).unwrap();
            let err = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 5]);
        let f = fft2(&x).unwrap();
        assert!(ifft2(&f, (4, 4)).is_err());
    }
}
