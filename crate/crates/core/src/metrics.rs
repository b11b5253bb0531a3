//! Full-reference image quality: PSNR over RGB and luma SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::image::ImageBuffer;

/// Stand-in for an infinite PSNR in logs and reports.
pub const PSNR_LOG_CAP: f64 = 100.0;

fn same_size(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return dim_err(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        ));
    }
    Ok(())
}

/// Mean squared error over all channels.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_size(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

/// PSNR with infinity replaced by [`PSNR_LOG_CAP`].
pub fn psnr_capped(db: f64) -> f64 {
    db.min(PSNR_LOG_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimSpec {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimSpec {
    fn default() -> Self {
        SsimSpec {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimSpec {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (wo, ho) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = taps.iter().enumerate().map(|(t, &g)| g * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = taps.iter().enumerate().map(|(t, &g)| g * rows[(yo + t) * wo + xo]).sum();
        }
    }
    out
}

/// Local SSIM map of two `w x h` planes (valid region only).
pub fn ssim_map(a: &[f64], b: &[f64], w: usize, h: usize, spec: &SsimSpec) -> Result<Vec<f64>> {
    if a.len() != w * h || b.len() != w * h {
        return dim_err(format!("ssim planes must hold {w}x{h} values"));
    }
    if w < spec.window || h < spec.window {
        return dim_err(format!("{w}x{h} plane is smaller than the {0}x{0} window", spec.window));
    }
    let taps = spec.taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(a, a), w, h, &taps);
    let bb = filter_valid(&prod(b, b), w, h, &taps);
    let ab = filter_valid(&prod(a, b), w, h, &taps);
    let (c1, c2) = (spec.c1(), spec.c2());
    Ok((0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect())
}

/// Mean SSIM of the luma planes.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, spec: &SsimSpec) -> Result<f64> {
    same_size(a, b)?;
    let la: Vec<f64> = a.luma().into_iter().map(f64::from).collect();
    let lb: Vec<f64> = b.luma().into_iter().map(f64::from).collect();
    let map = ssim_map(&la, &lb, a.width(), a.height(), spec)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// One scored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricRecord {
    pub fn score(image_id: impl Into<String>, output: &ImageBuffer, reference: &ImageBuffer) -> Result<Self> {
        Ok(MetricRecord {
            image_id: image_id.into(),
            psnr_db: psnr_capped(psnr(output, reference)?),
            ssim: ssim(output, reference, &SsimSpec::default())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(seed: u64, amp: f32) -> ImageBuffer {
        let mut s = seed;
        ImageBuffer::from_fn(24, 20, |x, y| {
            let mut v = [0.0; 3];
            for c in &mut v {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let r = (s >> 40) as f32 / (1u64 << 24) as f32;
                *c = 0.5 + 0.3 * ((x + 2 * y) as f32 / 40.0).sin() + amp * (r - 0.5);
            }
            v
        })
        .unwrap()
    }

    #[test]
    fn identical_images() {
        let a = noise(1, 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr_capped(psnr(&a, &a).unwrap()), 100.0);
        assert!((ssim(&a, &a, &SsimSpec::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_closed_form() {
        let a = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
        let b = ImageBuffer::filled(16, 16, [0.5 + 10.0 / 255.0; 3]).unwrap();
        let expect = 20.0 * (255.0f64 / 10.0).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-4);
    }

    #[test]
    fn symmetric() {
        let (a, b) = (noise(2, 0.3), noise(3, 0.3));
        let s = SsimSpec::default();
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b, &s).unwrap() - ssim(&b, &a, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_planes() {
        let s = SsimSpec::default();
        let c1 = s.c1();
        let expect = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        let map = ssim_map(&[0.5; 256], &[0.6; 256], 16, 16, &s).unwrap();
        assert!(map.iter().all(|v| (v - expect).abs() < 1e-9));
    }

    #[test]
    fn window_is_normalized() {
        let t = SsimSpec::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let clean = noise(5, 0.0);
        let mut last = f64::INFINITY;
        for amp in [0.02, 0.05, 0.1, 0.2] {
            let p = psnr(&clean, &noise(5, amp)).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn size_mismatch() {
        let a = ImageBuffer::filled(16, 16, [0.1; 3]).unwrap();
        let b = ImageBuffer::filled(16, 17, [0.1; 3]).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b, &SsimSpec::default()).is_err());
    }
}
