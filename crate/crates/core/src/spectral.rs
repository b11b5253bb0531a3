//! Fourier-domain manipulations of images: swapping spectral components
//! between two images and rescaling the amplitude in a local band.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::{irfft2_planes, rfft2_planes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Phase,
    Imaginary,
    Amplitude,
    Real,
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "phase" => Ok(Component::Phase),
            "imaginary" | "imag" => Ok(Component::Imaginary),
            "amplitude" | "amp" => Ok(Component::Amplitude),
            "real" => Ok(Component::Real),
            _ => Err(Error::Config(format!("unknown spectral component {s:?}"))),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Component::Phase => "phase",
            Component::Imaginary => "imaginary",
            Component::Amplitude => "amplitude",
            Component::Real => "real",
        };
        f.write_str(s)
    }
}

/// Half spectra of the three colour planes.
struct Spectrum {
    re: Vec<f64>,
    im: Vec<f64>,
    w: usize,
    h: usize,
}

impl Spectrum {
    fn of(img: &ImageBuffer) -> Self {
        let (w, h) = (img.width(), img.height());
        let planes: Vec<f64> = (0..3).flat_map(|c| img.channel(c)).map(f64::from).collect();
        let (re, im) = rfft2_planes(&planes, 3, h, w);
        Spectrum { re, im, w, h }
    }

    fn columns(&self) -> usize {
        self.w / 2 + 1
    }

    /// Inverse transform without clamping, three `h x w` planes.
    fn planes(&self) -> Vec<f64> {
        irfft2_planes(&self.re, &self.im, 3, self.h, self.w)
    }

    fn image(&self) -> Result<ImageBuffer> {
        let p = self.planes();
        let n = self.w * self.h;
        let f = |c: usize| p[c * n..(c + 1) * n].iter().map(|&v| v as f32).collect::<Vec<_>>();
        let (r, g, b) = (f(0), f(1), f(2));
        ImageBuffer::from_planes(self.w, self.h, [&r, &g, &b])
    }
}

/// Exchanges one spectral component between `a` and `b`; each result keeps the
/// complementary component of its own image. Outputs are clamped to `[0, 1]`.
pub fn swap_components(a: &ImageBuffer, b: &ImageBuffer, which: Component) -> Result<(ImageBuffer, ImageBuffer)> {
    if a.width() != b.width() || a.height() != b.height() {
        return dim_err(format!(
            "swap needs equal sizes, got {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        ));
    }
    let (mut sa, mut sb) = (Spectrum::of(a), Spectrum::of(b));
    for i in 0..sa.re.len() {
        let (ar, ai, br, bi) = (sa.re[i], sa.im[i], sb.re[i], sb.im[i]);
        match which {
            Component::Real => {
                sa.re[i] = br;
                sb.re[i] = ar;
            }
            Component::Imaginary => {
                sa.im[i] = bi;
                sb.im[i] = ai;
            }
            Component::Amplitude | Component::Phase => {
                let (amp_a, amp_b) = (ar.hypot(ai), br.hypot(bi));
                let (ph_a, ph_b) = (ai.atan2(ar), bi.atan2(br));
                // Result a' takes b's named component.
                let (ma, pa, mb, pb) = match which {
                    Component::Amplitude => (amp_b, ph_a, amp_a, ph_b),
                    _ => (amp_a, ph_b, amp_b, ph_a),
                };
                sa.re[i] = ma * pa.cos();
                sa.im[i] = ma * pa.sin();
                sb.re[i] = mb * pb.cos();
                sb.im[i] = mb * pb.sin();
            }
        }
    }
    Ok((sa.image()?, sb.image()?))
}

/// Rectangle of stored half-spectrum bins: rows `[row, row + rows)`, columns `[col, col + cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpectrumRegion {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for SpectrumRegion {
    type Err = Error;

    /// `row,col,rows,cols`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("region {s:?}: {e}")))?;
        match v[..] {
            [row, col, rows, cols] => Ok(SpectrumRegion { row, col, rows, cols }),
            _ => Err(Error::Config(format!("region {s:?} needs four values row,col,rows,cols"))),
        }
    }
}

/// Scales the amplitude inside `region` by `gain` and returns the unclamped
/// `3 x h x w` planes. Bins in the self-conjugate columns are scaled together
/// with their mirror so the image stays real.
pub fn modify_local_amplitude_planes(a: &ImageBuffer, region: SpectrumRegion, gain: f64) -> Result<Vec<f64>> {
    let mut s = Spectrum::of(a);
    let (h, wf) = (s.h, s.columns());
    if region.rows == 0 || region.cols == 0 || region.row + region.rows > h || region.col + region.cols > wf {
        return config_err(format!("region {region:?} lies outside the {h}x{wf} half spectrum"));
    }
    if !gain.is_finite() || gain < 0.0 {
        return config_err(format!("gain must be finite and non-negative, got {gain}"));
    }
    let self_conjugate = |l: usize| l == 0 || (s.w % 2 == 0 && l == s.w / 2);
    let mut hit = vec![false; h * wf];
    for k in region.row..region.row + region.rows {
        for l in region.col..region.col + region.cols {
            hit[k * wf + l] = true;
            if self_conjugate(l) {
                hit[((h - k) % h) * wf + l] = true;
            }
        }
    }
    for c in 0..3 {
        for (i, _) in hit.iter().enumerate().filter(|(_, &m)| m) {
            s.re[c * h * wf + i] *= gain;
            s.im[c * h * wf + i] *= gain;
        }
    }
    Ok(s.planes())
}

/// [`modify_local_amplitude_planes`] clamped back into an image.
pub fn modify_local_amplitude(a: &ImageBuffer, region: SpectrumRegion, gain: f64) -> Result<ImageBuffer> {
    let p = modify_local_amplitude_planes(a, region, gain)?;
    let n = a.width() * a.height();
    let f = |c: usize| p[c * n..(c + 1) * n].iter().map(|&v| v as f32).collect::<Vec<_>>();
    let (r, g, b) = (f(0), f(1), f(2));
    ImageBuffer::from_planes(a.width(), a.height(), [&r, &g, &b])
}
