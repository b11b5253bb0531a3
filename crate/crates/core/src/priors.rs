//! Dark channel prior and atmospheric-scattering haze synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::image::ImageBuffer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkChannelSpec {
    /// Odd side length of the square minimum window.
    pub patch: usize,
}

impl Default for DarkChannelSpec {
    fn default() -> Self {
        DarkChannelSpec { patch: 15 }
    }
}

impl DarkChannelSpec {
    pub fn new(patch: usize) -> Result<Self> {
        let spec = DarkChannelSpec { patch };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 2 == 0 {
            return config_err(format!("dark channel patch must be odd and positive, got {}", self.patch));
        }
        Ok(())
    }
}

/// Sliding minimum over a `patch x patch` window with replicated borders,
/// done as a row pass followed by a column pass.
fn window_min(plane: &[f32], w: usize, h: usize, patch: usize) -> Vec<f32> {
    let r = patch / 2;
    let mut rows = vec![0.0f32; w * h];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = line[lo..=hi].iter().copied().fold(f32::INFINITY, f32::min);
        }
    }
    let mut out = vec![0.0f32; w * h];
    for x in 0..w {
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f32::INFINITY, f32::min);
        }
    }
    out
}

/// Per-pixel minimum over RGB of an interleaved buffer.
fn channel_min(img: &ImageBuffer) -> Vec<f32> {
    img.data().chunks(3).map(|p| p[0].min(p[1]).min(p[2])).collect()
}

/// Dark channel as a row-major `H x W` map.
pub fn dark_channel_map(img: &ImageBuffer, spec: DarkChannelSpec) -> Result<Vec<f32>> {
    spec.validate()?;
    Ok(window_min(&channel_min(img), img.width(), img.height(), spec.patch))
}

/// Dark channel as a `1 x 1 x H x W` tensor.
pub fn dark_channel<T: Scalar>(img: &ImageBuffer, spec: DarkChannelSpec) -> Result<Tensor<T>> {
    let map = dark_channel_map(img, spec)?;
    Tensor::from_vec(map.into_iter().map(|v| T::lit(v as f64)).collect(), &[1, 1, img.height(), img.width()])
}

/// Dark channel of every image in a `B x 3 x H x W` batch; no gradient is recorded.
pub fn dark_channel_batch<T: Scalar>(x: &Tensor<T>, spec: DarkChannelSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let [b, c, h, w] = x.dims4()?;
    if c != 3 {
        return dim_err(format!("dark channel needs 3 colour channels, got {c}"));
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(b * plane);
    for n in 0..b {
        let base = n * 3 * plane;
        let mins: Vec<f32> = (0..plane)
            .map(|i| {
                let v = xd[base + i].min(xd[base + plane + i]).min(xd[base + 2 * plane + i]);
                v.as_f64() as f32
            })
            .collect();
        out.extend(window_min(&mins, w, h, spec.patch).into_iter().map(|v| T::lit(v as f64)));
    }
    Tensor::from_vec(out, &[b, 1, h, w])
}

#[derive(Debug, Clone)]
pub struct HazeParams {
    /// Global atmospheric light per RGB channel, in `(0, 1]`.
    pub airlight: [f32; 3],
    /// Scattering coefficient.
    pub beta: f32,
    /// Row-major proxy depth in `[0, 1]`, same extent as the image.
    pub depth: Vec<f32>,
}

impl HazeParams {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.airlight.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return config_err(format!("airlight {:?} must lie in (0, 1]", self.airlight));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return config_err(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.depth.len() != width * height {
            return dim_err(format!("depth map has {} values for a {width}x{height} image", self.depth.len()));
        }
        Ok(())
    }

    pub fn transmission(&self, i: usize) -> f32 {
        if self.beta == 0.0 {
            1.0
        } else {
            (-self.beta * self.depth[i]).exp()
        }
    }
}

/// `I = J t + A (1 - t)` with `t = exp(-beta depth)`, clamped to `[0, 1]`.
pub fn synthesize_haze(clean: &ImageBuffer, p: &HazeParams) -> Result<ImageBuffer> {
    p.validate(clean.width(), clean.height())?;
    let data = clean
        .data()
        .chunks(3)
        .enumerate()
        .flat_map(|(i, px)| {
            let t = p.transmission(i);
            (0..3).map(move |c| (px[c] * t + p.airlight[c] * (1.0 - t)).clamp(0.0, 1.0))
        })
        .collect();
    Ok(ImageBuffer::new(clean.width(), clean.height(), data)?.with_bit_depth(clean.bit_depth()))
}

/// Depth increasing linearly from 0 at the bottom row to 1 at the top row.
pub fn depth_ramp(width: usize, height: usize) -> Vec<f32> {
    let denom = (height.max(2) - 1) as f32;
    (0..height)
        .flat_map(|y| std::iter::repeat((height - 1 - y) as f32 / denom).take(width))
        .collect()
}

/// Depth growing with distance from the image centre, 1 at the corners.
pub fn depth_radial(width: usize, height: usize) -> Vec<f32> {
    let (cx, cy) = ((width as f32 - 1.0) / 2.0, (height as f32 - 1.0) / 2.0);
    let rmax = (cx * cx + cy * cy).sqrt().max(f32::EPSILON);
    (0..height)
        .flat_map(|y| (0..width).map(move |x| ((x as f32 - cx).hypot(y as f32 - cy) / rmax).min(1.0)))
        .collect()
}

/// A clean synthetic scene with its proxy depth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub clean: ImageBuffer,
    pub depth: Vec<f32>,
}

/// Random saturated colour: one channel near zero, as in haze-free outdoor scenes.
fn vivid(rng: &mut impl Rng) -> [f32; 3] {
    let mut c = [rng.gen_range(0.25..0.95), rng.gen_range(0.25..0.95), rng.gen_range(0.25..0.95)];
    c[rng.gen_range(0..3)] = rng.gen_range(0.0..0.08);
    c
}

/// Deterministic scene of coloured rectangles and discs over a striped backdrop.
///
/// Shapes sit nearer than the backdrop, whose depth follows a vertical ramp,
/// so transmission varies across the image.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = [vivid(&mut rng), vivid(&mut rng)];
    let freq = rng.gen_range(0.15..0.5f32);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());

    enum Shape {
        Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
        Disc { cx: f32, cy: f32, r: f32 },
    }
    let (wf, hf) = (width as f32, height as f32);
    let shapes: Vec<(Shape, [f32; 3], f32)> = (0..rng.gen_range(4..8))
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                let (x0, y0) = (rng.gen_range(0.0..wf * 0.8), rng.gen_range(0.0..hf * 0.8));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.gen_range(wf * 0.1..wf * 0.4),
                    y1: y0 + rng.gen_range(hf * 0.1..hf * 0.4),
                }
            } else {
                Shape::Disc {
                    cx: rng.gen_range(0.0..wf),
                    cy: rng.gen_range(0.0..hf),
                    r: rng.gen_range(wf.min(hf) * 0.08..wf.min(hf) * 0.25),
                }
            };
            (shape, vivid(&mut rng), rng.gen_range(0.05..0.5))
        })
        .collect();

    let ramp = depth_ramp(width, height);
    let mut depth = ramp.clone();
    let clean = ImageBuffer::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let s = 0.5 + 0.5 * ((xf * ca + yf * sa) * freq).sin();
        let mut px = [0.0; 3];
        for c in 0..3 {
            px[c] = bg[0][c] * s + bg[1][c] * (1.0 - s);
        }
        for (shape, color, d) in &shapes {
            let inside = match *shape {
                Shape::Rect { x0, y0, x1, y1 } => xf >= x0 && xf < x1 && yf >= y0 && yf < y1,
                Shape::Disc { cx, cy, r } => (xf - cx).hypot(yf - cy) <= r,
            };
            if inside {
                px = *color;
                depth[y * width + x] = *d;
            }
        }
        px
    })?;
    Ok(Scene { clean, depth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_dark_channel_is_channel_min() {
        let img = ImageBuffer::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        let d = dark_channel_map(&img, DarkChannelSpec::default()).unwrap();
        assert!(d.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn patch_one_is_per_pixel_min() {
        let scene = synthetic_scene(24, 20, 5).unwrap();
        let d = dark_channel_map(&scene.clean, DarkChannelSpec::new(1).unwrap()).unwrap();
        assert_eq!(d, channel_min(&scene.clean));
    }

    #[test]
    fn even_patch_rejected() {
        assert!(DarkChannelSpec::new(4).is_err());
        assert!(DarkChannelSpec::new(0).is_err());
    }

    #[test]
    fn blend_at_half_transmission() {
        let clean = ImageBuffer::filled(16, 16, [0.2; 3]).unwrap();
        let p = HazeParams {
            airlight: [0.8; 3],
            beta: 1.0,
            depth: vec![std::f32::consts::LN_2; 256],
        };
        let hazy = synthesize_haze(&clean, &p).unwrap();
        assert!(hazy.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn beta_zero_is_identity_and_infinite_beta_is_airlight() {
        let scene = synthetic_scene(16, 16, 1).unwrap();
        let mut p = HazeParams {
            airlight: [0.9, 0.8, 0.7],
            beta: 0.0,
            depth: scene.depth.clone(),
        };
        assert_eq!(synthesize_haze(&scene.clean, &p).unwrap(), scene.clean);
        p.beta = f32::INFINITY;
        p.depth = vec![1.0; 256];
        let fog = synthesize_haze(&scene.clean, &p).unwrap();
        assert!(fog.data().chunks(3).all(|px| px == [0.9, 0.8, 0.7]));
    }

    #[test]
    fn batch_version_matches_image_version() {
        let scene = synthetic_scene(20, 16, 9).unwrap();
        let spec = DarkChannelSpec::new(5).unwrap();
        let a: Tensor<f32> = dark_channel(&scene.clean, spec).unwrap();
        let b = dark_channel_batch(&scene.clean.to_tensor::<f32>(), spec).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn synthetic_scene_is_deterministic_with_varied_depth() {
        let a = synthetic_scene(32, 32, 42).unwrap();
        let b = synthetic_scene(32, 32, 42).unwrap();
        assert_eq!(a.clean, b.clean);
        let (lo, hi) = a.depth.iter().fold((1.0f32, 0.0f32), |(l, h), &d| (l.min(d), h.max(d)));
        assert!(hi - lo > 0.5);
    }
}
