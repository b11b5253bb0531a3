//! RGB images in `[0, 1]` and PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer as RawBuffer, Luma, Rgb};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_DIM: usize = 16;

/// Height x width x 3 interleaved pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
    bit_depth: u8,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width < MIN_DIM || height < MIN_DIM {
            return dim_err(format!("image {width}x{height} is below the {MIN_DIM}x{MIN_DIM} minimum"));
        }
        if data.len() != width * height * 3 {
            return dim_err(format!("{width}x{height}x3 image needs {} values, got {}", width * height * 3, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageBuffer { width, height, data, bit_depth: 8 })
    }

    /// Builds an image from `f(x, y) -> [r, g, b]`, clamping to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        ImageBuffer::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn with_bit_depth(mut self, bits: u8) -> Self {
        self.bit_depth = bits;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One colour plane in row-major order.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Rebuilds an image from three row-major planes, clamping to `[0, 1]`.
    pub fn from_planes(width: usize, height: usize, planes: [&[f32]; 3]) -> Result<Self> {
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return dim_err("plane sizes do not match the image extent");
        }
        let data = (0..n).flat_map(|i| planes.map(|p| p[i].clamp(0.0, 1.0))).collect();
        ImageBuffer::new(width, height, data)
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Vec<f32> {
        self.data.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.width * self.height;
        let mut planar = Vec::with_capacity(3 * n);
        for c in 0..3 {
            planar.extend(self.data.iter().skip(c).step_by(3).map(|&v| T::lit(v as f64)));
        }
        Tensor::from_vec(planar, &[1, 3, self.height, self.width]).expect("consistent extent")
    }

    /// Image `index` of a `B x 3 x H x W` tensor, clamped to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [b, c, h, w] = t.dims4()?;
        if c != 3 || index >= b {
            return dim_err(format!("cannot take RGB image {index} from {:?}", t.shape()));
        }
        let src = &t.data()[index * 3 * h * w..(index + 1) * 3 * h * w];
        let data = (0..h * w)
            .flat_map(|i| (0..3).map(move |ch| src[ch * h * w + i].as_f64().clamp(0.0, 1.0) as f32))
            .collect();
        ImageBuffer::new(w, h, data)
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return dim_err(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            ));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Ok(ImageBuffer::new(width, height, data)?.with_bit_depth(self.bit_depth))
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(|x, y| (self.width - 1 - x, y))
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(|x, y| (x, self.height - 1 - y))
    }

    fn remap(&self, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = src(x, y);
                data.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        ImageBuffer { data, ..self.clone() }
    }

    /// Reflect-pads right and bottom so both extents are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&self.pixel(reflect(x, self.width), reflect(y, self.height)));
            }
        }
        ImageBuffer {
            width: w,
            height: h,
            data,
            bit_depth: self.bit_depth,
        }
    }
}

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads an 8- or 16-bit PNG (grey or RGB, alpha dropped) scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let (data, bits) = if sixteen {
        let raw = img.into_rgb16();
        (raw.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(), 16)
    } else {
        let raw = img.into_rgb8();
        (raw.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(), 8)
    };
    ImageBuffer::new(width, height, data)
        .map(|img| img.with_bit_depth(bits))
        .map_err(|e| image_err(path, e))
}

/// Writes a PNG at the image's bit depth (16 stays 16, anything else is 8).
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width as u32, img.height as u32);
    let result = if img.bit_depth == 16 {
        let raw: Vec<u16> = img.data.iter().map(|v| (v * 65535.0).round() as u16).collect();
        RawBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).expect("sized").save(path)
    } else {
        let raw: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        RawBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("sized").save(path)
    };
    result.map_err(|e| image_err(path, e))
}

/// Loads any supported image as a single luma plane in `[0, 1]`, returning `(width, height, values)`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_luma16();
    Ok((w, h, raw.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()))
}

/// Writes a single-channel map as an 8-bit greyscale PNG, clamping to `[0, 1]`.
pub fn save_gray(values: &[f32], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return dim_err(format!("{width}x{height} map needs {} values, got {}", width * height, values.len()));
    }
    let raw: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RawBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, raw)
        .expect("sized")
        .save(path)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| [x as f32 / (w - 1) as f32, y as f32 / (h - 1) as f32, 0.5]).unwrap()
    }

    #[test]
    fn rejects_small_and_out_of_range() {
        assert!(ImageBuffer::new(8, 16, vec![0.0; 8 * 16 * 3]).is_err());
        assert!(ImageBuffer::new(16, 16, vec![1.5; 16 * 16 * 3]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let img = gradient(20, 17);
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), &[1, 3, 17, 20]);
        assert_eq!(ImageBuffer::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient(17, 19);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 3), img.pixel(16, 3));
    }

    #[test]
    fn reflect_padding_keeps_original_corner() {
        let img = gradient(18, 17);
        let p = img.pad_to_multiple(4);
        assert_eq!((p.width(), p.height()), (20, 20));
        assert_eq!(p.crop(0, 0, 18, 17).unwrap(), img);
        assert_eq!(p.pixel(18, 0), img.pixel(16, 0));
    }

    #[test]
    fn luma_of_white_is_one() {
        let img = ImageBuffer::filled(16, 16, [1.0; 3]).unwrap();
        assert!(img.luma().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
