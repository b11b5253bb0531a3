//! Dual-domain loss, Adam, cosine annealing, paired augmentation and the
//! training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::image::{load_image, ImageBuffer};
use crate::metrics::{psnr, psnr_capped};
use crate::network::DgfdNet;
use crate::nn::{Mode, Module};
use crate::priors::{synthesize_haze, synthetic_scene, HazeParams};
use crate::scalar::Scalar;
use crate::tensor::{concat, fft2, spectrum_weights, Tensor};

pub struct LossTerms<T: Scalar> {
    pub total: Tensor<T>,
    pub spatial: Tensor<T>,
    pub frequency: Tensor<T>,
}

/// `mean|pred - target| + lambda * mean(|dRe| + |dIm|)` with the frequency mean
/// taken over every bin of the full spectrum.
pub fn dual_domain_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, lambda: f64) -> Result<LossTerms<T>> {
    if pred.shape() != target.shape() {
        return dim_err(format!("loss operands differ: {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let [_, _, h, w] = pred.dims4()?;
    let diff = pred.sub(target)?;
    let spatial = diff.abs().mean();
    let spec = fft2(&diff)?;
    let bins = spec.real.abs().add(&spec.imag.abs())?;
    let frequency = bins.mul(&spectrum_weights(h, w))?.sum().mul_scalar(1.0 / pred.numel() as f64);
    let total = spatial.add(&frequency.mul_scalar(lambda))?;
    Ok(LossTerms { total, spatial, frequency })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Bias-corrected update of slot `slot`; `step` is the 1-based step count.
    fn update<T: Scalar>(&mut self, slot: usize, data: &mut [T], grad: &[T], lr: f64) {
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
        }
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        if m.len() != data.len() {
            *m = vec![0.0; data.len()];
            *v = vec![0.0; data.len()];
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..data.len() {
            let g = grad[i].as_f64();
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] = T::lit(data[i].as_f64() - lr * mhat / (vhat.sqrt() + eps));
        }
    }

    /// One step over explicit tensors; each must carry a gradient or it is left alone.
    pub fn step_tensors<T: Scalar>(&mut self, params: &mut [Tensor<T>], lr: f64) {
        self.step += 1;
        for (slot, p) in params.iter_mut().enumerate() {
            if let Some(g) = p.grad() {
                let mut data = p.to_vec();
                self.update(slot, &mut data, g.data(), lr);
                *p = Tensor::parameter(data, p.shape()).expect("same shape");
            }
        }
    }

    /// One step over every parameter of `module`, consuming the accumulated gradients.
    pub fn step_module<T: Scalar, M: Module<T>>(&mut self, module: &mut M, lr: f64) {
        self.step += 1;
        let mut slot = 0;
        module.visit_mut("", &mut |_, p, kind| {
            if !kind.is_parameter() {
                return;
            }
            if let Some(g) = p.grad() {
                let mut data = p.to_vec();
                self.update(slot, &mut data, g.data(), lr);
                *p = Tensor::parameter(data, p.shape()).expect("same shape");
            }
            slot += 1;
        });
    }
}

/// `final + (init - final) (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, init_lr: f64, final_lr: f64) -> f64 {
    if total_steps == 0 {
        return init_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    final_lr + (init_lr - final_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub crop: bool,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            crop: true,
            hflip: true,
            vflip: true,
        }
    }
}

impl AugmentFlags {
    pub const NONE: AugmentFlags = AugmentFlags {
        crop: false,
        hflip: false,
        vflip: false,
    };
}

/// Where the crop starts and which flips apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub x: usize,
    pub y: usize,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    pub fn sample(width: usize, height: usize, patch: usize, flags: AugmentFlags, rng: &mut impl Rng) -> Result<Self> {
        if width < patch || height < patch {
            return dim_err(format!("{width}x{height} image is smaller than the {patch} patch"));
        }
        let (x, y) = if flags.crop {
            (rng.gen_range(0..=width - patch), rng.gen_range(0..=height - patch))
        } else {
            ((width - patch) / 2, (height - patch) / 2)
        };
        Ok(AugmentDraw {
            x,
            y,
            hflip: flags.hflip && rng.gen(),
            vflip: flags.vflip && rng.gen(),
        })
    }

    pub fn apply(&self, img: &ImageBuffer, patch: usize) -> Result<ImageBuffer> {
        let mut out = img.crop(self.x, self.y, patch, patch)?;
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        Ok(out)
    }
}

/// Crops and flips a hazy/clean pair with one shared draw.
pub fn augment(
    hazy: &ImageBuffer,
    clean: &ImageBuffer,
    patch: usize,
    flags: AugmentFlags,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer, ImageBuffer)> {
    if hazy.width() != clean.width() || hazy.height() != clean.height() {
        return dim_err("hazy and clean images differ in size");
    }
    let draw = AugmentDraw::sample(hazy.width(), hazy.height(), patch, flags, rng)?;
    Ok((draw.apply(hazy, patch)?, draw.apply(clean, patch)?))
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub id: String,
    pub hazy: ImageBuffer,
    pub clean: ImageBuffer,
}

/// `n` synthetic scenes of `size x size` hazed with seeded airlight and density.
pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let scene = synthetic_scene(size, size, rng.gen())?;
            let a = rng.gen_range(0.8..1.0f32);
            let params = HazeParams {
                airlight: [a, a, rng.gen_range(0.85..1.0f32).max(a)],
                beta: rng.gen_range(0.8..1.6),
                depth: scene.depth,
            };
            Ok(Pair {
                id: format!("synthetic_{i:03}"),
                hazy: synthesize_haze(&scene.clean, &params)?,
                clean: scene.clean,
            })
        })
        .collect()
}

/// Pairs `dir/hazy/<name>` with `dir/clean/<name>`, sorted by name.
pub fn load_pair_dir(dir: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let dir = dir.as_ref();
    let mut names: Vec<_> = std::fs::read_dir(dir.join("hazy"))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| n.to_string_lossy().to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return config_err(format!("no PNG files under {}", dir.join("hazy").display()));
    }
    names
        .into_iter()
        .map(|n| {
            Ok(Pair {
                id: n.to_string_lossy().into_owned(),
                hazy: load_image(dir.join("hazy").join(&n))?,
                clean: load_image(dir.join("clean").join(&n))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub final_lr: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lambda: f64,
    pub adam: AdamConfig,
    pub augment: AugmentFlags,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset("its").expect("builtin preset")
    }
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 4] = ["its", "ots", "dense", "nh"];

    /// Published per-dataset schedules (learning rate, batch, patch, epochs).
    pub fn preset(name: &str) -> Result<Self> {
        let (init_lr, batch_size, patch_size, epochs) = match name.to_ascii_lowercase().as_str() {
            "its" => (3e-4, 8, 256, 1000),
            "ots" => (1e-4, 8, 256, 60),
            "dense" => (2e-4, 2, 512, 5000),
            "nh" => (3e-4, 4, 384, 6000),
            _ => return config_err(format!("unknown preset {name:?}; expected one of its, ots, dense, nh")),
        };
        Ok(TrainConfig {
            init_lr,
            final_lr: 1e-6,
            batch_size,
            patch_size,
            epochs,
            steps: None,
            lambda: 0.1,
            adam: AdamConfig::default(),
            augment: AugmentFlags::default(),
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return config_err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.final_lr > 0.0 && self.init_lr > self.final_lr) {
            return config_err(format!(
                "need init_lr > final_lr > 0, got {} and {}",
                self.init_lr, self.final_lr
            ));
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.patch_size % 4 != 0 {
            return config_err("batch_size must be positive and patch_size a positive multiple of 4");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(dataset_len))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub spatial_loss: f64,
    pub freq_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    /// Mean eval-mode PSNR over the training pairs, capped for logging.
    pub final_psnr: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

fn stack<T: Scalar>(images: &[ImageBuffer]) -> Result<Tensor<T>> {
    let ts: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
    concat(&ts.iter().collect::<Vec<_>>(), 0)
}

/// Mean eval-mode PSNR of the network outputs against the clean images.
pub fn mean_psnr<T: Scalar>(net: &DgfdNet<T>, pairs: &[Pair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let (out, _) = net.dehaze(&p.hazy)?;
        total += psnr_capped(psnr(&out, &p.clean)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Trains `net` in place. Batches are drawn in a seeded shuffled order and each
/// step appends an NDJSON record to `log` when given.
pub fn train_loop<T: Scalar>(
    net: &mut DgfdNet<T>,
    pairs: &[Pair],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    if pairs.is_empty() {
        return config_err("training needs at least one pair");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.total_steps(pairs.len());
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(total);
    for step in 0..total {
        let mut hazy = Vec::with_capacity(config.batch_size);
        let mut clean = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            let p = &pairs[order.pop().expect("refilled")];
            let (h, c) = augment(&p.hazy, &p.clean, config.patch_size, config.augment, &mut rng)?;
            hazy.push(h);
            clean.push(c);
        }
        let x = stack::<T>(&hazy)?;
        let y = stack::<T>(&clean)?;
        let lr = cosine_lr(step, total, config.init_lr, config.final_lr);
        let out = net.forward(&x, Mode::Train)?;
        let terms = dual_domain_loss(&out.dehazed, &y, config.lambda)?;
        let loss = terms.total.item().as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        terms.total.backward()?;
        adam.step_module(net, lr);
        let rec = StepRecord {
            step,
            lr,
            loss,
            spatial_loss: terms.spatial.item().as_f64(),
            freq_loss: terms.frequency.item().as_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        records.push(rec);
    }
    Ok(TrainReport {
        steps: total,
        records,
        final_psnr: mean_psnr(net, pairs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_of_equal_inputs_is_zero() {
        let x = Tensor::<f64>::from_vec((0..48).map(|i| i as f64 / 48.0).collect(), &[1, 3, 4, 4]).unwrap();
        let t = dual_domain_loss(&x, &x, 0.1).unwrap();
        assert_eq!(t.total.item(), 0.0);
    }

    #[test]
    fn impulse_difference() {
        let pred = Tensor::<f64>::from_vec(vec![0.5, 0.0, 0.0, 0.0], &[1, 1, 2, 2]).unwrap();
        let target = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let t = dual_domain_loss(&pred, &target, 0.1).unwrap();
        assert!((t.spatial.item() - 0.125).abs() < 1e-15);
        // every bin of an impulse's spectrum is 0.5 + 0i
        assert!((t.frequency.item() - 0.5).abs() < 1e-12);
        assert!((t.total.item() - 0.175).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_spatial_l1() {
        let a = Tensor::<f64>::from_vec((0..32).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 2, 4, 4]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let t = dual_domain_loss(&a, &b, 0.0).unwrap();
        let l1 = a.data().iter().map(|v| v.abs()).sum::<f64>() / 32.0;
        assert!((t.total.item() - l1).abs() < 1e-15);
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 3, 4, 8]);
        assert!(dual_domain_loss(&a, &b, 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = Tensor::<f64>::parameter(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        p.mul(&Tensor::from_vec(vec![3.0, -0.25, 0.0], &[3]).unwrap()).unwrap().sum().backward().unwrap();
        let mut params = [p];
        Adam::new(AdamConfig::default()).step_tensors(&mut params, 0.01);
        let d = params[0].data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] - (-1.99)).abs() < 1e-9);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut params = [Tensor::<f64>::parameter(vec![1.0], &[1]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            params[0].mul(&params[0]).unwrap().sum().backward().unwrap();
            adam.step_tensors(&mut params, 0.1);
        }
        assert!(params[0].item().abs() < 0.1);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4, 1e-6), 3e-4);
        assert!((cosine_lr(100, 100, 3e-4, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 3e-4, 1e-6) - (3e-4 + 1e-6) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn crops_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let d = AugmentDraw::sample(37, 29, 16, AugmentFlags::default(), &mut rng).unwrap();
            assert!(d.x + 16 <= 37 && d.y + 16 <= 29);
        }
        assert!(AugmentDraw::sample(15, 29, 16, AugmentFlags::default(), &mut rng).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ImageBuffer::from_fn(16, 16, |x, y| [x as f32 / 16.0, y as f32 / 16.0, 0.5]).unwrap();
        let d = AugmentDraw { x: 0, y: 0, hflip: true, vflip: true };
        let twice = d.apply(&d.apply(&img, 16).unwrap(), 16).unwrap();
        assert_eq!(twice.data(), img.data());
    }

    #[test]
    fn presets_match_table() {
        let nh = TrainConfig::preset("nh").unwrap();
        assert_eq!((nh.init_lr, nh.batch_size, nh.patch_size, nh.epochs), (3e-4, 4, 384, 6000));
        assert!(TrainConfig::preset("reside").is_err());
        for p in TrainConfig::PRESETS {
            TrainConfig::preset(p).unwrap().validate().unwrap();
        }
    }
}
