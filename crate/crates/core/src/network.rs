//! Three-scale encoder/decoder of HAFM + MGAM blocks interleaved with the
//! guidance branch, predicting a residual that is added to the hazy input.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::fusion::Fuse;
use crate::image::ImageBuffer;
use crate::hafm::{AttentionSource, Hafm, HafmOptions};
use crate::mgam::{Mgam, MgamOptions};
use crate::nn::{cast_module, module_fields, Conv2d, Cost, Mode, Module};
use crate::pcgb::{stage_width, GuidanceMode, GuidanceState, Pcgb, Side};
use crate::priors::{dark_channel_batch, DarkChannelSpec};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, ConvSpec, Tensor};

/// Component ablations; each one names a reduced architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Ablation {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Spatial modulation only.
    #[serde(rename = "hafm-s")]
    HafmS,
    /// Frequency modulation only (`M_sa = 1`); with no attention to steer, the prior branch is dropped.
    #[serde(rename = "hafm-f")]
    HafmF,
    /// Plain spatial attention instead of prior guidance.
    #[serde(rename = "hafm-ssa")]
    HafmSsa,
    #[serde(rename = "mgam-3x3")]
    Mgam3x3,
    #[serde(rename = "mgam-5x5")]
    Mgam5x5,
    #[serde(rename = "mgam-nogate")]
    MgamNogate,
    #[serde(rename = "mgam-noskip")]
    MgamNoskip,
    /// Guidance branch bypassed; same architecture as `HafmSsa`.
    #[serde(rename = "pcgb-ssa")]
    PcgbSsa,
    #[serde(rename = "pcgb-nofr")]
    PcgbNofr,
    #[serde(rename = "pcgb-daf")]
    PcgbDaf,
    #[serde(rename = "pcgb-pff")]
    PcgbPff,
}

impl Ablation {
    pub const ALL: [Ablation; 12] = [
        Ablation::None,
        Ablation::HafmS,
        Ablation::HafmF,
        Ablation::HafmSsa,
        Ablation::Mgam3x3,
        Ablation::Mgam5x5,
        Ablation::MgamNogate,
        Ablation::MgamNoskip,
        Ablation::PcgbSsa,
        Ablation::PcgbNofr,
        Ablation::PcgbDaf,
        Ablation::PcgbPff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::HafmS => "hafm-s",
            Ablation::HafmF => "hafm-f",
            Ablation::HafmSsa => "hafm-ssa",
            Ablation::Mgam3x3 => "mgam-3x3",
            Ablation::Mgam5x5 => "mgam-5x5",
            Ablation::MgamNogate => "mgam-nogate",
            Ablation::MgamNoskip => "mgam-noskip",
            Ablation::PcgbSsa => "pcgb-ssa",
            Ablation::PcgbNofr => "pcgb-nofr",
            Ablation::PcgbDaf => "pcgb-daf",
            Ablation::PcgbPff => "pcgb-pff",
        }
    }

    /// Published parameter count of the variant, in millions.
    pub fn reference_params_m(self) -> f64 {
        match self {
            Ablation::None => 2.08,
            Ablation::HafmS => 1.31,
            Ablation::HafmF => 1.83,
            Ablation::HafmSsa | Ablation::PcgbSsa => 1.84,
            Ablation::Mgam3x3 => 1.93,
            Ablation::Mgam5x5 => 1.97,
            Ablation::MgamNogate => 1.97,
            Ablation::MgamNoskip => 1.91,
            Ablation::PcgbNofr => 2.03,
            Ablation::PcgbDaf => 2.07,
            Ablation::PcgbPff => 2.08,
        }
    }

    fn guidance_mode(self) -> Option<GuidanceMode> {
        match self {
            Ablation::HafmF | Ablation::HafmSsa | Ablation::PcgbSsa => None,
            Ablation::PcgbNofr => Some(GuidanceMode::NoFeedback),
            Ablation::PcgbDaf => Some(GuidanceMode::Additive),
            Ablation::PcgbPff => Some(GuidanceMode::Progressive),
            _ => Some(GuidanceMode::Full),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('×', "x");
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Fusion of an upsampled decoder feature with its encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SkipFusion {
    #[default]
    Skfusion,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Blocks at encoder stages 1-3 (stage 3 is the bottleneck) and decoder stages 2, 1.
    pub blocks_per_stage: [usize; 5],
    pub kernel_set: Vec<usize>,
    pub dark_channel_patch: usize,
    pub ablation: Ablation,
    pub skip_fusion: SkipFusion,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            blocks_per_stage: [2, 2, 4, 2, 2],
            kernel_set: vec![3, 5],
            dark_channel_patch: 15,
            ablation: Ablation::None,
            skip_fusion: SkipFusion::Skfusion,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.blocks_per_stage;
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return config_err(format!("base_channels must be even and at least 2, got {}", self.base_channels));
        }
        if b.iter().any(|&n| n == 0) {
            return config_err(format!("every stage needs at least one block, got {b:?}"));
        }
        if b[0] != b[4] || b[1] != b[3] {
            return config_err(format!("blocks_per_stage {b:?} must be symmetric around the bottleneck"));
        }
        self.dark_channel().validate()?;
        self.mgam_options().validate()
    }

    pub fn dark_channel(&self) -> DarkChannelSpec {
        DarkChannelSpec {
            patch: self.dark_channel_patch,
        }
    }

    pub fn hafm_options(&self) -> HafmOptions {
        match self.ablation {
            Ablation::HafmS => HafmOptions { frequency: false, ..Default::default() },
            Ablation::HafmF => HafmOptions { attention: AttentionSource::Uniform, frequency: true },
            Ablation::HafmSsa | Ablation::PcgbSsa => HafmOptions {
                attention: AttentionSource::SelfAttention,
                frequency: true,
            },
            _ => HafmOptions::default(),
        }
    }

    pub fn mgam_options(&self) -> MgamOptions {
        let kernels = match self.ablation {
            Ablation::Mgam3x3 => vec![3],
            Ablation::Mgam5x5 => vec![5],
            _ => self.kernel_set.clone(),
        };
        MgamOptions {
            kernels,
            gating: self.ablation != Ablation::MgamNogate,
            skip: self.ablation != Ablation::MgamNoskip,
            feedback: self.ablation.guidance_mode().is_some_and(GuidanceMode::uses_feedback),
        }
    }

    pub fn guidance_mode(&self) -> Option<GuidanceMode> {
        self.ablation.guidance_mode()
    }

    /// `(encoder stage, blocks)` then `(decoder stage, blocks)` in execution order.
    fn schedule(&self) -> [(Side, usize, usize); 5] {
        let b = self.blocks_per_stage;
        [
            (Side::Encoder, 1, b[0]),
            (Side::Encoder, 2, b[1]),
            (Side::Encoder, 3, b[2]),
            (Side::Decoder, 2, b[3]),
            (Side::Decoder, 1, b[4]),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DgfdBlock<T: Scalar> {
    pub hafm: Hafm<T>,
    pub mgam: Mgam<T>,
}

module_fields!(DgfdBlock { hafm, mgam });

/// Spatial attention map of one block, recorded for inspection.
#[derive(Debug, Clone)]
pub struct Tap<T: Scalar> {
    /// `enc1.0`, `dec2.1`, ...
    pub position: String,
    pub m_sa: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar> {
    pub dehazed: Tensor<T>,
    pub residual: Tensor<T>,
    pub taps: Vec<Tap<T>>,
}

#[derive(Debug, Clone)]
pub struct DgfdNet<T: Scalar> {
    pub head: Conv2d<T>,
    pub guidance: Option<Pcgb<T>>,
    /// Encoder stages 1, 2 and the stage-3 bottleneck.
    pub encoder: Vec<Vec<DgfdBlock<T>>>,
    pub down: Vec<Conv2d<T>>,
    /// `4C -> 8C` into decoder stage 2, `2C -> 4C` into decoder stage 1, each before a pixel shuffle.
    pub up: Vec<Conv2d<T>>,
    pub skip_fuse: Vec<Fuse<T>>,
    /// Decoder stages 2 and 1.
    pub decoder: Vec<Vec<DgfdBlock<T>>>,
    pub tail: Conv2d<T>,
    config: ModelConfig,
}

module_fields!(DgfdNet {
    head,
    guidance,
    encoder,
    down,
    up,
    skip_fuse,
    decoder,
    tail,
});

impl<T: Scalar> DgfdNet<T> {
    /// Builds and initializes the network; parameters depend only on `config` (including its seed).
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.base_channels;
        let hafm_opts = config.hafm_options();
        let mgam_opts = config.mgam_options();
        // the final block's feedback would have no consumer, so it gets no projection
        let stage = |stage: usize, n: usize, last: bool, rng: &mut ChaCha8Rng| -> Result<Vec<DgfdBlock<T>>> {
            let ci = stage_width(c, stage);
            (0..n)
                .map(|j| {
                    let mut opts = mgam_opts.clone();
                    opts.feedback &= !(last && j + 1 == n);
                    Ok(DgfdBlock {
                        hafm: Hafm::new(ci, hafm_opts, rng)?,
                        mgam: Mgam::new(ci, opts, rng)?,
                    })
                })
                .collect()
        };
        let b = config.blocks_per_stage;
        let head = Conv2d::new(ConvSpec::new(3, c, 3), true, &mut rng)?;
        let guidance = config
            .guidance_mode()
            .map(|m| Pcgb::new(c, b, m, &mut rng))
            .transpose()?;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for i in 1..=3 {
            encoder.push(stage(i, b[i - 1], false, &mut rng)?);
            if i < 3 {
                let ci = stage_width(c, i);
                down.push(Conv2d::new(ConvSpec::new(ci, 2 * ci, 3).with_stride(2), true, &mut rng)?);
            }
        }
        let learned_skip = config.skip_fusion == SkipFusion::Skfusion;
        let mut up = Vec::new();
        let mut skip_fuse = Vec::new();
        let mut decoder = Vec::new();
        for (k, i) in [2usize, 1].into_iter().enumerate() {
            let cn = stage_width(c, i + 1);
            up.push(Conv2d::new(ConvSpec::new(cn, 2 * cn, 1), true, &mut rng)?);
            skip_fuse.push(Fuse::new(stage_width(c, i), learned_skip, &mut rng)?);
            decoder.push(stage(i, b[3 + k], i == 1, &mut rng)?);
        }
        let tail = Conv2d::new(ConvSpec::new(c, 3, 3), true, &mut rng)?;
        Ok(DgfdNet {
            head,
            guidance,
            encoder,
            down,
            up,
            skip_fuse,
            decoder,
            tail,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<DgfdNet<U>> {
        let mut out = DgfdNet::<U>::build(&self.config)?;
        cast_module(self, &mut out);
        Ok(out)
    }

    /// Zeroes the tail convolution so the network returns its input.
    pub fn zero_tail(&mut self) {
        crate::nn::zero_parameters(&mut self.tail);
    }

    fn run_stage(
        &self,
        blocks: &[DgfdBlock<T>],
        side: Side,
        stage: usize,
        mut f: Tensor<T>,
        state: &mut Option<GuidanceState<T>>,
        feedback: &mut Option<Tensor<T>>,
        taps: &mut Vec<Tap<T>>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        for (j, block) in blocks.iter().enumerate() {
            let guide = match (&self.guidance, state.as_mut()) {
                (Some(p), Some(st)) => Some(match side {
                    Side::Encoder => p.next_guidance_encoder(st, stage, j + 1, feedback.as_ref())?,
                    Side::Decoder => p.next_guidance_decoder(st, stage, j + 1, feedback.as_ref())?,
                }),
                _ => None,
            };
            let h = block.hafm.forward(&f, guide.as_ref(), mode)?;
            if let Some(m) = &h.m_sa {
                let tag = if side == Side::Encoder { "enc" } else { "dec" };
                taps.push(Tap {
                    position: format!("{tag}{stage}.{j}"),
                    m_sa: m.detach(),
                });
            }
            let m = block.mgam.forward(&h.x_f, h.x_d_hat.as_ref(), mode)?;
            f = m.x_f;
            *feedback = m.x_d_tilde;
        }
        Ok(f)
    }

    pub fn forward(&self, hazy: &Tensor<T>, mode: Mode) -> Result<ForwardOutput<T>> {
        let [_, ch, h, w] = hazy.dims4()?;
        if ch != 3 {
            return dim_err(format!("network input must have 3 channels, got {:?}", hazy.shape()));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return config_err(format!("input {h}x{w} must be divisible by 4"));
        }
        let mut state = match &self.guidance {
            Some(p) => {
                let dark = dark_channel_batch(hazy, self.config.dark_channel())?;
                Some(p.encode_prior(&dark)?)
            }
            None => None,
        };
        let mut feedback = None;
        let mut taps = Vec::new();

        let mut f = self.head.forward(hazy)?;
        let mut skips = Vec::new();
        for i in 1..=3 {
            f = self.run_stage(&self.encoder[i - 1], Side::Encoder, i, f, &mut state, &mut feedback, &mut taps, mode)?;
            if i < 3 {
                skips.push(f.clone());
                f = self.down[i - 1].forward(&f)?;
            }
        }
        for (k, i) in [2usize, 1].into_iter().enumerate() {
            let upsampled = self.up[k].forward(&f)?.pixel_shuffle(2)?;
            f = self.skip_fuse[k].forward(&upsampled, &skips[i - 1])?;
            f = self.run_stage(&self.decoder[k], Side::Decoder, i, f, &mut state, &mut feedback, &mut taps, mode)?;
        }
        let residual = self.tail.forward(&f)?;
        let dehazed = hazy.add(&residual)?;
        Ok(ForwardOutput { dehazed, residual, taps })
    }

    /// Eval-mode forward without recording gradients.
    pub fn infer(&self, hazy: &Tensor<T>) -> Result<ForwardOutput<T>> {
        no_grad(|| self.forward(hazy, Mode::Eval))
    }

    /// Dehazes one image of any size: reflect-pads to a multiple of 4, runs the
    /// eval-mode network and crops back. Taps are at the padded resolution.
    pub fn dehaze(&self, img: &ImageBuffer) -> Result<(ImageBuffer, Vec<Tap<T>>)> {
        let padded = img.pad_to_multiple(4);
        let out = self.infer(&padded.to_tensor())?;
        let full = ImageBuffer::from_tensor(&out.dehazed, 0)?;
        let cropped = if (full.width(), full.height()) == (img.width(), img.height()) {
            full
        } else {
            full.crop(0, 0, img.width(), img.height())?
        };
        Ok((cropped.with_bit_depth(img.bit_depth()), out.taps))
    }
}

/// Parameters of the network `config` describes.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(DgfdNet::<f32>::build(config)?.param_count())
}

/// Analytic forward cost of one `1 x 3 x h x w` image.
///
/// Counts exactly what the instrumented forward pass counts: convolutions,
/// batch norm, activations and FFTs. The dark-channel extraction, elementwise
/// arithmetic, pooling, softmax and pixel shuffles are not counted.
pub fn flop_count(config: &ModelConfig, h: usize, w: usize) -> Result<Cost> {
    config.validate()?;
    if h % 4 != 0 || w % 4 != 0 {
        return config_err(format!("input {h}x{w} must be divisible by 4"));
    }
    let b = 1;
    let c = config.base_channels;
    let hafm = config.hafm_options();
    let mgam = config.mgam_options();
    let guided = config.guidance_mode();
    let mut k = Cost::default();
    k.conv(ConvSpec::new(3, c, 3), b, h, w, true);
    if guided.is_some() {
        k += Pcgb::<f32>::encode_cost(c, b, h, w);
    }
    let learned_skip = config.skip_fusion == SkipFusion::Skfusion;
    for (side, stage, n) in config.schedule() {
        let ci = stage_width(c, stage);
        let (hs, ws) = (h >> (stage - 1), w >> (stage - 1));
        if side == Side::Decoder {
            let cn = stage_width(c, stage + 1);
            k.conv(ConvSpec::new(cn, 2 * cn, 1), b, hs / 2, ws / 2, true);
            k += Fuse::<f32>::cost(learned_skip, ci, b);
        }
        for j in 1..=n {
            if let Some(mode) = guided {
                k += Pcgb::<f32>::guidance_cost(c, mode, side, stage, j, b, h, w);
            }
            k += Hafm::<f32>::cost(ci, hafm, b, hs, ws);
            let last = side == Side::Decoder && stage == 1 && j == n;
            let feedback_runs = hafm.attention != AttentionSource::SelfAttention && !last;
            k += Mgam::<f32>::cost(ci, &mgam, feedback_runs, b, hs, ws);
        }
        if side == Side::Encoder && stage < 3 {
            k.conv(ConvSpec::new(ci, 2 * ci, 3).with_stride(2), b, hs, ws, true);
        }
    }
    k.conv(ConvSpec::new(c, 3, 3), b, h, w, true);
    Ok(k)
}
