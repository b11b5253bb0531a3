//! Haze-aware frequency modulator: prior-guided spatial attention followed by
//! per-component MLPs on the feature spectrum, fused back with a residual.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::{module_fields, BatchNorm2d, Conv2d, Cost, Mode};
use crate::scalar::Scalar;
use crate::tensor::{concat, fft2, ifft2, ComplexPair, ConvSpec, Tensor};

/// Where the spatial attention map `M_sa` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSource {
    /// `sigmoid` of the processed dark-channel guidance.
    Prior,
    /// `M_sa = 1`; the guidance passes through unprocessed.
    Uniform,
    /// `sigmoid(Conv1x1(X_m))`, no guidance input.
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HafmOptions {
    pub attention: AttentionSource,
    /// Spectral modulation; when off the fusion sees `X_spatial` twice.
    pub frequency: bool,
}

impl Default for HafmOptions {
    fn default() -> Self {
        HafmOptions {
            attention: AttentionSource::Prior,
            frequency: true,
        }
    }
}

/// Pointwise `Conv -> GELU -> Conv` applied independently at every frequency bin.
#[derive(Debug, Clone)]
pub struct FreqMlp<T: Scalar> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}

module_fields!(FreqMlp { fc1, fc2 });

impl<T: Scalar> FreqMlp<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(FreqMlp {
            fc1: Conv2d::new(ConvSpec::new(c, c, 1), true, rng)?,
            fc2: Conv2d::new(ConvSpec::new(c, c, 1), true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

#[derive(Debug, Clone)]
pub struct Hafm<T: Scalar> {
    pub guide_reduce: Option<Conv2d<T>>,
    pub guide_expand: Option<Conv2d<T>>,
    pub self_attention: Option<Conv2d<T>>,
    pub norm: BatchNorm2d<T>,
    pub mixer: Conv2d<T>,
    pub dconv: Conv2d<T>,
    pub freq_real: Option<FreqMlp<T>>,
    pub freq_imag: Option<FreqMlp<T>>,
    pub fuse: Conv2d<T>,
    options: HafmOptions,
}

module_fields!(Hafm {
    guide_reduce,
    guide_expand,
    self_attention,
    norm,
    mixer,
    dconv,
    freq_real,
    freq_imag,
    fuse,
});

#[derive(Debug, Clone)]
pub struct HafmOutput<T: Scalar> {
    /// `X_f + fused`.
    pub x_f: Tensor<T>,
    /// Processed guidance `X̂_d` handed to the gating module, if any.
    pub x_d_hat: Option<Tensor<T>>,
    /// Spatial attention map, `None` when it is identically 1.
    pub m_sa: Option<Tensor<T>>,
}

impl<T: Scalar> Hafm<T> {
    pub fn new(channels: usize, options: HafmOptions, rng: &mut impl Rng) -> Result<Self> {
        let c = channels;
        let half = (c / 2).max(1);
        let prior = options.attention == AttentionSource::Prior;
        Ok(Hafm {
            guide_reduce: prior.then(|| Conv2d::new(ConvSpec::new(c, half, 1), true, rng)).transpose()?,
            guide_expand: prior.then(|| Conv2d::new(ConvSpec::new(half, c, 1), true, rng)).transpose()?,
            self_attention: (options.attention == AttentionSource::SelfAttention)
                .then(|| Conv2d::new(ConvSpec::new(c, c, 1), true, rng))
                .transpose()?,
            norm: BatchNorm2d::new(c),
            mixer: Conv2d::new(ConvSpec::new(c, c, 1), true, rng)?,
            dconv: Conv2d::new(ConvSpec::depthwise(c, 3, 1), true, rng)?,
            freq_real: options.frequency.then(|| FreqMlp::new(c, rng)).transpose()?,
            freq_imag: options.frequency.then(|| FreqMlp::new(c, rng)).transpose()?,
            fuse: Conv2d::new(ConvSpec::new(2 * c, c, 1), true, rng)?,
            options,
        })
    }

    pub fn channels(&self) -> usize {
        self.mixer.spec.in_channels
    }

    pub fn options(&self) -> HafmOptions {
        self.options
    }

    /// `X̂_d = Conv(GELU(Conv(X_d)))`.
    pub fn guidance(&self, x_d: &Tensor<T>) -> Result<Tensor<T>> {
        match (&self.guide_reduce, &self.guide_expand) {
            (Some(r), Some(e)) => e.forward(&r.forward(x_d)?.gelu()),
            _ => Err(Error::Contract("this block has no guidance bottleneck".into())),
        }
    }

    /// `M_sa = sigmoid(X̂_d)`.
    pub fn spatial_attention_map(&self, x_d: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.guidance(x_d)?.sigmoid())
    }

    /// Inverse transform of the modulated spectrum of `x_spatial`.
    pub fn frequency_modulation(&self, x_spatial: &Tensor<T>) -> Result<Tensor<T>> {
        let (Some(mr), Some(mi)) = (&self.freq_real, &self.freq_imag) else {
            return Err(Error::Contract("this block has no frequency branch".into()));
        };
        let [_, _, h, w] = x_spatial.dims4()?;
        let spec = fft2(x_spatial)?;
        let modulated = ComplexPair::new(mr.forward(&spec.real)?, mi.forward(&spec.imag)?, w)?;
        ifft2(&modulated, (h, w))
    }

    pub fn forward(&self, x_f: &Tensor<T>, x_d: Option<&Tensor<T>>, mode: Mode) -> Result<HafmOutput<T>> {
        let [_, c, _, _] = x_f.dims4()?;
        if c != self.channels() {
            return dim_err(format!("HAFM with {} channels got {:?}", self.channels(), x_f.shape()));
        }
        if let Some(d) = x_d {
            if d.shape() != x_f.shape() {
                return dim_err(format!("HAFM guidance {:?} does not match features {:?}", d.shape(), x_f.shape()));
            }
        }

        let x_m = self.mixer.forward(&self.norm.forward(x_f, mode)?)?;
        let (x_d_hat, m_sa) = match self.options.attention {
            AttentionSource::Prior => {
                let d = x_d.ok_or_else(|| Error::Contract("HAFM needs dark-channel guidance".into()))?;
                let hat = self.guidance(d)?;
                let m = hat.sigmoid();
                (Some(hat), Some(m))
            }
            AttentionSource::Uniform => (x_d.cloned(), None),
            AttentionSource::SelfAttention => {
                let conv = self.self_attention.as_ref().expect("built with self-attention");
                (None, Some(conv.forward(&x_m)?.sigmoid()))
            }
        };

        let local = self.dconv.forward(&x_m)?;
        let x_spatial = match &m_sa {
            Some(m) => local.mul(m)?.add(&x_m)?,
            None => local.add(&x_m)?,
        };
        let x_frequency = if self.options.frequency {
            self.frequency_modulation(&x_spatial)?
        } else {
            x_spatial.clone()
        };
        let fused = self.fuse.forward(&concat(&[&x_spatial, &x_frequency], 1)?)?.gelu();
        Ok(HafmOutput {
            x_f: x_f.add(&fused)?,
            x_d_hat,
            m_sa,
        })
    }

    /// Analytic forward cost on a `b x c x h x w` input.
    pub fn cost(c: usize, options: HafmOptions, b: usize, h: usize, w: usize) -> Cost {
        let mut k = Cost::default();
        let n = b * c * h * w;
        k.batch_norm(n);
        k.conv(ConvSpec::new(c, c, 1), b, h, w, true);
        match options.attention {
            AttentionSource::Prior => {
                let half = (c / 2).max(1);
                k.conv(ConvSpec::new(c, half, 1), b, h, w, true);
                k.activation(b * half * h * w);
                k.conv(ConvSpec::new(half, c, 1), b, h, w, true);
                k.activation(n);
            }
            AttentionSource::Uniform => {}
            AttentionSource::SelfAttention => {
                k.conv(ConvSpec::new(c, c, 1), b, h, w, true);
                k.activation(n);
            }
        }
        k.conv(ConvSpec::depthwise(c, 3, 1), b, h, w, true);
        if options.frequency {
            let wf = w / 2 + 1;
            k.fft(b * c, h, w);
            for _ in 0..2 {
                k.conv(ConvSpec::new(c, c, 1), b, h, wf, true);
                k.activation(b * c * h * wf);
                k.conv(ConvSpec::new(c, c, 1), b, h, wf, true);
            }
            k.fft(b * c, h, w);
        }
        k.conv(ConvSpec::new(2 * c, c, 1), b, h, w, true);
        k.activation(n);
        k
    }
}
