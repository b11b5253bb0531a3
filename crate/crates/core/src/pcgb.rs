//! Prior correction guidance branch: multi-scale dark-channel features that
//! each block refines with the feedback of the block before it.

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::fusion::Fuse;
use crate::nn::{module_fields, Conv2d, Cost};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

/// How feedback is folded into the guidance of the next block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Learned fusion of feedback with the stage prior.
    Full,
    /// Always the stage prior; feedback is ignored.
    NoFeedback,
    /// Feedback added to the stage prior.
    Additive,
    /// Learned fusion of feedback with the previous guidance; the prior is used only once.
    Progressive,
}

impl GuidanceMode {
    pub fn uses_feedback(self) -> bool {
        self != GuidanceMode::NoFeedback
    }

    pub fn learned(self) -> bool {
        matches!(self, GuidanceMode::Full | GuidanceMode::Progressive)
    }
}

/// Which half of the U a guidance request comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Per-forward guidance: stage priors `X_d^i` and the last guidance handed out.
#[derive(Debug, Clone)]
pub struct GuidanceState<T: Scalar> {
    pub priors: [Tensor<T>; 3],
    pub previous: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Pcgb<T: Scalar> {
    pub encode_wide: Conv2d<T>,
    pub encode_point: Conv2d<T>,
    /// Stride-2 downsamples `C -> 2C` and `2C -> 4C`, shared by the priors and the feedback.
    pub down: Vec<Conv2d<T>>,
    /// `1x1` convs ahead of the pixel shuffle: `4C -> 8C` (into stage 2) and `2C -> 4C` (into stage 1).
    pub up: Vec<Conv2d<T>>,
    /// Encoder fusions for stages 1..=3; stage 1 has none when it holds a single block.
    pub encoder_fuse: Vec<Option<Fuse<T>>>,
    /// Decoder fusions for stage 2, then stage 1.
    pub decoder_fuse: Vec<Fuse<T>>,
    mode: GuidanceMode,
}

module_fields!(Pcgb {
    encode_wide,
    encode_point,
    down,
    up,
    encoder_fuse,
    decoder_fuse,
});

pub(crate) fn stage_width(c: usize, stage: usize) -> usize {
    c << (stage - 1)
}

impl<T: Scalar> Pcgb<T> {
    /// `blocks` are the per-position block counts `[N1, N2, N3, N4, N5]`.
    pub fn new(c: usize, blocks: [usize; 5], mode: GuidanceMode, rng: &mut impl Rng) -> Result<Self> {
        let encode_wide = Conv2d::new(ConvSpec::new(1, c, 5), true, rng)?;
        let encode_point = Conv2d::new(ConvSpec::new(c, c, 1), true, rng)?;
        let down = (1..=2)
            .map(|i| {
                let ci = stage_width(c, i);
                Conv2d::new(ConvSpec::new(ci, 2 * ci, 3).with_stride(2), true, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let feedback = mode.uses_feedback();
        let up = if feedback {
            [3, 2]
                .iter()
                .map(|&i| {
                    let ci = stage_width(c, i);
                    Conv2d::new(ConvSpec::new(ci, 2 * ci, 1), true, rng)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let encoder_fuse = (1..=3)
            .map(|i| {
                let needed = feedback && (i > 1 || blocks[0] > 1);
                needed.then(|| Fuse::new(stage_width(c, i), mode.learned(), rng)).transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_fuse = if feedback {
            [2, 1]
                .iter()
                .map(|&i| Fuse::new(stage_width(c, i), mode.learned(), rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Pcgb {
            encode_wide,
            encode_point,
            down,
            up,
            encoder_fuse,
            decoder_fuse,
            mode,
        })
    }

    pub fn mode(&self) -> GuidanceMode {
        self.mode
    }

    /// `X_d^1 = GELU(Conv1x1(Conv5x5(X_d)))`, then two stride-2 downsamples.
    pub fn encode_prior(&self, x_d: &Tensor<T>) -> Result<GuidanceState<T>> {
        let [_, c, h, w] = x_d.dims4()?;
        if c != 1 {
            return config_err(format!("prior must have one channel, got {c}"));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return config_err(format!("spatial size {h}x{w} must be divisible by 4"));
        }
        let p1 = self.encode_point.forward(&self.encode_wide.forward(x_d)?)?.gelu();
        let p2 = self.down[0].forward(&p1)?;
        let p3 = self.down[1].forward(&p2)?;
        Ok(GuidanceState {
            priors: [p1, p2, p3],
            previous: None,
        })
    }

    fn upsample(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.up[index].forward(x)?.pixel_shuffle(2)
    }

    /// Guidance for block `j` (1-based) of encoder stage `stage` (1..=3).
    pub fn next_guidance_encoder(
        &self,
        state: &mut GuidanceState<T>,
        stage: usize,
        j: usize,
        feedback: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let prior = &state.priors[stage - 1];
        let out = if !self.mode.uses_feedback() || (stage == 1 && j == 1) {
            prior.clone()
        } else {
            let fb = feedback.ok_or_else(|| Error::Contract(format!("encoder ({stage}, {j}) needs feedback")))?;
            let fuse = self.encoder_fuse[stage - 1].as_ref().expect("built for this schedule");
            let entry = j == 1;
            let resample = |x: &Tensor<T>| if entry { self.down[stage - 2].forward(x) } else { Ok(x.clone()) };
            match (self.mode, &state.previous) {
                (GuidanceMode::Progressive, Some(prev)) => fuse.forward(&resample(fb)?, &resample(prev)?)?,
                _ => fuse.forward(&resample(fb)?, prior)?,
            }
        };
        state.previous = Some(out.clone());
        Ok(out)
    }

    /// Guidance for block `j` (1-based) of decoder stage `stage` (2, then 1).
    pub fn next_guidance_decoder(
        &self,
        state: &mut GuidanceState<T>,
        stage: usize,
        j: usize,
        feedback: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if !(1..=2).contains(&stage) {
            return config_err(format!("decoder stage {stage} out of range"));
        }
        let prior = &state.priors[stage - 1];
        let out = if !self.mode.uses_feedback() {
            prior.clone()
        } else {
            let fb = feedback.ok_or_else(|| Error::Contract(format!("decoder ({stage}, {j}) needs feedback")))?;
            let slot = 2 - stage;
            let fuse = &self.decoder_fuse[slot];
            let entry = j == 1;
            let resample = |x: &Tensor<T>| if entry { self.upsample(slot, x) } else { Ok(x.clone()) };
            match (self.mode, &state.previous) {
                (GuidanceMode::Progressive, Some(prev)) => fuse.forward(&resample(fb)?, &resample(prev)?)?,
                _ => fuse.forward(&resample(fb)?, prior)?,
            }
        };
        state.previous = Some(out.clone());
        Ok(out)
    }

    /// Cost of [`Pcgb::encode_prior`] on a `b x 1 x h x w` prior.
    pub fn encode_cost(c: usize, b: usize, h: usize, w: usize) -> Cost {
        let mut k = Cost::default();
        k.conv(ConvSpec::new(1, c, 5), b, h, w, true);
        k.conv(ConvSpec::new(c, c, 1), b, h, w, true);
        k.activation(b * c * h * w);
        k.conv(ConvSpec::new(c, 2 * c, 3).with_stride(2), b, h, w, true);
        k.conv(ConvSpec::new(2 * c, 4 * c, 3).with_stride(2), b, h / 2, w / 2, true);
        k
    }

    /// Cost of one guidance request at position `(stage, j)`; `h`, `w` are the full-resolution extents.
    pub fn guidance_cost(c: usize, mode: GuidanceMode, side: Side, stage: usize, j: usize, b: usize, h: usize, w: usize) -> Cost {
        let mut k = Cost::default();
        if !mode.uses_feedback() || (side == Side::Encoder && stage == 1 && j == 1) {
            return k;
        }
        let ci = stage_width(c, stage);
        let resampled = if mode == GuidanceMode::Progressive { 2 } else { 1 };
        if j == 1 {
            for _ in 0..resampled {
                match side {
                    Side::Encoder => {
                        let cp = stage_width(c, stage - 1);
                        let (hp, wp) = (h >> (stage - 2), w >> (stage - 2));
                        k.conv(ConvSpec::new(cp, 2 * cp, 3).with_stride(2), b, hp, wp, true);
                    }
                    Side::Decoder => {
                        let cn = stage_width(c, stage + 1);
                        k.conv(ConvSpec::new(cn, 2 * cn, 1), b, h >> stage, w >> stage, true);
                    }
                }
            }
        }
        k += Fuse::<f32>::cost(mode.learned(), ci, b);
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_parameters, Module};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn stage_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pcgb::<f32>::new(32, [2, 2, 4, 2, 2], GuidanceMode::Full, &mut rng).unwrap();
        let st = p.encode_prior(&Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        assert_eq!(st.priors[0].shape(), &[1, 32, 64, 64]);
        assert_eq!(st.priors[1].shape(), &[1, 64, 32, 32]);
        assert_eq!(st.priors[2].shape(), &[1, 128, 16, 16]);
    }

    #[test]
    fn zero_parameters_give_zero_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Pcgb::<f64>::new(4, [1, 1, 1, 1, 1], GuidanceMode::Full, &mut rng).unwrap();
        zero_parameters(&mut p);
        let st = p.encode_prior(&random(&[1, 1, 8, 8], &mut rng)).unwrap();
        assert!(st.priors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Pcgb::<f32>::new(4, [1, 1, 1, 1, 1], GuidanceMode::Full, &mut rng).unwrap();
        assert!(matches!(p.encode_prior(&Tensor::zeros(&[1, 1, 10, 8])), Err(Error::Config(_))));
    }

    #[test]
    fn first_block_gets_the_prior_and_equal_feedback_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Pcgb::<f64>::new(4, [2, 2, 2, 2, 2], GuidanceMode::Full, &mut rng).unwrap();
        let mut st = p.encode_prior(&random(&[1, 1, 8, 8], &mut rng)).unwrap();
        let g = p.next_guidance_encoder(&mut st, 1, 1, None).unwrap();
        assert!(g.same_storage(&st.priors[0]));
        let prior = st.priors[0].clone();
        let g = p.next_guidance_encoder(&mut st, 1, 2, Some(&prior)).unwrap();
        assert_eq!(g.data(), prior.data());
        let prior2 = st.priors[1].clone();
        let g = p.next_guidance_decoder(&mut st, 2, 2, Some(&prior2)).unwrap();
        assert_eq!(g.data(), prior2.data());
    }

    #[test]
    fn stage_entries_resample_the_feedback() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Pcgb::<f64>::new(4, [1, 1, 1, 1, 1], GuidanceMode::Full, &mut rng).unwrap();
        let mut st = p.encode_prior(&random(&[2, 1, 8, 8], &mut rng)).unwrap();
        let fb = random(&[2, 4, 8, 8], &mut rng);
        assert_eq!(p.next_guidance_encoder(&mut st, 2, 1, Some(&fb)).unwrap().shape(), &[2, 8, 4, 4]);
        let fb3 = random(&[2, 16, 2, 2], &mut rng);
        assert_eq!(p.next_guidance_decoder(&mut st, 2, 1, Some(&fb3)).unwrap().shape(), &[2, 8, 4, 4]);
        assert!(p.next_guidance_encoder(&mut st, 2, 1, None).is_err());
    }

    #[test]
    fn no_feedback_mode_always_returns_the_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Pcgb::<f64>::new(4, [2, 2, 2, 2, 2], GuidanceMode::NoFeedback, &mut rng).unwrap();
        assert!(p.up.is_empty() && p.decoder_fuse.is_empty());
        let mut st = p.encode_prior(&random(&[1, 1, 8, 8], &mut rng)).unwrap();
        let g = p.next_guidance_encoder(&mut st, 3, 2, None).unwrap();
        assert!(g.same_storage(&st.priors[2]));
    }

    #[test]
    fn parameter_counts_by_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut count = |m| Pcgb::<f32>::new(32, [2, 2, 4, 2, 2], m, &mut rng).unwrap().param_count();
        let full = count(GuidanceMode::Full);
        assert_eq!(count(GuidanceMode::Progressive), full);
        assert!(count(GuidanceMode::Additive) < full);
        assert!(count(GuidanceMode::NoFeedback) < count(GuidanceMode::Additive));
    }
}
