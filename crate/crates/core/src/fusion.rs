//! Selective-kernel fusion of two feature maps and channel attention.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::nn::{module_fields, Conv2d, Cost, Module};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Tensor};

pub const SK_REDUCTION: usize = 8;
pub const CA_REDUCTION: usize = 8;

/// Branch weights from pooled features: `C -> d -> 2C`, softmax over the two branches.
#[derive(Debug, Clone)]
pub struct SkFusion<T: Scalar> {
    pub squeeze: Conv2d<T>,
    pub excite: Conv2d<T>,
}

module_fields!(SkFusion { squeeze, excite });

impl<T: Scalar> SkFusion<T> {
    pub fn hidden_width(channels: usize) -> usize {
        (channels / SK_REDUCTION).max(4)
    }

    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = Self::hidden_width(channels);
        Ok(SkFusion {
            squeeze: Conv2d::new(ConvSpec::new(channels, d, 1), false, rng)?,
            excite: Conv2d::new(ConvSpec::new(d, 2 * channels, 1), false, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.spec.in_channels
    }

    /// Per-channel weight of the first branch, `B x C x 1 x 1`; the second is `1 - a1`.
    pub fn branch_weight(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, c, _, _] = f1.dims4()?;
        if f1.shape() != f2.shape() || c != self.channels() {
            return dim_err(format!(
                "sk_fuse of {:?} and {:?} with a {}-channel block",
                f1.shape(),
                f2.shape(),
                self.channels()
            ));
        }
        let pooled = f1.add(f2)?.global_avg_pool()?;
        let logits = self.excite.forward(&self.squeeze.forward(&pooled)?.gelu())?;
        let attn = logits.reshape(&[b, 2, c, 1])?.softmax(1)?;
        attn.narrow(1, 0, 1)?.reshape(&[b, c, 1, 1])
    }

    /// `a1 f1 + a2 f2`, evaluated as `f2 + a1 (f1 - f2)` so equal inputs pass through exactly.
    pub fn forward(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
        let a1 = self.branch_weight(f1, f2)?;
        f2.add(&f1.sub(f2)?.mul(&a1)?)
    }

    /// Analytic forward cost for a batch of `b`; pooling and softmax are not counted.
    pub fn cost(c: usize, b: usize) -> Cost {
        let d = Self::hidden_width(c);
        let mut k = Cost::default();
        k.conv(ConvSpec::new(c, d, 1), b, 1, 1, false);
        k.activation(b * d);
        k.conv(ConvSpec::new(d, 2 * c, 1), b, 1, 1, false);
        k
    }
}

/// `M_ca = sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T: Scalar> {
    pub reduce: Conv2d<T>,
    pub expand: Conv2d<T>,
}

module_fields!(ChannelAttention { reduce, expand });

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = (channels / CA_REDUCTION).max(1);
        Ok(ChannelAttention {
            reduce: Conv2d::new(ConvSpec::new(channels, hidden, 1), true, rng)?,
            expand: Conv2d::new(ConvSpec::new(hidden, channels, 1), true, rng)?,
        })
    }

    /// Returns `(M_ca, x * M_ca)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let hidden = self.reduce.forward(&x.global_avg_pool()?)?.relu();
        let m = self.expand.forward(&hidden)?.sigmoid();
        let y = x.mul(&m)?;
        Ok((m, y))
    }
}

/// Either a learned fusion or plain addition.
#[derive(Debug, Clone)]
pub enum Fuse<T: Scalar> {
    Sk(SkFusion<T>),
    Add,
}

impl<T: Scalar> Fuse<T> {
    pub fn new(channels: usize, learned: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(if learned { Fuse::Sk(SkFusion::new(channels, rng)?) } else { Fuse::Add })
    }

    pub fn forward(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Fuse::Sk(sk) => sk.forward(f1, f2),
            Fuse::Add => f1.add(f2),
        }
    }

    pub fn cost(learned: bool, c: usize, b: usize) -> Cost {
        if learned {
            SkFusion::<T>::cost(c, b)
        } else {
            Cost::default()
        }
    }
}

impl<T: Scalar> Module<T> for Fuse<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, crate::nn::TensorKind)) {
        if let Fuse::Sk(sk) = self {
            sk.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, crate::nn::TensorKind)) {
        if let Fuse::Sk(sk) = self {
            sk.visit_mut(prefix, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(), shape).unwrap()
    }

    #[test]
    fn equal_inputs_pass_through_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sk = SkFusion::<f64>::new(16, &mut rng).unwrap();
        let f = random(&[2, 16, 5, 5], &mut rng);
        assert_eq!(sk.forward(&f, &f).unwrap().data(), f.data());
    }

    #[test]
    fn zero_parameters_average_the_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sk = SkFusion::<f64>::new(8, &mut rng).unwrap();
        zero_parameters(&mut sk);
        let (a, b) = (random(&[1, 8, 3, 4], &mut rng), random(&[1, 8, 3, 4], &mut rng));
        let out = sk.forward(&a, &b).unwrap();
        for i in 0..out.numel() {
            assert!((out.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sk = SkFusion::<f64>::new(8, &mut rng).unwrap();
        let (a, b) = (random(&[2, 8, 4, 4], &mut rng), random(&[2, 8, 4, 4], &mut rng));
        let out = sk.forward(&a, &b).unwrap();
        for i in 0..out.numel() {
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn zero_attention_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ca = ChannelAttention::<f64>::new(16, &mut rng).unwrap();
        zero_parameters(&mut ca);
        let x = random(&[1, 16, 3, 3], &mut rng);
        let (m, y) = ca.forward(&x).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(a * 0.5, *b);
        }
    }

    #[test]
    fn attention_ignores_spatial_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ca = ChannelAttention::<f64>::new(8, &mut rng).unwrap();
        let x = random(&[1, 8, 4, 4], &mut rng);
        let flipped: Vec<f64> = x.data().chunks(16).flat_map(|p| p.iter().rev().copied()).collect();
        let xf = Tensor::from_vec(flipped, &[1, 8, 4, 4]).unwrap();
        let (m1, _) = ca.forward(&x).unwrap();
        let (m2, _) = ca.forward(&xf).unwrap();
        for (a, b) in m1.data().iter().zip(m2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
