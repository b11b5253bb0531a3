//! Parameterized layers and the module visitor used for enumeration, optimizers and checkpoints.

use std::sync::Mutex;

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{batch_norm, conv2d, flops, BnStats, ConvSpec, Tensor, BN_EPS, BN_MOMENTUM};

pub use crate::tensor::BnMode as Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trainable, updated by the optimizer.
    Parameter,
    /// Persistent state such as running statistics.
    Buffer,
}

impl TensorKind {
    pub fn is_parameter(self) -> bool {
        self == TensorKind::Parameter
    }
}

/// Deterministic, ordered traversal over named tensors.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind));

    fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, kind| {
            if kind.is_parameter() {
                out.push((name.to_string(), t.clone()));
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind.is_parameter() {
                n += t.numel();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &$crate::tensor::Tensor<T>, $crate::nn::TensorKind),
            ) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>, $crate::nn::TensorKind),
            ) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use module_fields;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` (Kaiming-uniform with `a = sqrt(5)`).
fn kaiming_uniform<T: Scalar>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = Tensor::parameter(kaiming_uniform(rng, shape.iter().product(), fan_in), &shape)?;
        let bias = if bias {
            Some(Tensor::parameter(kaiming_uniform(rng, spec.out_channels, fan_in), &[spec.out_channels])?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn zeros(spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        Ok(Conv2d {
            weight: Tensor::parameter(vec![T::zero(); shape.iter().product()], &shape)?,
            bias: if bias { Some(Tensor::parameter(vec![T::zero(); spec.out_channels], &[spec.out_channels])?) } else { None },
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "weight"), &self.weight, TensorKind::Parameter);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, TensorKind::Parameter);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "weight"), &mut self.weight, TensorKind::Parameter);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, TensorKind::Parameter);
        }
    }
}

/// Batch normalization with affine parameters and running statistics.
///
/// Running statistics sit behind a mutex so a shared `&self` forward can
/// update them in train mode.
#[derive(Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    stats: Mutex<BnStats<T>>,
}

impl<T: Scalar> Clone for BatchNorm2d<T> {
    fn clone(&self) -> Self {
        BatchNorm2d {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            stats: Mutex::new(self.stats()),
        }
    }
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::parameter(vec![T::one(); channels], &[channels]).expect("1-D"),
            beta: Tensor::parameter(vec![T::zero(); channels], &[channels]).expect("1-D"),
            stats: Mutex::new(BnStats::new(channels)),
        }
    }

    pub fn stats(&self) -> BnStats<T> {
        self.stats.lock().unwrap().clone()
    }

    pub fn set_stats(&self, stats: BnStats<T>) {
        *self.stats.lock().unwrap() = stats;
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut stats = self.stats.lock().unwrap();
        batch_norm(x, &self.gamma, &self.beta, &mut stats, mode, BN_EPS, BN_MOMENTUM)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorKind)) {
        f(&join(prefix, "gamma"), &self.gamma, TensorKind::Parameter);
        f(&join(prefix, "beta"), &self.beta, TensorKind::Parameter);
        let st = self.stats();
        let c = st.mean.len();
        let mean = Tensor::from_vec(st.mean, &[c]).expect("1-D");
        let var = Tensor::from_vec(st.var, &[c]).expect("1-D");
        f(&join(prefix, "running_mean"), &mean, TensorKind::Buffer);
        f(&join(prefix, "running_var"), &var, TensorKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, TensorKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, TensorKind::Parameter);
        f(&join(prefix, "beta"), &mut self.beta, TensorKind::Parameter);
        let st = self.stats.get_mut().unwrap();
        let c = st.mean.len();
        let mut mean = Tensor::from_vec(st.mean.clone(), &[c]).expect("1-D");
        let mut var = Tensor::from_vec(st.var.clone(), &[c]).expect("1-D");
        f(&join(prefix, "running_mean"), &mut mean, TensorKind::Buffer);
        f(&join(prefix, "running_var"), &mut var, TensorKind::Buffer);
        st.mean = mean.to_vec();
        st.var = var.to_vec();
    }
}

/// Analytic forward cost, tallied with the same per-op formulas the
/// instrumented forward pass uses.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Cost {
    /// Convolutions (2 per MAC plus bias adds), batch norm, activations and FFTs.
    pub flops: u64,
    /// Convolution multiply-accumulates only.
    pub conv_macs: u64,
}

impl Cost {
    /// Convolution on a `batch x in x h x w` input.
    pub fn conv(&mut self, spec: ConvSpec, batch: usize, h: usize, w: usize, bias: bool) {
        self.flops += spec.flops(batch, h, w, bias);
        let (ho, wo) = (spec.out_extent(h).unwrap_or(0), spec.out_extent(w).unwrap_or(0));
        self.conv_macs += (batch * spec.out_channels * ho * wo * (spec.in_channels / spec.groups) * spec.kernel * spec.kernel) as u64;
    }

    pub fn batch_norm(&mut self, elems: usize) {
        self.flops += flops::batch_norm(elems as u64);
    }

    pub fn activation(&mut self, elems: usize) {
        self.flops += flops::activation(elems as u64);
    }

    /// `planes` real 2-D transforms of extent `h x w` (forward or inverse).
    pub fn fft(&mut self, planes: usize, h: usize, w: usize) {
        self.flops += planes as u64 * flops::fft_plane(h, w);
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.flops += rhs.flops;
        self.conv_macs += rhs.conv_macs;
    }
}

/// Sets every parameter and buffer of `module` to zero.
pub fn zero_parameters<T: Scalar, M: Module<T>>(module: &mut M) {
    module.visit_mut("", &mut |_, t, kind| {
        if kind.is_parameter() {
            *t = Tensor::parameter(vec![T::zero(); t.numel()], t.shape()).expect("same shape");
        }
    });
}

/// Copies all tensors of `src` into `dst` and casts them to another precision.
pub fn cast_module<T: Scalar, U: Scalar, M: Module<T>, N: Module<U>>(src: &M, dst: &mut N) {
    let mut values = Vec::new();
    src.visit("", &mut |_, t, _| values.push(t.cast::<U>()));
    let mut it = values.into_iter();
    dst.visit_mut("", &mut |_, t, kind| {
        let v = it.next().expect("same architecture");
        *t = if kind.is_parameter() { v.requires_grad_() } else { v };
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_count_is_c_squared_plus_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = 32;
        let conv = Conv2d::<f32>::new(ConvSpec::new(c, c, 1), true, &mut rng).unwrap();
        assert_eq!(conv.param_count(), c * c + c);
    }

    #[test]
    fn init_within_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(ConvSpec::new(4, 8, 3), true, &mut rng).unwrap();
        let bound = 1.0 / 36f64.sqrt();
        assert!(conv.weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn batch_norm_exposes_running_stats_as_buffers() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        let mut names = Vec::new();
        bn.visit("bn", &mut |n, _, k| names.push((n.to_string(), k)));
        assert_eq!(names.len(), 4);
        assert_eq!(names[2], ("bn.running_mean".to_string(), TensorKind::Buffer));
        bn.visit_mut("", &mut |n, t, _| {
            if n == "running_var" {
                *t = Tensor::full(&[3], 2.0);
            }
        });
        assert_eq!(bn.stats().var, vec![2.0; 3]);
        assert_eq!(bn.param_count(), 6);
    }
}
