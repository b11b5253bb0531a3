use std::f64::consts::{PI, SQRT_2};

use super::{flops, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Pointwise nonlinearities used by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exact `x * Phi(x)` with the Gaussian CDF evaluated through `erf`.
    Gelu,
    Sigmoid,
    Relu,
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => x.gelu(),
        Activation::Sigmoid => x.sigmoid(),
        Activation::Relu => x.relu(),
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x / T::lit(SQRT_2)).erf())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x / T::lit(SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() / T::lit((2.0 * PI).sqrt());
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Same-order broadcast plan: each input axis is either 1 or the output extent.
struct Broadcast {
    out: [usize; 4],
    a: [usize; 4],
    b: [usize; 4],
    out_shape: Vec<usize>,
}

fn padded(shape: &[usize]) -> [usize; 4] {
    let mut d = [1usize; 4];
    d[4 - shape.len()..].copy_from_slice(shape);
    d
}

fn broadcast_strides(dims: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for ax in (0..4).rev() {
        strides[ax] = if dims[ax] == 1 && out[ax] != 1 { 0 } else { acc };
        acc *= dims[ax];
    }
    strides
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return dim_err(format!("broadcast needs equal order, got {a:?} and {b:?}"));
        }
        let (pa, pb) = (padded(a), padded(b));
        let mut out = [1usize; 4];
        for ax in 0..4 {
            out[ax] = match (pa[ax], pb[ax]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                (x, y) => return dim_err(format!("cannot broadcast {a:?} with {b:?} (axis extents {x} vs {y})")),
            };
        }
        let out_shape = out[4 - a.len()..].to_vec();
        Ok(Broadcast {
            out,
            a: broadcast_strides(pa, out),
            b: broadcast_strides(pb, out),
            out_shape,
        })
    }

    fn len(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [o0, o1, o2, o3] = self.out;
        let mut oi = 0;
        for i0 in 0..o0 {
            for i1 in 0..o1 {
                for i2 in 0..o2 {
                    let ab = i0 * self.a[0] + i1 * self.a[1] + i2 * self.a[2];
                    let bb = i0 * self.b[0] + i1 * self.b[1] + i2 * self.b[2];
                    let (sa, sb) = (self.a[3], self.b[3]);
                    for i3 in 0..o3 {
                        f(oi, ab + i3 * sa, bb + i3 * sb);
                        oi += 1;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, kind: BinaryKind) -> Result<Tensor<T>> {
    let plan = Broadcast::new(a.shape(), b.shape())?;
    let n = plan.len();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n];
    if a.shape() == b.shape() {
        match kind {
            BinaryKind::Add => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (x, y))| *o = *x + *y),
            BinaryKind::Sub => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (x, y))| *o = *x - *y),
            BinaryKind::Mul => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (x, y))| *o = *x * *y),
        }
    } else {
        plan.for_each(|o, i, j| {
            out[o] = match kind {
                BinaryKind::Add => ad[i] + bd[j],
                BinaryKind::Sub => ad[i] - bd[j],
                BinaryKind::Mul => ad[i] * bd[j],
            }
        });
    }

    let (sa, sb) = (a.clone(), b.clone());
    let (na, nb) = (a.numel(), b.numel());
    let name = match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
    };
    Ok(Tensor::from_op(name, plan.out_shape.clone(), out, &[a, b], move |g, needs| {
        let mut ga = needs[0].then(|| vec![T::zero(); na]);
        let mut gb = needs[1].then(|| vec![T::zero(); nb]);
        let (ad, bd) = (sa.data(), sb.data());
        plan.for_each(|o, i, j| {
            let (da, db) = match kind {
                BinaryKind::Add => (g[o], g[o]),
                BinaryKind::Sub => (g[o], -g[o]),
                BinaryKind::Mul => (g[o] * bd[j], g[o] * ad[i]),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] = ga[i] + da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] = gb[j] + db;
            }
        });
        vec![ga, gb]
    }))
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum, broadcasting singleton axes of equal-order operands.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryKind::Mul)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        let data = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), data, &[self], move |g, _| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        let data = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, &[self], |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    /// Generic pointwise map with derivative `dfdx(x, y)`.
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        dfdx: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op(name, self.shape().to_vec(), out, &[self], move |g, _| {
            let d = x
                .data()
                .iter()
                .zip(&y)
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * dfdx(xv, yv))
                .collect();
            vec![Some(d)]
        })
    }

    pub fn gelu(&self) -> Tensor<T> {
        flops::add(flops::activation(self.numel() as u64));
        self.unary("gelu", gelu_scalar, |x, _| gelu_derivative(x))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        flops::add(flops::activation(self.numel() as u64));
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn relu(&self) -> Tensor<T> {
        flops::add(flops::activation(self.numel() as u64));
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Sum of all elements as an order-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![s], &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().mul_scalar(1.0 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_reference_values() {
        let x = Tensor::<f64>::from_f64(&[0.0, 1.0], &[2]).unwrap();
        let g = activation(&x, Activation::Gelu);
        assert_eq!(g.data()[0], 0.0);
        // 1 * Phi(1) = 0.5 * (1 + erf(1/sqrt 2))
        assert!((g.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        let s = activation(&x, Activation::Sigmoid);
        assert_eq!(s.data()[0], 0.5);
    }

    #[test]
    fn sigmoid_is_antisymmetric_about_half() {
        let xs = [-7.5, -2.0, -0.3, 0.1, 1.7, 4.0];
        let pos = Tensor::<f64>::from_f64(&xs, &[6]).unwrap().sigmoid();
        let neg = Tensor::<f64>::from_f64(&xs, &[6]).unwrap().neg().sigmoid();
        for (p, n) in pos.data().iter().zip(neg.data()) {
            assert!((n - (1.0 - p)).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::from_f64(&[-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_channel_scale() {
        let x = Tensor::<f64>::from_f64(&(0..8).map(f64::from).collect::<Vec<_>>(), &[1, 2, 2, 2]).unwrap();
        let s = Tensor::<f64>::from_f64(&[10.0, 100.0], &[1, 2, 1, 1]).unwrap();
        let y = x.mul(&s).unwrap();
        assert_eq!(y.data(), &[0.0, 10.0, 20.0, 30.0, 400.0, 500.0, 600.0, 700.0]);
    }

    #[test]
    fn broadcast_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
        assert!(a.add(&b).is_err());
        let c = Tensor::<f64>::zeros(&[2, 3]);
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = Tensor::<f32>::from_f64(&[0.3, -1.5, 2.25, 7.0], &[1, 1, 2, 2]).unwrap();
        let y = x.mul(&Tensor::ones(&[1, 1, 2, 2])).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn broadcast_gradient_sums_over_expanded_axes() {
        let x = Tensor::<f64>::ones(&[2, 3, 2, 2]).requires_grad_();
        let s = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0], &[1, 3, 1, 1]).unwrap().requires_grad_();
        x.mul(&s).unwrap().sum().backward().unwrap();
        // each scale sees 2 (batch) * 4 (pixels) ones
        assert_eq!(s.grad().unwrap().data(), &[8.0, 8.0, 8.0]);
        assert_eq!(x.grad().unwrap().data()[4], 2.0);
    }
}
