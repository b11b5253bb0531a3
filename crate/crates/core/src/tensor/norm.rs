use super::{flops, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running per-channel statistics.
#[derive(Debug, Clone)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Per-channel batch normalization of a `B x C x H x W` tensor with affine `gamma`, `beta`.
///
/// Train mode normalizes over batch and spatial axes with the biased variance
/// and folds the unbiased variance into `stats` with the given momentum.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats<T>,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return dim_err(format!("batch_norm: per-channel state must have length {c}"));
    }
    flops::add(flops::batch_norm(x.numel() as u64));
    let plane = h * w;
    let count = b * plane;
    let xd = x.data();
    let eps_t = T::lit(eps);

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_n = T::lit(1.0 / count as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for n in 0..b {
                    acc = acc + xd[(n * c + ch) * plane..][..plane].iter().fold(T::zero(), |a, &v| a + v);
                }
                mean[ch] = acc * inv_n;
                let mut sq = T::zero();
                for n in 0..b {
                    sq = sq
                        + xd[(n * c + ch) * plane..][..plane]
                            .iter()
                            .fold(T::zero(), |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
                }
                var[ch] = sq * inv_n;
            }
            let m = T::lit(momentum);
            let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * var[ch] * unbias;
            }
            (mean, var)
        }
        BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            for i in off..off + plane {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
    }

    let gamma_saved = gamma.clone();
    Ok(Tensor::from_op("batch_norm", x.shape().to_vec(), out, &[x, gamma, beta], move |g, needs| {
        let gd = gamma_saved.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    sum_g[ch] = sum_g[ch] + g[i];
                    sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); g.len()];
            let inv_n = T::lit(1.0 / count as f64);
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * plane;
                    let scale = gd[ch] * inv_std[ch];
                    for i in off..off + plane {
                        gx[i] = match mode {
                            BnMode::Train => scale * (g[i] - inv_n * sum_g[ch] - xhat[i] * inv_n * sum_gx[ch]),
                            BnMode::Eval => scale * g[i],
                        };
                    }
                }
            }
            gx
        });
        vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones(&[c]), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let (g, b) = affine(2);
        let mut st = BnStats::new(2);
        let x = Tensor::<f64>::full(&[3, 2, 4, 4], 1.7);
        let y = batch_norm(&x, &g, &b, &mut st, BnMode::Train, BN_EPS, BN_MOMENTUM).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12 && v.is_finite()));
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let (g, b) = affine(3);
        let mut st = BnStats::new(3);
        let x = Tensor::<f64>::from_vec((0..48).map(|i| (i as f64 * 0.37).cos()).collect(), &[1, 3, 4, 4]).unwrap();
        let y = batch_norm(&x, &g, &b, &mut st, BnMode::Eval, BN_EPS, BN_MOMENTUM).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * scale - b).abs() < 1e-15);
        }
    }

    #[test]
    fn train_mode_moments_from_direct_recomputation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (b, c, h, w) = (4, 8, 6, 6);
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let x = Tensor::<f64>::from_vec(data, &[b, c, h, w]).unwrap();
        let (g, bt) = affine(c);
        let mut st = BnStats::new(c);
        let y = batch_norm(&x, &g, &bt, &mut st, BnMode::Train, BN_EPS, BN_MOMENTUM).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b)
                .flat_map(|n| y.data()[(n * c + ch) * h * w..][..h * w].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
        // running stats moved away from (0, 1)
        assert!(st.mean.iter().any(|m| m.abs() > 1e-3));
    }
}
