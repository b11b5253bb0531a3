//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use dgfd_core::tensor::ConvSpec;

/// Direct summation over every output, channel and tap with zero padding.
pub fn direct_conv(x: &[f64], dims: [usize; 4], w: &[f64], bias: Option<&[f64]>, s: &ConvSpec) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = dims;
    let span = s.dilation * (s.kernel - 1);
    let ho = (h + 2 * s.padding - span - 1) / s.stride + 1;
    let wo = (wd + 2 * s.padding - span - 1) / s.stride + 1;
    let (cin_g, cout_g) = (cin / s.groups, s.out_channels / s.groups);
    let mut out = vec![0.0; b * s.out_channels * ho * wo];
    for n in 0..b {
        for co in 0..s.out_channels {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin_g + ci) * s.kernel + ky) * s.kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * s.out_channels + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, s.out_channels, ho, wo])
}

/// Full `h x w` DFT of one real plane by the defining double sum.
pub fn naive_dft2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for k in 0..h {
        for l in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for m in 0..h {
                for n in 0..w {
                    let phase = -2.0 * std::f64::consts::PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                    sr += x[m * w + n] * phase.cos();
                    si += x[m * w + n] * phase.sin();
                }
            }
            re[k * w + l] = sr;
            im[k * w + l] = si;
        }
    }
    (re, im)
}

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
