mod common;

use common::{direct_conv, max_abs_diff, naive_dft2, values};
use dgfd_core::gradient_suite::network_conv_specs;
use dgfd_core::tensor::{batch_norm, conv2d, fft2, BnMode, BnStats, ConvSpec, Tensor, BN_EPS, BN_MOMENTUM};
use dgfd_core::training::dual_domain_loss;

fn conv_matches(spec: ConvSpec, dims: [usize; 4], seed: u64) -> f64 {
    let n: usize = dims.iter().product();
    let x = values(n, seed);
    let w = values(spec.weight_shape().iter().product(), seed + 1);
    let b = values(spec.out_channels, seed + 2);
    let (want, shape) = direct_conv(&x, dims, &w, Some(&b), &spec);
    let got = conv2d(
        &Tensor::<f64>::from_vec(x, &dims).unwrap(),
        &Tensor::from_vec(w, &spec.weight_shape()).unwrap(),
        Some(&Tensor::from_vec(b, &[spec.out_channels]).unwrap()),
        spec,
    )
    .unwrap();
    assert_eq!(got.shape(), shape);
    max_abs_diff(got.data(), &want)
}

#[test]
fn conv_configurations_match_direct_summation() {
    for (name, spec) in network_conv_specs(8) {
        for (i, dims) in [[2, spec.in_channels, 8, 8], [1, spec.in_channels, 7, 5], [3, spec.in_channels, 3, 8]]
            .into_iter()
            .enumerate()
        {
            let err = conv_matches(spec, dims, 10 * i as u64);
            assert!(err < 1e-6, "{name} on {dims:?}: {err}");
        }
    }
}

#[test]
fn grouped_and_unpadded_convs_match() {
    let spec = ConvSpec::new(6, 4, 3).with_groups(2).with_padding(0);
    assert!(conv_matches(spec, [2, 6, 6, 7], 3) < 1e-9);
    let spec = ConvSpec::new(3, 5, 5).with_stride(3).with_dilation(2).with_padding(1);
    assert!(conv_matches(spec, [1, 3, 8, 8], 4) < 1e-9);
}

#[test]
fn fft_matches_naive_dft() {
    for &(h, w) in &[(8, 8), (5, 7), (6, 3), (1, 8), (8, 1), (2, 2)] {
        let planes = 3;
        let x = values(planes * h * w, (h * 31 + w) as u64);
        let spec = fft2(&Tensor::<f64>::from_vec(x.clone(), &[1, planes, h, w]).unwrap()).unwrap();
        let wf = w / 2 + 1;
        for p in 0..planes {
            let (re, im) = naive_dft2(&x[p * h * w..(p + 1) * h * w], h, w);
            for k in 0..h {
                for l in 0..wf {
                    let i = (p * h + k) * wf + l;
                    assert!((spec.real.data()[i] - re[k * w + l]).abs() < 1e-6, "{h}x{w} re[{k},{l}]");
                    assert!((spec.imag.data()[i] - im[k * w + l]).abs() < 1e-6, "{h}x{w} im[{k},{l}]");
                }
            }
        }
    }
}

#[test]
fn loss_frequency_term_matches_naive_spectrum() {
    let (h, w) = (2, 2);
    let pred = Tensor::<f64>::from_vec(vec![0.5, 0.0, 0.0, 0.0], &[1, 1, h, w]).unwrap();
    let target = Tensor::zeros(&[1, 1, h, w]);
    let (re, im) = naive_dft2(pred.data(), h, w);
    let expected = re.iter().zip(&im).map(|(r, i)| r.abs() + i.abs()).sum::<f64>() / (h * w) as f64;
    let t = dual_domain_loss(&pred, &target, 0.1).unwrap();
    assert!((t.spatial.item() - 0.125).abs() < 1e-15);
    assert!((t.frequency.item() - expected).abs() < 1e-12);

    // a general case over an odd width exercises the half-spectrum weighting
    let (h, w) = (4, 5);
    let a = values(2 * h * w, 77);
    let pred = Tensor::<f64>::from_vec(a.clone(), &[1, 2, h, w]).unwrap();
    let target = Tensor::zeros(&[1, 2, h, w]);
    let mut total = 0.0;
    for p in 0..2 {
        let (re, im) = naive_dft2(&a[p * h * w..(p + 1) * h * w], h, w);
        total += re.iter().zip(&im).map(|(r, i)| r.abs() + i.abs()).sum::<f64>();
    }
    let t = dual_domain_loss(&pred, &target, 0.1).unwrap();
    assert!((t.frequency.item() - total / (2 * h * w) as f64).abs() < 1e-12);
}

#[test]
fn batch_norm_moments() {
    let dims = [4, 8, 6, 6];
    let x = Tensor::<f64>::from_vec(values(dims.iter().product(), 5).iter().map(|v| 3.0 * v + 1.0).collect(), &dims).unwrap();
    let mut stats = BnStats::new(8);
    let y = batch_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), &mut stats, BnMode::Train, BN_EPS, BN_MOMENTUM).unwrap();
    let plane = 36;
    for c in 0..8 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 8 + c) * plane..][..plane].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_eval_identity() {
    let dims = [2, 3, 4, 4];
    let x = Tensor::<f64>::from_vec(values(96, 6), &dims).unwrap();
    let mut stats = BnStats::new(3);
    let y = batch_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), &mut stats, BnMode::Eval, BN_EPS, BN_MOMENTUM).unwrap();
    let scale = 1.0 / (1.0 + BN_EPS).sqrt();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a * scale - b).abs() < 1e-12);
    }
}
