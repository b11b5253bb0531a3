use dgfd_core::network::{flop_count, param_count};
use dgfd_core::nn::{Mode, Module};
use dgfd_core::tensor::flops;
use dgfd_core::training::dual_domain_loss;
use dgfd_core::{Ablation, DgfdNet, ModelConfig, Tensor};

fn small(c: usize) -> ModelConfig {
    ModelConfig {
        base_channels: c,
        blocks_per_stage: [1, 1, 1, 1, 1],
        ..ModelConfig::default()
    }
}

fn input(b: usize, h: usize, w: usize) -> Tensor<f64> {
    let n = b * 3 * h * w;
    Tensor::from_vec((0..n).map(|i| 0.5 + 0.4 * ((i * 7919 % 1000) as f64 / 1000.0 - 0.5)).collect(), &[b, 3, h, w]).unwrap()
}

#[test]
fn default_parameter_count_is_near_reference() {
    let n = param_count(&ModelConfig::default()).unwrap();
    assert!((1_600_000..=2_600_000).contains(&n), "{n}");
}

#[test]
fn ablations_shrink_or_keep_the_network() {
    let full = param_count(&ModelConfig::default()).unwrap();
    for a in Ablation::ALL.into_iter().skip(1) {
        let n = param_count(&ModelConfig::default().with_ablation(a)).unwrap();
        let reference_delta = a.reference_params_m() - Ablation::None.reference_params_m();
        if reference_delta < 0.0 {
            assert!(n < full, "{a}: {n} vs {full}");
        } else {
            assert!(n <= full, "{a}: {n} vs {full}");
        }
    }
}

#[test]
fn analytic_flops_match_instrumented_count_at_256() {
    let config = ModelConfig::default();
    let net = DgfdNet::<f32>::build(&config).unwrap();
    let x = Tensor::<f32>::full(&[1, 3, 256, 256], 0.5);
    let (_, measured) = flops::measure(|| net.infer(&x).unwrap());
    let cost = flop_count(&config, 256, 256).unwrap();
    assert_eq!(cost.flops, measured);
    let g = cost.conv_macs as f64 / 1e9;
    assert!((13.65 * 0.65..=13.65 * 1.35).contains(&g), "{g} GMAC");
}

#[test]
fn doubling_width_roughly_quadruples_parameters() {
    let a = param_count(&small(16)).unwrap() as f64;
    let b = param_count(&small(32)).unwrap() as f64;
    let r = b / a;
    assert!((3.0..4.2).contains(&r), "{r}");
}

#[test]
fn every_parameter_receives_a_gradient() {
    for ablation in Ablation::ALL {
        let net = DgfdNet::<f64>::build(&small(8).with_ablation(ablation)).unwrap();
        let x = input(2, 16, 16);
        let target = Tensor::full(&[2, 3, 16, 16], 0.3);
        let out = net.forward(&x, Mode::Train).unwrap();
        dual_domain_loss(&out.dehazed, &target, 0.1).unwrap().total.backward().unwrap();
        let mut live_bottlenecks = 0;
        for (name, p) in net.parameters() {
            let g = p.grad().unwrap_or_else(|| panic!("{ablation}: {name} has no gradient"));
            let nonzero = g.data().iter().any(|v| *v != 0.0);
            // a channel-attention bottleneck can sit entirely behind dead ReLU units,
            // which also silences the expand weights that read from it
            if name.contains("attention.reduce") || name.contains("attention.expand.weight") {
                live_bottlenecks += nonzero as usize;
            } else {
                assert!(nonzero, "{ablation}: {name} gradient is zero");
            }
        }
        assert!(live_bottlenecks > 0, "{ablation}");
    }
}

#[test]
fn prior_encoder_is_trained() {
    let net = DgfdNet::<f64>::build(&small(8)).unwrap();
    let x = input(2, 16, 16);
    let out = net.forward(&x, Mode::Train).unwrap();
    dual_domain_loss(&out.dehazed, &Tensor::zeros(&[2, 3, 16, 16]), 0.1).unwrap().total.backward().unwrap();
    let guided: Vec<_> = net.parameters().into_iter().filter(|(n, _)| n.starts_with("guidance")).collect();
    assert!(!guided.is_empty());
    assert!(guided.iter().all(|(_, p)| p.grad().is_some()));
}

#[test]
fn zero_tail_returns_input_bit_exactly() {
    for a in [Ablation::None, Ablation::HafmSsa] {
        let mut net = DgfdNet::<f32>::build(&small(8).with_ablation(a)).unwrap();
        net.zero_tail();
        let x = input(1, 20, 24).cast::<f32>();
        assert_eq!(net.infer(&x).unwrap().dehazed.data(), x.data());
    }
}

#[test]
fn taps_cover_every_block() {
    let config = small(8);
    let net = DgfdNet::<f32>::build(&config).unwrap();
    let out = net.infer(&input(1, 16, 16).cast()).unwrap();
    let names: Vec<_> = out.taps.iter().map(|t| t.position.as_str()).collect();
    assert_eq!(names, ["enc1.0", "enc2.0", "enc3.0", "dec2.0", "dec1.0"]);
    for t in &out.taps {
        assert!(t.m_sa.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let no_maps = DgfdNet::<f32>::build(&config.with_ablation(Ablation::HafmF)).unwrap();
    assert!(no_maps.infer(&input(1, 16, 16).cast()).unwrap().taps.is_empty());
}

#[test]
fn precisions_agree() {
    let net = DgfdNet::<f64>::build(&small(8)).unwrap();
    let x = input(1, 16, 16);
    let y64 = net.infer(&x).unwrap().dehazed;
    let y32 = net.cast::<f32>().unwrap().infer(&x.cast()).unwrap().dehazed;
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}
