//! The 64-bit gradient suite: every differentiable primitive, each composed
//! block and a full one-block network, checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{ChannelAttention, SkFusion};
use crate::hafm::{Hafm, HafmOptions};
use crate::mgam::{Mgam, MgamOptions};
use crate::network::{DgfdNet, ModelConfig};
use crate::nn::Mode;
use crate::tensor::gradcheck::{grad_check_inputs, grad_check_module, GradCheckOptions, GradCheckReport};
use crate::tensor::{batch_norm, concat, conv2d, fft2, ifft2, split, BnMode, BnStats, ConvSpec, Tensor, BN_EPS, BN_MOMENTUM};
use crate::training::dual_domain_loss;

/// Every convolution geometry the network instantiates.
pub fn network_conv_specs(c: usize) -> Vec<(&'static str, ConvSpec)> {
    vec![
        ("conv3x3", ConvSpec::new(c, c, 3)),
        ("conv3x3_s2", ConvSpec::new(c, 2 * c, 3).with_stride(2)),
        ("conv1x1", ConvSpec::new(c, 2 * c, 1)),
        ("conv5x5", ConvSpec::new(1, c, 5)),
        ("dwconv3x3", ConvSpec::depthwise(c, 3, 1)),
        ("dwconv3x3_d2", ConvSpec::depthwise(c, 3, 2)),
        ("dwconv5x5", ConvSpec::depthwise(c, 5, 1)),
        ("dwconv5x5_d2", ConvSpec::depthwise(c, 5, 2)),
    ]
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).expect("shape")
}

/// Values bounded away from zero so `relu` and `abs` kinks stay out of reach.
fn off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(data, shape).expect("shape")
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar.
fn projector(shape: &[usize], seed: u64) -> impl Fn(&Tensor<f64>) -> Result<Tensor<f64>> {
    let r = random(shape, &mut ChaCha8Rng::seed_from_u64(seed));
    move |y: &Tensor<f64>| Ok(y.mul(&r)?.sum())
}

/// Target `pred + offset`, `|offset| >= 0.5`, whose spectrum stays clear of zero
/// so no finite-difference probe of the L1 terms crosses a kink.
fn kink_free_target(pred: &Tensor<f64>, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let [_, _, h, w] = pred.dims4()?;
    let wf = w / 2 + 1;
    loop {
        let n = pred.numel();
        let offset: Vec<f64> = (0..n)
            .map(|_| {
                let v = rng.gen_range(0.5..1.0);
                if rng.gen() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let off = Tensor::from_vec(offset, pred.shape())?;
        let f = fft2(&off)?;
        let clear = (0..f.real.numel()).all(|i| {
            let (k, l) = ((i / wf) % h, i % wf);
            let self_conj = (l == 0 || (w % 2 == 0 && l == w / 2)) && (k == 0 || (h % 2 == 0 && k == h / 2));
            f.real.data()[i].abs() > 1e-2 && (self_conj || f.imag.data()[i].abs() > 1e-2)
        });
        if clear {
            return pred.add(&off);
        }
    }
}

fn primitives(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let s = [2, 3, 4, 5];
    let p = projector(&s, 1);
    let mut out = Vec::new();
    let (a, b) = (random(&s, rng), random(&s, rng));
    let col = random(&[1, 3, 1, 1], rng);
    let kinky = off_zero(&s, rng);

    out.push(grad_check_inputs("add", |x| p(&x[0].add(&x[1])?), &[a.clone(), b.clone()], opts)?);
    out.push(grad_check_inputs("sub", |x| p(&x[0].sub(&x[1])?), &[a.clone(), b.clone()], opts)?);
    out.push(grad_check_inputs("mul", |x| p(&x[0].mul(&x[1])?), &[a.clone(), b.clone()], opts)?);
    out.push(grad_check_inputs("mul_broadcast", |x| p(&x[0].mul(&x[1])?), &[a.clone(), col.clone()], opts)?);
    out.push(grad_check_inputs("add_broadcast", |x| p(&x[0].add(&x[1])?), &[a.clone(), col], opts)?);
    out.push(grad_check_inputs("scale_shift", |x| p(&x[0].mul_scalar(-1.7).add_scalar(0.3).neg()), &[a.clone()], opts)?);
    out.push(grad_check_inputs("gelu", |x| p(&x[0].mul_scalar(3.0).gelu()), &[a.clone()], opts)?);
    out.push(grad_check_inputs("sigmoid", |x| p(&x[0].mul_scalar(3.0).sigmoid()), &[a.clone()], opts)?);
    out.push(grad_check_inputs("relu", |x| p(&x[0].relu()), &[kinky.clone()], opts)?);
    out.push(grad_check_inputs("abs", |x| p(&x[0].abs()), &[kinky], opts)?);
    out.push(grad_check_inputs("sum", |x| Ok(x[0].mul(&x[0])?.sum()), &[a.clone()], opts)?);
    out.push(grad_check_inputs("mean", |x| Ok(x[0].mul(&x[0])?.mean()), &[a.clone()], opts)?);
    out.push(grad_check_inputs(
        "narrow",
        |x| projector(&[2, 2, 4, 5], 2)(&x[0].narrow(1, 1, 2)?),
        &[a.clone()],
        opts,
    )?);
    out.push(grad_check_inputs("reshape", |x| p(&x[0].reshape(&[2, 3, 5, 4])?.reshape(&s)?), &[a.clone()], opts)?);
    out.push(grad_check_inputs(
        "concat",
        |x| projector(&[2, 6, 4, 5], 3)(&concat(&[&x[0], &x[1]], 1)?),
        &[a.clone(), b.clone()],
        opts,
    )?);
    out.push(grad_check_inputs(
        "split",
        |x| {
            let parts = split(&x[0], &[1, 2], 1)?;
            Ok(parts[0].sum().add(&parts[1].mul(&parts[1])?.sum())?)
        },
        &[a.clone()],
        opts,
    )?);
    let sq = random(&[1, 8, 4, 6], rng);
    out.push(grad_check_inputs(
        "pixel_shuffle",
        |x| projector(&[1, 2, 8, 12], 4)(&x[0].pixel_shuffle(2)?),
        &[sq.clone()],
        opts,
    )?);
    out.push(grad_check_inputs(
        "pixel_unshuffle",
        |x| projector(&[1, 32, 2, 3], 5)(&x[0].pixel_unshuffle(2)?),
        &[sq],
        opts,
    )?);
    out.push(grad_check_inputs(
        "global_avg_pool",
        |x| projector(&[2, 3, 1, 1], 6)(&x[0].mul(&x[0])?.global_avg_pool()?),
        &[a.clone()],
        opts,
    )?);
    out.push(grad_check_inputs("softmax", |x| p(&x[0].mul_scalar(2.0).softmax(1)?), &[a.clone()], opts)?);

    for (name, spec) in network_conv_specs(4) {
        let x = random(&[2, spec.in_channels, 7, 6], rng);
        let w = random(&spec.weight_shape(), rng);
        let bias = random(&[spec.out_channels], rng);
        let [ho, wo] = [spec.out_extent(7).expect("fits"), spec.out_extent(6).expect("fits")];
        let proj = projector(&[2, spec.out_channels, ho, wo], 7);
        out.push(grad_check_inputs(
            name,
            |t| proj(&conv2d(&t[0], &t[1], Some(&t[2]), spec)?),
            &[x, w, bias],
            opts,
        )?);
    }

    let gamma = random(&[3], rng);
    let beta = random(&[3], rng);
    for (name, mode) in [("batch_norm_train", BnMode::Train), ("batch_norm_eval", BnMode::Eval)] {
        let mut running = BnStats::new(3);
        running.var = vec![0.5, 1.5, 2.0];
        running.mean = vec![0.1, -0.2, 0.3];
        out.push(grad_check_inputs(
            name,
            |t| {
                let mut stats = running.clone();
                p(&batch_norm(&t[0], &t[1], &t[2], &mut stats, mode, BN_EPS, BN_MOMENTUM)?)
            },
            &[a.clone(), gamma.clone(), beta.clone()],
            opts,
        )?);
    }

    for (h, w) in [(4, 6), (5, 5)] {
        let x = random(&[1, 2, h, w], rng);
        let wf = w / 2 + 1;
        let (pr, pi) = (projector(&[1, 2, h, wf], 8), projector(&[1, 2, h, wf], 9));
        out.push(grad_check_inputs(
            &format!("fft2_{h}x{w}"),
            |t| {
                let f = fft2(&t[0])?;
                pr(&f.real)?.add(&pi(&f.imag)?)
            },
            &[x.clone()],
            opts,
        )?);
        let spec = fft2(&x)?;
        let proj = projector(&[1, 2, h, w], 10);
        out.push(grad_check_inputs(
            &format!("ifft2_{h}x{w}"),
            |t| proj(&ifft2(&crate::tensor::ComplexPair::new(t[0].clone(), t[1].clone(), w)?, (h, w))?),
            &[spec.real.clone(), spec.imag.clone()],
            opts,
        )?);
    }
    Ok(out)
}

fn blocks(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradCheckReport>> {
    let c = 8;
    let s = [2, c, 6, 6];
    let p = projector(&s, 11);
    let mut out = Vec::new();
    let (f1, f2) = (random(&s, rng), random(&s, rng));

    let mut sk = SkFusion::<f64>::new(c, rng)?;
    out.push(grad_check_module("sk_fusion.params", &mut sk, |m| p(&m.forward(&f1, &f2)?), opts)?);
    out.push(grad_check_inputs("sk_fusion.inputs", |x| p(&sk.forward(&x[0], &x[1])?), &[f1.clone(), f2.clone()], opts)?);

    let mut ca = ChannelAttention::<f64>::new(c, rng)?;
    out.push(grad_check_module("channel_attention.params", &mut ca, |m| p(&m.forward(&f1)?.1), opts)?);
    out.push(grad_check_inputs("channel_attention.inputs", |x| p(&ca.forward(&x[0])?.1), &[f1.clone()], opts)?);

    let xd = random(&s, rng);
    let mut hafm = Hafm::<f64>::new(c, HafmOptions::default(), rng)?;
    let hafm_out = |m: &Hafm<f64>, xf: &Tensor<f64>, xd: &Tensor<f64>| -> Result<Tensor<f64>> {
        let o = m.forward(xf, Some(xd), Mode::Train)?;
        p(&o.x_f)?.add(&p(&o.x_d_hat.expect("prior guidance"))?)
    };
    out.push(grad_check_module("hafm.params", &mut hafm, |m| hafm_out(m, &f1, &xd), opts)?);
    out.push(grad_check_inputs("hafm.inputs", |x| hafm_out(&hafm, &x[0], &x[1]), &[f1.clone(), xd.clone()], opts)?);

    let mut mgam = Mgam::<f64>::new(c, MgamOptions::default(), rng)?;
    let mgam_out = |m: &Mgam<f64>, xf: &Tensor<f64>, xd: &Tensor<f64>| -> Result<Tensor<f64>> {
        let o = m.forward(xf, Some(xd), Mode::Train)?;
        p(&o.x_f)?.add(&p(&o.x_d_tilde.expect("feedback enabled"))?)
    };
    out.push(grad_check_module("mgam.params", &mut mgam, |m| mgam_out(m, &f1, &xd), opts)?);
    out.push(grad_check_inputs("mgam.inputs", |x| mgam_out(&mgam, &x[0], &x[1]), &[f1.clone(), xd], opts)?);

    let pred = random(&[2, 3, 6, 5], rng);
    let target = kink_free_target(&pred, rng)?;
    out.push(grad_check_inputs(
        "dual_domain_loss",
        |x| Ok(dual_domain_loss(&x[0], &target, 0.1)?.total),
        &[pred],
        opts,
    )?);
    Ok(out)
}

/// Blocks `[1, 1, 1, 1, 1]`, four base channels, 8x8 input; checked with respect
/// to every parameter tensor (sampled coordinates) and the input is held fixed.
fn network(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        base_channels: 4,
        blocks_per_stage: [1, 1, 1, 1, 1],
        dark_channel_patch: 3,
        seed: 3,
        ..Default::default()
    };
    let mut net = DgfdNet::<f64>::build(&cfg)?;
    let hazy = Tensor::from_vec((0..2 * 3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(), &[2, 3, 8, 8])?;
    let p = projector(&[2, 3, 8, 8], 12);
    let sampled = GradCheckOptions {
        max_coords: Some(opts.max_coords.unwrap_or(6).min(6)),
        ..*opts
    };
    grad_check_module("network_1block", &mut net, |m| p(&m.forward(&hazy, Mode::Train)?.dehazed), &sampled)
}

/// Runs the whole suite; callers inspect [`GradCheckReport::passed`].
///
/// Primitives use `primitive` (second-order, `h = 1e-5` by default); composed
/// blocks and the network use `composed`.
pub fn run_suite(primitive: &GradCheckOptions, composed: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(primitive.seed);
    let mut reports = primitives(primitive, &mut rng)?;
    reports.extend(blocks(composed, &mut rng)?);
    reports.push(network(composed, &mut rng)?);
    Ok(reports)
}

/// [`run_suite`] with the default settings.
pub fn run_default_suite() -> Result<Vec<GradCheckReport>> {
    run_suite(&GradCheckOptions::default(), &GradCheckOptions::composed())
}
