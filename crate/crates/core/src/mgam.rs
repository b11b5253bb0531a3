//! Multi-level gating aggregation: gated depth-wise stacks at several kernel
//! sizes, a skip-stabilised fusion, channel attention and guidance feedback.

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::fusion::ChannelAttention;
use crate::nn::{module_fields, BatchNorm2d, Conv2d, Cost, Mode};
use crate::scalar::Scalar;
use crate::tensor::{concat, ConvSpec, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MgamOptions {
    pub kernels: Vec<usize>,
    /// Sigmoid gates on each branch; without them the input is not split.
    pub gating: bool,
    /// Feed the normalized input into the multi-level fusion.
    pub skip: bool,
    /// Build the guidance feedback projection.
    pub feedback: bool,
}

impl Default for MgamOptions {
    fn default() -> Self {
        MgamOptions {
            kernels: vec![3, 5],
            gating: true,
            skip: true,
            feedback: true,
        }
    }
}

impl MgamOptions {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return config_err(format!("kernel set {:?} must be non-empty and odd", self.kernels));
        }
        Ok(())
    }
}

/// `DDConv_k(DConv_k(·))` feature stack and optional gate for one kernel size.
#[derive(Debug, Clone)]
pub struct GatedBranch<T: Scalar> {
    pub local: Conv2d<T>,
    pub dilated: Conv2d<T>,
    pub gate: Option<Conv2d<T>>,
}

module_fields!(GatedBranch { local, dilated, gate });

impl<T: Scalar> GatedBranch<T> {
    fn new(c: usize, k: usize, gating: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(GatedBranch {
            local: Conv2d::new(ConvSpec::depthwise(c, k, 1), true, rng)?,
            dilated: Conv2d::new(ConvSpec::depthwise(c, k, 2), true, rng)?,
            gate: gating.then(|| Conv2d::new(ConvSpec::depthwise(c, k, 1), true, rng)).transpose()?,
        })
    }

    pub fn features(&self, x_fea: &Tensor<T>) -> Result<Tensor<T>> {
        self.dilated.forward(&self.local.forward(x_fea)?)
    }

    pub fn gate_signal(&self, x_gate: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        self.gate.as_ref().map(|g| Ok(g.forward(x_gate)?.sigmoid())).transpose()
    }
}

#[derive(Debug, Clone)]
pub struct Mgam<T: Scalar> {
    pub norm: BatchNorm2d<T>,
    pub expand: Conv2d<T>,
    pub branches: Vec<GatedBranch<T>>,
    pub dual_fuse: Conv2d<T>,
    pub multi_fuse: Conv2d<T>,
    pub attention: ChannelAttention<T>,
    pub project: Conv2d<T>,
    pub feedback: Option<Conv2d<T>>,
    options: MgamOptions,
}

module_fields!(Mgam {
    norm,
    expand,
    branches,
    dual_fuse,
    multi_fuse,
    attention,
    project,
    feedback,
});

#[derive(Debug, Clone)]
pub struct MgamOutput<T: Scalar> {
    pub x_f: Tensor<T>,
    /// Feedback correction `X̃_d`, when both guidance and the projection exist.
    pub x_d_tilde: Option<Tensor<T>>,
    pub m_ca: Tensor<T>,
}

impl<T: Scalar> Mgam<T> {
    pub fn new(channels: usize, options: MgamOptions, rng: &mut impl Rng) -> Result<Self> {
        options.validate()?;
        let c = channels;
        let nk = options.kernels.len();
        let expand_out = if options.gating { 2 * c } else { c };
        Ok(Mgam {
            norm: BatchNorm2d::new(c),
            expand: Conv2d::new(ConvSpec::new(c, expand_out, 1), true, rng)?,
            branches: options
                .kernels
                .iter()
                .map(|&k| GatedBranch::new(c, k, options.gating, rng))
                .collect::<Result<_>>()?,
            dual_fuse: Conv2d::new(ConvSpec::new(nk * c, c, 1), true, rng)?,
            multi_fuse: Conv2d::new(ConvSpec::new(if options.skip { 2 * c } else { c }, c, 1), true, rng)?,
            attention: ChannelAttention::new(c, rng)?,
            project: Conv2d::new(ConvSpec::new(c, c, 1), true, rng)?,
            feedback: options.feedback.then(|| Conv2d::new(ConvSpec::new(c, c, 1), true, rng)).transpose()?,
            options,
        })
    }

    pub fn channels(&self) -> usize {
        self.project.spec.in_channels
    }

    pub fn options(&self) -> &MgamOptions {
        &self.options
    }

    /// Per-branch `X_fea_k ⊙ X_gate_k` (or `X_fea_k` without gating) from the normalized input.
    pub fn gated_branches(&self, normed: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let c = self.channels();
        let expanded = self.expand.forward(normed)?;
        let (x_fea, x_gate) = if self.options.gating {
            (expanded.narrow(1, 0, c)?, Some(expanded.narrow(1, c, c)?))
        } else {
            (expanded, None)
        };
        self.branches
            .iter()
            .map(|br| {
                let fea = br.features(&x_fea)?;
                match x_gate.as_ref().map(|g| br.gate_signal(g)).transpose()?.flatten() {
                    Some(gate) => fea.mul(&gate),
                    None => Ok(fea),
                }
            })
            .collect()
    }

    /// `Conv1x1(x_hat_d ⊙ m_ca)`.
    pub fn feedback_feature(&self, x_hat_d: &Tensor<T>, m_ca: &Tensor<T>) -> Result<Tensor<T>> {
        let conv = self
            .feedback
            .as_ref()
            .ok_or_else(|| Error::Contract("this block has no feedback projection".into()))?;
        conv.forward(&x_hat_d.mul(m_ca)?)
    }

    pub fn forward(&self, x_hat_f: &Tensor<T>, x_hat_d: Option<&Tensor<T>>, mode: Mode) -> Result<MgamOutput<T>> {
        let [_, c, _, _] = x_hat_f.dims4()?;
        if c != self.channels() {
            return dim_err(format!("MGAM with {} channels got {:?}", self.channels(), x_hat_f.shape()));
        }
        let normed = self.norm.forward(x_hat_f, mode)?;
        let gated = self.gated_branches(&normed)?;
        let refs: Vec<&Tensor<T>> = gated.iter().collect();
        let x_dual = self.dual_fuse.forward(&concat(&refs, 1)?)?.gelu();
        let x_mult = if self.options.skip {
            self.multi_fuse.forward(&concat(&[&normed, &x_dual], 1)?)?
        } else {
            self.multi_fuse.forward(&x_dual)?
        }
        .gelu();
        let (m_ca, attended) = self.attention.forward(&x_mult)?;
        let x_f = x_hat_f.add(&self.project.forward(&attended)?)?;
        let x_d_tilde = match (x_hat_d, &self.feedback) {
            (Some(d), Some(_)) => {
                if d.shape() != x_hat_f.shape() {
                    return dim_err(format!("MGAM guidance {:?} does not match {:?}", d.shape(), x_hat_f.shape()));
                }
                Some(self.feedback_feature(d, &m_ca)?)
            }
            _ => None,
        };
        Ok(MgamOutput { x_f, x_d_tilde, m_ca })
    }

    /// Analytic forward cost; `with_guidance` says whether the feedback path runs.
    pub fn cost(c: usize, options: &MgamOptions, with_guidance: bool, b: usize, h: usize, w: usize) -> Cost {
        let mut k = Cost::default();
        let n = b * c * h * w;
        k.batch_norm(n);
        k.conv(ConvSpec::new(c, if options.gating { 2 * c } else { c }, 1), b, h, w, true);
        for &ks in &options.kernels {
            k.conv(ConvSpec::depthwise(c, ks, 1), b, h, w, true);
            k.conv(ConvSpec::depthwise(c, ks, 2), b, h, w, true);
            if options.gating {
                k.conv(ConvSpec::depthwise(c, ks, 1), b, h, w, true);
                k.activation(n);
            }
        }
        k.conv(ConvSpec::new(options.kernels.len() * c, c, 1), b, h, w, true);
        k.activation(n);
        k.conv(ConvSpec::new(if options.skip { 2 * c } else { c }, c, 1), b, h, w, true);
        k.activation(n);
        let hidden = (c / crate::fusion::CA_REDUCTION).max(1);
        k.conv(ConvSpec::new(c, hidden, 1), b, 1, 1, true);
        k.activation(b * hidden);
        k.conv(ConvSpec::new(hidden, c, 1), b, 1, 1, true);
        k.activation(b * c);
        k.conv(ConvSpec::new(c, c, 1), b, h, w, true);
        if with_guidance && options.feedback {
            k.conv(ConvSpec::new(c, c, 1), b, h, w, true);
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_parameters, Module};
    use crate::tensor::flops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn zero_block_is_identity_on_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = Mgam::<f64>::new(8, MgamOptions::default(), &mut rng).unwrap();
        zero_parameters(&mut block);
        let x = random(&[2, 8, 6, 6], &mut rng);
        let out = block.forward(&x, Some(&x), Mode::Eval).unwrap();
        assert_eq!(out.x_f.data(), x.data());
        assert!(out.x_d_tilde.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_gates_leave_only_the_fusion_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let mut block = Mgam::<f64>::new(c, MgamOptions::default(), &mut rng).unwrap();
        for br in &mut block.branches {
            let g = br.gate.as_mut().unwrap();
            g.weight = Tensor::parameter(vec![0.0; g.weight.numel()], g.weight.shape()).unwrap();
            g.bias = Some(Tensor::parameter(vec![-800.0; c], &[c]).unwrap());
        }
        let x = random(&[1, c, 5, 5], &mut rng);
        let normed = block.norm.forward(&x, Mode::Eval).unwrap();
        for g in block.gated_branches(&normed).unwrap() {
            assert!(g.data().iter().all(|v| v.abs() < 1e-300));
        }
    }

    #[test]
    fn larger_kernel_reaches_further() {
        // impulse response support of DDConv_k(DConv_k(·)) with all-positive weights
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let support = |k: usize, rng: &mut ChaCha8Rng| {
            let mut br = GatedBranch::<f64>::new(1, k, false, rng).unwrap();
            for conv in [&mut br.local, &mut br.dilated] {
                conv.weight = Tensor::parameter(vec![1.0; k * k], &[1, 1, k, k]).unwrap();
                conv.bias = None;
            }
            let mut img = vec![0.0; 31 * 31];
            img[15 * 31 + 15] = 1.0;
            let x = Tensor::from_vec(img, &[1, 1, 31, 31]).unwrap();
            br.features(&x).unwrap().data().iter().filter(|v| v.abs() > 0.0).count()
        };
        let (s3, s5) = (support(3, &mut rng), support(5, &mut rng));
        assert_eq!(s3, 7 * 7);
        assert_eq!(s5, 13 * 13);
    }

    #[test]
    fn ablations_drop_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut count = |opts: &MgamOptions| Mgam::<f32>::new(32, opts.clone(), &mut rng).unwrap().param_count();
        let full = count(&MgamOptions::default());
        for opts in [
            MgamOptions { kernels: vec![3], ..Default::default() },
            MgamOptions { kernels: vec![5], ..Default::default() },
            MgamOptions { gating: false, ..Default::default() },
            MgamOptions { skip: false, ..Default::default() },
        ] {
            assert!(count(&opts) < full, "{opts:?}");
        }
    }

    #[test]
    fn analytic_cost_matches_instrumented_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for opts in [MgamOptions::default(), MgamOptions { gating: false, skip: false, ..Default::default() }] {
            let block = Mgam::<f32>::new(16, opts.clone(), &mut rng).unwrap();
            let x = Tensor::<f32>::zeros(&[2, 16, 8, 6]);
            let (_, measured) = flops::measure(|| block.forward(&x, Some(&x), Mode::Train).unwrap());
            assert_eq!(measured, Mgam::<f32>::cost(16, &opts, true, 2, 8, 6).flops);
        }
    }
}
