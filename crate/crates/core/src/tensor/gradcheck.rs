//! Central-difference verification of reverse-mode gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::nn::Module;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub rel_floor: f64,
    /// Coordinates sampled per tensor; `None` checks every element.
    pub max_coords: Option<usize>,
    /// Fourth-order stencil `(8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`; lets
    /// deep compositions use a larger step without truncation error.
    pub fourth_order: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            rel_floor: 1e-6,
            max_coords: None,
            fourth_order: false,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    /// Settings for deep compositions, where roundoff at `h = 1e-5` rivals small gradients.
    pub fn composed() -> Self {
        GradCheckOptions {
            step: 1e-3,
            fourth_order: true,
            ..Default::default()
        }
    }

    fn difference(&self, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let h = self.step;
        let d1 = eval(h)? - eval(-h)?;
        if !self.fourth_order {
            return Ok(d1 / (2.0 * h));
        }
        let d2 = eval(2.0 * h)? - eval(-2.0 * h)?;
        Ok((8.0 * d1 - d2) / (12.0 * h))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: String,
    pub tol: f64,
}

impl GradCheckReport {
    fn new(name: &str, tol: f64) -> Self {
        GradCheckReport {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: String::new(),
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol && self.max_rel_err.is_finite()
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || rel.is_nan() {
            self.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", label());
        }
    }
}

fn scalar_of(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!("grad check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}

fn coords(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

fn perturbed(t: &Tensor<f64>, i: usize, delta: f64, requires_grad: bool) -> Tensor<f64> {
    let mut data = t.to_vec();
    data[i] += delta;
    if requires_grad {
        Tensor::parameter(data, t.shape()).expect("same shape")
    } else {
        Tensor::from_vec(data, t.shape()).expect("same shape")
    }
}

/// Compares the gradient of scalar `f` at `x` against central differences.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        step: h,
        tol,
        ..Default::default()
    };
    grad_check_inputs("f", |xs| f(&xs[0]), std::slice::from_ref(x), &opts)
}

/// Gradient check of `f` with respect to every tensor in `inputs`.
pub fn grad_check_inputs(
    name: &str,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad_()).collect();
    let y = f(&leaves)?;
    scalar_of(&y)?;
    y.backward()?;
    let mut report = GradCheckReport::new(name, opts.tol);
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for i in coords(leaf.numel(), opts, k as u64) {
            let eval = |delta: f64| -> Result<f64> {
                let mut xs: Vec<Tensor<f64>> = leaves.iter().map(|t| t.detach()).collect();
                xs[k] = perturbed(&leaves[k], i, delta, false);
                no_grad(|| f(&xs)).and_then(|t| scalar_of(&t))
            };
            let numeric = opts.difference(eval)?;
            report.record(|| format!("input {k}[{i}]"), analytic[i], numeric, opts.rel_floor);
        }
    }
    Ok(report)
}

/// Gradient check of `f` with respect to every parameter of `module`.
pub fn grad_check_module<M: Module<f64>>(
    name: &str,
    module: &mut M,
    f: impl Fn(&M) -> Result<Tensor<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    // fresh leaves so no stale gradients are summed in
    module.visit_mut("", &mut |_, t, kind| {
        if kind.is_parameter() {
            *t = t.detach().requires_grad_();
        }
    });
    let y = f(module)?;
    scalar_of(&y)?;
    y.backward()?;
    let params = module.parameters();

    let mut report = GradCheckReport::new(name, opts.tol);
    for (k, (pname, p)) in params.iter().enumerate() {
        let analytic = p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
        for i in coords(p.numel(), opts, k as u64) {
            let mut eval = |delta: f64| -> Result<f64> {
                set_parameter(module, k, perturbed(p, i, delta, true));
                let v = no_grad(|| f(module)).and_then(|t| scalar_of(&t));
                set_parameter(module, k, p.clone());
                v
            };
            let numeric = opts.difference(&mut eval)?;
            report.record(|| format!("{pname}[{i}]"), analytic[i], numeric, opts.rel_floor);
        }
    }
    Ok(report)
}

fn set_parameter<M: Module<f64>>(module: &mut M, index: usize, value: Tensor<f64>) {
    let mut k = 0;
    let mut value = Some(value);
    module.visit_mut("", &mut |_, t, kind| {
        if kind.is_parameter() {
            if k == index {
                *t = value.take().expect("visited once");
            }
            k += 1;
        }
    });
}
