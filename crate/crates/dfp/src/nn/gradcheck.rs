//! Finite-difference verification of the reverse-mode gradients, run over
//! every layer configuration the solver uses (with and without batch norm).

use super::{Activation, Mlp, MlpConfig};
use crate::error::Result;
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub n_params: usize,
    /// Max relative error among entries above the finite-difference noise
    /// floor (zero when every entry agrees to absolute precision).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

fn probe_loss(net: &Mlp, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
    let mut probe = net.clone();
    let (out, _) = probe.forward_train(x.view()).expect("probe forward");
    (&out * weights).sum()
}

fn check_case(label: &str, config: MlpConfig, batch: usize) -> Result<GradCheckReport> {
    let net = Mlp::new(config.clone());
    let x = Array2::from_shape_fn((batch, config.input_dim), |(i, j)| {
        ((i * 31 + j * 7) as f64 * 0.37).sin()
    });
    let weights = Array2::from_shape_fn((batch, config.output_dim), |(i, j)| {
        0.25 + ((i * 13 + j * 5) as f64 * 0.21).cos()
    });
    let mut probe = net.clone();
    let (_, cache) = probe.forward_train(x.view())?;
    let mut grads = vec![0.0; net.n_params()];
    net.backward(&cache, weights.view(), &mut grads)?;

    let h = 1e-6;
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for p in 0..net.n_params() {
        let mut up = net.clone();
        up.params_mut()[p] += h;
        let mut dn = net.clone();
        dn.params_mut()[p] -= h;
        let fd = (probe_loss(&up, &x, &weights) - probe_loss(&dn, &x, &weights)) / (2.0 * h);
        max_abs = max_abs.max((grads[p] - fd).abs());
        // exactly-zero gradients (e.g. biases absorbed by batch norm) sit at
        // the finite-difference noise floor; guard them with an absolute test
        if (grads[p] - fd).abs() < 1e-8 {
            continue;
        }
        let denom = fd.abs().max(grads[p].abs()).max(1e-6);
        max_rel = max_rel.max(((grads[p] - fd) / denom).abs());
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        n_params: net.n_params(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    })
}

/// All layer-type combinations: plain affine, tanh stacks, batch norm on and
/// off, relu, and a downsized replica of the solver's 3-hidden-layer network.
pub fn gradient_check_suite() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let mut cases: Vec<(String, MlpConfig, usize)> = Vec::new();

    let mut affine = MlpConfig::new(3, 2, vec![]).with_seed(101);
    affine.batchnorm = false;
    cases.push(("affine-only".into(), affine, 8));

    let mut tanh_plain = MlpConfig::new(4, 2, vec![6, 5]).with_seed(102);
    tanh_plain.batchnorm = false;
    cases.push(("tanh-2x".into(), tanh_plain, 12));

    let tanh_bn = MlpConfig::new(4, 3, vec![7, 6]).with_seed(103);
    cases.push(("tanh-2x-batchnorm".into(), tanh_bn, 16));

    let mut relu_bn = MlpConfig::new(3, 2, vec![8]).with_seed(104);
    relu_bn.activation = Activation::Relu;
    cases.push(("relu-batchnorm".into(), relu_bn, 16));

    // downsized replica of the production shape (3 hidden layers + batch norm)
    let deep = MlpConfig::new(5, 4, vec![10, 10, 10]).with_seed(105);
    cases.push(("tanh-3x-batchnorm".into(), deep, 16));

    for (label, config, batch) in cases {
        reports.push(check_case(&label, config, batch)?);
    }
    Ok(reports)
}
