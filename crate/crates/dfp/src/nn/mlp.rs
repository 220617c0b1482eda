use super::{Activation, InitScheme, MlpConfig};
use crate::error::{DfpError, Result};
use crate::rng::{stream, CounterRng};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use std::ops::Range;

const BN_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct LayerSlices {
    w: Range<usize>,
    b: Range<usize>,
    gamma: Option<Range<usize>>,
    beta: Option<Range<usize>>,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<LayerSlices>,
    total: usize,
}

fn build_layout(config: &MlpConfig) -> Layout {
    let mut dims = vec![config.input_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(config.output_dim);
    let mut layers = Vec::new();
    let mut cursor = 0usize;
    let mut slice = |len: usize| {
        let r = cursor..cursor + len;
        cursor += len;
        r
    };
    for l in 0..dims.len() - 1 {
        let (in_dim, out_dim) = (dims[l], dims[l + 1]);
        let is_hidden = l + 2 < dims.len();
        let w = slice(in_dim * out_dim);
        let b = slice(out_dim);
        // batch-norm scale/shift replicated per set (a set per partition step
        // for time-conditioned nets; a single set otherwise)
        let (gamma, beta) = if config.batchnorm && is_hidden {
            (
                Some(slice(out_dim * config.bn_sets)),
                Some(slice(out_dim * config.bn_sets)),
            )
        } else {
            (None, None)
        };
        layers.push(LayerSlices {
            w,
            b,
            gamma,
            beta,
            in_dim,
            out_dim,
        });
    }
    Layout {
        layers,
        total: cursor,
    }
}

/// One fully-connected network: flat parameter vector, per-layer slices, and
/// running batch-norm statistics (one statistics row per set).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub config: MlpConfig,
    params: Vec<f64>,
    layout: Layout,
    /// running_mean[bn_layer][set * out_dim + c]
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    pub train_steps: u64,
}

/// Per-layer forward cache for the exact backward pass.
pub struct Cache {
    batch: usize,
    set: usize,
    /// input to each affine layer
    inputs: Vec<Array2<f64>>,
    /// batch-norm intermediates (hidden layers with batchnorm on)
    normalized: Vec<Option<BnCache>>,
    /// post-activation outputs (hidden layers) / raw output (last layer)
    activated: Vec<Array2<f64>>,
    /// pre-activation values (relu masks only)
    pre_activation: Vec<Option<Array2<f64>>>,
}

struct BnCache {
    xhat: Array2<f64>,
    centered: Array2<f64>,
    inv_std: Array1<f64>,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Self {
        assert!(config.bn_sets >= 1, "bn_sets must be at least 1");
        let layout = build_layout(&config);
        let mut params = vec![0.0; layout.total];
        let rng = CounterRng::new(config.init_seed).derive(stream::NET_INIT, 0);
        for (li, layer) in layout.layers.iter().enumerate() {
            match config.init {
                InitScheme::Zeros => {}
                InitScheme::GlorotUniform => {
                    let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
                    for (p, idx) in layer.w.clone().enumerate() {
                        params[idx] = rng.uniform_symmetric(limit, li as u64, p as u64, 0);
                    }
                }
            }
            if let Some(gamma) = &layer.gamma {
                for idx in gamma.clone() {
                    params[idx] = 1.0;
                }
            }
        }
        let running_mean = layout
            .layers
            .iter()
            .filter(|l| l.gamma.is_some())
            .map(|l| vec![0.0; l.out_dim * config.bn_sets])
            .collect();
        let running_var = layout
            .layers
            .iter()
            .filter(|l| l.gamma.is_some())
            .map(|l| vec![1.0; l.out_dim * config.bn_sets])
            .collect();
        Mlp {
            config,
            params,
            layout,
            running_mean,
            running_var,
            train_steps: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(DfpError::shape("Mlp::set_params", self.layout.total, params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn running_stats(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn set_running_stats(&mut self, mean: Vec<Vec<f64>>, var: Vec<Vec<f64>>) -> Result<()> {
        let lens_ok = mean.len() == self.running_mean.len()
            && var.len() == self.running_var.len()
            && mean
                .iter()
                .zip(self.running_mean.iter())
                .all(|(a, b)| a.len() == b.len())
            && var
                .iter()
                .zip(self.running_var.iter())
                .all(|(a, b)| a.len() == b.len());
        if !lens_ok {
            return Err(DfpError::shape(
                "Mlp::set_running_stats",
                self.running_mean.len(),
                mean.len(),
            ));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Indices of multiplicative weights (affine W and batch-norm scales);
    /// biases and shifts are excluded. Used by weight clipping.
    pub fn weight_indices(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        for layer in &self.layout.layers {
            out.push(layer.w.clone());
            if let Some(g) = &layer.gamma {
                out.push(g.clone());
            }
        }
        out
    }

    fn w_view(&self, layer: &LayerSlices) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (layer.out_dim, layer.in_dim),
            &self.params[layer.w.clone()],
        )
        .unwrap()
    }

    fn apply_activation(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.config.activation {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    fn check_set(&self, set: usize) -> Result<()> {
        if set >= self.config.bn_sets {
            return Err(DfpError::Domain(format!(
                "batch-norm set {set} out of range (configured {})",
                self.config.bn_sets
            )));
        }
        Ok(())
    }

    /// Pure forward pass with running statistics (set 0).
    pub fn forward_infer(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_infer_set(0, input)
    }

    /// Pure forward pass with the running statistics of one batch-norm set.
    pub fn forward_infer_set(&self, set: usize, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        self.check_set(set)?;
        let mut x = input.to_owned();
        let n_layers = self.layout.layers.len();
        let mut bn_idx = 0;
        for (l, layer) in self.layout.layers.iter().enumerate() {
            let mut z = x.dot(&self.w_view(layer).t());
            let b = &self.params[layer.b.clone()];
            for mut row in z.outer_iter_mut() {
                for (v, bias) in row.iter_mut().zip(b.iter()) {
                    *v += bias;
                }
            }
            if l + 1 < n_layers {
                if let (Some(gr), Some(br)) = (&layer.gamma, &layer.beta) {
                    let offset = set * layer.out_dim;
                    let gamma = &self.params[gr.clone()][offset..offset + layer.out_dim];
                    let beta = &self.params[br.clone()][offset..offset + layer.out_dim];
                    let mean = &self.running_mean[bn_idx][offset..offset + layer.out_dim];
                    let var = &self.running_var[bn_idx][offset..offset + layer.out_dim];
                    for mut row in z.outer_iter_mut() {
                        for c in 0..layer.out_dim {
                            row[c] = gamma[c] * (row[c] - mean[c]) / (var[c] + BN_EPS).sqrt()
                                + beta[c];
                        }
                    }
                    bn_idx += 1;
                }
                x = self.apply_activation(&z);
            } else {
                x = z;
            }
        }
        Ok(x)
    }

    /// Forward pass with batch statistics (set 0).
    pub fn forward_train(&mut self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Cache)> {
        self.forward_train_set(0, input)
    }

    /// Forward pass with batch statistics for one batch-norm set; updates that
    /// set's running stats and returns the cache for `backward`.
    pub fn forward_train_set(
        &mut self,
        set: usize,
        input: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Cache)> {
        self.check_input(&input)?;
        self.check_set(set)?;
        let batch = input.nrows();
        if self.config.batchnorm && !self.config.hidden.is_empty() && batch < 2 {
            return Err(DfpError::Usage(format!(
                "batch norm in train mode needs a batch of at least 2 (unbiased variance), got {batch}"
            )));
        }
        let n_layers = self.layout.layers.len();
        let mut cache = Cache {
            batch,
            set,
            inputs: Vec::with_capacity(n_layers),
            normalized: Vec::with_capacity(n_layers),
            activated: Vec::with_capacity(n_layers),
            pre_activation: Vec::with_capacity(n_layers),
        };
        let momentum = self.config.bn_momentum;
        let mut x = input.to_owned();
        let mut bn_idx = 0;
        for (l, layer) in self.layout.layers.iter().enumerate() {
            cache.inputs.push(x.clone());
            let mut z = x.dot(&self.w_view(layer).t());
            let b = &self.params[layer.b.clone()];
            for mut row in z.outer_iter_mut() {
                for (v, bias) in row.iter_mut().zip(b.iter()) {
                    *v += bias;
                }
            }
            let is_hidden = l + 1 < n_layers;
            if is_hidden && layer.gamma.is_some() {
                let offset = set * layer.out_dim;
                let gr = layer.gamma.clone().unwrap();
                let br = layer.beta.clone().unwrap();
                let gamma = &self.params[gr][offset..offset + layer.out_dim].to_vec();
                let beta = &self.params[br][offset..offset + layer.out_dim].to_vec();
                let mean = z.mean_axis(Axis(0)).unwrap();
                let mut var = Array1::<f64>::zeros(layer.out_dim);
                for row in z.outer_iter() {
                    for c in 0..layer.out_dim {
                        let d = row[c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.mapv_inplace(|v| v / (batch - 1) as f64);
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let mut centered = z.clone();
                for mut row in centered.outer_iter_mut() {
                    for c in 0..layer.out_dim {
                        row[c] -= mean[c];
                    }
                }
                let mut xhat = centered.clone();
                for mut row in xhat.outer_iter_mut() {
                    for c in 0..layer.out_dim {
                        row[c] *= inv_std[c];
                    }
                }
                for (mut row, xr) in z.outer_iter_mut().zip(xhat.outer_iter()) {
                    for c in 0..layer.out_dim {
                        row[c] = gamma[c] * xr[c] + beta[c];
                    }
                }
                for c in 0..layer.out_dim {
                    self.running_mean[bn_idx][offset + c] =
                        momentum * self.running_mean[bn_idx][offset + c] + (1.0 - momentum) * mean[c];
                    self.running_var[bn_idx][offset + c] =
                        momentum * self.running_var[bn_idx][offset + c] + (1.0 - momentum) * var[c];
                }
                bn_idx += 1;
                cache.normalized.push(Some(BnCache {
                    xhat,
                    centered,
                    inv_std,
                }));
            } else {
                cache.normalized.push(None);
            }
            if is_hidden {
                let a = self.apply_activation(&z);
                cache.pre_activation.push(match self.config.activation {
                    Activation::Tanh => None,
                    Activation::Relu => Some(z.clone()),
                });
                cache.activated.push(a.clone());
                x = a;
            } else {
                cache.pre_activation.push(None);
                cache.activated.push(z.clone());
                x = z;
            }
        }
        Ok((x, cache))
    }

    /// Exact reverse-mode gradients of the train-mode forward composition.
    /// Accumulates into `grads` (same layout as `params`) and returns the
    /// gradient with respect to the inputs.
    pub fn backward(
        &self,
        cache: &Cache,
        upstream: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Result<Array2<f64>> {
        if grads.len() != self.layout.total {
            return Err(DfpError::shape("Mlp::backward grads", self.layout.total, grads.len()));
        }
        let n_layers = self.layout.layers.len();
        let last = &self.layout.layers[n_layers - 1];
        if upstream.dim() != (cache.batch, last.out_dim) {
            return Err(DfpError::Usage(format!(
                "stale cache or mismatched upstream gradient: cache batch {} x {}, upstream {:?}",
                cache.batch,
                last.out_dim,
                upstream.dim()
            )));
        }
        let set = cache.set;
        let mut du = upstream.to_owned();
        for l in (0..n_layers).rev() {
            let layer = &self.layout.layers[l];
            let is_hidden = l + 1 < n_layers;
            if is_hidden {
                match self.config.activation {
                    Activation::Tanh => {
                        let a = &cache.activated[l];
                        du.zip_mut_with(a, |g, &a| *g *= 1.0 - a * a);
                    }
                    Activation::Relu => {
                        let z = cache.pre_activation[l].as_ref().unwrap();
                        du.zip_mut_with(z, |g, &z| {
                            if z <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    }
                }
                if let Some(bn) = &cache.normalized[l] {
                    let gr = layer.gamma.clone().unwrap();
                    let br = layer.beta.clone().unwrap();
                    let offset = set * layer.out_dim;
                    let gamma = &self.params[gr.clone()][offset..offset + layer.out_dim];
                    let b = cache.batch as f64;
                    let out_dim = layer.out_dim;
                    // row-major sweeps: accumulate the per-feature sums first
                    let mut dgamma = vec![0.0; out_dim];
                    let mut dbeta = vec![0.0; out_dim];
                    let mut sum_dxhat = vec![0.0; out_dim];
                    let mut sum_dxhat_centered = vec![0.0; out_dim];
                    for j in 0..cache.batch {
                        let du_row = du.row(j);
                        let xhat_row = bn.xhat.row(j);
                        let centered_row = bn.centered.row(j);
                        for c in 0..out_dim {
                            let g = du_row[c];
                            dgamma[c] += g * xhat_row[c];
                            dbeta[c] += g;
                            let dxhat = g * gamma[c];
                            sum_dxhat[c] += dxhat;
                            sum_dxhat_centered[c] += dxhat * centered_row[c];
                        }
                    }
                    let mut dvar = vec![0.0; out_dim];
                    let mut dmean = vec![0.0; out_dim];
                    for c in 0..out_dim {
                        grads[gr.start + offset + c] += dgamma[c];
                        grads[br.start + offset + c] += dbeta[c];
                        let inv_std = bn.inv_std[c];
                        dvar[c] = -0.5 * inv_std * inv_std * inv_std * sum_dxhat_centered[c];
                        dmean[c] = -inv_std * sum_dxhat[c];
                    }
                    let mut dz = Array2::<f64>::zeros((cache.batch, out_dim));
                    for j in 0..cache.batch {
                        let du_row = du.row(j);
                        let centered_row = bn.centered.row(j);
                        let mut dz_row = dz.row_mut(j);
                        for c in 0..out_dim {
                            let dxhat = du_row[c] * gamma[c];
                            dz_row[c] = dxhat * bn.inv_std[c]
                                + dvar[c] * 2.0 * centered_row[c] / (b - 1.0)
                                + dmean[c] / b;
                        }
                    }
                    du = dz;
                }
            }
            let x = &cache.inputs[l];
            let dw = du.t().dot(x);
            for (offset, v) in dw.iter().enumerate() {
                grads[layer.w.start + offset] += v;
            }
            for c in 0..layer.out_dim {
                let mut acc = 0.0;
                for j in 0..cache.batch {
                    acc += du[[j, c]];
                }
                grads[layer.b.start + c] += acc;
            }
            du = du.dot(&self.w_view(layer));
        }
        Ok(du)
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.config.input_dim {
            return Err(DfpError::shape(
                "Mlp input",
                self.config.input_dim,
                input.ncols(),
            ));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(DfpError::non_finite("Mlp input", "batch contains non-finite entries"));
        }
        Ok(())
    }
}
