//! The bottleneck tuning network.
//!
//! Each bottleneck is `linear → batch norm → ReLU`. The first bottleneck
//! reduces `d` channels to `d / r`, an optional middle one keeps `d / r`, and
//! the last enlarges back to `d`. The last bottleneck's ReLU is optional
//! ([`NetworkConfig::rectify_output`]); without it the network can emit signed
//! offsets.
//!
//! Forward passes never mutate the network. Train-mode passes return a
//! [`Trace`] holding the batch statistics, which [`AptNetwork::commit`] folds
//! into the running statistics.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{affine, sqrt, Matrix};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub dim: usize,
    pub reduction: usize,
    /// Number of bottlenecks, 2 or 3.
    pub layers: usize,
    pub rectify_output: bool,
}

impl NetworkConfig {
    pub fn new(dim: usize, reduction: usize, layers: usize) -> Self {
        Self { dim, reduction, layers, rectify_output: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.dim == 0 || self.dim % self.reduction != 0 {
            return Err(Error::InvalidConfig(alloc::format!(
                "dim {} must be a positive multiple of reduction {}",
                self.dim,
                self.reduction
            )));
        }
        if !(2..=3).contains(&self.layers) {
            return Err(Error::InvalidConfig(alloc::format!("layers must be 2 or 3, got {}", self.layers)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dim / self.reduction
    }

    /// (in, out) widths of every bottleneck.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden();
        let mut s = vec![(self.dim, h)];
        if self.layers == 3 {
            s.push((h, h));
        }
        s.push((h, self.dim));
        s
    }

    /// Trainable parameters: weights, biases, and BN scale and shift.
    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|&(i, o)| i * o + o + 2 * o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub rectify: bool,
}

impl Bottleneck {
    fn zeroed(in_dim: usize, out_dim: usize, rectify: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            gamma: vec![1.0; out_dim],
            beta: vec![0.0; out_dim],
            running_mean: vec![0.0; out_dim],
            running_var: vec![1.0; out_dim],
            rectify,
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + 3 * self.out_dim
    }
}

/// Intermediate values of one train- or eval-mode pass.
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<LayerTrace>,
    train: bool,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    input: Matrix,
    xhat: Matrix,
    pre_activation: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl Trace {
    /// Smallest |pre-activation| over all rectified units (kink distance).
    pub fn min_abs_rectified_input(&self, net: &AptNetwork) -> f64 {
        self.layers
            .iter()
            .zip(&net.layers)
            .filter(|(_, l)| l.rectify)
            .flat_map(|(t, _)| t.pre_activation.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AptNetwork {
    config: NetworkConfig,
    pub layers: Vec<Bottleneck>,
    mode: Mode,
}

impl AptNetwork {
    /// All-zero weights, unit BN scale, zero shift.
    pub fn zeroed(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| Bottleneck::zeroed(i, o, k < last || config.rectify_output))
            .collect();
        Ok(Self { config, layers, mode: Mode::Train })
    }

    /// Fan-in uniform init for every linear map. The output bottleneck's
    /// bias and BN scale start at zero and its BN shift at `output_shift`,
    /// so the network initially emits the constant `output_shift` for every
    /// input while every parameter still receives gradient.
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, output_shift: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let last = net.layers.len() - 1;
        for (k, layer) in net.layers.iter_mut().enumerate() {
            let bound = 1.0 / sqrt(layer.in_dim as f64);
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            if k == last {
                layer.gamma.iter_mut().for_each(|g| *g = 0.0);
                layer.beta.iter_mut().for_each(|b| *b = output_shift);
            } else {
                for b in layer.bias.iter_mut() {
                    *b = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> NetworkConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Bottleneck::param_count).sum()
    }

    /// Appends trainable parameters in layout order: per bottleneck
    /// weight, bias, BN scale, BN shift.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
            out.extend_from_slice(&l.gamma);
            out.extend_from_slice(&l.beta);
        }
    }

    /// Reads parameters in [`Self::write_params`] order; returns the count consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        for l in self.layers.iter_mut() {
            for buf in [&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta] {
                let n = buf.len();
                buf.copy_from_slice(&src[pos..pos + n]);
                pos += n;
            }
        }
        pos
    }

    /// Visits each parameter buffer in layout order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in self.layers.iter_mut() {
            f(&mut l.weight);
            f(&mut l.bias);
            f(&mut l.gamma);
            f(&mut l.beta);
        }
    }

    /// Forward pass using the network's current mode.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_traced(x, self.mode == Mode::Train)?.0)
    }

    /// Forward pass keeping the intermediates needed by [`Self::backward`].
    pub fn forward_traced(&self, x: &Matrix, train: bool) -> Result<(Matrix, Trace)> {
        if x.cols() != self.config.dim {
            return Err(Error::DimensionMismatch { expected: self.config.dim, found: x.cols() });
        }
        let n = x.rows();
        if train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = affine(&h, &layer.weight, &layer.bias, layer.out_dim);
            let (mean, var) = if train {
                column_moments(&z)
            } else {
                (layer.running_mean.clone(), layer.running_var.clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + BN_EPS)).collect();
            let mut xhat = z;
            let mut pre = Matrix::zeros(n, layer.out_dim);
            for r in 0..n {
                let xr = xhat.row_mut(r);
                let pr = pre.row_mut(r);
                for c in 0..layer.out_dim {
                    xr[c] = (xr[c] - mean[c]) * inv_std[c];
                    pr[c] = layer.gamma[c] * xr[c] + layer.beta[c];
                }
            }
            let mut out = pre.clone();
            if layer.rectify {
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            traces.push(LayerTrace {
                input: h,
                xhat,
                pre_activation: pre,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            });
            h = out;
        }
        Ok((h, Trace { layers: traces, train }))
    }

    /// Folds a train-mode trace's batch statistics into the running
    /// statistics (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn commit(&mut self, trace: &Trace) {
        if !trace.train {
            return;
        }
        for (layer, t) in self.layers.iter_mut().zip(&trace.layers) {
            let n = t.input.rows() as f64;
            let unbias = n / (n - 1.0);
            for c in 0..layer.out_dim {
                layer.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * t.batch_mean[c];
                layer.running_var[c] =
                    (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * t.batch_var[c] * unbias;
            }
        }
    }

    /// Accumulates the parameter gradient of `dout` (gradient w.r.t. the
    /// network output) into `grad`, laid out as in [`Self::write_params`].
    /// The gradient w.r.t. the network input is not formed.
    pub fn backward(&self, trace: &Trace, dout: &Matrix, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_count());
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect();
        let mut upstream = dout.clone();
        for (k, (layer, t)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let n = t.input.rows();
            let (o, i) = (layer.out_dim, layer.in_dim);
            let seg = &mut grad[offsets[k]..offsets[k] + layer.param_count()];
            let (gw, rest) = seg.split_at_mut(o * i);
            let (gb, rest) = rest.split_at_mut(o);
            let (gg, gbeta) = rest.split_at_mut(o);

            // through the rectifier: gradient is zero where the input was <= 0
            let mut dy = upstream;
            if layer.rectify {
                for (d, p) in dy.as_mut_slice().iter_mut().zip(t.pre_activation.as_slice()) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }

            let mut sum_dxhat = vec![0.0; o];
            let mut sum_dxhat_xhat = vec![0.0; o];
            for r in 0..n {
                let dyr = dy.row(r);
                let xr = t.xhat.row(r);
                for c in 0..o {
                    gg[c] += dyr[c] * xr[c];
                    gbeta[c] += dyr[c];
                    let dxhat = dyr[c] * layer.gamma[c];
                    sum_dxhat[c] += dxhat;
                    sum_dxhat_xhat[c] += dxhat * xr[c];
                }
            }

            let mut dz = Matrix::zeros(n, o);
            let nf = n as f64;
            for r in 0..n {
                let dyr = dy.row(r);
                let xr = t.xhat.row(r);
                let dzr = dz.row_mut(r);
                for c in 0..o {
                    let dxhat = dyr[c] * layer.gamma[c];
                    dzr[c] = if trace.train {
                        t.inv_std[c] * (dxhat - sum_dxhat[c] / nf - xr[c] * sum_dxhat_xhat[c] / nf)
                    } else {
                        t.inv_std[c] * dxhat
                    };
                }
            }

            for r in 0..n {
                let dzr = dz.row(r);
                let xr = t.input.row(r);
                for c in 0..o {
                    gb[c] += dzr[c];
                    let wrow = &mut gw[c * i..(c + 1) * i];
                    for (g, x) in wrow.iter_mut().zip(xr) {
                        *g += dzr[c] * x;
                    }
                }
            }

            if k == 0 {
                break;
            }
            let mut dx = Matrix::zeros(n, i);
            for r in 0..n {
                let dzr = dz.row(r);
                let dxr = dx.row_mut(r);
                for c in 0..o {
                    let w = &layer.weight[c * i..(c + 1) * i];
                    for (d, wv) in dxr.iter_mut().zip(w) {
                        *d += dzr[c] * wv;
                    }
                }
            }
            upstream = dx;
        }
    }
}

/// Per-column mean and biased variance.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mut mean = vec![0.0; z.cols()];
    for r in z.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; z.cols()];
    for r in z.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}
