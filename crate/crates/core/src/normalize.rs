//! Activation normalizers (BN, GN, LN, IN) and weight reparameterizers
//! (WeightAlign, WeightNorm).
//!
//! The activation normalizers standardize with sample statistics; the
//! reparameterizers only ever look at the weights of one filter at a time,
//! so a network that uses them alone is independent of batch composition.
//!
//! Kernels here work on flat `f64` slices. The autodiff graph calls the
//! `*_forward` / `*_backward` pairs; the free functions without a suffix are
//! convenience wrappers for direct use.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Whether a forward pass is part of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_true() -> bool {
    true
}
fn default_multiplier() -> f64 {
    1.0
}

/// Activation normalizer attached to a layer, applied after the linear map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormalizerConfig {
    #[default]
    None,
    /// Batch norm over `(N, H, W)` per channel.
    Bn {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    /// Group norm over `(C/G, H, W)` per sample and group.
    Gn {
        groups: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Layer norm: group norm with one group.
    Ln {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Instance norm: group norm with one group per channel.
    In {
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl NormalizerConfig {
    pub fn bn() -> Self {
        NormalizerConfig::Bn {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn gn(groups: usize) -> Self {
        NormalizerConfig::Gn {
            groups,
            eps: DEFAULT_EPS,
        }
    }

    pub fn ln() -> Self {
        NormalizerConfig::Ln { eps: DEFAULT_EPS }
    }

    pub fn instance() -> Self {
        NormalizerConfig::In { eps: DEFAULT_EPS }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NormalizerConfig::None)
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormalizerConfig::None => "none",
            NormalizerConfig::Bn { .. } => "bn",
            NormalizerConfig::Gn { .. } => "gn",
            NormalizerConfig::Ln { .. } => "ln",
            NormalizerConfig::In { .. } => "in",
        }
    }

    /// Group count for the GN family given the channel count, `None` for BN / none.
    pub fn groups_for(&self, channels: usize) -> Option<usize> {
        match *self {
            NormalizerConfig::Gn { groups, .. } => Some(groups),
            NormalizerConfig::Ln { .. } => Some(1),
            NormalizerConfig::In { .. } => Some(channels),
            _ => None,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let eps = match *self {
            NormalizerConfig::None => return Ok(()),
            NormalizerConfig::Bn { eps, momentum } => {
                if !(0.0..=1.0).contains(&momentum) {
                    return Err(Error::Config(format!("bn momentum {momentum} outside [0, 1]")));
                }
                eps
            }
            NormalizerConfig::Gn { groups, eps } => {
                if groups == 0 || channels % groups != 0 {
                    return Err(Error::Config(format!(
                        "group norm: {channels} channels not divisible into {groups} groups"
                    )));
                }
                eps
            }
            NormalizerConfig::Ln { eps } | NormalizerConfig::In { eps } => eps,
        };
        if !(eps > 0.0) {
            return Err(Error::Config(format!("normalizer eps must be > 0, got {eps}")));
        }
        Ok(())
    }
}

/// WeightAlign settings. `center` and `scale` switch the two components
/// independently; `scale_multiplier` rescales the `sqrt(n/2)` factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaConfig {
    #[serde(default = "default_true")]
    pub center: bool,
    #[serde(default = "default_true")]
    pub scale: bool,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_multiplier")]
    pub scale_multiplier: f64,
    /// A shift term on aligned weights. Always rejected: it would re-add
    /// `beta * input` to every response.
    #[serde(default)]
    pub beta: bool,
}

impl Default for WaConfig {
    fn default() -> Self {
        WaConfig {
            center: true,
            scale: true,
            eps: DEFAULT_EPS,
            scale_multiplier: 1.0,
            beta: false,
        }
    }
}

impl WaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta {
            return Err(Error::Config(
                "weight_align has no beta term; it acts on weights, not activations".into(),
            ));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("weight_align eps must be > 0, got {}", self.eps)));
        }
        if !(self.scale_multiplier > 0.0) || !self.scale_multiplier.is_finite() {
            return Err(Error::Config(format!(
                "weight_align scale_multiplier must be positive, got {}",
                self.scale_multiplier
            )));
        }
        Ok(())
    }
}

/// Weight reparameterizer attached to a conv or dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReparamConfig {
    #[default]
    None,
    WeightAlign(WaConfig),
    WeightNorm {
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl ReparamConfig {
    pub fn weight_align() -> Self {
        ReparamConfig::WeightAlign(WaConfig::default())
    }

    pub fn weight_norm() -> Self {
        ReparamConfig::WeightNorm { eps: DEFAULT_EPS }
    }

    pub fn is_weight_align(&self) -> bool {
        matches!(self, ReparamConfig::WeightAlign(_))
    }

    pub fn is_none(&self) -> bool {
        matches!(self, ReparamConfig::None)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReparamConfig::None => "none",
            ReparamConfig::WeightAlign(_) => "wa",
            ReparamConfig::WeightNorm { .. } => "wn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ReparamConfig::None => Ok(()),
            ReparamConfig::WeightAlign(cfg) => cfg.validate(),
            ReparamConfig::WeightNorm { eps } => {
                if *eps >= 0.0 && eps.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("weight_norm eps must be >= 0, got {eps}")))
                }
            }
        }
    }
}

/// Per-channel scale and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.gamma.len() != channels || self.beta.len() != channels {
            return Err(shape_err!(
                "affine params sized ({}, {}) for {channels} channels",
                self.gamma.len(),
                self.beta.len()
            ));
        }
        Ok(())
    }
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        NormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    /// Exponential moving average update from one batch.
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Conv `(C_out, C, k, k)` or dense `(units, fan_in)` weights viewed as one
/// flat filter of length `n` per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    weights: Tensor,
}

impl FilterBank {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.shape().len() < 2 || weights.shape().iter().any(|&d| d == 0) {
            return Err(shape_err!(
                "filter bank needs (C_out, ...) weights with n >= 1, got {:?}",
                weights.shape()
            ));
        }
        Ok(FilterBank { weights })
    }

    pub fn num_filters(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Fan-in of one filter: `k*k*c` for conv, `fan_in` for dense.
    pub fn n(&self) -> usize {
        self.weights.len() / self.num_filters()
    }

    pub fn filter(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.weights.data()[i * n..(i + 1) * n]
    }

    pub fn filters(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.data().chunks(self.n())
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Per-filter statistics kept from the WeightAlign forward pass.
#[derive(Debug, Clone)]
pub(crate) struct AlignCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    denom: Vec<f64>,
}

/// WeightAlign over a whole bank: `w_hat = gamma * (w - E[w]) / sqrt(n/2 * (Var[w] + eps))`.
pub(crate) fn weight_align_forward(
    w: &[f64],
    n: usize,
    gamma: &[f64],
    cfg: &WaConfig,
) -> (Vec<f64>, AlignCache) {
    let filters = w.len() / n;
    let half_n = n as f64 / 2.0;
    let mut out = vec![0.0; w.len()];
    let mut cache = AlignCache {
        mean: Vec::with_capacity(filters),
        var: Vec::with_capacity(filters),
        denom: Vec::with_capacity(filters),
    };
    for (f, (src, dst)) in w.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let (mean, var) = mean_var(src);
        let shift = if cfg.center { mean } else { 0.0 };
        let denom = if cfg.scale {
            cfg.scale_multiplier * (half_n * (var + cfg.eps)).sqrt()
        } else {
            1.0
        };
        let k = gamma[f] / denom;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = k * (s - shift);
        }
        cache.mean.push(mean);
        cache.var.push(var);
        cache.denom.push(denom);
    }
    (out, cache)
}

pub(crate) fn weight_align_backward(
    w: &[f64],
    n: usize,
    gamma: &[f64],
    cfg: &WaConfig,
    cache: &AlignCache,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_gamma = vec![0.0; gamma.len()];
    for (f, ((src, g), dst)) in w
        .chunks(n)
        .zip(grad_out.chunks(n))
        .zip(grad_w.chunks_mut(n))
        .enumerate()
    {
        let mean = cache.mean[f];
        let denom = cache.denom[f];
        let shift = if cfg.center { mean } else { 0.0 };
        // s = sum_i g_i * u_i, with u = w - shift
        let s: f64 = src.iter().zip(g).map(|(&wi, &gi)| gi * (wi - shift)).sum();
        grad_gamma[f] = s / denom;
        let g_mean = if cfg.center { g.iter().sum::<f64>() / nf } else { 0.0 };
        let k = gamma[f] / denom;
        let var_term = if cfg.scale {
            s / (nf * (cache.var[f] + cfg.eps))
        } else {
            0.0
        };
        for ((d, &wi), &gi) in dst.iter_mut().zip(src).zip(g) {
            *d = k * (gi - g_mean - var_term * (wi - mean));
        }
    }
    (grad_w, grad_gamma)
}

/// WeightAlign applied to a single filter.
pub fn weight_align(w_filter: &[f64], gamma: f64, cfg: &WaConfig) -> Vec<f64> {
    if w_filter.is_empty() {
        return Vec::new();
    }
    weight_align_forward(w_filter, w_filter.len(), &[gamma], cfg).0
}

pub(crate) fn weight_norm_forward(w: &[f64], n: usize, g: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; w.len()];
    let mut norms = Vec::with_capacity(w.len() / n);
    for (f, (src, dst)) in w.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let r = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = g[f] / (r + eps);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = k * s;
        }
        norms.push(r);
    }
    (out, norms)
}

pub(crate) fn weight_norm_backward(
    w: &[f64],
    n: usize,
    g: &[f64],
    eps: f64,
    norms: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_g = vec![0.0; g.len()];
    for (f, ((src, go), dst)) in w
        .chunks(n)
        .zip(grad_out.chunks(n))
        .zip(grad_w.chunks_mut(n))
        .enumerate()
    {
        let r = norms[f];
        let d = r + eps;
        let s: f64 = src.iter().zip(go).map(|(a, b)| a * b).sum();
        grad_g[f] = s / d;
        let radial = if r > 0.0 { g[f] * s / (d * d * r) } else { 0.0 };
        for ((o, &wi), &gi) in dst.iter_mut().zip(src).zip(go) {
            *o = g[f] / d * gi - radial * wi;
        }
    }
    (grad_w, grad_g)
}

/// WeightNorm of a single filter: `g * w / (||w|| + eps)`.
pub fn weight_norm(w_filter: &[f64], g: f64, eps: f64) -> Vec<f64> {
    if w_filter.is_empty() {
        return Vec::new();
    }
    weight_norm_forward(w_filter, w_filter.len(), &[g], eps).0
}

/// Applies the reparameterizer independently to every filter of the bank.
/// `gammas` holds one scale per filter (ignored for `None`).
pub fn reparameterize_bank(bank: &FilterBank, gammas: &[f64], cfg: &ReparamConfig) -> Result<FilterBank> {
    let n = bank.n();
    let data = bank.weights().data();
    let out = match cfg {
        ReparamConfig::None => return Ok(bank.clone()),
        _ if gammas.len() != bank.num_filters() => {
            return Err(shape_err!(
                "{} scales for {} filters",
                gammas.len(),
                bank.num_filters()
            ))
        }
        ReparamConfig::WeightAlign(wa) => weight_align_forward(data, n, gammas, wa).0,
        ReparamConfig::WeightNorm { eps } => weight_norm_forward(data, n, gammas, *eps).0,
    };
    FilterBank::new(Tensor::new(bank.weights().shape().to_vec(), out)?)
}

/// Treats `(N, F)` as `(N, F, 1, 1)` so dense layers can be normalized too.
pub(crate) fn as_nchw(shape: &[usize]) -> Result<Shape4> {
    match *shape {
        [n, c] => Shape4::new(n, c, 1, 1),
        [n, c, h, w] => Shape4::new(n, c, h, w),
        _ => Err(shape_err!("normalizers need (N, C) or (N, C, H, W), got {shape:?}")),
    }
}

/// Standardized values and inverse deviations, one per normalization group.
#[derive(Debug, Clone)]
pub(crate) struct StandardizeCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch statistics per channel over `(N, H, W)`: `(mean, var)`.
pub(crate) fn channel_stats(x: &[f64], s: Shape4) -> (Vec<f64>, Vec<f64>) {
    let p = s.plane();
    let count = (s.n * p) as f64;
    let mut mean = vec![0.0; s.c];
    for (i, chunk) in x.chunks(p).enumerate() {
        mean[i % s.c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; s.c];
    for (i, chunk) in x.chunks(p).enumerate() {
        let m = mean[i % s.c];
        var[i % s.c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel, given per-channel mean and variance.
pub(crate) fn channel_affine_forward(
    x: &[f64],
    s: Shape4,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, StandardizeCache) {
    let p = s.plane();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (i, ((src, xh), dst)) in x
        .chunks(p)
        .zip(xhat.chunks_mut(p))
        .zip(y.chunks_mut(p))
        .enumerate()
    {
        let c = i % s.c;
        for ((&v, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
            *h = (v - mean[c]) * inv_std[c];
            *o = gamma[c] * *h + beta[c];
        }
    }
    (y, StandardizeCache { xhat, inv_std })
}

/// Backward of batch norm in train mode (statistics depend on `x`).
pub(crate) fn batch_norm_backward(
    grad_y: &[f64],
    s: Shape4,
    gamma: &[f64],
    cache: &StandardizeCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = s.plane();
    let m = (s.n * p) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for (i, (gy, xh)) in grad_y.chunks(p).zip(cache.xhat.chunks(p)).enumerate() {
        let c = i % s.c;
        for (&g, &h) in gy.iter().zip(xh) {
            dbeta[c] += g;
            dgamma[c] += g * h;
        }
    }
    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
    let mut dx = vec![0.0; grad_y.len()];
    for (i, ((gy, xh), dst)) in grad_y
        .chunks(p)
        .zip(cache.xhat.chunks(p))
        .zip(dx.chunks_mut(p))
        .enumerate()
    {
        let c = i % s.c;
        let k = gamma[c] * cache.inv_std[c] / m;
        for ((&g, &h), d) in gy.iter().zip(xh).zip(dst.iter_mut()) {
            *d = k * (m * g - dbeta[c] - h * dgamma[c]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward of the fixed-statistics channel affine used by batch norm in eval mode.
pub(crate) fn channel_affine_backward(
    grad_y: &[f64],
    s: Shape4,
    gamma: &[f64],
    cache: &StandardizeCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = s.plane();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    let mut dx = vec![0.0; grad_y.len()];
    for (i, ((gy, xh), dst)) in grad_y
        .chunks(p)
        .zip(cache.xhat.chunks(p))
        .zip(dx.chunks_mut(p))
        .enumerate()
    {
        let c = i % s.c;
        let k = gamma[c] * cache.inv_std[c];
        for ((&g, &h), d) in gy.iter().zip(xh).zip(dst.iter_mut()) {
            dbeta[c] += g;
            dgamma[c] += g * h;
            *d = k * g;
        }
    }
    (dx, dgamma, dbeta)
}

/// Group norm forward. Each `(sample, group)` block is contiguous in NCHW layout.
pub(crate) fn group_norm_forward(
    x: &[f64],
    s: Shape4,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, StandardizeCache) {
    let p = s.plane();
    let block = s.c / groups * p;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(s.n * groups);
    for (bi, ((src, xh), dst)) in x
        .chunks(block)
        .zip(xhat.chunks_mut(block))
        .zip(y.chunks_mut(block))
        .enumerate()
    {
        let (mean, var) = mean_var(src);
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        let c0 = (bi % groups) * (s.c / groups);
        for (j, ((&v, h), o)) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()).enumerate() {
            let c = c0 + j / p;
            *h = (v - mean) * inv;
            *o = gamma[c] * *h + beta[c];
        }
    }
    (y, StandardizeCache { xhat, inv_std })
}

pub(crate) fn group_norm_backward(
    grad_y: &[f64],
    s: Shape4,
    groups: usize,
    gamma: &[f64],
    cache: &StandardizeCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = s.plane();
    let cpg = s.c / groups;
    let block = cpg * p;
    let m = block as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    let mut dx = vec![0.0; grad_y.len()];
    for (bi, ((gy, xh), dst)) in grad_y
        .chunks(block)
        .zip(cache.xhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .enumerate()
    {
        let c0 = (bi % groups) * cpg;
        let mut sum_d = 0.0;
        let mut sum_dh = 0.0;
        for (j, (&g, &h)) in gy.iter().zip(xh).enumerate() {
            let c = c0 + j / p;
            dbeta[c] += g;
            dgamma[c] += g * h;
            let d = g * gamma[c];
            sum_d += d;
            sum_dh += d * h;
        }
        let inv = cache.inv_std[bi];
        for (j, ((&g, &h), o)) in gy.iter().zip(xh).zip(dst.iter_mut()).enumerate() {
            let d = g * gamma[c0 + j / p];
            *o = inv / m * (m * d - sum_d - h * sum_dh);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch norm on `(N, C, H, W)` or `(N, C)`. Train mode standardizes with the
/// batch statistics and updates `state`; eval mode uses the running statistics.
pub fn batch_norm(x: &Tensor, params: &AffineParams, state: &mut NormState, mode: Mode) -> Result<Tensor> {
    let s = as_nchw(x.shape())?;
    params.check(s.c)?;
    if state.running_mean.len() != s.c {
        return Err(shape_err!("norm state has {} channels, input {}", state.running_mean.len(), s.c));
    }
    let y = match mode {
        Mode::Train => {
            let (mean, var) = channel_stats(x.data(), s);
            state.update(&mean, &var);
            channel_affine_forward(x.data(), s, &mean, &var, &params.gamma, &params.beta, state.eps).0
        }
        Mode::Eval => {
            channel_affine_forward(
                x.data(),
                s,
                &state.running_mean,
                &state.running_var,
                &params.gamma,
                &params.beta,
                state.eps,
            )
            .0
        }
    };
    Tensor::new(x.shape().to_vec(), y)
}

/// Group norm: per sample, standardize each block of `C / groups` channels.
pub fn group_norm(x: &Tensor, params: &AffineParams, groups: usize, eps: f64) -> Result<Tensor> {
    let s = as_nchw(x.shape())?;
    params.check(s.c)?;
    if groups == 0 || s.c % groups != 0 {
        return Err(shape_err!("{} channels not divisible into {groups} groups", s.c));
    }
    let (y, _) = group_norm_forward(x.data(), s, groups, &params.gamma, &params.beta, eps);
    Tensor::new(x.shape().to_vec(), y)
}

pub fn layer_norm(x: &Tensor, params: &AffineParams, eps: f64) -> Result<Tensor> {
    group_norm(x, params, 1, eps)
}

pub fn instance_norm(x: &Tensor, params: &AffineParams, eps: f64) -> Result<Tensor> {
    let c = as_nchw(x.shape())?.c;
    group_norm(x, params, c, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> WaConfig {
        WaConfig {
            eps: 1e-15,
            ..WaConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn weight_align_hand_example() {
        let w = weight_align(&[1.0, 2.0, 3.0, 4.0], 1.0, &tiny());
        // mean 2.5, var 1.25, denominator sqrt(2 * 1.25) = sqrt(2.5)
        let d = 2.5f64.sqrt();
        let expect = [-1.5 / d, -0.5 / d, 0.5 / d, 1.5 / d];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w[0] + 0.94868).abs() < 1e-5);
        assert!((w[1] + 0.31623).abs() < 1e-5);
        let (m, v) = mean_var(&w);
        assert!(m.abs() < 1e-15);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_align_constant_filter_is_zero() {
        let w = weight_align(&[0.7; 9], 1.3, &WaConfig::default());
        // only the rounding residue of the mean survives
        assert!(w.iter().all(|&v| v.abs() < 1e-12), "{w:?}");
    }

    #[test]
    fn weight_align_components_switch_independently() {
        let w = [1.0, 2.0, 3.0, 4.0];
        let off = WaConfig {
            center: false,
            scale: false,
            ..tiny()
        };
        assert_eq!(weight_align(&w, 2.0, &off), vec![2.0, 4.0, 6.0, 8.0]);
        let center_only = WaConfig { scale: false, ..tiny() };
        assert_eq!(weight_align(&w, 1.0, &center_only), vec![-1.5, -0.5, 0.5, 1.5]);
        let scale_only = WaConfig { center: false, ..tiny() };
        let d = 2.5f64.sqrt();
        let got = weight_align(&w, 1.0, &scale_only);
        for (a, b) in got.iter().zip(w) {
            assert!((a - b / d).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_align_multiplier_divides_output() {
        let w = [0.3, -1.0, 2.0, 0.5, 0.1];
        let base = weight_align(&w, 1.0, &WaConfig::default());
        let cfg = WaConfig {
            scale_multiplier: 4.0,
            ..WaConfig::default()
        };
        for (a, b) in weight_align(&w, 1.0, &cfg).iter().zip(&base) {
            assert!((a * 4.0 - b).abs() < 1e-14);
        }
    }

    #[test]
    fn wa_config_rejects_beta_and_bad_eps() {
        let with_beta = WaConfig {
            beta: true,
            ..WaConfig::default()
        };
        assert!(with_beta.validate().is_err());
        let zero_eps = WaConfig {
            eps: 0.0,
            ..WaConfig::default()
        };
        assert!(zero_eps.validate().is_err());
    }

    #[test]
    fn weight_norm_examples() {
        let w = weight_norm(&[3.0, 4.0], 1.0, 0.0);
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        let unit = [0.6, 0.8];
        let same = weight_norm(&unit, 1.0, 1e-12);
        for (a, b) in same.iter().zip(unit) {
            assert!((a - b).abs() < 1e-11);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = weight_norm(&w, 2.5, 0.0);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.5).abs() < 1e-6);
    }

    #[test]
    fn reparameterize_identical_filters_stay_identical() {
        let filt: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let data: Vec<f64> = filt.iter().cycle().take(36).copied().collect();
        let bank = FilterBank::new(Tensor::new(vec![3, 3, 2, 2], data).unwrap()).unwrap();
        let out = reparameterize_bank(&bank, &[1.0; 3], &ReparamConfig::weight_align()).unwrap();
        assert_eq!(out.filter(0), out.filter(1));
        assert_eq!(out.filter(1), out.filter(2));
    }

    #[test]
    fn reparameterized_bank_meets_moment_targets() {
        let bank = FilterBank::new(random(&[8, 4, 3, 3], 9)).unwrap();
        let gammas: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.25).collect();
        let out = reparameterize_bank(&bank, &gammas, &ReparamConfig::weight_align()).unwrap();
        let n = out.n() as f64;
        for (f, g) in out.filters().zip(&gammas) {
            let (m, v) = mean_var(f);
            assert!(m.abs() < 1e-9);
            assert!((n / 2.0 * v - g * g).abs() < 1e-4 * g * g);
        }
        assert!(reparameterize_bank(&bank, &[1.0; 3], &ReparamConfig::weight_align()).is_err());
    }

    #[test]
    fn batch_norm_hand_example() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut state = NormState::new(1, 0.1, 1e-15);
        let y = batch_norm(&x, &AffineParams::identity(1), &mut state, Mode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        assert!((state.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((state.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_constant_channel_outputs_beta() {
        let x = Tensor::full(&[3, 2, 2, 2], 4.0);
        let params = AffineParams {
            gamma: vec![2.0, 3.0],
            beta: vec![0.5, -1.0],
        };
        let mut state = NormState::new(2, 0.1, 1e-5);
        let y = batch_norm(&x, &params, &mut state, Mode::Train).unwrap();
        for (i, chunk) in y.data().chunks(4).enumerate() {
            assert!(chunk.iter().all(|&v| v == params.beta[i % 2]));
        }
        // a single 1x1 sample is degenerate but well-defined
        let one = Tensor::new(vec![1, 2, 1, 1], vec![5.0, -3.0]).unwrap();
        let y = batch_norm(&one, &params, &mut state, Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0]);
    }

    #[test]
    fn batch_norm_output_moments() {
        let x = random(&[16, 3, 4, 4], 21).map(|v| 3.0 * v + 1.0);
        let params = AffineParams {
            gamma: vec![0.5, 1.0, 2.0],
            beta: vec![-1.0, 0.0, 0.75],
        };
        let mut state = NormState::new(3, 0.1, 1e-5);
        let y = batch_norm(&x, &params, &mut state, Mode::Train).unwrap();
        let (mean, var) = channel_stats(y.data(), y.dims4().unwrap());
        for c in 0..3 {
            assert!((mean[c] - params.beta[c]).abs() < 1e-4);
            assert!((var[c] - params.gamma[c].powi(2)).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut state = NormState {
            running_mean: vec![1.0],
            running_var: vec![4.0],
            momentum: 0.1,
            eps: 1e-15,
        };
        let y = batch_norm(&x, &AffineParams::identity(1), &mut state, Mode::Eval).unwrap();
        assert!((y.data()[0]).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(state.running_mean, vec![1.0]);
    }

    #[test]
    fn group_norm_special_cases() {
        let x = random(&[2, 4, 3, 3], 5);
        let p = AffineParams {
            gamma: vec![1.0, 2.0, 0.5, 1.5],
            beta: vec![0.0, 0.1, 0.2, 0.3],
        };
        assert_eq!(group_norm(&x, &p, 1, 1e-5).unwrap(), layer_norm(&x, &p, 1e-5).unwrap());
        assert_eq!(group_norm(&x, &p, 4, 1e-5).unwrap(), instance_norm(&x, &p, 1e-5).unwrap());
        assert!(group_norm(&x, &p, 3, 1e-5).is_err());
    }

    #[test]
    fn group_norm_matches_flat_loop() {
        let data: Vec<f64> = vec![
            1.0, 2.0, 3.0, 4.0, // c0
            -1.0, 0.0, 5.0, 2.0, // c1
            0.5, 0.5, 1.5, 2.5, // c2
            9.0, -3.0, 1.0, 0.0, // c3
        ];
        let x = Tensor::new(vec![1, 4, 2, 2], data.clone()).unwrap();
        let p = AffineParams::identity(4);
        let eps = 1e-5;
        let y = group_norm(&x, &p, 2, eps).unwrap();
        for g in 0..2 {
            let block = &data[g * 8..(g + 1) * 8];
            let mean = block.iter().sum::<f64>() / 8.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for i in 0..8 {
                let expect = (block[i] - mean) / (var + eps).sqrt();
                assert!((y.data()[g * 8 + i] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalizer_config_json() {
        let c: NormalizerConfig = serde_json::from_str(r#"{"kind":"gn","groups":4}"#).unwrap();
        assert_eq!(c, NormalizerConfig::gn(4));
        assert!(c.validate(8).is_ok());
        assert!(c.validate(6).is_err());
        let r: ReparamConfig = serde_json::from_str(r#"{"kind":"weight_align","center":false}"#).unwrap();
        match r {
            ReparamConfig::WeightAlign(wa) => assert!(!wa.center && wa.scale),
            other => panic!("unexpected {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::collection::vec;
        use proptest::prelude::*;

        fn non_degenerate(w: &[f64]) -> bool {
            mean_var(w).1 > 1e-3
        }

        proptest! {
            #[test]
            fn aligned_filter_moments(w in vec(-5.0f64..5.0, 2..200), gamma in 0.1f64..4.0) {
                prop_assume!(non_degenerate(&w));
                let out = weight_align(&w, gamma, &WaConfig::default());
                let unit: Vec<f64> = out.iter().map(|v| v / gamma).collect();
                let (m, v) = mean_var(&unit);
                let n = w.len() as f64;
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((n / 2.0 * v - 1.0).abs() < 1e-3);
            }

            #[test]
            fn affine_input_invariance(w in vec(-5.0f64..5.0, 2..64), a in -10.0f64..10.0, b in -10.0f64..10.0) {
                prop_assume!(non_degenerate(&w) && a.abs() > 0.05);
                let cfg = WaConfig { eps: 1e-14, ..WaConfig::default() };
                let moved: Vec<f64> = w.iter().map(|v| a * v + b).collect();
                let lhs = weight_align(&moved, 1.0, &cfg);
                let rhs = weight_align(&w, 1.0, &cfg);
                for (l, r) in lhs.iter().zip(&rhs) {
                    prop_assert!((l - a.signum() * r).abs() < 1e-6);
                }
            }

            #[test]
            fn odd_function(w in vec(-5.0f64..5.0, 1..64)) {
                let neg: Vec<f64> = w.iter().map(|v| -v).collect();
                let lhs = weight_align(&neg, 1.0, &WaConfig::default());
                let rhs = weight_align(&w, 1.0, &WaConfig::default());
                for (l, r) in lhs.iter().zip(&rhs) {
                    prop_assert!((l + r).abs() < 1e-12);
                }
            }

            #[test]
            fn group_family_is_shift_scale_invariant(seed in 0u64..500, shift in -5.0f64..5.0, scale in 0.5f64..5.0, which in 0usize..3) {
                let x = random(&[2, 4, 3, 3], seed).scale(10.0);
                let p = AffineParams::identity(4);
                let groups = [1, 2, 4][which];
                let base = group_norm(&x, &p, groups, 1e-5).unwrap();
                // shift and scale each sample independently
                let mut moved = x.clone();
                for (i, v) in moved.data_mut().iter_mut().enumerate() {
                    let k = if i < 36 { 1.0 } else { 2.0 };
                    *v = scale * k * *v + shift * k;
                }
                let out = group_norm(&moved, &p, groups, 1e-5).unwrap();
                prop_assert!(out.max_abs_diff(&base).unwrap() < 1e-5);
            }
        }
    }
}
