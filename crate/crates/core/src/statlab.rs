//! Monte-Carlo checks of the moment identities behind WeightAlign, plus
//! activation and weight distribution reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::synthetic_gaussian;
use crate::error::{Error, Result};
use crate::init::stream_rng;
use crate::layers::{Network, NetworkSpec};
use crate::normalize::{Mode, NormalizerConfig, ReparamConfig};
use crate::tensor::Tensor;

/// Default gate: `|estimate - target| <= Z * stderr + ATOL`.
pub const Z: f64 = 3.0;
pub const ATOL: f64 = 1e-3;
/// Below this many samples a result is flagged as underpowered.
pub const MIN_SAMPLES: usize = 10_000;
pub const HIST_BINS: usize = 64;

/// Scalar sampling distributions for the verifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Dist {
    Normal { mean: f64, var: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
    Constant { value: f64 },
}

impl Dist {
    pub fn normal(mean: f64, var: f64) -> Self {
        Dist::Normal { mean, var }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Dist::Normal { mean, var } => mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal),
            Dist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Dist::Exponential { rate } => rng.sample::<f64, _>(Exp1) / rate,
            Dist::Constant { value } => value,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Normal { mean, .. } => mean,
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::Exponential { rate } => 1.0 / rate,
            Dist::Constant { value } => value,
        }
    }

    pub fn var(&self) -> f64 {
        match *self {
            Dist::Normal { var, .. } => var,
            Dist::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Dist::Exponential { rate } => 1.0 / (rate * rate),
            Dist::Constant { .. } => 0.0,
        }
    }

    pub fn second_moment(&self) -> f64 {
        self.var() + self.mean().powi(2)
    }

    pub fn is_symmetric_about_zero(&self) -> bool {
        match *self {
            Dist::Normal { mean, .. } => mean == 0.0,
            Dist::Uniform { lo, hi } => lo == -hi,
            Dist::Exponential { .. } => false,
            Dist::Constant { value } => value == 0.0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Dist::Normal { mean, var } => format!("Normal({mean}, {var})"),
            Dist::Uniform { lo, hi } => format!("Uniform({lo}, {hi})"),
            Dist::Exponential { rate } => format!("Exponential({rate})"),
            Dist::Constant { value } => format!("Constant({value})"),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal { mean, var } => mean.is_finite() && var >= 0.0 && var.is_finite(),
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Dist::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            Dist::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution {}", self.label())))
        }
    }
}

/// Secondary statistics of the symmetry check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryStats {
    pub skewness: f64,
    /// Two-sample KS statistic between `{z}` and `{-z}`.
    pub ks: f64,
    /// KS critical value at the 0.001 level.
    pub ks_critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
    pub samples: usize,
    pub stderr: f64,
    pub z: f64,
    pub atol: f64,
    pub pass: bool,
    /// Negative controls are expected to fail and never gate a suite.
    pub control: bool,
    pub underpowered: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry: Option<SymmetryStats>,
}

impl McResult {
    fn new(name: String, estimate: f64, target: f64, samples: usize, stderr: f64, seed: u64) -> Self {
        let pass = (estimate - target).abs() <= Z * stderr + ATOL;
        McResult {
            name,
            estimate,
            target,
            samples,
            stderr,
            z: Z,
            atol: ATOL,
            pass,
            control: false,
            underpowered: samples < MIN_SAMPLES,
            seed,
            symmetry: None,
        }
    }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {samples}")));
    }
    Ok(())
}

/// Sample mean and its standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

/// Central moments `m2, m3, m4, m6`.
fn central_moments(xs: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4, mut m6) = (0.0, 0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
        m6 += d2 * d2 * d2;
    }
    (mean, m2 / n, m3 / n, m4 / n, m6 / n)
}

fn dot_samples(w: &Dist, y: &Dist, n: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..samples)
        .map(|_| (0..n).map(|_| w.sample(rng) * y.sample(rng)).sum())
        .collect()
}

/// `E[sum_i w_i Y_i]` against `n E[w] E[Y]`.
pub fn verify_mean_identity(w: &Dist, y: &Dist, n: usize, samples: usize, seed: u64) -> Result<McResult> {
    check_samples(samples)?;
    w.validate()?;
    y.validate()?;
    let xs = dot_samples(w, y, n, samples, &mut stream_rng(seed, 0));
    let (est, se) = mean_se(&xs);
    Ok(McResult::new(
        format!("mean: w~{}, Y~{}, n={n}", w.label(), y.label()),
        est,
        n as f64 * w.mean() * y.mean(),
        samples,
        se,
        seed,
    ))
}

/// `Var[sum_i w_i Y_i]` against `n Var[w] E[Y^2]`; `w` must have zero mean.
pub fn verify_variance_identity(w: &Dist, y: &Dist, n: usize, samples: usize, seed: u64) -> Result<McResult> {
    check_samples(samples)?;
    w.validate()?;
    y.validate()?;
    if w.mean() != 0.0 {
        return Err(Error::Precondition(format!(
            "variance identity needs zero-mean weights, got {}",
            w.label()
        )));
    }
    let xs = dot_samples(w, y, n, samples, &mut stream_rng(seed, 1));
    let (_, m2, _, m4, _) = central_moments(&xs);
    let se = ((m4 - m2 * m2).max(0.0) / samples as f64).sqrt();
    Ok(McResult::new(
        format!("variance: w~{}, Y~{}, n={n}", w.label(), y.label()),
        m2,
        n as f64 * w.var() * y.second_moment(),
        samples,
        se,
        seed,
    ))
}

/// `E[relu(Z)^2]` against `Var[Z] / 2` for symmetric zero-mean `Z`.
pub fn verify_relu_halving(z: &Dist, samples: usize, seed: u64) -> Result<McResult> {
    check_samples(samples)?;
    z.validate()?;
    if !z.is_symmetric_about_zero() {
        return Err(Error::Precondition(format!("{} is not symmetric about 0", z.label())));
    }
    let mut rng = stream_rng(seed, 2);
    let ys: Vec<f64> = (0..samples).map(|_| z.sample(&mut rng).max(0.0).powi(2)).collect();
    let (est, se) = mean_se(&ys);
    Ok(McResult::new(
        format!("relu halving: Z~{}", z.label()),
        est,
        0.5 * z.var(),
        samples,
        se,
        seed,
    ))
}

/// Two-sample KS statistic between `xs` and their negation.
fn ks_against_reflection(xs: &[f64]) -> f64 {
    let mut a = xs.to_vec();
    a.sort_by(f64::total_cmp);
    let b: Vec<f64> = a.iter().rev().map(|v| -v).collect();
    let n = a.len() as f64;
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 - j as f64).abs() / n);
    }
    d
}

/// Skewness of `Z = X * Y` against 0. Passes when the skewness is within
/// `Z * stderr + ATOL`; the reflection KS statistic is reported alongside.
pub fn verify_product_symmetry(x: &Dist, y: &Dist, samples: usize, seed: u64) -> Result<McResult> {
    check_samples(samples)?;
    x.validate()?;
    y.validate()?;
    let mut rng = stream_rng(seed, 3);
    let zs: Vec<f64> = (0..samples).map(|_| x.sample(&mut rng) * y.sample(&mut rng)).collect();
    let (_, m2, m3, m4, m6) = central_moments(&zs);
    let n = samples as f64;
    let (skew, se) = if m2 > 0.0 {
        // delta-method standard error of the sample skewness
        let v = (m6 - 6.0 * m4 * m2 + 9.0 * m2.powi(3)) / (n * m2.powi(3));
        (m3 / m2.powf(1.5), v.max(0.0).sqrt())
    } else {
        (0.0, 0.0)
    };
    let ks = ks_against_reflection(&zs);
    let mut r = McResult::new(
        format!("product symmetry: X~{}, Y~{}", x.label(), y.label()),
        skew,
        0.0,
        samples,
        se,
        seed,
    );
    r.control = !y.is_symmetric_about_zero() && !x.is_symmetric_about_zero();
    r.symmetry = Some(SymmetryStats {
        skewness: skew,
        ks,
        ks_critical: 1.949 * (2.0 / n).sqrt(),
    });
    Ok(r)
}

/// Every identity check with its example distributions.
pub fn verify_suite(samples: usize, seed: u64, include_controls: bool) -> Result<Vec<McResult>> {
    let n01 = Dist::normal(0.0, 1.0);
    let mut out = vec![
        verify_mean_identity(&n01, &Dist::normal(2.0, 1.0), 10, samples, seed)?,
        verify_mean_identity(&Dist::normal(0.5, 1.0), &Dist::normal(2.0, 1.0), 100, samples, seed)?,
        verify_mean_identity(&Dist::Constant { value: 1.0 }, &Dist::normal(3.0, 1.0), 1, samples, seed)?,
        verify_variance_identity(&n01, &Dist::Constant { value: 1.0 }, 10, samples, seed)?,
        verify_variance_identity(&Dist::normal(0.0, 2.0 / 50.0), &n01, 50, samples, seed)?,
        verify_variance_identity(&n01, &Dist::Constant { value: 0.0 }, 5, samples, seed)?,
        verify_relu_halving(&Dist::normal(0.0, 4.0), samples, seed)?,
        verify_relu_halving(&Dist::Uniform { lo: -1.0, hi: 1.0 }, samples, seed)?,
        verify_relu_halving(&Dist::Constant { value: 0.0 }, samples, seed)?,
        verify_product_symmetry(&Dist::Uniform { lo: 0.0, hi: 1.0 }, &n01, samples, seed)?,
        verify_product_symmetry(&Dist::Exponential { rate: 1.0 }, &n01, samples, seed)?,
    ];
    if include_controls {
        let exp = Dist::Exponential { rate: 1.0 };
        out.push(verify_product_symmetry(&exp, &exp, samples, seed)?);
    }
    Ok(out)
}

/// Fixed-width histogram; values past either end are counted in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// `HIST_BINS` bins over `mean +- 4 std`, or a unit window when `std == 0`.
    pub fn around(values: &[f64], mean: f64, std: f64) -> Self {
        let half = if std > 0.0 { 4.0 * std } else { 0.5 };
        let lo = mean - half;
        let width = 2.0 * half / HIST_BINS as f64;
        let edges: Vec<f64> = (0..=HIST_BINS).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; HIST_BINS];
        for &v in values {
            let k = ((v - lo) / width).floor();
            let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(HIST_BINS - 1) };
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Statistics of one channel (or a whole layer when `channel` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer: usize,
    pub channel: Option<usize>,
    pub mean: f64,
    pub var: f64,
    pub samples: u64,
    pub histogram: Histogram,
}

impl ChannelStats {
    fn of(layer: usize, channel: Option<usize>, values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        ChannelStats {
            layer,
            channel,
            mean,
            var,
            samples: values.len() as u64,
            histogram: Histogram::around(values, mean, var.sqrt()),
        }
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    #[serde(default)]
    pub epoch: Option<usize>,
    pub entries: Vec<ChannelStats>,
    /// Share of the batch whose classifier argmax is the modal class.
    #[serde(default)]
    pub argmax_constancy: Option<f64>,
    /// Free-form configuration echo.
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub const CSV_HEADER: [&str; 8] = ["layer", "channel", "epoch", "mean", "var", "bin_lo", "bin_hi", "count"];

impl StatsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per histogram bin.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let epoch = self.epoch.map(|e| e.to_string()).unwrap_or_default();
        for e in &self.entries {
            let channel = e.channel.map(|c| c.to_string()).unwrap_or_default();
            for (k, count) in e.histogram.counts.iter().enumerate() {
                w.write_record([
                    e.layer.to_string(),
                    channel.clone(),
                    epoch.clone(),
                    e.mean.to_string(),
                    e.var.to_string(),
                    e.histogram.edges[k].to_string(),
                    e.histogram.edges[k + 1].to_string(),
                    count.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }

    pub fn save(&self, json: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?).map_err(|e| Error::io(json, e))?;
        let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Values of `channel` in an `(N, C, H, W)` or `(N, C)` tensor.
fn channel_values(t: &Tensor, channel: usize) -> Vec<f64> {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        out.extend_from_slice(&t.data()[(i * c + channel) * plane..][..plane]);
    }
    out
}

/// Fraction of rows whose argmax is the most frequent argmax.
pub fn argmax_constancy(logits: &Tensor) -> Result<f64> {
    let (n, k) = logits.dims2()?;
    if n == 0 {
        return Err(Error::EmptySplit("no logits".into()));
    }
    let mut freq = vec![0usize; k];
    for row in logits.data().chunks(k) {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        freq[best] += 1;
    }
    Ok(*freq.iter().max().unwrap() as f64 / n as f64)
}

/// Per-channel statistics of the selected layer outputs for one batch.
/// `selectors` pairs a layer index with the channels to report.
pub fn collect_channel_stats(net: &mut Network, input: &Tensor, selectors: &[(usize, Vec<usize>)], mode: Mode) -> Result<StatsReport> {
    for (layer, channels) in selectors {
        let shape = net
            .output_shape(*layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range (network has {})", net.num_layers())))?;
        if let Some(&c) = channels.iter().find(|&&c| c >= shape[0]) {
            return Err(Error::Config(format!("channel {c} out of range for layer {layer} with {} channels", shape[0])));
        }
    }
    let mut g = Graph::new();
    let bound = net.bind_frozen(&mut g);
    let x = g.constant(input.clone());
    let (logits, taps) = net.forward_traced(&mut g, &bound, x, mode)?;
    let mut entries = Vec::new();
    for (layer, channels) in selectors {
        let t = g.value(taps[*layer]);
        for &c in channels {
            entries.push(ChannelStats::of(*layer, Some(c), &channel_values(t, c)));
        }
    }
    Ok(StatsReport {
        epoch: None,
        entries,
        argmax_constancy: Some(argmax_constancy(g.value(logits))?),
        meta: BTreeMap::new(),
    })
}

/// Histogram of the effective weights of one layer, or of one filter.
pub fn snapshot_weight_distribution(net: &Network, layer: usize, filter: Option<usize>, epoch: Option<usize>) -> Result<StatsReport> {
    let w = net.effective_weights(layer)?;
    let rows = w.shape()[0];
    let len = w.len() / rows;
    let values = match filter {
        Some(f) if f >= rows => {
            return Err(Error::Config(format!("filter {f} out of range for layer {layer} with {rows} filters")))
        }
        Some(f) => &w.data()[f * len..][..len],
        None => w.data(),
    };
    Ok(StatsReport {
        epoch,
        entries: vec![ChannelStats::of(layer, filter, values)],
        argmax_constancy: None,
        meta: BTreeMap::new(),
    })
}

/// Normalization variants compared on the drift probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "bn")]
    Bn,
    #[serde(rename = "gn")]
    Gn,
    #[serde(rename = "ln")]
    Ln,
    #[serde(rename = "in")]
    In,
    #[serde(rename = "wa")]
    Wa,
    #[serde(rename = "wa+bn")]
    WaBn,
    #[serde(rename = "wa+gn")]
    WaGn,
    #[serde(rename = "wa+ln")]
    WaLn,
    #[serde(rename = "wa+in")]
    WaIn,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Baseline,
        Variant::Bn,
        Variant::Gn,
        Variant::Wa,
        Variant::WaGn,
        Variant::Ln,
        Variant::In,
        Variant::WaBn,
        Variant::WaLn,
        Variant::WaIn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Bn => "bn",
            Variant::Gn => "gn",
            Variant::Ln => "ln",
            Variant::In => "in",
            Variant::Wa => "wa",
            Variant::WaBn => "wa+bn",
            Variant::WaGn => "wa+gn",
            Variant::WaLn => "wa+ln",
            Variant::WaIn => "wa+in",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (known: {})", known.join(", ")))
            })
    }

    /// Normalizer and reparameterizer for hidden layers.
    pub fn layers(self, gn_groups: usize) -> (NormalizerConfig, ReparamConfig) {
        let wa = ReparamConfig::weight_align();
        let none = ReparamConfig::None;
        match self {
            Variant::Baseline => (NormalizerConfig::None, none),
            Variant::Bn => (NormalizerConfig::bn(), none),
            Variant::Gn => (NormalizerConfig::gn(gn_groups), none),
            Variant::Ln => (NormalizerConfig::ln(), none),
            Variant::In => (NormalizerConfig::instance(), none),
            Variant::Wa => (NormalizerConfig::None, wa),
            Variant::WaBn => (NormalizerConfig::bn(), wa),
            Variant::WaGn => (NormalizerConfig::gn(gn_groups), wa),
            Variant::WaLn => (NormalizerConfig::ln(), wa),
            Variant::WaIn => (NormalizerConfig::instance(), wa),
        }
    }
}

/// Geometry and thresholds of the untrained-network drift experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub input_shape: [usize; 3],
    pub batch: usize,
    pub depth: usize,
    pub width: usize,
    pub classes: usize,
    pub gn_groups: usize,
    /// 1-based index among the conv layers.
    pub probe_conv: usize,
    /// The first this many channels of the probed conv are reported.
    pub channels: usize,
    pub max_mean_ratio: f64,
    pub max_std_ratio: f64,
    pub min_constancy: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            input_shape: [16, 8, 8],
            batch: 128,
            depth: 7,
            width: 16,
            classes: 10,
            gn_groups: 4,
            probe_conv: 3,
            channels: 8,
            max_mean_ratio: 0.2,
            max_std_ratio: 4.0,
            min_constancy: 0.9,
        }
    }
}

impl DriftConfig {
    pub fn spec(&self, variant: Variant, seed: u64) -> NetworkSpec {
        let (n, r) = variant.layers(self.gn_groups);
        NetworkSpec::drift_probe(self.input_shape, self.depth, self.width, self.classes, seed).with_global(n, r)
    }

    pub fn input(&self, seed: u64) -> Tensor {
        let [c, h, w] = self.input_shape;
        synthetic_gaussian(&[self.batch, c, h, w], seed ^ 0x5eed_da7a)
    }
}

/// Outcome of one seed of the drift experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTrial {
    pub seed: u64,
    /// Largest `|mean| / std` over the probed channels.
    pub max_mean_ratio: f64,
    /// Largest over smallest channel std.
    pub std_ratio: f64,
    pub aligned: bool,
    pub argmax_constancy: f64,
    pub constant_output: bool,
}

/// Runs the untrained probe network once and summarizes it.
pub fn drift_trial(cfg: &DriftConfig, variant: Variant, seed: u64) -> Result<(DriftTrial, StatsReport)> {
    let mut net = Network::build(cfg.spec(variant, seed))?;
    let probe = *net
        .conv_layers()
        .get(cfg.probe_conv.wrapping_sub(1))
        .ok_or_else(|| Error::Config(format!("network has no conv layer {}", cfg.probe_conv)))?;
    let channels: Vec<usize> = (0..cfg.channels.min(cfg.width)).collect();
    let head = net.classifier_index();
    let selectors = vec![(probe, channels), (head, (0..cfg.classes.min(8)).collect())];
    let mut report = collect_channel_stats(&mut net, &cfg.input(seed), &selectors, Mode::Train)?;
    report.meta.insert("variant".into(), variant.name().into());
    report.meta.insert("seed".into(), seed.into());
    report.meta.insert("drift".into(), serde_json::to_value(cfg)?);
    let probed: Vec<&ChannelStats> = report.entries.iter().filter(|e| e.layer == probe).collect();
    let max_mean_ratio = probed
        .iter()
        .map(|e| if e.std() > 0.0 { e.mean.abs() / e.std() } else if e.mean == 0.0 { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let (lo, hi) = probed
        .iter()
        .map(|e| e.std())
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let std_ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let constancy = report.argmax_constancy.unwrap_or(0.0);
    Ok((
        DriftTrial {
            seed,
            max_mean_ratio,
            std_ratio,
            aligned: max_mean_ratio <= cfg.max_mean_ratio && std_ratio <= cfg.max_std_ratio,
            argmax_constancy: constancy,
            constant_output: constancy >= cfg.min_constancy,
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub variant: Variant,
    pub trials: Vec<DriftTrial>,
    pub aligned_fraction: f64,
    pub constant_fraction: f64,
}

pub fn drift_experiment(cfg: &DriftConfig, variant: Variant, seeds: &[u64]) -> Result<DriftSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("drift experiment needs at least one seed".into()));
    }
    let trials = seeds
        .iter()
        .map(|&s| drift_trial(cfg, variant, s).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    let frac = |f: fn(&DriftTrial) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / trials.len() as f64;
    Ok(DriftSummary {
        variant,
        aligned_fraction: frac(|t| t.aligned),
        constant_fraction: frac(|t| t.constant_output),
        trials,
    })
}
