//! Command-line front end: JSON experiment configs in, JSON/CSV artifacts out.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 divergence.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, Splits};
use crate::error::{Error, Result};
use crate::layers::{NetworkSpec, Network};
use crate::normalize::{NormalizerConfig, ReparamConfig};
use crate::statlab::{self, DriftConfig, Variant};
use crate::train::{self, Arm, RunOutput, RunRecord, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "weightalign", version, about = "Train, analyze and verify WeightAlign networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent training runs for sweep and ablate.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, env = "DATA_ROOT")]
    pub dataset_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train one network.
    Train,
    /// Activation statistics of untrained probe networks.
    Analyze,
    /// Monte-Carlo identity checks.
    Verify,
    /// Batch-size sweep.
    Sweep,
    /// WeightAlign scale-multiplier ablation.
    Ablate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Mnist {
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    Cifar10 {
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    Synthetic {
        train: usize,
        test: usize,
        shape: [usize; 3],
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DigitsCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Path(PathBuf),
    Preset { preset: Preset },
    Inline(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub variants: Vec<String>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub drift: DriftConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "yes")]
    pub include_controls: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            samples: default_samples(),
            include_controls: true,
        }
    }
}

fn default_samples() -> usize {
    1_000_000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Variant names such as `bn` or `wa`, applied to every hidden layer.
    pub methods: Vec<String>,
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub multipliers: Vec<f64>,
}

/// Everything a command needs. Sections a command does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub dataset_root: Option<PathBuf>,
    #[serde(default)]
    pub network: Option<NetworkSource>,
    /// Overrides the normalizer of every hidden weight layer.
    #[serde(default)]
    pub normalizer: Option<NormalizerConfig>,
    /// Overrides the reparameterizer of every hidden weight layer.
    #[serde(default)]
    pub reparameterizer: Option<ReparamConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub analyze: Option<AnalyzeConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub ablate: Option<AblateConfig>,
    /// Not written back out, so artifacts do not depend on where they land.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing)]
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides and inlines the network spec.
    pub fn resolve(mut self, cli: &Cli) -> Result<Self> {
        if let Some(s) = cli.seed {
            self.seed = Some(s);
        }
        if let Some(o) = &cli.out {
            self.output_dir = Some(o.clone());
        }
        if let Some(j) = cli.jobs {
            self.jobs = Some(j);
        }
        if let Some(r) = &cli.dataset_root {
            self.dataset_root = Some(r.clone());
        }
        let seed = *self.seed.get_or_insert(0);
        if let Some(t) = &mut self.train {
            t.seed = seed;
            if let Some(a) = &mut t.augment {
                a.seed = seed;
            }
        }
        if let Some(src) = self.network.take() {
            let mut spec = match src {
                NetworkSource::Path(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    NetworkSpec::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                NetworkSource::Preset { preset: Preset::DigitsCnn } => {
                    NetworkSpec::digits_cnn(NormalizerConfig::None, ReparamConfig::None, seed)
                }
                NetworkSource::Inline(spec) => spec,
            };
            if self.normalizer.is_some() || self.reparameterizer.is_some() {
                spec = spec.with_global(
                    self.normalizer.take().unwrap_or_default(),
                    self.reparameterizer.take().unwrap_or_default(),
                );
            }
            spec.seed = seed;
            self.network = Some(NetworkSource::Inline(spec));
        }
        Ok(self)
    }

    fn spec(&self) -> Result<&NetworkSpec> {
        match &self.network {
            Some(NetworkSource::Inline(s)) => Ok(s),
            _ => Err(Error::Config("config has no `network`".into())),
        }
    }

    fn train_config(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::Config("config has no `train` section".into()))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn splits(&self) -> Result<Splits> {
        let root = self.dataset_root.clone().unwrap_or_else(|| PathBuf::from("data"));
        let pick = |sub: &str, marker: &str| -> PathBuf {
            if root.join(marker).exists() {
                root.clone()
            } else {
                root.join(sub)
            }
        };
        let (mut splits, subset, test_subset) = match self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `dataset`".into()))?
        {
            DatasetConfig::Mnist { subset, test_subset } => {
                (data::load_mnist(pick("mnist", data::MNIST_TRAIN_IMAGES))?, *subset, *test_subset)
            }
            DatasetConfig::Cifar10 { subset, test_subset } => {
                (data::load_cifar10(pick("cifar10", "test_batch.bin"))?, *subset, *test_subset)
            }
            DatasetConfig::Synthetic {
                train,
                test,
                shape,
                classes,
            } => (
                data::synthetic_splits(*train, *test, *shape, *classes, self.seed.unwrap_or(0))?,
                None,
                None,
            ),
        };
        if let Some(n) = subset {
            splits.train = splits.train.take(n)?;
        }
        if let Some(n) = test_subset {
            splits.test = splits.test.take(n)?;
        }
        if splits.train.is_empty() || splits.test.is_empty() {
            return Err(Error::EmptySplit("dataset subset is empty".into()));
        }
        Ok(splits)
    }
}

/// Result of a command: exit code plus whatever it wants on stdout.
struct Outcome {
    code: i32,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

#[derive(Serialize)]
struct EpochLine<'a> {
    label: &'a str,
    seed: u64,
    #[serde(flatten)]
    epoch: &'a train::EpochRecord,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Timing<'a> {
    label: &'a str,
    wall_seconds: f64,
}

fn write_runs(dir: &Path, cfg: &ExperimentConfig, runs: &[RunOutput]) -> Result<()> {
    let seed = cfg.seed.unwrap_or(0);
    let mut lines = String::new();
    for r in runs {
        for e in &r.record.epochs {
            lines.push_str(&serde_json::to_string(&EpochLine {
                label: &r.record.label,
                seed,
                epoch: e,
                config: cfg,
            })?);
            lines.push('\n');
        }
    }
    write_file(&dir.join("run.jsonl"), lines)?;
    let records: Vec<&RunRecord> = runs.iter().map(|r| &r.record).collect();
    write_json(&dir.join("records.json"), &records)?;
    let timing: Vec<Timing> = runs
        .iter()
        .map(|r| Timing {
            label: &r.record.label,
            wall_seconds: r.wall_seconds,
        })
        .collect();
    write_json(&dir.join("timing.json"), &timing)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let spec = cfg.spec()?.clone();
    let tc = cfg.train_config()?.clone();
    let mut net = Network::build(spec)?;
    tc.validate()?;
    let splits = cfg.splits()?;
    let dir = cfg.out_dir()?;
    write_json(&dir.join("config.json"), cfg)?;
    let label = cfg.name.clone().unwrap_or_else(|| "train".into());
    let out = train::train(&mut net, &splits, &tc, &label)?;
    write_runs(&dir, cfg, std::slice::from_ref(&out))?;
    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.write_record(["label", "seed", "epochs", "final_train_loss", "final_train_error", "final_test_error", "diverged"])?;
    let last = out.record.epochs.last();
    w.write_record([
        label.clone(),
        cfg.seed.unwrap_or(0).to_string(),
        out.record.epochs.len().to_string(),
        fmt_opt(last.map(|e| e.train_loss)),
        fmt_opt(last.map(|e| e.train_error)),
        fmt_opt(out.record.final_test_error()),
        out.record.diverged.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io(dir.join("summary.csv"), e))?;
    match &out.record.divergence {
        Some(why) => {
            eprintln!("training diverged: {why}");
            Ok(Outcome { code: EXIT_DIVERGED })
        }
        None => {
            println!(
                "{label}: {} epochs, final test error {}%",
                out.record.epochs.len(),
                fmt_opt(out.record.final_test_error())
            );
            Ok(Outcome { code: EXIT_OK })
        }
    }
}

fn cmd_analyze(cfg: &ExperimentConfig) -> Result<Outcome> {
    let a = cfg
        .analyze
        .as_ref()
        .ok_or_else(|| Error::Config("config has no `analyze` section".into()))?;
    if a.variants.is_empty() {
        return Err(Error::Config("`analyze.variants` is empty".into()));
    }
    let variants = a.variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
    let seed = cfg.seed.unwrap_or(0);
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![seed]);
    if seeds.is_empty() {
        return Err(Error::Config("`analyze.seeds` is empty".into()));
    }
    let dir = cfg.out_dir()?;
    write_json(&dir.join("config.json"), cfg)?;
    let mut w = csv_writer(&dir.join("drift.csv"))?;
    w.write_record(["variant", "seed", "max_mean_ratio", "std_ratio", "aligned", "argmax_constancy", "constant_output"])?;
    for v in variants {
        for &s in &seeds {
            let (trial, mut report) = statlab::drift_trial(&a.drift, v, s)?;
            report.meta.insert("config".into(), serde_json::to_value(cfg)?);
            if s == seeds[0] {
                report.save(&dir.join(format!("{}.json", v.name())), &dir.join(format!("{}.csv", v.name())))?;
            }
            w.write_record([
                v.name().to_string(),
                s.to_string(),
                trial.max_mean_ratio.to_string(),
                trial.std_ratio.to_string(),
                trial.aligned.to_string(),
                trial.argmax_constancy.to_string(),
                trial.constant_output.to_string(),
            ])?;
            println!(
                "{:8} seed {s}: |mean|/std <= {:.3}, std ratio {:.2}, argmax constancy {:.2}",
                v.name(),
                trial.max_mean_ratio,
                trial.std_ratio,
                trial.argmax_constancy
            );
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("drift.csv"), e))?;
    Ok(Outcome { code: EXIT_OK })
}

fn cmd_verify(cfg: &ExperimentConfig) -> Result<Outcome> {
    let v = cfg.verify.clone().unwrap_or_default();
    if v.samples < statlab::MIN_SAMPLES {
        eprintln!(
            "warning: {} samples is below {}; standard errors and therefore the pass gates widen",
            v.samples,
            statlab::MIN_SAMPLES
        );
    }
    let results = statlab::verify_suite(v.samples, cfg.seed.unwrap_or(0), v.include_controls)?;
    let dir = cfg.out_dir()?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("verify.json"), &results)?;
    let mut w = csv_writer(&dir.join("verify.csv"))?;
    w.write_record(["check", "estimate", "target", "stderr", "samples", "pass", "control"])?;
    let mut ok = true;
    for r in &results {
        w.write_record([
            r.name.clone(),
            r.estimate.to_string(),
            r.target.to_string(),
            r.stderr.to_string(),
            r.samples.to_string(),
            r.pass.to_string(),
            r.control.to_string(),
        ])?;
        let verdict = match (r.control, r.pass) {
            (false, true) => "PASS",
            (false, false) => "FAIL",
            (true, false) => "FLAGGED (control)",
            (true, true) => "NOT FLAGGED (control)",
        };
        println!("{verdict:22} {}: estimate {:.6}, target {:.6}, stderr {:.2e}", r.name, r.estimate, r.target, r.stderr);
        ok &= r.control || r.pass;
    }
    w.flush().map_err(|e| Error::io(dir.join("verify.csv"), e))?;
    Ok(Outcome {
        code: if ok { EXIT_OK } else { EXIT_CONFIG },
    })
}

fn write_arm_csv(path: &Path, key: &str, rows: &[(String, String, &RunRecord)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", key, "final_test_error", "diverged", "skipped"])?;
    for (method, k, r) in rows {
        w.write_record([
            method.clone(),
            k.clone(),
            fmt_opt(r.final_test_error()),
            r.diverged.to_string(),
            r.skipped.is_some().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = cfg.sweep.as_ref().ok_or_else(|| Error::Config("config has no `sweep` section".into()))?;
    if s.methods.is_empty() || s.batch_sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one method and one batch size".into()));
    }
    let base = cfg.spec()?;
    let tc = cfg.train_config()?;
    tc.validate()?;
    let mut arms: Vec<Arm> = Vec::new();
    let mut keys = Vec::new();
    for m in &s.methods {
        let v = Variant::parse(m)?;
        let (n, r) = v.layers(4);
        let spec = base.clone().with_global(n, r);
        Network::build(spec.clone())?;
        for (arm, &bs) in train::batch_arms(v.name(), &spec, &s.batch_sizes, tc)?.into_iter().zip(&s.batch_sizes) {
            keys.push((v.name().to_string(), bs.to_string()));
            arms.push(arm);
        }
    }
    let splits = cfg.splits()?;
    let dir = cfg.out_dir()?;
    write_json(&dir.join("config.json"), cfg)?;
    let runs = train::run_arms(&arms, &splits, cfg.jobs.unwrap_or(1))?;
    write_runs(&dir, cfg, &runs)?;
    let rows: Vec<_> = keys.into_iter().zip(&runs).map(|((m, k), r)| (m, k, &r.record)).collect();
    write_arm_csv(&dir.join("summary.csv"), "batch_size", &rows)?;
    for (m, k, r) in &rows {
        println!("{m:6} bs {k:>4}: test error {}", fmt_opt(r.final_test_error()));
    }
    Ok(Outcome { code: EXIT_OK })
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let a = cfg.ablate.as_ref().ok_or_else(|| Error::Config("config has no `ablate` section".into()))?;
    if a.multipliers.is_empty() {
        return Err(Error::Config("`ablate.multipliers` is empty".into()));
    }
    let spec = cfg.spec()?;
    let tc = cfg.train_config()?;
    tc.validate()?;
    Network::build(spec.clone())?;
    let arms = train::scale_arms("wa", spec, &a.multipliers, tc)?;
    let splits = cfg.splits()?;
    let dir = cfg.out_dir()?;
    write_json(&dir.join("config.json"), cfg)?;
    let runs = train::run_arms(&arms, &splits, cfg.jobs.unwrap_or(1))?;
    write_runs(&dir, cfg, &runs)?;
    let rows: Vec<_> = a
        .multipliers
        .iter()
        .zip(&runs)
        .map(|(m, r)| ("wa".to_string(), m.to_string(), &r.record))
        .collect();
    write_arm_csv(&dir.join("summary.csv"), "multiplier", &rows)?;
    for (_, k, r) in &rows {
        println!("x{k:6}: test error {}, diverged {}", fmt_opt(r.final_test_error()), r.diverged);
    }
    Ok(Outcome { code: EXIT_OK })
}

/// Runs one parsed command and returns its exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = (|| -> Result<Outcome> {
        let cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None if cli.command == Command::Verify => ExperimentConfig::default(),
            None => return Err(Error::Config("--config is required for this command".into())),
        };
        let cfg = cfg.resolve(cli)?;
        match cli.command {
            Command::Train => cmd_train(&cfg),
            Command::Analyze => cmd_analyze(&cfg),
            Command::Verify => cmd_verify(&cfg),
            Command::Sweep => cmd_sweep(&cfg),
            Command::Ablate => cmd_ablate(&cfg),
        }
    })();
    match result {
        Ok(o) => {
            let _ = std::io::stdout().flush();
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
