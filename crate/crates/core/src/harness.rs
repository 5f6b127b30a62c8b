//! Run configuration, experiment orchestration and output files.
//!
//! A run directory `<out>/<run_id>/` holds `ckpt_pre.bin`, `ckpt_svi.bin`,
//! `train_log.csv`, `scatter.csv`, `metrics.csv` and, written last,
//! `manifest.json`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use crate::bnn::{Activation, BnnModel, Method, ModelConfig};
use crate::checkpoint::{sha256_hex, write_atomic, Checkpoint, CheckpointKind};
use crate::data::{
    load_raw_f32, quantize_inputs, synth_ambiguous, AmbiguousSpec, DataLayout, DatasetSplit, DatasetTag, Split,
    DATA_DIR_ENV,
};
use crate::error::{Error, Result};
use crate::quant::{relative_error_sweep, LogQuantizer, RangeQuantizer, SweepRow};
use crate::rng::{stream_rng, stream_seed, Stream};
use crate::svi::{pretrain, train_svi, transfer_mu, EpochLog, Mlp, TrainSchedule};
use crate::uncertainty::{evaluate_suite, EvalSuite, SuiteMetrics};
use crate::{INPUT_DIM, NUM_CLASSES};

pub const TRAIN_LOG_HEADER: &str = "epoch,nll,kl,beta,train_acc,wall_ms";
pub const SCATTER_HEADER: &str = "dataset,index,softmax_entropy,mutual_information,pred,label";
pub const METRICS_HEADER: &str = "run_id,method,bits,accuracy,auroc_fmnist,auroc_amnist";
pub const FIG_HEADER: &str = "sigma,bits,err_uniform,err_log";

/// Largest MNIST training split; the monitor slice is cut from what follows
/// the training subset.
const MNIST_TRAIN_IMAGES: usize = 60_000;

/// Progress sink for long-running commands.
pub type Report<'a> = &'a (dyn Fn(&str) + Sync);

/// Everything that determines a single training and evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub method: Method,
    pub bits: u32,
    pub activation: Activation,
    pub hidden: Vec<usize>,
    pub clip: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub prior_std: f64,
    pub kl_on_quantized: bool,
    pub pretrain_epochs: usize,
    pub svi_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta_max: f64,
    pub sigma_init: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub train_size: usize,
    pub monitor_size: usize,
    pub ambiguous_train: usize,
    pub test_size: usize,
    pub ambiguous_test: usize,
    pub fashion_test: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// 0 leaves inputs at full precision.
    pub input_bits: u32,
    pub ambiguous_images: Option<PathBuf>,
    pub ambiguous_labels: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
        RunConfig {
            run_id: None,
            method: Method::Float,
            bits: 8,
            activation: Activation::Softplus,
            hidden: vec![100, 100],
            clip: 1.0,
            sigma_lo: 1e-3,
            sigma_hi: 1.0,
            prior_std: 1.0,
            kl_on_quantized: true,
            pretrain_epochs: 300,
            svi_epochs: 200,
            lr: 1e-3,
            batch_size: 128,
            beta_max: 0.25,
            sigma_init: 0.01,
            mc_samples: 30,
            seed: 0,
            data_dir,
            train_size: 10_000,
            monitor_size: 1_000,
            ambiguous_train: 5_000,
            test_size: 10_000,
            ambiguous_test: 5_000,
            fashion_test: 5_000,
            lambda_lo: 0.4,
            lambda_hi: 0.6,
            input_bits: 0,
            ambiguous_images: None,
            ambiguous_labels: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in echo order.
pub const RUN_KEYS: &[&str] = &[
    "run_id",
    "method",
    "bits",
    "activation",
    "hidden",
    "clip",
    "sigma_lo",
    "sigma_hi",
    "prior_std",
    "kl_on_quantized",
    "pretrain_epochs",
    "svi_epochs",
    "lr",
    "batch_size",
    "beta_max",
    "sigma_init",
    "mc_samples",
    "seed",
    "data_dir",
    "train_size",
    "monitor_size",
    "ambiguous_train",
    "test_size",
    "ambiguous_test",
    "fashion_test",
    "lambda_lo",
    "lambda_hi",
    "input_bits",
    "ambiguous_images",
    "ambiguous_labels",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "run_id" => self.run_id = (!value.is_empty()).then(|| value.to_string()),
            "method" => self.method = parse(key, value)?,
            "bits" if value == "fp" => {}
            "bits" => self.bits = parse(key, value)?,
            "activation" => self.activation = parse(key, value)?,
            "hidden" => self.hidden = parse_list(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "sigma_lo" => self.sigma_lo = parse(key, value)?,
            "sigma_hi" => self.sigma_hi = parse(key, value)?,
            "prior_std" => self.prior_std = parse(key, value)?,
            "kl_on_quantized" => self.kl_on_quantized = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "svi_epochs" => self.svi_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "sigma_init" => self.sigma_init = parse(key, value)?,
            "mc_samples" => self.mc_samples = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "train_size" => self.train_size = parse(key, value)?,
            "monitor_size" => self.monitor_size = parse(key, value)?,
            "ambiguous_train" => self.ambiguous_train = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "ambiguous_test" => self.ambiguous_test = parse(key, value)?,
            "fashion_test" => self.fashion_test = parse(key, value)?,
            "lambda_lo" => self.lambda_lo = parse(key, value)?,
            "lambda_hi" => self.lambda_hi = parse(key, value)?,
            "input_bits" => self.input_bits = parse(key, value)?,
            "ambiguous_images" => self.ambiguous_images = optional_path(value),
            "ambiguous_labels" => self.ambiguous_labels = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        Some(match key {
            "run_id" => self.run_id(),
            "method" => self.method.to_string(),
            "bits" => self.bits_label(),
            "activation" => self.activation.to_string(),
            "hidden" => join(&self.hidden),
            "clip" => self.clip.to_string(),
            "sigma_lo" => self.sigma_lo.to_string(),
            "sigma_hi" => self.sigma_hi.to_string(),
            "prior_std" => self.prior_std.to_string(),
            "kl_on_quantized" => self.kl_on_quantized.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "svi_epochs" => self.svi_epochs.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "beta_max" => self.beta_max.to_string(),
            "sigma_init" => self.sigma_init.to_string(),
            "mc_samples" => self.mc_samples.to_string(),
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "train_size" => self.train_size.to_string(),
            "monitor_size" => self.monitor_size.to_string(),
            "ambiguous_train" => self.ambiguous_train.to_string(),
            "test_size" => self.test_size.to_string(),
            "ambiguous_test" => self.ambiguous_test.to_string(),
            "fashion_test" => self.fashion_test.to_string(),
            "lambda_lo" => self.lambda_lo.to_string(),
            "lambda_hi" => self.lambda_hi.to_string(),
            "input_bits" => self.input_bits.to_string(),
            "ambiguous_images" => path(&self.ambiguous_images),
            "ambiguous_labels" => path(&self.ambiguous_labels),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Resolved configuration as `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in RUN_KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("listed key"));
        }
        out
    }

    /// `bits` as written to outputs: `fp` for the float method.
    pub fn bits_label(&self) -> String {
        if self.method == Method::Float {
            "fp".into()
        } else {
            self.bits.to_string()
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}-s{}", self.method, self.bits_label(), self.seed))
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![INPUT_DIM];
        sizes.extend(&self.hidden);
        sizes.push(NUM_CLASSES);
        sizes
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            sizes: self.sizes(),
            method: self.method,
            // the float method never quantizes, so any valid width will do
            bits: if self.method == Method::Float { 8 } else { self.bits },
            activation: self.activation,
            clip: self.clip,
            sigma_lo: self.sigma_lo,
            sigma_hi: self.sigma_hi,
            prior_std: self.prior_std,
            kl_on_quantized: self.kl_on_quantized,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            pretrain_epochs: self.pretrain_epochs,
            svi_epochs: self.svi_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            beta_max: self.beta_max,
            ..TrainSchedule::default()
        }
    }

    pub fn layout(&self) -> DataLayout {
        DataLayout::new(&self.data_dir)
    }

    /// Collects every problem before failing. With `check_data`, the dataset
    /// files must exist.
    pub fn validate(&self, check_data: bool) -> Result<()> {
        let mut errs = Vec::new();
        if self.method != Method::Float && !(2..=16).contains(&self.bits) {
            errs.push(format!(
                "bits must be in 2..=16 for method {}, got {}",
                self.method, self.bits
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            errs.push(format!("hidden layer widths must be positive, got {:?}", self.hidden));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            errs.push(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.sigma_lo > 0.0 && self.sigma_lo < self.sigma_hi && self.sigma_hi.is_finite()) {
            errs.push(format!(
                "need 0 < sigma_lo < sigma_hi, got [{}, {}]",
                self.sigma_lo, self.sigma_hi
            ));
        }
        if !(self.prior_std > 0.0) {
            errs.push(format!("prior_std must be positive, got {}", self.prior_std));
        }
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            errs.push(format!("sigma_init must be positive, got {}", self.sigma_init));
        }
        if let Err(Error::Config(more)) = self.schedule().validate() {
            errs.extend(more);
        }
        if self.mc_samples == 0 {
            errs.push("mc_samples must be at least 1".into());
        }
        for (name, v) in [
            ("train_size", self.train_size),
            ("monitor_size", self.monitor_size),
            ("test_size", self.test_size),
            ("ambiguous_test", self.ambiguous_test),
            ("fashion_test", self.fashion_test),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.train_size + self.monitor_size > MNIST_TRAIN_IMAGES {
            errs.push(format!(
                "train_size + monitor_size must not exceed {MNIST_TRAIN_IMAGES}, got {}",
                self.train_size + self.monitor_size
            ));
        }
        if let Err(e) = self.ambiguous_spec(1).validate() {
            errs.push(e.to_string());
        }
        if self.input_bits > 16 {
            errs.push(format!("input_bits must be 0 (off) or 1..=16, got {}", self.input_bits));
        }
        if self.ambiguous_images.is_some() != self.ambiguous_labels.is_some() {
            errs.push("ambiguous_images and ambiguous_labels must be given together".into());
        }
        if check_data {
            let mut paths = self.layout().required_files();
            paths.extend(self.ambiguous_images.clone());
            paths.extend(self.ambiguous_labels.clone());
            let missing: Vec<String> = paths
                .iter()
                .filter(|p| !p.is_file())
                .map(|p| p.display().to_string())
                .collect();
            if !missing.is_empty() {
                errs.push(format!(
                    "missing dataset files (run scripts/fetch_data.sh or set {DATA_DIR_ENV}): {}",
                    missing.join(", ")
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn ambiguous_spec(&self, count: usize) -> AmbiguousSpec {
        AmbiguousSpec {
            lambda_lo: self.lambda_lo,
            lambda_hi: self.lambda_hi,
            count,
        }
    }

    /// Digest of every field that influences pretraining.
    pub fn pretrain_key(&self) -> String {
        let data_dir = fs::canonicalize(&self.data_dir).unwrap_or_else(|_| self.data_dir.clone());
        let text = format!(
            "v1|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            join(&self.hidden),
            self.activation,
            self.pretrain_epochs,
            self.lr,
            self.batch_size,
            self.seed,
            data_dir.display(),
            self.train_size,
            self.ambiguous_train,
            self.lambda_lo,
            self.lambda_hi,
            self.input_bits,
        );
        sha256_hex(text.as_bytes())[..16].to_string()
    }
}

/// Bit-width sweep settings (`sweep.*` keys).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub bits: Vec<u32>,
    /// Empty means the run seed.
    pub seeds: Vec<u64>,
    pub include_float: bool,
    /// Concurrent runs; 0 uses every available thread.
    pub jobs: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            methods: vec![Method::Vpq, Method::Spq, Method::Jq],
            bits: vec![2, 3, 4],
            seeds: Vec::new(),
            include_float: true,
            jobs: 0,
        }
    }
}

impl SweepSpec {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "methods" => self.methods = parse_list(key, value)?,
            "bits" => self.bits = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "include_float" => self.include_float = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            _ => return Err(format!("unknown key \"sweep.{key}\"")),
        }
        Ok(())
    }

    /// One configuration per run, ordered by method, bits and seed.
    pub fn expand(&self, base: &RunConfig) -> Vec<RunConfig> {
        let seeds = if self.seeds.is_empty() {
            vec![base.seed]
        } else {
            self.seeds.clone()
        };
        let mut runs = Vec::new();
        for &seed in &seeds {
            let with = |method: Method, bits: u32| RunConfig {
                method,
                bits,
                seed,
                run_id: None,
                ..base.clone()
            };
            if self.include_float {
                runs.push(with(Method::Float, base.bits));
            }
            for &m in self.methods.iter().filter(|&&m| m != Method::Float) {
                for &b in &self.bits {
                    runs.push(with(m, b));
                }
            }
        }
        runs.sort_by_key(|r| {
            (
                r.method as u8,
                if r.method == Method::Float { 0 } else { r.bits },
                r.seed,
            )
        });
        runs.dedup_by(|a, b| a.run_id() == b.run_id());
        runs
    }
}

/// Relative-error figure settings (`fig.*` keys).
#[derive(Clone, Debug, PartialEq)]
pub struct FigSpec {
    pub bits: Vec<u32>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub points_per_decade: usize,
    /// Log quantizer range.
    pub log_lo: f64,
    pub log_hi: f64,
    /// Upper end of the unsigned uniform baseline `[0, uniform_hi]`.
    pub uniform_hi: f64,
}

impl Default for FigSpec {
    fn default() -> Self {
        FigSpec {
            bits: vec![2, 3, 4, 6, 8],
            sigma_min: 1e-5,
            sigma_max: 1.0,
            points_per_decade: 20,
            log_lo: 1e-5,
            log_hi: 1.0,
            uniform_hi: 1.0,
        }
    }
}

impl FigSpec {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "bits" => self.bits = parse_list(key, value)?,
            "sigma_min" => self.sigma_min = parse(key, value)?,
            "sigma_max" => self.sigma_max = parse(key, value)?,
            "points_per_decade" => self.points_per_decade = parse(key, value)?,
            "log_lo" => self.log_lo = parse(key, value)?,
            "log_hi" => self.log_hi = parse(key, value)?,
            "uniform_hi" => self.uniform_hi = parse(key, value)?,
            _ => return Err(format!("unknown key \"fig.{key}\"")),
        }
        Ok(())
    }

    /// Log-spaced values from `sigma_min` to `sigma_max` inclusive. Exact
    /// powers of ten are produced exactly.
    pub fn sigmas(&self) -> Vec<f64> {
        let lo = self.sigma_min.log10();
        let decades = self.sigma_max.log10() - lo;
        let ppd = self.points_per_decade.max(1) as f64;
        let n = (decades * ppd).round().max(0.0) as usize;
        (0..=n)
            .map(|k| {
                let e = lo + k as f64 / ppd;
                if (e - e.round()).abs() < 1e-9 {
                    format!("1e{}", e.round() as i32).parse().expect("valid literal")
                } else {
                    10f64.powf(e)
                }
            })
            .collect()
    }
}

/// All settings a config file can carry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub sweep: SweepSpec,
    pub fig: FigSpec,
}

impl Settings {
    /// Applies one `key=value` assignment, routing `sweep.` and `fig.` keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if let Some(k) = key.strip_prefix("sweep.") {
            self.sweep.set(k, value)
        } else if let Some(k) = key.strip_prefix("fig.") {
            self.fig.set(k, value)
        } else {
            self.run.set(key, value)
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. Reports every bad line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        let mut errs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = s.set(k.trim(), v.trim()) {
                        errs.push(format!("line {}: {e}", n + 1));
                    }
                }
                None => errs.push(format!("line {}: expected key=value, got {line:?}", n + 1)),
            }
        }
        if errs.is_empty() {
            Ok(s)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Defaults, then the optional config file, then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut errs = Vec::new();
        let mut s = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                match Settings::parse(&text) {
                    Ok(s) => s,
                    Err(Error::Config(e)) => {
                        errs.extend(e.into_iter().map(|m| format!("{}: {m}", p.display())));
                        Settings::default()
                    }
                    Err(e) => return Err(e),
                }
            }
            None => Settings::default(),
        };
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = s.set(k.trim(), v.trim()) {
                        errs.push(format!("override {o:?}: {e}"));
                    }
                }
                None => errs.push(format!("override {o:?}: expected key=value")),
            }
        }
        if errs.is_empty() {
            Ok(s)
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Example counts recorded in manifests.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Counts {
    pub mnist_train: usize,
    pub ambiguous_train: usize,
    pub monitor: usize,
    pub mnist_test: usize,
    pub ambiguous_test: usize,
    pub fashion_test: usize,
}

/// Training data, monitor slice and evaluation suite of a run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: DatasetSplit,
    pub monitor: DatasetSplit,
    pub suite: EvalSuite,
    pub counts: Counts,
}

/// Loads and synthesizes every split a run needs.
pub fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let layout = cfg.layout();
    let head = layout.load(DatasetTag::Mnist, Split::Train, Some(cfg.train_size + cfg.monitor_size))?;
    let mnist_train = head.take(cfg.train_size);
    let monitor = head.range(cfg.train_size, cfg.train_size + cfg.monitor_size);
    drop(head);
    let mnist_test = layout.load(DatasetTag::Mnist, Split::Test, Some(cfg.test_size))?;
    let fashion = layout.load(DatasetTag::Fashion, Split::Test, Some(cfg.fashion_test))?;

    let mut rng = stream_rng(cfg.seed, Stream::DataSynth);
    let mut train = mnist_train.clone();
    let mut ambiguous_train = 0;
    if cfg.ambiguous_train > 0 {
        let amb = synth_ambiguous(&mnist_train, &cfg.ambiguous_spec(cfg.ambiguous_train), &mut rng)?;
        ambiguous_train = amb.len();
        train = train.concat(&amb);
    }
    let ambiguous = match (&cfg.ambiguous_images, &cfg.ambiguous_labels) {
        (Some(images), Some(labels)) => load_raw_f32(images, cfg.ambiguous_test, labels)?,
        _ => synth_ambiguous(&mnist_test, &cfg.ambiguous_spec(cfg.ambiguous_test), &mut rng)?,
    };

    let mut suite = EvalSuite {
        mnist: mnist_test,
        ambiguous,
        fashion,
    };
    let mut monitor = monitor;
    if cfg.input_bits > 0 {
        let q = |s: &DatasetSplit| quantize_inputs(s, cfg.input_bits);
        train = q(&train)?;
        monitor = q(&monitor)?;
        suite = EvalSuite {
            mnist: q(&suite.mnist)?,
            ambiguous: q(&suite.ambiguous)?,
            fashion: q(&suite.fashion)?,
        };
    }
    let counts = Counts {
        mnist_train: mnist_train.len(),
        ambiguous_train,
        monitor: monitor.len(),
        mnist_test: suite.mnist.len(),
        ambiguous_test: suite.ambiguous.len(),
        fashion_test: suite.fashion.len(),
    };
    Ok(RunData {
        train,
        monitor,
        suite,
        counts,
    })
}

#[derive(Clone, Debug)]
struct PretrainOutcome {
    mlp: Mlp,
    train_accuracy: f64,
    cached: bool,
    wall_ms: u64,
}

fn pretrain_cache_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    out.join("_pretrain").join(cfg.pretrain_key())
}

/// Pretrains, or reuses a cached result for an identical pretraining setup.
fn pretrain_cached(cfg: &RunConfig, data: &RunData, out: &Path, report: Report) -> Result<PretrainOutcome> {
    let dir = pretrain_cache_dir(cfg, out);
    let ckpt = dir.join(CheckpointKind::Pretrained.file_name());
    let meta = dir.join("pretrain.json");
    if ckpt.is_file() && meta.is_file() {
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", meta.display())))?;
        if let Some(acc) = v["train_accuracy"].as_f64() {
            report(&format!(
                "[{}] reusing pretrained weights {}",
                cfg.run_id(),
                cfg.pretrain_key()
            ));
            return Ok(PretrainOutcome {
                mlp: Checkpoint::load(&ckpt)?.into_mlp(cfg.activation)?,
                train_accuracy: acc,
                cached: true,
                wall_ms: 0,
            });
        }
    }
    report(&format!(
        "[{}] pretraining for {} epochs",
        cfg.run_id(),
        cfg.pretrain_epochs
    ));
    let start = Instant::now();
    let mut rng = stream_rng(cfg.seed, Stream::Pretrain);
    let p = pretrain(
        &cfg.sizes(),
        cfg.activation,
        &data.train.images,
        &data.train.labels,
        &cfg.schedule(),
        &mut rng,
    )?;
    let wall_ms = start.elapsed().as_millis() as u64;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Checkpoint::from_mlp(&p.mlp, cfg.to_kv()).save(&ckpt)?;
    let meta_text = serde_json::to_string_pretty(&json!({
        "key": cfg.pretrain_key(),
        "train_accuracy": p.train_accuracy,
        "wall_ms": wall_ms,
    }))
    .expect("json");
    write_atomic(&meta, meta_text.as_bytes())?;
    report(&format!(
        "[{}] pretraining done, train accuracy {:.4}",
        cfg.run_id(),
        p.train_accuracy
    ));
    Ok(PretrainOutcome {
        mlp: p.mlp,
        train_accuracy: p.train_accuracy,
        cached: false,
        wall_ms,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.nll, r.kl, r.beta, r.train_acc, r.wall_ms
        );
    }
    out
}

pub fn scatter_csv(metrics: &SuiteMetrics) -> String {
    let mut out = format!("{SCATTER_HEADER}\n");
    for r in &metrics.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.dataset, r.index, r.softmax_entropy, r.mutual_information, r.predicted, r.label
        );
    }
    out
}

/// A metrics CSV row; failed runs carry `NaN` metrics.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub method: Method,
    pub bits: String,
    pub accuracy: f64,
    pub auroc_fmnist: f64,
    pub auroc_amnist: f64,
}

impl MetricsRow {
    fn new(cfg: &RunConfig, m: Option<&SuiteMetrics>) -> Self {
        MetricsRow {
            run_id: cfg.run_id(),
            method: cfg.method,
            bits: cfg.bits_label(),
            accuracy: m.map_or(f64::NAN, |m| m.accuracy),
            auroc_fmnist: m.map_or(f64::NAN, |m| m.auroc_fmnist),
            auroc_amnist: m.map_or(f64::NAN, |m| m.auroc_amnist),
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run_id, r.method, r.bits, r.accuracy, r.auroc_fmnist, r.auroc_amnist
        );
    }
    out
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = RUN_KEYS
        .iter()
        .map(|&k| {
            (
                k.to_string(),
                serde_json::Value::String(cfg.get(k).expect("listed key")),
            )
        })
        .collect();
    serde_json::Value::Object(map)
}

/// Result of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub metrics: SuiteMetrics,
    pub pretrain_accuracy: f64,
    pub log: Vec<EpochLog>,
}

/// Pretrain, transfer, SVI and evaluation for one configuration, writing
/// the run directory under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, report: Report) -> Result<RunOutcome> {
    cfg.validate(true)?;
    let total = Instant::now();
    let run_id = cfg.run_id();
    let dir = out.join(&run_id);
    create_dir(&dir)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }

    let data = load_run_data(cfg)?;
    let pre = pretrain_cached(cfg, &data, out, report)?;
    let pre_digest =
        Checkpoint::from_mlp(&pre.mlp, cfg.to_kv()).save(&dir.join(CheckpointKind::Pretrained.file_name()))?;

    let mut bnn = BnnModel::new(&cfg.model_config(), cfg.sigma_init)?;
    transfer_mu(&pre.mlp, &mut bnn, cfg.sigma_init)?;
    report(&format!("[{run_id}] svi for {} epochs", cfg.svi_epochs));
    let svi_start = Instant::now();
    let mut rng = stream_rng(cfg.seed, Stream::Svi);
    let every = (cfg.svi_epochs / 10).max(1);
    let log = train_svi(
        &mut bnn,
        &data.train.images,
        &data.train.labels,
        (&data.monitor.images, &data.monitor.labels),
        &cfg.schedule(),
        &mut rng,
        |r| {
            if r.epoch % every == 0 || r.epoch + 1 == cfg.svi_epochs {
                report(&format!(
                    "[{run_id}] epoch {} nll {:.4} kl {:.4} beta {:.4} acc {:.4}",
                    r.epoch, r.nll, r.kl, r.beta, r.train_acc
                ));
            }
        },
    )?;
    let svi_ms = svi_start.elapsed().as_millis() as u64;
    write_text(&dir.join("train_log.csv"), &train_log_csv(&log))?;
    let svi_digest = Checkpoint::from_bnn(&bnn, cfg.to_kv()).save(&dir.join(CheckpointKind::Posterior.file_name()))?;

    report(&format!("[{run_id}] evaluating with {} samples", cfg.mc_samples));
    let eval_start = Instant::now();
    let metrics = evaluate_suite(&bnn, &data.suite, cfg.mc_samples, stream_seed(cfg.seed, Stream::Eval))?;
    let eval_ms = eval_start.elapsed().as_millis() as u64;
    write_text(&dir.join("scatter.csv"), &scatter_csv(&metrics))?;
    write_text(
        &dir.join("metrics.csv"),
        &metrics_csv(&[MetricsRow::new(cfg, Some(&metrics))]),
    )?;

    let manifest = json!({
        "run_id": run_id,
        "command": "train",
        "library_version": env!("CARGO_PKG_VERSION"),
        "config": config_json(cfg),
        "checkpoints": {
            "ckpt_pre.bin": format!("sha256:{pre_digest}"),
            "ckpt_svi.bin": format!("sha256:{svi_digest}"),
        },
        "pretrain": { "train_accuracy": pre.train_accuracy, "cached": pre.cached, "key": cfg.pretrain_key() },
        "metrics": {
            "accuracy": metrics.accuracy,
            "auroc_amnist": metrics.auroc_amnist,
            "auroc_fmnist": metrics.auroc_fmnist,
        },
        "counts": data.counts,
        "wall_ms": {
            "pretrain": pre.wall_ms,
            "svi": svi_ms,
            "eval": eval_ms,
            "total": total.elapsed().as_millis() as u64,
        },
    });
    write_atomic(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("json").as_bytes(),
    )?;
    report(&format!(
        "[{run_id}] accuracy {:.4} auroc_amnist {:.4} auroc_fmnist {:.4}",
        metrics.accuracy, metrics.auroc_amnist, metrics.auroc_fmnist
    ));
    Ok(RunOutcome {
        run_dir: dir,
        metrics,
        pretrain_accuracy: pre.train_accuracy,
        log,
    })
}

/// Re-evaluates a posterior checkpoint. Outputs go to
/// `<out>/<run_id>/eval-n<mc_samples>-s<seed>/`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path, report: Report) -> Result<SuiteMetrics> {
    cfg.validate(true)?;
    let run_id = cfg.run_id();
    let ckpt_path = checkpoint.map_or_else(
        || out.join(&run_id).join(CheckpointKind::Posterior.file_name()),
        Path::to_path_buf,
    );
    if !ckpt_path.is_file() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} not found",
            ckpt_path.display()
        )));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let mut bnn = BnnModel::new(&cfg.model_config(), cfg.sigma_init)?;
    ckpt.apply_to(&mut bnn)?;
    let digest = sha256_hex(&fs::read(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?);

    let dir = out
        .join(&run_id)
        .join(format!("eval-n{}-s{}", cfg.mc_samples, cfg.seed));
    create_dir(&dir)?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let data = load_run_data(cfg)?;
    report(&format!(
        "[{run_id}] evaluating {} with {} samples",
        ckpt_path.display(),
        cfg.mc_samples
    ));
    let start = Instant::now();
    let metrics = evaluate_suite(&bnn, &data.suite, cfg.mc_samples, stream_seed(cfg.seed, Stream::Eval))?;
    let eval_ms = start.elapsed().as_millis() as u64;
    write_text(&dir.join("scatter.csv"), &scatter_csv(&metrics))?;
    write_text(
        &dir.join("metrics.csv"),
        &metrics_csv(&[MetricsRow::new(cfg, Some(&metrics))]),
    )?;
    let manifest = json!({
        "run_id": run_id,
        "command": "eval",
        "library_version": env!("CARGO_PKG_VERSION"),
        "config": config_json(cfg),
        "checkpoints": { "evaluated": ckpt_path.display().to_string(), "sha256": digest },
        "metrics": {
            "accuracy": metrics.accuracy,
            "auroc_amnist": metrics.auroc_amnist,
            "auroc_fmnist": metrics.auroc_fmnist,
        },
        "counts": data.counts,
        "wall_ms": { "eval": eval_ms },
    });
    write_atomic(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("json").as_bytes(),
    )?;
    Ok(metrics)
}

/// One sweep entry: the metrics row plus the failure message, if any.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SweepOutcome {
    pub row: MetricsRow,
    pub seed: u64,
    pub error: Option<String>,
}

/// Trains every configuration of the sweep and writes `<out>/metrics.csv`
/// with one row per run. A failing run yields a `NaN` row and the sweep
/// continues.
pub fn cmd_sweep(settings: &Settings, out: &Path, report: Report) -> Result<Vec<SweepOutcome>> {
    let runs = settings.sweep.expand(&settings.run);
    if runs.is_empty() {
        return Err(Error::Config(vec!["sweep has no runs".into()]));
    }
    let mut errs = Vec::new();
    for r in &runs {
        if let Err(e) = r.validate(true) {
            match e {
                Error::Config(list) => errs.extend(list.into_iter().map(|m| format!("{}: {m}", r.run_id()))),
                other => errs.push(format!("{}: {other}", r.run_id())),
            }
        }
    }
    if !errs.is_empty() {
        errs.dedup();
        return Err(Error::Config(errs));
    }
    create_dir(out)?;

    let jobs = if settings.sweep.jobs == 0 {
        rayon::current_num_threads()
    } else {
        settings.sweep.jobs
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Spec(format!("cannot build thread pool: {e}")))?;

    // Shared pretraining first, so concurrent runs only ever read the cache.
    let mut seen = BTreeSet::new();
    let distinct: Vec<&RunConfig> = runs.iter().filter(|r| seen.insert(r.pretrain_key())).collect();
    let pre_errors: Vec<(String, String)> = pool.install(|| {
        distinct
            .par_iter()
            .filter_map(|cfg| {
                load_run_data(cfg)
                    .and_then(|d| pretrain_cached(cfg, &d, out, report))
                    .err()
                    .map(|e| (cfg.pretrain_key(), e.to_string()))
            })
            .collect()
    });

    let outcomes: Vec<SweepOutcome> = pool.install(|| {
        runs.par_iter()
            .map(|cfg| {
                let key = cfg.pretrain_key();
                let result = match pre_errors.iter().find(|(k, _)| *k == key) {
                    Some((_, e)) => Err(Error::Numeric(format!("pretraining failed: {e}"))),
                    None => cmd_train(cfg, out, report),
                };
                match result {
                    Ok(o) => SweepOutcome {
                        row: MetricsRow::new(cfg, Some(&o.metrics)),
                        seed: cfg.seed,
                        error: None,
                    },
                    Err(e) => {
                        report(&format!("[{}] failed: {e}", cfg.run_id()));
                        SweepOutcome {
                            row: MetricsRow::new(cfg, None),
                            seed: cfg.seed,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });

    let rows: Vec<MetricsRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_text(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    let summary = json!({
        "library_version": env!("CARGO_PKG_VERSION"),
        "runs": outcomes,
    });
    write_atomic(
        &out.join("sweep.json"),
        serde_json::to_string_pretty(&summary).expect("json").as_bytes(),
    )?;
    Ok(outcomes)
}

/// A figure row for one bit-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FigRow {
    pub bits: u32,
    pub row: SweepRow,
}

/// Relative quantization error of standard deviations, uniform versus
/// logarithmic, for each configured bit-width.
pub fn fig_logquant_rows(fig: &FigSpec) -> Result<Vec<FigRow>> {
    if !(fig.sigma_min > 0.0 && fig.sigma_min < fig.sigma_max) {
        return Err(Error::Spec(format!(
            "need 0 < sigma_min < sigma_max, got [{}, {}]",
            fig.sigma_min, fig.sigma_max
        )));
    }
    let sigmas = fig.sigmas();
    let mut rows = Vec::new();
    for &b in &fig.bits {
        let uniform = RangeQuantizer::new(b, fig.uniform_hi)?;
        let log = LogQuantizer::new(b, fig.log_lo, fig.log_hi)?;
        rows.extend(
            relative_error_sweep(&uniform, &log, &sigmas)?
                .into_iter()
                .map(|row| FigRow { bits: b, row }),
        );
    }
    Ok(rows)
}

pub fn fig_csv(rows: &[FigRow]) -> String {
    let mut out = format!("{FIG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.row.sigma, r.bits, r.row.err_uniform, r.row.err_log
        );
    }
    out
}

/// Writes `<out>/fig_logquant.csv`.
pub fn cmd_fig_logquant(fig: &FigSpec, out: &Path) -> Result<(PathBuf, Vec<FigRow>)> {
    let rows = fig_logquant_rows(fig)?;
    create_dir(out)?;
    let path = out.join("fig_logquant.csv");
    write_text(&path, &fig_csv(&rows))?;
    Ok((path, rows))
}
