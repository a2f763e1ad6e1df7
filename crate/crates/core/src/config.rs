//! Experiment configuration as sectioned `key = value` text. Every key has a
//! dotted name (`train.lr_g`) that can be overridden individually; a config
//! is always resolved on top of a preset, so files only need the keys they
//! change.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{DatasetSpec, GaussianMixtureSpec, NoiseSpec, RandomNetTargetSpec, TrainingSetMode};
use crate::error::{Error, Result};
use crate::metrics::AuxTrainConfig;
use crate::mixgan::{class_partition, ConditionalConfig, RoutingMode, TrainConfig};
use crate::net::NetworkSpec;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    GaussianMixture,
    RandomNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub components: usize,
    pub variance: f64,
    pub target_layers: usize,
    pub target_width: usize,
    pub target_seed: u64,
    /// `None` means an infinite training set.
    pub training_set: Option<usize>,
    pub pool_seed: u64,
    pub noise_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchConfig {
    pub layers: usize,
    pub width: usize,
    pub slope: f64,
}

/// Architecture and training budget of the Judge or the independent critic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxConfig {
    pub layers: usize,
    pub width: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Frechet distance cadence in iterations; 0 logs it only at the start
    /// and the end.
    pub fd_every: usize,
    pub fd_samples: usize,
    pub eval_samples: usize,
    /// Checkpoint cadence; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub projection_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub generators: usize,
    pub discriminators: usize,
    pub routing: RoutingMode,
    pub generator: ArchConfig,
    pub discriminator: ArchConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub critic_steps: usize,
    pub lambda_gp: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval: EvalConfig,
    pub judge: AuxConfig,
    pub critic: AuxConfig,
    /// Present when training the class-conditional hinge-loss variant.
    pub lambda_fm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full published scale. Long-running.
    Paper,
    /// Scaled down to run in minutes on one core.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
        }
    }
}

impl ExperimentConfig {
    /// Data dim 1024, 3 Gaussians, 5-layer networks of width 1024, batch
    /// 256, 100,000 iterations with 5 critic steps, penalty 10, learning
    /// rates 1e-5 / 1e-4, Judge and critic trained 100,000 iterations.
    pub fn paper() -> Self {
        let arch = ArchConfig { layers: 5, width: 1024, slope: 0.2 };
        let aux = AuxConfig { layers: 5, width: 1024, iterations: 100_000, batch_size: 256, lr: 1e-4 };
        Self {
            seed: 1,
            workers: 1,
            dataset: DatasetConfig {
                kind: DatasetKind::GaussianMixture,
                dim: 1024,
                components: 3,
                variance: 0.09,
                target_layers: 5,
                target_width: 1024,
                target_seed: 7,
                training_set: None,
                pool_seed: 11,
                noise_dim: 1024,
            },
            generators: 1,
            discriminators: 1,
            routing: RoutingMode::Full,
            generator: arch,
            discriminator: arch,
            batch_size: 256,
            iterations: 100_000,
            critic_steps: 5,
            lambda_gp: 10.0,
            lr_g: 1e-5,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eval: EvalConfig {
                fd_every: 500,
                fd_samples: 50_000,
                eval_samples: 25_600,
                checkpoint_every: 10_000,
                projection_samples: 1_000,
            },
            judge: aux,
            critic: aux,
            lambda_fm: None,
        }
    }

    /// Data dim 64, 3-layer networks of width 64, batch 64, 10,000
    /// iterations, learning rates 1e-4 / 1e-3 (the same 1:10 ratio), 5-layer
    /// Judge and critic of width 64.
    pub fn desk() -> Self {
        let arch = ArchConfig { layers: 3, width: 64, slope: 0.2 };
        let aux = AuxConfig { layers: 5, width: 64, iterations: 5_000, batch_size: 64, lr: 1e-4 };
        let mut c = Self::paper();
        c.dataset.dim = 64;
        c.dataset.noise_dim = 64;
        c.dataset.target_layers = 3;
        c.dataset.target_width = 64;
        c.generator = arch;
        c.discriminator = arch;
        c.batch_size = 64;
        c.iterations = 10_000;
        c.lr_g = 1e-4;
        c.lr_d = 1e-3;
        c.eval.fd_every = 500;
        c.eval.fd_samples = 20_000;
        c.eval.checkpoint_every = 0;
        c.judge = aux;
        c.critic = aux;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// `{dataset}_{nG}G{nD}D_{seed}`
    pub fn run_name(&self) -> String {
        format!("{}_{}G{}D_{}", self.dataset_short_name(), self.generators, self.discriminators, self.seed)
    }

    pub fn dataset_short_name(&self) -> String {
        let base = match self.dataset.kind {
            DatasetKind::GaussianMixture => format!("gauss{}", self.dataset.components),
            DatasetKind::RandomNet => format!("randnet{}", self.dataset.target_layers),
        };
        match self.dataset.training_set {
            None => base,
            Some(n) => format!("{base}-n{n}"),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::GaussianMixture => DatasetSpec::GaussianMixture(GaussianMixtureSpec {
                dim: d.dim,
                num_components: d.components,
                component_variance: d.variance,
            }),
            DatasetKind::RandomNet => DatasetSpec::RandomNet(RandomNetTargetSpec {
                net: NetworkSpec::new(d.noise_dim, d.dim, d.target_layers, d.target_width).with_seed(d.target_seed),
            }),
        }
    }

    pub fn training_set_mode(&self) -> TrainingSetMode {
        match self.dataset.training_set {
            None => TrainingSetMode::Infinite,
            Some(size) => TrainingSetMode::Finite { size, seed: self.dataset.pool_seed },
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { dim: self.dataset.noise_dim }
    }

    /// Number of classes in conditional mode.
    fn classes(&self) -> usize {
        if self.lambda_fm.is_some() {
            self.dataset.components
        } else {
            0
        }
    }

    pub fn generator_spec(&self) -> NetworkSpec {
        let a = self.generator;
        NetworkSpec::new(self.dataset.noise_dim + self.classes(), self.dataset.dim, a.layers, a.width).with_slope(a.slope)
    }

    pub fn discriminator_spec(&self) -> NetworkSpec {
        let a = self.discriminator;
        let out = if self.lambda_fm.is_some() { self.dataset.components + 1 } else { 1 };
        NetworkSpec::new(self.dataset.dim, out, a.layers, a.width).with_slope(a.slope)
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, beta1: self.beta1, beta2: self.beta2, epsilon: 1e-8 }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            total_iterations: self.iterations,
            critic_steps: self.critic_steps,
            lambda_gp: self.lambda_gp,
            gen_adam: self.adam(self.lr_g),
            disc_adam: self.adam(self.lr_d),
            routing: self.routing,
            workers: self.workers,
        }
    }

    pub fn conditional_config(&self) -> Result<Option<ConditionalConfig>> {
        self.lambda_fm
            .map(|l| ConditionalConfig::new(self.dataset.components, self.generators, l))
            .transpose()
    }

    fn aux(&self, a: &AuxConfig, lambda_gp: f64, seed: u64) -> AuxTrainConfig {
        AuxTrainConfig {
            net: NetworkSpec::new(self.dataset.dim, 1, a.layers, a.width).with_seed(seed),
            iterations: a.iterations,
            batch_size: a.batch_size,
            adam: AdamConfig::synthetic(a.lr),
            lambda_gp,
            seed,
        }
    }

    pub fn judge_config(&self, seed: u64) -> AuxTrainConfig {
        self.aux(&self.judge, 0.0, seed)
    }

    pub fn critic_config(&self, seed: u64) -> AuxTrainConfig {
        self.aux(&self.critic, 10.0, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.dim == 0 || d.noise_dim == 0 {
            return err("dataset.dim and dataset.noise_dim must be positive".into());
        }
        if d.noise_dim < d.dim {
            return err(format!("dataset.noise_dim ({}) must be at least dataset.dim ({})", d.noise_dim, d.dim));
        }
        if self.generator.layers > 2 && self.generator.width < d.dim {
            return err(format!(
                "generator.width ({}) must be at least dataset.dim ({}) so the generator can be injective",
                self.generator.width, d.dim
            ));
        }
        if self.generators == 0 || self.discriminators == 0 || self.workers == 0 {
            return err("mixture sizes and workers must be positive".into());
        }
        for (name, a) in [("judge", &self.judge), ("critic", &self.critic)] {
            if a.layers < 2 || a.width == 0 || a.batch_size == 0 || !(a.lr >= 0.0) {
                return err(format!("invalid {name} settings"));
            }
        }
        if self.eval.fd_samples < 2 || self.eval.eval_samples == 0 {
            return err("eval.fd_samples must be >= 2 and eval.eval_samples positive".into());
        }
        if d.kind == DatasetKind::GaussianMixture && d.components > d.dim {
            return err("dataset.components cannot exceed dataset.dim".into());
        }
        if let Some(l) = self.lambda_fm {
            if d.kind != DatasetKind::GaussianMixture {
                return err("conditional training needs a Gaussian-mixture dataset".into());
            }
            if !(l >= 0.0) {
                return err("conditional.lambda_fm must be non-negative".into());
            }
            class_partition(d.components, self.generators).map_err(|e| Error::Config(e.to_string()))?;
            if self.discriminator.layers < 3 {
                return err("conditional critics need a hidden layer for feature matching".into());
            }
        }
        if d.training_set == Some(0) {
            return err("dataset.training_set must be positive or 'infinite'".into());
        }
        self.generator_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.discriminator_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.dataset_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config()
            .validate(self.discriminators)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// All keys as `(dotted name, value)` in rendering order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let opt = |v: Option<usize>| v.map_or("infinite".to_string(), |n| n.to_string());
        vec![
            ("experiment.seed", self.seed.to_string()),
            ("experiment.workers", self.workers.to_string()),
            (
                "dataset.kind",
                match d.kind {
                    DatasetKind::GaussianMixture => "gaussian_mixture",
                    DatasetKind::RandomNet => "random_net",
                }
                .to_string(),
            ),
            ("dataset.dim", d.dim.to_string()),
            ("dataset.components", d.components.to_string()),
            ("dataset.variance", d.variance.to_string()),
            ("dataset.target_layers", d.target_layers.to_string()),
            ("dataset.target_width", d.target_width.to_string()),
            ("dataset.target_seed", d.target_seed.to_string()),
            ("dataset.training_set", opt(d.training_set)),
            ("dataset.pool_seed", d.pool_seed.to_string()),
            ("dataset.noise_dim", d.noise_dim.to_string()),
            ("mixture.generators", self.generators.to_string()),
            ("mixture.discriminators", self.discriminators.to_string()),
            ("mixture.routing", self.routing.as_str().to_string()),
            ("generator.layers", self.generator.layers.to_string()),
            ("generator.width", self.generator.width.to_string()),
            ("generator.slope", self.generator.slope.to_string()),
            ("discriminator.layers", self.discriminator.layers.to_string()),
            ("discriminator.width", self.discriminator.width.to_string()),
            ("discriminator.slope", self.discriminator.slope.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.iterations", self.iterations.to_string()),
            ("train.critic_steps", self.critic_steps.to_string()),
            ("train.lambda_gp", self.lambda_gp.to_string()),
            ("train.lr_g", self.lr_g.to_string()),
            ("train.lr_d", self.lr_d.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("eval.fd_every", self.eval.fd_every.to_string()),
            ("eval.fd_samples", self.eval.fd_samples.to_string()),
            ("eval.eval_samples", self.eval.eval_samples.to_string()),
            ("eval.checkpoint_every", self.eval.checkpoint_every.to_string()),
            ("eval.projection_samples", self.eval.projection_samples.to_string()),
            ("judge.layers", self.judge.layers.to_string()),
            ("judge.width", self.judge.width.to_string()),
            ("judge.iterations", self.judge.iterations.to_string()),
            ("judge.batch_size", self.judge.batch_size.to_string()),
            ("judge.lr", self.judge.lr.to_string()),
            ("critic.layers", self.critic.layers.to_string()),
            ("critic.width", self.critic.width.to_string()),
            ("critic.iterations", self.critic.iterations.to_string()),
            ("critic.batch_size", self.critic.batch_size.to_string()),
            ("critic.lr", self.critic.lr.to_string()),
            ("conditional.enabled", self.lambda_fm.is_some().to_string()),
            ("conditional.lambda_fm", self.lambda_fm.unwrap_or(0.05).to_string()),
        ]
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// Applies `(dotted key, value)` pairs; unknown keys are rejected.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut map: BTreeMap<String, String> =
            self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (k, v) in pairs {
            match map.get_mut(k.as_str()) {
                Some(slot) => *slot = v.trim().to_string(),
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        *self = Self::from_map(&map)?;
        Ok(())
    }

    fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = m.get(key).ok_or_else(|| Error::Config(format!("missing key {key}")))?;
            raw.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {raw:?}")))
        }
        let kind = match m.get("dataset.kind").map(String::as_str) {
            Some("gaussian_mixture") => DatasetKind::GaussianMixture,
            Some("random_net") => DatasetKind::RandomNet,
            other => return Err(Error::Config(format!("dataset.kind must be gaussian_mixture or random_net, got {other:?}"))),
        };
        let training_set = match m.get("dataset.training_set").map(String::as_str) {
            Some("infinite") => None,
            _ => Some(get(m, "dataset.training_set")?),
        };
        let arch = |role: &str| -> Result<ArchConfig> {
            Ok(ArchConfig {
                layers: get(m, &format!("{role}.layers"))?,
                width: get(m, &format!("{role}.width"))?,
                slope: get(m, &format!("{role}.slope"))?,
            })
        };
        let aux = |role: &str| -> Result<AuxConfig> {
            Ok(AuxConfig {
                layers: get(m, &format!("{role}.layers"))?,
                width: get(m, &format!("{role}.width"))?,
                iterations: get(m, &format!("{role}.iterations"))?,
                batch_size: get(m, &format!("{role}.batch_size"))?,
                lr: get(m, &format!("{role}.lr"))?,
            })
        };
        let enabled: bool = get(m, "conditional.enabled")?;
        Ok(Self {
            seed: get(m, "experiment.seed")?,
            workers: get(m, "experiment.workers")?,
            dataset: DatasetConfig {
                kind,
                dim: get(m, "dataset.dim")?,
                components: get(m, "dataset.components")?,
                variance: get(m, "dataset.variance")?,
                target_layers: get(m, "dataset.target_layers")?,
                target_width: get(m, "dataset.target_width")?,
                target_seed: get(m, "dataset.target_seed")?,
                training_set,
                pool_seed: get(m, "dataset.pool_seed")?,
                noise_dim: get(m, "dataset.noise_dim")?,
            },
            generators: get(m, "mixture.generators")?,
            discriminators: get(m, "mixture.discriminators")?,
            routing: RoutingMode::parse(m.get("mixture.routing").map_or("", String::as_str))?,
            generator: arch("generator")?,
            discriminator: arch("discriminator")?,
            batch_size: get(m, "train.batch_size")?,
            iterations: get(m, "train.iterations")?,
            critic_steps: get(m, "train.critic_steps")?,
            lambda_gp: get(m, "train.lambda_gp")?,
            lr_g: get(m, "train.lr_g")?,
            lr_d: get(m, "train.lr_d")?,
            beta1: get(m, "train.beta1")?,
            beta2: get(m, "train.beta2")?,
            eval: EvalConfig {
                fd_every: get(m, "eval.fd_every")?,
                fd_samples: get(m, "eval.fd_samples")?,
                eval_samples: get(m, "eval.eval_samples")?,
                checkpoint_every: get(m, "eval.checkpoint_every")?,
                projection_samples: get(m, "eval.projection_samples")?,
            },
            judge: aux("judge")?,
            critic: aux("critic")?,
            lambda_fm: if enabled { Some(get(m, "conditional.lambda_fm")?) } else { None },
        })
    }

    /// Resolves config text on top of `base`. A `preset` key in
    /// `[experiment]` replaces the base first.
    pub fn parse_with_base(text: &str, base: Self) -> Result<Self> {
        let pairs = parse_ini(text)?;
        let mut cfg = base;
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "experiment.preset") {
            cfg = Self::preset(p.parse()?);
        }
        let rest: Vec<_> = pairs.into_iter().filter(|(k, _)| k != "experiment.preset").collect();
        cfg.apply(&rest)?;
        Ok(cfg)
    }

    /// Parses rendered or hand-written config text on top of the desk
    /// preset.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Self::desk())
    }
}

/// Parses sectioned `key = value` text into dotted pairs. `#` and `;` start
/// comment lines.
pub fn parse_ini(text: &str) -> Result<Vec<(String, String)>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let sec = section
            .as_ref()
            .ok_or_else(|| Error::Config(format!("line {}: key outside of a section", n + 1)))?;
        out.push((format!("{sec}.{}", k.trim()), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `--section.key=value` / `--section.key value` flags into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let flag = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument {a:?}; overrides look like --section.key=value")))?;
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("missing value for --{flag}")))?;
                (flag.to_string(), v.clone())
            }
        };
        if !k.contains('.') {
            return Err(Error::Config(format!("override --{k} is not a dotted config key")));
        }
        out.push((k, v));
    }
    Ok(out)
}
