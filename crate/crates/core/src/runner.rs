//! End-to-end experiments: training with metric logging, checkpoints, final
//! evaluation with the Judge and the independent critic, projections, mode
//! assignment, suites and report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{AuxConfig, ExperimentConfig};
use crate::data::RealData;
use crate::error::{Error, Result};
use crate::metrics::{
    empirical_moments, frechet_distance, judge_accuracy, tv_lower_bound, train_independent_critic, train_judge,
    wasserstein_estimate, BatchSampler, FnSampler, MetricReport, MomentStats, RealSampler,
};
use crate::mixgan::{wgan_critic_gap, ConditionalTrainer, MixtureModel, Trainer};
use crate::net::{Matrix, Network};
use crate::optim::AdamState;
use crate::rng::{self, Rng};
use rand::Rng as _;
use crate::viz::{contour_grid, plane_basis, project, Bounds, ProjectionPlot, DEFAULT_RESOLUTION};

pub const CONFIG_FILE: &str = "config.ini";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const MODES_FILE: &str = "modes.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// One line of the training log. `critic_gap` is absent at iteration 0 and
/// in conditional runs; `frechet_distance` only at the configured cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub critic_gap: Option<f64>,
    pub frechet_distance: Option<f64>,
    pub gen_weights: Vec<f64>,
    pub disc_weights: Vec<f64>,
}

impl LogRow {
    pub fn header(n_g: usize, n_d: usize) -> String {
        let mut h = String::from("iteration,critic_gap,frechet_distance");
        for i in 1..=n_g {
            let _ = write!(h, ",w{i}");
        }
        for j in 1..=n_d {
            let _ = write!(h, ",v{j}");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = format!("{},{},{}", self.iteration, opt(self.critic_gap), opt(self.frechet_distance));
        for w in self.gen_weights.iter().chain(&self.disc_weights) {
            let _ = write!(s, ",{w}");
        }
        s
    }

    pub fn parse(line: &str, n_g: usize, n_d: usize) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 3 + n_g + n_d {
            return Err(Error::Format(format!("log row has {} fields, expected {}", f.len(), 3 + n_g + n_d)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            iteration: f[0].parse().map_err(|_| Error::Format(format!("bad iteration {}", f[0])))?,
            critic_gap: opt(f[1])?,
            frechet_distance: opt(f[2])?,
            gen_weights: f[3..3 + n_g].iter().map(|s| num(s)).collect::<Result<_>>()?,
            disc_weights: f[3 + n_g..].iter().map(|s| num(s)).collect::<Result<_>>()?,
        })
    }
}

/// Either kind of trained model, seen as a source of generated samples.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Mixture(MixtureModel),
    Conditional(ConditionalTrainer),
}

impl TrainedModel {
    pub fn mixture(&self) -> &MixtureModel {
        match self {
            Self::Mixture(m) => m,
            Self::Conditional(c) => &c.model,
        }
    }

    /// `n` generated rows and the (0-based) generator of each. Conditional
    /// generators draw their class uniformly from their assigned classes.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
        match self {
            Self::Mixture(m) => m.mixture_sample(n, rng),
            Self::Conditional(c) => {
                let n_g = c.model.n_generators();
                let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_g)).collect();
                let mut out = Matrix::zeros((n, c.model.data_dim()));
                for i in 0..n_g {
                    let rows: Vec<usize> = (0..n).filter(|&r| picks[r] == i).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let x = c.sample_generator(i, rows.len(), rng)?;
                    for (k, &r) in rows.iter().enumerate() {
                        out.row_mut(r).assign(&x.row(k));
                    }
                }
                Ok((out, picks))
            }
        }
    }

    /// `n` rows from generator `i` alone.
    pub fn sample_generator(&self, i: usize, n: usize, rng: &mut Rng) -> Result<Matrix> {
        match self {
            Self::Mixture(m) => {
                let z = crate::data::sample_standard_normal(n, m.noise_dim(), rng);
                m.generators[i].forward(&z)
            }
            Self::Conditional(c) => c.sample_generator(i, n, rng),
        }
    }
}

fn model_sampler<'a>(model: &'a TrainedModel, seed: u64) -> FnSampler<impl FnMut(usize, &mut Rng) -> Matrix + 'a> {
    FnSampler::new(model.mixture().data_dim(), seed, move |n, r| model.sample(n, r).expect("valid model").0)
}

/// Moments of the real distribution: analytic when available, else from
/// `n` fresh samples.
pub fn reference_moments(data: &RealData, n: usize, seed: u64) -> Result<MomentStats> {
    match data.true_moments() {
        Some(m) => Ok(m),
        None => empirical_moments(&data.sample_fresh(n, &mut rng::stream(seed, "eval/real-moments"))?.x),
    }
}

/// Frechet distance between the model's samples and the real moments.
pub fn model_frechet(model: &TrainedModel, truth: &MomentStats, n: usize, rng: &mut Rng) -> Result<f64> {
    let (x, _) = model.sample(n, rng)?;
    frechet_distance(&empirical_moments(&x)?, truth)
}

/// The final metrics: Frechet distance, the model's own critic gap, a Judge
/// and an independent critic. With a finite pool both train against the pool
/// and are scored against the pool and against fresh draws.
pub fn evaluate(cfg: &ExperimentConfig, model: &TrainedModel, data: &RealData) -> Result<MetricReport> {
    let seed = cfg.seed;
    let n = cfg.eval.eval_samples;
    let truth = reference_moments(data, cfg.eval.fd_samples, seed)?;
    let fd = model_frechet(model, &truth, cfg.eval.fd_samples, &mut rng::stream(seed, "eval/fd"))?;

    let critic_gap = match model {
        TrainedModel::Mixture(m) => {
            let real = data.sample_fresh(n, &mut rng::stream(seed, "eval/gap-real"))?.x;
            let (fake, _) = m.mixture_sample(n, &mut rng::stream(seed, "eval/gap-fake"))?;
            wgan_critic_gap(&m.discriminators, &m.disc_weights()?, &real, &fake)?
        }
        TrainedModel::Conditional(_) => f64::NAN,
    };

    let judge_cfg = cfg.judge_config(rng::derive_seed(seed, "judge"));
    let critic_cfg = cfg.critic_config(rng::derive_seed(seed, "critic"));

    let finite = data.pool().is_some();
    let train_real = |label: &str| {
        let r = rng::stream(seed, label);
        if finite {
            RealSampler::training(data, r)
        } else {
            RealSampler::fresh(data, r)
        }
    };

    let judge = train_judge(
        &mut train_real("judge/real"),
        &mut model_sampler(model, rng::derive_seed(seed, "judge/fake")),
        &judge_cfg,
    )?;
    let acc = judge_accuracy(
        &judge,
        &mut RealSampler::fresh(data, rng::stream(seed, "judge/eval-real")),
        &mut model_sampler(model, rng::derive_seed(seed, "judge/eval-fake")),
        n,
    )?;

    let critic = train_independent_critic(
        &mut train_real("critic/real"),
        &mut model_sampler(model, rng::derive_seed(seed, "critic/fake")),
        &critic_cfg,
    )?;
    let w = wasserstein_estimate(
        &critic,
        &mut RealSampler::fresh(data, rng::stream(seed, "critic/eval-real")),
        &mut model_sampler(model, rng::derive_seed(seed, "critic/eval-fake")),
        n,
        &mut rng::stream(seed, "critic/eval-eps"),
    )?;

    let (train_acc, train_w) = if finite {
        let acc_t = judge_accuracy(
            &judge,
            &mut RealSampler::training(data, rng::stream(seed, "judge/train-eval-real")),
            &mut model_sampler(model, rng::derive_seed(seed, "judge/train-eval-fake")),
            n,
        )?;
        let w_t = wasserstein_estimate(
            &critic,
            &mut RealSampler::training(data, rng::stream(seed, "critic/train-eval-real")),
            &mut model_sampler(model, rng::derive_seed(seed, "critic/train-eval-fake")),
            n,
            &mut rng::stream(seed, "critic/train-eval-eps"),
        )?;
        (Some(acc_t), Some(w_t.estimate))
    } else {
        (None, None)
    };

    Ok(MetricReport {
        frechet_distance: fd,
        critic_gap,
        wasserstein_estimate: w.estimate,
        lipschitz_estimate: w.lipschitz,
        raw_independent_gap: w.raw_gap,
        judge_accuracy: acc,
        tv_lower_bound: tv_lower_bound(acc),
        train_judge_accuracy: train_acc,
        train_wasserstein_estimate: train_w,
        fd_samples: cfg.eval.fd_samples,
        eval_samples: n,
    })
}

/// Per-generator histogram of nearest components.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeAssignment {
    /// `histograms[i][k]`: samples of generator `i` nearest component `k+1`.
    pub histograms: Vec<Vec<usize>>,
    /// Majority component (1-based) per generator.
    pub majority: Vec<usize>,
    /// Mixture weight of each generator.
    pub shares: Vec<f64>,
    /// The majority labels hit every component exactly once.
    pub bijection: bool,
}

impl ModeAssignment {
    pub fn to_csv(&self) -> String {
        let k = self.histograms.first().map_or(0, |h| h.len());
        let mut s = String::from("generator,weight,majority");
        for c in 1..=k {
            let _ = write!(s, ",component_{c}");
        }
        let _ = writeln!(s);
        for (i, h) in self.histograms.iter().enumerate() {
            let _ = write!(s, "{},{},{}", i + 1, self.shares[i], self.majority[i]);
            for v in h {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "# bijection={}", self.bijection);
        s
    }
}

pub fn mode_assignment_report(model: &TrainedModel, data: &RealData, n: usize, seed: u64) -> Result<ModeAssignment> {
    let k = data
        .spec()
        .num_classes()
        .ok_or_else(|| Error::InvalidArgument("mode assignment needs a Gaussian-mixture dataset".into()))?;
    let m = model.mixture();
    let mut r = rng::stream(seed, "modes");
    let mut histograms = Vec::with_capacity(m.n_generators());
    for i in 0..m.n_generators() {
        let x = model.sample_generator(i, n, &mut r)?;
        let mut h = vec![0usize; k];
        for row in x.outer_iter() {
            h[data.component_label(row.as_slice().expect("contiguous"))? - 1] += 1;
        }
        histograms.push(h);
    }
    let majority: Vec<usize> = histograms
        .iter()
        .map(|h| h.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map_or(1, |(c, _)| c + 1))
        .collect();
    let mut seen = majority.clone();
    seen.sort_unstable();
    seen.dedup();
    let bijection = majority.len() == k && seen.len() == k;
    let shares = match model {
        TrainedModel::Mixture(mm) => mm.gen_weights()?,
        TrainedModel::Conditional(c) => vec![1.0 / c.model.n_generators() as f64; c.model.n_generators()],
    };
    Ok(ModeAssignment { histograms, majority, shares, bijection })
}

/// Projection of real and generated samples with the critic contours (for
/// scalar critics).
pub fn projection(model: &TrainedModel, data: &RealData, n: usize, seed: u64) -> Result<ProjectionPlot> {
    let frame = plane_basis(data.dim())?;
    let real_x = data.sample_fresh(n, &mut rng::stream(seed, "projection/real"))?.x;
    let (fake_x, gens) = model.sample(n, &mut rng::stream(seed, "projection/fake"))?;
    let real = project(&real_x, &frame)?;
    let fake = project(&fake_x, &frame)?;
    let grid = match model {
        TrainedModel::Mixture(m) => {
            let b = Bounds::around(&[&real, &fake])?;
            Some(contour_grid(&m.discriminators, &m.disc_weights()?, &frame, &b, DEFAULT_RESOLUTION)?)
        }
        TrainedModel::Conditional(_) => None,
    };
    Ok(ProjectionPlot { real, fake, fake_generator: gens, grid })
}

/// Writes `{dir}/{iteration}_projection.csv|svg`.
pub fn write_projection(dir: &Path, iteration: usize, plot: &ProjectionPlot) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join(format!("{iteration}_projection.csv"));
    let svg = dir.join(format!("{iteration}_projection.svg"));
    plot.write(&csv, &svg)?;
    Ok((csv, svg))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse::<f64>().map_err(|e| Error::Format(format!("{x}: {e}"))))
        .collect()
}

/// Saves every network (`G{i}.mgl`, `D{j}.mgl`), its optimizer state
/// (`.mgo`) and a manifest with the iteration and mixture logits.
pub fn save_checkpoint(
    dir: &Path,
    iteration: usize,
    model: &MixtureModel,
    gen_opts: &[AdamState],
    disc_opts: &[AdamState],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "iteration={iteration}\ngenerators={}\ndiscriminators={}\ngen_logits={}\ndisc_logits={}\n",
        model.n_generators(),
        model.n_discriminators(),
        fmt_list(&model.gen_logits),
        fmt_list(&model.disc_logits)
    );
    for (i, g) in model.generators.iter().enumerate() {
        g.save(&dir.join(format!("G{}.mgl", i + 1)))?;
        let _ = writeln!(manifest, "file=G{}.mgl", i + 1);
    }
    for (j, d) in model.discriminators.iter().enumerate() {
        d.save(&dir.join(format!("D{}.mgl", j + 1)))?;
        let _ = writeln!(manifest, "file=D{}.mgl", j + 1);
    }
    for (i, o) in gen_opts.iter().enumerate() {
        o.save(&dir.join(format!("G{}.mgo", i + 1)))?;
        let _ = writeln!(manifest, "file=G{}.mgo", i + 1);
    }
    for (j, o) in disc_opts.iter().enumerate() {
        o.save(&dir.join(format!("D{}.mgo", j + 1)))?;
        let _ = writeln!(manifest, "file=D{}.mgo", j + 1);
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Loads the networks and logits of a checkpoint; returns the iteration.
pub fn load_checkpoint(dir: &Path) -> Result<(usize, MixtureModel)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k != "file" {
                kv.insert(k.to_string(), v.to_string());
            }
        }
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Format(format!("manifest lacks {k}")));
    let count = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
    let (n_g, n_d) = (count("generators")?, count("discriminators")?);
    let generators = (1..=n_g)
        .map(|i| Network::load(&dir.join(format!("G{i}.mgl"))))
        .collect::<Result<Vec<_>>>()?;
    let discriminators = (1..=n_d)
        .map(|j| Network::load(&dir.join(format!("D{j}.mgl"))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = MixtureModel::new(generators, discriminators)?;
    model.gen_logits = parse_list(&get("gen_logits")?)?;
    model.disc_logits = parse_list(&get("disc_logits")?)?;
    model.validate()?;
    Ok((count("iteration")?, model))
}

/// Result of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub log: Vec<LogRow>,
    pub report: MetricReport,
    pub modes: Option<ModeAssignment>,
    pub model: TrainedModel,
}

/// Options that do not change results.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip the Judge/critic phase (the report then only carries the
    /// Frechet distance and the critic gap).
    pub skip_aux: bool,
    /// Skip writing projection files.
    pub skip_projection: bool,
}

fn prepare_run_dir(cfg: &ExperimentConfig, out_root: &Path) -> Result<PathBuf> {
    let dir = out_root.join(cfg.run_name());
    let rendered = cfg.render();
    let cfg_path = dir.join(CONFIG_FILE);
    if cfg_path.exists() {
        let existing = fs::read_to_string(&cfg_path)?;
        if existing != rendered {
            return Err(Error::Config(format!(
                "{} already holds a run with a different config; refusing to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir)?;
    fs::write(&cfg_path, rendered)?;
    Ok(dir)
}

/// Trains, logs, checkpoints and evaluates one configuration under
/// `out_root/{run name}`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = prepare_run_dir(cfg, out_root)?;
    let data = RealData::new(cfg.dataset_spec(), cfg.training_set_mode(), cfg.noise())?;
    let mixture = MixtureModel::init(&cfg.generator_spec(), &cfg.discriminator_spec(), cfg.generators, cfg.discriminators, cfg.seed)?;
    let truth = reference_moments(&data, cfg.eval.fd_samples, cfg.seed)?;
    let mut fd_rng = rng::stream(cfg.seed, "log/fd");
    let total = cfg.iterations;
    let fd_due = |it: usize| it == 0 || it == total || (cfg.eval.fd_every > 0 && it % cfg.eval.fd_every == 0);

    let mut log = Vec::with_capacity(total + 1);
    let mut csv = LogRow::header(cfg.generators, cfg.discriminators);
    csv.push('\n');

    let model = if let Some(cond) = cfg.conditional_config()? {
        let mut t = ConditionalTrainer::new(mixture, cond, cfg.train_config(), cfg.seed)?;
        let uniform = |n: usize| vec![1.0 / n as f64; n];
        for it in 0..=total {
            if it > 0 {
                t.train_iteration(&data)?;
            }
            let fd = if fd_due(it) {
                Some(model_frechet(&TrainedModel::Conditional(t.clone()), &truth, cfg.eval.fd_samples, &mut fd_rng)?)
            } else {
                None
            };
            let row = LogRow {
                iteration: it,
                critic_gap: None,
                frechet_distance: fd,
                gen_weights: uniform(cfg.generators),
                disc_weights: uniform(cfg.discriminators),
            };
            csv.push_str(&row.to_csv());
            csv.push('\n');
            log.push(row);
            if it > 0 && (it == total || (cfg.eval.checkpoint_every > 0 && it % cfg.eval.checkpoint_every == 0)) {
                save_checkpoint(&checkpoint_dir(&dir, it, total), it, &t.model, t.gen_optimizers(), t.disc_optimizers())?;
            }
        }
        if total == 0 {
            save_checkpoint(&checkpoint_dir(&dir, 0, 0), 0, &t.model, t.gen_optimizers(), t.disc_optimizers())?;
        }
        TrainedModel::Conditional(t)
    } else {
        let mut t = Trainer::new(mixture, cfg.train_config(), cfg.seed)?;
        for it in 0..=total {
            let gap = if it > 0 { Some(t.train_iteration(&data)?.critic_gap) } else { None };
            let fd = if fd_due(it) {
                let (x, _) = t.model.mixture_sample(cfg.eval.fd_samples, &mut fd_rng)?;
                Some(frechet_distance(&empirical_moments(&x)?, &truth)?)
            } else {
                None
            };
            let row = LogRow {
                iteration: it,
                critic_gap: gap,
                frechet_distance: fd,
                gen_weights: t.model.gen_weights()?,
                disc_weights: t.model.disc_weights()?,
            };
            if let Some(fd) = fd {
                log::info!("{} iteration {it}: frechet distance {fd:.5}", cfg.run_name());
            }
            csv.push_str(&row.to_csv());
            csv.push('\n');
            log.push(row);
            if it > 0 && (it == total || (cfg.eval.checkpoint_every > 0 && it % cfg.eval.checkpoint_every == 0)) {
                save_checkpoint(&checkpoint_dir(&dir, it, total), it, &t.model, t.gen_optimizers(), t.disc_optimizers())?;
            }
        }
        if total == 0 {
            save_checkpoint(&checkpoint_dir(&dir, 0, 0), 0, &t.model, t.gen_optimizers(), t.disc_optimizers())?;
        }
        TrainedModel::Mixture(t.model)
    };
    fs::write(dir.join(METRICS_FILE), &csv)?;

    let report = if opts.skip_aux {
        let mut r = quick_report(cfg, &model, &data)?;
        r.eval_samples = 0;
        r
    } else {
        evaluate(cfg, &model, &data)?
    };
    fs::write(dir.join(REPORT_FILE), format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()))?;

    let modes = if data.spec().num_classes().is_some() {
        let m = mode_assignment_report(&model, &data, 10_000, cfg.seed)?;
        fs::write(dir.join(MODES_FILE), m.to_csv())?;
        Some(m)
    } else {
        None
    };
    if !opts.skip_projection && data.dim() >= 3 {
        let plot = projection(&model, &data, cfg.eval.projection_samples, cfg.seed)?;
        write_projection(&dir, total, &plot)?;
    }
    Ok(RunSummary { run_dir: dir, log, report, modes, model })
}

/// Report without the Judge and the independent critic.
fn quick_report(cfg: &ExperimentConfig, model: &TrainedModel, data: &RealData) -> Result<MetricReport> {
    let truth = reference_moments(data, cfg.eval.fd_samples, cfg.seed)?;
    let fd = model_frechet(model, &truth, cfg.eval.fd_samples, &mut rng::stream(cfg.seed, "eval/fd"))?;
    Ok(MetricReport {
        frechet_distance: fd,
        critic_gap: f64::NAN,
        wasserstein_estimate: f64::NAN,
        lipschitz_estimate: f64::NAN,
        raw_independent_gap: f64::NAN,
        judge_accuracy: f64::NAN,
        tv_lower_bound: f64::NAN,
        train_judge_accuracy: None,
        train_wasserstein_estimate: None,
        fd_samples: cfg.eval.fd_samples,
        eval_samples: cfg.eval.eval_samples,
    })
}

fn checkpoint_dir(run: &Path, it: usize, total: usize) -> PathBuf {
    if it == total {
        run.join("checkpoints").join("final")
    } else {
        run.join("checkpoints").join(format!("iter_{it}"))
    }
}

/// Loads a run directory's config and final checkpoint.
pub fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, TrainedModel, RealData)> {
    let text = fs::read_to_string(run_dir.join(CONFIG_FILE))?;
    let cfg = ExperimentConfig::parse(&text)?;
    cfg.validate()?;
    let (_, model) = load_checkpoint(&run_dir.join("checkpoints").join("final"))?;
    let data = RealData::new(cfg.dataset_spec(), cfg.training_set_mode(), cfg.noise())?;
    let trained = match cfg.conditional_config()? {
        Some(cond) => TrainedModel::Conditional(ConditionalTrainer::new(model, cond, cfg.train_config(), cfg.seed)?),
        None => TrainedModel::Mixture(model),
    };
    Ok((cfg, trained, data))
}

/// Recomputes the final report of a finished run from its checkpoint.
pub fn eval_run(run_dir: &Path) -> Result<MetricReport> {
    let (cfg, model, data) = load_run(run_dir)?;
    evaluate(&cfg, &model, &data)
}

/// A single varied factor of a suite.
#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    /// `(n_G, n_D)` pairs.
    Mixture(Vec<(usize, usize)>),
    /// Layer counts applied to both generator and discriminator.
    Depth(Vec<usize>),
    /// Hidden widths applied to both generator and discriminator.
    Width(Vec<usize>),
    /// Finite pool sizes; `None` is the infinite training set.
    TrainingSet(Vec<Option<usize>>),
    /// Layer counts of the random target network.
    TargetDepth(Vec<usize>),
}

impl Factor {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mixture(_) => "mixture",
            Self::Depth(_) => "depth",
            Self::Width(_) => "width",
            Self::TrainingSet(_) => "training_set",
            Self::TargetDepth(_) => "target_depth",
        }
    }

    /// Parses `mixture=1x1,3x3`, `depth=3,5`, `width=64,128`,
    /// `training_set=256,infinite`, `target_depth=2,3`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, vals) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("factor {spec:?} should look like name=v1,v2")))?;
        let items: Vec<&str> = vals.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Config("factor needs at least one value".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("bad factor value {s:?}")));
        Ok(match name.trim() {
            "mixture" => Self::Mixture(
                items
                    .iter()
                    .map(|s| {
                        let (g, d) = s
                            .split_once(['x', 'X'])
                            .ok_or_else(|| Error::Config(format!("mixture value {s:?} should be NGxND")))?;
                        Ok((num(g)?, num(d)?))
                    })
                    .collect::<Result<_>>()?,
            ),
            "depth" => Self::Depth(items.iter().map(|s| num(s)).collect::<Result<_>>()?),
            "width" => Self::Width(items.iter().map(|s| num(s)).collect::<Result<_>>()?),
            "training_set" => Self::TrainingSet(
                items
                    .iter()
                    .map(|s| if *s == "infinite" { Ok(None) } else { num(s).map(Some) })
                    .collect::<Result<_>>()?,
            ),
            "target_depth" => Self::TargetDepth(items.iter().map(|s| num(s)).collect::<Result<_>>()?),
            other => return Err(Error::Config(format!("unknown factor {other:?}"))),
        })
    }

    /// One `(label, config)` per factor value, everything else from `base`.
    pub fn expand(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Mixture(v) => v
                .iter()
                .map(|&(g, d)| {
                    (format!("{g}G{d}D"), with(&|c| {
                        c.generators = g;
                        c.discriminators = d;
                    }))
                })
                .collect(),
            Self::Depth(v) => v
                .iter()
                .map(|&l| {
                    (l.to_string(), with(&|c| {
                        c.generator.layers = l;
                        c.discriminator.layers = l;
                    }))
                })
                .collect(),
            Self::Width(v) => v
                .iter()
                .map(|&w| {
                    (w.to_string(), with(&|c| {
                        c.generator.width = w;
                        c.discriminator.width = w;
                    }))
                })
                .collect(),
            Self::TrainingSet(v) => v
                .iter()
                .map(|&n| {
                    (n.map_or("infinite".to_string(), |n| n.to_string()), with(&|c| c.dataset.training_set = n))
                })
                .collect(),
            Self::TargetDepth(v) => v
                .iter()
                .map(|&l| {
                    (l.to_string(), with(&|c| {
                        c.dataset.kind = crate::config::DatasetKind::RandomNet;
                        c.dataset.target_layers = l;
                    }))
                })
                .collect(),
        }
    }
}

/// Judge and critic architectures and budgets must agree across a suite.
pub fn check_fairness(configs: &[ExperimentConfig]) -> Result<()> {
    let key = |c: &ExperimentConfig| -> (AuxConfig, AuxConfig, usize, usize) {
        (c.judge, c.critic, c.eval.eval_samples, c.dataset.dim)
    };
    if let Some(first) = configs.first() {
        if let Some(bad) = configs.iter().find(|c| key(c) != key(first)) {
            return Err(Error::Config(format!(
                "suite is unfair: {} uses a different Judge/critic setup than {}",
                bad.run_name(),
                first.run_name()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SuiteSummary {
    pub table_path: PathBuf,
    pub rows: Vec<(String, RunSummary)>,
}

pub const SUITE_HEADER_PREFIX: &str = "factor,value,run";

/// Runs every labeled config and writes `suite_{factor}.csv` with one row of
/// final metrics per run.
pub fn run_suite(
    factor: &str,
    configs: Vec<(String, ExperimentConfig)>,
    out_root: &Path,
    opts: RunOptions,
) -> Result<SuiteSummary> {
    let plain: Vec<ExperimentConfig> = configs.iter().map(|(_, c)| c.clone()).collect();
    check_fairness(&plain)?;
    for c in &plain {
        c.validate()?;
    }
    let mut names: Vec<String> = plain.iter().map(|c| c.run_name()).collect();
    names.sort();
    names.dedup();
    if names.len() != plain.len() {
        return Err(Error::Config("suite members map to the same run directory".into()));
    }
    fs::create_dir_all(out_root)?;
    let mut table = format!("{SUITE_HEADER_PREFIX},{}\n", MetricReport::CSV_HEADER);
    let mut rows = Vec::new();
    for (label, cfg) in configs {
        let summary = run_experiment(&cfg, out_root, opts)?;
        let _ = writeln!(table, "{factor},{label},{},{}", cfg.run_name(), summary.report.csv_row());
        rows.push((label, summary));
    }
    let table_path = out_root.join(format!("suite_{factor}.csv"));
    fs::write(&table_path, table)?;
    Ok(SuiteSummary { table_path, rows })
}

/// Collects `report.csv` of every run directory directly under `root` into
/// one table with the run name as first column.
pub fn aggregate_reports(root: &Path) -> Result<String> {
    let mut runs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(REPORT_FILE).is_file())
        .collect();
    runs.sort();
    let mut out = format!("run,{}\n", MetricReport::CSV_HEADER);
    for run in runs {
        let text = fs::read_to_string(run.join(REPORT_FILE))?;
        let row = text.lines().nth(1).ok_or_else(|| Error::Format(format!("{} has no data row", run.display())))?;
        MetricReport::parse_csv_row(row)?;
        let name = run.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(out, "{name},{row}");
    }
    Ok(out)
}

/// Reads a run's metric log.
pub fn read_log(run_dir: &Path) -> Result<Vec<LogRow>> {
    let (cfg, _, _) = load_run(run_dir)?;
    let text = fs::read_to_string(run_dir.join(METRICS_FILE))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| LogRow::parse(l, cfg.generators, cfg.discriminators))
        .collect()
}

/// Stand-in sampler over a finished model.
pub fn fake_sampler(model: &TrainedModel, seed: u64) -> impl BatchSampler + '_ {
    model_sampler(model, seed)
}
