//! The per-iteration update schedule: one generator step and
//! `critic_steps` critic steps, each critic round on a fresh real batch.

use crate::data::{sample_standard_normal, RealData};
use crate::error::{Error, Result};
use crate::metrics::uniform_eps;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, Rng};

use super::{discriminator_loss, generator_loss, split_ranges, DiscLoss, FakeRouting, GenLoss, MixtureModel, Workers};

/// How a generator's fake samples reach the critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Every generator emits `n_D` batches of `batch_size`, one per critic.
    Full,
    /// Every generator emits one batch of `batch_size`, split into `n_D`
    /// equal parts. Generator weights stay uniform.
    Split,
}

impl RoutingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Split => "split",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "split" => Ok(Self::Split),
            other => Err(Error::Config(format!("unknown routing mode {other:?} (expected full or split)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: usize,
    pub critic_steps: usize,
    pub lambda_gp: f64,
    pub gen_adam: AdamConfig,
    pub disc_adam: AdamConfig,
    pub routing: RoutingMode,
    pub workers: usize,
}

impl TrainConfig {
    /// Batch 256, 100,000 iterations, 5 critic steps, penalty 10, learning
    /// rates 1e-5 (generators) and 1e-4 (critics).
    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            total_iterations: 100_000,
            critic_steps: 5,
            lambda_gp: 10.0,
            gen_adam: AdamConfig::synthetic(1e-5),
            disc_adam: AdamConfig::synthetic(1e-4),
            routing: RoutingMode::Full,
            workers: 1,
        }
    }

    pub fn validate(&self, n_d: usize) -> Result<()> {
        if self.batch_size == 0 || self.critic_steps == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, critic_steps and workers must be positive".into()));
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return Err(Error::Config("lambda_gp must be finite and non-negative".into()));
        }
        self.gen_adam.validate()?;
        self.disc_adam.validate()?;
        if self.routing == RoutingMode::Split && self.batch_size % n_d != 0 {
            return Err(Error::Config(format!(
                "split routing needs batch_size ({}) divisible by n_D ({n_d})",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// What one iteration logs.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// 1-based index of the finished iteration.
    pub iteration: usize,
    /// Critic gap averaged over the critic rounds.
    pub critic_gap: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gen_weights: Vec<f64>,
    pub disc_weights: Vec<f64>,
    /// Some update was rejected for non-finite gradients and skipped.
    pub flagged: bool,
}

/// A mixture with its optimizers and random streams.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MixtureModel,
    config: TrainConfig,
    workers: Workers,
    gen_opts: Vec<AdamState>,
    disc_opts: Vec<AdamState>,
    gen_logit_opt: AdamState,
    disc_logit_opt: AdamState,
    data_rng: Rng,
    noise_rng: Rng,
    interp_rng: Rng,
    iteration: usize,
    gen_updates: Vec<u64>,
    disc_updates: Vec<u64>,
}

impl Trainer {
    pub fn new(model: MixtureModel, config: TrainConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        config.validate(model.n_discriminators())?;
        if model.discriminators.iter().any(|d| d.output_dim() != 1) {
            return Err(Error::InvalidArgument("critics must have scalar output".into()));
        }
        let gen_opts = model.generators.iter().map(|g| AdamState::for_network(config.gen_adam, g)).collect();
        let disc_opts = model.discriminators.iter().map(|d| AdamState::for_network(config.disc_adam, d)).collect();
        Ok(Self {
            gen_logit_opt: AdamState::new(config.gen_adam, model.n_generators()),
            disc_logit_opt: AdamState::new(config.disc_adam, model.n_discriminators()),
            gen_updates: vec![0; model.n_generators()],
            disc_updates: vec![0; model.n_discriminators()],
            workers: Workers::new(config.workers),
            data_rng: rng::stream(seed, "data"),
            noise_rng: rng::stream(seed, "noise"),
            interp_rng: rng::stream(seed, "interp"),
            iteration: 0,
            gen_opts,
            disc_opts,
            model,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Applied updates per generator.
    pub fn gen_updates(&self) -> &[u64] {
        &self.gen_updates
    }

    /// Applied updates per critic.
    pub fn disc_updates(&self) -> &[u64] {
        &self.disc_updates
    }

    pub fn gen_optimizers(&self) -> &[AdamState] {
        &self.gen_opts
    }

    pub fn disc_optimizers(&self) -> &[AdamState] {
        &self.disc_opts
    }

    pub fn logit_optimizers(&self) -> (&AdamState, &AdamState) {
        (&self.gen_logit_opt, &self.disc_logit_opt)
    }

    /// Rows each generator emits per round.
    pub fn rows_per_generator(&self) -> usize {
        match self.config.routing {
            RoutingMode::Full => self.config.batch_size * self.model.n_discriminators(),
            RoutingMode::Split => self.config.batch_size,
        }
    }

    /// Draws noise for every generator and routes the resulting samples.
    pub fn emit_fakes(&mut self) -> Result<FakeRouting> {
        let rows = self.rows_per_generator();
        let ranges = split_ranges(rows, self.model.n_discriminators())?;
        let noise: Vec<_> = (0..self.model.n_generators())
            .map(|_| sample_standard_normal(rows, self.model.noise_dim(), &mut self.noise_rng))
            .collect();
        let model = &self.model;
        let samples = self
            .workers
            .map(noise.len(), |i| model.generators[i].forward(&noise[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(FakeRouting { ranges: vec![ranges; noise.len()], noise, samples })
    }

    fn step_generators(&mut self, g: &GenLoss) -> Result<bool> {
        let mut flagged = false;
        for (i, grads) in g.gen_grads.iter().enumerate() {
            let s = skipped(self.gen_opts[i].step_network(&mut self.model.generators[i], grads))?;
            if !s {
                self.gen_updates[i] += 1;
            }
            flagged |= s;
        }
        if self.config.routing == RoutingMode::Full {
            flagged |= skipped(self.gen_logit_opt.step_slice(&mut self.model.gen_logits, &g.logit_grads))?;
        }
        Ok(flagged)
    }

    fn step_discriminators(&mut self, d: &DiscLoss) -> Result<bool> {
        let mut flagged = false;
        for (j, grads) in d.disc_grads.iter().enumerate() {
            let s = skipped(self.disc_opts[j].step_network(&mut self.model.discriminators[j], grads))?;
            if !s {
                self.disc_updates[j] += 1;
            }
            flagged |= s;
        }
        flagged |= skipped(self.disc_logit_opt.step_slice(&mut self.model.disc_logits, &d.logit_grads))?;
        Ok(flagged)
    }

    /// Critic loss on one real batch and a routing, with fresh interpolation
    /// coefficients.
    pub fn critic_loss(&mut self, real: &ndarray::Array2<f64>, fakes: &FakeRouting) -> Result<DiscLoss> {
        let routed = fakes.routed();
        let eps: Vec<Vec<Vec<f64>>> = routed
            .iter()
            .map(|row| row.iter().map(|m| uniform_eps(m.nrows(), &mut self.interp_rng)).collect())
            .collect();
        discriminator_loss(&self.model, real, &routed, &eps, self.config.lambda_gp, &self.workers)
    }

    /// One iteration: draw reals, emit fakes, step the generators, step the
    /// critics on those fakes, then `critic_steps - 1` more critic rounds with
    /// new reals and fakes.
    pub fn train_iteration(&mut self, data: &RealData) -> Result<IterationRecord> {
        if data.dim() != self.model.data_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.model.data_dim(),
                got: data.dim(),
                context: "dataset vs generator output",
            });
        }
        let mut flagged = false;
        let mut gap = 0.0;
        let mut d_loss = 0.0;
        let mut g_loss = 0.0;
        for round in 0..self.config.critic_steps {
            let real = data.sample(self.config.batch_size, &mut self.data_rng)?.x;
            let fakes = self.emit_fakes()?;
            if round == 0 {
                let g = generator_loss(&self.model, &fakes, &self.workers)?;
                g_loss = g.loss;
                flagged |= self.step_generators(&g)?;
            }
            let d = self.critic_loss(&real, &fakes)?;
            gap += d.gap;
            d_loss = d.loss;
            flagged |= self.step_discriminators(&d)?;
        }
        if flagged {
            log::warn!("iteration {}: non-finite gradients, some updates skipped", self.iteration + 1);
        }
        self.iteration += 1;
        Ok(IterationRecord {
            iteration: self.iteration,
            critic_gap: gap / self.config.critic_steps as f64,
            d_loss,
            g_loss,
            gen_weights: self.model.gen_weights()?,
            disc_weights: self.model.disc_weights()?,
            flagged,
        })
    }
}

/// Turns an optimizer rejection into a flag; other errors propagate.
fn skipped(r: Result<()>) -> Result<bool> {
    match r {
        Ok(()) => Ok(false),
        Err(Error::NonFinite(_)) => Ok(true),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSpec, GaussianMixtureSpec, NoiseSpec, TrainingSetMode};
    use crate::net::NetworkSpec;

    fn setup(n_g: usize, n_d: usize, routing: RoutingMode) -> (Trainer, RealData) {
        let dim = 4;
        let model = MixtureModel::init(
            &NetworkSpec::new(dim, dim, 3, 8),
            &NetworkSpec::new(dim, 1, 3, 8),
            n_g,
            n_d,
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 6,
            total_iterations: 3,
            critic_steps: 5,
            lambda_gp: 10.0,
            gen_adam: AdamConfig::synthetic(1e-3),
            disc_adam: AdamConfig::synthetic(1e-3),
            routing,
            workers: 1,
        };
        let data = RealData::new(
            DatasetSpec::GaussianMixture(GaussianMixtureSpec::new(dim, 3)),
            TrainingSetMode::Infinite,
            NoiseSpec { dim },
        )
        .unwrap();
        (Trainer::new(model, cfg, 3).unwrap(), data)
    }

    #[test]
    fn update_counts_follow_schedule() {
        let (mut t, data) = setup(2, 3, RoutingMode::Full);
        for _ in 0..3 {
            let rec = t.train_iteration(&data).unwrap();
            assert!(!rec.flagged);
        }
        assert_eq!(t.gen_updates(), &[3, 3]);
        assert_eq!(t.disc_updates(), &[15, 15, 15]);
        assert_eq!(t.gen_optimizers()[0].step_count(), 3);
        assert_eq!(t.disc_optimizers()[2].step_count(), 15);
    }

    #[test]
    fn zero_learning_rates_freeze_the_model() {
        let (t, data) = setup(2, 2, RoutingMode::Full);
        let mut cfg = *t.config();
        cfg.gen_adam.learning_rate = 0.0;
        cfg.disc_adam.learning_rate = 0.0;
        let before = t.model.clone();
        let mut t = Trainer::new(before.clone(), cfg, 1).unwrap();
        for _ in 0..4 {
            t.train_iteration(&data).unwrap();
        }
        assert_eq!(t.model, before);
    }

    #[test]
    fn weights_stay_on_simplex() {
        let (mut t, data) = setup(3, 2, RoutingMode::Full);
        for _ in 0..5 {
            let rec = t.train_iteration(&data).unwrap();
            for w in [&rec.gen_weights, &rec.disc_weights] {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(w.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn split_mode_keeps_generator_weights_uniform_and_conserves_rows() {
        let (mut t, data) = setup(3, 3, RoutingMode::Split);
        let fakes = t.emit_fakes().unwrap();
        assert_eq!(fakes.total_rows(), 3 * 6);
        let routed = fakes.routed();
        let consumed: usize = routed.iter().flatten().map(|m| m.nrows()).sum();
        assert_eq!(consumed, fakes.total_rows());
        for per_d in &routed {
            assert_eq!(per_d.iter().map(|m| m.nrows()).sum::<usize>(), 6);
        }
        for _ in 0..3 {
            let rec = t.train_iteration(&data).unwrap();
            assert_eq!(rec.gen_weights, vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn split_mode_rejects_indivisible_batch() {
        let (t, _) = setup(2, 4, RoutingMode::Full);
        let mut cfg = *t.config();
        cfg.routing = RoutingMode::Split;
        assert!(Trainer::new(t.model.clone(), cfg, 1).is_err());
    }

    #[test]
    fn critic_step_descends_on_frozen_batches() {
        let (mut t, data) = setup(2, 2, RoutingMode::Full);
        let real = data.sample(6, &mut rng::from_seed(4)).unwrap().x;
        let fakes = t.emit_fakes().unwrap();
        let routed = fakes.routed();
        let mut r = rng::from_seed(5);
        let eps: Vec<Vec<Vec<f64>>> =
            routed.iter().map(|row| row.iter().map(|m| uniform_eps(m.nrows(), &mut r)).collect()).collect();
        let w = Workers::new(1);
        let before = discriminator_loss(&t.model, &real, &routed, &eps, 10.0, &w).unwrap();
        let mut tiny = *t.config();
        tiny.disc_adam.learning_rate = 1e-6;
        let mut opts: Vec<_> = t.model.discriminators.iter().map(|d| AdamState::for_network(tiny.disc_adam, d)).collect();
        let mut logit_opt = AdamState::new(tiny.disc_adam, 2);
        for (j, g) in before.disc_grads.iter().enumerate() {
            opts[j].step_network(&mut t.model.discriminators[j], g).unwrap();
        }
        logit_opt.step_slice(&mut t.model.disc_logits, &before.logit_grads).unwrap();
        let after = discriminator_loss(&t.model, &real, &routed, &eps, 10.0, &w).unwrap();
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
    }

    #[test]
    fn runs_are_deterministic_and_worker_count_invariant() {
        let run = |workers: usize| {
            let (t, data) = setup(3, 3, RoutingMode::Full);
            let mut cfg = *t.config();
            cfg.workers = workers;
            let mut t = Trainer::new(t.model.clone(), cfg, 9).unwrap();
            let recs: Vec<_> = (0..3).map(|_| t.train_iteration(&data).unwrap()).collect();
            (recs, t.model)
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }
}
