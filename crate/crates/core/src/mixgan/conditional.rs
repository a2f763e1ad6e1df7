//! Class-conditional mixtures trained with multi-class hinge losses and
//! feature matching. Critics output `K + 1` scores, index 0 meaning "fake";
//! generators receive `z` concatenated with a one-hot class code and each
//! generator only produces the classes assigned by [`class_partition`].

use ndarray::{s, Array2, ArrayView1};
use rand::Rng as _;

use crate::data::{sample_standard_normal, RealData};
use crate::error::{Error, Result};
use crate::net::{Matrix, Trace};
use crate::optim::AdamState;
use crate::rng::{self, Rng};

use super::{class_partition, split_ranges, MixtureModel, RoutingMode, TrainConfig, Workers};

/// Multi-class hinge `max(0, 1 - s_y + max_{k != y} s_k)` and its gradient
/// with respect to the scores.
pub fn multihinge_with_grad(scores: ArrayView1<f64>, y: usize) -> Result<(f64, Vec<f64>)> {
    let k1 = scores.len();
    if k1 < 2 {
        return Err(Error::InvalidArgument("hinge needs at least two scores".into()));
    }
    if y >= k1 {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {k1} scores")));
    }
    let mut other = usize::MAX;
    for (k, &s) in scores.iter().enumerate() {
        if k != y && (other == usize::MAX || s > scores[other]) {
            other = k;
        }
    }
    let margin = 1.0 - scores[y] + scores[other];
    let mut grad = vec![0.0; k1];
    if margin > 0.0 {
        grad[y] = -1.0;
        grad[other] = 1.0;
        Ok((margin, grad))
    } else {
        Ok((0.0, grad))
    }
}

/// Critic hinge loss; real samples use their class, fakes use label 0.
pub fn d_multihinge_loss(scores: &[f64], y: usize) -> Result<f64> {
    Ok(multihinge_with_grad(ArrayView1::from(scores), y)?.0)
}

/// Generator hinge loss at the fake sample's target class.
pub fn g_multihinge_loss(scores: &[f64], y: usize) -> Result<f64> {
    d_multihinge_loss(scores, y)
}

fn mean_rows(m: &Matrix) -> ndarray::Array1<f64> {
    m.mean_axis(ndarray::Axis(0)).expect("non-empty")
}

/// `|| mean(fake) - mean(real) ||_1` over feature rows.
pub fn feature_matching_loss(fake_features: &Matrix, real_features: &Matrix) -> Result<f64> {
    check_features(fake_features, real_features)?;
    Ok((mean_rows(fake_features) - mean_rows(real_features)).mapv(f64::abs).sum())
}

/// Gradient of [`feature_matching_loss`] with respect to each fake row.
pub fn feature_matching_grad(fake_features: &Matrix, real_features: &Matrix) -> Result<Matrix> {
    check_features(fake_features, real_features)?;
    let n = fake_features.nrows() as f64;
    let sign = (mean_rows(fake_features) - mean_rows(real_features)).mapv(|d| d.signum() * (d != 0.0) as u8 as f64 / n);
    Ok(Matrix::from_shape_fn(fake_features.raw_dim(), |(_, c)| sign[c]))
}

fn check_features(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyBatch("feature matching"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: b.ncols(), context: "feature width" });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalConfig {
    pub num_classes: usize,
    pub lambda_fm: f64,
    /// Classes (1-based) each generator produces.
    pub partition: Vec<Vec<usize>>,
}

impl ConditionalConfig {
    pub fn new(num_classes: usize, n_g: usize, lambda_fm: f64) -> Result<Self> {
        let cfg = Self { num_classes, lambda_fm, partition: class_partition(num_classes, n_g)? };
        cfg.validate(n_g)?;
        Ok(cfg)
    }

    pub fn validate(&self, n_g: usize) -> Result<()> {
        if !(self.lambda_fm >= 0.0 && self.lambda_fm.is_finite()) {
            return Err(Error::Config("lambda_fm must be finite and non-negative".into()));
        }
        if self.partition != class_partition(self.num_classes, n_g)? {
            return Err(Error::Config("class partition does not follow the assignment rule".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalRecord {
    pub iteration: usize,
    /// Critic hinge loss averaged over critics and rounds.
    pub d_loss: f64,
    pub g_hinge: f64,
    pub g_feature_matching: f64,
    /// `g_hinge + lambda_fm * g_feature_matching`
    pub g_loss: f64,
    pub flagged: bool,
}

/// Fakes for one round: per generator, its target classes, samples and
/// trace.
struct ConditionalFakes {
    labels: Vec<Vec<usize>>,
    samples: Vec<Matrix>,
    traces: Vec<Trace>,
}

#[derive(Clone, Debug)]
pub struct ConditionalTrainer {
    pub model: MixtureModel,
    pub config: ConditionalConfig,
    train: TrainConfig,
    workers: Workers,
    gen_opts: Vec<AdamState>,
    disc_opts: Vec<AdamState>,
    data_rng: Rng,
    noise_rng: Rng,
    iteration: usize,
}

impl ConditionalTrainer {
    /// Generators take `noise_dim + K` inputs; critics output `K + 1`
    /// scores. Mixture weights stay uniform.
    pub fn new(model: MixtureModel, config: ConditionalConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        train.validate(model.n_discriminators())?;
        config.validate(model.n_generators())?;
        let k = config.num_classes;
        if model.noise_dim() <= k {
            return Err(Error::InvalidArgument("generator input must hold noise plus a one-hot class".into()));
        }
        if model.discriminators.iter().any(|d| d.output_dim() != k + 1 || d.layers().len() < 2) {
            return Err(Error::InvalidArgument(format!("critics need K+1 = {} outputs and a hidden layer", k + 1)));
        }
        Ok(Self {
            gen_opts: model.generators.iter().map(|g| AdamState::for_network(train.gen_adam, g)).collect(),
            disc_opts: model.discriminators.iter().map(|d| AdamState::for_network(train.disc_adam, d)).collect(),
            workers: Workers::new(train.workers),
            data_rng: rng::stream(seed, "data"),
            noise_rng: rng::stream(seed, "noise"),
            iteration: 0,
            model,
            config,
            train,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn noise_dim(&self) -> usize {
        self.model.noise_dim() - self.config.num_classes
    }

    /// Generator input rows `[z, onehot(y)]` for the given 1-based classes.
    pub fn conditioned_input(&self, labels: &[usize], rng: &mut Rng) -> Matrix {
        conditioned_input(self.noise_dim(), self.config.num_classes, labels, rng)
    }

    /// `n` samples of class `y` from generator `i` (0-based).
    pub fn sample_class(&self, i: usize, y: usize, n: usize, rng: &mut Rng) -> Result<Matrix> {
        if y == 0 || y > self.config.num_classes {
            return Err(Error::InvalidArgument(format!("class {y} out of range")));
        }
        self.model.generators[i].forward(&self.conditioned_input(&vec![y; n], rng))
    }

    /// `n` samples from generator `i` (0-based), each with a class drawn
    /// uniformly from the generator's assigned classes.
    pub fn sample_generator(&self, i: usize, n: usize, rng: &mut Rng) -> Result<Matrix> {
        let classes = self
            .config
            .partition
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("generator {i} out of range")))?;
        let labels: Vec<usize> = (0..n).map(|_| classes[rng.random_range(0..classes.len())]).collect();
        self.model.generators[i].forward(&self.conditioned_input(&labels, rng))
    }

    pub fn gen_optimizers(&self) -> &[AdamState] {
        &self.gen_opts
    }

    pub fn disc_optimizers(&self) -> &[AdamState] {
        &self.disc_opts
    }

    fn rows_per_generator(&self) -> usize {
        match self.train.routing {
            RoutingMode::Full => self.train.batch_size * self.model.n_discriminators(),
            RoutingMode::Split => self.train.batch_size,
        }
    }

    fn emit(&mut self) -> Result<ConditionalFakes> {
        let rows = self.rows_per_generator();
        let (noise_dim, k) = (self.noise_dim(), self.config.num_classes);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for classes in &self.config.partition {
            let y: Vec<usize> = (0..rows).map(|_| classes[self.noise_rng.random_range(0..classes.len())]).collect();
            inputs.push(conditioned_input(noise_dim, k, &y, &mut self.noise_rng));
            labels.push(y);
        }
        let model = &self.model;
        let traced = self
            .workers
            .map(inputs.len(), |i| model.generators[i].forward_traced(inputs[i].view()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (samples, traces) = traced.into_iter().unzip();
        Ok(ConditionalFakes { labels, samples, traces })
    }

    /// Rows routed to critic `j`: the concatenation over generators of part
    /// `j`, with target labels.
    fn routed(&self, fakes: &ConditionalFakes, j: usize) -> Result<(Matrix, Vec<usize>)> {
        let ranges = split_ranges(self.rows_per_generator(), self.model.n_discriminators())?;
        let r = ranges[j].clone();
        let parts: Vec<_> = fakes.samples.iter().map(|x| x.slice(s![r.clone(), ..])).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &parts).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let y = fakes.labels.iter().flat_map(|l| l[r.clone()].iter().copied()).collect();
        Ok((x, y))
    }

    fn hinge_batch(scores: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let n = scores.nrows() as f64;
        let mut cot = Array2::zeros(scores.raw_dim());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let (l, g) = multihinge_with_grad(scores.row(r), y)?;
            loss += l;
            for (c, v) in g.into_iter().enumerate() {
                cot[[r, c]] = v / n;
            }
        }
        Ok((loss / n, cot))
    }

    /// Generator loss pieces and the cotangent of the total loss with
    /// respect to each generator's output rows.
    fn generator_cotangents(&self, real: &Matrix, fakes: &ConditionalFakes) -> Result<(f64, f64, Vec<Matrix>)> {
        let n_d = self.model.n_discriminators() as f64;
        let ranges = split_ranges(self.rows_per_generator(), self.model.n_discriminators())?;
        let mut cots: Vec<Matrix> = fakes.samples.iter().map(|x| Matrix::zeros(x.raw_dim())).collect();
        let (mut hinge, mut fm) = (0.0, 0.0);
        for (j, d) in self.model.discriminators.iter().enumerate() {
            let (x, y) = self.routed(fakes, j)?;
            let (scores, trace) = d.forward_traced(x.view())?;
            let (h, mut out_cot) = Self::hinge_batch(&scores, &y)?;
            let real_feats = d.hidden_features(real)?;
            let f = feature_matching_loss(trace.features(), &real_feats)?;
            let mut feat_cot = feature_matching_grad(trace.features(), &real_feats)?;
            out_cot.mapv_inplace(|v| v / n_d);
            feat_cot.mapv_inplace(|v| v * self.config.lambda_fm / n_d);
            let (_, input_cot) = d.backward(&trace, &out_cot, Some(&feat_cot))?;
            let m = ranges[j].len();
            for (i, cot) in cots.iter_mut().enumerate() {
                cot.slice_mut(s![ranges[j].clone(), ..]).scaled_add(1.0, &input_cot.slice(s![i * m..(i + 1) * m, ..]));
            }
            hinge += h / n_d;
            fm += f / n_d;
        }
        Ok((hinge, fm, cots))
    }

    fn generator_step(&mut self, real: &Matrix, fakes: &ConditionalFakes) -> Result<(f64, f64, bool)> {
        let (hinge, fm, cots) = self.generator_cotangents(real, fakes)?;
        let mut flagged = false;
        for i in 0..self.model.n_generators() {
            let (grads, _) = self.model.generators[i].backward(&fakes.traces[i], &cots[i], None)?;
            flagged |= rejected(self.gen_opts[i].step_network(&mut self.model.generators[i], &grads))?;
        }
        Ok((hinge, fm, flagged))
    }

    fn critic_step(&mut self, real: &Matrix, real_labels: &[usize], fakes: &ConditionalFakes) -> Result<(f64, bool)> {
        let n_d = self.model.n_discriminators();
        let routed = (0..n_d).map(|j| self.routed(fakes, j)).collect::<Result<Vec<_>>>()?;
        let model = &self.model;
        let results = self.workers.map(n_d, |j| -> Result<_> {
            let d = &model.discriminators[j];
            let (lr, cot_r) = Self::hinge_batch(&d.forward(real)?, real_labels)?;
            let (x, _) = &routed[j];
            let (lf, cot_f) = Self::hinge_batch(&d.forward(x)?, &vec![0; x.nrows()])?;
            let mut grads = d.param_grads(real, &cot_r)?;
            grads.add_scaled(&d.param_grads(x, &cot_f)?, 1.0)?;
            Ok((lr + lf, grads))
        });
        let mut loss = 0.0;
        let mut flagged = false;
        for (j, r) in results.into_iter().enumerate() {
            let (l, grads) = r?;
            loss += l / n_d as f64;
            flagged |= rejected(self.disc_opts[j].step_network(&mut self.model.discriminators[j], &grads))?;
        }
        Ok((loss, flagged))
    }

    /// One generator update followed by `critic_steps` critic updates; the
    /// first critic round reuses the generator round's batches.
    pub fn train_iteration(&mut self, data: &RealData) -> Result<ConditionalRecord> {
        if data.spec().num_classes() != Some(self.config.num_classes) {
            return Err(Error::InvalidArgument("conditional training needs a labeled dataset with K classes".into()));
        }
        let mut flagged = false;
        let (mut d_loss, mut g_hinge, mut g_fm) = (0.0, 0.0, 0.0);
        for round in 0..self.train.critic_steps {
            let real = data.sample(self.train.batch_size, &mut self.data_rng)?;
            let labels = real.labels.expect("labeled dataset");
            let fakes = self.emit()?;
            if round == 0 {
                let (h, f, fl) = self.generator_step(&real.x, &fakes)?;
                g_hinge = h;
                g_fm = f;
                flagged |= fl;
            }
            let (l, fl) = self.critic_step(&real.x, &labels, &fakes)?;
            d_loss += l / self.train.critic_steps as f64;
            flagged |= fl;
        }
        self.iteration += 1;
        Ok(ConditionalRecord {
            iteration: self.iteration,
            d_loss,
            g_hinge,
            g_feature_matching: g_fm,
            g_loss: g_hinge + self.config.lambda_fm * g_fm,
            flagged,
        })
    }

    /// Fraction of generated samples whose nearest component is their
    /// target class, over `n` samples per generator.
    pub fn class_accuracy(&self, data: &RealData, n: usize, rng: &mut Rng) -> Result<f64> {
        let mut hits = 0;
        let mut total = 0;
        for (i, classes) in self.config.partition.iter().enumerate() {
            let y: Vec<usize> = (0..n).map(|_| classes[rng.random_range(0..classes.len())]).collect();
            let x = self.model.generators[i].forward(&self.conditioned_input(&y, rng))?;
            for (row, &target) in x.outer_iter().zip(&y) {
                hits += (data.component_label(row.as_slice().expect("contiguous"))? == target) as usize;
                total += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    }
}

fn conditioned_input(noise_dim: usize, k: usize, labels: &[usize], rng: &mut Rng) -> Matrix {
    let z = sample_standard_normal(labels.len(), noise_dim, rng);
    let mut x = Matrix::zeros((labels.len(), noise_dim + k));
    x.slice_mut(s![.., ..noise_dim]).assign(&z);
    for (r, &y) in labels.iter().enumerate() {
        x[[r, noise_dim + y - 1]] = 1.0;
    }
    x
}

fn rejected(r: Result<()>) -> Result<bool> {
    match r {
        Ok(()) => Ok(false),
        Err(Error::NonFinite(_)) => Ok(true),
        Err(e) => Err(e),
    }
}
