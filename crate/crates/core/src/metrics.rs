//! Evaluation metrics: Fréchet distance on moment summaries, an independently
//! trained critic with Lipschitz-normalized gap, the Judge classifier and the
//! total-variation lower bound its accuracy implies.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Axis;
use rand::Rng as _;

use crate::data::RealData;
use crate::error::{Error, Result};
use crate::net::{GradientSet, Matrix, Network, NetworkSpec, Vector};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, Rng};

/// Eigenvalues below this (after symmetrization) mark an input as not PSD.
pub const PSD_TOLERANCE: f64 = 1e-6;

pub const PAPER_FD_SAMPLES: usize = 50_000;
pub const PAPER_EVAL_SAMPLES: usize = 25_600;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentStats {
    pub mean: Vector,
    pub covariance: Matrix,
}

impl MomentStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self) -> Result<()> {
        let d = self.mean.len();
        if self.covariance.dim() != (d, d) {
            return Err(Error::ShapeMismatch(format!(
                "covariance {:?} for mean of length {d}",
                self.covariance.dim()
            )));
        }
        Ok(())
    }
}

/// Sample mean and `1/(n-1)` covariance, symmetrized.
pub fn empirical_moments(samples: &Matrix) -> Result<MomentStats> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("moments need n >= 2 samples, got {n}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = samples - &mean;
    let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
    let sym = (&cov + &cov.t()) * 0.5;
    cov.assign(&sym);
    Ok(MomentStats { mean, covariance: cov })
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn symmetric_eigen(m: &Matrix) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + &m.t()) * 0.5;
    SymmetricEigen::new(to_nalgebra(&sym))
}

/// Principal square root of a symmetric PSD matrix by eigendecomposition,
/// clamping tiny negative eigenvalues to zero.
pub fn sqrtm_psd(m: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eigen(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOLERANCE {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(from_nalgebra(&(v * DMatrix::from_diagonal(&roots) * v.transpose())))
}

/// `||m1 - m2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2})`.
///
/// `tr (C1 C2)^{1/2}` is evaluated as `tr (C1^{1/2} C2 C1^{1/2})^{1/2}`, which
/// is symmetric PSD and shares the eigenvalues of `C1 C2`.
pub fn frechet_distance(a: &MomentStats, b: &MomentStats) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
            context: "moment dimension",
        });
    }
    let min_b = symmetric_eigen(&b.covariance)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_b < -PSD_TOLERANCE {
        return Err(Error::NotPsd(min_b));
    }
    let root_a = sqrtm_psd(&a.covariance)?;
    let inner = root_a.dot(&b.covariance).dot(&root_a);
    let eig = symmetric_eigen(&inner);
    let min_inner = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_inner < -PSD_TOLERANCE {
        return Err(Error::NotPsd(min_inner));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = (&a.mean - &b.mean).mapv(|v| v * v).sum();
    let fd = mean_term + a.covariance.diag().sum() + b.covariance.diag().sum() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

/// A stream of batches with its own randomness.
pub trait BatchSampler {
    fn dim(&self) -> usize;
    fn sample(&mut self, n: usize) -> Result<Matrix>;
}

/// Real data. `fresh = true` ignores any finite pool.
pub struct RealSampler<'a> {
    data: &'a RealData,
    rng: Rng,
    fresh: bool,
}

impl<'a> RealSampler<'a> {
    pub fn training(data: &'a RealData, rng: Rng) -> Self {
        Self { data, rng, fresh: false }
    }

    pub fn fresh(data: &'a RealData, rng: Rng) -> Self {
        Self { data, rng, fresh: true }
    }
}

impl BatchSampler for RealSampler<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn sample(&mut self, n: usize) -> Result<Matrix> {
        let b = if self.fresh {
            self.data.sample_fresh(n, &mut self.rng)?
        } else {
            self.data.sample(n, &mut self.rng)?
        };
        Ok(b.x)
    }
}

/// Adapter for closures `(n, rng) -> batch`.
pub struct FnSampler<F> {
    dim: usize,
    rng: Rng,
    f: F,
}

impl<F: FnMut(usize, &mut Rng) -> Matrix> FnSampler<F> {
    pub fn new(dim: usize, seed: u64, f: F) -> Self {
        Self { dim, rng: rng::from_seed(seed), f }
    }
}

impl<F: FnMut(usize, &mut Rng) -> Matrix> BatchSampler for FnSampler<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&mut self, n: usize) -> Result<Matrix> {
        Ok((self.f)(n, &mut self.rng))
    }
}

/// Training setup shared by the independent critic and the Judge.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxTrainConfig {
    pub net: NetworkSpec,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Only used by the critic.
    pub lambda_gp: f64,
    /// Seeds interpolation coefficients.
    pub seed: u64,
}

fn check_samplers(cfg: &AuxTrainConfig, real: &dyn BatchSampler, fake: &dyn BatchSampler) -> Result<()> {
    if real.dim() != fake.dim() || real.dim() != cfg.net.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.net.input_dim,
            got: if real.dim() != cfg.net.input_dim { real.dim() } else { fake.dim() },
            context: "sampler dim vs network input",
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::EmptyBatch("auxiliary training"));
    }
    Ok(())
}

/// Row-wise convex combinations `eps * real + (1 - eps) * fake`.
pub fn interpolate(real: &Matrix, fake: &Matrix, eps: &[f64]) -> Result<Matrix> {
    if real.dim() != fake.dim() || eps.len() != real.nrows() {
        return Err(Error::ShapeMismatch("interpolation inputs differ in shape".into()));
    }
    let mut out = fake.clone();
    for ((mut o, r), &e) in out.outer_iter_mut().zip(real.outer_iter()).zip(eps) {
        o.zip_mut_with(&r, |f, &r| *f = e * r + (1.0 - e) * *f);
    }
    Ok(out)
}

pub fn uniform_eps(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// WGAN-GP critic loss `E[D(fake)] - E[D(real)] + lambda * GP` and its
/// parameter gradient.
pub fn critic_loss_and_grads(
    critic: &Network,
    real: &Matrix,
    fake: &Matrix,
    eps: &[f64],
    lambda_gp: f64,
) -> Result<(f64, GradientSet)> {
    let (nr, nf) = (real.nrows(), fake.nrows());
    if nr == 0 || nf == 0 {
        return Err(Error::EmptyBatch("critic loss"));
    }
    let out_r = critic.forward(real)?;
    let out_f = critic.forward(fake)?;
    let mut grads = critic.param_grads(real, &Matrix::from_elem((nr, 1), -1.0 / nr as f64))?;
    grads.add_scaled(&critic.param_grads(fake, &Matrix::from_elem((nf, 1), 1.0 / nf as f64))?, 1.0)?;
    let mut loss = out_f.mean().expect("non-empty") - out_r.mean().expect("non-empty");
    if lambda_gp > 0.0 {
        let x_hat = interpolate(real, fake, eps)?;
        let (gp, gp_grads) = critic.gradient_penalty_with_grads(&x_hat, lambda_gp)?;
        loss += gp;
        grads.add_scaled(&gp_grads, 1.0)?;
    }
    Ok((loss, grads))
}

/// Trains a fresh critic with the WGAN-GP objective against frozen samplers.
pub fn train_independent_critic(
    real: &mut dyn BatchSampler,
    fake: &mut dyn BatchSampler,
    cfg: &AuxTrainConfig,
) -> Result<Network> {
    check_samplers(cfg, real, fake)?;
    let mut critic = Network::glorot(&cfg.net)?;
    let mut opt = AdamState::for_network(cfg.adam, &critic);
    let mut rng = rng::from_seed(cfg.seed);
    for _ in 0..cfg.iterations {
        let r = real.sample(cfg.batch_size)?;
        let f = fake.sample(cfg.batch_size)?;
        let eps = uniform_eps(cfg.batch_size, &mut rng);
        let (loss, grads) = critic_loss_and_grads(&critic, &r, &f, &eps, cfg.lambda_gp)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        opt.step_network(&mut critic, &grads)?;
    }
    Ok(critic)
}

/// Trains `restarts` critics from different initializations and keeps the
/// one with the lowest critic loss on `eval_rows` held-out rows. In one
/// dimension a critic initialized with the wrong slope sign cannot cross the
/// penalty barrier at zero slope, so a single run can end in that basin.
pub fn train_best_critic(
    real: &mut dyn BatchSampler,
    fake: &mut dyn BatchSampler,
    cfg: &AuxTrainConfig,
    restarts: usize,
    eval_rows: usize,
) -> Result<Network> {
    if restarts == 0 || eval_rows == 0 {
        return Err(Error::InvalidArgument("need at least one restart and one held-out row".into()));
    }
    let mut best: Option<(f64, Network)> = None;
    for k in 0..restarts {
        let mut c = cfg.clone();
        if k > 0 {
            c.seed = rng::derive_seed(cfg.seed, &format!("restart/{k}"));
            c.net.init_seed = c.seed;
        }
        let critic = train_independent_critic(real, fake, &c)?;
        let r = real.sample(eval_rows)?;
        let f = fake.sample(eval_rows)?;
        let eps = uniform_eps(eval_rows, &mut rng::from_seed(rng::derive_seed(c.seed, "held-out")));
        let (loss, _) = critic_loss_and_grads(&critic, &r, &f, &eps, c.lambda_gp)?;
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, critic));
        }
    }
    Ok(best.expect("restarts >= 1").1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WassersteinEstimate {
    /// `max(0, gap) / k`
    pub estimate: f64,
    /// `k`: the largest input-gradient norm seen on interpolates.
    pub lipschitz: f64,
    /// `mean D(real) - mean D(fake)`
    pub raw_gap: f64,
}

/// Lipschitz-normalized critic gap over `n` samples from each side.
pub fn wasserstein_estimate(
    critic: &Network,
    real: &mut dyn BatchSampler,
    fake: &mut dyn BatchSampler,
    n: usize,
    rng: &mut Rng,
) -> Result<WassersteinEstimate> {
    if n == 0 {
        return Err(Error::EmptyBatch("wasserstein estimate"));
    }
    let r = real.sample(n)?;
    let f = fake.sample(n)?;
    let raw_gap = critic.forward(&r)?.mean().expect("n > 0") - critic.forward(&f)?.mean().expect("n > 0");
    let eps = uniform_eps(n, rng);
    let grads = critic.input_gradients(&interpolate(&r, &f, &eps)?)?;
    let lipschitz = grads
        .outer_iter()
        .map(|g| g.dot(&g).sqrt())
        .fold(0.0, f64::max);
    if lipschitz <= 1e-12 {
        return Err(Error::InvalidArgument(format!("critic Lipschitz estimate {lipschitz:e} too small")));
    }
    Ok(WassersteinEstimate { estimate: raw_gap.max(0.0) / lipschitz, lipschitz, raw_gap })
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// Logistic loss on balanced batches (real = 1) and its parameter gradient.
pub fn judge_loss_and_grads(judge: &Network, real: &Matrix, fake: &Matrix) -> Result<(f64, GradientSet)> {
    let (nr, nf) = (real.nrows(), fake.nrows());
    if nr == 0 || nf == 0 {
        return Err(Error::EmptyBatch("judge loss"));
    }
    let sr = judge.forward(real)?;
    let sf = judge.forward(fake)?;
    let loss = sr.iter().map(|&s| softplus(-s)).sum::<f64>() / nr as f64
        + sf.iter().map(|&s| softplus(s)).sum::<f64>() / nf as f64;
    let cot_r = sr.mapv(|s| (sigmoid(s) - 1.0) / nr as f64);
    let cot_f = sf.mapv(|s| sigmoid(s) / nf as f64);
    let mut grads = judge.param_grads(real, &cot_r)?;
    grads.add_scaled(&judge.param_grads(fake, &cot_f)?, 1.0)?;
    Ok((loss, grads))
}

/// Trains a real-vs-fake classifier with the logistic loss.
pub fn train_judge(
    real: &mut dyn BatchSampler,
    fake: &mut dyn BatchSampler,
    cfg: &AuxTrainConfig,
) -> Result<Network> {
    check_samplers(cfg, real, fake)?;
    let mut judge = Network::glorot(&cfg.net)?;
    let mut opt = AdamState::for_network(cfg.adam, &judge);
    for _ in 0..cfg.iterations {
        let r = real.sample(cfg.batch_size)?;
        let f = fake.sample(cfg.batch_size)?;
        let (loss, grads) = judge_loss_and_grads(&judge, &r, &f)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("judge loss"));
        }
        opt.step_network(&mut judge, &grads)?;
    }
    Ok(judge)
}

/// Fraction of correct decisions when predicting "real" for scores above
/// `threshold`.
pub fn accuracy_from_scores(real_scores: &[f64], fake_scores: &[f64], threshold: f64) -> f64 {
    let correct = real_scores.iter().filter(|&&s| s > threshold).count()
        + fake_scores.iter().filter(|&&s| s <= threshold).count();
    correct as f64 / (real_scores.len() + fake_scores.len()) as f64
}

/// Accuracy on `n` real and `n` fake samples; a logit above 0 (probability
/// above 0.5) means "real".
pub fn judge_accuracy(
    judge: &Network,
    real: &mut dyn BatchSampler,
    fake: &mut dyn BatchSampler,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyBatch("judge accuracy"));
    }
    let sr = judge.forward(&real.sample(n)?)?;
    let sf = judge.forward(&fake.sample(n)?)?;
    Ok(accuracy_from_scores(sr.as_slice().expect("contiguous"), sf.as_slice().expect("contiguous"), 0.0))
}

/// `max(0, 2 * acc - 1)`, a lower bound on the total variation distance.
pub fn tv_lower_bound(acc: f64) -> f64 {
    (2.0 * acc - 1.0).max(0.0)
}

/// Two probability vectors on a common finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistributionPair {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl DiscreteDistributionPair {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != q.len() || p.is_empty() {
            return Err(Error::InvalidArgument("distributions need a common non-empty support".into()));
        }
        for v in [&p, &q] {
            if v.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument("not a probability vector".into()));
            }
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn total_variation(&self) -> f64 {
        0.5 * self.p.iter().zip(&self.q).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Expected accuracy of a deterministic classifier under equal priors;
    /// `predict_p[x]` means the rule answers "drawn from p" at point `x`.
    pub fn classifier_accuracy(&self, predict_p: &[bool]) -> f64 {
        self.p
            .iter()
            .zip(&self.q)
            .zip(predict_p)
            .map(|((p, q), &yes)| 0.5 * if yes { *p } else { *q })
            .sum()
    }

    /// The optimal rule: answer "p" wherever `p >= q`.
    pub fn optimal_rule(&self) -> Vec<bool> {
        self.p.iter().zip(&self.q).map(|(p, q)| p >= q).collect()
    }
}

/// Total variation and optimal accuracy by enumeration, checking
/// `opt_acc = 1/2 + tv/2`.
pub fn brute_force_tv_and_optacc(pair: &DiscreteDistributionPair) -> Result<(f64, f64)> {
    let tv = pair.total_variation();
    let opt_acc = 0.5 * pair.p.iter().zip(&pair.q).map(|(a, b)| a.max(*b)).sum::<f64>();
    let by_rule = pair.classifier_accuracy(&pair.optimal_rule());
    if (opt_acc - (0.5 + 0.5 * tv)).abs() > 1e-12 || (by_rule - opt_acc).abs() > 1e-12 {
        return Err(Error::OracleViolation(format!(
            "optimal accuracy {opt_acc} (rule {by_rule}) != 1/2 + tv/2 with tv = {tv}"
        )));
    }
    Ok((tv, opt_acc))
}

/// Metrics from the final evaluation of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frechet_distance: f64,
    /// Gap of the GAN's own discriminator mixture on fresh samples.
    pub critic_gap: f64,
    pub wasserstein_estimate: f64,
    pub lipschitz_estimate: f64,
    pub raw_independent_gap: f64,
    pub judge_accuracy: f64,
    pub tv_lower_bound: f64,
    /// Judge accuracy / Wasserstein estimate against the finite training
    /// pool, when the run used one.
    pub train_judge_accuracy: Option<f64>,
    pub train_wasserstein_estimate: Option<f64>,
    pub fd_samples: usize,
    pub eval_samples: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frechet_distance,critic_gap,wasserstein_estimate,lipschitz_estimate,\
raw_independent_gap,judge_accuracy,tv_lower_bound,train_judge_accuracy,train_wasserstein_estimate,\
fd_samples,eval_samples,k_estimator";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},max_interpolate_grad_norm",
            self.frechet_distance,
            self.critic_gap,
            self.wasserstein_estimate,
            self.lipschitz_estimate,
            self.raw_independent_gap,
            self.judge_accuracy,
            self.tv_lower_bound,
            opt(self.train_judge_accuracy),
            opt(self.train_wasserstein_estimate),
            self.fd_samples,
            self.eval_samples
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("report row has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let count = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("{s}: {e}")));
        Ok(Self {
            frechet_distance: num(f[0])?,
            critic_gap: num(f[1])?,
            wasserstein_estimate: num(f[2])?,
            lipschitz_estimate: num(f[3])?,
            raw_independent_gap: num(f[4])?,
            judge_accuracy: num(f[5])?,
            tv_lower_bound: num(f[6])?,
            train_judge_accuracy: opt(f[7])?,
            train_wasserstein_estimate: opt(f[8])?,
            fd_samples: count(f[9])?,
            eval_samples: count(f[10])?,
        })
    }
}
