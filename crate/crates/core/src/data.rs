//! Synthetic ground-truth distributions.
//!
//! Two families: an equal-prior mixture of isotropic Gaussians centered on
//! the first `k` standard basis vectors, and the pushforward of standard
//! Gaussian noise through a frozen, Glorot-initialized network `R`. Both have
//! analytic first and second moments (the latter only when `R` is affine).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Axis;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::MomentStats;
use crate::net::{Matrix, Network, NetworkSpec, Vector};
use crate::rng::{self, Rng};

pub const PAPER_DIM: usize = 1024;
pub const PAPER_COMPONENT_VARIANCE: f64 = 0.09;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureSpec {
    pub dim: usize,
    pub num_components: usize,
    pub component_variance: f64,
}

impl GaussianMixtureSpec {
    pub fn new(dim: usize, num_components: usize) -> Self {
        Self { dim, num_components, component_variance: PAPER_COMPONENT_VARIANCE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_components == 0 || self.num_components > self.dim {
            return Err(Error::InvalidArgument(format!(
                "gaussian mixture needs 1 <= k <= dim, got k={} dim={}",
                self.num_components, self.dim
            )));
        }
        if !(self.component_variance >= 0.0 && self.component_variance.is_finite()) {
            return Err(Error::InvalidArgument("component variance must be >= 0".into()));
        }
        Ok(())
    }

    /// Mean `(1/k) sum e_i` and covariance `var*I + (1/k) sum (e_i - m)(e_i - m)^T`.
    pub fn true_moments(&self) -> MomentStats {
        let (d, k) = (self.dim, self.num_components);
        let kf = k as f64;
        let mut mean = Vector::zeros(d);
        mean.slice_mut(ndarray::s![..k]).fill(1.0 / kf);
        let mut cov = Matrix::eye(d) * self.component_variance;
        for i in 0..k {
            for j in 0..k {
                let delta = if i == j { 1.0 } else { 0.0 };
                cov[[i, j]] += delta / kf - 1.0 / (kf * kf);
            }
        }
        MomentStats { mean, covariance: cov }
    }

    /// Index (1-based) of the nearest center; ties go to the smallest index.
    ///
    /// `||x - e_i||^2 = ||x||^2 - 2 x_i + 1`, so the nearest center is the
    /// largest coordinate among the first `k`.
    pub fn component_label(&self, x: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..self.num_components {
            if x[i] > x[best] {
                best = i;
            }
        }
        best + 1
    }

    fn sample_into(&self, n: usize, rng: &mut Rng) -> LabeledBatch {
        let sd = self.component_variance.sqrt();
        let mut x = Matrix::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for mut row in x.outer_iter_mut() {
            let c = rng.random_range(0..self.num_components);
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = sd * z;
            }
            row[c] += 1.0;
            labels.push(c + 1);
        }
        LabeledBatch { x, labels: Some(labels) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomNetTargetSpec {
    /// Architecture and seed of the frozen target network.
    pub net: NetworkSpec,
}

impl RandomNetTargetSpec {
    /// Affine `dim -> dim` target.
    pub fn affine(dim: usize, seed: u64) -> Self {
        Self { net: NetworkSpec::new(dim, dim, 2, 0).with_seed(seed) }
    }

    pub fn build(&self) -> Result<Network> {
        Network::glorot(&self.net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    GaussianMixture(GaussianMixtureSpec),
    RandomNet(RandomNetTargetSpec),
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianMixture(g) => g.dim,
            Self::RandomNet(r) => r.net.output_dim,
        }
    }

    /// Number of labeled classes, if the dataset has any.
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Self::GaussianMixture(g) => Some(g.num_components),
            Self::RandomNet(_) => None,
        }
    }

    /// Short name used in run directories.
    pub fn short_name(&self) -> String {
        match self {
            Self::GaussianMixture(g) => format!("gauss{}", g.num_components),
            Self::RandomNet(r) => format!("randnet{}", r.net.num_layers),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::GaussianMixture(g) => g.validate(),
            Self::RandomNet(r) => r.net.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingSetMode {
    Infinite,
    Finite { size: usize, seed: u64 },
}

/// Standard Gaussian input noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl NoiseSpec {
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Matrix {
        sample_standard_normal(n, self.dim, rng)
    }
}

pub fn sample_standard_normal(n: usize, dim: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_shape_simple_fn((n, dim), || rng.sample(StandardNormal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    /// Generating component (1-based) when the dataset is labeled.
    pub labels: Option<Vec<usize>>,
}

/// A ready-to-sample real-data source: the dataset, its frozen target
/// network if any, and the finite pool if any.
#[derive(Clone, Debug)]
pub struct RealData {
    spec: DatasetSpec,
    noise: NoiseSpec,
    target: Option<Network>,
    pool: Option<LabeledBatch>,
}

impl RealData {
    pub fn new(spec: DatasetSpec, mode: TrainingSetMode, noise: NoiseSpec) -> Result<Self> {
        spec.validate()?;
        let target = match &spec {
            DatasetSpec::RandomNet(r) => {
                if r.net.input_dim != noise.dim {
                    return Err(Error::DimensionMismatch {
                        expected: noise.dim,
                        got: r.net.input_dim,
                        context: "target network input vs noise dim",
                    });
                }
                Some(r.build()?)
            }
            DatasetSpec::GaussianMixture(_) => None,
        };
        let mut data = Self { spec, noise, target, pool: None };
        if let TrainingSetMode::Finite { size, seed } = mode {
            if size == 0 {
                return Err(Error::InvalidArgument("finite training set needs size >= 1".into()));
            }
            let mut pool_rng = rng::stream(seed, "pool");
            data.pool = Some(data.sample_fresh(size, &mut pool_rng)?);
        }
        Ok(data)
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn target(&self) -> Option<&Network> {
        self.target.as_ref()
    }

    pub fn pool(&self) -> Option<&LabeledBatch> {
        self.pool.as_ref()
    }

    /// Training batch: fresh draws in infinite mode, uniform draws with
    /// replacement from the pool in finite mode.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<LabeledBatch> {
        match &self.pool {
            None => self.sample_fresh(n, rng),
            Some(pool) => {
                if n == 0 {
                    return Err(Error::EmptyBatch("real sample"));
                }
                let size = pool.x.nrows();
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..size)).collect();
                Ok(LabeledBatch {
                    x: pool.x.select(Axis(0), &idx),
                    labels: pool.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
                })
            }
        }
    }

    /// Fresh draws from the underlying distribution, ignoring any pool.
    pub fn sample_fresh(&self, n: usize, rng: &mut Rng) -> Result<LabeledBatch> {
        if n == 0 {
            return Err(Error::EmptyBatch("real sample"));
        }
        match (&self.spec, &self.target) {
            (DatasetSpec::GaussianMixture(g), _) => Ok(g.sample_into(n, rng)),
            (DatasetSpec::RandomNet(_), Some(net)) => {
                let z = self.noise.sample(n, rng);
                Ok(LabeledBatch { x: net.forward(&z)?, labels: None })
            }
            (DatasetSpec::RandomNet(_), None) => unreachable!("target built in constructor"),
        }
    }

    /// Analytic moments. Available for Gaussian mixtures and affine targets
    /// (mean `b`, covariance `W W^T`).
    pub fn true_moments(&self) -> Option<MomentStats> {
        match (&self.spec, &self.target) {
            (DatasetSpec::GaussianMixture(g), _) => Some(g.true_moments()),
            (DatasetSpec::RandomNet(_), Some(net)) if net.layers().len() == 1 => {
                let l = &net.layers()[0];
                Some(MomentStats { mean: l.bias.clone(), covariance: l.weight.dot(&l.weight.t()) })
            }
            _ => None,
        }
    }

    pub fn component_label(&self, x: &[f64]) -> Result<usize> {
        match &self.spec {
            DatasetSpec::GaussianMixture(g) => Ok(g.component_label(x)),
            DatasetSpec::RandomNet(_) => {
                Err(Error::InvalidArgument("random-network dataset has no components".into()))
            }
        }
    }

    /// Writes the finite pool as CSV (`label,x1,...,xd`).
    pub fn write_pool_csv(&self, path: &Path) -> Result<()> {
        let pool = self
            .pool
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no finite pool".into()))?;
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (1..=pool.x.ncols()).map(|i| format!("x{i}")).collect();
        writeln!(w, "label,{}", header.join(","))?;
        for (r, row) in pool.x.outer_iter().enumerate() {
            let label = pool.labels.as_ref().map(|l| l[r].to_string()).unwrap_or_default();
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{label},{}", vals.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::empirical_moments;

    fn frob_rel(a: &Matrix, b: &Matrix) -> f64 {
        let diff: f64 = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn gm(dim: usize, k: usize) -> RealData {
        RealData::new(
            DatasetSpec::GaussianMixture(GaussianMixtureSpec::new(dim, k)),
            TrainingSetMode::Infinite,
            NoiseSpec { dim },
        )
        .unwrap()
    }

    #[test]
    fn degenerate_single_component_is_a_point_mass() {
        let spec = GaussianMixtureSpec { dim: 5, num_components: 1, component_variance: 0.0 };
        let data = RealData::new(
            DatasetSpec::GaussianMixture(spec),
            TrainingSetMode::Infinite,
            NoiseSpec { dim: 5 },
        )
        .unwrap();
        let b = data.sample(10, &mut rng::from_seed(1)).unwrap();
        for row in b.x.outer_iter() {
            assert_eq!(row.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        assert!(b.labels.unwrap().iter().all(|&l| l == 1));
    }

    #[test]
    fn mixture_mean_within_three_standard_errors() {
        let data = gm(1024, 3);
        let n = 50_000;
        let b = data.sample(n, &mut rng::from_seed(2)).unwrap();
        let mean = b.x.mean_axis(Axis(0)).unwrap();
        let truth = data.true_moments().unwrap();
        // 3 SE on the center coordinates; over all 1024 coordinates a 3 SE
        // excursion is expected, so the rest get a Bonferroni-style 4.5 SE.
        for j in 0..1024 {
            let se = (truth.covariance[[j, j]] / n as f64).sqrt();
            let limit = if j < 3 { 3.0 } else { 4.5 };
            assert!((mean[j] - truth.mean[j]).abs() < limit * se, "coord {j}");
        }
        // Aggregate check: the normalized squared error is chi-square(1024)-like.
        let z2: f64 = (0..1024)
            .map(|j| (mean[j] - truth.mean[j]).powi(2) / (truth.covariance[[j, j]] / n as f64))
            .sum();
        assert!(z2 < 1024.0 + 4.0 * (2.0f64 * 1024.0).sqrt(), "chi2 {z2}");
    }

    #[test]
    fn finite_pool_batches_stay_in_pool() {
        let data = RealData::new(
            DatasetSpec::GaussianMixture(GaussianMixtureSpec::new(8, 3)),
            TrainingSetMode::Finite { size: 256, seed: 4 },
            NoiseSpec { dim: 8 },
        )
        .unwrap();
        let pool = data.pool().unwrap();
        assert_eq!(pool.x.nrows(), 256);
        let mut r = rng::from_seed(9);
        for _ in 0..4 {
            let b = data.sample(128, &mut r).unwrap();
            for row in b.x.outer_iter() {
                assert!(pool.x.outer_iter().any(|p| p == row));
            }
        }
        assert!(RealData::new(
            DatasetSpec::GaussianMixture(GaussianMixtureSpec::new(8, 3)),
            TrainingSetMode::Finite { size: 0, seed: 4 },
            NoiseSpec { dim: 8 },
        )
        .is_err());
    }

    #[test]
    fn identity_target_gives_standard_gaussian() {
        let spec = RandomNetTargetSpec::affine(4, 0);
        let mut data = RealData::new(
            DatasetSpec::RandomNet(spec),
            TrainingSetMode::Infinite,
            NoiseSpec { dim: 4 },
        )
        .unwrap();
        let t = data.target.as_mut().unwrap();
        t.layers_mut()[0].weight = Matrix::eye(4);
        let b = data.sample(50_000, &mut rng::from_seed(3)).unwrap();
        let m = empirical_moments(&b.x).unwrap();
        assert!(frob_rel(&m.covariance, &Matrix::eye(4)) < 0.03);
    }

    #[test]
    fn affine_target_covariance_matches_pushforward() {
        let data = RealData::new(
            DatasetSpec::RandomNet(RandomNetTargetSpec::affine(16, 77)),
            TrainingSetMode::Infinite,
            NoiseSpec { dim: 16 },
        )
        .unwrap();
        let b = data.sample(50_000, &mut rng::from_seed(5)).unwrap();
        let m = empirical_moments(&b.x).unwrap();
        let truth = data.true_moments().unwrap();
        assert!(frob_rel(&m.covariance, &truth.covariance) < 0.05);
        let again = RealData::new(
            DatasetSpec::RandomNet(RandomNetTargetSpec::affine(16, 77)),
            TrainingSetMode::Infinite,
            NoiseSpec { dim: 16 },
        )
        .unwrap();
        assert_eq!(again.target(), data.target());
    }

    #[test]
    fn true_moments_small_cases() {
        let one = GaussianMixtureSpec::new(3, 1).true_moments();
        assert_eq!(one.mean.to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one.covariance, Matrix::eye(3) * 0.09);

        let two = GaussianMixtureSpec::new(2, 2).true_moments();
        assert_eq!(two.mean.to_vec(), vec![0.5, 0.5]);
        let expected = ndarray::array![[0.34, -0.25], [-0.25, 0.34]];
        assert!((two.covariance - expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn true_moments_match_large_sample() {
        let data = gm(16, 3);
        let b = data.sample(200_000, &mut rng::from_seed(6)).unwrap();
        let m = empirical_moments(&b.x).unwrap();
        let truth = data.true_moments().unwrap();
        assert!(frob_rel(&m.covariance, &truth.covariance) < 0.02);
        let mean_err: f64 = (&m.mean - &truth.mean).mapv(|v| v * v).sum().sqrt();
        assert!(mean_err / truth.mean.mapv(|v| v * v).sum().sqrt() < 0.02);
    }

    #[test]
    fn labels_by_nearest_center() {
        let g = GaussianMixtureSpec::new(4, 3);
        assert_eq!(g.component_label(&[0.0, 1.0, 0.0, 0.0]), 2);
        assert_eq!(g.component_label(&[0.0; 4]), 1);
        // The 4th coordinate is not a center.
        assert_eq!(g.component_label(&[0.1, 0.0, 0.2, 5.0]), 3);
    }

    #[test]
    fn labels_recover_generating_component() {
        let data = gm(64, 3);
        let b = data.sample(10_000, &mut rng::from_seed(7)).unwrap();
        let labels = b.labels.unwrap();
        let hits = b
            .x
            .outer_iter()
            .zip(&labels)
            .filter(|(row, &l)| data.component_label(row.as_slice().unwrap()).unwrap() == l)
            .count();
        // A point lands nearer center k than its own center with probability
        // Phi(-1 / sqrt(2 * 0.09)) ~ 0.0092; two rivals give an error rate of
        // at most 0.0184, plus four standard errors of slack.
        assert!(hits as f64 / 10_000.0 >= 1.0 - 0.0184 - 4.0 * (0.0184f64 * 0.9816 / 10_000.0).sqrt());
    }

    #[test]
    fn pool_csv_export() {
        let data = RealData::new(
            DatasetSpec::GaussianMixture(GaussianMixtureSpec::new(3, 2)),
            TrainingSetMode::Finite { size: 5, seed: 1 },
            NoiseSpec { dim: 3 },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.csv");
        data.write_pool_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("label,x1,x2,x3"));
        assert!(gm(3, 2).write_pool_csv(&dir.path().join("none.csv")).is_err());
    }
}
