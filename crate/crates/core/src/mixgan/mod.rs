//! Mixtures of generators and critics trained with WGAN-GP losses.
//!
//! A [`MixtureModel`] holds `n_G` generators and `n_D` scalar critics with
//! softmax-normalized weights `w` and `v`. The generator density is
//! `p_g = sum_i w_i p_gi` and the critic output is `D(x) = sum_j v_j D_j(x)`.
//! Losses inside the mixture use the Wasserstein instantiation
//! `L_D,real(d) = -d`, `L_D,fake(d) = d`, `L_G(d) = -d`, so a 1x1 mixture is
//! exactly WGAN-GP.

mod conditional;
mod schedule;
mod train;

use std::ops::Range;

use ndarray::{s, Axis};
use rand::Rng as _;

pub use conditional::{
    d_multihinge_loss, feature_matching_grad, feature_matching_loss, g_multihinge_loss, multihinge_with_grad,
    ConditionalConfig, ConditionalRecord, ConditionalTrainer,
};
pub use schedule::{class_partition, device_assignment, split_batches, split_ranges, Workers};
pub use train::{IterationRecord, RoutingMode, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::metrics::interpolate;
use crate::net::{GradientSet, Matrix, Network, NetworkSpec, Vector};
use crate::rng::{self, Rng};

/// Softmax of the log-weights.
pub fn mixture_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("no logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("mixture logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    let inner: f64 = weights.iter().zip(grad_weights).map(|(w, g)| w * g).sum();
    weights.iter().zip(grad_weights).map(|(w, g)| w * (g - inner)).collect()
}

/// `-(1/n) sum log w_i`, minimized at the uniform distribution.
pub fn entropy_regularizer(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("no weights".into()));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument("entropy regularizer needs positive weights".into()));
    }
    let n = weights.len() as f64;
    Ok(-weights.iter().map(|w| w.ln()).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    pub generators: Vec<Network>,
    pub discriminators: Vec<Network>,
    pub gen_logits: Vec<f64>,
    pub disc_logits: Vec<f64>,
}

impl MixtureModel {
    /// Uniform weights.
    pub fn new(generators: Vec<Network>, discriminators: Vec<Network>) -> Result<Self> {
        let model = Self {
            gen_logits: vec![0.0; generators.len()],
            disc_logits: vec![0.0; discriminators.len()],
            generators,
            discriminators,
        };
        model.validate()?;
        Ok(model)
    }

    /// Glorot-initialized mixture; network `k` of each role is seeded from
    /// the stream `init/G/k` or `init/D/k` under `root_seed`.
    pub fn init(gen_spec: &NetworkSpec, disc_spec: &NetworkSpec, n_g: usize, n_d: usize, root_seed: u64) -> Result<Self> {
        let gens = (1..=n_g)
            .map(|i| Network::glorot(&gen_spec.clone().with_seed(rng::derive_seed(root_seed, &format!("init/G/{i}")))))
            .collect::<Result<Vec<_>>>()?;
        let discs = (1..=n_d)
            .map(|j| Network::glorot(&disc_spec.clone().with_seed(rng::derive_seed(root_seed, &format!("init/D/{j}")))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(gens, discs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.generators.is_empty() || self.discriminators.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one generator and one critic".into()));
        }
        if self.gen_logits.len() != self.generators.len() || self.disc_logits.len() != self.discriminators.len() {
            return Err(Error::InvalidArgument("one logit per network".into()));
        }
        let g0 = &self.generators[0];
        if self
            .generators
            .iter()
            .any(|g| g.input_dim() != g0.input_dim() || g.output_dim() != g0.output_dim())
        {
            return Err(Error::InvalidArgument("generators must share input and output dims".into()));
        }
        if self.discriminators.iter().any(|d| d.input_dim() != g0.output_dim()) {
            return Err(Error::InvalidArgument("critic input dim must equal generator output dim".into()));
        }
        Ok(())
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn n_discriminators(&self) -> usize {
        self.discriminators.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.generators[0].input_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.generators[0].output_dim()
    }

    pub fn gen_weights(&self) -> Result<Vec<f64>> {
        mixture_weights(&self.gen_logits)
    }

    pub fn disc_weights(&self) -> Result<Vec<f64>> {
        mixture_weights(&self.disc_logits)
    }

    /// Weighted critic output `sum_j v_j D_j(x)` per row. Critics must be
    /// scalar.
    pub fn critic_output(&self, x: &Matrix) -> Result<Vector> {
        let v = self.disc_weights()?;
        let mut out = Vector::zeros(x.nrows());
        for (d, vj) in self.discriminators.iter().zip(v) {
            let y = d.forward(x)?;
            out.scaled_add(vj, &y.column(0));
        }
        Ok(out)
    }

    /// Draws `n` rows from `p_g`: a generator index per row from `w`, then
    /// `G_i(z)`. Returns the samples and the (0-based) generator of each row.
    pub fn mixture_sample(&self, n: usize, rng: &mut Rng) -> Result<(Matrix, Vec<usize>)> {
        let w = self.gen_weights()?;
        let picks: Vec<usize> = (0..n).map(|_| pick_index(&w, rng)).collect();
        let z = crate::data::sample_standard_normal(n, self.noise_dim(), rng);
        let mut out = Matrix::zeros((n, self.data_dim()));
        for (i, g) in self.generators.iter().enumerate() {
            let rows: Vec<usize> = picks.iter().enumerate().filter(|(_, &p)| p == i).map(|(r, _)| r).collect();
            if rows.is_empty() {
                continue;
            }
            let y = g.forward(&z.select(Axis(0), &rows))?;
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).assign(&y.row(k));
            }
        }
        Ok((out, picks))
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn pick_index(weights: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final partial sum.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// `sum_j v_j (mean D_j(real) - mean D_j(fake))`.
pub fn wgan_critic_gap(critics: &[Network], weights: &[f64], real: &Matrix, fake: &Matrix) -> Result<f64> {
    if real.nrows() == 0 || fake.nrows() == 0 {
        return Err(Error::EmptyBatch("critic gap"));
    }
    if real.ncols() != fake.ncols() {
        return Err(Error::DimensionMismatch {
            expected: real.ncols(),
            got: fake.ncols(),
            context: "real vs fake width",
        });
    }
    if critics.len() != weights.len() {
        return Err(Error::InvalidArgument("one weight per critic".into()));
    }
    let mut gap = 0.0;
    for (d, v) in critics.iter().zip(weights) {
        gap += v * (d.forward(real)?.mean().expect("non-empty") - d.forward(fake)?.mean().expect("non-empty"));
    }
    Ok(gap)
}

/// Fake samples of one training round, kept per generator together with the
/// row range of each generator's batch that is routed to each critic.
#[derive(Clone, Debug)]
pub struct FakeRouting {
    /// `noise[i]`: inputs of generator `i`.
    pub noise: Vec<Matrix>,
    /// `samples[i] = G_i(noise[i])`.
    pub samples: Vec<Matrix>,
    /// `ranges[i][j]`: rows of `samples[i]` that critic `j` receives.
    pub ranges: Vec<Vec<Range<usize>>>,
}

impl FakeRouting {
    /// `routed()[j][i]`: the batch generator `i` sends to critic `j`.
    pub fn routed(&self) -> Vec<Vec<Matrix>> {
        let n_d = self.ranges.first().map_or(0, |r| r.len());
        (0..n_d)
            .map(|j| {
                self.samples
                    .iter()
                    .zip(&self.ranges)
                    .map(|(x, r)| x.slice(s![r[j].clone(), ..]).to_owned())
                    .collect()
            })
            .collect()
    }

    pub fn total_rows(&self) -> usize {
        self.samples.iter().map(|x| x.nrows()).sum()
    }
}

/// Output of the mixture critic loss.
#[derive(Clone, Debug)]
pub struct DiscLoss {
    pub loss: f64,
    /// Gradient for every critic, already weighted by `v_j`.
    pub disc_grads: Vec<GradientSet>,
    pub logit_grads: Vec<f64>,
    /// `sum_j v_j (mean D_j(real) - sum_i w_i mean D_j(fake_i))`
    pub gap: f64,
}

/// Per-critic pieces of the critic loss.
struct CriticTerms {
    /// `sum_i w_i E[D_j(fake_ij)] - E[D_j(real)] + lambda * sum_i w_i GP_ij`
    objective: f64,
    gap: f64,
    grads: GradientSet,
}

fn paired_real_rows(real: &Matrix, offset: usize, m: usize) -> Matrix {
    let b = real.nrows();
    let idx: Vec<usize> = (0..m).map(|r| (offset + r) % b).collect();
    real.select(Axis(0), &idx)
}

#[allow(clippy::too_many_arguments)]
fn critic_terms(
    critic: &Network,
    j: usize,
    real: &Matrix,
    fakes: &[Matrix],
    eps: &[Vec<f64>],
    w: &[f64],
    lambda_gp: f64,
) -> Result<CriticTerms> {
    let nr = real.nrows();
    let mean_r = critic.forward(real)?.mean().expect("non-empty");
    let mut grads = critic.param_grads(real, &Matrix::from_elem((nr, 1), -1.0 / nr as f64))?;
    let mut fake_term = 0.0;
    let mut penalty = 0.0;
    for (i, fake) in fakes.iter().enumerate() {
        let m = fake.nrows();
        if m == 0 {
            return Err(Error::EmptyBatch("routed fake batch"));
        }
        let mean_f = critic.forward(fake)?.mean().expect("non-empty");
        fake_term += w[i] * mean_f;
        grads.add_scaled(&critic.param_grads(fake, &Matrix::from_elem((m, 1), w[i] / m as f64))?, 1.0)?;
        if lambda_gp > 0.0 {
            let partner = paired_real_rows(real, j * m, m);
            let x_hat = interpolate(&partner, fake, &eps[i])?;
            let (gp, gp_grads) = critic.gradient_penalty_with_grads(&x_hat, lambda_gp)?;
            penalty += w[i] * gp;
            grads.add_scaled(&gp_grads, w[i])?;
        }
    }
    Ok(CriticTerms { objective: fake_term - mean_r + penalty, gap: mean_r - fake_term, grads })
}

/// Mixture critic loss
/// `sum_j v_j [sum_i w_i E D_j(x_gi) - E D_j(x_r) + lambda sum_i w_i GP_ij] - (1/n_D) sum_j log v_j`
/// and gradients for every critic and the critic logits.
///
/// `routed[j][i]` is the batch generator `i` sends to critic `j`; `eps[j][i]`
/// holds one interpolation coefficient per row of it. Rows of a routed batch
/// are paired with real rows starting at `j * rows`.
pub fn discriminator_loss(
    model: &MixtureModel,
    real: &Matrix,
    routed: &[Vec<Matrix>],
    eps: &[Vec<Vec<f64>>],
    lambda_gp: f64,
    workers: &Workers,
) -> Result<DiscLoss> {
    let (n_g, n_d) = (model.n_generators(), model.n_discriminators());
    if routed.len() != n_d || routed.iter().any(|r| r.len() != n_g) {
        return Err(Error::InvalidArgument(format!(
            "expected {n_d} x {n_g} routed batches, got {} rows",
            routed.len()
        )));
    }
    if eps.len() != n_d || eps.iter().zip(routed).any(|(e, r)| e.len() != n_g || e.iter().zip(r).any(|(a, b)| a.len() != b.nrows())) {
        return Err(Error::InvalidArgument("interpolation coefficients do not match routing".into()));
    }
    if real.nrows() == 0 {
        return Err(Error::EmptyBatch("real batch"));
    }
    let w = model.gen_weights()?;
    let v = model.disc_weights()?;
    let terms = workers.map(n_d, |j| {
        critic_terms(&model.discriminators[j], j, real, &routed[j], &eps[j], &w, lambda_gp)
    });
    let terms = terms.into_iter().collect::<Result<Vec<_>>>()?;

    let entropy = entropy_regularizer(&v)?;
    let mut loss = entropy;
    let mut gap = 0.0;
    let mut grad_v = Vec::with_capacity(n_d);
    let mut disc_grads = Vec::with_capacity(n_d);
    for (t, vj) in terms.into_iter().zip(&v) {
        loss += vj * t.objective;
        gap += vj * t.gap;
        grad_v.push(t.objective - 1.0 / (n_d as f64 * vj));
        let mut g = t.grads;
        g.scale(*vj);
        disc_grads.push(g);
    }
    Ok(DiscLoss { loss, disc_grads, logit_grads: softmax_backward(&v, &grad_v), gap })
}

/// Output of the mixture generator loss.
#[derive(Clone, Debug)]
pub struct GenLoss {
    pub loss: f64,
    /// Gradient for every generator, already weighted.
    pub gen_grads: Vec<GradientSet>,
    pub logit_grads: Vec<f64>,
}

/// Mixture generator loss
/// `sum_j sum_i v_j w_i E[-D_j(G_i(z))] - (1/n_G) sum_i log w_i`
/// over the rows of `routing` (regenerated from its noise with the current
/// generators).
pub fn generator_loss(model: &MixtureModel, routing: &FakeRouting, workers: &Workers) -> Result<GenLoss> {
    let (n_g, n_d) = (model.n_generators(), model.n_discriminators());
    if routing.noise.len() != n_g || routing.ranges.len() != n_g || routing.ranges.iter().any(|r| r.len() != n_d) {
        return Err(Error::InvalidArgument("routing does not match mixture size".into()));
    }
    let w = model.gen_weights()?;
    let v = model.disc_weights()?;
    let per_gen = workers.map(n_g, |i| -> Result<(GradientSet, Vec<f64>)> {
        let g = &model.generators[i];
        let (x, trace) = g.forward_traced(routing.noise[i].view())?;
        let mut cot = Matrix::zeros(x.raw_dim());
        let mut terms = Vec::with_capacity(n_d);
        for (j, d) in model.discriminators.iter().enumerate() {
            let range = routing.ranges[i][j].clone();
            let m = range.len();
            if m == 0 {
                return Err(Error::EmptyBatch("routed fake batch"));
            }
            let rows = x.slice(s![range.clone(), ..]);
            let out = d.forward_view(rows)?;
            terms.push(-out.mean().expect("non-empty"));
            let (_, input_cot) = d.vjp(rows, &Matrix::from_elem((m, 1), -v[j] * w[i] / m as f64))?;
            cot.slice_mut(s![range, ..]).scaled_add(1.0, &input_cot);
        }
        let (grads, _) = g.backward(&trace, &cot, None)?;
        Ok((grads, terms))
    });
    let per_gen = per_gen.into_iter().collect::<Result<Vec<_>>>()?;

    let mut loss = entropy_regularizer(&w)?;
    let mut grad_w = Vec::with_capacity(n_g);
    let mut gen_grads = Vec::with_capacity(n_g);
    for (i, (grads, terms)) in per_gen.into_iter().enumerate() {
        let weighted: f64 = terms.iter().zip(&v).map(|(t, vj)| vj * t).sum();
        loss += w[i] * weighted;
        grad_w.push(weighted - 1.0 / (n_g as f64 * w[i]));
        gen_grads.push(grads);
    }
    Ok(GenLoss { loss, gen_grads, logit_grads: softmax_backward(&w, &grad_w) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_standard_normal;
    use crate::metrics::{critic_loss_and_grads, uniform_eps};
    use crate::net::Layer;
    use ndarray::array;
    use proptest::prelude::*;

    fn toy_model(n_g: usize, n_d: usize, seed: u64) -> MixtureModel {
        let mut m = MixtureModel::init(
            &NetworkSpec::new(3, 3, 3, 8),
            &NetworkSpec::new(3, 1, 3, 8),
            n_g,
            n_d,
            seed,
        )
        .unwrap();
        let mut r = rng::from_seed(seed + 100);
        for l in m.gen_logits.iter_mut().chain(m.disc_logits.iter_mut()) {
            *l = r.random_range(-1.0..1.0);
        }
        for net in m.generators.iter_mut().chain(m.discriminators.iter_mut()) {
            for layer in net.layers_mut() {
                layer.bias.mapv_inplace(|_| r.random_range(-0.2..0.2));
            }
        }
        m
    }

    fn full_routing(model: &MixtureModel, b: usize, rng: &mut crate::rng::Rng) -> FakeRouting {
        let n_d = model.n_discriminators();
        let noise: Vec<Matrix> = (0..model.n_generators())
            .map(|_| sample_standard_normal(b * n_d, model.noise_dim(), rng))
            .collect();
        let samples = noise.iter().zip(&model.generators).map(|(z, g)| g.forward(z).unwrap()).collect();
        let ranges = (0..model.n_generators()).map(|_| (0..n_d).map(|j| j * b..(j + 1) * b).collect()).collect();
        FakeRouting { noise, samples, ranges }
    }

    fn eps_for(routed: &[Vec<Matrix>], rng: &mut crate::rng::Rng) -> Vec<Vec<Vec<f64>>> {
        routed
            .iter()
            .map(|row| row.iter().map(|m| uniform_eps(m.nrows(), rng)).collect())
            .collect()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(mixture_weights(&[0.3; 4]).unwrap(), vec![0.25; 4]);
        let w = mixture_weights(&[0.0, 3f64.ln()]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert!(mixture_weights(&[0.0, f64::NAN]).is_err());
        assert!(mixture_weights(&[]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_regularizer(&[1.0]).unwrap(), 0.0);
        assert!((entropy_regularizer(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(entropy_regularizer(&[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant_and_on_simplex(logits in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
            let a = mixture_weights(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let b = mixture_weights(&shifted).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&w| w > 0.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn uniform_minimizes_entropy_regularizer(raw in prop::collection::vec(0.01f64..1.0, 2..7)) {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let uniform = vec![1.0 / w.len() as f64; w.len()];
            prop_assert!(entropy_regularizer(&w).unwrap() >= entropy_regularizer(&uniform).unwrap() - 1e-12);
        }
    }

    #[test]
    fn critic_gap_examples() {
        let id = Network::from_layers(vec![Layer { weight: array![[1.0]], bias: array![0.0] }], 0.2).unwrap();
        let real = Matrix::ones((4, 1));
        let fake = Matrix::zeros((4, 1));
        assert_eq!(wgan_critic_gap(&[id.clone()], &[1.0], &real, &fake).unwrap(), 1.0);
        assert_eq!(wgan_critic_gap(&[id.clone()], &[1.0], &real, &real).unwrap(), 0.0);
        let other = Network::from_layers(vec![Layer { weight: array![[-7.0]], bias: array![2.0] }], 0.2).unwrap();
        assert_eq!(wgan_critic_gap(&[id.clone(), other], &[1.0, 0.0], &real, &fake).unwrap(), 1.0);
        assert!(wgan_critic_gap(&[id], &[1.0], &Matrix::zeros((0, 1)), &fake).is_err());
    }

    #[test]
    fn single_pair_collapses_to_wgan_gp() {
        let model = toy_model(1, 1, 3);
        let mut r = rng::from_seed(5);
        let routing = full_routing(&model, 6, &mut r);
        let routed = routing.routed();
        let eps = eps_for(&routed, &mut r);
        let real = sample_standard_normal(6, 3, &mut r);
        let d = discriminator_loss(&model, &real, &routed, &eps, 10.0, &Workers::new(1)).unwrap();
        let (plain, plain_grads) =
            critic_loss_and_grads(&model.discriminators[0], &real, &routed[0][0], &eps[0][0], 10.0).unwrap();
        assert!((d.loss - plain).abs() < 1e-12);
        for (a, b) in d.disc_grads[0].iter().zip(plain_grads.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(d.logit_grads[0].abs() < 1e-12);

        let no_gp = discriminator_loss(&model, &real, &routed, &eps, 0.0, &Workers::new(1)).unwrap();
        let dnet = &model.discriminators[0];
        let expected = -(dnet.forward(&real).unwrap().mean().unwrap() - dnet.forward(&routed[0][0]).unwrap().mean().unwrap());
        assert!((no_gp.loss - expected).abs() < 1e-12);

        let g = generator_loss(&model, &routing, &Workers::new(1)).unwrap();
        let fake = model.generators[0].forward(&routing.noise[0]).unwrap();
        assert!((g.loss + dnet.forward(&fake).unwrap().mean().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn entropy_term_at_uniform_critic_weights() {
        let mut model = toy_model(2, 3, 4);
        model.disc_logits = vec![0.0; 3];
        // Zero critics: every data term vanishes.
        for d in &mut model.discriminators {
            for l in d.layers_mut() {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        let mut r = rng::from_seed(6);
        let routing = full_routing(&model, 4, &mut r);
        let routed = routing.routed();
        let eps = eps_for(&routed, &mut r);
        let real = sample_standard_normal(4, 3, &mut r);
        let d = discriminator_loss(&model, &real, &routed, &eps, 0.0, &Workers::new(1)).unwrap();
        assert!((d.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_critic_gives_zero_generator_grads() {
        let mut model = toy_model(2, 2, 8);
        for d in &mut model.discriminators {
            for l in d.layers_mut() {
                l.weight.fill(0.0);
            }
        }
        let routing = full_routing(&model, 5, &mut rng::from_seed(1));
        let g = generator_loss(&model, &routing, &Workers::new(1)).unwrap();
        assert!(g.gen_grads.iter().all(|gs| gs.iter().all(|&v| v == 0.0)));
    }

    fn fd_logits(
        model: &MixtureModel,
        which_gen: bool,
        k: usize,
        f: &dyn Fn(&MixtureModel) -> f64,
    ) -> f64 {
        let h = 1e-6;
        let mut up = model.clone();
        let mut down = model.clone();
        if which_gen {
            up.gen_logits[k] += h;
            down.gen_logits[k] -= h;
        } else {
            up.disc_logits[k] += h;
            down.disc_logits[k] -= h;
        }
        (f(&up) - f(&down)) / (2.0 * h)
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let model = toy_model(3, 2, 11);
        let mut r = rng::from_seed(7);
        let routing = full_routing(&model, 5, &mut r);
        let routed = routing.routed();
        let eps = eps_for(&routed, &mut r);
        let real = sample_standard_normal(5, 3, &mut r);
        let w1 = Workers::new(1);
        let d = discriminator_loss(&model, &real, &routed, &eps, 10.0, &w1).unwrap();
        let d_of = |m: &MixtureModel| discriminator_loss(m, &real, &routed, &eps, 10.0, &w1).unwrap().loss;
        for k in 0..2 {
            let fd = fd_logits(&model, false, k, &d_of);
            assert!((d.logit_grads[k] - fd).abs() < 1e-4 * fd.abs().max(1e-3), "{} vs {fd}", d.logit_grads[k]);
        }
        let g = generator_loss(&model, &routing, &w1).unwrap();
        let g_of = |m: &MixtureModel| generator_loss(m, &routing, &w1).unwrap().loss;
        for k in 0..3 {
            let fd = fd_logits(&model, true, k, &g_of);
            assert!((g.logit_grads[k] - fd).abs() < 1e-4 * fd.abs().max(1e-3), "{} vs {fd}", g.logit_grads[k]);
        }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let model = toy_model(2, 2, 13);
        let mut r = rng::from_seed(9);
        let routing = full_routing(&model, 4, &mut r);
        let routed = routing.routed();
        let eps = eps_for(&routed, &mut r);
        let real = sample_standard_normal(4, 3, &mut r);
        let w1 = Workers::new(1);
        let d = discriminator_loss(&model, &real, &routed, &eps, 10.0, &w1).unwrap();
        let g = generator_loss(&model, &routing, &w1).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let base = model.discriminators[j].params();
            let analytic = d.disc_grads[j].flatten();
            for p in (0..base.len()).step_by(7) {
                let mut m = model.clone();
                let mut q = base.clone();
                q[p] += h;
                m.discriminators[j].set_params(&q).unwrap();
                let up = discriminator_loss(&m, &real, &routed, &eps, 10.0, &w1).unwrap().loss;
                q[p] -= 2.0 * h;
                m.discriminators[j].set_params(&q).unwrap();
                let down = discriminator_loss(&m, &real, &routed, &eps, 10.0, &w1).unwrap().loss;
                let fd = (up - down) / (2.0 * h);
                assert!((analytic[p] - fd).abs() < 1e-4 * fd.abs().max(1e-4), "D{j} p{p}: {} vs {fd}", analytic[p]);
            }
        }
        for i in 0..2 {
            let base = model.generators[i].params();
            let analytic = g.gen_grads[i].flatten();
            for p in (0..base.len()).step_by(5) {
                let mut m = model.clone();
                let mut q = base.clone();
                q[p] += h;
                m.generators[i].set_params(&q).unwrap();
                let up = generator_loss(&m, &routing, &w1).unwrap().loss;
                q[p] -= 2.0 * h;
                m.generators[i].set_params(&q).unwrap();
                let down = generator_loss(&m, &routing, &w1).unwrap().loss;
                let fd = (up - down) / (2.0 * h);
                assert!((analytic[p] - fd).abs() < 1e-4 * fd.abs().max(1e-4), "G{i} p{p}: {} vs {fd}", analytic[p]);
            }
        }
    }

    #[test]
    fn parallel_workers_match_single_worker_bitwise() {
        let model = toy_model(4, 4, 21);
        let mut r = rng::from_seed(2);
        let routing = full_routing(&model, 4, &mut r);
        let routed = routing.routed();
        let eps = eps_for(&routed, &mut r);
        let real = sample_standard_normal(4, 3, &mut r);
        let a = discriminator_loss(&model, &real, &routed, &eps, 10.0, &Workers::new(1)).unwrap();
        let b = discriminator_loss(&model, &real, &routed, &eps, 10.0, &Workers::new(3)).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.disc_grads, b.disc_grads);
        let ga = generator_loss(&model, &routing, &Workers::new(1)).unwrap();
        let gb = generator_loss(&model, &routing, &Workers::new(2)).unwrap();
        assert_eq!(ga.gen_grads, gb.gen_grads);
        assert_eq!(ga.loss.to_bits(), gb.loss.to_bits());
    }

    #[test]
    fn mixture_sampling() {
        let mut model = toy_model(3, 1, 5);
        model.gen_logits = vec![0.0, -1e9, -1e9];
        let (_, picks) = model.mixture_sample(500, &mut rng::from_seed(1)).unwrap();
        assert!(picks.iter().all(|&p| p == 0));

        model.gen_logits = vec![0.0, 1.0, -0.5];
        let w = model.gen_weights().unwrap();
        let n = 100_000;
        let (x, picks) = model.mixture_sample(n, &mut rng::from_seed(2)).unwrap();
        assert_eq!(x.nrows(), n);
        for (i, wi) in w.iter().enumerate() {
            let freq = picks.iter().filter(|&&p| p == i).count() as f64 / n as f64;
            let se = (wi * (1.0 - wi) / n as f64).sqrt();
            assert!((freq - wi).abs() < 3.0 * se, "gen {i}: {freq} vs {wi}");
        }

        // A single generator: rows are exactly G(z) for the drawn noise.
        let single = toy_model(1, 1, 6);
        let mut r1 = rng::from_seed(3);
        let (x, _) = single.mixture_sample(10, &mut r1).unwrap();
        let mut r2 = rng::from_seed(3);
        let _: f64 = r2.random::<f64>();
        for _ in 1..10 {
            let _: f64 = r2.random::<f64>();
        }
        let z = sample_standard_normal(10, 3, &mut r2);
        assert_eq!(x, single.generators[0].forward(&z).unwrap());
    }

    #[test]
    fn mismatched_routing_is_rejected() {
        let model = toy_model(2, 2, 1);
        let mut r = rng::from_seed(1);
        let routing = full_routing(&model, 3, &mut r);
        let mut routed = routing.routed();
        let eps = eps_for(&routed, &mut r);
        routed.pop();
        let real = sample_standard_normal(3, 3, &mut r);
        assert!(discriminator_loss(&model, &real, &routed, &eps, 10.0, &Workers::new(1)).is_err());
    }
}
