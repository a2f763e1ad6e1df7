//! Affine + LeakyReLU feed-forward networks with hand-written reverse passes.
//!
//! Every role in the system (generator, critic, target network, Judge,
//! independent critic) is one of these. Layer counting follows the convention
//! "affine layers including input and output": `num_layers = 2` is a single
//! affine map, `num_layers = 5` has three hidden LeakyReLU layers.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MGL1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub hidden_width: usize,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, output_dim: usize, num_layers: usize, hidden_width: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            num_layers,
            hidden_width,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            init_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.leaky_slope = slope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("input and output dims must be positive".into()));
        }
        if self.num_layers < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.num_layers > 2 && self.hidden_width == 0 {
            return Err(Error::InvalidSpec("hidden_width must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// `(out, in)` for every affine layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let affine = self.num_layers - 1;
        (0..affine)
            .map(|k| {
                let fan_in = if k == 0 { self.input_dim } else { self.hidden_width };
                let fan_out = if k + 1 == affine { self.output_dim } else { self.hidden_width };
                (fan_out, fan_in)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    leaky_slope: f64,
    spec: NetworkSpec,
}

/// Intermediate values of a forward pass, kept for the reverse passes.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input of each affine layer.
    inputs: Vec<Matrix>,
    /// LeakyReLU derivative (1 or slope) after each hidden affine layer.
    slopes: Vec<Matrix>,
}

impl Trace {
    pub fn input(&self) -> &Matrix {
        &self.inputs[0]
    }

    /// LeakyReLU derivative of every hidden unit; fixes the linear piece the
    /// network is on.
    pub fn activation_pattern(&self) -> &[Matrix] {
        &self.slopes
    }

    /// Activation of the last hidden layer (the network input when there is
    /// no hidden layer).
    pub fn features(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vector,
}

/// Parameter gradients, shaped like the network they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_for(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.raw_dim()),
                    bias: Vector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn is_congruent(&self, net: &Network) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len())
    }

    fn is_congruent_grads(&self, other: &GradientSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &GradientSet, alpha: f64) -> Result<()> {
        if !self.is_congruent_grads(other) {
            return Err(Error::ShapeMismatch("gradient sets differ in shape".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weight *= alpha;
            l.bias *= alpha;
        }
    }

    /// Flat iteration order: per layer, weights row-major then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> + Clone {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

fn leaky_in_place(z: &mut Matrix, slope: f64) -> Matrix {
    let mut d = Matrix::ones(z.raw_dim());
    ndarray::Zip::from(z).and(&mut d).for_each(|z, d| {
        if *z <= 0.0 {
            *z *= slope;
            *d = slope;
        }
    });
    d
}

impl Network {
    /// Glorot-uniform weights, zero biases, deterministic in `spec.init_seed`.
    pub fn glorot(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::from_seed(spec.init_seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| {
                let bound = (6.0 / (inp + out) as f64).sqrt();
                let weight = Matrix::from_shape_simple_fn((out, inp), || rng.random_range(-bound..=bound));
                Layer { weight, bias: Vector::zeros(out) }
            })
            .collect();
        Ok(Self { layers, leaky_slope: spec.leaky_slope, spec: spec.clone() })
    }

    /// Builds a network from explicit layers. The resulting spec carries
    /// `init_seed = 0`.
    pub fn from_layers(layers: Vec<Layer>, leaky_slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("network needs at least one affine layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::InvalidSpec(format!("layer {k}: bias length != weight rows")));
            }
            if k > 0 && layers[k - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::InvalidSpec(format!("layer {k}: input width does not chain")));
            }
        }
        let hidden: Vec<usize> = layers[..layers.len() - 1].iter().map(|l| l.weight.nrows()).collect();
        if hidden.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidSpec("hidden layers must share one width".into()));
        }
        let spec = NetworkSpec {
            input_dim: layers[0].weight.ncols(),
            output_dim: layers[layers.len() - 1].weight.nrows(),
            num_layers: layers.len() + 1,
            hidden_width: hidden.first().copied().unwrap_or(0),
            leaky_slope,
            init_seed: 0,
        };
        spec.validate()?;
        Ok(Self { layers, leaky_slope, spec })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Direct parameter access. Shapes must not be changed.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Same flat order as [`GradientSet::iter`].
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .copied()
            .collect()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: values.len(),
                context: "flat parameter vector",
            });
        }
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: batch.ncols(),
                context: "network input",
            });
        }
        Ok(())
    }

    fn check_scalar(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: self.output_dim(),
                context: "scalar-output network",
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward_view(batch.view())
    }

    pub fn forward_view(&self, batch: ArrayView2<f64>) -> Result<Matrix> {
        self.check_batch(&batch)?;
        let last = self.layers.len() - 1;
        let mut h: Option<Matrix> = None;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = match &h {
                None => batch.dot(&layer.weight.t()),
                Some(h) => h.dot(&layer.weight.t()),
            };
            z += &layer.bias;
            if k < last {
                z.mapv_inplace(|v| if v > 0.0 { v } else { v * self.leaky_slope });
            }
            h = Some(z);
        }
        Ok(h.expect("at least one layer"))
    }

    /// Forward pass that records what the reverse passes need.
    pub fn forward_traced(&self, batch: ArrayView2<f64>) -> Result<(Matrix, Trace)> {
        self.check_batch(&batch)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut slopes = Vec::with_capacity(last);
        let mut h = batch.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if k < last {
                slopes.push(leaky_in_place(&mut z, self.leaky_slope));
            }
            inputs.push(h);
            h = z;
        }
        Ok((h, Trace { inputs, slopes }))
    }

    /// Reverse pass. `output_cotangent` is the cotangent of the network
    /// output; `feature_cotangent`, if given, is added at the last hidden
    /// activation. Returns parameter gradients and the input cotangent.
    pub fn backward(
        &self,
        trace: &Trace,
        output_cotangent: &Matrix,
        feature_cotangent: Option<&Matrix>,
    ) -> Result<(GradientSet, Matrix)> {
        let n = trace.inputs[0].nrows();
        if output_cotangent.dim() != (n, self.output_dim()) {
            return Err(Error::ShapeMismatch(format!(
                "cotangent {:?} does not match output ({n}, {})",
                output_cotangent.dim(),
                self.output_dim()
            )));
        }
        let last = self.layers.len() - 1;
        if let Some(f) = feature_cotangent {
            if last == 0 {
                return Err(Error::InvalidArgument("network has no hidden layer".into()));
            }
            if f.dim() != trace.inputs[last].dim() {
                return Err(Error::ShapeMismatch("feature cotangent shape".into()));
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = output_cotangent.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            grads.push(LayerGrad {
                weight: g.t().dot(&trace.inputs[k]),
                bias: g.sum_axis(Axis(0)),
            });
            let mut upstream = g.dot(&layer.weight);
            if k > 0 {
                if k == last {
                    if let Some(f) = feature_cotangent {
                        upstream += f;
                    }
                }
                upstream *= &trace.slopes[k - 1];
            }
            g = upstream;
        }
        grads.reverse();
        Ok((GradientSet { layers: grads }, g))
    }

    /// Gradients of `<cotangent, forward(batch)>` with respect to every
    /// parameter.
    pub fn param_grads(&self, batch: &Matrix, output_cotangent: &Matrix) -> Result<GradientSet> {
        Ok(self.vjp(batch.view(), output_cotangent)?.0)
    }

    /// Parameter gradients plus the cotangent pulled back to the input.
    pub fn vjp(&self, batch: ArrayView2<f64>, output_cotangent: &Matrix) -> Result<(GradientSet, Matrix)> {
        let (_, trace) = self.forward_traced(batch)?;
        self.backward(&trace, output_cotangent, None)
    }

    /// Row-wise gradients of a scalar output with respect to the input.
    pub fn input_gradients(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_scalar()?;
        let (_, trace) = self.forward_traced(batch.view())?;
        let ones = Matrix::ones((batch.nrows(), 1));
        Ok(self.backward(&trace, &ones, None)?.1)
    }

    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix::from_shape_vec((1, x.len()), x.to_vec())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.input_gradients(&batch)?.row(0).to_vec())
    }

    /// `lambda * mean_rows (||grad_x D(x_hat)|| - 1)^2` and its exact
    /// parameter gradient.
    ///
    /// The input gradient is a product of weight transposes and piecewise
    /// constant slope masks, so the penalty is polynomial in the weights
    /// between activation kinks and independent of the biases. The parameter
    /// gradient is a second reverse pass over that product.
    pub fn gradient_penalty_with_grads(&self, x_hat: &Matrix, lambda: f64) -> Result<(f64, GradientSet)> {
        self.check_scalar()?;
        let n = x_hat.nrows();
        if n == 0 {
            return Err(Error::EmptyBatch("gradient penalty"));
        }
        let (_, trace) = self.forward_traced(x_hat.view())?;
        let depth = self.layers.len();

        // Backward signals: signals[k] is d out / d z_k (pre-activation of layer k).
        let mut signals: Vec<Matrix> = vec![Matrix::zeros((0, 0)); depth];
        signals[depth - 1] = Matrix::ones((n, 1));
        for k in (1..depth).rev() {
            let mut s = signals[k].dot(&self.layers[k].weight);
            s *= &trace.slopes[k - 1];
            signals[k - 1] = s;
        }
        let grad_x = signals[0].dot(&self.layers[0].weight);

        let scale = lambda / n as f64;
        let mut penalty = 0.0;
        let mut adjoint = Matrix::zeros(grad_x.raw_dim());
        let mut degenerate = 0usize;
        for (r, row) in grad_x.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            penalty += (norm - 1.0).powi(2);
            if norm == 0.0 {
                degenerate += 1;
                continue;
            }
            let coef = scale * 2.0 * (norm - 1.0) / norm;
            adjoint.row_mut(r).assign(&(&row * coef));
        }
        if degenerate > 0 {
            log::warn!("gradient penalty: {degenerate} row(s) with zero input-gradient norm");
        }

        let mut grads = GradientSet::zeros_for(self);
        for k in 0..depth {
            grads.layers[k].weight = signals[k].t().dot(&adjoint);
            if k + 1 < depth {
                let mut next = adjoint.dot(&self.layers[k].weight.t());
                next *= &trace.slopes[k];
                adjoint = next;
            }
        }
        Ok((scale * penalty, grads))
    }

    /// Activations after the last hidden LeakyReLU.
    pub fn hidden_features(&self, batch: &Matrix) -> Result<Matrix> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidArgument("network has no hidden layer".into()));
        }
        let (_, mut trace) = self.forward_traced(batch.view())?;
        Ok(trace.inputs.pop().expect("non-empty"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weight.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weight.ncols() as u32).to_le_bytes());
            for v in l.weight.iter().chain(l.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.leaky_slope.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad network magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported network version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let weight = Matrix::from_shape_vec((rows, cols), r.f64s(rows * cols)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let bias = Vector::from(r.f64s(rows)?);
            layers.push(Layer { weight, bias });
        }
        let slope = r.f64()?;
        r.finish()?;
        Self::from_layers(layers, slope)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Little-endian cursor shared by the binary checkpoint formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::from_seed(seed);
        Matrix::from_shape_simple_fn((n, d), || r.random_range(-1.5..1.5))
    }

    /// Randomized biases so kinks are not all at the origin.
    fn random_net(spec: &NetworkSpec) -> Network {
        let mut net = Network::glorot(spec).unwrap();
        let mut r = rng::from_seed(spec.init_seed ^ 0xabcdef);
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| r.random_range(-0.3..0.3));
        }
        net
    }

    /// Straight-line evaluator over plain loops, independent of ndarray products.
    fn naive_forward(net: &Network, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = x.to_vec();
        let mut features = Vec::new();
        let last = net.layers().len() - 1;
        for (k, l) in net.layers().iter().enumerate() {
            let mut z = vec![0.0; l.weight.nrows()];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut acc = l.bias[r];
                for (c, hc) in h.iter().enumerate() {
                    acc += l.weight[[r, c]] * hc;
                }
                *zr = if k < last && acc <= 0.0 { acc * net.leaky_slope() } else { acc };
            }
            if k == last {
                features = h.clone();
            }
            h = z;
        }
        (h, features)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn glorot_is_deterministic_and_bounded() {
        let spec = NetworkSpec::new(600, 600, 2, 0).with_seed(3);
        let a = Network::glorot(&spec).unwrap();
        let b = Network::glorot(&spec).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 1200.0).sqrt();
        assert!(a.layers()[0].weight.iter().all(|w| w.abs() <= bound));
        assert!(a.layers()[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn glorot_variance_matches_uniform_law() {
        let spec = NetworkSpec::new(1024, 1024, 2, 0).with_seed(11);
        let net = Network::glorot(&spec).unwrap();
        let w = &net.layers()[0].weight;
        let mean = w.mean().unwrap();
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = 6.0 / 2048.0 / 3.0;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(Network::glorot(&NetworkSpec::new(0, 1, 2, 0)).is_err());
        assert!(Network::glorot(&NetworkSpec::new(2, 1, 1, 0)).is_err());
        assert!(Network::glorot(&NetworkSpec::new(2, 1, 3, 0)).is_err());
        assert!(Network::glorot(&NetworkSpec::new(2, 1, 3, 4).with_slope(1.0)).is_err());
    }

    #[test]
    fn identity_and_constant_nets() {
        let id = Network::from_layers(
            vec![Layer { weight: Matrix::eye(3), bias: Vector::zeros(3) }],
            0.2,
        )
        .unwrap();
        let x = random_batch(4, 3, 1);
        assert_eq!(id.forward(&x).unwrap(), x);

        let b = array![0.5, -1.0];
        let constant = Network::from_layers(
            vec![Layer { weight: Matrix::zeros((2, 3)), bias: b.clone() }],
            0.2,
        )
        .unwrap();
        let out = constant.forward(&x).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row, b);
        }
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        let net = random_net(&NetworkSpec::new(5, 3, 3, 7).with_seed(5));
        let x = random_batch(6, 5, 2);
        let out = net.forward(&x).unwrap();
        let feats = net.hidden_features(&x).unwrap();
        for r in 0..6 {
            let (y, f) = naive_forward(&net, x.row(r).as_slice().unwrap());
            for c in 0..3 {
                assert!((out[[r, c]] - y[c]).abs() < 1e-12);
            }
            for c in 0..7 {
                assert!((feats[[r, c]] - f[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = random_net(&NetworkSpec::new(5, 1, 3, 4));
        assert!(matches!(
            net.forward(&Matrix::zeros((2, 4))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_layer_net_is_affine() {
        let net = random_net(&NetworkSpec::new(4, 2, 2, 0).with_seed(9));
        let x = random_batch(3, 4, 3);
        let alpha = -2.5;
        let lhs = net.forward(&(&x * alpha)).unwrap();
        let w = &net.layers()[0].weight;
        let rhs = x.dot(&w.t()) * alpha + &net.layers()[0].bias;
        assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let net = random_net(&NetworkSpec::new(4, 2, 4, 5));
        let x = random_batch(3, 4, 4);
        let g = net.param_grads(&x, &Matrix::zeros((3, 2))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(g.is_congruent(&net));
    }

    #[test]
    fn linear_bias_gradient_sums_cotangent() {
        let net = random_net(&NetworkSpec::new(3, 2, 2, 0));
        let x = random_batch(5, 3, 4);
        let mut cot = Matrix::zeros((5, 2));
        cot.column_mut(0).fill(1.0);
        let g = net.param_grads(&x, &cot).unwrap();
        assert_eq!(g.layers[0].bias, array![5.0, 0.0]);
    }

    #[test]
    fn param_grads_match_finite_differences() {
        let spec = NetworkSpec::new(4, 2, 3, 8).with_seed(21);
        let mut net = random_net(&spec);
        let x = random_batch(5, 4, 6);
        let cot = random_batch(5, 2, 7);
        let analytic = net.param_grads(&x, &cot).unwrap().flatten();
        let base = net.params();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            net.set_params(&p).unwrap();
            let up = (&net.forward(&x).unwrap() * &cot).sum();
            p[i] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let down = (&net.forward(&x).unwrap() * &cot).sum();
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(analytic[i], fd) < 1e-5, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn linear_input_gradient_is_weight() {
        let net = random_net(&NetworkSpec::new(4, 1, 2, 0));
        let g = net.input_gradient(&[0.3, -1.0, 2.0, 0.1]).unwrap();
        assert_eq!(g, net.layers()[0].weight.row(0).to_vec());
        let wide = random_net(&NetworkSpec::new(4, 2, 2, 0));
        assert!(wide.input_gradient(&[0.0; 4]).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = random_net(&NetworkSpec::new(6, 1, 4, 8).with_seed(4));
        let x = vec![0.2, -0.4, 0.9, 0.1, -1.2, 0.5];
        let g = net.input_gradient(&x).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fp = naive_forward(&net, &xp).0[0];
            let fm = naive_forward(&net, &xm).0[0];
            let fd = (fp - fm) / (2.0 * h);
            assert!(rel_err(g[i], fd) < 1e-6, "coord {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn negative_preactivation_scales_by_slope() {
        // D(x) = v * leaky(x): slope 1 for x > 0, 0.2 for x < 0.
        let net = Network::from_layers(
            vec![
                Layer { weight: array![[1.0]], bias: array![0.0] },
                Layer { weight: array![[3.0]], bias: array![0.0] },
            ],
            0.2,
        )
        .unwrap();
        let pos = net.input_gradient(&[0.5]).unwrap()[0];
        let neg = net.input_gradient(&[-0.5]).unwrap()[0];
        assert_eq!(pos, 3.0);
        assert!((neg - 0.2 * pos).abs() < 1e-15);
        // Direct evaluation either side of the kink agrees.
        let f = |x: f64| net.forward(&array![[x]]).unwrap()[[0, 0]];
        assert!(((f(-0.5) - f(-0.6)) / 0.1 - neg).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_is_piecewise_constant() {
        let net = random_net(&NetworkSpec::new(5, 1, 4, 8).with_seed(12));
        let x = [0.3, -0.2, 0.8, -0.5, 0.1];
        let mut y = x;
        y[2] += 1e-9;
        assert_eq!(net.input_gradient(&x).unwrap(), net.input_gradient(&y).unwrap());
    }

    fn unit_linear_critic(w: Vec<f64>) -> Network {
        let d = w.len();
        Network::from_layers(
            vec![Layer { weight: Matrix::from_shape_vec((1, d), w).unwrap(), bias: array![0.7] }],
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn penalty_vanishes_on_unit_norm_linear_critic() {
        let net = unit_linear_critic(vec![0.6, 0.8]);
        let (p, g) = net.gradient_penalty_with_grads(&random_batch(4, 2, 1), 10.0).unwrap();
        assert!(p.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn penalty_of_doubled_linear_critic() {
        let net = unit_linear_critic(vec![2.0, 0.0, 0.0]);
        let (p, _) = net.gradient_penalty_with_grads(&random_batch(7, 3, 1), 10.0).unwrap();
        assert!((p - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_rows_count_as_unit_penalty() {
        let net = unit_linear_critic(vec![0.0, 0.0]);
        let (p, g) = net.gradient_penalty_with_grads(&random_batch(3, 2, 1), 10.0).unwrap();
        assert!((p - 10.0).abs() < 1e-12);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_grads_match_finite_differences() {
        let spec = NetworkSpec::new(4, 1, 3, 8).with_seed(33);
        let mut net = random_net(&spec);
        let x = random_batch(6, 4, 8);
        let (_, g) = net.gradient_penalty_with_grads(&x, 10.0).unwrap();
        let analytic = g.flatten();
        let base = net.params();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            net.set_params(&p).unwrap();
            let up = net.gradient_penalty_with_grads(&x, 10.0).unwrap().0;
            p[i] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let down = net.gradient_penalty_with_grads(&x, 10.0).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(analytic[i], fd) < 1e-4, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn features_with_identity_hidden_layer() {
        let net = Network::from_layers(
            vec![
                Layer { weight: Matrix::eye(3), bias: Vector::zeros(3) },
                Layer { weight: array![[1.0, -2.0, 0.5]], bias: array![0.25] },
            ],
            0.2,
        )
        .unwrap();
        let x = array![[0.1, 2.0, 0.0], [3.0, 0.5, 1.0]];
        let f = net.hidden_features(&x).unwrap();
        assert_eq!(f, x);
        let out = net.forward(&x).unwrap();
        let last = &net.layers()[1];
        let recomposed = f.dot(&last.weight.t()) + &last.bias;
        assert_eq!(out, recomposed);
        let linear = random_net(&NetworkSpec::new(3, 1, 2, 0));
        assert!(linear.hidden_features(&x).is_err());
    }

    #[test]
    fn feature_cotangent_matches_finite_differences() {
        let mut net = random_net(&NetworkSpec::new(3, 2, 4, 5).with_seed(8));
        let x = random_batch(4, 3, 3);
        let cot_out = random_batch(4, 2, 4);
        let cot_feat = random_batch(4, 5, 5);
        let (_, trace) = net.forward_traced(x.view()).unwrap();
        let (g, _) = net.backward(&trace, &cot_out, Some(&cot_feat)).unwrap();
        let analytic = g.flatten();
        let objective = |n: &Network| {
            (&n.forward(&x).unwrap() * &cot_out).sum() + (&n.hidden_features(&x).unwrap() * &cot_feat).sum()
        };
        let base = net.params();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-5;
            net.set_params(&p).unwrap();
            let up = objective(&net);
            p[i] -= 2e-5;
            net.set_params(&p).unwrap();
            let down = objective(&net);
            assert!(rel_err(analytic[i], (up - down) / 2e-5) < 1e-5);
        }
    }

    #[test]
    fn full_rank_generator_is_injective() {
        // Square full-rank layers + LeakyReLU: every layer map is a bijection.
        let net = random_net(&NetworkSpec::new(6, 6, 4, 6).with_seed(2));
        for l in net.layers() {
            let m = nalgebra::DMatrix::from_row_slice(6, 6, l.weight.as_slice().unwrap());
            assert_eq!(m.rank(1e-10), 6);
        }
        let x = random_batch(50, 6, 9);
        let y = net.forward(&x).unwrap();
        for a in 0..50 {
            for b in (a + 1)..50 {
                let d: f64 = (&y.row(a) - &y.row(b)).mapv(|v| v * v).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejection() {
        let net = random_net(&NetworkSpec::new(3, 2, 4, 5).with_seed(1));
        let bytes = net.encode();
        assert_eq!(&bytes[..4], b"MGL1");
        let back = Network::decode(&bytes).unwrap();
        assert_eq!(back.layers(), net.layers());
        assert_eq!(back.leaky_slope(), net.leaky_slope());
        assert!(Network::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Network::decode(&bad).is_err());
    }
}
