//! Adam with bias correction. One state per parameter block; networks and
//! mixture logit vectors are both stepped through the same flat view.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ByteReader, GradientSet, Network};

const STATE_MAGIC: &[u8; 4] = b"MGO1";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Preset for the synthetic-data experiments.
    pub fn synthetic(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.5, beta2: 0.9, epsilon: 1e-8 }
    }

    /// Preset used by the conditional hinge-loss setup (`beta1 = 0`).
    pub fn hinge(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.0, beta2: 0.9, epsilon: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad Adam config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, first: vec![0.0; len], second: vec![0.0; len], step: 0 }
    }

    pub fn for_network(config: AdamConfig, net: &Network) -> Self {
        Self::new(config, net.param_count())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One update over parallel iterators of parameters and gradients.
    /// Gradients are checked before anything is touched: a non-finite entry
    /// leaves parameters and state unchanged.
    fn apply<'a, P, G>(&mut self, params: P, grads: G) -> Result<()>
    where
        P: Iterator<Item = &'a mut f64>,
        G: Iterator<Item = f64> + Clone,
    {
        let mut count = 0;
        for g in grads.clone() {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            count += 1;
        }
        if count != self.first.len() {
            return Err(Error::DimensionMismatch {
                expected: self.first.len(),
                got: count,
                context: "optimizer state",
            });
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.first).zip(&mut self.second) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network, grads: &GradientSet) -> Result<()> {
        if !grads.is_congruent(net) {
            return Err(Error::ShapeMismatch("gradients do not match network".into()));
        }
        self.apply(net.params_mut(), grads.iter().copied())
    }

    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                got: grads.len(),
                context: "parameter slice",
            });
        }
        self.apply(params.iter_mut(), grads.iter().copied())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(52 + 16 * self.first.len());
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for v in [self.config.learning_rate, self.config.beta1, self.config.beta2, self.config.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.first.len() as u32).to_le_bytes());
        for v in self.first.iter().chain(&self.second) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Format("bad optimizer magic".into()));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported optimizer version {version}")));
        }
        let step = r.u64()?;
        let config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let len = r.u32()? as usize;
        let first = r.f64s(len)?;
        let second = r.f64s(len)?;
        r.finish()?;
        Ok(Self { config, first, second, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
