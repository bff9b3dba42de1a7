//! Embedding network and the full learnable parameter set.
//!
//! Encoders map raw features to the unit sphere: identity, one affine layer,
//! or a one-hidden-layer MLP. The learnable scalars of the memory (offset
//! and slope of the new-cluster gate, assignment temperature) are stored
//! alongside the weights. Slope and temperature are stored as raw values
//! behind a softplus so optimizer steps can never make them non-positive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ClusterParams;
use crate::numerics::{norm, softplus, softplus_inverse, Real, Tape, Var};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    32
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl EncoderConfig {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: EncoderKind::Identity,
            input_dim: dim,
            output_dim: dim,
            hidden_dim: default_hidden(),
            activation: default_activation(),
            seed: 0,
        }
    }

    pub fn linear(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            kind: EncoderKind::Linear,
            input_dim,
            output_dim,
            hidden_dim: default_hidden(),
            activation: default_activation(),
            seed,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            input_dim,
            output_dim,
            hidden_dim,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        match self.kind {
            EncoderKind::Identity if self.input_dim != self.output_dim => {
                Err(Error::invalid(format!(
                    "identity encoder needs input_dim = output_dim, got {} and {}",
                    self.input_dim, self.output_dim
                )))
            }
            EncoderKind::Mlp if self.hidden_dim == 0 => {
                Err(Error::invalid("mlp hidden_dim must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// (rows, cols) of each affine layer; each is followed by `rows` biases.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            EncoderKind::Identity => vec![],
            EncoderKind::Linear => vec![(self.output_dim, self.input_dim)],
            EncoderKind::Mlp => vec![
                (self.hidden_dim, self.input_dim),
                (self.output_dim, self.hidden_dim),
            ],
        }
    }

    pub fn num_weights(&self) -> usize {
        self.layers().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// Initial values of the non-network parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarInit {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Pseudo-label temperature as a fraction of the assignment temperature.
    pub pseudo_ratio: f64,
}

impl Default for ScalarInit {
    fn default() -> Self {
        Self {
            beta: -12.0,
            gamma: 1.0,
            tau: 0.1,
            pseudo_ratio: 0.1,
        }
    }
}

impl ScalarInit {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.tau > 0.0) {
            return Err(Error::invalid("gamma and tau must be positive"));
        }
        if !(self.pseudo_ratio >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(
                "pseudo_ratio must be non-negative and beta finite",
            ));
        }
        Ok(())
    }
}

/// Every learnable quantity plus the fixed pseudo-label ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub encoder: EncoderConfig,
    /// Layer weights then biases, layer by layer, row-major.
    pub weights: Vec<f64>,
    pub beta: f64,
    pub gamma_raw: f64,
    pub tau_raw: f64,
    pub pseudo_ratio: f64,
}

/// Named slices of the flat parameter vector.
pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_BETA: &str = "beta";
pub const GROUP_GAMMA: &str = "gamma";
pub const GROUP_TAU: &str = "tau";

impl ParameterSet {
    pub fn init(config: EncoderConfig, scalars: ScalarInit) -> Result<Self> {
        config.validate()?;
        scalars.validate()?;
        let mut rng = seeded(config.seed);
        let mut weights = Vec::with_capacity(config.num_weights());
        for (rows, cols) in config.layers() {
            let bound = 1.0 / (cols as f64).sqrt();
            for _ in 0..rows * cols + rows {
                weights.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            encoder: config,
            weights,
            beta: scalars.beta,
            gamma_raw: softplus_inverse(scalars.gamma),
            tau_raw: softplus_inverse(scalars.tau),
            pseudo_ratio: scalars.pseudo_ratio,
        })
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn tau(&self) -> f64 {
        softplus(self.tau_raw)
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams::new(self.beta, self.gamma(), self.tau())
    }

    pub fn len(&self) -> usize {
        self.weights.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Learnable values in optimizer order: weights, beta, raw gamma, raw tau.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend([self.beta, self.gamma_raw, self.tau_raw]);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: flat.len(),
            });
        }
        let n = self.weights.len();
        self.weights.copy_from_slice(&flat[..n]);
        self.beta = flat[n];
        self.gamma_raw = flat[n + 1];
        self.tau_raw = flat[n + 2];
        Ok(())
    }

    pub fn groups(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let n = self.weights.len();
        vec![
            (GROUP_ENCODER, 0..n),
            (GROUP_BETA, n..n + 1),
            (GROUP_GAMMA, n + 1..n + 2),
            (GROUP_TAU, n + 2..n + 3),
        ]
    }

    /// Plain-float view for inference.
    pub fn plain(&self) -> LiveParams<f64> {
        LiveParams::from_flat(self.encoder, &self.flat(), self.pseudo_ratio)
    }

    /// Registers every learnable value on `tape`, in [`ParameterSet::flat`]
    /// order.
    pub fn lift<'t>(&self, tape: &'t Tape) -> LiveParams<Var<'t>> {
        let vars = tape.params(&self.flat());
        LiveParams::from_flat(self.encoder, &vars, self.pseudo_ratio)
    }
}

/// Parameters in a form the differentiable code consumes: the positive
/// scalars are already passed through softplus.
#[derive(Clone, Debug)]
pub struct LiveParams<T> {
    pub encoder: EncoderConfig,
    pub weights: Vec<T>,
    pub cluster: ClusterParams<T>,
    pub pseudo_ratio: f64,
}

impl<T: Real> LiveParams<T> {
    pub fn from_flat(encoder: EncoderConfig, flat: &[T], pseudo_ratio: f64) -> Self {
        let n = encoder.num_weights();
        assert_eq!(flat.len(), n + 3, "flat parameter length");
        Self {
            encoder,
            weights: flat[..n].to_vec(),
            cluster: ClusterParams {
                beta: flat[n],
                gamma: flat[n + 1].softplus(),
                tau: flat[n + 2].softplus(),
            },
            pseudo_ratio,
        }
    }
}

fn affine<T: Real>(weights: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let (w, b) = weights.split_at(rows * cols);
    (0..rows)
        .map(|r| T::dot(&w[r * cols..(r + 1) * cols], x) + b[r])
        .collect()
}

/// z = h(x) / |h(x)|.
pub fn encode<T: Real>(x: &[T], params: &LiveParams<T>) -> Result<Vec<T>> {
    let config = &params.encoder;
    if x.len() != config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            found: x.len(),
        });
    }
    let h = match config.kind {
        EncoderKind::Identity => x.to_vec(),
        EncoderKind::Linear => affine(&params.weights, config.output_dim, config.input_dim, x),
        EncoderKind::Mlp => {
            let first = config.hidden_dim * config.input_dim + config.hidden_dim;
            let (w1, w2) = params.weights.split_at(first);
            let hidden: Vec<T> = affine(w1, config.hidden_dim, config.input_dim, x)
                .into_iter()
                .map(|a| match config.activation {
                    Activation::Tanh => a.tanh(),
                    Activation::Relu => a.relu(),
                })
                .collect();
            affine(w2, config.output_dim, config.hidden_dim, &hidden)
        }
    };
    let n = norm(&h);
    if !(n.value() > 0.0) {
        return Err(Error::CollapsedEmbedding);
    }
    Ok(h.into_iter().map(|v| v / n).collect())
}

/// Encodes raw features with plain floats.
pub fn embed(x: &[f64], params: &LiveParams<f64>) -> Result<Vec<f64>> {
    encode(x, params)
}
