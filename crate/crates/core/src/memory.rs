//! Prototype memory: an online mixture over embeddings.
//!
//! Each prototype is a running mean paired with a soft count. The E-step
//! scores an embedding against every prototype (cosine similarity over a
//! temperature, uniform mixing weights) and estimates the probability that
//! it belongs to none of them. The M-step folds the embedding into every
//! prototype in expectation over the assignment, decaying all counts by the
//! memory decay. A new prototype is created when the new-cluster
//! probability reaches the threshold; when the memory is full the prototype
//! with the smallest count is evicted first.
//!
//! The memory is generic over [`Real`] so the same code runs on plain
//! floats for inference and on tape variables during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, argmin, cosine_similarity, logsumexp, sigmoid, softmax, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Maximum number of prototypes.
    pub capacity: usize,
    /// Count decay per step, in (0, 1].
    pub decay: f64,
    /// Decay every count on steps that create a prototype as well.
    #[serde(default)]
    pub decay_on_create: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 150,
            decay: 0.995,
            decay_on_create: false,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::invalid("memory capacity must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!(
                "memory decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Prototype<T = f64> {
    /// Stable identity, assigned at creation and never reused.
    pub id: u64,
    pub mean: Vec<T>,
    pub count: T,
    pub birth_step: u64,
}

/// The scalars that parameterize inference: unknown-class offset and
/// slope, and the assignment temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams<T = f64> {
    pub beta: T,
    pub gamma: T,
    pub tau: T,
}

impl ClusterParams<f64> {
    pub fn new(beta: f64, gamma: f64, tau: f64) -> Self {
        Self { beta, gamma, tau }
    }
}

impl<T: Real> ClusterParams<T> {
    fn check(&self) -> Result<()> {
        if !(self.tau.value() > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.tau.value()
            )));
        }
        if !(self.gamma.value() > 0.0) {
            return Err(Error::invalid(format!(
                "slope must be positive, got {}",
                self.gamma.value()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EStepOutput<T = f64> {
    /// Assignment distribution over the current prototypes.
    pub yhat: Vec<T>,
    /// Probability that the embedding starts a new cluster.
    pub uhat: T,
    pub logits: Vec<T>,
    /// Index of the most similar prototype (ties to the lowest index).
    pub nearest: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Assigned { index: usize, id: u64 },
    Created { id: u64, evicted: Option<u64> },
}

impl StepOutcome {
    /// The prototype identity the frame ended up with.
    pub fn id(&self) -> u64 {
        match *self {
            StepOutcome::Assigned { id, .. } | StepOutcome::Created { id, .. } => id,
        }
    }

    pub fn created(&self) -> bool {
        matches!(self, StepOutcome::Created { .. })
    }
}

#[derive(Clone, Debug)]
pub struct PrototypeMemory<T = f64> {
    config: MemoryConfig,
    prototypes: Vec<Prototype<T>>,
    next_id: u64,
    step: u64,
}

impl<T: Real> PrototypeMemory<T> {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prototypes: Vec::new(),
            next_id: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &[Prototype<T>] {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        self.prototypes.clear();
        self.next_id = 0;
        self.step = 0;
    }

    pub fn counts(&self) -> Vec<f64> {
        self.prototypes.iter().map(|p| p.count.value()).collect()
    }

    /// Mixture weights c_k / sum_l c_l. Used for reporting only; inference
    /// treats the weights as uniform.
    pub fn weights(&self) -> Vec<f64> {
        let counts = self.counts();
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            counts.iter().map(|c| c / total).collect()
        } else {
            vec![1.0 / counts.len() as f64; counts.len()]
        }
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.prototypes.iter().position(|p| p.id == id)
    }

    /// Cosine similarity of `z` to every prototype mean.
    pub fn similarities(&self, z: &[T]) -> Result<Vec<T>> {
        self.prototypes
            .iter()
            .map(|p| cosine_similarity(z, &p.mean))
            .collect()
    }

    /// Assignment distribution at an arbitrary temperature.
    pub fn assignment(&self, z: &[T], tau: T) -> Result<Vec<T>> {
        if self.prototypes.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let logits: Vec<T> = self.similarities(z)?.into_iter().map(|c| c / tau).collect();
        softmax(&logits)
    }

    pub fn e_step(&self, z: &[T], params: &ClusterParams<T>) -> Result<EStepOutput<T>> {
        params.check()?;
        if self.prototypes.is_empty() {
            return Ok(EStepOutput {
                yhat: Vec::new(),
                uhat: T::constant(1.0),
                logits: Vec::new(),
                nearest: None,
            });
        }
        let cos = self.similarities(z)?;
        // Distance is negative cosine similarity, so the logits are cos/tau
        // and the smallest scaled distance is -max(cos)/tau.
        let logits: Vec<T> = cos.iter().map(|&c| c / params.tau).collect();
        let yhat = softmax(&logits)?;
        let nearest = argmax(&crate::numerics::values(&cos)).expect("nonempty");
        let min_distance = -logits[nearest];
        let uhat = ((min_distance - params.beta) / params.gamma).sigmoid();
        Ok(EStepOutput {
            yhat,
            uhat,
            logits,
            nearest: Some(nearest),
        })
    }

    /// Expected recursive update of every prototype given the E-step output.
    pub fn m_step(&mut self, z: &[T], yhat: &[T], uhat: T) -> Result<()> {
        if yhat.len() != self.prototypes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.prototypes.len(),
                found: yhat.len(),
            });
        }
        let rho = self.config.decay;
        let known = -uhat + 1.0;
        for (proto, &y) in self.prototypes.iter_mut().zip(yhat) {
            if proto.mean.len() != z.len() {
                return Err(Error::DimensionMismatch {
                    expected: proto.mean.len(),
                    found: z.len(),
                });
            }
            let mass = y * known;
            let decayed = proto.count * rho;
            let rate = mass / (decayed + 1.0);
            let keep = -rate + 1.0;
            for (m, &zi) in proto.mean.iter_mut().zip(z) {
                *m = zi * rate + *m * keep;
            }
            proto.count = decayed + mass;
        }
        Ok(())
    }

    /// Appends `(z, 1)`, evicting the prototype with the smallest count
    /// when the memory is full. Returns the new identity and the evicted one.
    pub fn create(&mut self, z: &[T]) -> (u64, Option<u64>) {
        if self.config.decay_on_create {
            let rho = self.config.decay;
            for p in &mut self.prototypes {
                p.count = p.count * rho;
            }
        }
        let evicted = if self.prototypes.len() >= self.config.capacity {
            let weakest = argmin(&self.counts()).expect("full memory is nonempty");
            Some(self.prototypes.remove(weakest).id)
        } else {
            None
        };
        let id = self.next_id;
        self.next_id += 1;
        self.prototypes.push(Prototype {
            id,
            mean: z.to_vec(),
            count: T::constant(1.0),
            birth_step: self.step,
        });
        (id, evicted)
    }

    /// One online step: E-step, then either the M-step (new-cluster
    /// probability below `alpha`) or prototype creation.
    pub fn step(
        &mut self,
        z: &[T],
        params: &ClusterParams<T>,
        alpha: f64,
    ) -> Result<(EStepOutput<T>, StepOutcome)> {
        let out = self.e_step(z, params)?;
        let outcome = if !self.prototypes.is_empty() && out.uhat.value() < alpha {
            self.m_step(z, &out.yhat, out.uhat)?;
            let index = argmax(&crate::numerics::values(&out.yhat)).expect("nonempty");
            StepOutcome::Assigned {
                index,
                id: self.prototypes[index].id,
            }
        } else {
            let (id, evicted) = self.create(z);
            StepOutcome::Created { id, evicted }
        };
        self.step += 1;
        Ok((out, outcome))
    }

    /// Copy of the memory with every scalar cut from the tape.
    pub fn to_plain(&self) -> PrototypeMemory<f64> {
        PrototypeMemory {
            config: self.config,
            prototypes: self
                .prototypes
                .iter()
                .map(|p| Prototype {
                    id: p.id,
                    mean: crate::numerics::values(&p.mean),
                    count: p.count.value(),
                    birth_step: p.birth_step,
                })
                .collect(),
            next_id: self.next_id,
            step: self.step,
        }
    }

    /// Advances the step counter for owners that drive the E/M-steps
    /// themselves instead of calling [`PrototypeMemory::step`].
    pub fn advance(&mut self) {
        self.step += 1;
    }
}

/// Serializable state of a plain memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub config: MemoryConfig,
    pub ids: Vec<u64>,
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<f64>,
    pub birth_steps: Vec<u64>,
    pub next_id: u64,
    pub step: u64,
}

impl PrototypeMemory<f64> {
    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            config: self.config,
            ids: self.prototypes.iter().map(|p| p.id).collect(),
            means: self.prototypes.iter().map(|p| p.mean.clone()).collect(),
            counts: self.counts(),
            birth_steps: self.prototypes.iter().map(|p| p.birth_step).collect(),
            next_id: self.next_id,
            step: self.step,
        }
    }

    pub fn from_snapshot(s: MemorySnapshot) -> Result<Self> {
        s.config.validate()?;
        let n = s.ids.len();
        if s.means.len() != n || s.counts.len() != n || s.birth_steps.len() != n {
            return Err(Error::invalid("memory snapshot arrays differ in length"));
        }
        if n > s.config.capacity {
            return Err(Error::invalid("memory snapshot exceeds its capacity"));
        }
        let prototypes = s
            .ids
            .into_iter()
            .zip(s.means)
            .zip(s.counts)
            .zip(s.birth_steps)
            .map(|(((id, mean), count), birth_step)| Prototype {
                id,
                mean,
                count,
                birth_step,
            })
            .collect();
        Ok(Self {
            config: s.config,
            prototypes,
            next_id: s.next_id,
            step: s.step,
        })
    }
}

/// Checks that the max-approximated new-cluster probability
/// `sigmoid(s - max v)` does not exceed the exact value under uniform mixing
/// weights, `sigmoid(s - logsumexp(v - ln K))`.
pub fn uhat_bound_check(v: &[f64], s: f64) -> bool {
    let Some(max) = v.iter().cloned().reduce(f64::max) else {
        return true;
    };
    // logsumexp(v - ln K) = max + ln(sum exp(v - max)) - ln K; the sum has
    // K terms each at most 1, so the bracketed gap is non-negative.
    let spread: f64 = v.iter().map(|x| (x - max).exp()).sum();
    let gap = (v.len() as f64).ln() - spread.ln();
    let approx = s - max;
    let exact = approx + gap;
    sigmoid(approx) <= sigmoid(exact)
}

/// Exact new-cluster probability with uniform mixing weights.
pub fn uhat_exact(v: &[f64], s: f64) -> Result<f64> {
    let ln_k = (v.len() as f64).ln();
    let shifted: Vec<f64> = v.iter().map(|x| x - ln_k).collect();
    Ok(sigmoid(s - logsumexp(&shifted)?))
}
