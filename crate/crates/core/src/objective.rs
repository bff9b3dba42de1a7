//! Episode loss: self-supervised distillation across views, assignment
//! entropy, and a Beta prior on the average new-cluster probability.
//!
//! [`episode_loss`] walks an episode frame by frame against a fresh
//! memory. For each frame it encodes the original view, runs the E-step,
//! either updates the prototypes or creates a new one, derives a pseudo
//! label from the original view against the updated memory, and scores the
//! augmented view's assignment against it. Everything is generic over
//! [`Real`], so the same walk produces plain values or a tape to
//! differentiate. Discrete choices (create or update, eviction, one-hot
//! pseudo labels) are made on values and are constants of differentiation.

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::encoder::{encode, LiveParams};
use crate::error::{Error, Result};
use crate::memory::PrototypeMemory;
use crate::numerics::{argmax, log_softmax, values, Real};
use crate::streams::EpisodeFrame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_ent: f64,
    pub lambda_new: f64,
    /// Mean of the Beta prior on the average new-cluster probability.
    pub beta_mean: f64,
    /// Clamp applied to the prior's argument.
    #[serde(default = "default_clamp")]
    pub clamp_eps: f64,
    /// Treat prototypes as constants instead of functions of earlier
    /// embeddings.
    #[serde(default)]
    pub stop_prototype_gradient: bool,
}

fn default_clamp() -> f64 {
    1e-4
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ent: 0.0,
            lambda_new: 0.5,
            beta_mean: 0.5,
            clamp_eps: default_clamp(),
            stop_prototype_gradient: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ent >= 0.0 && self.lambda_new >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.beta_mean > 0.0 && self.beta_mean < 1.0) {
            return Err(Error::invalid(format!(
                "beta_mean must lie in (0, 1), got {}",
                self.beta_mean
            )));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 0.01) {
            return Err(Error::invalid(format!(
                "clamp_eps must lie in (0, 0.01], got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T = f64> {
    pub l_self: T,
    pub l_ent: T,
    pub l_new: T,
    pub total: T,
    /// Mean new-cluster probability over the episode.
    pub p_new: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn plain(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            l_self: self.l_self.value(),
            l_ent: self.l_ent.value(),
            l_new: self.l_new.value(),
            total: self.total.value(),
            p_new: self.p_new.value(),
        }
    }
}

/// Every discrete choice made while walking one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameDecision {
    pub created: bool,
    pub evicted: Option<u64>,
    /// Prototype index achieving the max similarity in the E-step.
    pub nearest: Option<usize>,
    /// Winner of the one-hot pseudo label, when the ratio is zero.
    pub pseudo_argmax: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EpisodeTrace<T> {
    pub loss: LossBreakdown<T>,
    pub decisions: Vec<FrameDecision>,
    /// Per-frame new-cluster probabilities.
    pub uhat: Vec<f64>,
}

/// Distillation target for the original view against the updated memory,
/// at temperature `ratio * tau`. A zero ratio gives the one-hot argmax.
/// The result never carries gradient.
pub fn pseudo_label<T: Real>(
    z: &[T],
    memory: &PrototypeMemory<T>,
    tau: T,
    ratio: f64,
) -> Result<Vec<T>> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if ratio == 0.0 {
        let sims = values(&memory.similarities(z)?);
        let k = argmax(&sims).expect("nonempty");
        return Ok((0..sims.len())
            .map(|i| T::constant(if i == k { 1.0 } else { 0.0 }))
            .collect());
    }
    let z: Vec<T> = z.iter().map(Real::detach).collect();
    let y = memory.assignment(&z, tau.detach() * ratio)?;
    Ok(y.iter().map(Real::detach).collect())
}

/// Cross-entropy -sum_k ytilde_k log yhat'_k of one frame.
pub fn self_loss_term<T: Real>(ytilde: &[T], yhat_aug: &[T]) -> Result<T> {
    if ytilde.len() != yhat_aug.len() {
        return Err(Error::DimensionMismatch {
            expected: ytilde.len(),
            found: yhat_aug.len(),
        });
    }
    let terms: Vec<T> = ytilde
        .iter()
        .zip(yhat_aug)
        .filter(|(t, _)| t.value() != 0.0)
        .map(|(&t, &y)| -(t * y.ln()))
        .collect();
    Ok(T::sum(&terms))
}

fn self_loss_from_logits<T: Real>(ytilde: &[T], logits: &[T]) -> Result<T> {
    let log_y = log_softmax(logits)?;
    let terms: Vec<T> = ytilde
        .iter()
        .zip(&log_y)
        .filter(|(t, _)| t.value() != 0.0)
        .map(|(&t, &l)| -(t * l))
        .collect();
    Ok(T::sum(&terms))
}

/// Shannon entropy in nats, with 0 log 0 = 0.
pub fn entropy_loss_term<T: Real>(yhat: &[T]) -> T {
    let terms: Vec<T> = yhat
        .iter()
        .filter(|y| y.value() > 0.0)
        .map(|&y| -(y * y.ln()))
        .collect();
    T::sum(&terms)
}

/// -log Beta(p; 4 mu, 4 - 4 mu), with p clamped to [eps, 1 - eps].
pub fn new_cluster_loss<T: Real>(p_new: T, mu: f64, eps: f64) -> Result<T> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::invalid(format!(
            "Beta mean must lie in (0, 1), got {mu}"
        )));
    }
    let a = 4.0 * mu;
    let b = 4.0 - a;
    let p = if p_new.value() < eps {
        T::constant(eps)
    } else if p_new.value() > 1.0 - eps {
        T::constant(1.0 - eps)
    } else {
        p_new
    };
    let log_pdf = p.ln() * (a - 1.0) + (-p + 1.0).ln() * (b - 1.0) - ln_beta(a, b);
    Ok(-log_pdf)
}

/// Runs one episode through a memory and accumulates the loss.
pub fn episode_loss<T: Real>(
    frames: &[EpisodeFrame],
    memory: &mut PrototypeMemory<T>,
    params: &LiveParams<T>,
    config: &LossConfig,
    alpha: f64,
) -> Result<EpisodeTrace<T>> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("episode loss"));
    }
    config.validate()?;
    let cluster = params.cluster;
    let detach_all = |v: &[T]| -> Vec<T> { v.iter().map(Real::detach).collect() };
    let mut l_self = Vec::with_capacity(frames.len());
    let mut l_ent = Vec::with_capacity(frames.len());
    let mut uhats = Vec::with_capacity(frames.len());
    let mut decisions = Vec::with_capacity(frames.len());

    for frame in frames {
        let x: Vec<T> = frame.features.iter().map(|&v| T::constant(v)).collect();
        let z = encode(&x, params)?;
        let out = memory.e_step(&z, &cluster)?;
        l_ent.push(entropy_loss_term(&out.yhat));
        uhats.push(out.uhat);

        let assign = !memory.is_empty() && out.uhat.value() < alpha;
        let mut decision = FrameDecision {
            created: !assign,
            evicted: None,
            nearest: out.nearest,
            pseudo_argmax: None,
        };
        if config.stop_prototype_gradient {
            let z = detach_all(&z);
            if assign {
                memory.m_step(&z, &detach_all(&out.yhat), out.uhat.detach())?;
            } else {
                decision.evicted = memory.create(&z).1;
            }
        } else if assign {
            memory.m_step(&z, &out.yhat, out.uhat)?;
        } else {
            decision.evicted = memory.create(&z).1;
        }
        memory.advance();

        let ytilde = pseudo_label(&z, memory, cluster.tau, params.pseudo_ratio)?;
        if params.pseudo_ratio == 0.0 {
            decision.pseudo_argmax = argmax(&values(&ytilde));
        }
        let x2: Vec<T> = frame.view2.iter().map(|&v| T::constant(v)).collect();
        let z2 = encode(&x2, params)?;
        let logits: Vec<T> = memory
            .similarities(&z2)?
            .into_iter()
            .map(|c| c / cluster.tau)
            .collect();
        l_self.push(self_loss_from_logits(&ytilde, &logits)?);
        decisions.push(decision);
    }

    let n = frames.len() as f64;
    let l_self = T::sum(&l_self) / n;
    let l_ent = T::sum(&l_ent) / n;
    let p_new = T::sum(&uhats) / n;
    let l_new = new_cluster_loss(p_new, config.beta_mean, config.clamp_eps)?;
    let total = l_self + l_ent * config.lambda_ent + l_new * config.lambda_new;
    Ok(EpisodeTrace {
        loss: LossBreakdown {
            l_self,
            l_ent,
            l_new,
            total,
            p_new,
        },
        decisions,
        uhat: values(&uhats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ParameterSet, ScalarInit};
    use crate::memory::{ClusterParams, MemoryConfig};
    use crate::numerics::{softmax, Tape};

    fn mem<T: Real>() -> PrototypeMemory<T> {
        PrototypeMemory::new(MemoryConfig::default()).unwrap()
    }

    #[test]
    fn pseudo_label_one_hot() {
        let mut m = mem::<f64>();
        m.create(&[1.0, 0.0]);
        m.create(&[0.0, 1.0]);
        // cosines 0.8944, 0.4472: argmax is the first
        let y = pseudo_label(&[2.0, 1.0], &m, 0.1, 0.0).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
        // ties resolve low
        let y = pseudo_label(&[1.0, 1.0], &m, 0.1, 0.0).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn pseudo_label_ratio_one_is_the_assignment() {
        let mut m = mem::<f64>();
        m.create(&[1.0, 0.0]);
        m.create(&[0.6, 0.8]);
        let z = [0.8, 0.6];
        let p = ClusterParams::new(-12.0, 1.0, 0.1);
        let y = pseudo_label(&z, &m, 0.1, 1.0).unwrap();
        assert_eq!(y, m.e_step(&z, &p).unwrap().yhat);
    }

    #[test]
    fn pseudo_label_sharpened() {
        // cosines 0.9 and 0.8 at tau 0.1 * 0.1: softmax([90, 80])
        let z = [0.9, (1.0 - 0.81f64).sqrt()];
        let mut m = mem::<f64>();
        // prototypes at angle acos(0.9) and acos(0.8) from z
        let (a, b) = (0.9f64.acos(), 0.8f64.acos());
        let base = z[1].atan2(z[0]);
        m.create(&[(base - a).cos(), (base - a).sin()]);
        m.create(&[(base + b).cos(), (base + b).sin()]);
        let y = pseudo_label(&z, &m, 0.1, 0.1).unwrap();
        // 50-digit reference for softmax([90, 80])
        assert!((y[0] - 0.999_954_602_131_297_6).abs() < 1e-10, "{y:?}");
        assert!((y[1] - 4.539_786_870_243_439_5e-5).abs() < 1e-10);
    }

    #[test]
    fn pseudo_label_on_empty_memory_errors() {
        assert!(matches!(
            pseudo_label(&[1.0], &mem::<f64>(), 0.1, 0.0),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn pseudo_label_carries_no_gradient() {
        let tape = Tape::new();
        let z = tape.params(&[0.6, 0.8]);
        let tau = tape.param(0.1);
        let mut m = mem();
        m.create(&z);
        m.create(&[tape.param(1.0), tape.param(0.0)]);
        for ratio in [0.0, 0.1, 1.0] {
            let y = pseudo_label(&z, &m, tau, ratio).unwrap();
            assert!(y.iter().all(Real::is_constant));
        }
    }

    #[test]
    fn self_loss_examples() {
        assert_eq!(self_loss_term(&[0.0, 1.0], &[0.3, 1.0]).unwrap(), 0.0);
        let e = (-1.0f64).exp();
        assert!((self_loss_term(&[1.0, 0.0], &[e, 1.0 - e]).unwrap() - 1.0).abs() < 1e-15);
        let v = self_loss_term(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - 0.836_988_216_785_835_8).abs() < 1e-15);
        assert!(self_loss_term(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn self_loss_from_logits_agrees() {
        let logits = [1.2, -0.3, 4.0];
        let t = [0.2, 0.3, 0.5];
        let a = self_loss_from_logits(&t, &logits).unwrap();
        let b = self_loss_term(&t, &softmax(&logits).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_loss_term(&[0.0, 1.0, 0.0]), 0.0);
        for k in 1..6 {
            let u = vec![1.0 / k as f64; k];
            assert!((entropy_loss_term(&u) - (k as f64).ln()).abs() < 1e-14);
        }
        assert!((entropy_loss_term(&[0.7, 0.3]) - 0.610_864_302_054_893_5).abs() < 1e-15);
    }

    #[test]
    fn new_cluster_loss_examples() {
        let v = new_cluster_loss(0.5, 0.5, 1e-4).unwrap();
        assert!((v + 0.405_465_108_108_164_4).abs() < 1e-14);
        // symmetric Beta(2, 2): 0.5 is the unique minimizer
        for p in [0.01, 0.2, 0.45, 0.49, 0.51, 0.7, 0.99] {
            assert!(new_cluster_loss(p, 0.5, 1e-4).unwrap() > v);
        }
        let clamped = new_cluster_loss(0.0, 0.5, 1e-4).unwrap();
        assert!(clamped.is_finite());
        assert_eq!(clamped, new_cluster_loss(1e-4, 0.5, 1e-4).unwrap());
        assert!(new_cluster_loss(0.5, 1.0, 1e-4).is_err());
        assert!(new_cluster_loss(0.5, 0.0, 1e-4).is_err());
    }

    #[test]
    fn new_cluster_loss_gradient() {
        // d/dp of -[(a-1) ln p + (b-1) ln(1-p)] for a = 2.4, b = 1.6
        let tape = Tape::new();
        let p = tape.param(0.3);
        let g = tape.grad(new_cluster_loss(p, 0.6, 1e-4).unwrap()).unwrap();
        let expected = -(1.4 / 0.3 - 0.6 / 0.7);
        assert!((g.params()[0] - expected).abs() < 1e-12);
        // clamped region is flat
        let tape = Tape::new();
        let p = tape.param(0.0);
        let loss = new_cluster_loss(p, 0.5, 1e-4).unwrap();
        assert!(matches!(tape.grad(loss), Err(Error::NotOnTape)) || loss.is_constant());
    }

    fn frame(t: usize, x: Vec<f64>, v: Vec<f64>) -> EpisodeFrame {
        EpisodeFrame {
            t,
            context: 0,
            label: Some(0),
            features: x,
            view2: v,
        }
    }

    fn identity_params(beta: f64) -> ParameterSet {
        ParameterSet::init(
            EncoderConfig::identity(3),
            ScalarInit {
                beta,
                ..ScalarInit::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn single_frame_episode() {
        let p = identity_params(-12.0);
        let frames = [frame(0, vec![1.0, 2.0, 2.0], vec![1.0, 2.0, 2.1])];
        let mut m = mem();
        let cfg = LossConfig::default();
        let tr = episode_loss(&frames, &mut m, &p.plain(), &cfg, 0.5).unwrap();
        assert_eq!(tr.loss.p_new, 1.0);
        assert_eq!(tr.loss.l_ent, 0.0);
        // one prototype: every assignment is certain
        assert!(tr.loss.l_self.abs() < 1e-15);
        assert!(tr.decisions[0].created);
        assert_eq!(m.len(), 1);
        let expected = new_cluster_loss(1.0, 0.5, 1e-4).unwrap();
        assert_eq!(tr.loss.total, 0.5 * expected);
    }

    #[test]
    fn identical_views_single_prototype_give_zero_self_loss() {
        let p = identity_params(12.0);
        let x = vec![0.3, -0.2, 0.9];
        let frames: Vec<_> = (0..4).map(|t| frame(t, x.clone(), x.clone())).collect();
        let mut m = mem();
        let tr = episode_loss(&frames, &mut m, &p.plain(), &LossConfig::default(), 0.5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(tr.loss.l_self, 0.0);
        assert!(tr.decisions[1..].iter().all(|d| !d.created));
    }

    #[test]
    fn breakdown_invariants() {
        let p = identity_params(-8.0);
        let frames: Vec<_> = (0..12)
            .map(|t| {
                let a = t as f64 * 0.7;
                let x = vec![a.cos(), a.sin(), 0.3];
                let v = vec![a.cos() + 0.05, a.sin(), 0.31];
                frame(t, x, v)
            })
            .collect();
        let cfg = LossConfig {
            lambda_ent: 0.7,
            lambda_new: 1.3,
            ..LossConfig::default()
        };
        let mut m = mem();
        let tr = episode_loss(&frames, &mut m, &p.plain(), &cfg, 0.5).unwrap();
        let l = tr.loss;
        assert!(l.l_self >= 0.0 && l.l_ent >= 0.0);
        assert!((l.total - (l.l_self + 0.7 * l.l_ent + 1.3 * l.l_new)).abs() < 1e-12);
        let mean_u: f64 = tr.uhat.iter().sum::<f64>() / 12.0;
        assert!((l.p_new - mean_u).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&l.p_new));
        // some frames assigned, some created
        assert!(tr.decisions.iter().any(|d| d.created));
        assert!(tr.decisions.iter().any(|d| !d.created));
    }

    #[test]
    fn empty_episode_errors() {
        let p = identity_params(-12.0);
        assert!(episode_loss(&[], &mut mem(), &p.plain(), &LossConfig::default(), 0.5).is_err());
    }

    #[test]
    fn stop_gradient_mode_detaches_prototypes() {
        let p = identity_params(-8.0);
        let frames: Vec<_> = (0..6)
            .map(|t| {
                let a = t as f64 * 0.3;
                frame(t, vec![a.cos(), a.sin(), 0.2], vec![a.cos(), a.sin(), 0.25])
            })
            .collect();
        for stop in [false, true] {
            let tape = Tape::new();
            let live = p.lift(&tape);
            let mut m = mem();
            let cfg = LossConfig {
                stop_prototype_gradient: stop,
                ..LossConfig::default()
            };
            let tr = episode_loss(&frames, &mut m, &live, &cfg, 0.5).unwrap();
            let all_const = m
                .prototypes()
                .iter()
                .all(|p| p.count.is_constant() && p.mean.iter().all(Real::is_constant));
            assert_eq!(all_const, stop);
            let g = tape.grad(tr.loss.total).unwrap();
            for proto in m.prototypes() {
                for v in &proto.mean {
                    if stop {
                        assert_eq!(g.wrt(v), 0.0);
                    }
                }
            }
        }
    }
}
