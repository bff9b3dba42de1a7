use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ami;
use super::ap::RankedPrediction;
use crate::error::{Error, Result};
use crate::memory::{ClusterParams, MemoryConfig, PrototypeMemory};
use crate::numerics::{argmax, cosine_similarity, softmax};
use crate::optim::{Adam, AdamConfig};
use crate::rng::seeded;

/// Precomputed embeddings of one episode with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedEpisode {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<Option<u64>>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )))
    }
}

/// Greedy online clustering: each frame is labeled with the identity of
/// the prototype it joins, or of the prototype it creates.
pub fn unsupervised_readout(
    embeddings: &[Vec<f64>],
    cluster: &ClusterParams,
    memory: MemoryConfig,
    alpha: f64,
) -> Result<Vec<u64>> {
    check_alpha(alpha)?;
    let mut mem = PrototypeMemory::new(memory)?;
    embeddings
        .iter()
        .map(|z| Ok(mem.step(z, cluster, alpha)?.1.id()))
        .collect()
}

/// Online prediction with label feedback. Each frame is first predicted
/// from the memory as it stands, then the memory is updated as if the
/// assignment were given by the true label: a one-hot M-step onto that
/// label's prototype, or a new prototype for an unseen label.
pub fn supervised_readout(
    embeddings: &[Vec<f64>],
    labels: &[Option<u64>],
    cluster: &ClusterParams,
    memory: MemoryConfig,
) -> Result<Vec<RankedPrediction>> {
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            found: labels.len(),
        });
    }
    let mut mem = PrototypeMemory::new(memory)?;
    let mut class_of: HashMap<u64, u64> = HashMap::new();
    let mut proto_of: HashMap<u64, u64> = HashMap::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut out = Vec::with_capacity(labels.len());
    for (frame, (z, label)) in embeddings.iter().zip(labels).enumerate() {
        let truth = label.ok_or(Error::MissingLabel { episode: 0, frame })?;
        let e = mem.e_step(z, cluster)?;
        let predicted = e.nearest.map(|k| class_of[&mem.prototypes()[k].id]);
        out.push(RankedPrediction {
            uhat: e.uhat,
            predicted,
            truth,
            known: seen.contains(&truth),
        });
        seen.insert(truth);

        match proto_of.get(&truth).and_then(|&id| mem.position(id)) {
            Some(k) => {
                let mut onehot = vec![0.0; mem.len()];
                onehot[k] = 1.0;
                mem.m_step(z, &onehot, 0.0)?;
            }
            None => {
                let (id, evicted) = mem.create(z);
                if let Some(old) = evicted {
                    if let Some(c) = class_of.remove(&old) {
                        proto_of.remove(&c);
                    }
                }
                class_of.insert(id, truth);
                proto_of.insert(truth, id);
            }
        }
        mem.advance();
    }
    Ok(out)
}

/// 21 evenly spaced thresholds from 0.025 to 0.975.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..21).map(|i| 0.025 + 0.0475 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AmiMax {
    pub ami: f64,
    pub alpha: f64,
    /// Mean AMI at every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Maximum over `grid` of the mean unsupervised-readout AMI. Ties go to
/// the earliest grid point.
pub fn ami_max(
    episodes: &[EmbeddedEpisode],
    cluster: &ClusterParams,
    memory: MemoryConfig,
    grid: &[f64],
) -> Result<AmiMax> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("threshold grid"));
    }
    if episodes.is_empty() {
        return Err(Error::EmptyInput("AMI sweep"));
    }
    let truths: Vec<Vec<u64>> = episodes
        .iter()
        .enumerate()
        .map(|(e, ep)| {
            ep.labels
                .iter()
                .enumerate()
                .map(|(frame, l)| l.ok_or(Error::MissingLabel { episode: e, frame }))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut curve = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let scores: Vec<f64> = episodes
            .par_iter()
            .zip(&truths)
            .map(|(ep, truth)| {
                let pred = unsupervised_readout(&ep.embeddings, cluster, memory, alpha)?;
                ami(truth, &pred)
            })
            .collect::<Result<_>>()?;
        curve.push((alpha, scores.iter().sum::<f64>() / scores.len() as f64));
    }
    let best = curve
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, (a, v)| {
            if v > best.1 {
                (a, v)
            } else {
                best
            }
        });
    Ok(AmiMax {
        ami: best.1,
        alpha: best.0,
        curve,
    })
}

fn check_split(x: &[Vec<f64>], y: &[u64], what: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    Ok(())
}

/// Accuracy of a cosine-similarity k-nearest-neighbor vote. Neighbor ties
/// go to the earlier training point; vote ties to the smallest label.
pub fn knn_readout(
    train: &[Vec<f64>],
    train_labels: &[u64],
    test: &[Vec<f64>],
    test_labels: &[u64],
    k: usize,
) -> Result<f64> {
    check_split(train, train_labels, "kNN training set")?;
    check_split(test, test_labels, "kNN test set")?;
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!(
            "k must lie in [1, {}], got {k}",
            train.len()
        )));
    }
    let hits = test
        .par_iter()
        .zip(test_labels)
        .map(|(x, &y)| -> Result<bool> {
            let sims: Vec<f64> = train
                .iter()
                .map(|t| cosine_similarity(x, t))
                .collect::<Result<_>>()?;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
            let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
            for &i in &order[..k] {
                *votes.entry(train_labels[i]).or_default() += 1;
            }
            let top = votes.values().copied().max().unwrap_or(0);
            let winner = votes.iter().find(|(_, &c)| c == top).map(|(&l, _)| l);
            Ok(winner == Some(y))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / test.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearReadoutConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearReadoutConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearReadout {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

struct Softmax {
    classes: Vec<u64>,
    dim: usize,
    /// Row-major class-by-dim weights followed by one bias per class.
    w: Vec<f64>,
}

impl Softmax {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes.len();
        (0..c)
            .map(|k| {
                let row = &self.w[k * self.dim..(k + 1) * self.dim];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.w[c * self.dim + k]
            })
            .collect()
    }

    fn predict(&self, x: &[f64]) -> u64 {
        let l = self.logits(x);
        self.classes[argmax(&l).expect("at least two classes")]
    }

    fn accuracy(&self, x: &[Vec<f64>], y: &[u64]) -> f64 {
        let hits = x
            .iter()
            .zip(y)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / x.len() as f64
    }
}

/// Multinomial logistic regression on frozen embeddings, trained with
/// mini-batch Adam on the mean cross-entropy.
pub fn linear_readout(
    train: &[Vec<f64>],
    train_labels: &[u64],
    test: &[Vec<f64>],
    test_labels: &[u64],
    config: &LinearReadoutConfig,
) -> Result<LinearReadout> {
    check_split(train, train_labels, "linear readout training set")?;
    check_split(test, test_labels, "linear readout test set")?;
    let mut classes: Vec<u64> = train_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("linear readout needs at least two classes"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let dim = train[0].len();
    if let Some(bad) = train.iter().chain(test).find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let index: HashMap<u64, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let c = classes.len();
    let mut model = Softmax {
        classes,
        dim,
        w: vec![0.0; c * dim + c],
    };
    let mut adam = Adam::new(
        model.w.len(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = seeded(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; model.w.len()];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &train[i];
                let p = softmax(&model.logits(x))?;
                let target = index[&train_labels[i]];
                for (k, pk) in p.iter().enumerate() {
                    let d = (pk - if k == target { 1.0 } else { 0.0 }) * scale;
                    for (g, xi) in grad[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                    grad[c * dim + k] += d;
                }
            }
            adam.step(&mut model.w, &grad, config.lr)?;
        }
    }
    Ok(LinearReadout {
        train_accuracy: model.accuracy(train, train_labels),
        test_accuracy: model.accuracy(test, test_labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{average_precision, ApMode};
    use rand_distr::{Distribution, Normal};

    fn axis(d: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    fn params() -> ClusterParams {
        ClusterParams::new(-12.0, 1.0, 0.1)
    }

    #[test]
    fn alternating_orthogonal_classes() {
        let z: Vec<_> = (0..10).map(|t| axis(3, t % 2)).collect();
        let truth: Vec<u64> = (0..10).map(|t| (t % 2) as u64).collect();
        // û is sigmoid(2) on a match and sigmoid(12) otherwise
        let pred = unsupervised_readout(&z, &params(), MemoryConfig::default(), 0.95).unwrap();
        assert_eq!(pred.iter().collect::<HashSet<_>>().len(), 2);
        assert_eq!(ami(&truth, &pred).unwrap(), 1.0);
    }

    #[test]
    fn threshold_limits() {
        let z: Vec<_> = (0..8).map(|t| axis(3, t % 3)).collect();
        let one = unsupervised_readout(&z, &params(), MemoryConfig::default(), 1.0).unwrap();
        assert!(one.iter().all(|&id| id == one[0]));
        let fresh = unsupervised_readout(&z, &params(), MemoryConfig::default(), 0.0).unwrap();
        assert_eq!(fresh, (0..8).collect::<Vec<u64>>());
        assert!(unsupervised_readout(&z, &params(), MemoryConfig::default(), 1.5).is_err());
    }

    #[test]
    fn eviction_retires_identities() {
        let z: Vec<_> = (0..6).map(|t| axis(6, t)).collect();
        let memory = MemoryConfig {
            capacity: 2,
            ..MemoryConfig::default()
        };
        let pred = unsupervised_readout(&z, &params(), memory, 0.5).unwrap();
        assert_eq!(pred, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn supervised_single_class() {
        let z: Vec<_> = (0..5).map(|_| axis(2, 0)).collect();
        let labels = vec![Some(7); 5];
        let preds = supervised_readout(&z, &labels, &params(), MemoryConfig::default()).unwrap();
        assert!(!preds[0].known && preds[0].predicted.is_none());
        assert!(preds[1..].iter().all(|p| p.known && p.correct()));
        let ap = average_precision(&preds, ApMode::SequenceTotal).unwrap();
        assert_eq!(ap.ap, 1.0);
    }

    #[test]
    fn supervised_two_class_and_shuffled_control() {
        let truth: Vec<u64> = (0..40).map(|t| ((t / 3) % 2) as u64).collect();
        let z: Vec<_> = truth.iter().map(|&c| axis(2, c as usize)).collect();
        let labels: Vec<_> = truth.iter().map(|&c| Some(c)).collect();
        let preds = supervised_readout(&z, &labels, &params(), MemoryConfig::default()).unwrap();
        let ap = average_precision(&preds, ApMode::SequenceTotal).unwrap().ap;
        assert_eq!(ap, 1.0);
        let mut shuffled = z.clone();
        shuffled.shuffle(&mut seeded(3));
        let preds =
            supervised_readout(&shuffled, &labels, &params(), MemoryConfig::default()).unwrap();
        let control = average_precision(&preds, ApMode::SequenceTotal).unwrap().ap;
        assert!(control < ap, "{control}");
    }

    #[test]
    fn supervised_needs_labels() {
        let r = supervised_readout(&[axis(2, 0)], &[None], &params(), MemoryConfig::default());
        assert!(matches!(r, Err(Error::MissingLabel { frame: 0, .. })));
    }

    fn separable_set() -> Vec<EmbeddedEpisode> {
        (0..3)
            .map(|e| {
                let truth: Vec<u64> = (0..12).map(|t| ((t + e) % 3) as u64).collect();
                EmbeddedEpisode {
                    embeddings: truth.iter().map(|&c| axis(3, c as usize)).collect(),
                    labels: truth.into_iter().map(Some).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn ami_max_properties() {
        let eps = separable_set();
        let grid = default_alpha_grid();
        assert_eq!(grid.len(), 21);
        assert!((grid[20] - 0.975).abs() < 1e-12);
        let full = ami_max(&eps, &params(), MemoryConfig::default(), &grid).unwrap();
        assert_eq!(full.ami, 1.0);
        assert!(full.alpha > 0.025 && full.alpha < 0.975);
        for &(a, v) in &full.curve {
            assert!(full.ami >= v);
            let single = ami_max(&eps, &params(), MemoryConfig::default(), &[a]).unwrap();
            assert_eq!(single.ami, v);
            assert_eq!(single.alpha, a);
        }
        let coarse: Vec<f64> = grid.iter().step_by(4).copied().collect();
        let c = ami_max(&eps, &params(), MemoryConfig::default(), &coarse).unwrap();
        assert!(full.ami >= c.ami);
        assert!(ami_max(&eps, &params(), MemoryConfig::default(), &[]).is_err());
    }

    fn blobs(n_per: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<u64>) {
        let mut rng = seeded(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centers = [[sep, 0.0, 0.0], [0.0, sep, 0.0], [0.0, 0.0, sep]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n_per {
            for (c, center) in centers.iter().enumerate() {
                x.push(center.iter().map(|m| m + noise.sample(&mut rng)).collect());
                y.push(c as u64);
            }
        }
        (x, y)
    }

    /// Brute-force neighbor search with an explicit full sort of
    /// (negated similarity, index) pairs.
    fn knn_oracle(train: &[Vec<f64>], ty: &[u64], x: &[f64], k: usize) -> u64 {
        let mut d: Vec<(f64, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let dot: f64 = t.iter().zip(x).map(|(a, b)| a * b).sum();
                let n = (t.iter().map(|v| v * v).sum::<f64>()
                    * x.iter().map(|v| v * v).sum::<f64>())
                .sqrt();
                (-dot / n, i)
            })
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut counts = [0; 16];
        for &(_, i) in &d[..k] {
            counts[ty[i] as usize] += 1;
        }
        let top = *counts.iter().max().unwrap();
        counts.iter().position(|&c| c == top).unwrap() as u64
    }

    #[test]
    fn knn_examples() {
        let (x, y) = blobs(40, 6.0, 1);
        let (tx, ty) = blobs(30, 6.0, 2);
        let acc = knn_readout(&x, &y, &tx, &ty, 5).unwrap();
        assert!(acc >= 0.95, "{acc}");
        let oracle = tx
            .iter()
            .zip(&ty)
            .filter(|(p, &l)| knn_oracle(&x, &y, p, 5) == l)
            .count();
        assert_eq!(acc, oracle as f64 / tx.len() as f64);
        // duplicate of a training point
        assert_eq!(knn_readout(&x, &y, &x[..5], &y[..5], 1).unwrap(), 1.0);
        // k = everything: majority class, ties to the smallest label
        let labels = [2u64, 2, 1, 1, 1];
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64]).collect();
        let acc = knn_readout(&pts, &labels, &pts, &labels, 5).unwrap();
        assert_eq!(acc, 3.0 / 5.0);
        assert!(knn_readout(&[], &[], &pts, &labels, 1).is_err());
        assert!(knn_readout(&pts, &labels, &pts, &labels, 6).is_err());
    }

    #[test]
    fn linear_readout_examples() {
        let (x, y) = blobs(40, 6.0, 1);
        let (tx, ty) = blobs(30, 6.0, 2);
        let cfg = LinearReadoutConfig {
            epochs: 100,
            lr: 0.05,
            ..LinearReadoutConfig::default()
        };
        let r = linear_readout(&x, &y, &tx, &ty, &cfg).unwrap();
        let knn = knn_readout(&x, &y, &tx, &ty, 5).unwrap();
        assert!(
            (r.test_accuracy - knn).abs() <= 0.02,
            "{} vs {knn}",
            r.test_accuracy
        );

        let sep_x: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i as f64 * 0.37).sin()])
            .collect();
        let sep_y: Vec<u64> = (0..40).map(|i| (i % 2) as u64).collect();
        let r = linear_readout(&sep_x, &sep_y, &sep_x, &sep_y, &cfg).unwrap();
        assert_eq!(r.train_accuracy, 1.0);

        let mut shuffled = y.clone();
        shuffled.shuffle(&mut seeded(5));
        let mut test_shuffled = ty.clone();
        test_shuffled.shuffle(&mut seeded(6));
        let r = linear_readout(&x, &shuffled, &tx, &test_shuffled, &cfg).unwrap();
        assert!(
            (r.test_accuracy - 1.0 / 3.0).abs() <= 0.1,
            "{}",
            r.test_accuracy
        );

        assert!(linear_readout(&x, &vec![0; x.len()], &tx, &ty, &cfg).is_err());
    }
}
