//! Clustering scores, ranked average precision, and readout procedures.
//!
//! Entropies are in nats. Degenerate partitions follow the usual
//! conventions: two single-cluster (or two all-singleton) labelings score
//! 1.0 under AMI and ARI, and a zero entropy denominator scores 1.0 under
//! homogeneity and completeness.

mod ap;
mod readout;

pub use ap::{average_precision, ApMode, ApResult, RankedPrediction};
pub use readout::{
    ami_max, default_alpha_grid, knn_readout, linear_readout, supervised_readout,
    unsupervised_readout, AmiMax, EmbeddedEpisode, LinearReadout, LinearReadoutConfig,
};

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Counts n_ij of items with true class i and predicted cluster j. Rows and
/// columns are numbered by first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    /// Row-major R x C cells.
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

const LINEAR_SCAN_LIMIT: usize = 32;

/// Dense ids in order of first appearance. Small label sets are looked up
/// by linear scan, larger ones through a hash map.
fn dense_ids<L: Hash + Eq + Copy>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut seen: Vec<L> = Vec::new();
    let mut map: HashMap<L, usize> = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            if seen.len() < LINEAR_SCAN_LIMIT {
                if let Some(i) = seen.iter().position(|s| s == l) {
                    return i;
                }
                seen.push(*l);
                if seen.len() == LINEAR_SCAN_LIMIT {
                    map.extend(seen.iter().enumerate().map(|(i, &s)| (s, i)));
                }
                return seen.len() - 1;
            }
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    let distinct = if seen.len() < LINEAR_SCAN_LIMIT {
        seen.len()
    } else {
        map.len()
    };
    (ids, distinct)
}

impl ContingencyTable {
    pub fn new<U, V>(u: &[U], v: &[V]) -> Result<Self>
    where
        U: Hash + Eq + Copy,
        V: Hash + Eq + Copy,
    {
        if u.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: u.len(),
                found: v.len(),
            });
        }
        if u.is_empty() {
            return Err(Error::EmptyInput("contingency table"));
        }
        let (ui, r) = dense_ids(u);
        let (vi, c) = dense_ids(v);
        let mut counts = vec![0u64; r * c];
        let mut row_sums = vec![0u64; r];
        let mut col_sums = vec![0u64; c];
        for (&i, &j) in ui.iter().zip(&vi) {
            counts[i * c + j] += 1;
            row_sums[i] += 1;
            col_sums[j] += 1;
        }
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            total: u.len() as u64,
        })
    }

    /// (rows, columns).
    pub fn shape(&self) -> (usize, usize) {
        (self.row_sums.len(), self.col_sums.len())
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.col_sums.len() + col]
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        let c = self.col_sums.len();
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(move |(k, &n)| (k / c, k % c, n))
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        self.cells()
            .map(|(i, j, nij)| {
                let nij = nij as f64;
                let outer = self.row_sums[i] as f64 * self.col_sums[j] as f64;
                nij / n * (n * nij / outer).ln()
            })
            .sum()
    }

    /// Expected mutual information under the hypergeometric model of
    /// random labelings with these marginals.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.total as usize;
        let lf = log_factorials(n);
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.row_sums {
            let a = a as usize;
            for &b in &self.col_sums {
                let b = b as usize;
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                let fixed = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
                for k in lo..=hi {
                    let kf = k as f64;
                    let term = kf / nf * (nf * kf / (a as f64 * b as f64)).ln();
                    let log_p = fixed - lf[k] - lf[a - k] - lf[b - k] - lf[n + k - a - b];
                    emi += term * log_p.exp();
                }
            }
        }
        emi
    }

    pub fn row_entropy(&self) -> f64 {
        entropy(&self.row_sums, self.total)
    }

    pub fn col_entropy(&self) -> f64 {
        entropy(&self.col_sums, self.total)
    }

    /// H(row | column).
    pub fn row_given_col_entropy(&self) -> f64 {
        let n = self.total as f64;
        -self
            .cells()
            .map(|(_, j, nij)| {
                let nij = nij as f64;
                nij / n * (nij / self.col_sums[j] as f64).ln()
            })
            .sum::<f64>()
    }

    /// H(column | row).
    pub fn col_given_row_entropy(&self) -> f64 {
        let n = self.total as f64;
        -self
            .cells()
            .map(|(i, _, nij)| {
                let nij = nij as f64;
                nij / n * (nij / self.row_sums[i] as f64).ln()
            })
            .sum::<f64>()
    }
}

/// ln k! for k = 0..=n.
pub fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn entropy(sums: &[u64], total: u64) -> f64 {
    let n = total as f64;
    -sums
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// The two labelings induce the same partition.
fn same_partition(t: &ContingencyTable) -> bool {
    t.row_sums.len() == t.col_sums.len() && t.cells().count() == t.row_sums.len()
}

/// Adjusted mutual information with arithmetic-mean normalization.
pub fn ami<U, V>(u: &[U], v: &[V]) -> Result<f64>
where
    U: Hash + Eq + Copy,
    V: Hash + Eq + Copy,
{
    let t = ContingencyTable::new(u, v)?;
    if same_partition(&t) {
        return Ok(1.0);
    }
    let mi = t.mutual_information();
    let emi = t.expected_mutual_information();
    let denom = 0.5 * (t.row_entropy() + t.col_entropy()) - emi;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((mi - emi) / denom)
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index.
pub fn ari<U, V>(u: &[U], v: &[V]) -> Result<f64>
where
    U: Hash + Eq + Copy,
    V: Hash + Eq + Copy,
{
    let t = ContingencyTable::new(u, v)?;
    let both: u128 = t.cells().map(|(_, _, n)| pairs(n)).sum();
    let same_u: u128 = t.row_sums.iter().map(|&a| pairs(a)).sum();
    let same_v: u128 = t.col_sums.iter().map(|&b| pairs(b)).sum();
    let all = pairs(t.total);
    // pair confusion: together in both, in u only, in v only, in neither
    let tp = both as i128;
    let fn_ = (same_u - both) as i128;
    let fp = (same_v - both) as i128;
    let tn = all as i128 - tp - fn_ - fp;
    if fn_ == 0 && fp == 0 {
        return Ok(1.0);
    }
    let num = 2.0 * ((tp * tn) as f64 - (fn_ * fp) as f64);
    let den = ((tp + fn_) * (fn_ + tn)) as f64 + ((tp + fp) * (fp + tn)) as f64;
    Ok(num / den)
}

/// (homogeneity, completeness) of predicted clusters `v` against classes
/// `u`.
pub fn homogeneity_completeness<U, V>(u: &[U], v: &[V]) -> Result<(f64, f64)>
where
    U: Hash + Eq + Copy,
    V: Hash + Eq + Copy,
{
    let t = ContingencyTable::new(u, v)?;
    let hc = t.row_entropy();
    let hk = t.col_entropy();
    let h = if hc == 0.0 {
        1.0
    } else {
        1.0 - t.row_given_col_entropy() / hc
    };
    let c = if hk == 0.0 {
        1.0
    } else {
        1.0 - t.col_given_row_entropy() / hk
    };
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn table_marginals() {
        let t = ContingencyTable::new(&[0, 0, 1, 1, 2], &[5, 5, 5, 7, 7]).unwrap();
        assert_eq!(t.shape(), (3, 2));
        let cells: Vec<u64> = (0..3)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| t.get(i, j))
            .collect();
        assert_eq!(cells, vec![2, 0, 1, 1, 0, 1]);
        assert_eq!(t.row_sums(), &[2, 2, 1]);
        assert_eq!(t.col_sums(), &[3, 2]);
        assert_eq!(t.total(), 5);
        assert!(ContingencyTable::new(&[0], &[0, 1]).is_err());
        assert!(ContingencyTable::new::<u8, u8>(&[], &[]).is_err());
    }

    #[test]
    fn ami_examples() {
        assert_eq!(ami(&[0, 0, 1, 1, 2], &[4, 4, 9, 9, 1]).unwrap(), 1.0);
        assert_eq!(ami(&[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(ami(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(ami(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
        // Averaging MI over all 24 relabelings at 50 digits gives
        // E[MI] = MI = 0.2157615543388357, so the score is exactly chance.
        let t = ContingencyTable::new(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((t.mutual_information() - 0.215_761_554_338_835_7).abs() < 1e-15);
        assert!((t.expected_mutual_information() - 0.215_761_554_338_835_7).abs() < 1e-15);
        let v = ami(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!(v.abs() < 1e-14, "{v}");
        assert!(ami(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 1], &[1, 0]).unwrap(), 1.0);
        // pairs: tp 1, fn 1, fp 2, tn 2
        let v = ari(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
        assert!((v - 0.0).abs() < 1e-15, "{v}");
        let v = ari(&[0, 0, 1, 1, 2], &[0, 0, 1, 2, 2]).unwrap();
        // tp 1, fn 1, fp 1, tn 7: 2(7 - 1)/(2*8 + 2*8)
        assert!((v - 12.0 / 32.0).abs() < 1e-15, "{v}");
        assert_eq!(ari(&[3], &[4]).unwrap(), 1.0);
    }

    #[test]
    fn homogeneity_completeness_examples() {
        assert_eq!(
            homogeneity_completeness(&[0, 1, 1], &[2, 3, 3]).unwrap(),
            (1.0, 1.0)
        );
        assert_eq!(
            homogeneity_completeness(&[0, 1], &[0, 0]).unwrap(),
            (0.0, 1.0)
        );
        let (h, c) = homogeneity_completeness(&[0, 0, 1, 1], &[0, 1, 2, 2]).unwrap();
        assert!((h - 1.0).abs() < 1e-15);
        // H(K) = 1.5 ln 2, H(K|C) = 0.5 ln 2
        assert!((c - 2.0 / 3.0).abs() < 1e-15);
    }

    fn relabel(xs: &[u32], perm: &[u32]) -> Vec<u32> {
        xs.iter().map(|&x| perm[x as usize]).collect()
    }

    #[test]
    fn many_labels_use_the_map() {
        let u: Vec<u32> = (0..200).map(|i| i % 70).collect();
        let v: Vec<u32> = (0..200).map(|i| (i * 7) % 50).collect();
        let t = ContingencyTable::new(&u, &v).unwrap();
        assert_eq!(t.shape(), (70, 50));
        assert_eq!(t.row_sums().iter().sum::<u64>(), 200);
        assert_eq!(t.get(0, 0), 1);
        assert_eq!(ami(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn relabeling_invariance() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let u: Vec<u32> = (0..30).map(|_| rng.random_range(0..4)).collect();
            let v: Vec<u32> = (0..30).map(|_| rng.random_range(0..5)).collect();
            let pu = [3, 0, 2, 1];
            let pv = [4, 2, 0, 1, 3];
            let (u2, v2) = (relabel(&u, &pu), relabel(&v, &pv));
            assert!((ami(&u, &v).unwrap() - ami(&u2, &v2).unwrap()).abs() < 1e-12);
            assert!((ari(&u, &v).unwrap() - ari(&u2, &v2).unwrap()).abs() < 1e-12);
            let a = homogeneity_completeness(&u, &v).unwrap();
            let b = homogeneity_completeness(&u2, &v2).unwrap();
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_partitions_average_near_zero() {
        let mut rng = seeded(12);
        let (mut sa, mut sr) = (0.0, 0.0);
        for _ in 0..200 {
            let u: Vec<u32> = (0..60).map(|_| rng.random_range(0..5)).collect();
            let v: Vec<u32> = (0..60).map(|_| rng.random_range(0..5)).collect();
            sa += ami(&u, &v).unwrap();
            sr += ari(&u, &v).unwrap();
        }
        assert!((sa / 200.0).abs() < 0.05, "{}", sa / 200.0);
        assert!((sr / 200.0).abs() < 0.05, "{}", sr / 200.0);
    }
}
