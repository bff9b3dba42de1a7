//! Brute-force clustering scores over small label sequences.
//!
//! Expected mutual information is the plain average of MI over every
//! relabeling permutation of the second argument, and the Rand index is
//! counted pair by pair. Nothing here shares code with the library.

use std::collections::HashMap;

/// All set partitions of {0..n} as restricted growth strings.
pub fn partitions(n: usize) -> Vec<Vec<u8>> {
    fn rec(prefix: &mut Vec<u8>, max: u8, n: usize, out: &mut Vec<Vec<u8>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for b in 0..=max + 1 {
            prefix.push(b);
            rec(prefix, max.max(b), n, out);
            prefix.pop();
        }
    }
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    let mut prefix = vec![0u8];
    rec(&mut prefix, 0, n, &mut out);
    out
}

fn blocks(p: &[u8]) -> usize {
    p.iter().map(|&b| b as usize + 1).max().unwrap_or(0)
}

fn sizes(p: &[u8]) -> Vec<usize> {
    let mut s = vec![0; blocks(p)];
    for &b in p {
        s[b as usize] += 1;
    }
    s
}

fn entropy(p: &[u8]) -> f64 {
    let n = p.len() as f64;
    sizes(p)
        .into_iter()
        .map(|c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum()
}

fn mi(u: &[u8], v: &[u8]) -> f64 {
    let n = u.len() as f64;
    let (su, sv) = (sizes(u), sizes(v));
    let mut joint = [[0u32; 8]; 8];
    for (&a, &b) in u.iter().zip(v) {
        joint[a as usize][b as usize] += 1;
    }
    let mut total = 0.0;
    for (i, row) in joint.iter().enumerate().take(su.len()) {
        for (j, &c) in row.iter().enumerate().take(sv.len()) {
            if c > 0 {
                let c = c as f64;
                total += c / n * (n * c / (su[i] as f64 * sv[j] as f64)).ln();
            }
        }
    }
    total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(p.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, p, out);
            if k.is_multiple_of(2) {
                p.swap(i, k - 1);
            } else {
                p.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut p, &mut out);
    out
}

fn canonical(mut s: Vec<usize>) -> Vec<usize> {
    s.sort_unstable_by(|a, b| b.cmp(a));
    s
}

fn with_sizes(s: &[usize]) -> Vec<u8> {
    s.iter()
        .enumerate()
        .flat_map(|(b, &c)| std::iter::repeat_n(b as u8, c))
        .collect()
}

/// Scores for every pair of partitions of one base-set size.
pub struct Oracle {
    n: usize,
    emi: HashMap<(Vec<usize>, Vec<usize>), f64>,
}

impl Oracle {
    pub fn new(n: usize) -> Self {
        let perms = permutations(n);
        let mut shapes: Vec<Vec<usize>> =
            partitions(n).iter().map(|p| canonical(sizes(p))).collect();
        shapes.sort();
        shapes.dedup();
        let mut emi = HashMap::new();
        for a in &shapes {
            let u = with_sizes(a);
            for b in &shapes {
                let v = with_sizes(b);
                let mut acc = 0.0;
                let mut shuffled = vec![0u8; n];
                for p in &perms {
                    for (i, &j) in p.iter().enumerate() {
                        shuffled[i] = v[j];
                    }
                    acc += mi(&u, &shuffled);
                }
                emi.insert((a.clone(), b.clone()), acc / perms.len() as f64);
            }
        }
        Self { n, emi }
    }

    fn same_partition(u: &[u8], v: &[u8]) -> bool {
        (0..u.len()).all(|i| (0..i).all(|j| (u[i] == u[j]) == (v[i] == v[j])))
    }

    pub fn ami(&self, u: &[u8], v: &[u8]) -> f64 {
        assert_eq!(u.len(), self.n);
        if Self::same_partition(u, v) {
            return 1.0;
        }
        let e = self.emi[&(canonical(sizes(u)), canonical(sizes(v)))];
        (mi(u, v) - e) / (0.5 * (entropy(u) + entropy(v)) - e)
    }

    pub fn ari(&self, u: &[u8], v: &[u8]) -> f64 {
        let (mut tp, mut fp, mut fn_, mut tn) = (0f64, 0f64, 0f64, 0f64);
        for i in 0..u.len() {
            for j in 0..i {
                match (u[i] == u[j], v[i] == v[j]) {
                    (true, true) => tp += 1.0,
                    (true, false) => fn_ += 1.0,
                    (false, true) => fp += 1.0,
                    (false, false) => tn += 1.0,
                }
            }
        }
        if fp == 0.0 && fn_ == 0.0 {
            return 1.0;
        }
        let pairs = tp + fp + fn_ + tn;
        let expected = (tp + fn_) * (tp + fp) / pairs;
        let max = 0.5 * ((tp + fn_) + (tp + fp));
        (tp - expected) / (max - expected)
    }
}
