use std::collections::{HashMap, HashSet};

use protostream::streams::{
    globalize_labels, iid_shuffle, lag1_label_autocorrelation, EpisodeFrame, StreamConfig,
    StreamGenerator, StreamSummary, DISTRACTOR_LABEL_BASE,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson statistic after pooling adjacent bins until every expected
/// count reaches five; returns (statistic, degrees of freedom).
fn pooled_chi_squared(observed: &[f64], expected: &[f64]) -> (f64, usize) {
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&ob, &ex) in observed.iter().zip(expected) {
        o += ob;
        e += ex;
        if e >= 5.0 {
            bins.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += o;
        last.1 += e;
    }
    let stat = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    (stat, bins.len() - 1)
}

fn p_value(stat: f64, dof: usize) -> f64 {
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

/// Exact distribution of the table count after `n` customers: customer i
/// (1-based) opens a table with probability theta / (i - 1 + theta).
fn table_count_pmf(n: usize, theta: f64) -> Vec<f64> {
    let mut pmf = vec![1.0];
    for i in 1..=n {
        let p = theta / ((i - 1) as f64 + theta);
        let mut next = vec![0.0; pmf.len() + 1];
        for (k, &q) in pmf.iter().enumerate() {
            next[k] += q * (1.0 - p);
            next[k + 1] += q * p;
        }
        pmf = next;
    }
    pmf
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

#[test]
fn class_counts_follow_the_crp() {
    let config = StreamConfig::default();
    let generator = StreamGenerator::new(config.clone()).unwrap();
    let episodes = 1000;
    let mut pmf = vec![1.0];
    for block in config.context_blocks() {
        pmf = convolve(&pmf, &table_count_pmf(block, config.crp_concentration));
    }
    let mut observed = vec![0.0; pmf.len()];
    for e in 0..episodes {
        let ep = generator.episode(2024, e);
        let classes: HashSet<u64> = ep.iter().filter_map(|f| f.label).collect();
        observed[classes.len()] += 1.0;
    }
    let expected: Vec<f64> = pmf.iter().map(|p| p * episodes as f64).collect();
    let (stat, dof) = pooled_chi_squared(&observed, &expected);
    let p = p_value(stat, dof);
    assert!(p > 0.01, "chi-squared {stat} on {dof} dof, p = {p}");
}

fn labeled(n: usize) -> Vec<EpisodeFrame> {
    (0..n)
        .map(|t| EpisodeFrame {
            t,
            context: 0,
            label: Some(t as u64),
            features: vec![t as f64],
            view2: vec![t as f64],
        })
        .collect()
}

#[test]
fn full_queue_shuffle_is_a_uniform_permutation() {
    let trials = 24_000;
    let mut counts: HashMap<Vec<usize>, f64> = HashMap::new();
    for seed in 0..trials {
        let out = iid_shuffle(vec![labeled(5)], 5, seed);
        assert_eq!(out.len(), 1);
        let order: Vec<usize> = out[0].iter().map(|f| f.features[0] as usize).collect();
        assert!(out[0].iter().enumerate().all(|(t, f)| f.t == t));
        *counts.entry(order).or_default() += 1.0;
    }
    assert_eq!(counts.len(), 120, "every ordering appears");
    let observed: Vec<f64> = counts.values().copied().collect();
    let expected = vec![trials as f64 / 120.0; 120];
    let (stat, dof) = pooled_chi_squared(&observed, &expected);
    assert_eq!(dof, 119);
    let p = p_value(stat, dof);
    assert!(p > 0.01, "chi-squared {stat}, p = {p}");
}

#[test]
fn shuffling_removes_temporal_correlation() {
    let config = StreamConfig::default();
    let generator = StreamGenerator::new(config).unwrap();
    let mut episodes = generator.episodes(7, 40);
    // episode-local ids name different classes in different episodes
    globalize_labels(&mut episodes);
    let before: Vec<EpisodeFrame> = episodes.iter().flatten().cloned().collect();
    let shuffled = iid_shuffle(episodes, 6000, 8);
    let after: Vec<EpisodeFrame> = shuffled.into_iter().flatten().collect();
    assert_eq!(before.len(), after.len());
    let (b, a) = (
        lag1_label_autocorrelation(&before),
        lag1_label_autocorrelation(&after),
    );
    // Consecutive customers of one restaurant share a table with
    // probability 1 / (1 + theta) = 0.5 by exchangeability; 4 of the 149
    // transitions per episode cross a context boundary and never match.
    let expected = 0.5 * 145.0 / 149.0;
    assert!(
        (b - expected).abs() < 0.04,
        "before {b}, expected about {expected}"
    );
    assert!(a.abs() < 0.05, "after {a}");
}

#[test]
fn default_streams_are_bursty() {
    let generator = StreamGenerator::new(StreamConfig::default()).unwrap();
    let summary = StreamSummary::of(&generator.episodes(3, 50));
    assert!(
        summary.lag1_same_rate > 2.0 * summary.marginal_same_rate,
        "{summary:?}"
    );
}

#[test]
fn distractor_frequency_matches_the_rate() {
    let config = StreamConfig {
        episode_len: 100,
        num_contexts: 2,
        distractor_rate: 0.5,
        distractor_pool: 1,
        ..StreamConfig::default()
    };
    let generator = StreamGenerator::new(config).unwrap();
    let frames: Vec<EpisodeFrame> = (0..100).flat_map(|i| generator.episode(5, i)).collect();
    assert_eq!(frames.len(), 10_000);
    let hits = frames
        .iter()
        .filter(|f| f.label == Some(DISTRACTOR_LABEL_BASE))
        .count();
    let rate = hits as f64 / frames.len() as f64;
    assert!((rate - 0.5).abs() <= 0.03, "{rate}");
}

#[test]
fn views_always_share_labels_through_shuffling() {
    let config = StreamConfig {
        episode_len: 30,
        num_contexts: 3,
        view_noise: 0.0,
        frame_noise: 0.2,
        ..StreamConfig::default()
    };
    let generator = StreamGenerator::new(config).unwrap();
    for ep in iid_shuffle(generator.episodes(1, 10), 100, 2) {
        for f in ep {
            assert_eq!(f.features, f.view2);
        }
    }
}
