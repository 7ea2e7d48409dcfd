use std::collections::HashMap;

use advst::trainer::sample_rng;
use advst::transforms::{ChainDistribution, TransformChain};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn p_value(observed: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    ChiSquared::new((observed.len() - 1) as f64).unwrap().sf(stat)
}

fn draw(dist: &ChainDistribution, n: u64) -> HashMap<TransformChain, u64> {
    let mut counts = HashMap::new();
    for i in 0..n {
        let mut rng = sample_rng(7, 0, i);
        *counts.entry(dist.sample_chain(&mut rng)).or_insert(0) += 1;
    }
    counts
}

#[test]
fn lengths_and_chains_are_uniform() {
    let dist = ChainDistribution::with_l_max(3).unwrap();
    let n = 100_000u64;
    let counts = draw(&dist, n);
    let support = dist.enumerate();
    assert_eq!(support.len() as u64, dist.total_chains());
    assert!(counts.keys().all(|c| support.contains(c)));

    let mut by_len = [0.0; 3];
    for (c, &k) in &counts {
        by_len[c.len() - 1] += k as f64;
    }
    assert!(p_value(&by_len, &[n as f64 / 3.0; 3]) > 0.01, "{by_len:?}");

    let observed: Vec<f64> = support.iter().map(|c| *counts.get(c).unwrap_or(&0) as f64).collect();
    let expected: Vec<f64> = support.iter().map(|c| n as f64 * dist.chain_probability(c).unwrap()).collect();
    assert!((expected.iter().sum::<f64>() - n as f64).abs() < 1e-6);
    assert!(p_value(&observed, &expected) > 0.01);
}

#[test]
fn a_biased_sampler_is_detected() {
    // sanity check on the statistic: dropping one length class must fail
    let dist = ChainDistribution::with_l_max(2).unwrap();
    let counts = draw(&dist, 20_000);
    let support = dist.enumerate();
    let observed: Vec<f64> = support.iter().map(|c| if c.len() == 1 { 0.0 } else { *counts.get(c).unwrap_or(&0) as f64 }).collect();
    let expected: Vec<f64> = support.iter().map(|c| 20_000.0 * dist.chain_probability(c).unwrap()).collect();
    assert!(p_value(&observed, &expected) < 1e-6);
}
