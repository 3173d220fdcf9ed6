//! Reference computations written directly from the definitions, kept
//! separate from the library so they can check it.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;

/// `½·Σᵥ [p log(p/q) + q log(q/p)]` with each probability floored at 1e-9
/// inside the logarithm, as two separate KL sums.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    let floor = |v: f64| if v < 1e-9 { 1e-9 } else { v };
    let mut forward = 0.0;
    let mut backward = 0.0;
    for i in 0..p.len() {
        forward += p[i] * (floor(p[i]).ln() - floor(q[i]).ln());
        backward += q[i] * (floor(q[i]).ln() - floor(p[i]).ln());
    }
    (forward + backward) / 2.0
}

/// A random distribution over `n` outcomes, sometimes with exact zeros.
pub fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let sparse = rng.gen_bool(0.2);
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen::<f64>().powi(3) + 1e-12
            }
        })
        .collect();
    let keep = rng.gen_range(0..n);
    v[keep] += 1e-3;
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Corpus BLEU-4 computed by explicit n-gram enumeration and clipping.
pub fn bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let mut num = [0u64; 4];
    let mut den = [0u64; 4];
    let (mut c, mut r) = (0u64, 0u64);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len() as u64;
        r += rf.len() as u64;
        for n in 1..=4 {
            let mut ref_counts: HashMap<Vec<u32>, u64> = HashMap::new();
            for i in 0..rf.len().saturating_sub(n - 1) {
                *ref_counts.entry(rf[i..i + n].to_vec()).or_default() += 1;
            }
            let mut hyp_counts: HashMap<Vec<u32>, u64> = HashMap::new();
            for i in 0..h.len().saturating_sub(n - 1) {
                *hyp_counts.entry(h[i..i + n].to_vec()).or_default() += 1;
            }
            for (g, k) in hyp_counts {
                den[n - 1] += k;
                num[n - 1] += k.min(*ref_counts.get(&g).unwrap_or(&0));
            }
        }
    }
    if num.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| (num[i] as f64 / den[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_p.exp()
}
