use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::quantile_nearest_rank;

/// `ceil(ln(1/delta) / p)` with `p = p_detect * (1 - epsilon)`.
pub fn tta_bound(p_detect: f64, epsilon: f64, delta: f64) -> u64 {
    let p = p_detect * (1.0 - epsilon);
    ((1.0 / delta).ln() / p).ceil() as u64
}

/// Trials until first success, support {1, 2, ...}, by inverse CDF.
pub fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    ((u.ln() / (1.0 - p).ln()).ceil() as u64).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaBoundReport {
    pub p_detect: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
    pub bound: u64,
    pub quantile: u64,
    pub fraction_within: f64,
    pub holds: bool,
}

pub fn tta_bound_check(
    p_detect: f64,
    epsilon: f64,
    delta: f64,
    trials: usize,
    seed: u64,
) -> TtaBoundReport {
    let p = p_detect * (1.0 - epsilon);
    let bound = tta_bound(p_detect, epsilon, delta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..trials)
        .map(|_| sample_geometric(p, &mut rng) as f64)
        .collect();
    let quantile = quantile_nearest_rank(&samples, 1.0 - delta).unwrap_or(0.0) as u64;
    let within = samples.iter().filter(|&&x| x <= bound as f64).count();
    let fraction_within = if trials == 0 {
        0.0
    } else {
        within as f64 / trials as f64
    };
    TtaBoundReport {
        p_detect,
        epsilon,
        delta,
        trials,
        bound,
        quantile,
        fraction_within,
        holds: trials > 0 && quantile <= bound,
    }
}
