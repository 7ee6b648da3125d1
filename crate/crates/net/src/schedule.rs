//! Session start times for simulated client populations.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};

/// Start offsets in seconds for `n_clients` arriving as a Poisson process
/// with mean gap `lambda_s`. The first client starts at 0.
pub fn schedule_poisson(n_clients: usize, lambda_s: f64, seed: u64) -> Vec<f64> {
    assert!(lambda_s > 0.0 && lambda_s.is_finite(), "lambda must be positive");
    let gaps = Exp::new(1.0 / lambda_s).expect("positive rate");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut t = 0.0;
    (0..n_clients)
        .map(|i| {
            if i > 0 {
                t += gaps.sample(&mut rng);
            }
            t
        })
        .collect()
}
