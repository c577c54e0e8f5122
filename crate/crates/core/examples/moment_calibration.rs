//! θ* calibration of stretched-exponential moments on known samples.

use percolab::analysis::{estimate_os, tail_exponent};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

fn main() -> percolab::Result<()> {
    let constant = vec![1.5; 100];
    println!("constant 1.5, s = 1: θ* = {:.6} (1.5 / ln 2 = {:.6})", estimate_os(&constant, 1.0)?.theta, 1.5 / 2f64.ln());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exp: Vec<f64> = (0..100_000).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    println!("exponential(1), s = 1: θ* = {:.4}", estimate_os(&exp, 1.0)?.theta);
    println!("fitted tail exponent: {:.3}", tail_exponent(&exp)?);
    Ok(())
}
