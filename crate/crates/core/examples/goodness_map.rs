//! Fraction of good and well-connected triadic cubes per scale.

use percolab::env::{ConductanceLaw, Environment, EnvironmentSpec};
use percolab::geometry::{CheckDensity, GoodnessMap};

fn main() -> percolab::Result<()> {
    for p in [0.75, 0.9, 0.99] {
        let env = Environment::generate(&EnvironmentSpec::new(2, 5, p, 0.5, ConductanceLaw::Uniform, 3))?;
        let map = GoodnessMap::compute(&env, CheckDensity::Grid)?;
        let row: Vec<String> = (1..=5).map(|n| format!("{:.3}", map.good_fraction(n))).collect();
        println!("p = {p:.2}: good fraction by scale {}", row.join(" "));
    }
    Ok(())
}
