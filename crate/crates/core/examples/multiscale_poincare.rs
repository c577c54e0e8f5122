//! Both sides of the multiscale Poincaré inequality for a band-limited function.

use percolab::experiments::multiscale_ratios;

fn main() -> percolab::Result<()> {
    let radii = [8.0, 16.0, 32.0];
    for seed in 0..3 {
        let r = multiscale_ratios(2, seed, &radii, 2.0)?;
        println!("function {seed}: LHS/RHS at R = 8, 16, 32: {:.4} {:.4} {:.4}", r[0], r[1], r[2]);
    }
    Ok(())
}
