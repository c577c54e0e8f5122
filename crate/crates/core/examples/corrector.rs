//! Solves the corrector in direction e_1 and prints its growth on balls.

use percolab::analysis::{lq_centered, osc, Normalization};
use percolab::env::{ConductanceLaw, Environment, EnvironmentSpec};
use percolab::solver::corrector;

fn main() -> percolab::Result<()> {
    let env = Environment::generate(&EnvironmentSpec::new(2, 5, 0.75, 0.5, ConductanceLaw::Uniform, 9))?;
    let sol = corrector(&env, &env.lattice().as_axis_box(), [1.0, 0.0, 0.0], 1e-8)?;
    println!("{} unknowns, {} iterations", sol.report.unknowns, sol.report.iterations);
    for r in [8i64, 16, 32, 64] {
        let ball: Vec<usize> = (0..sol.graph.len())
            .filter(|&i| {
                let x = sol.graph.vertex(i);
                x.0[0] * x.0[0] + x.0[1] * x.0[1] <= r * r
            })
            .collect();
        let l2 = lq_centered(&sol.chi, &ball, 2.0, Normalization::Average)?;
        println!("R = {r:>2}: osc {:.4}, centered L2 {:.4}", osc(&sol.chi, &ball)?, l2);
    }
    Ok(())
}
