//! Spatial average of the mollified coarse corrector gradient at the origin.

use percolab::env::{ConductanceLaw, Environment, EnvironmentSpec};
use percolab::geometry::{maximal_cluster, CheckDensity, GoodnessMap};
use percolab::partition::{build_partition_with, coarsen, MollifierSpec, PartitionOptions};
use percolab::analysis::spatial_average_gradient;
use percolab::solver::{corrector_on, SolveOptions};

fn main() -> percolab::Result<()> {
    let env = Environment::generate(&EnvironmentSpec::new(2, 5, 0.99, 0.5, ConductanceLaw::Uniform, 1))?;
    let map = GoodnessMap::compute(&env, CheckDensity::Grid)?;
    let part = build_partition_with(&env, &map, &PartitionOptions::default())?;
    let region = env.lattice().as_axis_box();
    let sol = corrector_on(&env, &region, maximal_cluster(&env, &region)?, [1.0, 0.0, 0.0], SolveOptions::tol(1e-8))?;
    let coarse = coarsen(&part, &sol.graph, &sol.chi)?;
    let spec = MollifierSpec::default();
    for r in [2.0, 4.0, 8.0, 16.0] {
        let v = spatial_average_gradient(&coarse, &spec, r, [0.0; 3])?;
        println!("R = {r:>4}: ({:+.5}, {:+.5})", v[0], v[1]);
    }
    Ok(())
}
