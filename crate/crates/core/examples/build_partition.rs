//! Builds the partition into good cubes, verifies it and coarsens a function.

use percolab::env::{ConductanceLaw, Environment, EnvironmentSpec};
use percolab::geometry::{maximal_cluster, CheckDensity, GoodnessMap};
use percolab::lattice::Point;
use percolab::partition::{build_partition_with, cell_of, coarsen, verify, PartitionOptions};
use percolab::solver::LatticeFunction;

fn main() -> percolab::Result<()> {
    let env = Environment::generate(&EnvironmentSpec::new(2, 5, 0.99, 0.5, ConductanceLaw::Uniform, 5))?;
    let map = GoodnessMap::compute(&env, CheckDensity::Grid)?;
    let part = build_partition_with(&env, &map, &PartitionOptions::default())?;
    println!("{} cells, {} violations", part.cells().len(), verify(&part, &map).len());

    let mut hist = [0usize; 6];
    for c in part.cells() {
        hist[c.scale as usize] += 1;
    }
    println!("cells per scale: {:?}", &hist[1..]);
    println!("cell of the origin: {}", cell_of(&part, Point::ORIGIN)?);

    let g = maximal_cluster(&env, &env.lattice().as_axis_box())?;
    let u = LatticeFunction::from_fn(&g, |x| x.0[0] as f64);
    let coarse = coarsen(&part, &g, &u)?;
    println!("[x1]_P at (5, 5) = {}", coarse.at(Point::new2(5, 5))?);
    Ok(())
}
