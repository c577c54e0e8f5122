//! Samples an environment on □_4 in two dimensions and reports bond statistics.

use percolab::env::{ConductanceLaw, Environment, EnvironmentSpec};
use percolab::geometry::maximal_cluster;

fn main() -> percolab::Result<()> {
    let spec = EnvironmentSpec::new(2, 4, 0.75, 0.5, ConductanceLaw::Uniform, 42);
    let env = Environment::generate(&spec)?;
    let cluster = maximal_cluster(&env, &env.lattice().as_axis_box())?;
    println!("side {}: {} bonds, open fraction {:.4}", env.lattice().side(), env.num_bonds(), env.open_fraction());
    println!("maximal cluster: {} of {} vertices", cluster.len(), env.lattice().num_vertices());

    let mut dump = Vec::new();
    env.write_to(&mut dump)?;
    let back = Environment::read_from(dump.as_slice())?;
    assert_eq!(back.conductances(), env.conductances());
    println!("binary dump: {} bytes, round trip exact", dump.len());
    Ok(())
}
