//! Gradient of the Green's function of an edge and its symmetry.

use percolab::env::{ConductanceLaw, EdgeRef, Environment, EnvironmentSpec};
use percolab::geometry::maximal_cluster;
use percolab::lattice::Point;
use percolab::solver::greens_gradient;

fn main() -> percolab::Result<()> {
    let env = Environment::generate(&EnvironmentSpec::new(2, 3, 0.8, 0.5, ConductanceLaw::Uniform, 2))?;
    let g = maximal_cluster(&env, &env.lattice().as_axis_box())?;
    // the first cluster edge at each of two nearby vertices
    let edge_at = |p: Point| -> percolab::Result<EdgeRef> {
        let v = g.index_of(p).ok_or_else(|| percolab::Error::Topology(format!("{p} is off the cluster")))?;
        EdgeRef::new(p, g.vertex(g.neighbours(v)[0] as usize))
    };
    let e = edge_at(Point::new2(0, 0))?;
    let f = edge_at(Point::new2(2, 1))?;
    let ge = greens_gradient(&g, &e, 0, 1e-12)?;
    let gf = greens_gradient(&g, &f, 0, 1e-12)?;
    println!("grad G^e(f) = {:.12}", ge.at_edge(&g, &f));
    println!("grad G^f(e) = {:.12}", gf.at_edge(&g, &e));
    println!("grad G^e(e) = {:.12}", ge.at_edge(&g, &e));
    Ok(())
}
