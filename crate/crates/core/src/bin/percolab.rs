use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use percolab::env::{EdgeRef, Environment};
use percolab::experiments::{self, Experiment, RunConfig, RunRecord};
use percolab::geometry::{maximal_cluster, CheckDensity, GoodnessMap};
use percolab::lattice::Point;
use percolab::partition::{build_partition_with, verify, PartitionOptions};
use percolab::solver::{corrector_on, greens_solve, SolveOptions};
use percolab::{Error, Result};

#[derive(Parser)]
#[command(name = "percolab", version, about = "Correctors and renormalization on percolation clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Sectioned key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides the configuration)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for ensembles
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Treat failed samples and soft checks as failures
    #[arg(long, global = true)]
    strict: bool,
    /// Also run the slow resampling-sensitivity study (decay)
    #[arg(long, global = true)]
    extended: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an environment and write its binary dump
    Generate,
    /// Build and verify the partition of an environment
    Partition(EnvArg),
    /// Solve the corrector on the maximal cluster
    Solve(EnvArg),
    /// Gradient of the Green's function of one edge
    Greens {
        #[command(flatten)]
        env: EnvArg,
        /// Edge as `x,y[,z]:direction`
        #[arg(long, default_value = "0,0:0")]
        edge: String,
    },
    /// Corrector growth over the radius ladder
    Scaling,
    /// Spatial-average decay of the coarse corrector gradient
    Decay,
    /// Goodness, coarseness and volume statistics
    Stats,
    /// Structural checks and inequality ratios
    Validate,
}

#[derive(Args)]
struct EnvArg {
    /// Read the environment from a binary dump instead of sampling it
    #[arg(long)]
    env: Option<PathBuf>,
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(w) = common.workers {
        c.workers = w;
    }
    if let Some(o) = &common.out {
        c.out = Some(o.display().to_string());
    }
    c.strict |= common.strict;
    Ok(c)
}

fn out_dir(c: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(c.out.clone().unwrap_or_else(|| "percolab-out".into()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_env(c: &RunConfig, arg: &EnvArg) -> Result<Environment> {
    match &arg.env {
        Some(p) => Environment::read_from(std::io::BufReader::new(File::open(p)?)),
        None => Environment::generate(&c.env_spec(c.seed)),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn parse_edge(s: &str, dim: usize) -> Result<EdgeRef> {
    let bad = || Error::Config(format!("edge '{s}' is not of the form x,y[,z]:direction"));
    let (coords, dir) = s.split_once(':').ok_or_else(bad)?;
    let c: Vec<i64> = coords.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let dir: usize = dir.trim().parse().map_err(|_| bad())?;
    if c.len() != dim || dir >= dim {
        return Err(bad());
    }
    Ok(EdgeRef::from_base(Point::from_slice(&c), dir))
}

fn finish(record: &RunRecord, dir: &Path, strict: bool) -> Result<bool> {
    record.write(dir)?;
    for c in &record.checks {
        println!("{} {} value={:.6e} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.detail);
    }
    for (k, v) in &record.fits {
        println!("{k} = {v:.6}");
    }
    println!("samples={} failures={} wall={:.1}s", record.samples.len(), record.failures, record.wall_clock_seconds);
    let soft_ok = record.checks.iter().all(|c| c.passed);
    Ok(record.passed && (!strict || (record.failures == 0 && soft_ok)))
}

fn execute(cli: Cli) -> Result<bool> {
    let mut c = config(&cli.common)?;
    match cli.command {
        Command::Generate => {
            let env = Environment::generate(&c.env_spec(c.seed))?;
            let dir = out_dir(&c)?;
            env.write_to(create(&dir, "environment.bin")?)?;
            fs::write(dir.join("environment.json"), serde_json::to_string_pretty(env.spec())?)?;
            println!("wrote {} bonds, open fraction {:.4}", env.num_bonds(), env.open_fraction());
            Ok(true)
        }
        Command::Partition(arg) => {
            let env = load_env(&c, &arg)?;
            let dir = out_dir(&c)?;
            let map = GoodnessMap::compute(&env, CheckDensity::Grid)?;
            map.write_csv(create(&dir, "goodness.csv")?)?;
            match build_partition_with(&env, &map, &PartitionOptions::default()) {
                Ok(p) => {
                    p.write_csv(create(&dir, "partition.csv")?)?;
                    p.write_lookup(create(&dir, "lookup.csv")?)?;
                    let v = verify(&p, &map);
                    println!("{} cells, {} violations, fingerprint {:016x}", p.cells().len(), v.len(), p.fingerprint());
                    for x in &v {
                        eprintln!("violation: {x}");
                    }
                    Ok(v.is_empty())
                }
                Err(Error::Unresolvable(cubes)) => {
                    println!("unresolvable: {} bad cube(s) cannot be covered", cubes.len());
                    Ok(!c.strict)
                }
                Err(e) => Err(e),
            }
        }
        Command::Solve(arg) => {
            let env = load_env(&c, &arg)?;
            let dir = out_dir(&c)?;
            let region = env.lattice().as_axis_box();
            let graph = maximal_cluster(&env, &region)?;
            let sol = corrector_on(&env, &region, graph, c.direction, SolveOptions::tol(c.tol))?;
            sol.chi.write_csv(&sol.graph, create(&dir, "corrector.csv")?)?;
            fs::write(dir.join("solve.json"), sol.report.to_json()?)?;
            println!("{} unknowns, {} iterations, residual {:.3e}", sol.report.unknowns, sol.report.iterations, sol.report.residual);
            Ok(sol.report.converged)
        }
        Command::Greens { env: arg, edge } => {
            let env = load_env(&c, &arg)?;
            let dir = out_dir(&c)?;
            let e = parse_edge(&edge, env.dim())?;
            let graph = maximal_cluster(&env, &env.lattice().as_axis_box())?;
            let (grad, _, report) = greens_solve(&graph, &e, 0, SolveOptions::tol(c.tol))?;
            grad.write_csv(&graph, create(&dir, "greens_gradient.csv")?)?;
            fs::write(dir.join("solve.json"), report.to_json()?)?;
            println!("∇G^e(e) = {:.10}", grad.at_edge(&graph, &e));
            Ok(report.converged)
        }
        Command::Scaling | Command::Decay | Command::Stats | Command::Validate => {
            c.experiment = match cli.command {
                Command::Scaling => Experiment::Scaling,
                Command::Decay => Experiment::Decay,
                Command::Stats => Experiment::Stats,
                _ => Experiment::Validate,
            };
            let dir = out_dir(&c)?;
            let record = experiments::run(&c)?;
            let mut ok = finish(&record, &dir, c.strict)?;
            if cli.common.extended && c.experiment == Experiment::Decay {
                let sens = experiments::run_sensitivity_study(&c, 16)?;
                ok &= finish(&sens, &dir.join("sensitivity"), c.strict)?;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
