//! A small seeded ensemble from an inline configuration, written to a temp directory.

use percolab::experiments::{run, RunConfig};

const CONFIG: &str = "
[run]
experiment = scaling
samples = 6
seed = 3
workers = 2

[environment]
dim = 2
scale = 4
p = 0.75
lambda = 0.5
law = uniform

[analysis]
radii = 4, 8, 16, 32
q = 2, 4
";

fn main() -> percolab::Result<()> {
    let config = RunConfig::from_ini_str(CONFIG)?;
    let record = run(&config)?;
    for (k, v) in &record.fits {
        println!("{k:>24} = {v:.5}");
    }
    let dir = std::env::temp_dir().join("percolab-ensemble");
    record.write(&dir)?;
    println!("{} samples, {} failures, written to {}", record.samples.len(), record.failures, dir.display());
    Ok(())
}
