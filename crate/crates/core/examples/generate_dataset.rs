//! Renders the default training set and one evaluation set per domain
//! preset, then prints per-domain statistics.
//!
//! cargo run --release --example generate_dataset -- [out_dir]

use std::path::PathBuf;

use depthforge::run::{self, RunConfig};
use depthforge::synthbench::{read_dataset, DomainSample};

fn main() -> depthforge::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/example-data"), PathBuf::from);
    let cfg = RunConfig {
        output_dir: out,
        ..Default::default()
    };
    for (dir, n) in run::cmd_generate(&cfg)? {
        let (spec, samples) = read_dataset(&dir)?;
        let mean = |f: fn(&DomainSample) -> &[f64]| {
            let (sum, count) = samples
                .iter()
                .fold((0.0, 0), |(s, c), d| (s + f(d).iter().sum::<f64>(), c + f(d).len()));
            sum / count as f64
        };
        println!(
            "{:<10} {n:>3} samples  mean visual {:.3}  mean depth {:.3}  ({})",
            spec.domain.name,
            mean(|d| d.visual.data()),
            mean(|d| d.depth_input.data()),
            dir.display()
        );
    }
    Ok(())
}
