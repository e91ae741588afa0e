//! Run every stage of the default experiment into a directory and print the
//! two result tables.
//!
//! `cargo run --release --example run_pipeline -- [out-dir] [seed]`

use std::fs;
use std::path::PathBuf;

use dfp_lab::config::ExperimentConfig;
use dfp_lab::pipeline::full_run;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/example".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let config = ExperimentConfig {
        seed,
        out_dir: out_dir.clone(),
        ..ExperimentConfig::default()
    };
    config.validate()?;

    for manifest in full_run(&config)? {
        println!("{:<10} {} artifacts", manifest.stage.id(), manifest.artifacts.len());
    }
    for table in ["table1.csv", "table2.csv"] {
        println!("\n{table}\n{}", fs::read_to_string(out_dir.join("reports").join(table))?);
    }
    Ok(())
}
