//! Print one rendered image per class of the source and target domains, and
//! confirm the two label spaces share no concept.
//!
//! `cargo run --release --example synthetic_domains`

use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::generate_domain;
use dfp_lab::Tensor;

const RAMP: &[u8] = b" .:-=+*#%@";

fn ascii(image: &Tensor, side: usize) -> Vec<String> {
    image.data()[..side * side]
        .chunks(side)
        .map(|row| {
            row.iter()
                .map(|&v| {
                    let i = (((v + 1.0) / 2.0) * (RAMP.len() - 1) as f64).round() as usize;
                    RAMP[i.min(RAMP.len() - 1)] as char
                })
                .collect()
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ExperimentConfig::default();
    for spec in [config.source_spec(), config.target_spec()] {
        let (train, test) = generate_domain(&spec)?;
        println!(
            "{}: {} classes, {} train / {} test, {}x{}x{}",
            spec.domain_id,
            spec.num_classes,
            train.len(),
            test.len(),
            spec.channels,
            spec.image_side,
            spec.image_side
        );
        for (class, concept) in spec.concepts().iter().enumerate() {
            let i = train.labels.iter().position(|&y| y == class).unwrap();
            println!("  class {class}: {concept}");
            for line in ascii(&train.inputs[i], spec.image_side) {
                println!("    {line}");
            }
        }
    }
    println!(
        "disjoint label spaces: {}",
        config.source_spec().is_disjoint_from(&config.target_spec())
    );
    Ok(())
}
