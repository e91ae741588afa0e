//! Which source class does the pretrained model assign to each target
//! category? A peaked histogram is the link that lets source-only
//! perturbations reach the fine-tuned model.
//!
//! `cargo run --release --example mapping_connection -- [net-a|net-b]`

use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::generate_domain;
use dfp_lab::eval::mapping_histogram;
use dfp_lab::train::train_from_scratch;
use dfp_lab::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch: Architecture = std::env::args().nth(1).unwrap_or_else(|| "net-a".into()).parse()?;
    let config = ExperimentConfig::default();
    let source_spec = config.source_spec();
    let target_spec = config.target_spec();
    let (src_train, src_test) = generate_domain(&source_spec)?;
    let (_, tgt_test) = generate_domain(&target_spec)?;
    let (source, _) =
        train_from_scratch(arch, &src_train, &src_test, &config.pretrain_config(0), config.pretrain_init_seed(0))?;

    let h = mapping_histogram(&source, &tgt_test)?;
    println!("chance level {:.3}", 1.0 / h.source_classes as f64);
    for (category, c) in h.categories.iter().enumerate() {
        println!(
            "{:<20} -> {:<20} {:.3}  (over {} samples)",
            target_spec.concepts()[category],
            source_spec.concepts()[c.most_frequent_class],
            c.max_frequency,
            c.num_samples
        );
    }
    Ok(())
}
