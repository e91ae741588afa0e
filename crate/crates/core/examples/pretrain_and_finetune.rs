//! Pretrain a source model, fine-tune it on the disjoint target domain, and
//! compare against training the same architecture from scratch.
//!
//! `cargo run --release --example pretrain_and_finetune -- [net-a|net-b]`

use std::time::Instant;

use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::generate_domain;
use dfp_lab::train::{finetune_from, train_from_scratch};
use dfp_lab::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch: Architecture = std::env::args().nth(1).unwrap_or_else(|| "net-a".into()).parse()?;
    let config = ExperimentConfig::default();
    let (src_train, src_test) = generate_domain(&config.source_spec())?;
    let (tgt_train, tgt_test) = generate_domain(&config.target_spec())?;

    let start = Instant::now();
    let (source, history) =
        train_from_scratch(arch, &src_train, &src_test, &config.pretrain_config(0), config.pretrain_init_seed(0))?;
    println!("{arch} source accuracy by epoch: {:.3?}", history.test_accuracy);
    println!("pretraining took {:.1?}", start.elapsed());

    let (_, tuned) = finetune_from(&source, &tgt_train, &tgt_test, &config.finetune_config(0), config.finetune_head_seed(0))?;
    let (_, scratch) =
        train_from_scratch(arch, &tgt_train, &tgt_test, &config.scratch_config(0), config.scratch_init_seed(0))?;
    println!("fine-tuned target accuracy: {:.3?}", tuned.test_accuracy);
    println!("from-scratch target accuracy: {:.3?}", scratch.test_accuracy);
    Ok(())
}
