//! Fooling rates of the data-free attack against white-box FGSM, MI-FGSM and
//! the random-sign control, all at the same budget, on a fine-tuned target.
//!
//! `cargo run --release --example baseline_attacks -- [net-a|net-b]`

use dfp_lab::attacks::{craft_many, AttackKind};
use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::generate_domain;
use dfp_lab::eval::{error_rate, fooling_rate};
use dfp_lab::train::{finetune_from, train_from_scratch};
use dfp_lab::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch: Architecture = std::env::args().nth(1).unwrap_or_else(|| "net-a".into()).parse()?;
    let config = ExperimentConfig::default();
    let (src_train, src_test) = generate_domain(&config.source_spec())?;
    let (tgt_train, tgt_test) = generate_domain(&config.target_spec())?;
    let (source, _) =
        train_from_scratch(arch, &src_train, &src_test, &config.pretrain_config(0), config.pretrain_init_seed(0))?;
    let (target, _) =
        finetune_from(&source, &tgt_train, &tgt_test, &config.finetune_config(0), config.finetune_head_seed(0))?;
    println!("{arch} fine-tuned, clean error rate {:.4}", error_rate(&target, &tgt_test)?);

    for kind in AttackKind::ALL {
        // DFP sees only the source model; the gradient baselines are white-box.
        let crafting = if kind == AttackKind::Dfp { &source } else { &target };
        let attack = config.attack_config(kind);
        let adversarial: Vec<_> = craft_many(kind, crafting, &tgt_test.inputs, &tgt_test.labels, &attack)?
            .into_iter()
            .map(|r| r.adversarial)
            .collect();
        println!(
            "{:>7}: fooling rate {:.4}",
            kind.id(),
            fooling_rate(&target, &tgt_test.inputs, &adversarial)?
        );
    }
    Ok(())
}
