//! Cross-architecture transferability: perturbations crafted on each
//! pretrained model, scored on each fine-tuned model.
//!
//! `cargo run --release --example transfer_matrix`

use dfp_lab::attacks::AttackKind;
use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::generate_domain;
use dfp_lab::eval::transfer_matrix;
use dfp_lab::train::{finetune_from, train_from_scratch};
use dfp_lab::Model;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ExperimentConfig::default();
    let (src_train, src_test) = generate_domain(&config.source_spec())?;
    let (tgt_train, tgt_test) = generate_domain(&config.target_spec())?;

    let mut pretrained: Vec<(String, Model)> = Vec::new();
    let mut targets: Vec<(String, Model)> = Vec::new();
    for (i, arch) in config.architecture_list().into_iter().enumerate() {
        let (t, _) =
            train_from_scratch(arch, &src_train, &src_test, &config.pretrain_config(i), config.pretrain_init_seed(i))?;
        let (f, _) = finetune_from(&t, &tgt_train, &tgt_test, &config.finetune_config(i), config.finetune_head_seed(i))?;
        pretrained.push((arch.id().to_string(), t));
        targets.push((arch.id().to_string(), f));
    }

    let m = transfer_matrix(&pretrained, &targets, &tgt_test, &config.attack_config(AttackKind::Dfp))?;
    println!("rows craft, columns are attacked ({} samples)", m.num_samples);
    println!("{:>8} {}", "", m.column_ids.iter().map(|c| format!("{c:>8}")).collect::<String>());
    for (id, row) in m.row_ids.iter().zip(&m.cells) {
        println!("{id:>8} {}", row.iter().map(|v| format!("{v:>8.4}")).collect::<String>());
    }
    println!("mean diagonal {:.4}", m.mean_diagonal());
    if let Some(off) = m.mean_off_diagonal() {
        println!("mean off-diagonal {off:.4}");
    }
    Ok(())
}
