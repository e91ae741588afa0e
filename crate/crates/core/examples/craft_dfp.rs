//! Craft data-free perturbations from a pretrained source model and watch the
//! divergence objective climb. No target model, label or dataset is touched by
//! the attack itself.
//!
//! `cargo run --release --example craft_dfp -- [net-a|net-b] [count]`

use dfp_lab::attacks::{dfp_attack, AttackConfig, FinalStepMode};
use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::generate_domain;
use dfp_lab::train::train_from_scratch;
use dfp_lab::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let arch: Architecture = args.next().unwrap_or_else(|| "net-a".into()).parse()?;
    let count: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);

    let config = ExperimentConfig::default();
    let (src_train, src_test) = generate_domain(&config.source_spec())?;
    let (_, tgt_test) = generate_domain(&config.target_spec())?;
    let (source, history) =
        train_from_scratch(arch, &src_train, &src_test, &config.pretrain_config(0), config.pretrain_init_seed(0))?;
    println!("pretrained {arch}: source accuracy {:.3}", history.final_accuracy().unwrap_or(0.0));

    let attack = AttackConfig::default();
    println!("epsilon {:.4}, {} iterations", attack.epsilon, attack.iterations);
    for x in tgt_test.inputs.iter().take(count) {
        let r = dfp_attack(&source, x, &attack)?;
        let trace: Vec<String> = r.objective_trace.iter().map(|v| format!("{v:.1}")).collect();
        println!(
            "objective {}  linf {:.4}  source prediction {} -> {}",
            trace.join(" "),
            r.linf_distance,
            source.predict(x)?,
            source.predict(&r.adversarial)?
        );
    }

    // The literal final step lands on the mirror image of the forward one.
    let x = &tgt_test.inputs[0];
    let literal = AttackConfig {
        final_step: FinalStepMode::Literal,
        ..attack.clone()
    };
    let fwd = dfp_attack(&source, x, &attack)?.adversarial;
    let lit = dfp_attack(&source, x, &literal)?.adversarial;
    let mirrored = fwd.sub(x)?.add(&lit.sub(x)?)?.data().iter().filter(|v| v.abs() > 1e-12).count();
    println!("pixels where forward and literal steps are not mirrored (clipping): {mirrored}");
    Ok(())
}
