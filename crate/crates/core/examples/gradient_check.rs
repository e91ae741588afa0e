//! Compare the tape gradient of the divergence objective with central finite
//! differences on a randomly initialised model.
//!
//! `cargo run --release --example gradient_check -- [net-a|net-b] [seed]`

use dfp_lab::attacks::{dfp_objective, dfp_objective_on_tape};
use dfp_lab::tensor::DEFAULT_RATIO_GUARD;
use dfp_lab::{Architecture, Model, ModelSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let arch: Architecture = args.next().unwrap_or_else(|| "net-b".into()).parse()?;
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let model = Model::init(ModelSpec::new(arch, [1, 16, 16], 10)?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let x_adv = Tensor::new(
        vec![1, 16, 16],
        x.data().iter().map(|v| (v + rng.random_range(-0.05..0.05)).clamp(-1.0, 1.0)).collect(),
    )?;
    let clean = model.logits(&x)?;
    let objective = |input: &Tensor| dfp_objective(&clean, &model.logits(input).unwrap(), DEFAULT_RATIO_GUARD).unwrap();

    let tape = Tape::new();
    let leaf = tape.leaf(x_adv.clone());
    let logits = model.logits_on_tape(&tape, leaf)?;
    let value = dfp_objective_on_tape(tape.constant(clean.clone()), logits, DEFAULT_RATIO_GUARD)?;
    let grad = tape.backward(value, &[leaf])?.remove(0);

    let mut worst = 0.0f64;
    for i in 0..x_adv.len() {
        let mut plus = x_adv.clone().into_data();
        let mut minus = plus.clone();
        plus[i] += H;
        minus[i] -= H;
        let fd = (objective(&Tensor::new(vec![1, 16, 16], plus)?) - objective(&Tensor::new(vec![1, 16, 16], minus)?))
            / (2.0 * H);
        let a = grad.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    println!("{arch}, seed {seed}: objective {:.4}", objective(&x_adv));
    println!("worst relative error over {} coordinates: {worst:.2e}", x_adv.len());
    println!("(a ReLU kink inside the stencil can inflate a single coordinate)");
    Ok(())
}
