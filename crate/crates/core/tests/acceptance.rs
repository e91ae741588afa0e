//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines print in order.

#[path = "common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    budget_violation, check_ascent, check_cosine, check_dfp_beats_random, check_transfer_premise,
    check_transfer_structure, default_run, gradient_check, random_image, random_model, rng, Check, FD_TOLERANCE,
};
use dfp_lab::attacks::{fgsm_attack, mifgsm_attack, AttackKind};
use dfp_lab::config::ExperimentConfig;
use dfp_lab::data::read_archive;
use dfp_lab::eval::mapping_histogram;
use dfp_lab::model::{load_checkpoint_as, Architecture, Model};
use dfp_lab::pipeline::{self, Evaluation, Stage};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

const SEEDS: [u64; 3] = [0, 1, 2];
const REPORT_FILES: [&str; 6] = [
    "reports/report.json",
    "reports/evaluation.json",
    "reports/table1.csv",
    "reports/table2.csv",
    "reports/mapping.csv",
    "reports/logits.csv",
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(number: u32, name: &str, outcome: Outcome, elapsed: Duration, limit: Duration) -> bool {
    let in_time = elapsed <= limit;
    let pass = outcome.pass && in_time;
    println!(
        "{} criterion {number:>2} {name}: {} ({:.1} s, limit {} s{})",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn gradient_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut skipped = 0;
    for seed in 0..100 {
        let check = gradient_check(seed);
        worst = worst.max(check.max_relative_error);
        skipped += check.skipped_coordinates;
        if check.max_relative_error > FD_TOLERANCE {
            failures += 1;
        }
    }
    Outcome {
        pass: failures == 0 && skipped == 0,
        detail: format!("100 cases, worst relative error {worst:.2e}, {failures} over tolerance, {skipped} coordinates unchecked"),
    }
}

fn budget_invariant() -> Outcome {
    let config = Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = (
        prop::sample::select(AttackKind::ALL.to_vec()),
        any::<bool>(),
        0.0f64..1.0,
        1usize..8,
        any::<u64>(),
    );
    let cases = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(kind, net_b, epsilon, iterations, seed)| {
        cases.set(cases.get() + 1);
        let arch = if net_b { Architecture::NetB } else { Architecture::NetA };
        let violation = budget_violation(kind, arch, epsilon, iterations, seed);
        prop_assert!(violation.is_none(), "{}", violation.unwrap());
        Ok(())
    });
    match result {
        Ok(()) => Outcome {
            pass: cases.get() >= 1000,
            detail: format!("{} cases across all four attacks", cases.get()),
        },
        Err(e) => Outcome {
            pass: false,
            detail: e.to_string(),
        },
    }
}

fn baseline_consistency() -> Outcome {
    let mut mismatches = 0;
    let mut r = rng(10);
    for i in 0..100u64 {
        let arch = if i % 2 == 0 { Architecture::NetA } else { Architecture::NetB };
        let model = random_model(arch, 4, 100 + i);
        let x = random_image(&mut r);
        let y = (i % 4) as usize;
        let a = fgsm_attack(&model, &x, y, 20.0 / 255.0).unwrap();
        let b = mifgsm_attack(&model, &x, y, 20.0 / 255.0, 1, 0.0).unwrap();
        if a.adversarial != b.adversarial {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("100 inputs, {mismatches} differ"),
    }
}

fn across_seeds(runs: &[(u64, Evaluation)], check: impl Fn(&Evaluation) -> Check) -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, ev) in runs {
        let c = check(ev);
        pass &= c.pass;
        details.push(format!("seed {seed}: {}", c.detail));
    }
    Outcome {
        pass,
        detail: details.join(" | "),
    }
}

/// Mapping needs only the generated data and the pretrained models, so it
/// runs those two stages on its own.
fn mapping_connection(root: &Path) -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for seed in SEEDS {
        let config = ExperimentConfig {
            seed,
            out_dir: root.join(format!("mapping-{seed}")),
            ..ExperimentConfig::default()
        };
        pipeline::run_stage(Stage::GenData, &config).unwrap();
        pipeline::run_stage(Stage::Pretrain, &config).unwrap();
        let test = read_archive(&config.out_dir.join("datasets/target-test")).unwrap();
        for arch in [Architecture::NetA, Architecture::NetB] {
            let path = config.out_dir.join(format!("checkpoints/pretrained-{}.ckpt", arch.id()));
            let (spec, params) = load_checkpoint_as(&path, arch).unwrap();
            let h = mapping_histogram(&Model::new(spec, params).unwrap(), &test).unwrap();
            let chance = 1.0 / h.source_classes as f64;
            let min = h.categories.iter().map(|c| c.max_frequency).fold(f64::INFINITY, f64::min);
            pass &= min > chance;
            details.push(format!("seed {seed}: {} min max-frequency {min:.4} vs chance {chance:.4}", arch.id()));
        }
    }
    Outcome {
        pass,
        detail: details.join(" | "),
    }
}

fn from_check(seed: u64, c: Check) -> Outcome {
    Outcome {
        pass: c.pass,
        detail: format!("seed {seed}: {}", c.detail),
    }
}

fn identical_reports(a: &Path, b: &Path) -> Outcome {
    let differing: Vec<&str> = REPORT_FILES
        .iter()
        .copied()
        .filter(|rel| fs::read(a.join(rel)).ok() != fs::read(b.join(rel)).ok() || !a.join(rel).is_file())
        .collect();
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} report files byte-identical", REPORT_FILES.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;

    let (o, t) = timed(gradient_correctness);
    all &= report(1, "gradient correctness", o, t, secs(30));
    let (o, t) = timed(budget_invariant);
    all &= report(2, "budget invariant", o, t, secs(60));

    // The experiment-level criteria share one default run per seed.
    let workspace = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    let mut run_time = Vec::new();
    for seed in SEEDS {
        let (ev, t) = timed(|| default_run(seed, &workspace.path().join(format!("seed-{seed}"))));
        eprintln!("default experiment, seed {seed}: {:.1} s", t.as_secs_f64());
        runs.push((seed, ev));
        run_time.push(t);
    }
    let first = run_time[0];
    let total: Duration = run_time.iter().sum();

    let (o, t) = timed(|| from_check(0, check_ascent(&runs[0].1, 0.95)));
    all &= report(3, "ascent endpoint", o, first + t, secs(120));
    let (o, t) = timed(|| across_seeds(&runs, check_dfp_beats_random));
    all &= report(4, "data-free fooling beats chance", o, total + t, secs(300));
    let (o, t) = timed(|| across_seeds(&runs, check_transfer_structure));
    all &= report(5, "transfer structure", o, total + t, secs(480));
    let (o, t) = timed(|| mapping_connection(workspace.path()));
    all &= report(6, "mapping connection", o, t, secs(60));
    let (o, t) = timed(|| from_check(0, check_cosine(&runs[0].1)));
    all &= report(7, "logits divergence", o, first + t, secs(120));
    let (o, t) = timed(|| across_seeds(&runs, check_transfer_premise));
    all &= report(8, "transfer-learning premise", o, total + t, secs(180));

    let again = workspace.path().join("seed-0-again");
    let ((), t) = timed(|| {
        default_run(0, &again);
    });
    let o = identical_reports(&workspace.path().join("seed-0"), &again);
    all &= report(9, "determinism", o, t, first * 2);

    let (o, t) = timed(baseline_consistency);
    all &= report(10, "baseline consistency", o, t, secs(10));

    if !all {
        std::process::exit(1);
    }
}
