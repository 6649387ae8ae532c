use driftplan_core::episode::{EnvSpec, Placement};
use driftplan_core::field::{generate, FieldPatternSpec, PatternKind};
use driftplan_core::policy::PolicyConfig;
use driftplan_core::training::{run_training, TrainingConfig};
use driftplan_core::MotionParams;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rounds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let guided: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let borders: bool = args.get(5).map(|s| s == "borders").unwrap_or(false);

    let mut spec = FieldPatternSpec::centered(PatternKind::Uniform, 8, 8);
    spec.strength = 0.0;
    let field = generate(&spec, 8, 8, 1, 1.0).unwrap();
    let mut env = EnvSpec::new(field, MotionParams::default());
    env.min_separation = 2.0;
    env.border_obstacles = borders;
    env.start = Placement::Random;
    env.goal = Placement::Random;

    let mut pcfg = PolicyConfig::tiny();
    pcfg.dropout = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let tcfg = TrainingConfig {
        learning_rate: lr,
        batch_size: 64,
        episode_cap: 30,
        rounds,
        guided_fraction: guided,
        replay_capacity: 2000,
        seed,
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = run_training(&env, &pcfg, &tcfg, None, |round, _, _| {
        if round % 500 == 0 {
            eprint!(".");
        }
    })
    .unwrap();
    // windowed success over the curve
    let windows: Vec<f64> = out
        .curve
        .chunks(250)
        .map(|c| c.iter().filter(|r| r.success).count() as f64 / c.len() as f64)
        .collect();
    let last100: Vec<_> = out.curve.iter().rev().take(100).collect();
    let rate = last100.iter().filter(|r| r.success).count() as f64 / last100.len() as f64;
    eprintln!();
    println!(
        "rounds {rounds} lr {lr} seed {seed} guided {guided} borders {borders}: last-100 {rate:.2}, windows {:?}, {:.1}s",
        windows.iter().map(|w| (w * 100.0).round() as i32).collect::<Vec<_>>(),
        t0.elapsed().as_secs_f64()
    );
}
