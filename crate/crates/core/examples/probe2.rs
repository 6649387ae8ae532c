use driftplan_core::episode::EnvSpec;
use driftplan_core::field::{generate, FieldPatternSpec, PatternKind};
use driftplan_core::policy::{PolicyConfig, PolicyWeights};
use driftplan_core::training::*;
use driftplan_core::MotionParams;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn eval_policy(env: &EnvSpec, w: &PolicyWeights, n: usize, seed: u64) -> f64 {
    let mut ok = 0;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
        let rec = rollout_policy(env, w, &mut rng).unwrap();
        if rec.succeeded {
            ok += 1;
        }
    }
    ok as f64 / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let force_w: bool = args.get(2).map(|s| s == "force").unwrap_or(false);
    let dropout: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let mut spec = FieldPatternSpec::centered(PatternKind::Uniform, 8, 8);
    spec.strength = 0.0;
    let field = generate(&spec, 8, 8, 1, 1.0).unwrap();
    let mut env = EnvSpec::new(field, MotionParams::default());
    env.min_separation = 2.0;
    env.border_obstacles = false;
    env.step_cap = 30;

    let mut pcfg = PolicyConfig::tiny();
    pcfg.dropout = dropout;
    let mut weights = PolicyWeights::init(&pcfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut buffer = ReplayBuffer::new(2000);
    let mut planner = driftplan_core::ilqr::RecedingHorizonController::new(Default::default(), 5);

    for round in 1..=2000u64 {
        let mut record = rollout_guided(&env, &weights, &mut planner, &mut rng).unwrap();
        if force_w {
            for s in &mut record.steps {
                s.is_weight = 1.0;
            }
        }
        let probs: Vec<f64> = record.steps.iter().map(|s| s.prob).collect();
        let reward = episode_reward(&record.path, &probs, record.goal, record.succeeded, 0.9, 10.0);
        let exps = assign_rewards(&record.steps, reward, 0.99);
        let batch = make_batch(&buffer, &exps, 64, &mut rng);
        buffer.push(exps);
        update(&mut weights, &batch, lr, 0, 1).unwrap();
        if round % 400 == 0 {
            let rate = eval_policy(&env, &weights, 50, 777_000 + round);
            println!("round {round}: policy-only success {rate:.2}");
        }
    }
}
