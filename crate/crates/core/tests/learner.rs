use std::sync::Arc;

use tsc_core::harness::{controller_episode, synthesize_flow, FlowSynthesisSpec};
use tsc_core::learner::{
    collect_rollout, evaluate, log_softmax_rows, Agent, AgentConfig, Env, PolicyController, PpoConfig, TrainConfig,
    TrainCheckpoint, Trainer,
};
use tsc_core::network::RoadNetwork;
use tsc_core::neural::MixingMode;
use tsc_core::rewards::PressureForm;
use tsc_core::sim::SimConfig;

fn small_env() -> Env {
    let net = Arc::new(RoadNetwork::build_grid(2, 2, 150.0).unwrap());
    let spec = FlowSynthesisSpec {
        total_vehicles: 200,
        horizon_s: 300,
        resample_fraction: 0.2,
        seed: 3,
        ..Default::default()
    };
    let flow = Arc::new(synthesize_flow(&net, &spec).unwrap().flow);
    let sim = SimConfig {
        t_tsc_s: 300,
        ..Default::default()
    };
    Env { net, flow, sim }
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        seed: 11,
        agent: AgentConfig::default(),
        ppo: PpoConfig {
            iterations,
            epochs: 2,
            minibatch: 8,
            ..Default::default()
        },
        checkpoint_every: 0,
    }
}

#[test]
fn rollout_shapes_and_bookkeeping() {
    let env = small_env();
    let cfg = small_config(1);
    let agent = Agent::new(&env.net, cfg.agent.clone(), cfg.seed).unwrap();
    let buf = collect_rollout(&agent, &env, &cfg.ppo, cfg.seed, 0).unwrap();
    let n = env.net.num_intersections();
    assert_eq!(buf.episode_lengths, vec![20, 20]);
    assert_eq!(buf.obs.nrows(), 40 * n);
    for v in [&buf.actions.len(), &buf.logp.len(), &buf.rewards.len(), &buf.advantages.len()] {
        assert_eq!(*v, 40 * n);
    }
    for k in 0..buf.returns.len() {
        assert!(buf.advantages[k].is_finite());
        assert_eq!(buf.returns[k], buf.advantages[k] + buf.values[k]);
    }
}

#[test]
fn stored_log_probs_match_recomputation() {
    let env = small_env();
    let cfg = small_config(1);
    let agent = Agent::new(&env.net, cfg.agent.clone(), cfg.seed).unwrap();
    let buf = collect_rollout(&agent, &env, &cfg.ppo, cfg.seed, 0).unwrap();
    let lp = log_softmax_rows(agent.policy.forward(buf.obs.clone()).unwrap().view());
    let values = agent.value.forward(buf.obs.clone()).unwrap();
    for r in 0..buf.actions.len() {
        assert!((lp[[r, buf.actions[r]]] - buf.logp[r]).abs() <= 1e-12);
        assert!((values[[r, 0]] - buf.values[r]).abs() <= 1e-12);
    }
}

#[test]
fn rollouts_repeat_exactly_for_a_seed() {
    let env = small_env();
    let cfg = small_config(1);
    let agent = Agent::new(&env.net, cfg.agent.clone(), cfg.seed).unwrap();
    let a = collect_rollout(&agent, &env, &cfg.ppo, cfg.seed, 2).unwrap();
    let b = collect_rollout(&agent, &env, &cfg.ppo, cfg.seed, 2).unwrap();
    assert_eq!(a.obs, b.obs);
    assert_eq!(a.actions, b.actions);
    assert_eq!(a.logp, b.logp);
    assert_eq!(a.rewards, b.rewards);
    let c = collect_rollout(&agent, &env, &cfg.ppo, cfg.seed, 3).unwrap();
    assert_ne!(a.actions, c.actions);
}

#[test]
fn zero_iterations_only_evaluates() {
    let env = small_env();
    let mut trainer = Trainer::new(env.clone(), small_config(0)).unwrap();
    let before = trainer.agent.policy.params().clone();
    let outcome = trainer.run(None).unwrap();
    assert!(outcome.curve.is_empty());
    assert_eq!(&before, trainer.agent.policy.params());
    assert_eq!(outcome.final_travel_time, outcome.initial_eval.travel.average_travel_time_s);
}

#[test]
fn training_curves_repeat_and_resume_matches_straight_run() {
    let env = small_env();
    let cfg = small_config(4);
    let straight = Trainer::new(env.clone(), cfg.clone()).unwrap().run(None).unwrap();
    let again = Trainer::new(env.clone(), cfg.clone()).unwrap().run(None).unwrap();
    let strip = |c: &[tsc_core::learner::IterationRecord]| {
        c.iter()
            .map(|r| (r.policy_loss, r.value_loss, r.clip_frac, r.eval_travel_time, r.value_error))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&straight.curve), strip(&again.curve));

    let mut first = Trainer::new(env.clone(), cfg.clone()).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    let text = serde_json::to_string(&first.checkpoint()).unwrap();
    let ck: TrainCheckpoint = serde_json::from_str(&text).unwrap();
    let mut resumed = Trainer::resume(env.clone(), cfg.clone(), &ck).unwrap();
    assert_eq!(resumed.iteration(), 2);
    let out = resumed.run(None).unwrap();
    assert_eq!(strip(&straight.curve), strip(&out.curve));

    let mut other = cfg;
    other.seed += 1;
    assert!(Trainer::resume(env, other, &ck).is_err());
}

#[test]
fn policy_controller_matches_greedy_evaluation() {
    let env = small_env();
    let cfg = small_config(1);
    for mixing in [MixingMode::Learned, MixingMode::FixedHop { hops: 1 }, MixingMode::Disabled] {
        let agent_cfg = AgentConfig { mixing, ..AgentConfig::default() };
        let agent = Agent::new(&env.net, agent_cfg, 5).unwrap();
        let eval = evaluate(&agent, &env, &cfg.ppo, 5, 0).unwrap();
        let mut ctrl = PolicyController::from_agent(&agent);
        let mut state = env.reset().unwrap();
        controller_episode(&mut ctrl, &mut state, PressureForm::Absolute).unwrap();
        assert_eq!(state.travel_time_stats().unwrap(), eval.travel);
    }
}

#[test]
fn artifacts_have_documented_schemas() {
    let env = small_env();
    let mut cfg = small_config(3);
    cfg.ppo.eval_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::new(env.clone(), cfg).unwrap();
    trainer.run(Some(dir.path())).unwrap();
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "iteration,policy_loss,value_loss,clip_frac,entropy,eval_travel_time");
    assert_eq!(lines.count(), 3);
    let ve = std::fs::read_to_string(dir.path().join("value_error.csv")).unwrap();
    // Evaluations after iterations 2 and 3 (the last one always evaluates).
    assert_eq!(ve.lines().count(), 3);
    assert!(ve.starts_with("iteration,value_error\n2,"));
    let agent = Agent::from_file(&Agent::read_file(&dir.path().join("agent.json")).unwrap(), &env.net).unwrap();
    assert_eq!(agent.policy.params(), trainer.agent.policy.params());
    assert_eq!(agent.value.params(), trainer.agent.value.params());
    assert!(dir.path().join("train_state.json").exists());
}
