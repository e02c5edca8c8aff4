use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use imoc::agent::{Agent, AgentConfig, Algorithm};
use imoc::mdp::{two_armed_bandit, Environment, FourRoomsConfig};
use imoc::run::{
    export_visualization, read_log, run_ablation, run_sweep, run_training, RunCheckpoint, RunConfig, Variant, LOG_FILE,
};
use imoc::Error;

fn bandit() -> Environment {
    Environment::from_mdp(two_armed_bandit([1.0, 2.0]).unwrap(), 10)
}

fn small(algorithm: Algorithm) -> AgentConfig {
    AgentConfig { n_actors: 4, rollout_len: 5, ..AgentConfig::for_algorithm(algorithm) }
}

#[test]
fn every_algorithm_learns_the_better_arm() {
    for alg in [Algorithm::A2imoc, Algorithm::A2c, Algorithm::Aoc, Algorithm::OurAoc] {
        let mut agent = Agent::new(small(alg), bandit(), 3).unwrap();
        for _ in 0..300 {
            agent.train_iteration().unwrap();
        }
        let report = agent.evaluate(50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(report.mean_return() > 1.9, "{}: {}", alg.name(), report.mean_return());
    }
}

#[test]
fn resumed_agent_continues_identically() {
    let env = FourRoomsConfig::default().environment().unwrap();
    let mut a = Agent::new(small(Algorithm::A2imoc), env.clone(), 11).unwrap();
    for _ in 0..20 {
        a.train_iteration().unwrap();
    }
    let json = serde_json::to_string(&a.checkpoint()).unwrap();
    let mut b = Agent::restore(env, serde_json::from_str(&json).unwrap()).unwrap();
    for _ in 0..20 {
        let (sa, sb) = (a.train_iteration().unwrap(), b.train_iteration().unwrap());
        assert_eq!(sa, sb);
    }
    assert_eq!(a.params(), b.params());
    assert_eq!(a.buffer(), b.buffer());
    assert_eq!(a.env_steps(), b.env_steps());
}

#[test]
fn infomax_training_fills_the_classifier_buffer() {
    let env = FourRoomsConfig::default().environment().unwrap();
    let mut agent = Agent::new(small(Algorithm::A2imoc), env, 5).unwrap();
    let mut stats = None;
    for _ in 0..200 {
        stats = Some(agent.train_iteration().unwrap());
    }
    let stats = stats.unwrap();
    assert!(!agent.buffer().is_empty() && agent.buffer().len() <= 480);
    assert!(stats.classifier_loss_p.unwrap().is_finite());
    assert!(stats.classifier_loss_mu.unwrap().is_finite());
    assert!((stats.option_usage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(stats.clipped_grad_norm <= 1.0 + 1e-9);
}

#[test]
fn a2c_never_terminates_or_fills_the_buffer() {
    let env = FourRoomsConfig::default().environment().unwrap();
    let mut agent = Agent::new(small(Algorithm::A2c), env, 5).unwrap();
    for _ in 0..50 {
        let s = agent.train_iteration().unwrap();
        assert_eq!(s.termination_loss, 0.0);
        assert!(s.classifier_loss_p.is_none());
    }
    assert!(agent.buffer().is_empty());
    assert_eq!(agent.plan().n_options, 1);
}

#[test]
fn visualization_covers_every_free_cell() {
    let env = FourRoomsConfig::default().environment().unwrap();
    let free = env.n_states();
    let agent = Agent::new(small(Algorithm::A2imoc), env, 1).unwrap();
    let viz = export_visualization(&agent, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(viz.options.len(), viz.n_options);
    for option in &viz.options {
        assert_eq!(option.cells.len(), free);
        for cell in &option.cells {
            assert!((cell.action_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&cell.beta));
            assert!(cell.row < viz.rows && cell.col < viz.cols);
        }
    }
    let bandit_agent = Agent::new(small(Algorithm::A2imoc), bandit(), 1).unwrap();
    assert!(matches!(export_visualization(&bandit_agent, 5, &mut ChaCha8Rng::seed_from_u64(2)), Err(Error::Unsupported(_))));
}

#[test]
fn config_errors_are_reported_together() {
    let err = RunConfig::from_toml("total_env_steps = 0\n[agent]\ngamma = 1.5\nn_options = 0\n", &[])
        .unwrap()
        .validate()
        .unwrap_err();
    let text = err.to_string();
    for needle in ["seed", "total_env_steps", "gamma", "n_options"] {
        assert!(text.contains(needle), "{needle} missing from: {text}");
    }
    assert!(RunConfig::from_toml("no_such_key = 1\n", &[]).is_err());
}

fn test_mdp_config(seed: u64) -> RunConfig {
    RunConfig::from_toml(
        &format!(
            "seed = {seed}\ntotal_env_steps = 2000\neval_interval = 1000\neval_episodes = 3\noracle_attach = true\n\
             [environment]\nkind = \"test_mdp\"\nmdp = \"random\"\nsize = 5\nseed = 1\nmax_episode_len = 20\n\
             [agent]\nn_actors = 4\nrollout_len = 5\nn_options = 2\n"
        ),
        &[],
    )
    .unwrap()
}

#[test]
fn training_log_round_trips_and_attaches_exact_mi() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_training(&test_mdp_config(0), Some(dir.path())).unwrap();
    let rows = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(rows, summary.rows);
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let mi = row.exact_mi.expect("oracle attached");
        assert!(mi >= -1e-12 && mi <= (2.0f64).ln() + 1e-9);
    }
    let ckpt = RunCheckpoint::load(&dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.agent().unwrap().env_steps(), summary.checkpoint.agent.env_steps);
}

#[test]
fn ablation_runs_base_and_variants_per_seed() {
    let table = run_ablation(&test_mdp_config(0), &[Variant::DisableMiReg], &[0, 1], None).unwrap();
    assert_eq!(table.rows.len(), 4);
    let summary = table.summary();
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|s| s.n == 2));
    let base_only = run_ablation(&test_mdp_config(0), &[], &[0], None).unwrap();
    assert_eq!(base_only.rows.len(), 1);
    assert!("bogus".parse::<Variant>().is_err());
}

#[test]
fn sweep_requires_option_counts() {
    assert!(run_sweep(&test_mdp_config(0), &[0], None).is_err());
    let mut cfg = test_mdp_config(0);
    cfg.n_options_sweep = vec![1, 3];
    let table = run_sweep(&cfg, &[0], None).unwrap();
    assert_eq!(table.rows.len(), 2);
}

#[test]
fn conv_encoder_trains_on_rendered_grid() {
    let env = FourRoomsConfig::default().environment().unwrap();
    let config = AgentConfig {
        encoder: imoc::nn::EncoderSpec::Conv { channels: 1, height: 13, width: 13, filters: 4, kernel1: 4, kernel2: 2, hidden: 16 },
        ..small(Algorithm::A2imoc)
    };
    let mut agent = Agent::new(config, env, 0).unwrap();
    let before = agent.params().clone();
    for _ in 0..3 {
        let s = agent.train_iteration().unwrap();
        assert!(s.policy_loss.is_finite() && s.value_loss.is_finite());
    }
    assert_ne!(&before, agent.params());
}
