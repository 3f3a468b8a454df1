use imel::agent::{
    rollout, run_algorithm, Algorithm, ImelRunner, InterpolatorKind, IterationRecord,
    ReinforceRunner, RolloutMode, RunConfig,
};
use imel::env::make_env;
use imel::memory::ReplayMemory;
use imel::nn::Trainable;
use imel::policy::{kl_equal_sigma, GaussianStats};

fn small(kind: InterpolatorKind) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.interpolator = kind;
    c.run.horizon = 20;
    c.run.eval_episodes = 2;
    c.np.hidden = vec![16, 16];
    c.np.latent_hidden = vec![16];
    c.np.r_dim = 8;
    c.np.z_dim = 8;
    c.mki.hidden = vec![16, 16];
    c.train.value_hidden = vec![16];
    c.train.value_epochs = 5;
    c.reinforce.hidden = vec![16];
    c
}

fn dump(memory: &ReplayMemory) -> Vec<u8> {
    let mut out = Vec::new();
    memory.write_to(&mut out).unwrap();
    out
}

fn strip_clock(mut r: IterationRecord) -> IterationRecord {
    r.wall_clock = 0.0;
    r
}

#[test]
fn memory_grows_by_one_episode_per_iteration() {
    let mut cfg = small(InterpolatorKind::Mki);
    cfg.train.epochs = 0;
    let mut runner = ImelRunner::new(&cfg, 4).unwrap();
    let initial = runner.memory.num_episodes();
    for k in 1..=4 {
        let before = runner.memory.total_points();
        let rec = runner.iteration().unwrap();
        assert_eq!(rec.k, k as u64);
        assert_eq!(runner.memory.num_episodes(), initial + k);
        let last = runner.memory.last_episode().unwrap();
        assert!(last.len() <= 20);
        assert_eq!(last.iteration, k as u64);
        assert_eq!(runner.memory.total_points(), before + last.len());
    }
}

#[test]
fn rollout_policy_is_the_trained_model_on_the_previous_memory() {
    for kind in [InterpolatorKind::Mki, InterpolatorKind::Np] {
        let mut runner = ImelRunner::new(&small(kind), 9).unwrap();
        runner.iteration().unwrap();
        let previous = runner.memory.clone();
        let rec = runner.iteration().unwrap();

        // the model is trained first and untouched afterwards
        assert_eq!(rec.model_hash, runner.model.fingerprint());
        let episode = runner.memory.last_episode().unwrap();
        assert_eq!(episode.model_hash, rec.model_hash);

        // the whole previous memory fits in the acting context
        let context: Vec<_> = previous.episodes().flat_map(|e| e.points()).collect();
        assert!(context.len() <= runner.config.memory.policy_context_points);
        let prepared = runner.model.prepare(&context).unwrap();
        for e in episode.experiences() {
            let b = prepared
                .behavior(&e.state, &runner.sigma, &runner.sigma, false)
                .unwrap();
            assert_eq!(b, e.behavior, "{kind:?}");
        }
    }
}

#[test]
fn stored_episode_meets_the_kl_budget() {
    let cfg = small(InterpolatorKind::Mki);
    let mut runner = ImelRunner::new(&cfg, 2).unwrap();
    for _ in 0..3 {
        let rec = runner.iteration().unwrap();
        let ep = runner.memory.last_episode().unwrap();
        let kl = ep
            .experiences()
            .iter()
            .map(|e| {
                kl_equal_sigma(
                    e.improved_mean().unwrap(),
                    &e.behavior.mean,
                    &e.behavior.std,
                )
            })
            .sum::<f64>()
            / ep.len() as f64;
        assert!(rec.eta.is_some());
        assert!(((kl - cfg.improve.epsilon) / cfg.improve.epsilon).abs() < 1e-9);
        assert!((rec.mean_kl - kl).abs() < 1e-12);
        assert!(rec.eval_p20 <= rec.eval_p80);
    }
}

#[test]
fn iterations_are_bit_reproducible() {
    for kind in [InterpolatorKind::Mki, InterpolatorKind::Np] {
        let cfg = small(kind);
        let mut a = ImelRunner::new(&cfg, 17).unwrap();
        let mut b = ImelRunner::new(&cfg, 17).unwrap();
        for _ in 0..3 {
            assert_eq!(
                strip_clock(a.iteration().unwrap()),
                strip_clock(b.iteration().unwrap())
            );
        }
        assert_eq!(dump(&a.memory), dump(&b.memory));
        let mut c = ImelRunner::new(&cfg, 18).unwrap();
        assert_ne!(
            strip_clock(c.iteration().unwrap()).episode_return,
            strip_clock(ImelRunner::new(&cfg, 17).unwrap().iteration().unwrap()).episode_return
        );
    }
}

#[test]
fn checkpoint_restores_memory_model_and_evaluation() {
    for kind in [InterpolatorKind::Mki, InterpolatorKind::Np] {
        let dir = tempfile::tempdir().unwrap();
        let mut runner = ImelRunner::new(&small(kind), 5).unwrap();
        runner.iteration().unwrap();
        runner.iteration().unwrap();
        runner.save_checkpoint(dir.path()).unwrap();
        let loaded = ImelRunner::load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.k, 2);
        assert_eq!(loaded.config, runner.config);
        assert_eq!(loaded.sigma, runner.sigma);
        assert_eq!(dump(&loaded.memory), dump(&runner.memory));
        assert_eq!(loaded.model.fingerprint(), runner.model.fingerprint());
        assert_eq!(loaded.value.fingerprint(), runner.value.fingerprint());
        assert_eq!(loaded.evaluate().unwrap(), runner.evaluate().unwrap());
    }
}

#[test]
fn np_sigma_is_floored() {
    let mut cfg = small(InterpolatorKind::Np);
    cfg.run.np_sigma = true;
    let mut runner = ImelRunner::new(&cfg, 1).unwrap();
    runner.iteration().unwrap();
    let floor = 0.05 * 2.0;
    for e in runner.memory.last_episode().unwrap().experiences() {
        assert!(e.behavior.std[0] >= floor);
    }
}

#[test]
fn reinforce_is_reproducible_and_beats_a_random_policy() {
    let mut cfg = small(InterpolatorKind::Mki);
    cfg.run.horizon = 0;
    cfg.run.iterations = 40;
    let observe = |_: &IterationRecord| {};
    let a = run_algorithm(Algorithm::Reinforce, &cfg, 3, None, observe).unwrap();
    let b = run_algorithm(Algorithm::Reinforce, &cfg, 3, None, observe).unwrap();
    let strip = |o: &imel::agent::RunOutcome| -> Vec<IterationRecord> {
        o.records.iter().cloned().map(strip_clock).collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert!(a.diverged.is_none());

    let env = make_env("point_mass_1d").unwrap();
    let random = GaussianStats::new(vec![0.0], vec![cfg.run.sigma]).unwrap();
    let random_mean = (0..50)
        .map(|s| {
            rollout(
                env.as_ref(),
                |_| Ok(random.clone()),
                100,
                s,
                RolloutMode::Sample,
            )
            .unwrap()
            .episode_return()
        })
        .sum::<f64>()
        / 50.0;
    let last: f64 = a.records[35..].iter().map(|r| r.eval_mean).sum::<f64>() / 5.0;
    assert!(last > random_mean, "final {last} vs random {random_mean}");
}

#[test]
fn reinforce_spends_the_same_sample_budget() {
    let cfg = small(InterpolatorKind::Mki);
    let mut r = ReinforceRunner::new(&cfg, 0).unwrap();
    let mut i = ImelRunner::new(&cfg, 0).unwrap();
    assert_eq!(
        r.iteration().unwrap().episode_len,
        i.iteration().unwrap().episode_len
    );
}
