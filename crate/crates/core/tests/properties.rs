use proptest::prelude::*;

use ckil::demos::{extract_tuples, generate_dataset, to_buffer, ScriptedExpert, Trajectory, TupleBuffer};
use ckil::density::{ckde_p, ckde_t, kernel_value, precompute_densities, ActionDistance, DensityCache, KernelConfig, KernelSlot, QueryPoint};
use ckil::env::{env_spec, EnvId, Environment, GridSpec};
use ckil::policy::action_probs;
use ckil::train::{batch_loss, train_ckil, TrainConfig};

fn env_id() -> impl Strategy<Value = EnvId> {
    prop_oneof![Just(EnvId::MountainCar), Just(EnvId::CartPole), Just(EnvId::Acrobot)]
}

fn rollout(id: EnvId, seed: u64, actions: &[usize]) -> Vec<Vec<f64>> {
    let mut env = Environment::new(id, seed);
    let n = env.spec().action_count;
    let mut states = vec![env.state().to_vec()];
    let mut k = 0;
    while !env.is_done() {
        env.step(actions[k % actions.len()] % n).unwrap();
        states.push(env.state().to_vec());
        k += 1;
    }
    states
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn episodes_are_deterministic_bounded_and_capped(id in env_id(), seed: u64, actions in prop::collection::vec(0usize..3, 1..40)) {
        let a = rollout(id, seed, &actions);
        let b = rollout(id, seed, &actions);
        prop_assert_eq!(&a, &b);
        let spec = env_spec(id);
        prop_assert!(a.len() - 1 <= spec.max_episode_steps);
        for s in &a {
            prop_assert!(spec.contains(s), "{:?} outside bounds", s);
        }
    }

    #[test]
    fn discretize_stays_on_the_grid(pos in -1.2f64..=0.6, vel in -0.07f64..=0.07) {
        let grid = GridSpec::uniform(&env_spec(EnvId::MountainCar), 15).unwrap();
        let c = grid.discretize(&[pos, vel]);
        prop_assert!(c < 225);
        prop_assert_eq!(grid.discretize(&grid.cell_center(c)), c);
    }

    #[test]
    fn tuples_never_cross_episodes(lens in prop::collection::vec(0usize..6, 1..6)) {
        let trajs: Vec<Trajectory> = lens
            .iter()
            .enumerate()
            .map(|(e, &n)| Trajectory {
                episode_id: e as u64 * 10,
                steps: (0..n).map(|t| (vec![e as f64, t as f64], t % 2)).collect(),
                terminal: false,
            })
            .collect();
        let tuples = extract_tuples(&trajs);
        prop_assert_eq!(tuples.len(), lens.iter().map(|&n| n.saturating_sub(1)).sum::<usize>());
        for t in &tuples {
            // State component 0 carries the episode index.
            prop_assert_eq!(t.s[0], t.s_next[0]);
            prop_assert_eq!(t.s[0] * 10.0, t.episode_id as f64);
            prop_assert_eq!(t.s_next[1], t.s[1] + 1.0);
        }
    }

    #[test]
    fn kernel_terms_are_symmetric(h in 0.01f64..3.0, x in prop::collection::vec(-3f64..3.0, 3), y in prop::collection::vec(-3f64..3.0, 3)) {
        let cfg = KernelConfig::new(h, h, h, ActionDistance::ExactMatch, 3, 2).unwrap();
        let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        for slot in [KernelSlot::NextPair, KernelSlot::Pair, KernelSlot::NextState] {
            prop_assert_eq!(kernel_value(&cfg, d(&x, &y), slot), kernel_value(&cfg, d(&y, &x), slot));
        }
    }
}

fn random_buffer(seed: u64, n: usize) -> Vec<Trajectory> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|e| Trajectory {
            episode_id: e,
            steps: (0..n).map(|_| (vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], rng.random_range(0..2))).collect(),
            terminal: false,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_ignore_tuple_order(seed: u64, rot in 0usize..20, one_hot: bool) {
        let trajs = random_buffer(seed, 8);
        let mode = if one_hot { ActionDistance::OneHot } else { ActionDistance::ExactMatch };
        let cfg = KernelConfig::new(0.3, 0.4, 0.5, mode, 2, 2).unwrap();
        let buffer = to_buffer(&trajs, 2, true).unwrap();
        // Same tuples, reversed episode order and rotated within the buffer.
        let mut shuffled = buffer.clone();
        let n = shuffled.len();
        let mut order: Vec<usize> = (0..n).rev().collect();
        order.rotate_left(rot % n);
        permute(&mut shuffled, &order);
        for i in 0..n {
            let q = QueryPoint::at_tuple(&buffer, i);
            let t1 = ckde_t(&buffer, &q, &cfg);
            let t2 = ckde_t(&shuffled, &q, &cfg);
            prop_assert!((t1 - t2).abs() <= 1e-12 * t1.abs().max(1.0));
            let p1 = ckde_p(&buffer, &q, &cfg).unwrap();
            let p2 = ckde_p(&shuffled, &q, &cfg).unwrap();
            prop_assert!((p1 - p2).abs() <= 1e-12 * p1.abs().max(1.0));
        }
        let c1 = precompute_densities(&buffer, &cfg).unwrap();
        let c2 = precompute_densities(&shuffled, &cfg).unwrap();
        for (k, &j) in order.iter().enumerate() {
            prop_assert!((c1.t_hat[j] - c2.t_hat[k]).abs() <= 1e-12 * c1.t_hat[j].max(1.0));
        }
    }

    #[test]
    fn loss_decomposes_exactly(seed: u64, lambda in 0.0f64..5.0) {
        let buffer = to_buffer(&random_buffer(seed, 6), 2, true).unwrap();
        let cache = DensityCache::from_values(&buffer, vec![0.2; buffer.len()], vec![0.9; buffer.len()]).unwrap();
        let params = ckil::policy::init_params(2, 2, 8, seed);
        let batch: Vec<usize> = (0..buffer.len()).collect();
        let (l, _) = batch_loss(&params, &batch, &cache, &buffer, lambda).unwrap();
        prop_assert!((l.total - (l.balance_term + lambda * l.entropy_term)).abs() <= 1e-12 * l.total.abs().max(1.0));
        prop_assert!(l.entropy_term <= 0.0);
    }
}

fn permute(buffer: &mut TupleBuffer, order: &[usize]) {
    let d = buffer.state_dim;
    let old = buffer.clone();
    for (k, &j) in order.iter().enumerate() {
        buffer.tuples[k] = old.tuples[j].clone();
        buffer.features[k * d..(k + 1) * d].copy_from_slice(old.feature(j));
        buffer.next_features[k * d..(k + 1) * d].copy_from_slice(old.next_feature(j));
    }
}

#[test]
fn every_training_record_decomposes() {
    let trajs = generate_dataset(EnvId::CartPole, &ScriptedExpert::new(EnvId::CartPole, 0.1).unwrap(), 1, 3).unwrap();
    let buffer = to_buffer(&trajs, 2, true).unwrap();
    let cfg = KernelConfig::default_for(4, 2);
    let cache = precompute_densities(&buffer, &cfg).unwrap();
    let out = train_ckil(&buffer, &cache, &TrainConfig { max_iters: 200, lambda: 0.05, ..TrainConfig::default() }).unwrap();
    for r in &out.history {
        assert!((r.total - (r.balance_term + 0.05 * r.entropy_term)).abs() <= 1e-12 * r.total.abs().max(1.0));
    }
    assert!(out.history.windows(2).all(|w| w[1].best_smoothed <= w[0].best_smoothed));
}

/// Two-state instance with a deterministic demonstrator: π_D(0|s=0) = 1,
/// π_D(1|s=1) = 1, and the cache holds exact densities.
fn deterministic_instance(scale: f64) -> (TupleBuffer, DensityCache, Vec<Vec<f64>>) {
    let t = [[[0.7, 0.3], [0.4, 0.6]], [[0.5, 0.5], [0.1, 0.9]]];
    let pi_d = |s: usize, a: usize| if a == s { 1.0 } else { 0.0 };
    let states = vec![vec![-1.0], vec![1.0]];
    let mut trajs = Vec::new();
    let (mut p, mut th) = (Vec::new(), Vec::new());
    for s in 0..2 {
        for a in 0..2 {
            for sn in 0..2 {
                trajs.push(Trajectory {
                    episode_id: trajs.len() as u64,
                    steps: vec![(states[s].clone(), a), (states[sn].clone(), sn)],
                    terminal: false,
                });
                th.push(scale * t[s][a][sn]);
                p.push(scale * pi_d(sn, sn) * t[s][a][sn]);
            }
        }
    }
    let buffer = to_buffer(&trajs, 2, true).unwrap();
    let cache = DensityCache::from_values(&buffer, p, th).unwrap();
    (buffer, cache, states)
}

#[test]
fn deterministic_demonstrator_is_recovered_and_scale_does_not_move_the_minimizer() {
    let cfg = TrainConfig { lambda: 0.0, batch_size: 8, max_iters: 3000, patience: 3000, learning_rate: 3e-3, ..TrainConfig::default() };
    let mut learned = Vec::new();
    for scale in [1.0, 7.5] {
        let (buffer, cache, states) = deterministic_instance(scale);
        let ratio = cache.p_hat[0] / cache.t_hat[0];
        assert_eq!(ratio, 1.0);
        let (base, _) = batch_loss(&ckil::policy::PolicyParams::zeros(1, 2, 8), &[0, 1, 2], &cache, &buffer, 0.0).unwrap();
        let (unit_buf, unit_cache, _) = deterministic_instance(1.0);
        let (unit, _) = batch_loss(&ckil::policy::PolicyParams::zeros(1, 2, 8), &[0, 1, 2], &unit_cache, &unit_buf, 0.0).unwrap();
        assert!((base.balance_term - scale * scale * unit.balance_term).abs() < 1e-12);

        let out = train_ckil(&buffer, &cache, &cfg).unwrap();
        let probs: Vec<Vec<f64>> =
            states.iter().map(|s| action_probs(&out.params, &buffer.preprocessor.features(s)).unwrap().probs).collect();
        assert!(probs[0][0] > 0.95 && probs[1][1] > 0.95, "{probs:?}");
        learned.push(probs);
    }
    for s in 0..2 {
        let tv: f64 = 0.5 * learned[0][s].iter().zip(&learned[1][s]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.05);
    }
}

#[test]
fn single_action_buffer_reduces_to_state_regression() {
    let trajs: Vec<Trajectory> = random_buffer(9, 6)
        .into_iter()
        .map(|mut t| {
            t.steps.iter_mut().for_each(|s| s.1 = 1);
            t
        })
        .collect();
    let buffer = to_buffer(&trajs, 2, true).unwrap();
    let cfg = KernelConfig::new(0.5, 0.5, 0.3, ActionDistance::ExactMatch, 2, 2).unwrap();
    let q = QueryPoint::at_tuple(&buffer, 4);
    let g = |h: f64, d2: f64| (2.0 * std::f64::consts::PI * h).powf(-1.0) * (-d2 / (2.0 * h)).exp();
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for l in 0..buffer.len() {
        let w = g(0.5, sq(&q.s, buffer.feature(l)));
        num += w * g(0.3, sq(&q.s_next, buffer.next_feature(l)));
        den += w;
    }
    assert!((ckde_t(&buffer, &q, &cfg) - num / den).abs() < 1e-12);
}
