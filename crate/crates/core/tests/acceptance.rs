//! Acceptance suite. One test per criterion; each prints a single
//! "criterion N PASS" line on success, so a full run reads as a checklist.
//! The desk-scale learning criteria (5, 6, 7) share trained models through
//! lazy statics; whichever test runs first pays the training cost.

use std::sync::LazyLock;
use std::time::Instant;

use tilenet::adam::{AdamConfig, AdamState};
use tilenet::baselines::{
    collect_click_dataset, train_utility_ranker, LayoutKind, RankerTrainConfig, UtilityRanker,
};
use tilenet::checkpoint::{self, Checkpoint, ParamGroup};
use tilenet::critic::{Critic, CriticConfig};
use tilenet::env::{
    scan_order, Dynamics, Environment, EnvironmentSpec, RewardKind, ScanKind,
};
use tilenet::gradcheck::{grad_check, Probes};
use tilenet::metrics::{evaluate_policy, ndcg, pre_at_k};
use tilenet::nn::{
    attention_bind, attention_register, lstm_bind, lstm_cell, lstm_register, mlp_bind,
    mlp_forward, mlp_register, self_attention_block, Activation, AttentionDims, LstmDims, MlpSpec,
};
use tilenet::page::{enumerate_configurations, Configuration, Grid, PageInstance};
use tilenet::params::ParamSet;
use tilenet::policy::{CellKind, Driver, PolicyConfig, TilePolicy, TileSelection};
use tilenet::rng::SeededRng;
use tilenet::tape::Tape;
use tilenet::tensor::Tensor;
use tilenet::trainer::{train, write_stats_csv, TrainConfig};

fn pass(criterion: usize, what: &str) {
    println!("criterion {criterion} PASS: {what}");
}

fn random_page(rng: &mut SeededRng, n: usize, grid: Grid, user_w: usize, item_w: usize) -> PageInstance {
    let user: Vec<f64> = (0..user_w).map(|_| rng.normal()).collect();
    let items: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..item_w).map(|_| rng.normal()).collect())
        .collect();
    PageInstance::new(user, items, grid).unwrap()
}

fn small_policy_config(input_width: usize) -> PolicyConfig {
    PolicyConfig {
        input_width,
        d_k: 8,
        d_v: 8,
        decoder_hidden: 8,
        head_dim: 6,
        cell: CellKind::Lstm,
    }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let grid = Grid::new(2, 2).unwrap();
    let mut rng = SeededRng::from_root(11);
    let page = random_page(&mut rng, 4, grid, 2, 3);

    // Full policy log-probability over every parameter group.
    let policy = TilePolicy::new(small_policy_config(5), &mut rng);
    let configuration = policy
        .rollout_detached(&page, Driver::Sample(&mut rng), TileSelection::Learned)
        .unwrap()
        .configuration;
    let policy_err = grad_check(
        |tape, leaves| {
            let bound = policy.params.bound_to(leaves);
            policy.log_prob(tape, &bound, &page, &configuration).unwrap()
        },
        &policy.params,
        1e-5,
        Probes::PerTensor(6),
        &mut SeededRng::from_root(12),
    )
    .unwrap();
    assert!(policy_err < 1e-4, "policy log-prob grad err {policy_err}");

    // Critic loss over every parameter group.
    let critic = Critic::new(
        CriticConfig {
            input_width: 5,
            tiles: 4,
            d_k: 8,
            d_v: 8,
            positionwise_width: 4,
        },
        &mut rng,
    );
    let critic_err = grad_check(
        |tape, leaves| {
            let bound = critic.params.bound_to(leaves);
            let est = critic.forward(tape, &bound, &page, &configuration).unwrap();
            let diff = tape.add_const(est, -0.61);
            tape.mul_elem(diff, diff)
        },
        &critic.params,
        1e-5,
        Probes::PerTensor(10),
        &mut SeededRng::from_root(13),
    )
    .unwrap();
    assert!(critic_err < 1e-4, "critic loss grad err {critic_err}");

    // Individual blocks at the tighter tolerance.
    let mut block_errs: Vec<(&str, f64)> = Vec::new();

    let dims = AttentionDims {
        input: 4,
        d_k: 3,
        d_v: 3,
    };
    let mut set = ParamSet::new();
    attention_register(&mut set, "att", &dims, &mut rng);
    let x = rng.uniform_tensor(vec![3, 4], -1.0, 1.0);
    let err = grad_check(
        |tape, leaves| {
            let bound = set.bound_to(leaves);
            let nodes = attention_bind(&bound, "att", &dims);
            let xid = tape.leaf(x.clone());
            let out = self_attention_block(tape, xid, &nodes);
            let sq = tape.mul_elem(out, out);
            tape.mean(sq)
        },
        &set,
        1e-5,
        Probes::All,
        &mut SeededRng::from_root(14),
    )
    .unwrap();
    block_errs.push(("attention", err));

    let dims = LstmDims { input: 3, hidden: 4 };
    let mut set = ParamSet::new();
    lstm_register(&mut set, "cell", &dims, &mut rng);
    let x1 = rng.uniform_tensor(vec![3], -1.0, 1.0);
    let x2 = rng.uniform_tensor(vec![3], -1.0, 1.0);
    let err = grad_check(
        |tape, leaves| {
            let bound = set.bound_to(leaves);
            let nodes = lstm_bind(&bound, "cell", &dims);
            let h0 = tape.leaf(Tensor::zeros(vec![4]));
            let c0 = tape.leaf(Tensor::zeros(vec![4]));
            let i1 = tape.leaf(x1.clone());
            let i2 = tape.leaf(x2.clone());
            let (h1, c1) = lstm_cell(tape, h0, c0, i1, &nodes);
            let (h2, _) = lstm_cell(tape, h1, c1, i2, &nodes);
            let sq = tape.mul_elem(h2, h2);
            tape.sum(sq)
        },
        &set,
        1e-5,
        Probes::All,
        &mut SeededRng::from_root(15),
    )
    .unwrap();
    block_errs.push(("lstm", err));

    let spec = MlpSpec::new(
        vec![5, 3, 1],
        vec![Activation::Relu, Activation::Tanh, Activation::Identity],
    )
    .unwrap();
    let mut set = ParamSet::new();
    mlp_register(&mut set, "mlp", 4, &spec, &mut rng);
    let x = rng.uniform_tensor(vec![4], -1.0, 1.0);
    let err = grad_check(
        |tape, leaves| {
            let bound = set.bound_to(leaves);
            let nodes = mlp_bind(&bound, "mlp", &spec);
            let xid = tape.leaf(x.clone());
            let out = mlp_forward(tape, xid, &nodes);
            tape.sum(out)
        },
        &set,
        1e-5,
        Probes::All,
        &mut SeededRng::from_root(16),
    )
    .unwrap();
    block_errs.push(("mlp", err));

    for (name, err) in &block_errs {
        assert!(*err < 1e-5, "{name} block grad err {err}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient checks took {elapsed:?}");
    pass(1, "policy and critic gradients match finite differences");
}

#[test]
fn criterion_2_probability_mass_sums_to_one() {
    for k in 1..=3usize {
        let grid = Grid::new(1, k).unwrap();
        for seed in 0..10u64 {
            let mut rng = SeededRng::derive(21, "mass", &[k as u64, seed]);
            let policy = TilePolicy::new(small_policy_config(5), &mut rng);
            let page = random_page(&mut rng, k, grid, 2, 3);
            let mut mass = 0.0;
            for configuration in enumerate_configurations(k, k) {
                let rv = policy
                    .rollout_detached(&page, Driver::Forced(&configuration), TileSelection::Learned)
                    .unwrap();
                mass += rv.log_prob.exp();
            }
            assert!(
                (mass - 1.0).abs() <= 1e-9,
                "n=k={k} seed {seed}: total mass {mass}"
            );
        }
    }
    pass(2, "configuration probabilities sum to one for n=k in 1..=3");
}

#[test]
fn criterion_3_monte_carlo_agrees_with_reward_oracle() {
    const EPISODES: usize = 100_000;
    let grids = [(1, 2), (2, 2), (1, 5), (2, 3), (1, 7), (2, 4), (1, 3), (2, 2)];
    let mut rng = SeededRng::derive(31, "triples", &[]);
    let mut closed_checked = 0;
    for i in 0..50usize {
        let dynamics = [Dynamics::None, Dynamics::Diverse, Dynamics::Similar][i % 3];
        let (rows, cols) = grids[i % grids.len()];
        let grid = Grid::new(rows, cols).unwrap();
        let k = grid.k();
        let n = k + i % 3;
        let mut spec = EnvironmentSpec::row_default(1000 + i as u64);
        spec.scan = [ScanKind::Row, ScanKind::Col, ScanKind::Z][i % 3].clone();
        spec.eta = [0.0, 0.05, 0.3, 1.0][i % 4];
        spec.dynamics = dynamics;
        // Large quantiles so the similarity rules actually fire.
        spec.similarity_quantile = [0.25, 0.5, 0.75][i % 3];
        spec.reward = if i % 2 == 0 {
            RewardKind::Clicks
        } else {
            RewardKind::Ndcg
        };
        let env = Environment::new(spec, 2, 3).unwrap();
        let page = random_page(&mut rng, n, grid, 2, 3);
        let items = rng.sample_indices(n, k);
        let mut tiles: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut tiles);
        let configuration = Configuration::new(items, tiles, n, k).unwrap();

        let oracle = env.expected_reward_oracle(&page, &configuration).unwrap();
        let mut ep_rng = SeededRng::derive(32, "episodes", &[i as u64]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..EPISODES {
            let r = env.simulate_clicks(&page, &configuration, &mut ep_rng).unwrap().reward;
            sum += r;
            sum_sq += r * r;
        }
        let mean = sum / EPISODES as f64;
        let variance = (sum_sq / EPISODES as f64 - mean * mean).max(0.0);
        let se = (variance / EPISODES as f64).sqrt();
        assert!(
            (mean - oracle).abs() <= 3.0 * se + 1e-12,
            "triple {i} ({dynamics:?}, k={k}): mc {mean} vs oracle {oracle}, se {se}"
        );

        if dynamics == Dynamics::None && env.spec().reward == RewardKind::Clicks {
            let probs = env.click_probabilities(&page).unwrap();
            let order = scan_order(&env.spec().scan, grid).unwrap();
            let by_tile = configuration.item_by_tile();
            let closed: f64 = order
                .iter()
                .enumerate()
                .map(|(pos, &tile)| probs[by_tile[tile]] / ((pos + 1) as f64).powf(env.spec().eta))
                .sum();
            assert!(
                (closed - oracle).abs() < 1e-12,
                "triple {i}: closed form {closed} vs oracle {oracle}"
            );
            closed_checked += 1;
        }
    }
    assert!(closed_checked >= 8, "only {closed_checked} closed-form triples");
    pass(3, "Monte-Carlo rewards match the enumeration oracle across all dynamics");
}

#[test]
fn criterion_4_metric_oracles() {
    // Hand-derived from the DCG definition (2^rel - 1) / log2(i + 1).
    let expected_01 = (2f64.powi(1) - 1.0) / 3f64.log2();
    assert!((expected_01 - 0.6309).abs() < 1e-4);
    assert!((ndcg(&[0.0, 1.0]) - expected_01).abs() < 1e-4);

    let expected_101 = 1.5 / (1.0 + 1.0 / 3f64.log2());
    assert!((ndcg(&[1.0, 0.0, 1.0]) - expected_101).abs() < 1e-4);

    // pre@K is exactly linear in the click count of the first K slots.
    for k in 1..=10usize {
        let mut labels = vec![0.0; 10];
        let mut previous = 0.0;
        for filled in 0..k {
            labels[filled] = 1.0;
            let now = pre_at_k(&labels, k).unwrap();
            assert_eq!(now - previous, 1.0 / k as f64, "k={k} filled={filled}");
            previous = now;
        }
        assert_eq!(previous, 1.0);
    }
    pass(4, "ndcg and pre@k match hand-derived oracle values");
}

#[test]
fn criterion_8_training_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> (Vec<u8>, String) {
        let grid = Grid::new(1, 2).unwrap();
        let mut page_rng = SeededRng::derive(81, "pages", &[]);
        let pages: Vec<PageInstance> = (0..40)
            .map(|_| random_page(&mut page_rng, 6, grid, 2, 3))
            .collect();
        let mut spec = EnvironmentSpec::row_default(82);
        spec.eta = 0.0;
        spec.reward = RewardKind::Ndcg;
        let env = Environment::new(spec, 2, 3).unwrap();
        let mut policy = TilePolicy::new(
            small_policy_config(5),
            &mut SeededRng::derive(83, "policy-init", &[]),
        );
        let mut critic = Critic::new(
            CriticConfig {
                input_width: 5,
                tiles: 2,
                d_k: 8,
                d_v: 8,
                positionwise_width: 4,
            },
            &mut SeededRng::derive(83, "critic-init", &[]),
        );
        let mut config = TrainConfig::new(25, 8, 84);
        config.eval_every = 25;
        let ckpt_path = dir.path().join(format!("{tag}.ckpt"));
        let stats_path = dir.path().join(format!("{tag}-stats.csv"));
        let outcome = train(
            &mut policy,
            &mut critic,
            &env,
            None,
            &pages[..28],
            &pages[28..34],
            &config,
            Some(&ckpt_path),
        )
        .unwrap();
        write_stats_csv(&stats_path, &outcome).unwrap();
        (
            std::fs::read(&ckpt_path).unwrap(),
            std::fs::read_to_string(&stats_path).unwrap(),
        )
    };
    let (ckpt_a, stats_a) = run("a");
    let (ckpt_b, stats_b) = run("b");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");
    assert_eq!(stats_a, stats_b, "stats reports differ between identical runs");
    pass(8, "identical configs yield bitwise-identical checkpoints and reports");
}

#[test]
fn criterion_9_checkpoint_round_trip_is_bitwise() {
    let mut rng = SeededRng::from_root(91);
    let policy = TilePolicy::new(small_policy_config(5), &mut rng);
    let critic = Critic::new(
        CriticConfig {
            input_width: 5,
            tiles: 4,
            d_k: 8,
            d_v: 8,
            positionwise_width: 4,
        },
        &mut rng,
    );

    // Give the optimizer states a few nonzero moments.
    let mut perturbed = (policy.params.clone(), critic.params.clone());
    let mut adam_policy = AdamState::new(AdamConfig::default(), &policy.params);
    let mut adam_critic = AdamState::new(AdamConfig::default(), &critic.params);
    for _ in 0..3 {
        for (params, adam) in [
            (&mut perturbed.0, &mut adam_policy),
            (&mut perturbed.1, &mut adam_critic),
        ] {
            let mut grads = params.clone();
            for i in 0..grads.len() {
                for v in grads.at_mut(i).1.values_mut() {
                    *v = rng.normal() * 0.01;
                }
            }
            adam.apply(params, &grads).unwrap();
        }
    }

    let original = Checkpoint {
        step: 17,
        groups: vec![
            ParamGroup {
                name: "policy".to_string(),
                params: perturbed.0,
                adam: Some(adam_policy),
            },
            ParamGroup {
                name: "critic".to_string(),
                params: perturbed.1,
                adam: Some(adam_critic),
            },
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("round-trip.ckpt");
    checkpoint::save(&path, &original).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, original, "round trip changed the checkpoint");
    let original_bytes = checkpoint::to_bytes(&original).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        original_bytes,
        "file bytes differ from serialization"
    );
    assert_eq!(
        checkpoint::to_bytes(&loaded).unwrap(),
        original_bytes,
        "reserialization differs"
    );
    pass(9, "checkpoint save and load round-trip parameters and optimizer state bitwise");
}
