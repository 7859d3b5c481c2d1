//! Policy-gradient training: sample configurations, collect simulated
//! rewards, ascend the score-function gradient against a learned value
//! baseline, and regress the critic on the observed rewards.

use crate::adam::{AdamConfig, AdamState};
use crate::baselines::LayoutKind;
use crate::checkpoint::{self, Checkpoint, CheckpointError, ParamGroup};
use crate::critic::{critic_loss, Critic, CriticError, LossVariant};
use crate::env::{EnvError, Environment};
use crate::metrics::{evaluate_policy, EvaluationReport, MetricsError};
use crate::page::{Configuration, PageInstance};
use crate::params::{ParamError, ParamSet};
use crate::policy::{Driver, PolicyError, TilePolicy, TileSelection};
use crate::rng::SeededRng;
use crate::tape::Tape;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("batch needs at least one page")]
    EmptyBatch,
    #[error("batch size {batch} exceeds {pages} training pages")]
    BatchTooLarge { batch: usize, pages: usize },
    #[error("training needs at least one page")]
    NoTrainingPages,
    #[error("{what} must be positive and finite, got {value}")]
    BadHyper { what: &'static str, value: f64 },
    #[error("episode {episode} produced non-finite reward {value}")]
    NonFiniteReward { episode: usize, value: f64 },
    #[error("{what} is non-finite: {value}")]
    NonFiniteLoss { what: &'static str, value: f64 },
    #[error("{group} gradient {name} is non-finite")]
    NonFiniteGradient { group: &'static str, name: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("stats csv: {0}")]
    Csv(#[from] csv::Error),
}

/// What multiplies the score-function term for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Observed reward minus the critic estimate; the unbiased default.
    #[default]
    ObservedMinusCritic,
    /// The critic estimate alone stands in for the reward.
    CriticEstimate,
}

impl AdvantageMode {
    pub fn coefficient(self, reward: f64, baseline: f64) -> f64 {
        match self {
            AdvantageMode::ObservedMinusCritic => reward - baseline,
            AdvantageMode::CriticEstimate => baseline,
        }
    }
}

fn default_critic_loss() -> LossVariant {
    LossVariant::Mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub policy_adam: AdamConfig,
    #[serde(default)]
    pub critic_adam: AdamConfig,
    #[serde(default)]
    pub advantage: AdvantageMode,
    #[serde(default = "default_critic_loss")]
    pub critic_loss: LossVariant,
    /// Entropy bonus weight over both heads' step distributions; 0 disables.
    #[serde(default)]
    pub entropy_weight: f64,
    /// Standardize advantages within each batch.
    #[serde(default)]
    pub normalize_advantages: bool,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    /// Rewrite the rolling checkpoint every this many steps; 0 = final only.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            policy_adam: AdamConfig::default(),
            critic_adam: AdamConfig::default(),
            advantage: AdvantageMode::default(),
            critic_loss: LossVariant::Mean,
            entropy_weight: 0.0,
            normalize_advantages: false,
            seed,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.batch_size == 0 {
            return Err(TrainerError::EmptyBatch);
        }
        for (what, value) in [
            ("policy learning rate", self.policy_adam.learning_rate),
            ("critic learning rate", self.critic_adam.learning_rate),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(TrainerError::BadHyper { what, value });
            }
        }
        if !self.entropy_weight.is_finite() || self.entropy_weight < 0.0 {
            return Err(TrainerError::BadHyper {
                what: "entropy weight",
                value: self.entropy_weight,
            });
        }
        Ok(())
    }
}

/// One sampled episode with everything the gradient needs.
#[derive(Debug, Clone)]
pub struct ScoredEpisode<'a> {
    pub page: &'a PageInstance,
    pub configuration: Configuration,
    pub reward: f64,
    pub baseline: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub ndcg: f64,
    pub precision: f64,
    pub clicks: f64,
    pub reward: f64,
}

impl From<&EvaluationReport> for EvalSnapshot {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            ndcg: r.ndcg.mean,
            precision: r.precision.mean,
            clicks: r.clicks.mean,
            reward: r.reward.mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_baseline: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub policy_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub eval: Option<EvalSnapshot>,
}

pub struct BatchResult<'a> {
    pub policy_grads: ParamSet,
    pub critic_grads: ParamSet,
    pub stats: TrainStats,
    pub episodes: Vec<ScoredEpisode<'a>>,
}

fn accumulate(acc: &mut ParamSet, grads: &ParamSet) {
    for i in 0..acc.len() {
        let g = grads.at(i).1.values().to_vec();
        let (_, t) = acc.at_mut(i);
        for (a, gv) in t.values_mut().iter_mut().zip(g) {
            *a += gv;
        }
    }
}

fn scale_in_place(set: &mut ParamSet, factor: f64) {
    for i in 0..set.len() {
        for v in set.at_mut(i).1.values_mut() {
            *v *= factor;
        }
    }
}

fn grad_norm(set: &ParamSet) -> f64 {
    set.iter()
        .map(|(_, t)| t.squared_norm())
        .sum::<f64>()
        .sqrt()
}

/// Gradient of the mean surrogate loss -coeff * log p(C|I) (minus the
/// entropy bonus when weighted) over episodes, replaying each configuration
/// through the policy. Also returns the mean surrogate value.
pub fn policy_gradients(
    policy: &TilePolicy,
    layout: Option<LayoutKind>,
    episodes: &[ScoredEpisode],
    mode: AdvantageMode,
    entropy_weight: f64,
    normalize_advantages: bool,
) -> Result<(ParamSet, f64), TrainerError> {
    if episodes.is_empty() {
        return Err(TrainerError::EmptyBatch);
    }
    let mut coeffs: Vec<f64> = episodes
        .iter()
        .map(|e| mode.coefficient(e.reward, e.baseline))
        .collect();
    if normalize_advantages {
        let n = coeffs.len() as f64;
        let mean = coeffs.iter().sum::<f64>() / n;
        let var = coeffs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for c in coeffs.iter_mut() {
            *c = (*c - mean) / (std + 1e-8);
        }
    }
    let mut acc = policy.params.zeros_like();
    let mut loss_sum = 0.0;
    for (e, episode) in episodes.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = policy.params.bind(&mut tape);
        let order;
        let sel = match layout {
            Some(kind) => {
                order = kind.order(episode.page.grid);
                TileSelection::Fixed(&order)
            }
            None => TileSelection::Learned,
        };
        let r = policy.rollout(
            &mut tape,
            &bound,
            episode.page,
            Driver::Forced(&episode.configuration),
            sel,
        )?;
        let mut loss = tape.scale(r.log_prob, -coeffs[e]);
        if entropy_weight != 0.0 {
            let mut h: Option<crate::tape::NodeId> = None;
            for &p in r
                .step_item_prob_nodes
                .iter()
                .chain(&r.step_tile_prob_nodes)
            {
                let hp = tape.entropy(p);
                h = Some(match h {
                    Some(prev) => tape.add(prev, hp),
                    None => hp,
                });
            }
            if let Some(h) = h {
                let bonus = tape.scale(h, -entropy_weight);
                loss = tape.add(loss, bonus);
            }
        }
        loss_sum += tape.value(loss).item();
        let grads = bound.gradients(&tape.backward(loss));
        accumulate(&mut acc, &grads);
    }
    let inv = 1.0 / episodes.len() as f64;
    scale_in_place(&mut acc, inv);
    Ok((acc, loss_sum * inv))
}

/// One REINFORCE batch: per page, sample a configuration, simulate clicks,
/// and take the critic's value as baseline; then form policy gradients from
/// the replayed episodes and critic gradients from the regression on
/// observed rewards. Per-episode rng substreams are drawn sequentially from
/// `rng`, so a batch splits into matching single-episode batches.
pub fn reinforce_batch<'a>(
    policy: &TilePolicy,
    critic: &Critic,
    env: &Environment,
    layout: Option<LayoutKind>,
    pages: &[&'a PageInstance],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<BatchResult<'a>, TrainerError> {
    if pages.is_empty() {
        return Err(TrainerError::EmptyBatch);
    }
    let mut episodes = Vec::with_capacity(pages.len());
    for (e, page) in pages.iter().enumerate() {
        let mut ep_rng = SeededRng::from_root(rng.next_u64());
        let order;
        let sel = match layout {
            Some(kind) => {
                order = kind.order(page.grid);
                TileSelection::Fixed(&order)
            }
            None => TileSelection::Learned,
        };
        let rolled = policy.rollout_detached(page, Driver::Sample(&mut ep_rng), sel)?;
        let record = env.simulate_clicks(page, &rolled.configuration, &mut ep_rng)?;
        if !record.reward.is_finite() {
            return Err(TrainerError::NonFiniteReward {
                episode: e,
                value: record.reward,
            });
        }
        let baseline = critic.forward_value(page, &rolled.configuration)?;
        if !baseline.is_finite() {
            return Err(TrainerError::NonFiniteLoss {
                what: "critic baseline",
                value: baseline,
            });
        }
        episodes.push(ScoredEpisode {
            page,
            configuration: rolled.configuration,
            reward: record.reward,
            baseline,
            log_prob: rolled.log_prob,
        });
    }

    let (policy_grads, policy_loss) = policy_gradients(
        policy,
        layout,
        &episodes,
        config.advantage,
        config.entropy_weight,
        config.normalize_advantages,
    )?;
    if !policy_loss.is_finite() {
        return Err(TrainerError::NonFiniteLoss {
            what: "policy surrogate",
            value: policy_loss,
        });
    }
    if let Some((name, _, _)) = policy_grads.find_non_finite() {
        return Err(TrainerError::NonFiniteGradient {
            group: "policy",
            name: name.to_string(),
        });
    }

    let mut tape = Tape::new();
    let bound = critic.params.bind(&mut tape);
    let mut estimates = Vec::with_capacity(episodes.len());
    for episode in &episodes {
        estimates.push(critic.forward(&mut tape, &bound, episode.page, &episode.configuration)?);
    }
    let rewards: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
    let loss_node = critic_loss(&mut tape, &estimates, &rewards, config.critic_loss)?;
    let critic_loss_value = tape.value(loss_node).item();
    if !critic_loss_value.is_finite() {
        return Err(TrainerError::NonFiniteLoss {
            what: "critic loss",
            value: critic_loss_value,
        });
    }
    let critic_grads = bound.gradients(&tape.backward(loss_node));
    if let Some((name, _, _)) = critic_grads.find_non_finite() {
        return Err(TrainerError::NonFiniteGradient {
            group: "critic",
            name: name.to_string(),
        });
    }

    let b = episodes.len() as f64;
    let stats = TrainStats {
        step: 0,
        mean_reward: rewards.iter().sum::<f64>() / b,
        mean_baseline: episodes.iter().map(|e| e.baseline).sum::<f64>() / b,
        policy_loss,
        critic_loss: critic_loss_value,
        policy_grad_norm: grad_norm(&policy_grads),
        critic_grad_norm: grad_norm(&critic_grads),
        eval: None,
    };
    Ok(BatchResult {
        policy_grads,
        critic_grads,
        stats,
        episodes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub stats: Vec<TrainStats>,
    pub evaluations: Vec<(u64, EvaluationReport)>,
    pub checkpoint_path: Option<PathBuf>,
}

fn is_divergence(e: &TrainerError) -> bool {
    matches!(
        e,
        TrainerError::NonFiniteReward { .. }
            | TrainerError::NonFiniteLoss { .. }
            | TrainerError::NonFiniteGradient { .. }
            | TrainerError::Policy(PolicyError::Sampling(_))
    )
}

fn eval_point(
    policy: &TilePolicy,
    env: &Environment,
    layout: Option<LayoutKind>,
    pages: &[PageInstance],
    seed: u64,
    step: u64,
) -> Result<EvaluationReport, TrainerError> {
    let eval_seed = SeededRng::derive(seed, "eval", &[step]).next_u64();
    let report = evaluate_policy(
        |page| {
            let order;
            let sel = match layout {
                Some(kind) => {
                    order = kind.order(page.grid);
                    TileSelection::Fixed(&order)
                }
                None => TileSelection::Learned,
            };
            policy
                .rollout_detached(page, Driver::Greedy, sel)
                .map(|r| r.configuration)
                .map_err(|e| e.to_string())
        },
        env,
        pages,
        eval_seed,
    )?;
    Ok(report)
}

fn save_snapshot(
    path: Option<&Path>,
    step: u64,
    policy: &TilePolicy,
    critic: &Critic,
    policy_adam: &AdamState,
    critic_adam: &AdamState,
) -> Result<(), TrainerError> {
    if let Some(path) = path {
        let ckpt = Checkpoint {
            step,
            groups: vec![
                ParamGroup {
                    name: "policy".into(),
                    params: policy.params.clone(),
                    adam: Some(policy_adam.clone()),
                },
                ParamGroup {
                    name: "critic".into(),
                    params: critic.params.clone(),
                    adam: Some(critic_adam.clone()),
                },
            ],
        };
        checkpoint::save(path, &ckpt)?;
    }
    Ok(())
}

/// Run the training loop. `layout: None` trains the full grid policy;
/// `Some(kind)` trains a pointer-style selector along that fixed layout.
/// On divergence the rolling checkpoint keeps its last healthy snapshot.
#[allow(clippy::too_many_arguments)]
pub fn train(
    policy: &mut TilePolicy,
    critic: &mut Critic,
    env: &Environment,
    layout: Option<LayoutKind>,
    train_pages: &[PageInstance],
    validation_pages: &[PageInstance],
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, TrainerError> {
    config.validate()?;
    if config.steps > 0 {
        if train_pages.is_empty() {
            return Err(TrainerError::NoTrainingPages);
        }
        if config.batch_size > train_pages.len() {
            return Err(TrainerError::BatchTooLarge {
                batch: config.batch_size,
                pages: train_pages.len(),
            });
        }
    }
    let mut policy_adam = AdamState::new(config.policy_adam.clone(), &policy.params);
    let mut critic_adam = AdamState::new(config.critic_adam.clone(), &critic.params);
    let mut select_rng = SeededRng::derive(config.seed, "page-select", &[]);
    let mut stats: Vec<TrainStats> = Vec::with_capacity(config.steps);
    let mut evaluations = Vec::new();
    let eval_enabled = config.eval_every > 0 && !validation_pages.is_empty();
    if eval_enabled {
        evaluations.push((
            0,
            eval_point(policy, env, layout, validation_pages, config.seed, 0)?,
        ));
    }

    let total = config.steps as u64;
    for step in 1..=total {
        let indices = select_rng.sample_indices(train_pages.len(), config.batch_size);
        let batch: Vec<&PageInstance> = indices.iter().map(|&i| &train_pages[i]).collect();
        let mut step_rng = SeededRng::derive(config.seed, "step", &[step]);
        let result =
            match reinforce_batch(policy, critic, env, layout, &batch, config, &mut step_rng) {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    return Err(TrainerError::Diverged {
                        step,
                        detail: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            };
        policy_adam.apply(&mut policy.params, &result.policy_grads)?;
        critic_adam.apply(&mut critic.params, &result.critic_grads)?;
        if let Some((name, _, value)) = policy
            .params
            .find_non_finite()
            .or_else(|| critic.params.find_non_finite())
        {
            return Err(TrainerError::Diverged {
                step,
                detail: format!("parameter {name} became {value}"),
            });
        }
        let mut row = result.stats;
        row.step = step;
        if eval_enabled && (step % config.eval_every as u64 == 0 || step == total) {
            let report = eval_point(policy, env, layout, validation_pages, config.seed, step)?;
            row.eval = Some(EvalSnapshot::from(&report));
            evaluations.push((step, report));
        }
        stats.push(row);
        let cadence = config.checkpoint_every as u64;
        if cadence > 0 && step % cadence == 0 {
            save_snapshot(checkpoint_path, step, policy, critic, &policy_adam, &critic_adam)?;
        }
    }
    save_snapshot(checkpoint_path, total, policy, critic, &policy_adam, &critic_adam)?;
    Ok(TrainOutcome {
        stats,
        evaluations,
        checkpoint_path: checkpoint_path.map(Path::to_path_buf),
    })
}

/// Append-free CSV dump of the stats series; evaluation columns are empty on
/// steps without an evaluation, and the step-0 evaluation (before any
/// update) appears as a row with empty training columns.
pub fn write_stats_csv(path: &Path, outcome: &TrainOutcome) -> Result<(), TrainerError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "mean_reward",
        "mean_baseline",
        "policy_loss",
        "critic_loss",
        "policy_grad_norm",
        "critic_grad_norm",
        "eval_ndcg",
        "eval_precision",
        "eval_clicks",
        "eval_reward",
    ])?;
    let eval_cols = |eval: Option<&EvalSnapshot>| -> [String; 4] {
        match eval {
            Some(e) => [
                e.ndcg.to_string(),
                e.precision.to_string(),
                e.clicks.to_string(),
                e.reward.to_string(),
            ],
            None => Default::default(),
        }
    };
    if let Some((_, report)) = outcome.evaluations.iter().find(|(s, _)| *s == 0) {
        let snap = EvalSnapshot::from(report);
        let e = eval_cols(Some(&snap));
        let mut record = vec!["0".to_string()];
        record.extend(std::iter::repeat_n(String::new(), 6));
        record.extend(e);
        w.write_record(&record)?;
    }
    for row in &outcome.stats {
        let e = eval_cols(row.eval.as_ref());
        let record = [
            row.step.to_string(),
            row.mean_reward.to_string(),
            row.mean_baseline.to_string(),
            row.policy_loss.to_string(),
            row.critic_loss.to_string(),
            row.policy_grad_norm.to_string(),
            row.critic_grad_norm.to_string(),
            e[0].clone(),
            e[1].clone(),
            e[2].clone(),
            e[3].clone(),
        ];
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
