//! Value network scoring (page, configuration) pairs.
//!
//! Each filled tile contributes one row [X_item, Z_tile]; rows are attended
//! jointly, passed through a shared position-wise layer, concatenated in
//! tile order, and mapped to a scalar. Tile-order canonicalization makes the
//! estimate independent of the step order that produced the configuration.

use serde::{Deserialize, Serialize};

use crate::nn::{attention_bind, attention_register, self_attention_block, AttentionDims};
use crate::page::{Configuration, ConfigurationError, PageError, PageInstance};
use crate::params::{Bound, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CriticError {
    #[error("page input width {actual} does not match critic input width {expected}")]
    InputWidth { expected: usize, actual: usize },
    #[error("page has {actual} tiles but the critic was built for {expected}")]
    GridSize { expected: usize, actual: usize },
    #[error(transparent)]
    Page(#[from] PageError),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
    #[error("{estimates} estimates vs {observed} observed rewards")]
    LengthMismatch { estimates: usize, observed: usize },
    #[error("loss over zero samples")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub input_width: usize,
    pub tiles: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub positionwise_width: usize,
}

impl CriticConfig {
    /// Paper-scale defaults: attention width 128, position-wise width 16.
    pub fn new(input_width: usize, tiles: usize) -> Self {
        Self {
            input_width,
            tiles,
            d_k: 128,
            d_v: 128,
            positionwise_width: 16,
        }
    }

    fn attention(&self) -> AttentionDims {
        AttentionDims {
            input: self.input_width + 2,
            d_k: self.d_k,
            d_v: self.d_v,
        }
    }
}

pub struct Critic {
    pub config: CriticConfig,
    pub params: ParamSet,
}

impl Critic {
    pub fn new(config: CriticConfig, rng: &mut SeededRng) -> Self {
        let mut params = ParamSet::new();
        attention_register(&mut params, "enc", &config.attention(), rng);
        let r_pw = 1.0 / (config.d_k as f64).sqrt();
        params
            .insert(
                "pw.w",
                rng.uniform_tensor(vec![config.d_k, config.positionwise_width], -r_pw, r_pw),
            )
            .unwrap();
        params
            .insert("pw.b", Tensor::zeros(vec![config.positionwise_width]))
            .unwrap();
        let agg_in = config.tiles * config.positionwise_width;
        let r_agg = 1.0 / (agg_in as f64).sqrt();
        params
            .insert("agg.w", rng.uniform_tensor(vec![agg_in, 1], -r_agg, r_agg))
            .unwrap();
        params.insert("agg.b", Tensor::zeros(vec![1])).unwrap();
        Self { config, params }
    }

    fn check(&self, page: &PageInstance, configuration: &Configuration) -> Result<(), CriticError> {
        page.validate()?;
        if page.input_width() != self.config.input_width {
            return Err(CriticError::InputWidth {
                expected: self.config.input_width,
                actual: page.input_width(),
            });
        }
        if page.k() != self.config.tiles {
            return Err(CriticError::GridSize {
                expected: self.config.tiles,
                actual: page.k(),
            });
        }
        Configuration::new(
            configuration.items().to_vec(),
            configuration.tiles().to_vec(),
            page.n(),
            page.k(),
        )?;
        Ok(())
    }

    /// The [k, input_width + 2] feature matrix in canonical tile order.
    fn input_matrix(&self, page: &PageInstance, configuration: &Configuration) -> Tensor {
        let k = page.k();
        let width = page.input_width() + 2;
        let by_tile = configuration.item_by_tile();
        let mut values = Vec::with_capacity(k * width);
        for tile in 0..k {
            values.extend_from_slice(&page.item_input(by_tile[tile]));
            values.extend_from_slice(&page.grid.tile_coords(tile));
        }
        Tensor::matrix(k, width, values).unwrap()
    }

    /// Scalar value estimate, differentiable in critic parameters.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        page: &PageInstance,
        configuration: &Configuration,
    ) -> Result<NodeId, CriticError> {
        self.check(page, configuration)?;
        let x = tape.leaf(self.input_matrix(page, configuration));
        let enc_nodes = attention_bind(bound, "enc", &self.config.attention());
        let h = self_attention_block(tape, x, &enc_nodes);
        let pw_lin = tape.matmul(h, bound.id("pw.w"));
        let pw_biased = tape.add_row_broadcast(pw_lin, bound.id("pw.b"));
        let pw = tape.relu(pw_biased);
        let flat = tape.reshape(pw, vec![self.config.tiles * self.config.positionwise_width]);
        let agg = tape.vecmat(flat, bound.id("agg.w"));
        let out = tape.add(agg, bound.id("agg.b"));
        Ok(tape.pick(out, 0))
    }

    pub fn forward_value(
        &self,
        page: &PageInstance,
        configuration: &Configuration,
    ) -> Result<f64, CriticError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let node = self.forward(&mut tape, &bound, page, configuration)?;
        Ok(tape.value(node).item())
    }
}

/// Squared-error regression loss on the tape; `observed` enters as constants.
pub fn critic_loss(
    tape: &mut Tape,
    estimates: &[NodeId],
    observed: &[f64],
    variant: LossVariant,
) -> Result<NodeId, CriticError> {
    if estimates.is_empty() {
        return Err(CriticError::Empty);
    }
    if estimates.len() != observed.len() {
        return Err(CriticError::LengthMismatch {
            estimates: estimates.len(),
            observed: observed.len(),
        });
    }
    let mut acc: Option<NodeId> = None;
    for (&est, &obs) in estimates.iter().zip(observed) {
        let diff = tape.add_const(est, -obs);
        let sq = tape.mul_elem(diff, diff);
        acc = Some(match acc {
            None => sq,
            Some(a) => tape.add(a, sq),
        });
    }
    let total = acc.unwrap();
    Ok(match variant {
        LossVariant::Sum => total,
        LossVariant::Mean => tape.scale(total, 1.0 / estimates.len() as f64),
    })
}

/// Tape-free evaluation of the same loss, for reporting.
pub fn critic_loss_value(
    estimates: &[f64],
    observed: &[f64],
    variant: LossVariant,
) -> Result<f64, CriticError> {
    if estimates.is_empty() {
        return Err(CriticError::Empty);
    }
    if estimates.len() != observed.len() {
        return Err(CriticError::LengthMismatch {
            estimates: estimates.len(),
            observed: observed.len(),
        });
    }
    let total: f64 = estimates
        .iter()
        .zip(observed)
        .map(|(e, o)| (e - o) * (e - o))
        .sum();
    Ok(match variant {
        LossVariant::Sum => total,
        LossVariant::Mean => total / estimates.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::{AdamConfig, AdamState};
    use crate::gradcheck::{grad_check, Probes};
    use crate::page::Grid;

    fn small_config() -> CriticConfig {
        CriticConfig {
            input_width: 5,
            tiles: 4,
            d_k: 8,
            d_v: 8,
            positionwise_width: 6,
        }
    }

    fn random_page(rng: &mut SeededRng, n: usize) -> PageInstance {
        let user: Vec<f64> = (0..2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let items: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        PageInstance::new(user, items, Grid::new(2, 2).unwrap()).unwrap()
    }

    fn random_configuration(rng: &mut SeededRng, n: usize, k: usize) -> Configuration {
        let items = rng.sample_indices(n, k);
        let mut tiles: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut tiles);
        Configuration::new(items, tiles, n, k).unwrap()
    }

    #[test]
    fn zero_aggregate_head_outputs_zero() {
        let mut rng = SeededRng::from_root(1);
        let mut critic = Critic::new(small_config(), &mut rng);
        let zeros = Tensor::zeros(vec![4 * 6, 1]);
        critic.params.set("agg.w", zeros).unwrap();
        let page = random_page(&mut rng, 6);
        let config = random_configuration(&mut rng, 6, 4);
        assert_eq!(critic.forward_value(&page, &config).unwrap(), 0.0);
    }

    #[test]
    fn single_placement_change_moves_the_estimate() {
        for seed in 0..30 {
            let mut rng = SeededRng::from_root(seed);
            let critic = Critic::new(small_config(), &mut rng);
            let page = random_page(&mut rng, 6);
            let a = Configuration::new(vec![0, 1, 2, 3], vec![0, 1, 2, 3], 6, 4).unwrap();
            let b = Configuration::new(vec![0, 1, 2, 4], vec![0, 1, 2, 3], 6, 4).unwrap();
            let va = critic.forward_value(&page, &a).unwrap();
            let vb = critic.forward_value(&page, &b).unwrap();
            assert_ne!(va, vb, "seed {seed}");
        }
    }

    #[test]
    fn estimate_ignores_step_order() {
        let mut rng = SeededRng::from_root(3);
        let critic = Critic::new(small_config(), &mut rng);
        let page = random_page(&mut rng, 6);
        // Same tile->item assignment reached in two step orders.
        let a = Configuration::new(vec![4, 1, 5, 2], vec![2, 0, 3, 1], 6, 4).unwrap();
        let b = Configuration::new(vec![1, 2, 4, 5], vec![0, 1, 2, 3], 6, 4).unwrap();
        assert_eq!(a.item_by_tile(), b.item_by_tile());
        let va = critic.forward_value(&page, &a).unwrap();
        let vb = critic.forward_value(&page, &b).unwrap();
        assert_eq!(va.to_bits(), vb.to_bits());
    }

    #[test]
    fn squared_error_grad_check() {
        let mut rng = SeededRng::from_root(4);
        let critic = Critic::new(small_config(), &mut rng);
        let page = random_page(&mut rng, 6);
        let config = random_configuration(&mut rng, 6, 4);
        let err = grad_check(
            |tape, leaves| {
                let bound = critic.params.bound_to(leaves);
                let est = critic.forward(tape, &bound, &page, &config).unwrap();
                let diff = tape.add_const(est, -0.37);
                tape.mul_elem(diff, diff)
            },
            &critic.params,
            1e-5,
            Probes::PerTensor(10),
            &mut SeededRng::from_root(5),
        )
        .unwrap();
        assert!(err < 1e-5, "critic grad err {err}");
    }

    #[test]
    fn loss_examples() {
        assert_eq!(
            critic_loss_value(&[1.0, 2.0], &[1.0, 2.0], LossVariant::Mean).unwrap(),
            0.0
        );
        assert_eq!(
            critic_loss_value(&[0.0, 0.0], &[1.0, 2.0], LossVariant::Mean).unwrap(),
            2.5
        );
        assert_eq!(
            critic_loss_value(&[3.0], &[1.0], LossVariant::Sum).unwrap(),
            4.0
        );
        assert_eq!(
            critic_loss_value(&[1.0], &[1.0, 2.0], LossVariant::Mean),
            Err(CriticError::LengthMismatch {
                estimates: 1,
                observed: 2
            })
        );
        assert_eq!(
            critic_loss_value(&[], &[], LossVariant::Mean),
            Err(CriticError::Empty)
        );

        // Tape and raw paths agree.
        let mut tape = Tape::new();
        let e1 = tape.leaf(Tensor::scalar(0.3));
        let e2 = tape.leaf(Tensor::scalar(-1.1));
        let node = critic_loss(&mut tape, &[e1, e2], &[0.5, 0.5], LossVariant::Mean).unwrap();
        let raw = critic_loss_value(&[0.3, -1.1], &[0.5, 0.5], LossVariant::Mean).unwrap();
        assert!((tape.value(node).item() - raw).abs() < 1e-15);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let mut rng = SeededRng::from_root(6);
        let critic = Critic::new(small_config(), &mut rng);
        let user: Vec<f64> = vec![0.0, 0.0];
        let items: Vec<Vec<f64>> = (0..2).map(|_| vec![0.1, 0.2, 0.3]).collect();
        let page = PageInstance::new(user, items, Grid::new(1, 2).unwrap()).unwrap();
        let config = Configuration::new(vec![0, 1], vec![0, 1], 2, 2).unwrap();
        assert_eq!(
            critic.forward_value(&page, &config).unwrap_err(),
            CriticError::GridSize {
                expected: 4,
                actual: 2
            }
        );
    }

    #[test]
    fn regression_reaches_low_error_on_linear_reward() {
        // Synthetic reward: linear in the placed features, tile-weighted.
        let mut rng = SeededRng::from_root(7);
        let mut critic = Critic::new(small_config(), &mut rng);
        let reward_w: Vec<f64> = (0..(5 + 2) * 4).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
        let reward = |page: &PageInstance, config: &Configuration| -> f64 {
            let by_tile = config.item_by_tile();
            let mut features = Vec::new();
            for tile in 0..4 {
                features.extend_from_slice(&page.item_input(by_tile[tile]));
                features.extend_from_slice(&page.grid.tile_coords(tile));
            }
            features.iter().zip(&reward_w).map(|(f, w)| f * w).sum()
        };

        let make_batch = |rng: &mut SeededRng, size: usize| {
            (0..size)
                .map(|_| {
                    let page = random_page(rng, 6);
                    let config = random_configuration(rng, 6, 4);
                    let r = reward(&page, &config);
                    (page, config, r)
                })
                .collect::<Vec<_>>()
        };

        let mut adam = AdamState::new(AdamConfig::default(), &critic.params);
        let mut train_rng = SeededRng::derive(7, "train", &[]);
        for _ in 0..700 {
            let batch = make_batch(&mut train_rng, 16);
            let mut tape = Tape::new();
            let bound = critic.params.bind(&mut tape);
            let estimates: Vec<NodeId> = batch
                .iter()
                .map(|(p, c, _)| critic.forward(&mut tape, &bound, p, c).unwrap())
                .collect();
            let observed: Vec<f64> = batch.iter().map(|&(_, _, r)| r).collect();
            let loss = critic_loss(&mut tape, &estimates, &observed, LossVariant::Mean).unwrap();
            let grads = bound.gradients(&tape.backward(loss));
            adam.apply(&mut critic.params, &grads).unwrap();
        }

        let mut heldout_rng = SeededRng::derive(7, "heldout", &[]);
        let heldout = make_batch(&mut heldout_rng, 200);
        let rewards: Vec<f64> = heldout.iter().map(|&(_, _, r)| r).collect();
        let mean_r = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let var_r = rewards.iter().map(|r| (r - mean_r) * (r - mean_r)).sum::<f64>()
            / rewards.len() as f64;
        let mse = heldout
            .iter()
            .map(|(p, c, r)| {
                let e = critic.forward_value(p, c).unwrap();
                (e - r) * (e - r)
            })
            .sum::<f64>()
            / heldout.len() as f64;
        assert!(
            mse < 0.1 * var_r,
            "held-out mse {mse} vs reward variance {var_r}"
        );
    }
}
