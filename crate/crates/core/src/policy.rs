//! The tile-filling policy.
//!
//! Items and tiles are encoded by separate self-attention blocks; a
//! recurrent decoder then emits one (item, tile) pair per step through two
//! pointer heads with masked softmax, until every tile is filled. The two
//! heads are factorized independently per step, so a configuration's
//! log-probability is the sum of both heads' log-probabilities over steps.

use serde::{Deserialize, Serialize};

use crate::nn::{
    self, attention_bind, attention_register, lstm_bind, lstm_cell, lstm_register, rnn_bind,
    rnn_cell, rnn_register, self_attention_block, AttentionDims, AttentionNodes, LstmDims,
    LstmNodes, NnError, RnnNodes,
};
use crate::page::{Configuration, ConfigurationError, PageError, PageInstance};
use crate::params::{Bound, ParamSet};
use crate::rng::{SampleError, SeededRng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("page input width {actual} does not match policy input width {expected}")]
    InputWidth { expected: usize, actual: usize },
    #[error(transparent)]
    Page(#[from] PageError),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
    #[error(transparent)]
    Sampling(#[from] SampleError),
    #[error("decode step {step}: {source}")]
    Masked { step: usize, source: NnError },
    #[error("fixed tile layout {0}")]
    FixedLayout(String),
    #[error("heatmap needs at least one page")]
    EmptyPageSample,
    #[error("pages in sample use different grids")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Vanilla,
}

/// Architecture of one policy. `input_width` is the concatenated
/// [user, item] feature width the encoders expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub input_width: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub decoder_hidden: usize,
    pub head_dim: usize,
    pub cell: CellKind,
}

impl PolicyConfig {
    /// Paper-scale defaults: attention width 128, decoder and pointer-head
    /// width 64, LSTM cell.
    pub fn with_input_width(input_width: usize) -> Self {
        Self {
            input_width,
            d_k: 128,
            d_v: 128,
            decoder_hidden: 64,
            head_dim: 64,
            cell: CellKind::Lstm,
        }
    }

    fn item_attention(&self) -> AttentionDims {
        AttentionDims {
            input: self.input_width,
            d_k: self.d_k,
            d_v: self.d_v,
        }
    }

    fn tile_attention(&self) -> AttentionDims {
        AttentionDims {
            input: 2,
            d_k: self.d_k,
            d_v: self.d_v,
        }
    }

    fn decoder(&self) -> LstmDims {
        LstmDims {
            input: self.input_width + 2,
            hidden: self.decoder_hidden,
        }
    }
}

/// How step selections are made during decoding.
pub enum Driver<'a> {
    /// Argmax of each head, ties broken toward the lowest index.
    Greedy,
    /// Draw from each head's distribution.
    Sample(&'a mut SeededRng),
    /// Replay the given configuration's selections (for log-probability and
    /// gradient recomputation).
    Forced(&'a Configuration),
}

/// Whether tiles come from the learned head or a fixed fill order. A fixed
/// order contributes nothing to the log-probability and overrides tile picks
/// from any driver.
#[derive(Clone, Copy)]
pub enum TileSelection<'a> {
    Learned,
    Fixed(&'a [usize]),
}

/// One decoded page with its log-probability node still on the tape.
pub struct Rollout {
    pub configuration: Configuration,
    pub log_prob: NodeId,
    pub log_prob_value: f64,
    pub step_item_probs: Vec<Vec<f64>>,
    pub step_tile_probs: Vec<Vec<f64>>,
    /// Tape nodes of each step's item distribution, for entropy terms.
    pub step_item_prob_nodes: Vec<NodeId>,
    /// Tape nodes of each step's tile distribution; empty under a fixed
    /// layout, whose one-hot tiles carry no entropy.
    pub step_tile_prob_nodes: Vec<NodeId>,
}

/// Rollout result detached from any tape.
#[derive(Debug, Clone)]
pub struct RolloutValue {
    pub configuration: Configuration,
    pub log_prob: f64,
    pub step_item_probs: Vec<Vec<f64>>,
    pub step_tile_probs: Vec<Vec<f64>>,
}

pub struct TilePolicy {
    pub config: PolicyConfig,
    pub params: ParamSet,
}

struct HeadNodes {
    w1: NodeId,
    w2: NodeId,
    v: NodeId,
}

fn head_register(set: &mut ParamSet, prefix: &str, cfg: &PolicyConfig, rng: &mut SeededRng) {
    let r_w1 = 1.0 / (cfg.decoder_hidden as f64).sqrt();
    let r_w2 = 1.0 / (cfg.d_k as f64).sqrt();
    let r_v = 1.0 / (cfg.head_dim as f64).sqrt();
    set.insert(
        &format!("{prefix}.w1"),
        rng.uniform_tensor(vec![cfg.decoder_hidden, cfg.head_dim], -r_w1, r_w1),
    )
    .unwrap();
    set.insert(
        &format!("{prefix}.w2"),
        rng.uniform_tensor(vec![cfg.d_k, cfg.head_dim], -r_w2, r_w2),
    )
    .unwrap();
    set.insert(
        &format!("{prefix}.v"),
        rng.uniform_tensor(vec![cfg.head_dim], -r_v, r_v),
    )
    .unwrap();
}

fn head_bind(bound: &Bound, prefix: &str) -> HeadNodes {
    HeadNodes {
        w1: bound.id(&format!("{prefix}.w1")),
        w2: bound.id(&format!("{prefix}.w2")),
        v: bound.id(&format!("{prefix}.v")),
    }
}

enum CellNodes {
    Lstm(LstmNodes),
    Vanilla(RnnNodes),
}

enum CellState {
    Lstm { h: NodeId, c: NodeId },
    Vanilla { h: NodeId },
}

struct PolicyNodes {
    item_enc: AttentionNodes,
    tile_enc: AttentionNodes,
    cell: CellNodes,
    item_head: HeadNodes,
    tile_head: HeadNodes,
    x_start: NodeId,
    z_start: NodeId,
}

impl TilePolicy {
    pub fn new(config: PolicyConfig, rng: &mut SeededRng) -> Self {
        let mut params = ParamSet::new();
        attention_register(&mut params, "item_enc", &config.item_attention(), rng);
        attention_register(&mut params, "tile_enc", &config.tile_attention(), rng);
        match config.cell {
            CellKind::Lstm => lstm_register(&mut params, "decoder", &config.decoder(), rng),
            CellKind::Vanilla => rnn_register(&mut params, "decoder", &config.decoder(), rng),
        }
        head_register(&mut params, "item_head", &config, rng);
        head_register(&mut params, "tile_head", &config, rng);
        let rx = 1.0 / (config.input_width as f64).sqrt();
        params
            .insert("start.x", rng.uniform_tensor(vec![config.input_width], -rx, rx))
            .unwrap();
        params
            .insert("start.z", rng.uniform_tensor(vec![2], -0.5, 0.5))
            .unwrap();
        Self { config, params }
    }

    fn bind_nodes(&self, bound: &Bound) -> PolicyNodes {
        PolicyNodes {
            item_enc: attention_bind(bound, "item_enc", &self.config.item_attention()),
            tile_enc: attention_bind(bound, "tile_enc", &self.config.tile_attention()),
            cell: match self.config.cell {
                CellKind::Lstm => CellNodes::Lstm(lstm_bind(bound, "decoder", &self.config.decoder())),
                CellKind::Vanilla => CellNodes::Vanilla(rnn_bind(bound, "decoder")),
            },
            item_head: head_bind(bound, "item_head"),
            tile_head: head_bind(bound, "tile_head"),
            x_start: bound.id("start.x"),
            z_start: bound.id("start.z"),
        }
    }

    fn check_page(&self, page: &PageInstance) -> Result<(), PolicyError> {
        page.validate()?;
        if page.input_width() != self.config.input_width {
            return Err(PolicyError::InputWidth {
                expected: self.config.input_width,
                actual: page.input_width(),
            });
        }
        Ok(())
    }

    /// Hidden row per item, [n, d_k].
    pub fn encode_items(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        page: &PageInstance,
    ) -> Result<NodeId, PolicyError> {
        self.check_page(page)?;
        let x = tape.leaf(page.inputs_matrix());
        let nodes = attention_bind(bound, "item_enc", &self.config.item_attention());
        Ok(self_attention_block(tape, x, &nodes))
    }

    /// Hidden row per tile, [k, d_k].
    pub fn encode_tiles(&self, tape: &mut Tape, bound: &Bound, page: &PageInstance) -> NodeId {
        let z = tape.leaf(page.grid.coords_matrix());
        let nodes = attention_bind(bound, "tile_enc", &self.config.tile_attention());
        self_attention_block(tape, z, &nodes)
    }

    /// Decode a full configuration, leaving the log-probability on the tape.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        page: &PageInstance,
        mut driver: Driver,
        tile_sel: TileSelection,
    ) -> Result<Rollout, PolicyError> {
        self.check_page(page)?;
        let n = page.n();
        let k = page.k();
        if let Driver::Forced(c) = &driver {
            // Revalidate against this page's dimensions.
            Configuration::new(c.items().to_vec(), c.tiles().to_vec(), n, k)?;
        }
        if let TileSelection::Fixed(layout) = tile_sel {
            if layout.len() != k {
                return Err(PolicyError::FixedLayout(format!(
                    "has {} entries, grid needs {k}",
                    layout.len()
                )));
            }
            let mut seen = vec![false; k];
            for &t in layout {
                if t >= k || seen[t] {
                    return Err(PolicyError::FixedLayout(format!(
                        "is not a permutation of 0..{k}"
                    )));
                }
                seen[t] = true;
            }
        }

        let nodes = self.bind_nodes(bound);
        let x_leaf = tape.leaf(page.inputs_matrix());
        let z_leaf = tape.leaf(page.grid.coords_matrix());
        let h_items = self_attention_block(tape, x_leaf, &nodes.item_enc);
        let h_tiles = self_attention_block(tape, z_leaf, &nodes.tile_enc);
        // W_2 H is selection-independent, so both heads' encoder projections
        // are lifted out of the step loop.
        let hw2_items = tape.matmul(h_items, nodes.item_head.w2);
        let hw2_tiles = tape.matmul(h_tiles, nodes.tile_head.w2);

        let mut state = match nodes.cell {
            CellNodes::Lstm(_) => CellState::Lstm {
                h: tape.leaf(Tensor::zeros(vec![self.config.decoder_hidden])),
                c: tape.leaf(Tensor::zeros(vec![self.config.decoder_hidden])),
            },
            CellNodes::Vanilla(_) => CellState::Vanilla {
                h: tape.leaf(Tensor::zeros(vec![self.config.decoder_hidden])),
            },
        };
        let mut x_prev = nodes.x_start;
        let mut z_prev = nodes.z_start;
        let mut item_mask = vec![false; n];
        let mut tile_mask = vec![false; k];
        let mut items = Vec::with_capacity(k);
        let mut tiles = Vec::with_capacity(k);
        let mut step_item_probs = Vec::with_capacity(k);
        let mut step_tile_probs = Vec::with_capacity(k);
        let mut step_item_prob_nodes = Vec::with_capacity(k);
        let mut step_tile_prob_nodes = Vec::with_capacity(k);
        let mut log_terms: Vec<NodeId> = Vec::with_capacity(2 * k);

        for t in 0..k {
            let input = tape.concat_vec(x_prev, z_prev);
            let h = match (&mut state, &nodes.cell) {
                (CellState::Lstm { h, c }, CellNodes::Lstm(cell)) => {
                    let (h2, c2) = lstm_cell(tape, *h, *c, input, cell);
                    *h = h2;
                    *c = c2;
                    h2
                }
                (CellState::Vanilla { h }, CellNodes::Vanilla(cell)) => {
                    let h2 = rnn_cell(tape, *h, input, cell);
                    *h = h2;
                    h2
                }
                _ => unreachable!("cell state matches cell kind"),
            };

            let p_item_node = head_probs(tape, h, hw2_items, &nodes.item_head, &item_mask)
                .map_err(|source| PolicyError::Masked { step: t, source })?;
            let p_item = tape.value(p_item_node).values().to_vec();
            let item = match &mut driver {
                Driver::Greedy => argmax_unmasked(&p_item, &item_mask),
                Driver::Sample(rng) => rng.categorical(&p_item)?,
                Driver::Forced(c) => c.item_at_step(t),
            };
            let picked = tape.pick(p_item_node, item);
            log_terms.push(tape.ln(picked));
            item_mask[item] = true;
            items.push(item);
            step_item_probs.push(p_item);
            step_item_prob_nodes.push(p_item_node);

            let tile = match tile_sel {
                TileSelection::Learned => {
                    let p_tile_node = head_probs(tape, h, hw2_tiles, &nodes.tile_head, &tile_mask)
                        .map_err(|source| PolicyError::Masked { step: t, source })?;
                    let p_tile = tape.value(p_tile_node).values().to_vec();
                    let tile = match &mut driver {
                        Driver::Greedy => argmax_unmasked(&p_tile, &tile_mask),
                        Driver::Sample(rng) => rng.categorical(&p_tile)?,
                        Driver::Forced(c) => c.tile_at_step(t),
                    };
                    let picked_t = tape.pick(p_tile_node, tile);
                    log_terms.push(tape.ln(picked_t));
                    step_tile_probs.push(p_tile);
                    step_tile_prob_nodes.push(p_tile_node);
                    tile
                }
                TileSelection::Fixed(layout) => {
                    let tile = layout[t];
                    let mut one_hot = vec![0.0; k];
                    one_hot[tile] = 1.0;
                    step_tile_probs.push(one_hot);
                    tile
                }
            };
            tile_mask[tile] = true;
            tiles.push(tile);

            x_prev = tape.row(x_leaf, item);
            z_prev = tape.row(z_leaf, tile);
        }

        let mut log_prob = log_terms[0];
        for &term in &log_terms[1..] {
            log_prob = tape.add(log_prob, term);
        }
        let configuration = Configuration::new(items, tiles, n, k)?;
        Ok(Rollout {
            configuration,
            log_prob_value: tape.value(log_prob).item(),
            log_prob,
            step_item_probs,
            step_tile_probs,
            step_item_prob_nodes,
            step_tile_prob_nodes,
        })
    }

    /// Log-probability of an existing configuration, differentiable in
    /// params. Replays the identical arithmetic path as `rollout`, so values
    /// agree bitwise with the rollout that produced the configuration.
    pub fn log_prob(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        page: &PageInstance,
        configuration: &Configuration,
    ) -> Result<NodeId, PolicyError> {
        let rollout = self.rollout(
            tape,
            bound,
            page,
            Driver::Forced(configuration),
            TileSelection::Learned,
        )?;
        Ok(rollout.log_prob)
    }

    /// Rollout on a private tape, returning only values.
    pub fn rollout_detached(
        &self,
        page: &PageInstance,
        driver: Driver,
        tile_sel: TileSelection,
    ) -> Result<RolloutValue, PolicyError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let r = self.rollout(&mut tape, &bound, page, driver, tile_sel)?;
        Ok(RolloutValue {
            configuration: r.configuration,
            log_prob: r.log_prob_value,
            step_item_probs: r.step_item_probs,
            step_tile_probs: r.step_tile_probs,
        })
    }

    /// Mean greedy placement step per tile over a page sample, min-max
    /// normalized to [0,1]; 0 marks the earliest-filled tiles. A degenerate
    /// spread (all tiles equal, or a single tile) normalizes to all zeros.
    pub fn tile_priority_heatmap(&self, pages: &[PageInstance]) -> Result<Vec<f64>, PolicyError> {
        let Some(first) = pages.first() else {
            return Err(PolicyError::EmptyPageSample);
        };
        let k = first.k();
        if pages.iter().any(|p| p.grid != first.grid) {
            return Err(PolicyError::GridMismatch);
        }
        let mut sums = vec![0.0; k];
        for page in pages {
            let rv = self.rollout_detached(page, Driver::Greedy, TileSelection::Learned)?;
            for t in 0..k {
                sums[rv.configuration.tile_at_step(t)] += t as f64;
            }
        }
        for s in sums.iter_mut() {
            *s /= pages.len() as f64;
        }
        let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max - min < 1e-12 {
            return Ok(vec![0.0; k]);
        }
        Ok(sums.iter().map(|&s| (s - min) / (max - min)).collect())
    }
}

fn head_probs(
    tape: &mut Tape,
    h: NodeId,
    hw2: NodeId,
    head: &HeadNodes,
    mask: &[bool],
) -> Result<NodeId, NnError> {
    let w1h = tape.vecmat(h, head.w1);
    let pre = tape.add_row_broadcast(hw2, w1h);
    let th = tape.tanh(pre);
    let u = tape.matvec(th, head.v);
    nn::softmax_masked(tape, u, mask)
}

fn argmax_unmasked(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_p = f64::NEG_INFINITY;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m && p > best_p {
            best = i;
            best_p = p;
        }
    }
    debug_assert_ne!(best, usize::MAX, "argmax over empty support");
    best
}
