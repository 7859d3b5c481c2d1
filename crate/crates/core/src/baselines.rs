//! Comparison systems: a pointwise utility ranker placed by fixed layouts,
//! and a pointer-style selector that learns item order but places it along a
//! fixed layout.

use crate::adam::{AdamConfig, AdamState};
use crate::env::{scan_order, EnvError, Environment, ScanKind};
use crate::nn::{mlp_bind, mlp_forward, mlp_forward_raw, mlp_register, Activation, MlpSpec};
use crate::page::{Configuration, ConfigurationError, Grid, PageInstance};
use crate::params::{ParamError, ParamSet};
use crate::policy::{Driver, PolicyConfig, PolicyError, Rollout, RolloutValue, TilePolicy, TileSelection};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const RANKER_PREFIX: &str = "ranker";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BaselineError {
    #[error("click dataset is empty")]
    EmptyDataset,
    #[error("dataset row {index} has width {actual}, expected {expected}")]
    RowWidth {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("dataset label {0} is not a finite probability")]
    BadLabel(f64),
    #[error("placement needs {k} candidates, got {n}")]
    TooFewCandidates { n: usize, k: usize },
    #[error("candidate {0} has a non-finite score")]
    NonFiniteScore(usize),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
}

/// Fixed tile visit orders available to the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Row,
    Col,
    Z,
}

impl LayoutKind {
    pub fn scan(self) -> ScanKind {
        match self {
            LayoutKind::Row => ScanKind::Row,
            LayoutKind::Col => ScanKind::Col,
            LayoutKind::Z => ScanKind::Z,
        }
    }

    /// Tile permutation on `grid`; the built-in scans are total.
    pub fn order(self, grid: Grid) -> Vec<usize> {
        scan_order(&self.scan(), grid).expect("built-in scans accept any grid")
    }
}

/// Pointwise training rows: input [user; item], binary click label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClickDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl ClickDataset {
    pub fn push(&mut self, user: &[f64], item: &[f64], label: f64) {
        let mut input = Vec::with_capacity(user.len() + item.len());
        input.extend_from_slice(user);
        input.extend_from_slice(item);
        self.inputs.push(input);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<usize, BaselineError> {
        if self.is_empty() {
            return Err(BaselineError::EmptyDataset);
        }
        let width = self.inputs[0].len();
        for (index, row) in self.inputs.iter().enumerate() {
            if row.len() != width {
                return Err(BaselineError::RowWidth {
                    index,
                    expected: width,
                    actual: row.len(),
                });
            }
        }
        for &label in &self.labels {
            if !label.is_finite() || !(0.0..=1.0).contains(&label) {
                return Err(BaselineError::BadLabel(label));
            }
        }
        Ok(width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RankerTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs: 20,
        }
    }
}

/// Pointwise click scorer: a 128/64 relu stack with a single logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRanker {
    input_width: usize,
    spec: MlpSpec,
    pub params: ParamSet,
}

impl UtilityRanker {
    pub fn new(input_width: usize, rng: &mut SeededRng) -> Self {
        let spec = MlpSpec::new(
            vec![128, 64, 1],
            vec![Activation::Relu, Activation::Relu, Activation::Identity],
        )
        .expect("ranker architecture is fixed");
        let mut params = ParamSet::new();
        mlp_register(&mut params, RANKER_PREFIX, input_width, &spec, rng);
        Self {
            input_width,
            spec,
            params,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    /// Raw utility logit for one user-item pair; ranking only compares, so
    /// the sigmoid is never needed at inference.
    pub fn score(&self, user: &[f64], item: &[f64]) -> f64 {
        let mut input = Vec::with_capacity(user.len() + item.len());
        input.extend_from_slice(user);
        input.extend_from_slice(item);
        mlp_forward_raw(&input, &self.params, RANKER_PREFIX, &self.spec)[0]
    }

    pub fn page_scores(&self, page: &PageInstance) -> Vec<f64> {
        page.items
            .iter()
            .map(|item| self.score(&page.user, item))
            .collect()
    }

    /// Score the page and place top-k items along `layout`.
    pub fn place(
        &self,
        page: &PageInstance,
        layout: LayoutKind,
    ) -> Result<Configuration, BaselineError> {
        fixed_layout_place(&self.page_scores(page), layout, page.grid)
    }
}

/// Minimize binary cross-entropy of the ranker's logits over shuffled
/// minibatches. The rng drives shuffle order only; pass a derived stream.
pub fn train_utility_ranker(
    ranker: &mut UtilityRanker,
    dataset: &ClickDataset,
    config: &RankerTrainConfig,
    rng: &mut SeededRng,
) -> Result<(), BaselineError> {
    let width = dataset.validate()?;
    if width != ranker.input_width {
        return Err(BaselineError::RowWidth {
            index: 0,
            expected: ranker.input_width,
            actual: width,
        });
    }
    let batch = config.batch_size.max(1);
    let mut adam = AdamState::new(config.adam.clone(), &ranker.params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = ranker.params.bind(&mut tape);
            let nodes = mlp_bind(&bound, RANKER_PREFIX, &ranker.spec);
            let mut values = Vec::with_capacity(chunk.len() * width);
            let mut targets = Vec::with_capacity(chunk.len());
            for &row in chunk {
                values.extend_from_slice(&dataset.inputs[row]);
                targets.push(dataset.labels[row]);
            }
            let x = tape.leaf(Tensor::matrix(chunk.len(), width, values).unwrap());
            let logits = mlp_forward(&mut tape, x, &nodes);
            let flat = tape.reshape(logits, vec![chunk.len()]);
            let per_row = tape.bce_with_logits(flat, &targets);
            let loss = tape.mean(per_row);
            let grads = bound.gradients(&tape.backward(loss));
            adam.apply(&mut ranker.params, &grads)?;
        }
    }
    Ok(())
}

/// Top-k by score (ties to the lowest index), best item onto the first tile
/// the layout visits.
pub fn fixed_layout_place(
    scores: &[f64],
    layout: LayoutKind,
    grid: Grid,
) -> Result<Configuration, BaselineError> {
    let n = scores.len();
    let k = grid.k();
    if n < k {
        return Err(BaselineError::TooFewCandidates { n, k });
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(BaselineError::NonFiniteScore(bad));
    }
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    ranked.truncate(k);
    let tiles = layout.order(grid);
    Ok(Configuration::new(ranked, tiles, n, k)?)
}

/// Log one stochastic episode per page per pass under uniformly random
/// placements. Rows pair the user with each placed item in view order and
/// carry that episode's click label; this is the ranker's training food.
pub fn collect_click_dataset(
    env: &Environment,
    pages: &[PageInstance],
    passes: usize,
    rng: &mut SeededRng,
) -> Result<ClickDataset, BaselineError> {
    let mut data = ClickDataset::default();
    for _ in 0..passes {
        for page in pages {
            let k = page.k();
            let items = rng.sample_indices(page.n(), k);
            let mut tiles: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut tiles);
            let configuration = Configuration::new(items, tiles, page.n(), k)?;
            let record = env.simulate_clicks(page, &configuration, rng)?;
            let order = scan_order(&env.spec().scan, page.grid)?;
            let by_tile = configuration.item_by_tile();
            for (pos, &tile) in order.iter().enumerate() {
                data.push(&page.user, &page.items[by_tile[tile]], record.labels[pos]);
            }
        }
    }
    Ok(data)
}

/// Sequential item selector sharing the grid policy machinery, with the tile
/// head replaced by a fixed layout. Decoder hidden size 128.
pub struct PointerBaseline {
    pub policy: TilePolicy,
    pub layout: LayoutKind,
}

impl PointerBaseline {
    pub fn policy_config(input_width: usize) -> PolicyConfig {
        let mut config = PolicyConfig::with_input_width(input_width);
        config.decoder_hidden = 128;
        config
    }

    pub fn new(input_width: usize, layout: LayoutKind, rng: &mut SeededRng) -> Self {
        Self {
            policy: TilePolicy::new(Self::policy_config(input_width), rng),
            layout,
        }
    }

    /// Rollout whose log-probability sums only item-head terms; each step's
    /// tile is the layout's next tile with probability 1.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        bound: &crate::params::Bound,
        page: &PageInstance,
        driver: Driver,
    ) -> Result<Rollout, PolicyError> {
        let order = self.layout.order(page.grid);
        self.policy
            .rollout(tape, bound, page, driver, TileSelection::Fixed(&order))
    }

    pub fn rollout_detached(
        &self,
        page: &PageInstance,
        driver: Driver,
    ) -> Result<RolloutValue, PolicyError> {
        let order = self.layout.order(page.grid);
        self.policy
            .rollout_detached(page, driver, TileSelection::Fixed(&order))
    }
}
