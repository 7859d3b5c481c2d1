//! Simulated cascade-click environments over placed pages.
//!
//! A user scans tiles in a fixed order, observes position i with probability
//! 1/i^eta, and clicks an observed item with a ground-truth preference
//! probability. Optional dynamics couple the click at one position to items
//! clicked earlier via raw-feature similarity.

use crate::metrics::ndcg;
use crate::nn::{mlp_forward_raw, mlp_register_uniform, Activation, MlpSpec};
use crate::page::{Configuration, ConfigurationError, Grid, PageError, PageInstance};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

/// Largest page size the exact expected-reward enumeration accepts.
pub const ORACLE_MAX_TILES: usize = 12;

const PREFERENCE_PREFIX: &str = "pref";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("scan permutation must be a bijection on 0..{k}: {detail}")]
    BadPermutation { k: usize, detail: String },
    #[error("view position {0} must be at least 1")]
    BadViewIndex(usize),
    #[error("observation decay {0} must be finite and >= 0")]
    BadDecay(f64),
    #[error("similarity quantile {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("preference scale {scale} and offset {offset} must be finite with scale >= 0")]
    BadPreferenceShape { scale: f64, offset: f64 },
    #[error("similarity threshold needs at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("expected-click mode requires dynamics \"none\", got {0:?}")]
    ExpectedWithDynamics(Dynamics),
    #[error("exact expected reward supports k <= {ORACLE_MAX_TILES}, got {0}")]
    OracleTooLarge(usize),
    #[error("page item width {actual} does not match environment item width {expected}")]
    ItemWidth { expected: usize, actual: usize },
    #[error("page user width {actual} does not match environment user width {expected}")]
    UserWidth { expected: usize, actual: usize },
    #[error("configuration fills {actual} tiles but the page grid has {expected}")]
    GridMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Page(#[from] PageError),
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
}

/// Order in which the simulated user visits tiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanKind {
    /// Row-major: left to right, top to bottom.
    Row,
    /// Column-major: top to bottom, left to right.
    Col,
    /// Center-outward by squared distance to the grid center, ties row-major.
    Z,
    /// Explicit tile permutation: entry i is the tile viewed i-th.
    Real { order: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// Positions are independent given the page.
    None,
    /// An item similar to one already clicked is never clicked.
    Diverse,
    /// An item similar to one already clicked is clicked whenever observed,
    /// regardless of preference.
    Similar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Total number of clicks on the page.
    Clicks,
    /// NDCG of the click labels in view order.
    Ndcg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickMode {
    /// Labels are Bernoulli draws.
    Stochastic,
    /// Labels are per-position click probabilities; only valid with
    /// dynamics "none".
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub scan: ScanKind,
    /// Observation decay exponent: position i is observed with prob 1/i^eta.
    pub eta: f64,
    pub dynamics: Dynamics,
    /// Quantile of pairwise item distances used as the similarity threshold.
    pub similarity_quantile: f64,
    /// Seed for the ground-truth preference network.
    pub preference_seed: u64,
    /// Multiplier on the preference logit before the sigmoid; values above
    /// 1 spread click probabilities toward 0 and 1.
    #[serde(default = "default_preference_scale")]
    pub preference_scale: f64,
    /// Additive shift on the scaled logit; large values saturate every
    /// click probability at exactly 1.0 (or 0.0 when very negative).
    #[serde(default)]
    pub preference_offset: f64,
    pub reward: RewardKind,
    pub mode: ClickMode,
}

fn default_preference_scale() -> f64 {
    1.0
}

impl EnvironmentSpec {
    /// Row scan, eta 0.05, no dynamics, quantile 0.005, click-count reward,
    /// stochastic labels.
    pub fn row_default(preference_seed: u64) -> Self {
        Self {
            scan: ScanKind::Row,
            eta: 0.05,
            dynamics: Dynamics::None,
            similarity_quantile: 0.005,
            preference_seed,
            preference_scale: 1.0,
            preference_offset: 0.0,
            reward: RewardKind::Clicks,
            mode: ClickMode::Stochastic,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(EnvError::BadDecay(self.eta));
        }
        if !self.similarity_quantile.is_finite()
            || self.similarity_quantile <= 0.0
            || self.similarity_quantile >= 1.0
        {
            return Err(EnvError::BadQuantile(self.similarity_quantile));
        }
        if !self.preference_scale.is_finite() || self.preference_scale < 0.0 {
            return Err(EnvError::BadPreferenceShape {
                scale: self.preference_scale,
                offset: self.preference_offset,
            });
        }
        if !self.preference_offset.is_finite() {
            return Err(EnvError::BadPreferenceShape {
                scale: self.preference_scale,
                offset: self.preference_offset,
            });
        }
        if self.mode == ClickMode::Expected && self.dynamics != Dynamics::None {
            return Err(EnvError::ExpectedWithDynamics(self.dynamics));
        }
        Ok(())
    }
}

/// Tile indices in view order: entry i is the tile viewed (i+1)-th.
pub fn scan_order(kind: &ScanKind, grid: Grid) -> Result<Vec<usize>, EnvError> {
    let k = grid.k();
    match kind {
        ScanKind::Row => Ok((0..k).collect()),
        ScanKind::Col => {
            let mut order = Vec::with_capacity(k);
            for col in 0..grid.cols {
                for row in 0..grid.rows {
                    order.push(grid.tile_index(row, col));
                }
            }
            Ok(order)
        }
        ScanKind::Z => {
            // Integer key 4*d^2 to the center ((rows-1)/2, (cols-1)/2);
            // stable sort keeps ties row-major.
            let mut order: Vec<usize> = (0..k).collect();
            let key = |tile: usize| {
                let (row, col) = grid.row_col(tile);
                let dr = 2 * row as i64 - (grid.rows as i64 - 1);
                let dc = 2 * col as i64 - (grid.cols as i64 - 1);
                dr * dr + dc * dc
            };
            order.sort_by_key(|&tile| key(tile));
            Ok(order)
        }
        ScanKind::Real { order } => {
            if order.len() != k {
                return Err(EnvError::BadPermutation {
                    k,
                    detail: format!("length {}", order.len()),
                });
            }
            let mut seen = vec![false; k];
            for &tile in order {
                if tile >= k {
                    return Err(EnvError::BadPermutation {
                        k,
                        detail: format!("tile {tile} out of range"),
                    });
                }
                if seen[tile] {
                    return Err(EnvError::BadPermutation {
                        k,
                        detail: format!("tile {tile} repeated"),
                    });
                }
                seen[tile] = true;
            }
            Ok(order.clone())
        }
    }
}

/// Probability that the 1-based view position `view_index` is observed.
pub fn observation_prob(view_index: usize, eta: f64) -> Result<f64, EnvError> {
    if view_index == 0 {
        return Err(EnvError::BadViewIndex(view_index));
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(EnvError::BadDecay(eta));
    }
    Ok((view_index as f64).powf(-eta))
}

/// Linear-interpolation `quantile` of the pairwise Euclidean distances
/// between the given raw item feature vectors.
pub fn similarity_threshold(items: &[&[f64]], quantile: f64) -> Result<f64, EnvError> {
    if items.len() < 2 {
        return Err(EnvError::TooFewItems(items.len()));
    }
    if !quantile.is_finite() || quantile <= 0.0 || quantile >= 1.0 {
        return Err(EnvError::BadQuantile(quantile));
    }
    let mut distances = Vec::with_capacity(items.len() * (items.len() - 1) / 2);
    for (i, a) in items.iter().enumerate() {
        for b in items.iter().skip(i + 1) {
            distances.push(euclidean(a, b));
        }
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Linear interpolation between order statistics at fractional rank
    // q * (m - 1).
    let rank = quantile * (distances.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(distances[lo] + frac * (distances[hi] - distances[lo]))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Frozen ground-truth click preference network: a seeded MLP over
/// [user; item] with all weights drawn uniform(-0.5, 0.5).
#[derive(Debug, Clone)]
pub struct PreferenceModel {
    spec: MlpSpec,
    /// Same layers with the final sigmoid left off, for logit-space shaping.
    logit_spec: MlpSpec,
    params: ParamSet,
    user_width: usize,
    item_width: usize,
}

impl PreferenceModel {
    pub fn new(seed: u64, user_width: usize, item_width: usize) -> Self {
        let spec = MlpSpec::new(
            vec![32, 16, 8, 1],
            vec![
                Activation::Relu,
                Activation::Relu,
                Activation::Tanh,
                Activation::Sigmoid,
            ],
        )
        .expect("preference architecture is fixed");
        let logit_spec = MlpSpec::new(
            vec![32, 16, 8, 1],
            vec![
                Activation::Relu,
                Activation::Relu,
                Activation::Tanh,
                Activation::Identity,
            ],
        )
        .expect("preference architecture is fixed");
        let mut params = ParamSet::new();
        let mut rng = SeededRng::derive(seed, "preference", &[]);
        mlp_register_uniform(
            &mut params,
            PREFERENCE_PREFIX,
            user_width + item_width,
            &spec,
            -0.5,
            0.5,
            &mut rng,
        );
        Self {
            spec,
            logit_spec,
            params,
            user_width,
            item_width,
        }
    }

    pub fn user_width(&self) -> usize {
        self.user_width
    }

    pub fn item_width(&self) -> usize {
        self.item_width
    }

    /// Direct access to the network weights, for calibration and for test
    /// environments with pinned click probabilities.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Click probability for one user-item pair.
    pub fn click_probability(&self, user: &[f64], item: &[f64]) -> f64 {
        debug_assert_eq!(user.len(), self.user_width);
        debug_assert_eq!(item.len(), self.item_width);
        let mut input = Vec::with_capacity(user.len() + item.len());
        input.extend_from_slice(user);
        input.extend_from_slice(item);
        mlp_forward_raw(&input, &self.params, PREFERENCE_PREFIX, &self.spec)[0]
    }

    /// The pre-sigmoid preference score.
    pub fn logit(&self, user: &[f64], item: &[f64]) -> f64 {
        debug_assert_eq!(user.len(), self.user_width);
        debug_assert_eq!(item.len(), self.item_width);
        let mut input = Vec::with_capacity(user.len() + item.len());
        input.extend_from_slice(user);
        input.extend_from_slice(item);
        mlp_forward_raw(&input, &self.params, PREFERENCE_PREFIX, &self.logit_spec)[0]
    }
}

/// One simulated page view.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickRecord {
    /// Click labels in view order: 0/1 draws, or probabilities in expected
    /// mode.
    pub labels: Vec<f64>,
    /// Observation probability of each view position.
    pub observation: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvironmentSpec,
    preference: PreferenceModel,
}

impl Environment {
    pub fn new(
        spec: EnvironmentSpec,
        user_width: usize,
        item_width: usize,
    ) -> Result<Self, EnvError> {
        spec.validate()?;
        let preference = PreferenceModel::new(spec.preference_seed, user_width, item_width);
        Ok(Self { spec, preference })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn preference(&self) -> &PreferenceModel {
        &self.preference
    }

    pub fn preference_mut(&mut self) -> &mut PreferenceModel {
        &mut self.preference
    }

    fn check_widths(&self, page: &PageInstance) -> Result<(), EnvError> {
        if page.item_width() != self.preference.item_width {
            return Err(EnvError::ItemWidth {
                expected: self.preference.item_width,
                actual: page.item_width(),
            });
        }
        if page.user.len() != self.preference.user_width {
            return Err(EnvError::UserWidth {
                expected: self.preference.user_width,
                actual: page.user.len(),
            });
        }
        Ok(())
    }

    /// Per-candidate click probabilities for one page.
    /// Click probability of one candidate with the spec's logit shaping
    /// applied: sigmoid(scale * logit + offset).
    pub fn click_probability(&self, user: &[f64], item: &[f64]) -> f64 {
        crate::tape::sigmoid(
            self.spec.preference_scale * self.preference.logit(user, item)
                + self.spec.preference_offset,
        )
    }

    pub fn click_probabilities(&self, page: &PageInstance) -> Result<Vec<f64>, EnvError> {
        page.validate()?;
        self.check_widths(page)?;
        Ok(page
            .items
            .iter()
            .map(|item| self.click_probability(&page.user, item))
            .collect())
    }

    /// Precomputed per-position state shared by simulation and enumeration.
    fn episode(
        &self,
        page: &PageInstance,
        configuration: &Configuration,
    ) -> Result<Episode, EnvError> {
        page.validate()?;
        self.check_widths(page)?;
        let grid = page.grid;
        let order = scan_order(&self.spec.scan, grid)?;
        let by_tile = configuration.item_by_tile();
        if by_tile.len() != grid.k() {
            return Err(EnvError::GridMismatch {
                expected: grid.k(),
                actual: by_tile.len(),
            });
        }
        let viewed_items: Vec<usize> = order.iter().map(|&tile| by_tile[tile]).collect();
        let click_prob: Vec<f64> = viewed_items
            .iter()
            .map(|&item| self.click_probability(&page.user, &page.items[item]))
            .collect();
        let observation: Vec<f64> = (1..=order.len())
            .map(|i| observation_prob(i, self.spec.eta))
            .collect::<Result<_, _>>()?;
        // Similarity over the k placed items' raw features; irrelevant when
        // dynamics are off or a single tile leaves no pairs.
        let similar = if self.spec.dynamics != Dynamics::None && viewed_items.len() >= 2 {
            let feats: Vec<&[f64]> = viewed_items
                .iter()
                .map(|&item| page.items[item].as_slice())
                .collect();
            let threshold = similarity_threshold(&feats, self.spec.similarity_quantile)?;
            let k = feats.len();
            let mut flags = vec![vec![false; k]; k];
            for a in 0..k {
                for b in 0..k {
                    if a != b {
                        flags[a][b] = euclidean(feats[a], feats[b]) <= threshold;
                    }
                }
            }
            Some(flags)
        } else {
            None
        };
        Ok(Episode {
            click_prob,
            observation,
            similar,
        })
    }

    fn reward_of(&self, labels: &[f64]) -> f64 {
        match self.spec.reward {
            RewardKind::Clicks => labels.iter().sum(),
            RewardKind::Ndcg => ndcg(labels),
        }
    }

    /// Simulate one page view. In expected mode (dynamics "none" only) the
    /// labels are click probabilities and the rng is unused.
    pub fn simulate_clicks(
        &self,
        page: &PageInstance,
        configuration: &Configuration,
        rng: &mut SeededRng,
    ) -> Result<ClickRecord, EnvError> {
        self.spec.validate()?;
        let episode = self.episode(page, configuration)?;
        let k = episode.click_prob.len();
        let mut labels = Vec::with_capacity(k);
        // Positions (view order) of clicks so far; drives the dynamics.
        let mut clicked: Vec<usize> = Vec::new();
        for pos in 0..k {
            let base = episode.click_prob[pos] * episode.observation[pos];
            let label = match self.spec.mode {
                ClickMode::Expected => base,
                ClickMode::Stochastic => {
                    let similar_to_clicked = clicked
                        .iter()
                        .any(|&earlier| episode.similar_at(pos, earlier));
                    let p = match self.spec.dynamics {
                        Dynamics::None => base,
                        Dynamics::Diverse => {
                            if similar_to_clicked {
                                0.0
                            } else {
                                base
                            }
                        }
                        Dynamics::Similar => {
                            if similar_to_clicked {
                                episode.observation[pos]
                            } else {
                                base
                            }
                        }
                    };
                    if rng.bernoulli(p) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            if label == 1.0 && self.spec.mode == ClickMode::Stochastic {
                clicked.push(pos);
            }
            labels.push(label);
        }
        let reward = self.reward_of(&labels);
        Ok(ClickRecord {
            labels,
            observation: episode.observation,
            reward,
        })
    }

    /// Exact expected reward by enumerating all 2^k click outcomes under the
    /// configured dynamics. Refuses pages beyond [`ORACLE_MAX_TILES`].
    pub fn expected_reward_oracle(
        &self,
        page: &PageInstance,
        configuration: &Configuration,
    ) -> Result<f64, EnvError> {
        self.spec.validate()?;
        if page.k() > ORACLE_MAX_TILES {
            return Err(EnvError::OracleTooLarge(page.k()));
        }
        let episode = self.episode(page, configuration)?;
        let k = episode.click_prob.len();
        let mut labels = vec![0.0; k];
        let mut total = 0.0;
        self.enumerate(&episode, 0, 1.0, &mut labels, &mut total);
        Ok(total)
    }

    fn enumerate(
        &self,
        episode: &Episode,
        pos: usize,
        weight: f64,
        labels: &mut Vec<f64>,
        total: &mut f64,
    ) {
        if weight == 0.0 {
            return;
        }
        if pos == labels.len() {
            *total += weight * self.reward_of(labels);
            return;
        }
        let similar_to_clicked = (0..pos)
            .any(|earlier| labels[earlier] == 1.0 && episode.similar_at(pos, earlier));
        let base = episode.click_prob[pos] * episode.observation[pos];
        let p = match self.spec.dynamics {
            Dynamics::None => base,
            Dynamics::Diverse => {
                if similar_to_clicked {
                    0.0
                } else {
                    base
                }
            }
            Dynamics::Similar => {
                if similar_to_clicked {
                    episode.observation[pos]
                } else {
                    base
                }
            }
        };
        labels[pos] = 1.0;
        self.enumerate(episode, pos + 1, weight * p, labels, total);
        labels[pos] = 0.0;
        self.enumerate(episode, pos + 1, weight * (1.0 - p), labels, total);
    }
}

struct Episode {
    /// Preference probability per view position.
    click_prob: Vec<f64>,
    /// Observation probability per view position.
    observation: Vec<f64>,
    /// Pairwise similarity between view positions; None when unused.
    similar: Option<Vec<Vec<bool>>>,
}

impl Episode {
    fn similar_at(&self, a: usize, b: usize) -> bool {
        match &self.similar {
            Some(flags) => flags[a][b],
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(user: Vec<f64>, items: Vec<Vec<f64>>, grid: Grid) -> PageInstance {
        PageInstance::new(user, items, grid).unwrap()
    }

    #[test]
    fn logit_shaping_recenters_click_probabilities() {
        let spec = EnvironmentSpec::row_default(40);
        let plain = Environment::new(spec.clone(), 2, 3).unwrap();
        let user = vec![0.3, -0.8];
        let item = vec![1.1, 0.2, -0.4];
        // Defaults reproduce the raw sigmoid output bit for bit.
        assert_eq!(
            plain.click_probability(&user, &item),
            plain.preference().click_probability(&user, &item)
        );

        // A large offset saturates at exactly 1; scale 0 pins 0.5.
        let mut offset = spec.clone();
        offset.preference_offset = 50.0;
        let saturated = Environment::new(offset, 2, 3).unwrap();
        assert_eq!(saturated.click_probability(&user, &item), 1.0);
        let mut flat = spec.clone();
        flat.preference_scale = 0.0;
        let pinned = Environment::new(flat, 2, 3).unwrap();
        assert_eq!(pinned.click_probability(&user, &item), 0.5);

        // Scaling spreads probabilities away from the center monotonically.
        let mut sharp = spec.clone();
        sharp.preference_scale = 4.0;
        let sharpened = Environment::new(sharp, 2, 3).unwrap();
        let p = plain.click_probability(&user, &item);
        let q = sharpened.click_probability(&user, &item);
        assert!((q - 0.5).abs() > (p - 0.5).abs());
        assert_eq!((q > 0.5), (p > 0.5));

        // Validation rejects non-finite shaping.
        let mut bad = spec;
        bad.preference_scale = f64::NAN;
        assert!(matches!(
            bad.validate().unwrap_err(),
            EnvError::BadPreferenceShape { .. }
        ));
    }

    fn identity_config(n: usize, k: usize) -> Configuration {
        Configuration::new((0..k).collect(), (0..k).collect(), n, k).unwrap()
    }

    /// Environment whose click probability is 1.0 for every pair: zero
    /// weights except a large final bias saturate the sigmoid head.
    fn sure_click_env(spec: EnvironmentSpec, user_width: usize, item_width: usize) -> Environment {
        let mut env = Environment::new(spec, user_width, item_width).unwrap();
        let names: Vec<String> = env.preference.params.names().map(str::to_owned).collect();
        for name in names {
            let tensor = env.preference.params.get_mut(&name).unwrap();
            for v in tensor.values_mut() {
                *v = 0.0;
            }
        }
        let bias = env.preference.params.get_mut("pref.l3.b").unwrap();
        bias.values_mut()[0] = 50.0;
        env
    }

    #[test]
    fn scan_orders_on_small_grids() {
        let g23 = Grid::new(2, 3).unwrap();
        assert_eq!(scan_order(&ScanKind::Row, g23).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(scan_order(&ScanKind::Col, g23).unwrap(), vec![0, 3, 1, 4, 2, 5]);

        // 3x3 center-outward: center first, then the four edge-adjacent
        // tiles in row-major order, then the corners.
        let g33 = Grid::new(3, 3).unwrap();
        assert_eq!(
            scan_order(&ScanKind::Z, g33).unwrap(),
            vec![4, 1, 3, 5, 7, 0, 2, 6, 8]
        );

        let real = ScanKind::Real {
            order: vec![5, 0, 4, 1, 3, 2],
        };
        assert_eq!(scan_order(&real, g23).unwrap(), vec![5, 0, 4, 1, 3, 2]);
        for bad in [
            vec![0, 1],
            vec![0, 1, 2, 3, 4, 6],
            vec![0, 1, 2, 3, 4, 4],
        ] {
            assert!(matches!(
                scan_order(&ScanKind::Real { order: bad }, g23),
                Err(EnvError::BadPermutation { .. })
            ));
        }
    }

    #[test]
    fn observation_prob_values() {
        assert_eq!(observation_prob(1, 0.05).unwrap(), 1.0);
        assert_eq!(observation_prob(7, 0.0).unwrap(), 1.0);
        assert!((observation_prob(2, 0.05).unwrap() - 0.96594).abs() < 1e-5);
        assert!((observation_prob(2, 0.05).unwrap() - 2f64.powf(-0.05)).abs() < 1e-15);
        assert_eq!(observation_prob(0, 0.05), Err(EnvError::BadViewIndex(0)));
        assert!(matches!(
            observation_prob(1, -0.1),
            Err(EnvError::BadDecay(_))
        ));
        // Monotone nonincreasing in position.
        for i in 1..20 {
            assert!(
                observation_prob(i + 1, 0.3).unwrap() <= observation_prob(i, 0.3).unwrap()
            );
        }
    }

    #[test]
    fn similarity_threshold_interpolates() {
        // Four 1-d items at 0, 1, 3, 4: pairwise distances 1,3,4,2,3,1
        // sorted [1,1,2,3,3,4]; median by linear interpolation is 2.5.
        let items: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![3.0], vec![4.0]];
        let refs: Vec<&[f64]> = items.iter().map(|v| v.as_slice()).collect();
        let t = similarity_threshold(&refs, 0.5).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        // Low quantile sits at the smallest distance.
        let t_low = similarity_threshold(&refs, 0.005).unwrap();
        assert!((t_low - 1.0).abs() < 0.1);

        let same: Vec<Vec<f64>> = vec![vec![2.0, 2.0]; 3];
        let same_refs: Vec<&[f64]> = same.iter().map(|v| v.as_slice()).collect();
        assert_eq!(similarity_threshold(&same_refs, 0.25).unwrap(), 0.0);

        assert_eq!(
            similarity_threshold(&refs[..1], 0.5),
            Err(EnvError::TooFewItems(1))
        );
        assert_eq!(
            similarity_threshold(&refs, 1.0),
            Err(EnvError::BadQuantile(1.0))
        );
    }

    #[test]
    fn preference_model_is_seeded_and_varied() {
        let a = PreferenceModel::new(9, 4, 6);
        let b = PreferenceModel::new(9, 4, 6);
        let c = PreferenceModel::new(10, 4, 6);
        let mut rng = SeededRng::from_root(3);
        let mut values = Vec::new();
        let mut diff = false;
        for _ in 0..200 {
            let user: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let item: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let pa = a.click_probability(&user, &item);
            assert!((0.0..=1.0).contains(&pa));
            assert_eq!(pa, b.click_probability(&user, &item));
            if (pa - c.click_probability(&user, &item)).abs() > 1e-9 {
                diff = true;
            }
            values.push(pa);
        }
        assert!(diff, "different seeds should give different preferences");
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        assert!(var > 1e-4, "probabilities nearly constant: var {var}");
    }

    #[test]
    fn sure_clicks_fill_the_page() {
        let mut spec = EnvironmentSpec::row_default(1);
        spec.eta = 0.0;
        let env = sure_click_env(spec, 2, 3);
        let grid = Grid::new(2, 2).unwrap();
        let mut rng = SeededRng::from_root(4);
        let items: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let page = page(vec![0.3, -0.2], items, grid);
        let config = Configuration::new(vec![2, 0, 5, 3], vec![0, 1, 2, 3], 6, 4).unwrap();
        let record = env.simulate_clicks(&page, &config, &mut rng).unwrap();
        assert_eq!(record.labels, vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(record.reward, 4.0);
        assert_eq!(record.observation, vec![1.0; 4]);
        let oracle = env.expected_reward_oracle(&page, &config).unwrap();
        assert!((oracle - 4.0).abs() < 1e-12);
    }

    #[test]
    fn diverse_dynamics_block_repeat_clicks() {
        let mut spec = EnvironmentSpec::row_default(1);
        spec.eta = 0.0;
        spec.dynamics = Dynamics::Diverse;
        let env = sure_click_env(spec, 1, 2);
        let grid = Grid::new(1, 2).unwrap();
        // Identical items: threshold 0, every pair similar.
        let page = page(vec![0.0], vec![vec![1.0, 1.0], vec![1.0, 1.0]], grid);
        let config = identity_config(2, 2);
        let mut rng = SeededRng::from_root(5);
        for _ in 0..20 {
            let record = env.simulate_clicks(&page, &config, &mut rng).unwrap();
            assert_eq!(record.labels, vec![1.0, 0.0]);
        }
        let oracle = env.expected_reward_oracle(&page, &config).unwrap();
        assert!((oracle - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similar_dynamics_chain_clicks() {
        let mut spec = EnvironmentSpec::row_default(1);
        spec.eta = 0.0;
        spec.dynamics = Dynamics::Similar;
        let env = sure_click_env(spec, 1, 2);
        let grid = Grid::new(1, 2).unwrap();
        let page = page(vec![0.0], vec![vec![1.0, 1.0], vec![1.0, 1.0]], grid);
        let config = identity_config(2, 2);
        // Sure preference and sure observation: both clicked either way, and
        // the second is forced by similarity.
        let oracle = env.expected_reward_oracle(&page, &config).unwrap();
        assert!((oracle - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expected_mode_matches_closed_form() {
        let mut spec = EnvironmentSpec::row_default(7);
        spec.mode = ClickMode::Expected;
        let env = Environment::new(spec, 3, 4).unwrap();
        let grid = Grid::new(2, 3).unwrap();
        let mut rng = SeededRng::from_root(6);
        let items: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let user: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let page = page(user, items, grid);
        let config =
            Configuration::new(vec![8, 1, 4, 0, 6, 2], vec![3, 0, 5, 1, 2, 4], 9, 6).unwrap();
        let mut unused = SeededRng::from_root(0);
        let record = env.simulate_clicks(&page, &config, &mut unused).unwrap();
        // Labels are p_i / i^eta in view order.
        let by_tile = config.item_by_tile();
        let mut expect = 0.0;
        for (pos0, &tile) in scan_order(&ScanKind::Row, grid).unwrap().iter().enumerate() {
            let p = env
                .preference()
                .click_probability(&page.user, &page.items[by_tile[tile]]);
            let term = p * ((pos0 + 1) as f64).powf(-0.05);
            assert!((record.labels[pos0] - term).abs() < 1e-15);
            expect += term;
        }
        assert!((record.reward - expect).abs() < 1e-12);
        // With independent positions the enumeration collapses to the same
        // sum of per-position probabilities.
        let mut stoch_spec = EnvironmentSpec::row_default(7);
        stoch_spec.mode = ClickMode::Stochastic;
        let stoch = Environment::new(stoch_spec, 3, 4).unwrap();
        let oracle = stoch.expected_reward_oracle(&page, &config).unwrap();
        assert!((oracle - expect).abs() < 1e-12);
    }

    #[test]
    fn expected_mode_rejects_dynamics() {
        let mut spec = EnvironmentSpec::row_default(1);
        spec.mode = ClickMode::Expected;
        spec.dynamics = Dynamics::Diverse;
        assert_eq!(
            Environment::new(spec, 2, 2).unwrap_err(),
            EnvError::ExpectedWithDynamics(Dynamics::Diverse)
        );
    }

    #[test]
    fn oracle_rejects_large_pages() {
        let spec = EnvironmentSpec::row_default(1);
        let env = Environment::new(spec, 1, 2).unwrap();
        let grid = Grid::new(4, 4).unwrap();
        let mut rng = SeededRng::from_root(8);
        let items: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..2).map(|_| rng.normal()).collect())
            .collect();
        let page = page(vec![0.1], items, grid);
        let config = identity_config(16, 16);
        assert_eq!(
            env.expected_reward_oracle(&page, &config),
            Err(EnvError::OracleTooLarge(16))
        );
    }

    #[test]
    fn monte_carlo_matches_oracle_with_dynamics() {
        for (env_seed, dynamics) in [(11u64, Dynamics::Diverse), (12u64, Dynamics::Similar)] {
            let mut spec = EnvironmentSpec::row_default(env_seed);
            spec.dynamics = dynamics;
            // High quantile so similarity actually fires on a small page.
            spec.similarity_quantile = 0.5;
            spec.scan = ScanKind::Z;
            let env = Environment::new(spec, 2, 3).unwrap();
            let grid = Grid::new(2, 2).unwrap();
            let mut rng = SeededRng::derive(env_seed, "mc-setup", &[]);
            let items: Vec<Vec<f64>> = (0..7)
                .map(|_| (0..3).map(|_| rng.normal()).collect())
                .collect();
            let user: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            let page = page(user, items, grid);
            let config = Configuration::new(vec![6, 2, 0, 4], vec![1, 3, 0, 2], 7, 4).unwrap();
            let oracle = env.expected_reward_oracle(&page, &config).unwrap();
            let trials = 40_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for t in 0..trials {
                let mut episode_rng = SeededRng::derive(env_seed, "mc-episode", &[t]);
                let r = env
                    .simulate_clicks(&page, &config, &mut episode_rng)
                    .unwrap()
                    .reward;
                sum += r;
                sum_sq += r * r;
            }
            let n = trials as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - oracle).abs() <= 3.0 * se.max(1e-4),
                "{dynamics:?}: mc {mean} vs oracle {oracle}, se {se}"
            );
        }
    }
}
