//! Model registry shared by the train, evaluate, and compare subcommands.

use clap::ValueEnum;
use tilenet::baselines::{LayoutKind, UtilityRanker};
use tilenet::checkpoint::{Checkpoint, CheckpointError};
use tilenet::config::ExperimentConfig;
use tilenet::page::{Configuration, PageInstance};
use tilenet::policy::{Driver, TilePolicy, TileSelection};
use tilenet::rng::SeededRng;

/// What `train` can produce. Each variant owns one checkpoint file named
/// after its slug.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainModel {
    /// Full grid policy: learned item and tile heads.
    Tile,
    /// Item pointer over a fixed row-major fill.
    PointerRow,
    /// Item pointer over a fixed column-major fill.
    PointerCol,
    /// Item pointer over a fixed center-out fill.
    PointerZ,
    /// Pointwise click scorer trained on logged random placements.
    Ranker,
}

impl TrainModel {
    pub fn slug(self) -> &'static str {
        match self {
            TrainModel::Tile => "tile",
            TrainModel::PointerRow => "pointer-row",
            TrainModel::PointerCol => "pointer-col",
            TrainModel::PointerZ => "pointer-z",
            TrainModel::Ranker => "ranker",
        }
    }

    /// Fixed fill order for the pointer variants; `None` for the grid policy.
    /// The ranker never reaches the policy trainer.
    pub fn layout(self) -> Option<LayoutKind> {
        match self {
            TrainModel::Tile | TrainModel::Ranker => None,
            TrainModel::PointerRow => Some(LayoutKind::Row),
            TrainModel::PointerCol => Some(LayoutKind::Col),
            TrainModel::PointerZ => Some(LayoutKind::Z),
        }
    }
}

/// What `evaluate` can score. The ranker needs a fill order at evaluation
/// time, so it splits into one variant per layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModel {
    Tile,
    PointerRow,
    PointerCol,
    PointerZ,
    RankerRow,
    RankerCol,
    RankerZ,
}

impl EvalModel {
    pub fn slug(self) -> &'static str {
        match self {
            EvalModel::Tile => "tile",
            EvalModel::PointerRow => "pointer-row",
            EvalModel::PointerCol => "pointer-col",
            EvalModel::PointerZ => "pointer-z",
            EvalModel::RankerRow => "ranker-row",
            EvalModel::RankerCol => "ranker-col",
            EvalModel::RankerZ => "ranker-z",
        }
    }
}

/// A restored model reduced to its greedy page-to-configuration map.
pub enum Evaluator {
    Policy {
        policy: TilePolicy,
        layout: Option<LayoutKind>,
    },
    Ranker {
        ranker: UtilityRanker,
        layout: LayoutKind,
    },
}

impl Evaluator {
    pub fn rollout(&self, page: &PageInstance) -> Result<Configuration, String> {
        match self {
            Evaluator::Policy { policy, layout } => {
                let order;
                let selection = match layout {
                    Some(kind) => {
                        order = kind.order(page.grid);
                        TileSelection::Fixed(&order)
                    }
                    None => TileSelection::Learned,
                };
                policy
                    .rollout_detached(page, Driver::Greedy, selection)
                    .map(|r| r.configuration)
                    .map_err(|e| e.to_string())
            }
            Evaluator::Ranker { ranker, layout } => {
                ranker.place(page, *layout).map_err(|e| e.to_string())
            }
        }
    }
}

/// Untrained policy with the right shapes for this config. `pointer` widens
/// the decoder to the pointer baselines' fixed hidden size.
pub fn policy_shell(config: &ExperimentConfig, pointer: bool) -> TilePolicy {
    let mut pc = config.policy_config();
    if pointer {
        pc.decoder_hidden = 128;
    }
    // The seed is irrelevant: restore overwrites every tensor.
    TilePolicy::new(pc, &mut SeededRng::from_root(0))
}

pub fn restore_evaluator(
    model: EvalModel,
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
) -> Result<Evaluator, CheckpointError> {
    let policy_layout = |layout: Option<LayoutKind>| -> Result<Evaluator, CheckpointError> {
        let mut policy = policy_shell(config, layout.is_some());
        checkpoint.restore_into("policy", &mut policy.params)?;
        Ok(Evaluator::Policy { policy, layout })
    };
    let ranker_layout = |layout| -> Result<Evaluator, CheckpointError> {
        let mut ranker = UtilityRanker::new(config.input_width(), &mut SeededRng::from_root(0));
        checkpoint.restore_into("ranker", &mut ranker.params)?;
        Ok(Evaluator::Ranker { ranker, layout })
    };
    match model {
        EvalModel::Tile => policy_layout(None),
        EvalModel::PointerRow => policy_layout(Some(LayoutKind::Row)),
        EvalModel::PointerCol => policy_layout(Some(LayoutKind::Col)),
        EvalModel::PointerZ => policy_layout(Some(LayoutKind::Z)),
        EvalModel::RankerRow => ranker_layout(LayoutKind::Row),
        EvalModel::RankerCol => ranker_layout(LayoutKind::Col),
        EvalModel::RankerZ => ranker_layout(LayoutKind::Z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_distinct_and_stable() {
        let train: Vec<&str> = [
            TrainModel::Tile,
            TrainModel::PointerRow,
            TrainModel::PointerCol,
            TrainModel::PointerZ,
            TrainModel::Ranker,
        ]
        .iter()
        .map(|m| m.slug())
        .collect();
        assert_eq!(
            train,
            ["tile", "pointer-row", "pointer-col", "pointer-z", "ranker"]
        );
        assert_eq!(TrainModel::PointerCol.layout(), Some(LayoutKind::Col));
        assert_eq!(TrainModel::Tile.layout(), None);
        assert_eq!(EvalModel::RankerZ.slug(), "ranker-z");
    }
}
