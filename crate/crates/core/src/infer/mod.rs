//! Prediction over bounding-box crops, ensembling, folds and evaluation.

mod ensemble;
mod evaluate;
mod predict;
mod splits;

pub use ensemble::{combine_members, ensemble_predict, mean_maps, EnsembleConfig, EnsembleOutput};
pub use evaluate::{average_rows, evaluate, CenterSummary, EvalCase, EvaluationReport};
pub use predict::{predict_case, predict_crop, predict_map, InferConfig, OutputSpace};
pub use splits::{make_splits, Fold, FoldKind, SplitPlan};
