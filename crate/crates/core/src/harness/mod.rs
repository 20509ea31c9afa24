//! Synthetic tasks, training recipes and experiment runners.

pub mod experiments;
pub mod manifest;
pub mod plot;
pub mod recipe;
pub mod task;

pub use experiments::{
    empirical_horizon, eval_accuracy, mix_seed, profile_dataset, run_capacity, run_info_prune_curve, run_schedule_bench, run_strategy_eval,
    run_withdraw_sweep, top_information, withdraw_curve, withdraw_sweep, ExperimentResult, SweepConfig, WithdrawSweep, EXPERIMENT_IDS,
};
pub use manifest::{manifest_file, RunManifest};
pub use recipe::{read_loss, window_means, write_loss, Recipe, RECIPE_PRESETS};
pub use task::{gen_task, Dataset, Split, TaskKind, TaskSample, TaskSpec, TaskSplits, TaskVocab, VisualEncoder};
