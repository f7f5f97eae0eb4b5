//! Checks shared between the regular test targets and the acceptance runner.

#![allow(dead_code)]

pub mod determinism;
pub mod oracles;

pub type Check = (&'static str, fn());

pub const ORACLES: &[Check] = &[
    (
        "ncf_gradients_match_finite_differences",
        oracles::ncf_gradients_match_finite_differences,
    ),
    (
        "lightgcn_gradients_match_finite_differences",
        oracles::lightgcn_gradients_match_finite_differences,
    ),
    (
        "lightgcn_matches_dense_propagation",
        oracles::lightgcn_matches_dense_propagation,
    ),
    (
        "select_important_matches_full_sort",
        oracles::select_important_matches_full_sort,
    ),
    (
        "ranking_metrics_match_full_sort",
        oracles::ranking_metrics_match_full_sort,
    ),
    (
        "calibrate_keeps_old_norm_and_new_direction",
        oracles::calibrate_keeps_old_norm_and_new_direction,
    ),
    (
        "sampled_negatives_respect_the_pool",
        oracles::sampled_negatives_respect_the_pool,
    ),
    (
        "poisoning_matches_seeded_reevaluation",
        oracles::poisoning_matches_seeded_reevaluation,
    ),
    (
        "device_log_round_trips_a_hundred_entries",
        oracles::device_log_round_trips_a_hundred_entries,
    ),
    (
        "torn_tail_is_truncated_and_appends_resume",
        oracles::torn_tail_is_truncated_and_appends_resume,
    ),
    (
        "aggregation_matches_dense_mean",
        oracles::aggregation_matches_dense_mean,
    ),
];

pub const DETERMINISM: &[Check] = &[
    (
        "training_twice_gives_identical_checkpoints",
        determinism::training_twice_gives_identical_checkpoints,
    ),
    (
        "every_unlearning_mode_is_reproducible",
        determinism::every_unlearning_mode_is_reproducible,
    ),
    (
        "removed_clients_logs_are_never_read",
        determinism::removed_clients_logs_are_never_read,
    ),
    (
        "exact_replay_reproduces_training",
        determinism::exact_replay_reproduces_training,
    ),
    (
        "fedremove_without_targets_restores_the_trained_model",
        determinism::fedremove_without_targets_restores_the_trained_model,
    ),
    (
        "unknown_target_is_rejected",
        determinism::unknown_target_is_rejected,
    ),
    (
        "run_directories_are_reproducible",
        determinism::run_directories_are_reproducible,
    ),
    (
        "non_empty_output_is_refused_without_force",
        determinism::non_empty_output_is_refused_without_force,
    ),
];
