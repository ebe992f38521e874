//! Early-cycle capacity-difference features and lifetime regression for
//! lithium-ion cells, plus a seeded synthetic fleet to exercise them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod curve;
pub mod error;
pub mod features;
pub mod model;
pub mod regress;
pub mod synth;

pub use curve::{grid_cycle, invert_to_grid, make_voltage_grid, Direction, GriddedCurve, VoltageGrid};
pub use error::{Error, Result};
pub use features::{
    curve_statistics, delta_q, feature_row, select_cycle_at, CurveStats, DeltaQCurve, FeatureRow, Statistic,
};
pub use model::{
    capacity_retention_at, compute_eol, ingest_cycling_csv, read_metadata_csv, AhThroughputLife, CellMetadata,
    CellRecord, ConditionGroup, CycleLog, DiagnosticPoint, DiagnosticSeries, Step, StepSample, StepType,
};
pub use regress::{
    fit_ridge, pearson, predict, regress_to_mean_baseline, split_evaluate, Dataset, EvalReport, Metrics, RidgeModel,
    SplitConfig,
};
pub use synth::{synth_fleet, FleetConfig, SynthCell, SynthParams};
