//! Patient records, cohort files, preprocessing, fold plans and synthetic cohorts.

mod folds;
mod io;
mod preprocess;
mod record;
mod schema;
mod synth;

pub use folds::{make_folds, subsample_labels, Fold, FoldPlan, FoldScheme};
pub use io::{load_cohort, read_schema, save_cohort, write_records, write_schema};
pub use preprocess::{
    interpolate_cohort, interpolate_timeseries, measured_feature_means, normalize_continuous,
    NormStats, PreprocessWarnings,
};
pub use record::{Cohort, PatientRecord, Provenance};
pub use schema::{ContinuousFeature, DiscreteFeature, FeatureSchema, SeriesKind, TimeseriesFeature};
pub use synth::{
    default_margin, static_schema, synthesize_cohort, timeseries_schema, Preset, SynthKnobs,
    MIN_COHORT_SIZE,
};
