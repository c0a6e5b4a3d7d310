//! Raw cycling records to model-ready samples.

mod capacity;
mod cleaning;
mod inputs;
mod pchip;
mod pipeline;
mod soc;

pub use capacity::{compute_cycle_capacity, compute_cycle_descriptors, compute_soh_series};
pub use cleaning::{
    clip_spikes, compute_eol, detect_artifact_onsets, filter_and_extrapolate, find_recovery_point,
    percentile_sorted, relative_deltas, smooth_region_pchip, FilterOutcome, OnsetInputs, OnsetMethod,
    PercentileThresholds, SmoothingParams, DEFAULT_GAMMA_GAP_SECONDS,
};
pub use inputs::{build_model_input, build_target, denormalize_soh, normalize_soh, ModelInput, Target};
pub use pchip::Pchip;
pub use pipeline::{
    clean_trajectory, clipped_soh, preprocess_battery, preprocess_records, BatchOutcome, training_deltas, Outcome, ProcessedSample, Provenance,
};
pub use soc::{compute_soc, resample_cycle, Direction, CHANNELS, CH_CAPACITY, CH_CURRENT, CH_SOC, CH_VOLTAGE};
#[allow(unused_imports)]
pub(crate) use soc::{interp, linspace};
