//! Synthetic control estimation for a single treated panel unit.
//!
//! The pipeline is: load a wide monthly panel ([`panel`]), bind it to a study
//! design with donor screening ([`study`]), fit simplex-constrained donor
//! weights under an exponentially time-decayed pre-treatment loss
//! ([`solver`]), derive gaps and RMSPE statistics ([`effects`]), run
//! placebo-in-space permutation inference ([`inference`]) and robustness
//! refits ([`robustness`]). [`pipeline`] wires these together and [`report`]
//! writes the JSON report and plot-ready CSVs.

pub mod effects;
pub mod error;
pub mod inference;
pub mod panel;
pub mod pipeline;
pub mod report;
pub mod robustness;
pub mod solver;
pub mod study;

pub use effects::{gaps, relative_pre_rmspe, rmspe, EffectSeries};
pub use error::{Error, Result};
pub use inference::{
    filter_placebos, p_value_gap, p_value_ratio, run_placebos, GapTest, PValue, PlaceboEntry,
    PlaceboSet, RatioTest,
};
pub use panel::{load_panel, slice_panel, Layout, Panel, Period};
pub use pipeline::{run_analysis, Analysis, AnalysisConfig, LooMode};
pub use robustness::{alpha_sweep, att_change_pct, leave_one_out, AlphaSweepRow, LooResult, LooTargets};
pub use solver::{fit, time_weights, FitResult, SolverOptions, TimeWeights, WeightVector};
pub use study::{build_study, pre_period_index, DonorScreen, StudyData, StudySpec};
