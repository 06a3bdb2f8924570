//! End-to-end analysis: study → fit → effects → placebos → robustness.

use serde::{Deserialize, Serialize};

use crate::effects::{gaps, EffectSeries};
use crate::error::Result;
use crate::inference::{
    filter_placebos, p_value_gap, p_value_ratio, placebos_for_study, GapTest, PlaceboSet, RatioTest,
};
use crate::panel::Panel;
use crate::robustness::{loo_for_study, sweep_for_study, AlphaSweepRow, LooResult, LooTargets};
use crate::solver::{fit, time_weights, FitResult, SolverOptions};
use crate::study::{build_study, StudyData, StudySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LooMode {
    None,
    Top,
    /// Every donor whose baseline weight exceeds `threshold`.
    All { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub spec: StudySpec,
    pub solver: SolverOptions,
    pub placebos: bool,
    pub placebo_filter_multiplier: f64,
    pub loo: LooMode,
    pub alpha_sweep: Vec<f64>,
    /// Rerun placebos for every swept alpha.
    pub sweep_placebos: bool,
    pub workers: usize,
}

impl AnalysisConfig {
    pub fn new(spec: StudySpec) -> Self {
        AnalysisConfig {
            spec,
            solver: SolverOptions::default(),
            placebos: true,
            placebo_filter_multiplier: 2.0,
            loo: LooMode::Top,
            alpha_sweep: vec![0.003, 0.005, 0.01],
            sweep_placebos: false,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub placebos: PlaceboSet,
    pub gap: Option<GapTest>,
    pub ratio: Option<RatioTest>,
    pub filtered: PlaceboSet,
    pub filtered_gap: Option<GapTest>,
    pub filtered_ratio: Option<RatioTest>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub config: AnalysisConfig,
    pub study: StudyData,
    pub fit: FitResult,
    pub effects: EffectSeries,
    pub inference: Option<Inference>,
    pub loo: Option<Vec<LooResult>>,
    pub alpha_sweep: Option<Vec<AlphaSweepRow>>,
    /// Non-fatal problems, e.g. a p-value that could not be formed.
    pub warnings: Vec<String>,
}

fn soft<T>(r: Result<T>, what: &str, warnings: &mut Vec<String>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            let msg = format!("{what}: {e}");
            log::info!("{msg}");
            warnings.push(msg);
            None
        }
    }
}

pub fn run_analysis(panel: &Panel, config: &AnalysisConfig) -> Result<Analysis> {
    let spec = &config.spec;
    let study = build_study(panel, spec)?;
    log::info!(
        "study {:?}: {} donors ({} excluded), {} pre / {} post periods",
        study.treated,
        study.n_donors(),
        study.exclusions.len(),
        study.n_pre(),
        study.n_post()
    );
    let tw = time_weights(&study.pre_offsets(), spec.alpha)?;
    let fit = fit(&study, &tw, &config.solver)?;
    if !fit.converged {
        log::warn!("baseline fit did not converge");
    }
    let effects = gaps(&study, &fit.weights)?;
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!(
            "baseline fit stopped at max_iterations = {}",
            config.solver.max_iterations
        ));
    }

    let inference = if config.placebos {
        let placebos = placebos_for_study(&study, effects.clone(), spec.alpha, &config.solver, config.workers)?;
        let filtered = filter_placebos(&placebos, config.placebo_filter_multiplier)?;
        Some(Inference {
            gap: soft(p_value_gap(&placebos), "gap p-value", &mut warnings),
            ratio: soft(p_value_ratio(&placebos), "ratio p-value", &mut warnings),
            filtered_gap: soft(p_value_gap(&filtered), "filtered gap p-value", &mut warnings),
            filtered_ratio: soft(p_value_ratio(&filtered), "filtered ratio p-value", &mut warnings),
            placebos,
            filtered,
        })
    } else {
        None
    };

    let loo = match &config.loo {
        LooMode::None => None,
        mode => {
            let targets = match mode {
                LooMode::All { threshold } => LooTargets::AboveThreshold(*threshold),
                _ => LooTargets::Top,
            };
            Some(loo_for_study(
                &study,
                &fit.weights,
                effects.att,
                spec.alpha,
                &config.solver,
                &targets,
                config.workers,
            )?)
        }
    };

    let alpha_sweep = if config.alpha_sweep.is_empty() {
        None
    } else {
        Some(sweep_for_study(
            &study,
            &config.alpha_sweep,
            &config.solver,
            config.sweep_placebos,
            config.workers,
        )?)
    };

    Ok(Analysis {
        config: config.clone(),
        study,
        fit,
        effects,
        inference,
        loo,
        alpha_sweep,
        warnings,
    })
}
