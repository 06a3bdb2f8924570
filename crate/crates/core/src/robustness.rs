//! Leave-one-out donor refits and decay-rate sensitivity.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{fit_effects, p_value_ratio, placebos_for_study, with_workers};
use crate::panel::Panel;
use crate::solver::{SolverOptions, WeightVector};
use crate::study::{build_study, StudyData, StudySpec};

/// Which donors to drop, one at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooTargets {
    /// The single highest-weight donor.
    Top,
    /// Every donor with baseline weight strictly above the threshold.
    AboveThreshold(f64),
    Units(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub excluded: String,
    pub baseline_weight: f64,
    pub att: Option<f64>,
    pub att_change_pct: Option<f64>,
    /// Weights over the reduced pool, in pool order.
    pub weights: Option<WeightVector>,
    pub infeasible: bool,
}

/// `100 |att - baseline| / |baseline|`; `None` for a zero baseline.
pub fn att_change_pct(baseline: f64, att: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (att - baseline).abs() / baseline.abs())
}

fn resolve_targets(study: &StudyData, weights: &WeightVector, targets: &LooTargets) -> Result<Vec<usize>> {
    match targets {
        LooTargets::Top => Ok(vec![weights.argmax()]),
        LooTargets::AboveThreshold(t) => Ok((0..study.n_donors())
            .filter(|&j| weights.as_slice()[j] > *t)
            .collect()),
        LooTargets::Units(units) => units
            .iter()
            .map(|u| {
                study
                    .donor_index(u)
                    .ok_or_else(|| Error::Study(format!("leave-one-out target {u:?} is not in the donor pool")))
            })
            .collect(),
    }
}

/// Refits `study` without each target donor and compares ATT to `baseline_att`.
pub fn loo_for_study(
    study: &StudyData,
    baseline_weights: &WeightVector,
    baseline_att: f64,
    alpha: f64,
    opts: &SolverOptions,
    targets: &LooTargets,
    workers: usize,
) -> Result<Vec<LooResult>> {
    let idx = resolve_targets(study, baseline_weights, targets)?;
    let results = with_workers(workers, || {
        idx.par_iter()
            .map(|&j| {
                let excluded = study.donor_labels[j].clone();
                let baseline_weight = baseline_weights.as_slice()[j];
                let reduced = match study.without_donor(j) {
                    Ok(r) => r,
                    Err(e) => {
                        log::info!("leave-one-out without {excluded:?} infeasible: {e}");
                        return Ok(LooResult {
                            excluded,
                            baseline_weight,
                            att: None,
                            att_change_pct: None,
                            weights: None,
                            infeasible: true,
                        });
                    }
                };
                let (weights, effects, _) = fit_effects(&reduced, alpha, opts)?;
                Ok(LooResult {
                    excluded,
                    baseline_weight,
                    att: Some(effects.att),
                    att_change_pct: att_change_pct(baseline_att, effects.att),
                    weights: Some(weights),
                    infeasible: false,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    results
}

/// Builds the study, fits the baseline, then runs the leave-one-out refits.
pub fn leave_one_out(
    panel: &Panel,
    spec: &StudySpec,
    opts: &SolverOptions,
    targets: &LooTargets,
    workers: usize,
) -> Result<Vec<LooResult>> {
    let study = build_study(panel, spec)?;
    let (w, e, _) = fit_effects(&study, spec.alpha, opts)?;
    loo_for_study(&study, &w, e.att, spec.alpha, opts, targets, workers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub att: f64,
    pub rmspe_pre: f64,
    /// Present when placebos were rerun for this decay rate.
    pub p_ratio: Option<f64>,
}

/// One fit per decay rate over a fixed study (same pool and windows).
pub fn sweep_for_study(
    study: &StudyData,
    alphas: &[f64],
    opts: &SolverOptions,
    rerun_placebos: bool,
    workers: usize,
) -> Result<Vec<AlphaSweepRow>> {
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::Parameter(format!("alpha must be finite and >= 0, got {a}")));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let (_, effects, _) = fit_effects(study, alpha, opts)?;
            let row = AlphaSweepRow {
                alpha,
                att: effects.att,
                rmspe_pre: effects.rmspe_pre,
                p_ratio: None,
            };
            if !rerun_placebos {
                return Ok(row);
            }
            let ps = placebos_for_study(study, effects, alpha, opts, workers)?;
            let p_ratio = match p_value_ratio(&ps) {
                Ok(r) => Some(r.p.value()),
                Err(e) => {
                    log::warn!("alpha {alpha}: no ratio p-value: {e}");
                    None
                }
            };
            Ok(AlphaSweepRow { p_ratio, ..row })
        })
        .collect()
}

pub fn alpha_sweep(
    panel: &Panel,
    spec: &StudySpec,
    alphas: &[f64],
    opts: &SolverOptions,
    rerun_placebos: bool,
    workers: usize,
) -> Result<Vec<AlphaSweepRow>> {
    let study = build_study(panel, spec)?;
    sweep_for_study(&study, alphas, opts, rerun_placebos, workers)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `excluded,att,att_change_pct,infeasible`
pub fn write_loo_csv<W: Write>(out: W, rows: &[LooResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["excluded", "att", "att_change_pct", "infeasible"])?;
    for r in rows {
        w.write_record([r.excluded.clone(), opt(r.att), opt(r.att_change_pct), r.infeasible.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `alpha,att,rmspe_pre,p_ratio`
pub fn write_alpha_sweep_csv<W: Write>(out: W, rows: &[AlphaSweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "att", "rmspe_pre", "p_ratio"])?;
    for r in rows {
        w.write_record([r.alpha.to_string(), r.att.to_string(), r.rmspe_pre.to_string(), opt(r.p_ratio)])?;
    }
    w.flush()?;
    Ok(())
}
