//! Gaps, ATT and RMSPE statistics for a fitted study.
//!
//! RMSPE values are unweighted; the decay weights only shape the solver loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::WeightVector;
use crate::study::StudyData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub synthetic_pre: Vec<f64>,
    pub synthetic_post: Vec<f64>,
    pub gaps_pre: Vec<f64>,
    pub gaps_post: Vec<f64>,
    /// Mean post-window gap.
    pub att: f64,
    pub rmspe_pre: f64,
    pub rmspe_post: f64,
    /// `rmspe_post / rmspe_pre`; `+inf` when the pre fit is exact.
    pub rmspe_ratio: f64,
    /// False when `rmspe_pre == 0` and the ratio is the infinity sentinel.
    pub ratio_defined: bool,
    /// `rmspe_pre` over the treated mean pre level; `None` when that mean
    /// is not positive.
    pub rmspe_pre_relative: Option<f64>,
}

/// Root of the unweighted mean of squared residuals.
pub fn rmspe(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::Parameter("rmspe of an empty vector".to_string()));
    }
    let ms = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    Ok(ms.sqrt())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-period gaps `treated - synthetic` over both windows, plus summaries.
pub fn gaps(study: &StudyData, w: &WeightVector) -> Result<EffectSeries> {
    if w.len() != study.n_donors() {
        return Err(Error::Parameter(format!(
            "{} weights for {} donors",
            w.len(),
            study.n_donors()
        )));
    }
    let synthetic_pre = w.combine(&study.donors_pre);
    let synthetic_post = w.combine(&study.donors_post);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let gaps_pre = diff(&study.treated_pre, &synthetic_pre);
    let gaps_post = diff(&study.treated_post, &synthetic_post);
    let rmspe_pre = rmspe(&gaps_pre)?;
    let rmspe_post = rmspe(&gaps_post)?;
    let ratio_defined = rmspe_pre > 0.0;
    if !ratio_defined {
        log::debug!("{:?}: exact pre fit, RMSPE ratio undefined", study.treated);
    }
    let level = study.mean_treated_pre();
    Ok(EffectSeries {
        att: mean(&gaps_post),
        rmspe_ratio: if ratio_defined { rmspe_post / rmspe_pre } else { f64::INFINITY },
        rmspe_pre_relative: (level > 0.0).then(|| rmspe_pre / level),
        synthetic_pre,
        synthetic_post,
        gaps_pre,
        gaps_post,
        rmspe_pre,
        rmspe_post,
        ratio_defined,
    })
}

/// Pre-window RMSPE as a fraction of the treated unit's mean pre level.
pub fn relative_pre_rmspe(e: &EffectSeries, study: &StudyData) -> Result<f64> {
    let level = study.mean_treated_pre();
    if !(level > 0.0) {
        return Err(Error::Parameter(format!(
            "mean pre-treatment level of {:?} is {level}, not positive",
            study.treated
        )));
    }
    Ok(e.rmspe_pre / level)
}

/// `period,window,treated,synthetic,gap`, one row per period.
pub fn write_gaps_csv<W: Write>(out: W, study: &StudyData, e: &EffectSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "window", "treated", "synthetic", "gap"])?;
    let pre = study
        .periods_pre
        .iter()
        .zip(&study.treated_pre)
        .zip(e.synthetic_pre.iter().zip(&e.gaps_pre))
        .map(|((p, y), (s, g))| (p, "pre", y, s, g));
    let post = study
        .periods_post
        .iter()
        .zip(&study.treated_post)
        .zip(e.synthetic_post.iter().zip(&e.gaps_post))
        .map(|((p, y), (s, g))| (p, "post", y, s, g));
    for (p, window, y, s, g) in pre.chain(post) {
        w.write_record([p.to_string(), window.to_string(), y.to_string(), s.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
