//! Binding a panel to a study design: treated unit, windows, donor screening.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Panel, Period};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorScreen {
    /// Drop donors with any missing value inside the study window.
    pub require_complete: bool,
    /// Drop donors whose pre-window Pearson correlation with the treated
    /// series is below this value.
    pub min_pre_correlation: Option<f64>,
}

impl Default for DonorScreen {
    fn default() -> Self {
        DonorScreen {
            require_complete: true,
            min_pre_correlation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub treated: String,
    /// Last pre-treatment month.
    pub intervention: Period,
    pub pre_start: Period,
    pub post_end: Period,
    /// Per-month decay rate of the pre-treatment loss weights.
    pub alpha: f64,
    pub donor_screen: DonorScreen,
    /// Candidate donor labels; `None` means every other unit in the panel.
    #[serde(default)]
    pub candidate_donors: Option<Vec<String>>,
}

impl StudySpec {
    pub fn new(treated: impl Into<String>, pre_start: Period, intervention: Period, post_end: Period) -> Self {
        StudySpec {
            treated: treated.into(),
            intervention,
            pre_start,
            post_end,
            alpha: 0.005,
            donor_screen: DonorScreen::default(),
            candidate_donors: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_start > self.intervention {
            return Err(Error::Parameter(format!(
                "pre_start {} is after intervention {}",
                self.pre_start, self.intervention
            )));
        }
        if self.intervention >= self.post_end {
            return Err(Error::Parameter(format!(
                "post_end {} must be after intervention {}",
                self.post_end, self.intervention
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if let Some(r) = self.donor_screen.min_pre_correlation {
            if !(-1.0..=1.0).contains(&r) {
                return Err(Error::Parameter(format!("min_pre_correlation {r} outside [-1, 1]")));
            }
        }
        Ok(())
    }

    pub fn pre_periods(&self) -> Vec<Period> {
        Period::range_inclusive(self.pre_start, self.intervention)
    }

    pub fn post_periods(&self) -> Vec<Period> {
        Period::range_inclusive(self.intervention.succ(), self.post_end)
    }
}

/// Offsets `t - T_end` for each pre-window month: the last pre month is 0,
/// earlier months are negative.
pub fn pre_period_index(spec: &StudySpec) -> Result<Vec<i64>> {
    spec.validate()?;
    let n = spec.intervention.months_since(spec.pre_start);
    Ok((-n..=0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExclusionReason {
    MissingValue { period: Period },
    LowCorrelation { correlation: f64, minimum: f64 },
    UndefinedCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub unit: String,
    #[serde(flatten)]
    pub reason: ExclusionReason,
}

/// Outcome matrices for one fitted study. Complete by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub treated: String,
    pub treated_pre: Vec<f64>,
    pub treated_post: Vec<f64>,
    /// donor × pre-period
    pub donors_pre: Vec<Vec<f64>>,
    /// donor × post-period
    pub donors_post: Vec<Vec<f64>>,
    pub donor_labels: Vec<String>,
    pub periods_pre: Vec<Period>,
    pub periods_post: Vec<Period>,
    pub exclusions: Vec<Exclusion>,
}

impl StudyData {
    /// Assembles study data from raw series, validating shapes.
    pub fn new(
        treated: impl Into<String>,
        treated_series: &[f64],
        donors: Vec<(String, Vec<f64>)>,
        periods_pre: Vec<Period>,
        periods_post: Vec<Period>,
    ) -> Result<Self> {
        let n_pre = periods_pre.len();
        let n = n_pre + periods_post.len();
        if treated_series.len() != n {
            return Err(Error::Study(format!(
                "treated series has {} values for {n} periods",
                treated_series.len()
            )));
        }
        let mut data = StudyData {
            treated: treated.into(),
            treated_pre: treated_series[..n_pre].to_vec(),
            treated_post: treated_series[n_pre..].to_vec(),
            donors_pre: Vec::with_capacity(donors.len()),
            donors_post: Vec::with_capacity(donors.len()),
            donor_labels: Vec::with_capacity(donors.len()),
            periods_pre,
            periods_post,
            exclusions: Vec::new(),
        };
        for (label, series) in donors {
            if series.len() != n {
                return Err(Error::Study(format!(
                    "donor {label:?} has {} values for {n} periods",
                    series.len()
                )));
            }
            data.donors_pre.push(series[..n_pre].to_vec());
            data.donors_post.push(series[n_pre..].to_vec());
            data.donor_labels.push(label);
        }
        data.check()?;
        Ok(data)
    }

    /// Convenience constructor for synthetic studies: labels `treated`,
    /// `d1..dJ`, monthly periods from January 2000.
    pub fn from_series(treated: &[f64], donors: &[Vec<f64>], n_pre: usize) -> Result<Self> {
        let start = Period::new(2000, 1)?;
        let n = treated.len();
        if n_pre == 0 || n_pre >= n {
            return Err(Error::Study(format!("need 0 < n_pre < {n}, got {n_pre}")));
        }
        let periods: Vec<Period> = (0..n as i64).map(|k| start.add_months(k)).collect();
        let donors = donors
            .iter()
            .enumerate()
            .map(|(j, s)| (format!("d{}", j + 1), s.clone()))
            .collect();
        StudyData::new(
            "treated",
            treated,
            donors,
            periods[..n_pre].to_vec(),
            periods[n_pre..].to_vec(),
        )
    }

    fn check(&self) -> Result<()> {
        if self.donor_labels.len() < 2 {
            return Err(Error::Study(format!(
                "donor pool for {:?} has {} donor(s); at least 2 required",
                self.treated,
                self.donor_labels.len()
            )));
        }
        if self.periods_pre.is_empty() || self.periods_post.is_empty() {
            return Err(Error::Study("pre and post windows must be non-empty".to_string()));
        }
        if self.donor_labels.iter().any(|d| *d == self.treated) {
            return Err(Error::Study(format!("treated unit {:?} is in its own donor pool", self.treated)));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = finite(&self.treated_pre)
            && finite(&self.treated_post)
            && self.donors_pre.iter().all(|r| finite(r))
            && self.donors_post.iter().all(|r| finite(r));
        if !ok {
            return Err(Error::Study("non-finite outcome value".to_string()));
        }
        Ok(())
    }

    pub fn n_donors(&self) -> usize {
        self.donor_labels.len()
    }

    pub fn n_pre(&self) -> usize {
        self.periods_pre.len()
    }

    pub fn n_post(&self) -> usize {
        self.periods_post.len()
    }

    pub fn donor_index(&self, label: &str) -> Option<usize> {
        self.donor_labels.iter().position(|d| d == label)
    }

    /// Offsets `t - T_end` for the pre window.
    pub fn pre_offsets(&self) -> Vec<i64> {
        let n = self.n_pre() as i64;
        (1 - n..=0).collect()
    }

    pub fn mean_treated_pre(&self) -> f64 {
        self.treated_pre.iter().sum::<f64>() / self.n_pre() as f64
    }

    /// Same study with donor `idx` removed from the pool.
    pub fn without_donor(&self, idx: usize) -> Result<StudyData> {
        let mut d = self.clone();
        d.donor_labels.remove(idx);
        d.donors_pre.remove(idx);
        d.donors_post.remove(idx);
        d.exclusions.clear();
        d.check()?;
        Ok(d)
    }

    /// Donor `idx` recast as the treated unit, pooled against the remaining
    /// donors. The original treated unit is not part of the new pool.
    pub fn as_placebo(&self, idx: usize) -> Result<StudyData> {
        let mut d = self.clone();
        d.treated = d.donor_labels.remove(idx);
        d.treated_pre = d.donors_pre.remove(idx);
        d.treated_post = d.donors_post.remove(idx);
        d.exclusions.clear();
        d.check()?;
        Ok(d)
    }
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa.sqrt() * sbb.sqrt()))
}

/// Extracts the treated and donor series for `spec`, screening donors.
pub fn build_study(p: &Panel, spec: &StudySpec) -> Result<StudyData> {
    spec.validate()?;
    let treated = p
        .unit_index(&spec.treated)
        .ok_or_else(|| Error::Study(format!("treated unit {:?} not in panel", spec.treated)))?;
    let (Some(lo), Some(hi)) = (p.period_index(spec.pre_start), p.period_index(spec.post_end)) else {
        return Err(Error::Range(format!(
            "study window {}..{} outside panel range {}..{}",
            spec.pre_start,
            spec.post_end,
            p.first_period().map_or("?".into(), |x| x.to_string()),
            p.last_period().map_or("?".into(), |x| x.to_string()),
        )));
    };
    let n_pre = spec.pre_periods().len();
    let periods = &p.periods()[lo..=hi];

    let treated_series: Vec<f64> = p
        .window(treated, lo, hi)
        .iter()
        .zip(periods)
        .map(|(v, t)| {
            v.ok_or_else(|| {
                Error::Study(format!("treated unit {:?} is missing a value at {t}", spec.treated))
            })
        })
        .collect::<Result<_>>()?;

    let candidates: Option<HashSet<&str>> = match &spec.candidate_donors {
        Some(list) => {
            for d in list {
                if p.unit_index(d).is_none() {
                    return Err(Error::Study(format!("candidate donor {d:?} not in panel")));
                }
            }
            Some(list.iter().map(String::as_str).collect())
        }
        None => None,
    };

    let mut donors = Vec::new();
    let mut exclusions = Vec::new();
    for (u, label) in p.units().iter().enumerate() {
        if u == treated || candidates.as_ref().is_some_and(|c| !c.contains(label.as_str())) {
            continue;
        }
        let window = p.window(u, lo, hi);
        if let Some(t) = window.iter().position(Option::is_none) {
            if spec.donor_screen.require_complete {
                log::info!("excluding donor {label:?}: missing value at {}", periods[t]);
                exclusions.push(Exclusion {
                    unit: label.clone(),
                    reason: ExclusionReason::MissingValue { period: periods[t] },
                });
                continue;
            }
            return Err(Error::Study(format!(
                "donor {label:?} is missing a value at {} and completeness screening is disabled",
                periods[t]
            )));
        }
        let series: Vec<f64> = window.iter().map(|v| v.unwrap()).collect();
        if let Some(min) = spec.donor_screen.min_pre_correlation {
            match pearson(&series[..n_pre], &treated_series[..n_pre]) {
                Some(r) if r >= min => {}
                Some(r) => {
                    log::info!("excluding donor {label:?}: pre-window correlation {r:.4} < {min}");
                    exclusions.push(Exclusion {
                        unit: label.clone(),
                        reason: ExclusionReason::LowCorrelation {
                            correlation: r,
                            minimum: min,
                        },
                    });
                    continue;
                }
                None => {
                    log::info!("excluding donor {label:?}: correlation undefined");
                    exclusions.push(Exclusion {
                        unit: label.clone(),
                        reason: ExclusionReason::UndefinedCorrelation,
                    });
                    continue;
                }
            }
        }
        donors.push((label.clone(), series));
    }

    let mut data = StudyData::new(
        spec.treated.clone(),
        &treated_series,
        donors,
        periods[..n_pre].to_vec(),
        periods[n_pre..].to_vec(),
    )?;
    data.exclusions = exclusions;
    Ok(data)
}
