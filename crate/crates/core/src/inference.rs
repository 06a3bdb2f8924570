//! Placebo-in-space permutation inference.
//!
//! Every donor is refit as if it were treated, against the remaining donors
//! (the actual treated unit never enters a placebo pool). The treated unit is
//! ranked against the placebo distribution under two statistics: the absolute
//! ATT and the post/pre RMSPE ratio. p-values use the `(k + 1) / (J + 1)`
//! correction, where `k` counts placebos at least as extreme as the treated
//! unit and `J` counts usable placebos.

use std::fmt;
use std::io::Write;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::effects::{gaps, EffectSeries};
use crate::error::{Error, Result};
use crate::panel::Panel;
use crate::solver::{fit, time_weights, SolverOptions, WeightVector};
use crate::study::{build_study, StudyData, StudySpec};

/// Exact finite-sample p-value `(k + 1) / (J + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PValue {
    k: u64,
    j: u64,
}

impl PValue {
    pub fn new(k: u64, j: u64) -> Result<Self> {
        if k > j {
            return Err(Error::Inference(format!("k = {k} exceeds J = {j}")));
        }
        Ok(PValue { k, j })
    }

    pub fn k(self) -> u64 {
        self.k
    }

    pub fn j(self) -> u64 {
        self.j
    }

    pub fn ratio(self) -> Ratio<u64> {
        Ratio::new(self.k + 1, self.j + 1)
    }

    pub fn value(self) -> f64 {
        (self.k + 1) as f64 / (self.j + 1) as f64
    }

    /// Decimal rendering at 4 places, rounding half to even on the exact
    /// rational.
    pub fn rounded(self) -> String {
        let (n, d) = (self.k + 1, self.j + 1);
        let scaled = n * 10_000;
        let (mut q, r) = (scaled / d, scaled % d);
        if 2 * r > d || (2 * r == d && q % 2 == 1) {
            q += 1;
        }
        format!("{}.{:04}", q / 10_000, q % 10_000)
    }
}

impl fmt::Display for PValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.ratio();
        write!(f, "{}/{} ({})", r.numer(), r.denom(), self.rounded())
    }
}

impl Serialize for PValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            numerator: u64,
            denominator: u64,
            value: f64,
            rounded: String,
        }
        let r = self.ratio();
        Repr {
            numerator: *r.numer(),
            denominator: *r.denom(),
            value: self.value(),
            rounded: self.rounded(),
        }
        .serialize(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlaceboOutcome {
    Fitted {
        weights: WeightVector,
        effects: EffectSeries,
        converged: bool,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboEntry {
    pub unit: String,
    pub outcome: PlaceboOutcome,
}

impl PlaceboEntry {
    pub fn effects(&self) -> Option<&EffectSeries> {
        match &self.outcome {
            PlaceboOutcome::Fitted { effects, .. } => Some(effects),
            PlaceboOutcome::Skipped { .. } => None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.effects().is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboSet {
    pub treated: String,
    pub treated_entry: EffectSeries,
    /// One per pool donor, in donor-pool order.
    pub entries: Vec<PlaceboEntry>,
}

impl PlaceboSet {
    pub fn fitted(&self) -> impl Iterator<Item = (&str, &EffectSeries)> {
        self.entries
            .iter()
            .filter_map(|e| e.effects().map(|fx| (e.unit.as_str(), fx)))
    }

    pub fn n_fitted(&self) -> usize {
        self.fitted().count()
    }
}

/// Runs `f` on a rayon pool with `workers` threads.
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Fits one study and derives its effects.
pub(crate) fn fit_effects(
    study: &StudyData,
    alpha: f64,
    opts: &SolverOptions,
) -> Result<(WeightVector, EffectSeries, bool)> {
    let tw = time_weights(&study.pre_offsets(), alpha)?;
    let r = fit(study, &tw, opts)?;
    let e = gaps(study, &r.weights)?;
    Ok((r.weights, e, r.converged))
}

/// Placebo refits for every donor of an already-built study.
pub fn placebos_for_study(
    study: &StudyData,
    treated_entry: EffectSeries,
    alpha: f64,
    opts: &SolverOptions,
    workers: usize,
) -> Result<PlaceboSet> {
    let entries = with_workers(workers, || {
        (0..study.n_donors())
            .into_par_iter()
            .map(|j| {
                let unit = study.donor_labels[j].clone();
                let outcome = match study.as_placebo(j) {
                    Err(e) => {
                        log::info!("placebo {unit:?} skipped: {e}");
                        PlaceboOutcome::Skipped { reason: e.to_string() }
                    }
                    Ok(pl) => match fit_effects(&pl, alpha, opts) {
                        Ok((weights, effects, converged)) => PlaceboOutcome::Fitted {
                            weights,
                            effects,
                            converged,
                        },
                        Err(e) => {
                            log::warn!("placebo {unit:?} skipped: {e}");
                            PlaceboOutcome::Skipped { reason: e.to_string() }
                        }
                    },
                };
                PlaceboEntry { unit, outcome }
            })
            .collect::<Vec<_>>()
    })?;
    Ok(PlaceboSet {
        treated: study.treated.clone(),
        treated_entry,
        entries,
    })
}

/// Builds the study for `spec`, fits the treated unit, and refits every
/// screened donor as a placebo.
pub fn run_placebos(panel: &Panel, spec: &StudySpec, opts: &SolverOptions, workers: usize) -> Result<PlaceboSet> {
    let study = build_study(panel, spec)?;
    let (_, treated, _) = fit_effects(&study, spec.alpha, opts)?;
    placebos_for_study(&study, treated, spec.alpha, opts, workers)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapTest {
    pub treated_att: f64,
    pub k: u64,
    pub j: u64,
    pub p: PValue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioTest {
    pub treated_ratio: f64,
    pub k: u64,
    pub j: u64,
    pub p: PValue,
    /// 1 = largest ratio; placebos tied with the treated unit rank ahead.
    pub rank: u64,
    /// Placebos dropped because their pre fit is exact.
    pub excluded_zero_pre: Vec<String>,
}

/// Two-sided test on `|ATT|`.
pub fn p_value_gap(ps: &PlaceboSet) -> Result<GapTest> {
    let target = ps.treated_entry.att.abs();
    let (mut j, mut k) = (0u64, 0u64);
    for (_, e) in ps.fitted() {
        j += 1;
        if e.att.abs() >= target {
            k += 1;
        }
    }
    if j == 0 {
        return Err(Error::Inference("no usable placebo units".to_string()));
    }
    Ok(GapTest {
        treated_att: ps.treated_entry.att,
        k,
        j,
        p: PValue::new(k, j)?,
    })
}

/// Test on the post/pre RMSPE ratio.
pub fn p_value_ratio(ps: &PlaceboSet) -> Result<RatioTest> {
    if !ps.treated_entry.ratio_defined {
        return Err(Error::Inference(format!(
            "pre-treatment RMSPE of {:?} is zero; RMSPE ratio undefined",
            ps.treated
        )));
    }
    let target = ps.treated_entry.rmspe_ratio;
    let (mut j, mut k) = (0u64, 0u64);
    let mut excluded = Vec::new();
    for (unit, e) in ps.fitted() {
        if !e.ratio_defined {
            log::info!("placebo {unit:?} has zero pre RMSPE; excluded from ratio test");
            excluded.push(unit.to_string());
            continue;
        }
        j += 1;
        if e.rmspe_ratio >= target {
            k += 1;
        }
    }
    if j == 0 {
        return Err(Error::Inference("no usable placebo units for the ratio test".to_string()));
    }
    Ok(RatioTest {
        treated_ratio: target,
        k,
        j,
        p: PValue::new(k, j)?,
        rank: k + 1,
        excluded_zero_pre: excluded,
    })
}

/// Keeps placebos whose pre RMSPE is at most `multiplier` times the treated
/// unit's. Skipped entries are carried through unchanged.
pub fn filter_placebos(ps: &PlaceboSet, multiplier: f64) -> Result<PlaceboSet> {
    if !(multiplier > 0.0) {
        return Err(Error::Parameter(format!("filter multiplier must be > 0, got {multiplier}")));
    }
    if multiplier.is_infinite() {
        return Ok(ps.clone());
    }
    let cutoff = multiplier * ps.treated_entry.rmspe_pre;
    let entries = ps
        .entries
        .iter()
        .filter(|e| e.effects().is_none_or(|fx| fx.rmspe_pre <= cutoff))
        .cloned()
        .collect();
    Ok(PlaceboSet {
        treated: ps.treated.clone(),
        treated_entry: ps.treated_entry.clone(),
        entries,
    })
}

/// `unit,att,rmspe_pre,rmspe_post,rmspe_ratio,skipped,skip_reason`
pub fn write_placebos_csv<W: Write>(out: W, ps: &PlaceboSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit", "att", "rmspe_pre", "rmspe_post", "rmspe_ratio", "skipped", "skip_reason"])?;
    for e in &ps.entries {
        match &e.outcome {
            PlaceboOutcome::Fitted { effects, .. } => w.write_record([
                e.unit.clone(),
                effects.att.to_string(),
                effects.rmspe_pre.to_string(),
                effects.rmspe_post.to_string(),
                effects.rmspe_ratio.to_string(),
                "false".to_string(),
                String::new(),
            ])?,
            PlaceboOutcome::Skipped { reason } => w.write_record([
                e.unit.as_str(),
                "",
                "",
                "",
                "",
                "true",
                reason.as_str(),
            ])?,
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn effect(att: f64, rmspe_pre: f64, rmspe_post: f64) -> EffectSeries {
        EffectSeries {
            synthetic_pre: vec![],
            synthetic_post: vec![],
            gaps_pre: vec![],
            gaps_post: vec![att],
            att,
            rmspe_pre,
            rmspe_post,
            rmspe_ratio: if rmspe_pre > 0.0 { rmspe_post / rmspe_pre } else { f64::INFINITY },
            ratio_defined: rmspe_pre > 0.0,
            rmspe_pre_relative: None,
        }
    }

    fn set(treated: EffectSeries, placebos: Vec<EffectSeries>) -> PlaceboSet {
        PlaceboSet {
            treated: "T".into(),
            treated_entry: treated,
            entries: placebos
                .into_iter()
                .enumerate()
                .map(|(i, effects)| PlaceboEntry {
                    unit: format!("p{i}"),
                    outcome: PlaceboOutcome::Fitted {
                        weights: WeightVector::uniform(2),
                        effects,
                        converged: true,
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn rendering_matches_exact_arithmetic() {
        let p = PValue::new(2, 58).unwrap();
        assert_eq!(p.ratio(), Ratio::new(3, 59));
        assert_eq!(p.rounded(), "0.0508");
        let p = PValue::new(18, 58).unwrap();
        assert_eq!(p.ratio(), Ratio::new(19, 59));
        assert_eq!(p.rounded(), "0.3220");
        assert_eq!(PValue::new(0, 1).unwrap().ratio(), Ratio::new(1, 2));
        assert_eq!(PValue::new(0, 1).unwrap().rounded(), "0.5000");
        assert_eq!(PValue::new(4, 4).unwrap().rounded(), "1.0000");
        // 1/32 = 0.03125: exact tie goes to the even digit
        assert_eq!(PValue::new(0, 31).unwrap().rounded(), "0.0312");
        // 3/32 = 0.09375 rounds up to the even digit
        assert_eq!(PValue::new(2, 31).unwrap().rounded(), "0.0938");
        assert!(PValue::new(3, 2).is_err());
    }

    #[test]
    fn gap_test_counts_magnitudes() {
        let ps = set(
            effect(-100.0, 1.0, 50.0),
            vec![effect(150.0, 1.0, 1.0), effect(-100.0, 1.0, 1.0), effect(20.0, 1.0, 1.0)],
        );
        let g = p_value_gap(&ps).unwrap();
        assert_eq!((g.k, g.j), (2, 3));
        assert_eq!(g.p.ratio(), Ratio::new(3, 4));
    }

    #[test]
    fn zero_treated_att_gives_p_one() {
        let ps = set(effect(0.0, 1.0, 1.0), vec![effect(0.0, 1.0, 1.0), effect(3.0, 1.0, 1.0)]);
        assert_eq!(p_value_gap(&ps).unwrap().p.value(), 1.0);
    }

    #[test]
    fn ratio_test_rank_and_minimum() {
        let ps = set(
            effect(-1.0, 1.0, 5.52),
            vec![
                effect(0.0, 1.0, 9.0),
                effect(0.0, 2.0, 2.0),
                effect(0.0, 1.0, 6.0),
                effect(0.0, 1.0, 1.0),
            ],
        );
        let r = p_value_ratio(&ps).unwrap();
        assert_eq!((r.k, r.j, r.rank), (2, 4, 3));
        let ps = set(effect(-1.0, 1.0, 100.0), vec![effect(0.0, 1.0, 2.0), effect(0.0, 1.0, 3.0)]);
        let r = p_value_ratio(&ps).unwrap();
        assert_eq!(r.p.ratio(), Ratio::new(1, 3));
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn ratio_test_drops_exact_pre_fits() {
        let ps = set(
            effect(-1.0, 1.0, 2.0),
            vec![effect(0.0, 0.0, 5.0), effect(0.0, 1.0, 1.0)],
        );
        let r = p_value_ratio(&ps).unwrap();
        assert_eq!(r.j, 1);
        assert_eq!(r.excluded_zero_pre, ["p0"]);
        let bad = set(effect(-1.0, 0.0, 2.0), vec![effect(0.0, 1.0, 1.0)]);
        assert!(matches!(p_value_ratio(&bad), Err(Error::Inference(_))));
    }

    #[test]
    fn empty_placebo_set_is_an_error() {
        let ps = set(effect(-1.0, 1.0, 2.0), vec![]);
        assert!(p_value_gap(&ps).is_err());
        assert!(p_value_ratio(&ps).is_err());
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let ps = set(
            effect(-1.0, 10.0, 20.0),
            vec![effect(0.0, 20.0, 1.0), effect(0.0, 20.000001, 1.0), effect(0.0, 5.0, 1.0)],
        );
        let f = filter_placebos(&ps, 2.0).unwrap();
        let kept: Vec<&str> = f.entries.iter().map(|e| e.unit.as_str()).collect();
        assert_eq!(kept, ["p0", "p2"]);
        assert_eq!(f.entries[0], ps.entries[0]);
        assert_eq!(filter_placebos(&ps, f64::INFINITY).unwrap(), ps);
        let all_bad = filter_placebos(&ps, 0.1).unwrap();
        assert!(all_bad.entries.is_empty());
        assert!(p_value_gap(&all_bad).is_err());
        assert!(filter_placebos(&ps, 0.0).is_err());
        assert!(filter_placebos(&ps, f64::NAN).is_err());
    }

    #[test]
    fn two_donor_pool_skips_every_placebo() {
        let d1 = vec![1.0, 2.0, 3.0, 4.0];
        let d2 = vec![2.0, 1.0, 4.0, 3.0];
        let s = StudyData::from_series(&[1.5, 1.5, 3.5, 3.5], &[d1, d2], 3).unwrap();
        let (_, e, _) = fit_effects(&s, 0.0, &SolverOptions::default()).unwrap();
        let ps = placebos_for_study(&s, e, 0.0, &SolverOptions::default(), 1).unwrap();
        assert_eq!(ps.entries.len(), 2);
        assert!(ps.entries.iter().all(PlaceboEntry::is_skipped));
        assert!(p_value_gap(&ps).is_err());
    }

    #[test]
    fn placebo_identical_to_a_donor_fits_perfectly() {
        let a = vec![10.0, 12.0, 11.0, 14.0, 13.0, 15.0];
        let b = vec![20.0, 18.0, 22.0, 19.0, 23.0, 21.0];
        let c = a.clone();
        let y = vec![15.0, 15.0, 16.5, 16.5, 18.0, 18.0];
        let s = StudyData::from_series(&y, &[a, b, c], 4).unwrap();
        let (_, e, _) = fit_effects(&s, 0.005, &SolverOptions::default()).unwrap();
        let ps = placebos_for_study(&s, e, 0.005, &SolverOptions::default(), 2).unwrap();
        let fx = ps.entries[0].effects().unwrap();
        assert!(fx.rmspe_pre < 1e-9);
        assert!(fx.gaps_post.iter().all(|g| g.abs() < 1e-9));
    }
}
