//! Report document and plot-ready CSV emission.
//!
//! All CSVs carry full-precision numbers and are byte-stable for identical
//! inputs; the only volatile content is the provenance block of
//! `report.json`. The report rounds currency to whole dollars.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::effects::{write_gaps_csv, EffectSeries};
use crate::error::Result;
use crate::inference::{write_placebos_csv, GapTest, PlaceboSet, RatioTest};
use crate::panel::Period;
use crate::pipeline::{Analysis, AnalysisConfig};
use crate::robustness::{write_alpha_sweep_csv, write_loo_csv, AlphaSweepRow, LooResult};
use crate::study::{Exclusion, StudyData};

/// Donors at or above this share get their own weight-table row.
pub const WEIGHT_TABLE_CUTOFF: f64 = 0.05;

/// Whole dollars, half away from zero.
pub fn round_dollars(x: f64) -> i64 {
    x.round() as i64
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`). `None` for an empty sample.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightRow {
    pub label: String,
    pub weight_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightTable {
    /// Donors with weight ≥ cutoff, descending, rounded to 0.01 pct.
    pub rows: Vec<WeightRow>,
    /// 100 minus the displayed rows; `None` when nothing else has weight.
    pub others_pct: Option<f64>,
    /// Remaining donors with non-zero weight.
    pub others_count: usize,
}

impl WeightTable {
    pub fn total_pct(&self) -> f64 {
        self.rows.iter().map(|r| r.weight_pct).sum::<f64>() + self.others_pct.unwrap_or(0.0)
    }
}

pub fn weight_table(labels: &[String], weights: &[f64], cutoff: f64) -> WeightTable {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then_with(|| labels[a].cmp(&labels[b])));
    let (named, rest): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&j| weights[j] >= cutoff);
    let others_count = rest.iter().filter(|&&j| weights[j] > 0.0).count();
    // integer hundredths of a percent
    let exact: Vec<f64> = named.iter().map(|&j| 10_000.0 * weights[j]).collect();
    let mut cents: Vec<i64> = exact.iter().map(|x| x.round() as i64).collect();
    if others_count == 0 {
        // no remainder row to absorb rounding: largest-remainder fix-up
        let mut diff = 10_000 - cents.iter().sum::<i64>();
        let mut by_residual: Vec<usize> = (0..cents.len()).collect();
        by_residual.sort_by(|&a, &b| (exact[b] - cents[b] as f64).total_cmp(&(exact[a] - cents[a] as f64)));
        let mut k = 0;
        while diff != 0 && !by_residual.is_empty() {
            let i = if diff > 0 { by_residual[k] } else { by_residual[by_residual.len() - 1 - k] };
            cents[i] += diff.signum();
            diff -= diff.signum();
            k = (k + 1) % by_residual.len();
        }
    }
    let shown: i64 = cents.iter().sum();
    let rows = named
        .iter()
        .zip(&cents)
        .map(|(&j, &c)| WeightRow {
            label: labels[j].clone(),
            weight_pct: c as f64 / 100.0,
        })
        .collect();
    WeightTable {
        rows,
        others_pct: (others_count > 0).then(|| (10_000 - shown) as f64 / 100.0),
        others_count,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub period: Period,
    pub gap: f64,
    pub gap_usd: i64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectSummary {
    pub att: f64,
    pub att_usd: i64,
    pub post_gaps: Vec<GapRow>,
    pub rmspe_pre: f64,
    pub rmspe_pre_relative: Option<f64>,
    pub rmspe_post: f64,
    /// `None` when the pre fit is exact.
    pub rmspe_ratio: Option<f64>,
}

impl EffectSummary {
    fn new(e: &EffectSeries, study: &StudyData) -> Self {
        EffectSummary {
            att: e.att,
            att_usd: round_dollars(e.att),
            post_gaps: study
                .periods_post
                .iter()
                .zip(&e.gaps_post)
                .map(|(&period, &gap)| GapRow {
                    period,
                    gap,
                    gap_usd: round_dollars(gap),
                })
                .collect(),
            rmspe_pre: e.rmspe_pre,
            rmspe_pre_relative: e.rmspe_pre_relative,
            rmspe_post: e.rmspe_post,
            rmspe_ratio: e.ratio_defined.then_some(e.rmspe_ratio),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DonorSummary {
    pub pool: Vec<String>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaceboSummary {
    pub placebos: usize,
    pub fitted: usize,
    pub skipped: Vec<String>,
    pub gap: Option<GapTest>,
    pub ratio: Option<RatioTest>,
}

impl PlaceboSummary {
    fn new(ps: &PlaceboSet, gap: &Option<GapTest>, ratio: &Option<RatioTest>) -> Self {
        PlaceboSummary {
            placebos: ps.entries.len(),
            fitted: ps.n_fitted(),
            skipped: ps
                .entries
                .iter()
                .filter(|e| e.is_skipped())
                .map(|e| e.unit.clone())
                .collect(),
            gap: gap.clone(),
            ratio: ratio.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceSummary {
    pub all: PlaceboSummary,
    pub filter_multiplier: f64,
    pub filtered: PlaceboSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessSummary {
    pub leave_one_out: Option<Vec<LooResult>>,
    pub alpha_sweep: Option<Vec<AlphaSweepRow>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub input_sha256: Option<String>,
    pub tool_version: String,
    pub generated_at: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: AnalysisConfig,
    pub donors: DonorSummary,
    pub weight_table: WeightTable,
    pub fit: FitSummary,
    pub effects: EffectSummary,
    pub inference: Option<InferenceSummary>,
    pub robustness: RobustnessSummary,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// Hex SHA-256 of a byte stream.
pub fn digest<R: Read>(mut r: R) -> Result<String> {
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn build_report(a: &Analysis, input_sha256: Option<String>) -> RunReport {
    let study = &a.study;
    RunReport {
        config: a.config.clone(),
        donors: DonorSummary {
            pool: study.donor_labels.clone(),
            excluded: study.exclusions.clone(),
        },
        weight_table: weight_table(&study.donor_labels, a.fit.weights.as_slice(), WEIGHT_TABLE_CUTOFF),
        fit: FitSummary {
            objective: a.fit.objective,
            iterations: a.fit.iterations,
            converged: a.fit.converged,
            kkt_residual: a.fit.kkt_residual,
        },
        effects: EffectSummary::new(&a.effects, study),
        inference: a.inference.as_ref().map(|inf| InferenceSummary {
            all: PlaceboSummary::new(&inf.placebos, &inf.gap, &inf.ratio),
            filter_multiplier: a.config.placebo_filter_multiplier,
            filtered: PlaceboSummary::new(&inf.filtered, &inf.filtered_gap, &inf.filtered_ratio),
        }),
        robustness: RobustnessSummary {
            leave_one_out: a.loo.clone(),
            alpha_sweep: a.alpha_sweep.clone(),
        },
        warnings: a.warnings.clone(),
        provenance: Provenance {
            input_sha256,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        },
    }
}

/// Human-readable summary for the terminal.
pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let spec = &r.config.spec;
    s.push_str(&format!(
        "Treated: {}   pre {}..{}   post ..{}   alpha = {}\n",
        spec.treated, spec.pre_start, spec.intervention, spec.post_end, spec.alpha
    ));
    s.push_str(&format!("Donor pool: {} ({} excluded)\n\n", r.donors.pool.len(), r.donors.excluded.len()));
    s.push_str("Donor weights (%)\n");
    for row in &r.weight_table.rows {
        s.push_str(&format!("  {:<32} {:>7.2}\n", row.label, row.weight_pct));
    }
    if let Some(o) = r.weight_table.others_pct {
        let label = format!("Others ({} with non-zero weight)", r.weight_table.others_count);
        s.push_str(&format!("  {label:<32} {o:>7.2}\n"));
    }
    let e = &r.effects;
    s.push_str(&format!("\nATT: {} per period\n", e.att_usd));
    for g in &e.post_gaps {
        s.push_str(&format!("  {}  gap {}\n", g.period, g.gap_usd));
    }
    match e.rmspe_pre_relative {
        Some(rel) => s.push_str(&format!("Pre RMSPE: {:.2} ({:.2}% of mean pre level)\n", e.rmspe_pre, 100.0 * rel)),
        None => s.push_str(&format!("Pre RMSPE: {:.2}\n", e.rmspe_pre)),
    }
    match e.rmspe_ratio {
        Some(x) => s.push_str(&format!("Post/pre RMSPE ratio: {x:.2}\n")),
        None => s.push_str("Post/pre RMSPE ratio: undefined (exact pre fit)\n"),
    }
    if let Some(inf) = &r.inference {
        s.push_str(&format!("\nPlacebos: {} fitted of {}\n", inf.all.fitted, inf.all.placebos));
        if let Some(g) = &inf.all.gap {
            s.push_str(&format!("  gap test:   k = {}, J = {}, p = {}\n", g.k, g.j, g.p));
        }
        if let Some(q) = &inf.all.ratio {
            s.push_str(&format!("  ratio test: k = {}, J = {}, p = {}, rank {}\n", q.k, q.j, q.p, q.rank));
        }
    }
    if let Some(loo) = &r.robustness.leave_one_out {
        s.push('\n');
        for l in loo {
            match (l.att, l.att_change_pct) {
                (Some(att), Some(pct)) => s.push_str(&format!(
                    "Leave out {}: ATT {} ({:.2}% change)\n",
                    l.excluded,
                    round_dollars(att),
                    pct
                )),
                (Some(att), None) => s.push_str(&format!("Leave out {}: ATT {}\n", l.excluded, round_dollars(att))),
                _ => s.push_str(&format!("Leave out {}: infeasible\n", l.excluded)),
            }
        }
    }
    if let Some(sweep) = &r.robustness.alpha_sweep {
        s.push('\n');
        for row in sweep {
            s.push_str(&format!("alpha {:<6} ATT {}\n", row.alpha, round_dollars(row.att)));
        }
    }
    for w in &r.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

/// `unit,weight,weight_pct` in pool order.
pub fn write_weights_csv<W: Write>(out: W, study: &StudyData, weights: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit", "weight", "weight_pct"])?;
    for (label, x) in study.donor_labels.iter().zip(weights) {
        w.write_record([label.clone(), x.to_string(), (100.0 * x).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `period,window,treated,synthetic`
pub fn write_trajectory_csv<W: Write>(out: W, study: &StudyData, e: &EffectSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "window", "treated", "synthetic"])?;
    let rows = study
        .periods_pre
        .iter()
        .zip(study.treated_pre.iter().zip(&e.synthetic_pre))
        .map(|(p, (y, s))| (p, "pre", y, s))
        .chain(
            study
                .periods_post
                .iter()
                .zip(study.treated_post.iter().zip(&e.synthetic_post))
                .map(|(p, (y, s))| (p, "post", y, s)),
        );
    for (p, win, y, s) in rows {
        w.write_record([p.to_string(), win.to_string(), y.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `period,window,treated,<placebo units...>,p5,p95`. The band is taken over
/// the placebo columns only.
pub fn write_placebo_gaps_csv<W: Write>(out: W, study: &StudyData, ps: &PlaceboSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fitted: Vec<(&str, &EffectSeries)> = ps.fitted().collect();
    let mut header = vec!["period".to_string(), "window".to_string(), ps.treated.clone()];
    header.extend(fitted.iter().map(|(u, _)| u.to_string()));
    header.push("p5".to_string());
    header.push("p95".to_string());
    w.write_record(&header)?;
    let n_pre = study.n_pre();
    let periods = study.periods_pre.iter().chain(&study.periods_post);
    for (t, p) in periods.enumerate() {
        let at = |e: &EffectSeries| if t < n_pre { e.gaps_pre[t] } else { e.gaps_post[t - n_pre] };
        let window = if t < n_pre { "pre" } else { "post" };
        let col: Vec<f64> = fitted.iter().map(|(_, e)| at(e)).collect();
        let mut rec = vec![p.to_string(), window.to_string(), at(&ps.treated_entry).to_string()];
        rec.extend(col.iter().map(f64::to_string));
        let band = |q| percentile(&col, q).map_or_else(String::new, |x| x.to_string());
        rec.push(band(0.05));
        rec.push(band(0.95));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub unit: String,
    pub rmspe_ratio: f64,
    pub is_treated: bool,
}

/// Treated unit and every placebo with a defined ratio, descending; placebos
/// tied with the treated unit sort ahead of it. `None` when the treated ratio
/// is undefined.
pub fn ratio_ranking(ps: &PlaceboSet) -> Option<Vec<RankRow>> {
    if !ps.treated_entry.ratio_defined {
        return None;
    }
    let mut rows: Vec<RankRow> = ps
        .fitted()
        .filter(|(_, e)| e.ratio_defined)
        .map(|(u, e)| RankRow {
            unit: u.to_string(),
            rmspe_ratio: e.rmspe_ratio,
            is_treated: false,
        })
        .collect();
    rows.push(RankRow {
        unit: ps.treated.clone(),
        rmspe_ratio: ps.treated_entry.rmspe_ratio,
        is_treated: true,
    });
    rows.sort_by(|a, b| {
        b.rmspe_ratio
            .total_cmp(&a.rmspe_ratio)
            .then(a.is_treated.cmp(&b.is_treated))
            .then_with(|| a.unit.cmp(&b.unit))
    });
    Some(rows)
}

/// `rank,unit,rmspe_ratio,is_treated`
pub fn write_ratio_ranking_csv<W: Write>(out: W, rows: &[RankRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "unit", "rmspe_ratio", "is_treated"])?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([(i + 1).to_string(), r.unit.clone(), r.rmspe_ratio.to_string(), r.is_treated.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str, written: &mut Vec<PathBuf>) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path)?;
    written.push(path);
    Ok(BufWriter::new(f))
}

/// Writes the data files for `a` into `dir`. Returns the paths written.
pub fn write_data_files(a: &Analysis, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let study = &a.study;
    write_weights_csv(create(dir, "weights.csv", &mut written)?, study, a.fit.weights.as_slice())?;
    write_gaps_csv(create(dir, "gaps.csv", &mut written)?, study, &a.effects)?;
    write_trajectory_csv(create(dir, "trajectory.csv", &mut written)?, study, &a.effects)?;
    match &a.inference {
        Some(inf) => {
            write_placebos_csv(create(dir, "placebos.csv", &mut written)?, &inf.placebos)?;
            write_placebo_gaps_csv(create(dir, "placebo_gaps.csv", &mut written)?, study, &inf.placebos)?;
            write_placebo_gaps_csv(create(dir, "placebo_gaps_filtered.csv", &mut written)?, study, &inf.filtered)?;
            match ratio_ranking(&inf.placebos) {
                Some(rows) => write_ratio_ranking_csv(create(dir, "ratio_ranking.csv", &mut written)?, &rows)?,
                None => log::warn!("treated RMSPE ratio undefined; ratio_ranking.csv not written"),
            }
        }
        None => log::warn!("placebos not run; placebo figure data skipped"),
    }
    if let Some(loo) = &a.loo {
        write_loo_csv(create(dir, "loo.csv", &mut written)?, loo)?;
    }
    if let Some(sweep) = &a.alpha_sweep {
        write_alpha_sweep_csv(create(dir, "alpha_sweep.csv", &mut written)?, sweep)?;
    }
    Ok(written)
}

/// Writes `report.json` plus every data file.
pub fn write_outputs(a: &Analysis, report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = write_data_files(a, dir)?;
    let mut f = create(dir, "report.json", &mut written)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(written)
}
