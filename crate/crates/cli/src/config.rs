//! Command-line flags merged over an optional flat `key = value` config file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, ValueEnum};

use scm_core::panel::{Format, Layout, Period};
use scm_core::{AnalysisConfig, LooMode, SolverOptions, StudySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LooArg {
    Top,
    All,
    None,
}

impl FromStr for LooArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <LooArg as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Wide,
    Long,
}

impl FromStr for FormatArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <FormatArg as ValueEnum>::from_str(s, true)
    }
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Wide => Format::Wide,
            FormatArg::Long => Format::Long,
        }
    }
}

/// Synthetic control estimate with placebo inference and robustness checks.
///
/// Every option can also be given in the --config file as `key = value`
/// (key = flag name without dashes, `-` or `_` separators). Flags win.
#[derive(Debug, Parser)]
#[command(name = "scm", version, about)]
pub struct Args {
    /// Panel CSV (wide: one row per unit, one column per month).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Column holding unit labels.
    #[arg(long)]
    pub region_column: Option<String>,
    /// Input layout.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Long layout: period column.
    #[arg(long)]
    pub period_column: Option<String>,
    /// Long layout: value column.
    #[arg(long)]
    pub value_column: Option<String>,
    /// Keep only rows with COLUMN=VALUE (repeatable).
    #[arg(long = "row-filter", value_name = "COLUMN=VALUE")]
    pub row_filter: Vec<String>,
    /// Treated unit label.
    #[arg(long)]
    pub treated: Option<String>,
    /// Last pre-treatment month, YYYY-MM.
    #[arg(long)]
    pub intervention: Option<Period>,
    /// First pre-treatment month, YYYY-MM.
    #[arg(long)]
    pub pre_start: Option<Period>,
    /// Last post-treatment month, YYYY-MM.
    #[arg(long)]
    pub post_end: Option<Period>,
    /// Per-month decay rate of the pre-treatment loss weights [default: 0.005].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Drop donors whose pre-window correlation with the treated unit is lower.
    #[arg(long)]
    pub min_pre_correlation: Option<f64>,
    /// Comma-separated candidate donors (default: every other unit).
    #[arg(long, value_delimiter = ',')]
    pub donors: Option<Vec<String>>,
    /// File with one candidate donor per line.
    #[arg(long)]
    pub donors_file: Option<PathBuf>,
    /// Run placebo-in-space inference (default).
    #[arg(long, overrides_with = "no_placebos")]
    pub placebos: bool,
    /// Skip placebo inference.
    #[arg(long, overrides_with = "placebos")]
    pub no_placebos: bool,
    /// Keep placebos with pre RMSPE at most this multiple of the treated unit's [default: 2].
    #[arg(long)]
    pub placebo_filter_multiplier: Option<f64>,
    /// Leave-one-out target [default: top].
    #[arg(long, value_enum)]
    pub loo: Option<LooArg>,
    /// Weight threshold for --loo all [default: 0.05].
    #[arg(long)]
    pub loo_threshold: Option<f64>,
    /// Comma-separated decay rates, or `none` [default: 0.003,0.005,0.01].
    #[arg(long)]
    pub alpha_sweep: Option<String>,
    /// Rerun placebos for every swept alpha.
    #[arg(long)]
    pub sweep_placebos: bool,
    /// Worker threads for placebo and leave-one-out fits [default: 1].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Solver relative-decrease tolerance [default: 1e-12].
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Solver iteration cap [default: 100000].
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Output directory [default: scm-out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the loaded panel as out/panel.csv.
    #[arg(long, value_enum)]
    pub export_panel: Option<FormatArg>,
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Do not print the summary.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug)]
pub struct Settings {
    pub data: PathBuf,
    pub layout: Layout,
    pub out: PathBuf,
    pub export_panel: Option<Format>,
    pub quiet: bool,
    pub analysis: AnalysisConfig,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let key = k.trim().replace('-', "_");
        let val = v.trim().trim_matches('"').to_string();
        if map.insert(key.clone(), val).is_some() {
            return Err(format!("config line {}: duplicate key {key:?}", i + 1));
        }
    }
    Ok(map)
}

struct Merge {
    cfg: BTreeMap<String, String>,
}

impl Merge {
    fn take<T>(&mut self, cli: Option<T>, key: &str) -> Result<Option<T>, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_cfg = self.cfg.remove(key);
        if cli.is_some() {
            return Ok(cli);
        }
        from_cfg
            .map(|v| v.parse::<T>().map_err(|e| format!("config key {key}: {e}")))
            .transpose()
    }

    fn flag(&mut self, cli: bool, key: &str) -> Result<bool, String> {
        Ok(self.take(cli.then_some(true), key)?.unwrap_or(false))
    }
}

fn parse_alpha_list(s: &str) -> Result<Vec<f64>, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| format!("alpha sweep value {x:?}: {e}"))
        })
        .collect()
}

impl Settings {
    pub fn resolve(args: Args) -> Result<Settings, String> {
        let cfg = match &args.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        let mut m = Merge { cfg };

        let data = m
            .take(args.data, "data")?
            .ok_or("missing required --data")?;
        let treated = m
            .take(args.treated, "treated")?
            .ok_or("missing required --treated")?;
        let intervention = m
            .take(args.intervention, "intervention")?
            .ok_or("missing required --intervention")?;
        let pre_start = m
            .take(args.pre_start, "pre_start")?
            .ok_or("missing required --pre-start")?;
        let post_end = m
            .take(args.post_end, "post_end")?
            .ok_or("missing required --post-end")?;

        let mut layout = Layout::default();
        if let Some(c) = m.take(args.region_column, "region_column")? {
            layout.region_column = c;
        }
        if let Some(f) = m.take(args.format, "format")? {
            layout.format = f.into();
        }
        if let Some(c) = m.take(args.period_column, "period_column")? {
            layout.period_column = c;
        }
        if let Some(c) = m.take(args.value_column, "value_column")? {
            layout.value_column = c;
        }
        let mut filters = args.row_filter;
        if filters.is_empty() {
            if let Some(f) = m.cfg.remove("row_filter") {
                filters = f.split(';').map(str::to_string).collect();
            }
        } else {
            m.cfg.remove("row_filter");
        }
        for f in filters {
            let (c, v) = f
                .split_once('=')
                .ok_or_else(|| format!("--row-filter {f:?}: expected COLUMN=VALUE"))?;
            layout.row_filters.push((c.trim().to_string(), v.trim().to_string()));
        }

        let mut spec = StudySpec::new(treated, pre_start, intervention, post_end);
        if let Some(a) = m.take(args.alpha, "alpha")? {
            spec.alpha = a;
        }
        spec.donor_screen.min_pre_correlation = m.take(args.min_pre_correlation, "min_pre_correlation")?;
        let donors_inline = match args.donors {
            Some(d) => {
                m.cfg.remove("donors");
                Some(d)
            }
            None => m
                .cfg
                .remove("donors")
                .map(|s| s.split(',').map(|x| x.trim().to_string()).collect()),
        };
        let donors_file: Option<PathBuf> = m.take(args.donors_file, "donors_file")?;
        spec.candidate_donors = match (donors_inline, donors_file) {
            (Some(_), Some(_)) => return Err("give --donors or --donors-file, not both".into()),
            (Some(d), None) => Some(d),
            (None, Some(p)) => {
                let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                Some(
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(str::to_string)
                        .collect(),
                )
            }
            (None, None) => None,
        };
        spec.validate().map_err(|e| e.to_string())?;

        let mut analysis = AnalysisConfig::new(spec);
        let mut solver = SolverOptions::default();
        if let Some(t) = m.take(args.tolerance, "tolerance")? {
            solver.tolerance = t;
        }
        if let Some(n) = m.take(args.max_iterations, "max_iterations")? {
            solver.max_iterations = n;
        }
        analysis.solver = solver;

        let placebos_cli = if args.no_placebos {
            Some(false)
        } else if args.placebos {
            Some(true)
        } else {
            None
        };
        m.cfg.remove("no_placebos").map_or(Ok(()), |v| {
            v.parse::<bool>()
                .map(|b| {
                    if b {
                        m.cfg.insert("placebos".into(), "false".into());
                    }
                })
                .map_err(|e| format!("config key no_placebos: {e}"))
        })?;
        analysis.placebos = m.take(placebos_cli, "placebos")?.unwrap_or(true);
        if let Some(x) = m.take(args.placebo_filter_multiplier, "placebo_filter_multiplier")? {
            if !(x > 0.0) {
                return Err(format!("--placebo-filter-multiplier must be > 0, got {x}"));
            }
            analysis.placebo_filter_multiplier = x;
        }
        let threshold = m.take(args.loo_threshold, "loo_threshold")?.unwrap_or(0.05);
        analysis.loo = match m.take(args.loo, "loo")?.unwrap_or(LooArg::Top) {
            LooArg::Top => LooMode::Top,
            LooArg::All => LooMode::All { threshold },
            LooArg::None => LooMode::None,
        };
        if let Some(list) = m.take(args.alpha_sweep, "alpha_sweep")? {
            analysis.alpha_sweep = parse_alpha_list(&list)?;
        }
        analysis.sweep_placebos = m.flag(args.sweep_placebos, "sweep_placebos")?;
        analysis.workers = m.take(args.workers, "workers")?.unwrap_or(1).max(1);

        let out = m.take(args.out, "out")?.unwrap_or_else(|| PathBuf::from("scm-out"));
        let export_panel = m.take(args.export_panel, "export_panel")?.map(Format::from);
        let quiet = m.flag(args.quiet, "quiet")?;

        if let Some(k) = m.cfg.keys().next() {
            return Err(format!("unknown config key {k:?}"));
        }
        Ok(Settings {
            data,
            layout,
            out,
            export_panel,
            quiet,
            analysis,
        })
    }
}
