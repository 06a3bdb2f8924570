//! `scm`: synthetic control study runner.

mod config;

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use scm_core::panel::{load_panel, write_long, write_wide, Format};
use scm_core::report::{build_report, digest, render_text, write_outputs};
use scm_core::run_analysis;

use config::{Args, Settings};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let settings = match Settings::resolve(args) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            return ExitCode::from(2);
        }
    };
    match run(&settings) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(s: &Settings) -> Result<(), Box<dyn std::error::Error>> {
    let open = |p: &PathBuf| File::open(p).map_err(|e| format!("{}: {e}", p.display()));
    let panel = load_panel(BufReader::new(open(&s.data)?), &s.layout)
        .map_err(|e| format!("{}: {e}", s.data.display()))?;
    let sha = digest(BufReader::new(open(&s.data)?))?;
    log::info!("loaded {} units x {} periods", panel.n_units(), panel.n_periods());

    std::fs::create_dir_all(&s.out)?;
    if let Some(fmt) = s.export_panel {
        let f = File::create(s.out.join("panel.csv"))?;
        match fmt {
            Format::Wide => write_wide(&panel, f, &s.layout.region_column)?,
            Format::Long => write_long(&panel, f, &s.layout)?,
        }
    }

    let analysis = run_analysis(&panel, &s.analysis)?;
    let report = build_report(&analysis, Some(sha));
    let written = write_outputs(&analysis, &report, &s.out)?;
    if !s.quiet {
        print!("{}", render_text(&report));
        println!();
        for p in written {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
