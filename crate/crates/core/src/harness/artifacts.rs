//! Files written into a run directory.
//!
//! `sweeps.csv` has one row per period update with columns
//! `sweep,period,accepted,eval_mean,eval_se,seconds`; `plot.csv` has one
//! row per sweep (sweep 0 is the initial policy) with columns
//! `sweep,objective,se` followed by the problem's tracked scalars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::mmcc::SweepReport;

pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEPS_FILE: &str = "sweeps.csv";
pub const PLOT_FILE: &str = "plot.csv";
pub const PLOT_SVG: &str = "objective.svg";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.json";
pub const ORACLE_FILE: &str = "oracle.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.json";

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
    let path = dir.join(name);
    // Write then rename, so an interrupted run never leaves half a file.
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}

pub(crate) fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>, HarnessError> {
    let path = dir.join(name);
    fs::read(&path).map_err(io_err(&path))
}

pub(crate) fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

/// Sign applied to internal (maximized) objectives for display.
pub(crate) fn display(minimizes: bool, v: f64) -> f64 {
    if minimizes {
        -v
    } else {
        v
    }
}

fn csv_bytes(rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    rows(&mut w).expect("in-memory csv");
    w.into_inner().expect("in-memory csv")
}

pub(crate) fn sweeps_csv(reports: &[SweepReport], minimizes: bool) -> Vec<u8> {
    csv_bytes(|w| {
        w.write_record(["sweep", "period", "accepted", "eval_mean", "eval_se", "seconds"])?;
        for r in reports {
            for u in &r.updates {
                w.write_record([
                    r.sweep.to_string(),
                    u.period.to_string(),
                    u.accepted.to_string(),
                    display(minimizes, u.eval_mean).to_string(),
                    u.eval_se.map(|s| s.to_string()).unwrap_or_default(),
                    format!("{:.3}", u.seconds),
                ])?;
            }
        }
        Ok(())
    })
}

/// One point of the objective-versus-sweep curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sweep: usize,
    pub objective: f64,
    pub se: Option<f64>,
    pub tracked: Vec<(String, f64)>,
}

pub(crate) fn plot_csv(points: &[CurvePoint]) -> Vec<u8> {
    csv_bytes(|w| {
        let mut header = vec!["sweep".to_string(), "objective".into(), "se".into()];
        if let Some(p) = points.first() {
            header.extend(p.tracked.iter().map(|(k, _)| k.clone()));
        }
        w.write_record(&header)?;
        for p in points {
            let mut row = vec![
                p.sweep.to_string(),
                p.objective.to_string(),
                p.se.map(|s| s.to_string()).unwrap_or_default(),
            ];
            row.extend(p.tracked.iter().map(|(_, v)| v.to_string()));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Static line chart of the objective with a +-2 SE band.
pub(crate) fn plot_svg(points: &[CurvePoint], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let lo = points
        .iter()
        .map(|p| p.objective - 2.0 * p.se.unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .map(|p| p.objective + 2.0 * p.se.unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo > 1e-300 {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    };
    let last = points.last().map(|p| p.sweep).unwrap_or(0).max(1) as f64;
    let x = |s: usize| pad + (w - 2.0 * pad) * s as f64 / last;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let line = |f: &dyn Fn(&CurvePoint) -> f64| {
        points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.sweep), y(f(p))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">sweep</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.6e}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.6e}</text>\n",
        w / 2.0,
        h - pad,
        w - pad,
        h - pad,
        h - pad,
        w / 2.0,
        h - pad / 3.0,
        pad - 4.0,
        pad + 4.0,
        pad - 4.0,
        h - pad,
    );
    svg += &format!(
        "<polyline fill=\"none\" stroke=\"#9ab\" stroke-dasharray=\"4 3\" points=\"{}\"/>\n",
        line(&|p| p.objective + 2.0 * p.se.unwrap_or(0.0))
    );
    svg += &format!(
        "<polyline fill=\"none\" stroke=\"#9ab\" stroke-dasharray=\"4 3\" points=\"{}\"/>\n",
        line(&|p| p.objective - 2.0 * p.se.unwrap_or(0.0))
    );
    svg += &format!(
        "<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"2\" points=\"{}\"/>\n",
        line(&|p| p.objective)
    );
    for p in points {
        svg += &format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f4e9c\"/>\n<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x(p.sweep),
            y(p.objective),
            x(p.sweep),
            h - pad + 16.0,
            p.sweep
        );
    }
    svg += "</svg>\n";
    svg
}
