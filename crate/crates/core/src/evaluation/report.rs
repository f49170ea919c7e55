//! Recognition and probe tables, as CSV and as aligned text.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::models::GrlConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub tap: usize,
    pub accuracy: f64,
}

/// Everything measured for one trained recognizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub grl: Option<GrlConfig>,
    pub ter_dev: f64,
    pub ter_test: f64,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub recognition_csv: String,
    pub recognition_text: String,
    pub probe_csv: String,
    pub probe_text: String,
}

fn grl_cells(grl: &Option<GrlConfig>) -> (String, String) {
    match grl {
        Some(g) => (g.tap_layer.to_string(), format!("{}/{}", g.alpha, g.lambda)),
        None => ("-".into(), "-".into()),
    }
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            write!(s, "{c:<w$}").expect("writing to a String");
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&line(
        widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// A recognition grid (model, GRL layer, α/λ, TER per split) and a probe
/// grid (model, GRL layer, α/λ, tap, probe accuracy), one row per run and
/// per run and tap respectively.
pub fn make_report(runs: &[RunResult]) -> Report {
    let rec_header = ["Model", "GRL", "α/λ", "TER-dev", "TER-test"];
    let rec_rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let (layer, al) = grl_cells(&r.grl);
            vec![
                r.name.clone(),
                layer,
                al,
                format!("{:.4}", r.ter_dev),
                format!("{:.4}", r.ter_test),
            ]
        })
        .collect();
    let probe_header = ["Model", "GRL", "α/λ", "AE", "SPK-ACC"];
    let probe_rows: Vec<Vec<String>> = runs
        .iter()
        .flat_map(|r| {
            let (layer, al) = grl_cells(&r.grl);
            r.probes.iter().map(move |p| {
                vec![
                    r.name.clone(),
                    layer.clone(),
                    al.clone(),
                    p.tap.to_string(),
                    format!("{:.4}", p.accuracy),
                ]
            })
        })
        .collect();
    Report {
        recognition_csv: csv(&rec_header, &rec_rows),
        recognition_text: aligned(&rec_header, &rec_rows),
        probe_csv: csv(&probe_header, &probe_rows),
        probe_text: aligned(&probe_header, &probe_rows),
    }
}
