//! Acc/CR/SS panels with strategies as rows and datasets as columns, in
//! CSV and aligned text, plus deltas between two runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use uragc_engine::evaluation::{ProtocolKind, RunReport, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Panel {
    Acc,
    Cr,
    Ss,
}

impl Panel {
    pub const ALL: [Panel; 3] = [Panel::Acc, Panel::Cr, Panel::Ss];

    pub fn name(self) -> &'static str {
        match self {
            Panel::Acc => "Acc",
            Panel::Cr => "CR",
            Panel::Ss => "SS",
        }
    }

    pub fn parse(s: &str) -> Option<Panel> {
        Panel::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub panel: Panel,
    pub row: String,
    pub dataset: String,
    pub value: f64,
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    let version: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("report {} is not JSON", path.display()))?;
    match version.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(v) => bail!("report {}: schema version {v}, expected {SCHEMA_VERSION}", path.display()),
        None => bail!("report {}: missing schema_version", path.display()),
    }
    serde_json::from_value(version).with_context(|| format!("report {} is malformed", path.display()))
}

pub fn row_label(r: &RunReport) -> String {
    match r.metadata.protocol {
        ProtocolKind::Normal => r.metadata.strategy_label.clone(),
        p => format!("{} [{}]", r.metadata.strategy_label, p.name()),
    }
}

pub fn dataset_label(r: &RunReport) -> String {
    r.metadata.datasets.join("+")
}

/// Headline values of every report; later reports win on duplicate cells.
pub fn cells(reports: &[RunReport]) -> Vec<Cell> {
    let mut map: BTreeMap<(Panel, String, String), f64> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in reports {
        let row = row_label(r);
        if !order.contains(&row) {
            order.push(row.clone());
        }
        let ds = dataset_label(r);
        let h = &r.headline;
        for (panel, v) in [(Panel::Acc, h.acc), (Panel::Cr, h.cr), (Panel::Ss, h.ss)] {
            map.insert((panel, row.clone(), ds.clone()), v);
        }
    }
    let mut out = Vec::new();
    for panel in Panel::ALL {
        for row in &order {
            for ((p, r, d), v) in &map {
                if *p == panel && r == row {
                    out.push(Cell {
                        panel,
                        row: row.clone(),
                        dataset: d.clone(),
                        value: *v,
                    });
                }
            }
        }
    }
    out
}

fn datasets(cells: &[Cell]) -> Vec<String> {
    cells.iter().map(|c| c.dataset.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn rows(cells: &[Cell], panel: Panel) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in cells.iter().filter(|c| c.panel == panel) {
        if !out.contains(&c.row) {
            out.push(c.row.clone());
        }
    }
    out
}

fn lookup(cells: &[Cell], panel: Panel, row: &str, ds: &str) -> Option<f64> {
    cells
        .iter()
        .find(|c| c.panel == panel && c.row == row && c.dataset == ds)
        .map(|c| c.value)
}

/// Wide CSV: `panel,strategy,<dataset>...`, values at full precision.
pub fn render_csv(cells: &[Cell]) -> Result<String> {
    let ds = datasets(cells);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["panel".to_string(), "strategy".to_string()];
    header.extend(ds.iter().cloned());
    w.write_record(&header)?;
    for panel in Panel::ALL {
        for row in rows(cells, panel) {
            let mut rec = vec![panel.name().to_string(), row.clone()];
            rec.extend(
                ds.iter()
                    .map(|d| lookup(cells, panel, &row, d).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn parse_csv(text: &str) -> Result<Vec<Cell>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "panel" || &header[1] != "strategy" {
        bail!("table header must start with panel,strategy");
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let panel = Panel::parse(&rec[0]).with_context(|| format!("line {}: unknown panel {:?}", i + 2, &rec[0]))?;
        for (j, field) in rec.iter().enumerate().skip(2) {
            if field.is_empty() {
                continue;
            }
            out.push(Cell {
                panel,
                row: rec[1].to_string(),
                dataset: header[j].to_string(),
                value: field.parse().with_context(|| format!("line {}: bad value {field:?}", i + 2))?,
            });
        }
    }
    Ok(out)
}

fn fmt_value(panel: Panel, v: f64) -> String {
    match panel {
        Panel::Ss => format!("{v:.2}"),
        _ => format!("{:.2}", 100.0 * v),
    }
}

fn aligned(title: &str, head: &[String], body: &[Vec<String>]) -> String {
    let cols = head.len();
    let width: Vec<usize> = (0..cols)
        .map(|j| body.iter().map(|r| r[j].len()).chain([head[j].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = width[j]) } else { format!("{c:>w$}", w = width[j]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut s = format!("{title}\n{}\n", line(head));
    s.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    s.push('\n');
    for r in body {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

/// Three panels; Acc and CR in percent.
pub fn render_text(cells: &[Cell]) -> String {
    let ds = datasets(cells);
    let mut out = String::new();
    for panel in Panel::ALL {
        let mut head = vec!["Strategy".to_string()];
        head.extend(ds.iter().cloned());
        let body: Vec<Vec<String>> = rows(cells, panel)
            .into_iter()
            .map(|row| {
                let mut r = vec![row.clone()];
                r.extend(ds.iter().map(|d| {
                    lookup(cells, panel, &row, d)
                        .map(|v| fmt_value(panel, v))
                        .unwrap_or_else(|| "-".into())
                }));
                r
            })
            .collect();
        let title = match panel {
            Panel::Acc => "Accuracy (%)",
            Panel::Cr => "Coverage rate (%)",
            Panel::Ss => "Set size",
        };
        out.push_str(&aligned(title, &head, &body));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub strategy: String,
    pub dataset: String,
    pub base: String,
    pub other: String,
    pub acc: f64,
    pub cr: f64,
    pub ss: f64,
}

/// `other − base` for every strategy/dataset pair present in both groups.
pub fn deltas(base: &[RunReport], other: &[RunReport]) -> Vec<Delta> {
    let mut out = Vec::new();
    for b in base {
        for o in other {
            if b.metadata.strategy != o.metadata.strategy || dataset_label(b) != dataset_label(o) {
                continue;
            }
            out.push(Delta {
                strategy: b.metadata.strategy_label.clone(),
                dataset: dataset_label(b),
                base: b.metadata.protocol.name().to_string(),
                other: o.metadata.protocol.name().to_string(),
                acc: o.headline.acc - b.headline.acc,
                cr: o.headline.cr - b.headline.cr,
                ss: o.headline.ss - b.headline.ss,
            });
        }
    }
    out
}

pub fn render_delta_csv(ds: &[Delta]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "dataset", "base", "other", "delta_acc", "delta_cr", "delta_ss"])?;
    for d in ds {
        w.write_record([
            d.strategy.clone(),
            d.dataset.clone(),
            d.base.clone(),
            d.other.clone(),
            d.acc.to_string(),
            d.cr.to_string(),
            d.ss.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn render_delta_text(ds: &[Delta]) -> String {
    let head: Vec<String> = ["Strategy", "Dataset", "Change", "dAcc (%)", "dCR (%)", "dSS"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = ds
        .iter()
        .map(|d| {
            vec![
                d.strategy.clone(),
                d.dataset.clone(),
                format!("{} -> {}", d.base, d.other),
                format!("{:+.2}", 100.0 * d.acc),
                format!("{:+.2}", 100.0 * d.cr),
                format!("{:+.2}", d.ss),
            ]
        })
        .collect();
    aligned("Differences", &head, &body)
}

/// Human-readable summary of one run.
pub fn summary(r: &RunReport) -> String {
    let m = &r.metadata;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} / {} on {} (k={}, alpha={}, {} calibration, {} test)",
        m.strategy_label,
        m.protocol.name(),
        dataset_label(r),
        m.k,
        m.alpha,
        m.n_calibration,
        m.n_test
    );
    for a in &r.aggregates {
        let _ = writeln!(
            s,
            "  {:<4} acc {:6.2}%  cr {:6.2}%  ss {:.3}  (n={})",
            a.method.name(),
            100.0 * a.acc,
            100.0 * a.cr,
            a.ss,
            a.n
        );
    }
    let h = &r.headline;
    let _ = writeln!(s, "  mean acc {:6.2}%  cr {:6.2}%  ss {:.3}", 100.0 * h.acc, 100.0 * h.cr, h.ss);
    for sub in &r.subsets {
        if let Some(h) = &sub.headline {
            let _ = writeln!(
                s,
                "  subset {:<14} acc {:6.2}%  cr {:6.2}%  ss {:.3}  (n={})",
                sub.name,
                100.0 * h.acc,
                100.0 * h.cr,
                h.ss,
                h.n
            );
        }
    }
    let q = &r.quality;
    if !q.excluded.is_empty() || !q.failures.is_empty() {
        let _ = writeln!(s, "  excluded {}  failed {}", q.excluded.len(), q.failures.len());
    }
    for w in &m.watermarks {
        let _ = writeln!(s, "  note: {w}");
    }
    for c in r.invariants.iter().filter(|c| !c.passed) {
        let _ = writeln!(s, "  INVARIANT FAILED {}: {}", c.name, c.detail);
    }
    s
}
