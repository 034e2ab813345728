//! Markdown/CSV tables and SVG plots built from the results store.
//!
//! Per column, the best value is bold and the second best underlined
//! (lower MRE, higher SDR). A tie for best bolds every tied cell and
//! underlines nothing. Values are compared as displayed, to two decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use lmbench_core::datasets::DatasetSpec;
use lmbench_core::eval::{threshold_label, EvalSpace, MetricsReport, Unit};
use lmbench_core::models::{Architecture, EncoderKind};
use lmbench_core::transfer::ChainStart;

use crate::store::{ResultRow, RunKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Template {
    Table1,
    Table2,
    Table3,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Table1 => "table1",
            Template::Table2 => "table2",
            Template::Table3 => "table3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    None,
    Bold,
    Underline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub group: String,
    pub label: String,
    pub better: Better,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cell {
    pub value: Option<f64>,
    pub std: Option<f64>,
    pub run_id: Option<String>,
}

impl Cell {
    fn from_row(value: f64, std: Option<f64>, row: &ResultRow) -> Self {
        Self {
            value: Some(value),
            std,
            run_id: Some(row.run_id.clone()),
        }
    }

    fn text(&self) -> String {
        match (self.value, self.std) {
            (None, _) => "-".to_string(),
            (Some(v), None) => format!("{v:.2}"),
            (Some(v), Some(s)) => format!("{v:.2} ± {s:.2}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub labels: Vec<String>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub caption: String,
    pub label_headers: Vec<String>,
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
}

fn rounded(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

/// Bold/underline marks for one column.
pub fn rank_marks(values: &[Option<f64>], better: Better) -> Vec<Mark> {
    let key = |v: f64| match better {
        Better::Lower => rounded(v),
        Better::Higher => -rounded(v),
    };
    let mut distinct: Vec<i64> = values.iter().flatten().map(|v| key(*v)).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let Some(&best) = distinct.first() else {
        return vec![Mark::None; values.len()];
    };
    let best_count = values.iter().flatten().filter(|v| key(**v) == best).count();
    let second = if best_count == 1 { distinct.get(1).copied() } else { None };
    values
        .iter()
        .map(|v| match v.map(key) {
            Some(k) if k == best => Mark::Bold,
            Some(k) if Some(k) == second => Mark::Underline,
            _ => Mark::None,
        })
        .collect()
}

impl Table {
    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(|r| r.cells.iter().all(|c| c.value.is_none()))
    }

    fn marks(&self) -> Vec<Vec<Mark>> {
        let per_column: Vec<Vec<Mark>> = (0..self.columns.len())
            .map(|c| {
                let values: Vec<Option<f64>> = self.rows.iter().map(|r| r.cells[c].value).collect();
                rank_marks(&values, self.columns[c].better)
            })
            .collect();
        (0..self.rows.len())
            .map(|r| per_column.iter().map(|col| col[r]).collect())
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "### {}\n", self.caption);
        let headers: Vec<String> = self
            .label_headers
            .iter()
            .cloned()
            .chain(self.columns.iter().map(|c| {
                let arrow = match c.better {
                    Better::Lower => "↓",
                    Better::Higher => "↑",
                };
                if c.group.is_empty() {
                    format!("{} {arrow}", c.label)
                } else {
                    format!("{} {} {arrow}", c.group, c.label)
                }
            }))
            .collect();
        let _ = writeln!(out, "| {} |", headers.join(" | "));
        let rule: Vec<&str> = self
            .label_headers
            .iter()
            .map(|_| ":--")
            .chain(self.columns.iter().map(|_| ":-:"))
            .collect();
        let _ = writeln!(out, "| {} |", rule.join(" | "));
        for (row, marks) in self.rows.iter().zip(self.marks()) {
            let mut cells: Vec<String> = row.labels.clone();
            for (cell, mark) in row.cells.iter().zip(marks) {
                let text = cell.text();
                let mut s = match mark {
                    Mark::Bold => format!("**{text}**"),
                    Mark::Underline => format!("<u>{text}</u>"),
                    Mark::None => text,
                };
                if let Some(id) = &cell.run_id {
                    let _ = write!(s, " <!-- run:{id} -->");
                }
                cells.push(s);
            }
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    /// Long format: one line per cell.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(["table", "row", "group", "column", "value", "std", "run_id"]);
        for row in &self.rows {
            let label = row.labels.join(" / ");
            for (col, cell) in self.columns.iter().zip(&row.cells) {
                let _ = w.write_record([
                    self.name.as_str(),
                    label.as_str(),
                    col.group.as_str(),
                    col.label.as_str(),
                    &cell.value.map(|v| v.to_string()).unwrap_or_default(),
                    &cell.std.map(|v| v.to_string()).unwrap_or_default(),
                    cell.run_id.as_deref().unwrap_or(""),
                ]);
            }
        }
        String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default()
    }
}

fn unit_suffix(unit: Unit) -> &'static str {
    match unit {
        Unit::Px => "px",
        Unit::Mm => "mm",
    }
}

fn metric_columns(group: &str, unit: Unit, thresholds: &[f64]) -> Vec<Column> {
    let mut cols = vec![Column {
        group: group.to_string(),
        label: format!("MRE ({})", unit_suffix(unit)),
        better: Better::Lower,
    }];
    cols.extend(thresholds.iter().map(|t| Column {
        group: group.to_string(),
        label: format!("SDR {}", threshold_label(*t, unit)),
        better: Better::Higher,
    }));
    cols
}

fn metric_cells(row: Option<&ResultRow>, thresholds: &[f64], with_std: bool) -> Vec<Cell> {
    let Some(row) = row else {
        return vec![Cell::default(); thresholds.len() + 1];
    };
    let m: &MetricsReport = &row.metrics;
    let std = |s: Option<f64>| if with_std { s } else { None };
    let mut cells = vec![Cell::from_row(m.mre, std(m.mre_std), row)];
    for t in thresholds {
        let sdr = m.sdr.iter().find(|s| (s.threshold - t).abs() < 1e-9);
        cells.push(match sdr {
            Some(s) => Cell::from_row(s.rate, std(s.std), row),
            None => Cell::default(),
        });
    }
    cells
}

fn latest<'a>(rows: impl Iterator<Item = &'a ResultRow>) -> Option<&'a ResultRow> {
    rows.max_by_key(|r| r.finished_unix)
}

fn thresholds_for(dataset: &str, rows: &[&ResultRow]) -> (Unit, Vec<f64>) {
    if let Some(r) = rows.iter().find(|r| r.dataset == dataset) {
        return (r.metrics.unit, r.metrics.sdr.iter().map(|s| s.threshold).collect());
    }
    match DatasetSpec::builtin(dataset) {
        Some(spec) => (spec.metric_unit(), spec.sdr_thresholds.clone()),
        None => (Unit::Px, Vec::new()),
    }
}

fn title(name: &str) -> String {
    let mut c = name.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Architecture by encoder grid of cross-validated results on `dataset`.
pub fn table1(rows: &[ResultRow], dataset: &str) -> Table {
    let relevant: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.kind == RunKind::Crossval && r.dataset == dataset)
        .collect();
    let (unit, thresholds) = thresholds_for(dataset, &relevant);
    let mut out_rows = Vec::new();
    for arch in Architecture::ALL {
        for enc in EncoderKind::ALL {
            let row = latest(
                relevant
                    .iter()
                    .copied()
                    .filter(|r| r.architecture == arch && r.encoder == enc),
            );
            out_rows.push(Row {
                labels: vec![arch.display_name().to_string(), enc.name().to_string()],
                cells: metric_cells(row, &thresholds, true),
            });
        }
    }
    Table {
        name: "table1".into(),
        caption: format!(
            "Architectures and encoder backbones on {} ({}-fold cross-validation means)",
            title(dataset),
            relevant.first().map(|_| "k").unwrap_or("k")
        ),
        label_headers: vec!["Model".into(), "Backbone".into()],
        columns: metric_columns(&title(dataset), unit, &thresholds),
        rows: out_rows,
    }
}

pub const TARGETS: [&str; 3] = ["chest", "head", "hand"];

/// Intermediate-stage sequences in display order.
fn chain_prefixes() -> Vec<Vec<&'static str>> {
    let mut out = vec![vec![]];
    out.extend(TARGETS.iter().map(|t| vec![*t]));
    for a in TARGETS {
        for b in TARGETS {
            if a != b {
                out.push(vec![a, b]);
            }
        }
    }
    out
}

fn chain_label(start: ChainStart, stages: &[&str]) -> String {
    let start = match start {
        ChainStart::Imagenet => "Imagenet",
        ChainStart::Scratch => "Scratch",
    };
    std::iter::once(start.to_string())
        .chain(stages.iter().map(|s| title(s)))
        .collect::<Vec<_>>()
        .join(" → ")
}

fn chain_rows(rows: &[ResultRow]) -> (ChainStart, Vec<&ResultRow>) {
    let chains: Vec<&ResultRow> = rows.iter().filter(|r| r.kind == RunKind::Chain).collect();
    let start = if chains.iter().any(|r| r.chain_start == Some(ChainStart::Imagenet)) || chains.is_empty() {
        ChainStart::Imagenet
    } else {
        ChainStart::Scratch
    };
    (start, chains.into_iter().filter(|r| r.chain_start == Some(start)).collect())
}

/// Transfer chains: one row per intermediate sequence, one column group
/// per target.
pub fn table2(rows: &[ResultRow]) -> Table {
    let (start, chains) = chain_rows(rows);
    let groups: Vec<(&str, Unit, Vec<f64>)> = TARGETS
        .iter()
        .map(|t| {
            let (u, th) = thresholds_for(t, &chains);
            (*t, u, th)
        })
        .collect();
    let mut columns = Vec::new();
    for (t, u, th) in &groups {
        columns.extend(metric_columns(&format!("→{}", title(t)), *u, th));
    }
    let out_rows = chain_prefixes()
        .into_iter()
        .map(|prefix| {
            let mut cells = Vec::new();
            for (t, _, th) in &groups {
                let row = if prefix.contains(t) {
                    None
                } else {
                    latest(chains.iter().copied().filter(|r| {
                        r.dataset == *t && r.intermediate_stages().iter().map(String::as_str).eq(prefix.iter().copied())
                    }))
                };
                cells.extend(metric_cells(row, th, false));
            }
            Row {
                labels: vec![chain_label(start, &prefix)],
                cells,
            }
        })
        .collect();
    Table {
        name: "table2".into(),
        caption: "Transfer learning strategies by target dataset".into(),
        label_headers: vec!["Model weights".into()],
        columns,
        rows: out_rows,
    }
}

/// Published results of earlier methods, in table order: chest MRE and
/// SDR at 3/6/9 px, head MRE and SDR at 2/2.5/3/4 mm, hand MRE and SDR at
/// 2/4/10 mm.
pub const REFERENCE_METHODS: [(&str, [Option<f64>; 13]); 4] = [
    (
        "Lindner et al.",
        [
            None, None, None, None,
            Some(1.67), Some(70.65), Some(76.93), Some(82.17), Some(89.85),
            Some(0.85), Some(93.68), Some(98.95), Some(99.94),
        ],
    ),
    (
        "Urschler et al.",
        [
            None, None, None, None,
            None, Some(70.21), Some(76.95), Some(82.08), Some(89.01),
            Some(0.80), Some(92.19), Some(98.46), Some(99.95),
        ],
    ),
    (
        "Payer et al.",
        [
            None, None, None, None,
            None, Some(73.33), Some(78.76), Some(83.24), Some(89.75),
            Some(0.66), Some(94.99), Some(99.27), Some(99.99),
        ],
    ),
    (
        "Zhu et al.",
        [
            Some(5.57), Some(57.33), Some(82.67), Some(89.33),
            Some(1.54), Some(77.79), Some(84.65), Some(89.41), Some(94.93),
            Some(0.84), Some(95.40), Some(99.35), Some(99.75),
        ],
    ),
];

fn baseline_row<'a>(rows: &'a [ResultRow], target: &str) -> Option<&'a ResultRow> {
    let (_, chains) = chain_rows(rows);
    latest(
        chains
            .into_iter()
            .filter(|r| r.dataset == target && r.intermediate_stages().is_empty()),
    )
    .or_else(|| {
        latest(rows.iter().filter(|r| {
            r.kind == RunKind::Train
                && r.dataset == target
                && r.architecture == Architecture::UnetPlusPlus
                && r.encoder == EncoderKind::Vgg19
        }))
    })
}

/// Published methods next to this pipeline's baseline on each dataset.
pub fn table3(rows: &[ResultRow]) -> Table {
    let mut columns = Vec::new();
    let mut thresholds = Vec::new();
    for t in TARGETS {
        let spec = DatasetSpec::builtin(t).expect("builtin target");
        columns.extend(metric_columns(&title(t), spec.metric_unit(), &spec.sdr_thresholds));
        thresholds.push(spec.sdr_thresholds);
    }
    let mut out_rows: Vec<Row> = REFERENCE_METHODS
        .iter()
        .map(|(name, values)| Row {
            labels: vec![name.to_string()],
            cells: values
                .iter()
                .map(|v| Cell {
                    value: *v,
                    std: None,
                    run_id: None,
                })
                .collect(),
        })
        .collect();
    let mut cells = Vec::new();
    for (t, th) in TARGETS.iter().zip(&thresholds) {
        cells.extend(metric_cells(baseline_row(rows, t), th, false));
    }
    out_rows.push(Row {
        labels: vec!["This pipeline".into()],
        cells,
    });
    Table {
        name: "table3".into(),
        caption: "Comparison with published methods".into(),
        label_headers: vec!["Methods".into()],
        columns,
        rows: out_rows,
    }
}

pub fn build(template: Template, rows: &[ResultRow], table1_dataset: &str) -> Table {
    match template {
        Template::Table1 => table1(rows, table1_dataset),
        Template::Table2 => table2(rows),
        Template::Table3 => table3(rows),
    }
}

// ---------------------------------------------------------------------------
// plots

const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bars of MRE per row, one panel per column group.
pub fn mre_bars_svg(table: &Table) -> String {
    let panels: Vec<(usize, &Column)> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.label.starts_with("MRE"))
        .collect();
    let (label_w, panel_w, bar_h, top) = (220.0, 220.0, 18.0, 40.0);
    let width = label_w + panel_w * panels.len() as f64 + 20.0;
    let height = top + bar_h * table.rows.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (ri, row) in table.rows.iter().enumerate() {
        let y = top + bar_h * ri as f64 + bar_h * 0.7;
        let _ = writeln!(s, r#"<text x="4" y="{y}">{}</text>"#, svg_escape(&row.labels.join(" / ")));
    }
    for (pi, (ci, col)) in panels.iter().enumerate() {
        let x0 = label_w + panel_w * pi as f64;
        let max = table
            .rows
            .iter()
            .filter_map(|r| r.cells[*ci].value)
            .fold(0.0f64, f64::max)
            .max(1e-9);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-weight="bold">{} {}</text>"#,
            x0 + 4.0,
            svg_escape(&col.group),
            svg_escape(&col.label)
        );
        for (ri, row) in table.rows.iter().enumerate() {
            let y = top + bar_h * ri as f64;
            if let Some(v) = row.cells[*ci].value {
                let w = (panel_w - 60.0) * v / max;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x0}" y="{}" width="{w:.1}" height="{}" fill="{}"/><text x="{:.1}" y="{:.1}">{v:.2}</text>"#,
                    y + 2.0,
                    bar_h - 4.0,
                    PALETTE[pi % PALETTE.len()],
                    x0 + w + 3.0,
                    y + bar_h * 0.7
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// SDR against threshold, one polyline per row and column group.
pub fn sdr_curves_svg(table: &Table) -> String {
    let mut groups: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for (ci, c) in table.columns.iter().enumerate() {
        if let Some(rest) = c.label.strip_prefix("SDR ") {
            let t: f64 = rest
                .trim_end_matches(|ch: char| ch.is_alphabetic())
                .parse()
                .unwrap_or(f64::NAN);
            groups.entry(c.group.as_str()).or_default().push((ci, t));
        }
    }
    let (pw, ph, margin) = (260.0, 200.0, 40.0);
    let width = margin + (pw + margin) * groups.len().max(1) as f64;
    let legend_h = 14.0 * table.rows.len() as f64;
    let height = ph + 2.0 * margin + legend_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (gi, (group, cols)) in groups.iter().enumerate() {
        let x0 = margin + (pw + margin) * gi as f64;
        let tmax = cols.iter().map(|c| c.1).fold(0.0f64, f64::max).max(1e-9);
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{margin}" width="{pw}" height="{ph}" fill="none" stroke="#999"/><text x="{x0}" y="{}" font-weight="bold">{}</text>"##,
            margin - 8.0,
            svg_escape(group)
        );
        for (ri, row) in table.rows.iter().enumerate() {
            let pts: Vec<String> = cols
                .iter()
                .filter_map(|(ci, t)| {
                    row.cells[*ci].value.map(|v| {
                        format!("{:.1},{:.1}", x0 + pw * t / tmax, margin + ph * (1.0 - v / 100.0))
                    })
                })
                .collect();
            if pts.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{}"/>"#,
                    pts.join(" "),
                    PALETTE[ri % PALETTE.len()]
                );
            }
        }
    }
    for (ri, row) in table.rows.iter().enumerate() {
        let y = ph + 2.0 * margin + 14.0 * ri as f64;
        let _ = writeln!(
            s,
            r#"<text x="{margin}" y="{y}" fill="{}">{}</text>"#,
            PALETTE[ri % PALETTE.len()],
            svg_escape(&row.labels.join(" / "))
        );
    }
    s.push_str("</svg>\n");
    s
}

// ---------------------------------------------------------------------------
// full-scale reproduction gate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

/// Baseline MRE ceilings for full-scale runs, with the published value.
pub const REPRODUCTION_LIMITS: [(&str, f64, f64); 3] =
    [("hand", 0.75, 0.65), ("head", 1.65, 1.50), ("chest", 5.0, 4.19)];

/// Largest MRE gain a transfer chain may show over its baseline.
pub const CHAIN_GAIN_LIMIT: f64 = 0.1;

fn space_name(space: EvalSpace) -> &'static str {
    match space {
        EvalSpace::Original => "original",
        EvalSpace::Network => "network",
    }
}

fn full_scale(r: &ResultRow) -> bool {
    let Some(spec) = DatasetSpec::builtin(&r.dataset) else {
        return false;
    };
    r.width_divisor == 1
        && r.imagenet_init
        && r.architecture == Architecture::UnetPlusPlus
        && r.encoder == EncoderKind::Vgg19
        && r.metrics.n_images == spec.test_count
}

/// Checks full-scale results against the published baselines. Checks
/// without matching rows are skipped.
pub fn reproduction_check(rows: &[ResultRow]) -> Vec<CheckOutcome> {
    let full: Vec<ResultRow> = rows.iter().filter(|r| full_scale(r)).cloned().collect();
    let mut out = Vec::new();
    for (dataset, limit, published) in REPRODUCTION_LIMITS {
        let mut spaces: Vec<EvalSpace> = full.iter().filter(|r| r.dataset == dataset).map(|r| r.eval_space).collect();
        spaces.sort_by_key(|s| *s as u8);
        spaces.dedup();
        if spaces.is_empty() {
            out.push(CheckOutcome {
                name: format!("{dataset} baseline MRE <= {limit}"),
                status: CheckStatus::Skip,
                detail: "no full-scale baseline run recorded".into(),
            });
        }
        for space in spaces {
            let name = format!("{dataset} baseline MRE <= {limit} ({} space)", space_name(space));
            let in_space: Vec<ResultRow> = full.iter().filter(|r| r.eval_space == space).cloned().collect();
            out.push(match baseline_row(&in_space, dataset) {
                None => CheckOutcome {
                    name,
                    status: CheckStatus::Skip,
                    detail: "no full-scale baseline run recorded".into(),
                },
                Some(r) => CheckOutcome {
                    name,
                    status: if r.metrics.mre <= limit {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    },
                    detail: format!("MRE {:.3} (published {published}, run {})", r.metrics.mre, r.run_id),
                },
            });
        }
    }
    let (_, chains) = chain_rows(&full);
    let mut compared = 0;
    let mut violations = Vec::new();
    for target in TARGETS {
        let Some(base) = chains
            .iter()
            .find(|r| r.dataset == target && r.intermediate_stages().is_empty())
        else {
            continue;
        };
        for r in chains
            .iter()
            .filter(|r| r.dataset == target && !r.intermediate_stages().is_empty())
        {
            compared += 1;
            let exempt = r.intermediate_stages() == ["chest".to_string(), "head".to_string()];
            let gain = base.metrics.mre - r.metrics.mre;
            if gain > CHAIN_GAIN_LIMIT && !exempt {
                violations.push(format!("{} → {target}: gain {gain:.3}", r.intermediate_stages().join(" → ")));
            }
        }
    }
    out.push(CheckOutcome {
        name: format!("no in-domain chain beats its baseline by more than {CHAIN_GAIN_LIMIT}"),
        status: match (compared, violations.is_empty()) {
            (0, _) => CheckStatus::Skip,
            (_, true) => CheckStatus::Pass,
            (_, false) => CheckStatus::Fail,
        },
        detail: if compared == 0 {
            "no full-scale chain runs recorded".into()
        } else if violations.is_empty() {
            format!("{compared} chains compared")
        } else {
            violations.join("; ")
        },
    });
    out
}
