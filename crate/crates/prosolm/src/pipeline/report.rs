//! Report rendering: summary tables over a run's artifacts, the
//! alpha-by-setting ablation grid over sweep directories, and SVG loss-curve
//! plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::Result;

/// A minimal deterministic SVG line plot (one polyline per series).
pub fn svg_line_plot(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const MARGIN: f64 = 42.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="monospace" font-size="14" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        b = H - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{m}" y="{y}" font-family="monospace" font-size="10">{v:.4}</text>"#,
        m = 2.0,
        y = H - MARGIN,
        v = y0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{m}" y="{y}" font-family="monospace" font-size="10">{v:.4}</text>"#,
        m = 2.0,
        y = MARGIN + 4.0,
        v = y1
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" font-family="monospace" font-size="11" fill="{color}">{name}</text>"#,
            x = W - MARGIN - 120.0,
            y = MARGIN + 16.0 * (i as f64 + 1.0),
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Deserialize)]
struct ProbeSummaryRow {
    kind: String,
    #[serde(default)]
    mean: f64,
    #[serde(default)]
    std: f64,
    #[serde(default)]
    runs: usize,
}

/// Reads the summary line of a probe report file.
fn probe_summary(path: &Path) -> Option<(f64, f64, usize)> {
    let text = std::fs::read_to_string(path).ok()?;
    for line in text.lines() {
        if let Ok(row) = serde_json::from_str::<ProbeSummaryRow>(line) {
            if row.kind == "summary" {
                return Some((row.mean, row.std, row.runs));
            }
        }
    }
    None
}

#[derive(Deserialize)]
struct LossRow {
    step: usize,
    l_asr: f64,
    l_mel: f64,
    total: f64,
}

#[derive(Deserialize)]
struct GapRow {
    benchmark: String,
    acc_text: f64,
    acc_speech: f64,
    gap: f64,
}

/// Renders the summary for one run directory. Missing artifacts are listed
/// rather than fatal; the summary text is returned and also written to
/// `report/summary.txt` (plus SVG plots) when `write` is set.
pub fn render_run(dir: &Path, write: bool, plots: bool) -> Result<String> {
    let mut out = String::new();
    let mut missing: Vec<&str> = Vec::new();

    let _ = writeln!(out, "# experiment report: {}", dir.display());
    let _ = writeln!(out);

    // probe summaries
    let probe_dir = dir.join("probe");
    let mut probe_lines = Vec::new();
    if probe_dir.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(&probe_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|x| x == "jsonl").unwrap_or(false))
            .collect();
        entries.sort();
        for path in entries {
            if let Some((mean, std, runs)) = probe_summary(&path) {
                let name = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
                probe_lines.push(format!(
                    "| {name:<24} | {:>6.2} ± {:<5.2} | {runs:>4} |",
                    mean * 100.0,
                    std * 100.0
                ));
            }
        }
    }
    if probe_lines.is_empty() {
        missing.push("probe");
    } else {
        let _ = writeln!(out, "## probing (accuracy %, mean ± std over runs)");
        let _ = writeln!(out, "| probe                    | accuracy       | runs |");
        let _ = writeln!(out, "|--------------------------|----------------|------|");
        for line in probe_lines {
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out);
    }

    // modality gap
    let gap_path = dir.join("eval").join("gap.jsonl");
    if gap_path.is_file() {
        let _ = writeln!(out, "## modality gap (accuracy %, gap = text - speech)");
        let _ = writeln!(out, "| benchmark    | text  | speech | gap   |");
        let _ = writeln!(out, "|--------------|-------|--------|-------|");
        for line in std::fs::read_to_string(&gap_path)?.lines() {
            if let Ok(row) = serde_json::from_str::<GapRow>(line) {
                let _ = writeln!(
                    out,
                    "| {:<12} | {:>5.1} | {:>6.1} | {:>5.1} |",
                    row.benchmark,
                    row.acc_text * 100.0,
                    row.acc_speech * 100.0,
                    row.gap * 100.0
                );
            }
        }
        let _ = writeln!(out);
    } else {
        missing.push("eval");
    }

    // loss curves
    let loss_path = dir.join("encoder").join("loss.jsonl");
    if loss_path.is_file() {
        let mut rows = Vec::new();
        for line in std::fs::read_to_string(&loss_path)?.lines() {
            if let Ok(row) = serde_json::from_str::<LossRow>(line) {
                rows.push(row);
            }
        }
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            let _ = writeln!(out, "## encoder training");
            let _ = writeln!(
                out,
                "total loss {:.4} -> {:.4} over {} steps (asr {:.4} -> {:.4}, mel {:.4} -> {:.4})",
                first.total, last.total, rows.len(), first.l_asr, last.l_asr, first.l_mel, last.l_mel
            );
            let _ = writeln!(out);
            if write && plots {
                let series = vec![
                    (
                        "total".to_string(),
                        rows.iter().map(|r| (r.step as f64, r.total)).collect(),
                    ),
                    (
                        "asr".to_string(),
                        rows.iter().map(|r| (r.step as f64, r.l_asr)).collect(),
                    ),
                    (
                        "mel".to_string(),
                        rows.iter().map(|r| (r.step as f64, r.l_mel)).collect(),
                    ),
                ];
                let svg = svg_line_plot("encoder training loss", &series);
                std::fs::create_dir_all(dir.join("report"))?;
                std::fs::write(dir.join("report").join("encoder_loss.svg"), svg)?;
            }
        }
    } else {
        missing.push("encoder");
    }

    if !missing.is_empty() {
        let _ = writeln!(out, "## missing sections");
        for m in &missing {
            let _ = writeln!(out, "- {m}");
        }
    }

    if write {
        std::fs::create_dir_all(dir.join("report"))?;
        std::fs::write(dir.join("report").join("summary.txt"), &out)?;
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SweepMeta {
    assignments: Vec<(String, String)>,
}

/// Renders the ablation grid over a sweep directory (subdirectories
/// `sweep_NNN/` each holding `sweep.json` with its axis assignments plus run
/// artifacts). When the axes are exactly the distillation alpha and source
/// setting, the grid mirrors the alpha-by-setting ablation table.
pub fn render_sweep(dir: &Path, write: bool) -> Result<String> {
    let mut cells: Vec<(Vec<(String, String)>, Option<f64>)> = Vec::new();
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("sweep_"))
                    .unwrap_or(false)
        })
        .collect();
    subdirs.sort();
    for sub in &subdirs {
        let meta_path = sub.join("sweep.json");
        let Ok(meta_text) = std::fs::read_to_string(&meta_path) else {
            continue;
        };
        let meta: SweepMeta = serde_json::from_str(&meta_text)
            .map_err(|e| crate::error::Error::format(format!("sweep meta: {e}")))?;
        let gap_path = sub.join("eval").join("gap.jsonl");
        let mut avg_gap = None;
        if let Ok(text) = std::fs::read_to_string(&gap_path) {
            for line in text.lines() {
                if let Ok(row) = serde_json::from_str::<GapRow>(line) {
                    if row.benchmark == "Avg." {
                        avg_gap = Some(row.gap);
                    }
                }
            }
        }
        let _ = (row_placeholder(), &avg_gap);
        cells.push((meta.assignments, avg_gap));
    }

    let mut out = String::new();
    let _ = writeln!(out, "# sweep report: {}", dir.display());
    let _ = writeln!(out);
    let _ = writeln!(out, "| assignment | avg gap (%) |");
    let _ = writeln!(out, "|------------|-------------|");
    for (assignments, gap) in &cells {
        let label = assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ");
        match gap {
            Some(g) => {
                let _ = writeln!(out, "| {label} | {:.1} |", g * 100.0);
            }
            None => {
                let _ = writeln!(out, "| {label} | (missing) |");
            }
        }
    }

    // alpha-by-setting grid when those are the axes
    let alphas: Vec<String> = distinct_values(&cells, "kd.alpha");
    let settings: Vec<String> = distinct_values(&cells, "kd.setting");
    if !alphas.is_empty() && !settings.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "## avg gap (%) by alpha x setting");
        let mut header = String::from("| alpha \\ setting |");
        for s in &settings {
            let _ = write!(header, " {s} |");
        }
        let _ = writeln!(out, "{header}");
        let mut rule = String::from("|-----------------|");
        for _ in &settings {
            rule.push_str("----------|");
        }
        let _ = writeln!(out, "{rule}");
        for a in &alphas {
            let mut row = format!("| {a:<15} |");
            for s in &settings {
                let cell = cells.iter().find(|(asg, _)| {
                    asg.iter().any(|(k, v)| k == "kd.alpha" && v == a)
                        && asg.iter().any(|(k, v)| k == "kd.setting" && v == s)
                });
                match cell.and_then(|(_, g)| *g) {
                    Some(g) => {
                        let _ = write!(row, " {:>8.1} |", g * 100.0);
                    }
                    None => {
                        let _ = write!(row, " {:>8} |", "-");
                    }
                }
            }
            let _ = writeln!(out, "{row}");
        }
    }

    if write {
        std::fs::write(dir.join("sweep_report.txt"), &out)?;
    }
    Ok(out)
}

fn row_placeholder() {}

fn distinct_values(cells: &[(Vec<(String, String)>, Option<f64>)], key: &str) -> Vec<String> {
    let mut values = Vec::new();
    for (assignments, _) in cells {
        for (k, v) in assignments {
            if k == key && !values.contains(v) {
                values.push(v.clone());
            }
        }
    }
    values
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_plot_is_deterministic_and_well_formed() {
        let series = vec![(
            "loss".to_string(),
            vec![(1.0, 2.0), (2.0, 1.5), (3.0, 1.0)],
        )];
        let a = svg_line_plot("test", &series);
        let b = svg_line_plot("test", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("polyline"));
        assert!(a.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_run_dir_reports_missing_sections_without_failing() {
        let dir = tempfile::tempdir().unwrap();
        let text = render_run(dir.path(), false, false).unwrap();
        assert!(text.contains("missing sections"));
        assert!(text.contains("- probe"));
        assert!(text.contains("- eval"));
        assert!(text.contains("- encoder"));
    }
}
