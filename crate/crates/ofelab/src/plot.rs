//! Learning-curve rendering: mean line with a +/-1 std band per
//! configuration group, one SVG per metric.
//!
//! Output is deterministic: identical input CSVs produce byte-identical
//! files.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};
use crate::runner::METRICS_HEADER;

/// A named set of metrics CSVs (typically one per seed) sharing a step grid.
#[derive(Debug, Clone)]
pub struct PlotGroup {
    pub label: String,
    pub csv_paths: Vec<PathBuf>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

#[derive(Debug)]
struct Series {
    label: String,
    steps: Vec<usize>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn parse_csv(path: &Path) -> Result<(Vec<usize>, Vec<Vec<Option<f64>>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LabError::Plot(format!("{}: {e}", path.display())))?;
    let mut steps = Vec::new();
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        if line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != METRICS_HEADER {
                return Err(LabError::Plot(format!(
                    "{}: unexpected header {line:?}",
                    path.display()
                )));
            }
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        steps.push(cells[0].parse::<usize>().map_err(|_| {
            LabError::Plot(format!("{}: bad step {:?}", path.display(), cells[0]))
        })?);
        rows.push(
            cells[1..]
                .iter()
                .map(|c| c.parse::<f64>().ok())
                .collect::<Vec<Option<f64>>>(),
        );
    }
    Ok((steps, rows))
}

fn metric_column(metric: &str) -> Result<usize> {
    METRICS_HEADER
        .split(',')
        .skip(1)
        .position(|m| m == metric)
        .ok_or_else(|| LabError::Plot(format!("unknown metric {metric:?}")))
}

fn collect_series(groups: &[PlotGroup], metric: &str) -> Result<Vec<Series>> {
    let col = metric_column(metric)?;
    let mut out = Vec::new();
    for group in groups {
        if group.csv_paths.is_empty() {
            return Err(LabError::Plot(format!("group {:?} has no CSVs", group.label)));
        }
        let mut grids = Vec::new();
        let mut values: Vec<Vec<Option<f64>>> = Vec::new();
        for p in &group.csv_paths {
            let (steps, rows) = parse_csv(p)?;
            grids.push((p.clone(), steps));
            values.push(rows.iter().map(|r| r[col]).collect());
        }
        let reference = &grids[0].1;
        let mismatched: Vec<String> = grids
            .iter()
            .filter(|(_, s)| s != reference)
            .map(|(p, _)| p.display().to_string())
            .collect();
        if !mismatched.is_empty() {
            return Err(LabError::Plot(format!(
                "step grids do not match the first CSV of group {:?}: {}",
                group.label,
                mismatched.join(", ")
            )));
        }
        let mut steps = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, &step) in reference.iter().enumerate() {
            let cells: Vec<f64> = values.iter().filter_map(|v| v[i]).collect();
            if cells.len() != values.len() {
                continue; // metric absent in some seed at this step
            }
            let m = cells.iter().sum::<f64>() / cells.len() as f64;
            let var = cells.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cells.len() as f64;
            steps.push(step);
            mean.push(m);
            std.push(var.sqrt());
        }
        out.push(Series {
            label: group.label.clone(),
            steps,
            mean,
            std,
        });
    }
    Ok(out)
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn render_svg(series: &[Series], metric: &str) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut step_hi = 0usize;
    for s in series {
        for i in 0..s.steps.len() {
            lo = lo.min(s.mean[i] - s.std[i]);
            hi = hi.max(s.mean[i] + s.std[i]);
            step_hi = step_hi.max(s.steps[i]);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi += 0.5;
        lo -= 0.5;
    }
    let pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    let step_hi = step_hi.max(1) as f64;

    let x = |step: f64| MARGIN_L + (step / step_hi) * (WIDTH - MARGIN_L - MARGIN_R);
    let y = |v: f64| HEIGHT - MARGIN_B - (v - lo) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_L, MARGIN_T, MARGIN_L, HEIGHT - MARGIN_B
    ));
    // ticks
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let yy = y(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n",
            MARGIN_L,
            fmt(yy),
            WIDTH - MARGIN_R,
            fmt(yy)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 5.0,
            fmt(yy + 4.0),
            fmt_tick(v)
        ));
        let step = step_hi * k as f64 / 4.0;
        let xx = x(step);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fmt(xx),
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(step)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">env_step</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{metric}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        18.0
    ));

    for (idx, s) in series.iter().enumerate() {
        if s.steps.is_empty() {
            continue;
        }
        let color = PALETTE[idx % PALETTE.len()];
        // band polygon: upper path forward, lower path backward
        let mut band = String::from("<polygon points=\"");
        for i in 0..s.steps.len() {
            band.push_str(&format!(
                "{},{} ",
                fmt(x(s.steps[i] as f64)),
                fmt(y(s.mean[i] + s.std[i]))
            ));
        }
        for i in (0..s.steps.len()).rev() {
            band.push_str(&format!(
                "{},{} ",
                fmt(x(s.steps[i] as f64)),
                fmt(y(s.mean[i] - s.std[i]))
            ));
        }
        band.push_str(&format!("\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n"));
        svg.push_str(&band);
        let mut line = String::from("<polyline points=\"");
        for i in 0..s.steps.len() {
            line.push_str(&format!(
                "{},{} ",
                fmt(x(s.steps[i] as f64)),
                fmt(y(s.mean[i]))
            ));
        }
        line.push_str(&format!(
            "\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
        ));
        svg.push_str(&line);
        // legend entry
        let ly = MARGIN_T + 14.0 * idx as f64 + 8.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R - 150.0,
            fmt(ly),
            WIDTH - MARGIN_R - 130.0,
            fmt(ly)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R - 125.0,
            fmt(ly + 4.0),
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.3e}")
    } else {
        format!("{v:.2}")
    }
}

/// Render one SVG per metric into `out_dir`; returns the file paths.
pub fn emit_plots(groups: &[PlotGroup], metrics: &[&str], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if groups.is_empty() {
        return Err(LabError::Plot("no plot groups".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    for metric in metrics {
        let series = collect_series(groups, metric)?;
        let svg = render_svg(&series, metric);
        let path = out_dir.join(format!("{metric}.svg"));
        let mut f = std::fs::File::create(&path)?;
        f.write_all(svg.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::METRICS_SCHEMA;

    fn write_csv(dir: &Path, name: &str, rows: &[(usize, f64)]) -> PathBuf {
        std::fs::create_dir_all(dir).unwrap();
        let path = dir.join(name);
        let mut text = format!("{METRICS_SCHEMA}\n{METRICS_HEADER}\n");
        for (step, v) in rows {
            text.push_str(&format!("{step},{v},,,,,,ok\n"));
        }
        std::fs::write(&path, text).unwrap();
        path
    }

    fn tmp(sub: &str) -> PathBuf {
        std::env::temp_dir().join("ofelab_plot_tests").join(sub)
    }

    #[test]
    fn constant_metric_over_five_seeds_gives_a_flat_zero_band() {
        let dir = tmp("flat");
        let paths: Vec<PathBuf> = (0..5)
            .map(|k| write_csv(&dir, &format!("s{k}.csv"), &[(100, 1.0), (200, 1.0)]))
            .collect();
        let groups = [PlotGroup {
            label: "const".into(),
            csv_paths: paths,
        }];
        let series = collect_series(&groups, "step_score").unwrap();
        assert_eq!(series[0].mean, vec![1.0, 1.0]);
        assert_eq!(series[0].std, vec![0.0, 0.0]);
        let files = emit_plots(&groups, &["step_score"], &dir.join("out")).unwrap();
        assert!(files[0].exists());
    }

    #[test]
    fn single_seed_band_collapses_to_the_line() {
        let dir = tmp("single");
        let p = write_csv(&dir, "s0.csv", &[(100, -5.0), (200, -3.0)]);
        let groups = [PlotGroup {
            label: "one".into(),
            csv_paths: vec![p],
        }];
        let series = collect_series(&groups, "step_score").unwrap();
        assert!(series[0].std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn identical_inputs_give_byte_identical_output() {
        let dir = tmp("det");
        let p = write_csv(&dir, "s0.csv", &[(100, 0.5), (200, 0.7), (300, 0.9)]);
        let groups = [PlotGroup {
            label: "det".into(),
            csv_paths: vec![p],
        }];
        let f1 = emit_plots(&groups, &["step_score"], &dir.join("a")).unwrap();
        let f2 = emit_plots(&groups, &["step_score"], &dir.join("b")).unwrap();
        assert_eq!(
            std::fs::read(&f1[0]).unwrap(),
            std::fs::read(&f2[0]).unwrap()
        );
    }

    #[test]
    fn mismatched_grids_name_the_offending_file() {
        let dir = tmp("mismatch");
        let a = write_csv(&dir, "a.csv", &[(100, 1.0), (200, 1.0)]);
        let b = write_csv(&dir, "b.csv", &[(100, 1.0), (300, 1.0)]);
        let groups = [PlotGroup {
            label: "bad".into(),
            csv_paths: vec![a, b.clone()],
        }];
        let err = collect_series(&groups, "step_score").unwrap_err();
        assert!(err.to_string().contains("b.csv"), "{err}");
    }
}
