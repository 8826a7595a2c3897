//! Result persistence and report emission: JSON-lines record streams, CSV
//! tables, and static SVG plots. Reports derive solely from result files so
//! every number is recomputable.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{asr, EvalRecord};
use crate::training::TrainHistory;
use crate::video::CurvePoint;

/// Stream records to a JSON-lines file, one record per line.
pub fn write_records_jsonl<P: AsRef<Path>>(path: P, records: &[EvalRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_records_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<EvalRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Ingest(format!("bad record on line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Files produced by one report run.
#[derive(Debug, Clone, Default)]
pub struct ReportPaths {
    pub summary_csv: Option<PathBuf>,
    pub asr_svg: Option<PathBuf>,
    pub curve_csv: Option<PathBuf>,
    pub curve_svg: Option<PathBuf>,
    pub loss_svg: Option<PathBuf>,
}

/// Emit the ASR table and bar chart for a set of attacked (and optionally
/// clean) records.
pub fn report_records(
    records: &[EvalRecord],
    clean: Option<&[EvalRecord]>,
    ks: &[usize],
    out_dir: &Path,
) -> Result<ReportPaths> {
    if records.is_empty() {
        return Err(Error::Parameter("no records to report".into()));
    }
    if ks.is_empty() {
        return Err(Error::Parameter("no k values requested".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("k,asr,clean_asr\n");
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for &k in ks {
        let a = asr(records, k)?;
        let clean_a = match clean {
            Some(c) if !c.is_empty() => Some(asr(c, k)?),
            _ => None,
        };
        match clean_a {
            Some(ca) => writeln!(csv, "{k},{a},{ca}").expect("string write"),
            None => writeln!(csv, "{k},{a},").expect("string write"),
        }
        labels.push(format!("ASR@{k}"));
        values.push(a);
        if let Some(ca) = clean_a {
            labels.push(format!("clean@{k}"));
            values.push(ca);
        }
    }
    let summary_csv = out_dir.join("summary.csv");
    std::fs::write(&summary_csv, csv)?;
    let asr_svg = out_dir.join("asr_bars.svg");
    std::fs::write(&asr_svg, bar_chart_svg("Attack success rate", &labels, &values))?;
    Ok(ReportPaths {
        summary_csv: Some(summary_csv),
        asr_svg: Some(asr_svg),
        ..ReportPaths::default()
    })
}

/// Emit the video attack curve table and plot.
pub fn report_curve(curve: &[CurvePoint], out_dir: &Path) -> Result<ReportPaths> {
    if curve.is_empty() {
        return Err(Error::Parameter("empty curve".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("fraction,asr_1_4,asr_1_2\n");
    for p in curve {
        writeln!(csv, "{},{},{}", p.fraction, p.asr_1_4, p.asr_1_2).expect("string write");
    }
    let curve_csv = out_dir.join("curve.csv");
    std::fs::write(&curve_csv, csv)?;
    let xs: Vec<f64> = curve.iter().map(|p| p.fraction).collect();
    let s14: Vec<f64> = curve.iter().map(|p| p.asr_1_4).collect();
    let s12: Vec<f64> = curve.iter().map(|p| p.asr_1_2).collect();
    let svg = line_chart_svg(
        "Video attack success vs infected fraction",
        &xs,
        &[("ASR1&4", &s14), ("ASR1&2", &s12)],
        "infected fraction",
        "success rate",
    );
    let curve_svg = out_dir.join("curve.svg");
    std::fs::write(&curve_svg, svg)?;
    Ok(ReportPaths {
        curve_csv: Some(curve_csv),
        curve_svg: Some(curve_svg),
        ..ReportPaths::default()
    })
}

/// Emit the training loss curve.
pub fn report_history(history: &TrainHistory, out_dir: &Path) -> Result<ReportPaths> {
    if history.step_losses.is_empty() {
        return Err(Error::Parameter("history has no steps".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let xs: Vec<f64> = (0..history.step_losses.len()).map(|i| i as f64).collect();
    let svg = line_chart_svg(
        "Training loss",
        &xs,
        &[("loss", &history.step_losses)],
        "step",
        "loss",
    );
    let loss_svg = out_dir.join("loss.svg");
    std::fs::write(&loss_svg, svg)?;
    Ok(ReportPaths {
        loss_svg: Some(loss_svg),
        ..ReportPaths::default()
    })
}

// ---------------------------------------------------------------------------
// Minimal static SVG plotting
// ---------------------------------------------------------------------------

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" \
         viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{}</text>\n",
        PLOT_W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart over values in [0, 1].
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut svg = svg_header(title);
    let n = values.len().max(1);
    let inner_w = PLOT_W - 2.0 * MARGIN;
    let inner_h = PLOT_H - 2.0 * MARGIN;
    let slot = inner_w / n as f64;
    let bar_w = slot * 0.6;
    // Axis and unit gridline.
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{r}\" y2=\"{t}\" stroke=\"#cccccc\" stroke-dasharray=\"4\"/>\n\
         <text x=\"{lx}\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"11\">1.0</text>\n",
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN,
        t = MARGIN,
        lx = MARGIN - 30.0,
    );
    for (i, (&v, label)) in values.iter().zip(labels.iter()).enumerate() {
        let v = v.clamp(0.0, 1.0);
        let x = MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        let h = v * inner_h;
        let y = PLOT_H - MARGIN - h;
        let _ = write!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" \
             fill=\"{color}\"/>\n\
             <text x=\"{cx:.1}\" y=\"{ly:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"12\">{label}</text>\n\
             <text x=\"{cx:.1}\" y=\"{vy:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{v:.3}</text>\n",
            color = SERIES_COLORS[i % SERIES_COLORS.len()],
            cx = x + bar_w / 2.0,
            ly = PLOT_H - MARGIN + 18.0,
            vy = y - 6.0,
            label = xml_escape(label),
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Line chart; y range is fitted to the data with a small pad.
pub fn line_chart_svg(
    title: &str,
    xs: &[f64],
    series: &[(&str, &[f64])],
    x_label: &str,
    y_label: &str,
) -> String {
    let mut svg = svg_header(title);
    let inner_w = PLOT_W - 2.0 * MARGIN;
    let inner_h = PLOT_H - 2.0 * MARGIN;
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &y in ys.iter() {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    let y_pad = ((y_max - y_min) * 0.05).max(1e-9);
    let (y_min, y_max) = (y_min - y_pad, y_max + y_pad);
    let x_span = (x_max - x_min).max(1e-12);
    let sx = |x: f64| MARGIN + (x - x_min) / x_span * inner_w;
    let sy = |y: f64| PLOT_H - MARGIN - (y - y_min) / (y_max - y_min) * inner_h;
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{bl}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{xl}</text>\n\
         <text x=\"16\" y=\"{cy}\" transform=\"rotate(-90 16 {cy})\" text-anchor=\"middle\" \
         font-family=\"sans-serif\" font-size=\"12\">{yl}</text>\n\
         <text x=\"{m}\" y=\"{bl}\" font-family=\"sans-serif\" font-size=\"10\">{x0:.2}</text>\n\
         <text x=\"{r}\" y=\"{bl}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"10\">{x1:.2}</text>\n\
         <text x=\"{m2}\" y=\"{b}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"10\">{y0:.3}</text>\n\
         <text x=\"{m2}\" y=\"{t2}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"10\">{y1:.3}</text>\n",
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN,
        t = MARGIN,
        cx = PLOT_W / 2.0,
        bl = PLOT_H - MARGIN + 32.0,
        cy = PLOT_H / 2.0,
        xl = xml_escape(x_label),
        yl = xml_escape(y_label),
        x0 = x_min,
        x1 = x_max,
        m2 = MARGIN - 6.0,
        t2 = MARGIN + 4.0,
        y0 = y_min,
        y1 = y_max,
    );
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{lx}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{name}</text>\n",
            points.join(" "),
            lx = PLOT_W - MARGIN - 80.0,
            ly = MARGIN + 16.0 * (si + 1) as f64,
            name = xml_escape(name),
        );
    }
    svg.push_str("</svg>\n");
    svg
}
