//! Energy-versus-step chart as a standalone SVG, plus CSV export.

use std::fmt::Write;

use lcn::trainer::StepRecord;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 50.0); // left, right, top, bottom

pub fn parse_log(text: &str) -> Result<Vec<StepRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("log line {}: {e}", i + 1)))
        .collect()
}

pub fn to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from("step,energy_per_site,e_loc_variance,acceptance_rate,lr,grad_norm\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.energy_per_site, r.e_loc_variance, r.acceptance_rate, r.lr, r.grad_norm
        )
        .unwrap();
    }
    out
}

/// Trailing mean over `window` points.
fn smooth(y: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    let mut sum = 0.0;
    for i in 0..y.len() {
        sum += y[i];
        if i >= window {
            sum -= y[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap();
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(t);
        t += step;
    }
    out
}

/// Raw and smoothed energy per site against step; `reference` draws a
/// horizontal line (e.g. an exact energy).
pub fn to_svg(records: &[StepRecord], reference: Option<f64>, window: usize) -> String {
    let xs: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.energy_per_site).collect();
    let sm = smooth(&ys, window.max(1));
    let finite = ys.iter().chain(reference.iter()).copied().filter(|v| v.is_finite());
    let (mut y0, mut y1) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (-1.0, 0.0);
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let x0 = xs.first().copied().unwrap_or(0.0);
    let x1 = xs.last().copied().unwrap_or(1.0).max(x0 + 1.0);
    let (ml, mr, mt, mb) = MARGIN;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (WIDTH - ml - mr);
    let py = |y: f64| mt + (y1 - y) / (y1 - y0) * (HEIGHT - mt - mb);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - ml - mr,
        HEIGHT - mt - mb
    )
    .unwrap();
    for t in ticks(x0, x1, 6) {
        let x = px(t);
        writeln!(s, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, HEIGHT - mb, HEIGHT - mb + 5.0).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#, HEIGHT - mb + 18.0).unwrap();
    }
    for t in ticks(y0, y1, 6) {
        let y = py(t);
        writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{ml}" y2="{y:.2}" stroke="black"/>"#, ml - 5.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, ml - 8.0, y + 4.0, fmt_tick(t)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (ml + WIDTH - mr) / 2.0, HEIGHT - 12.0).unwrap();
    writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">energy per site</text>"#,
        (mt + HEIGHT - mb) / 2.0
    )
    .unwrap();
    let path = |v: &[f64]| {
        let mut d = String::new();
        let mut pen_up = true;
        for (&x, &y) in xs.iter().zip(v) {
            if !y.is_finite() {
                pen_up = true;
                continue;
            }
            write!(d, "{}{:.2} {:.2} ", if pen_up { "M" } else { "L" }, px(x), py(y)).unwrap();
            pen_up = false;
        }
        d
    };
    writeln!(s, r##"<path d="{}" fill="none" stroke="#9ecae1" stroke-width="1"/>"##, path(&ys)).unwrap();
    writeln!(s, r##"<path d="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##, path(&sm)).unwrap();
    if let Some(r) = reference.filter(|r| r.is_finite()) {
        let y = py(r);
        writeln!(
            s,
            r##"<line x1="{ml}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#de2d26" stroke-dasharray="6 4"/>"##,
            WIDTH - mr
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, e: f64) -> StepRecord {
        StepRecord {
            step,
            energy_per_site: e,
            e_loc_variance: 0.1,
            acceptance_rate: 0.5,
            lr: 1e-3,
            grad_norm: 1.0,
        }
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let csv = to_csv(&[rec(0, -0.5), rec(1, -0.6)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,-0.5,0.1,0.5,0.001,1");
    }

    #[test]
    fn svg_is_well_formed_and_handles_degenerate_input() {
        let svg = to_svg(&[rec(0, -0.5), rec(10, f64::NAN), rec(20, -0.7)], Some(-0.75), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("stroke-dasharray"));
        let empty = to_svg(&[], None, 50);
        assert!(empty.contains("</svg>"));
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_parsing_reports_bad_lines() {
        let ok = "{\"step\":0,\"energy_per_site\":-0.5,\"e_loc_variance\":0.1,\"acceptance_rate\":0.5,\"lr\":0.001,\"grad_norm\":1.0}\n";
        assert_eq!(parse_log(ok).unwrap().len(), 1);
        assert!(parse_log("{").unwrap_err().contains("line 1"));
    }
}
