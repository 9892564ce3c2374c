//! Static report emission: grouped bar charts with 95% CI whiskers,
//! data-fraction curves, and a machine-readable summary table. Charts are
//! hand-rolled SVG so output is deterministic byte-for-byte.

use std::io::Write as IoWrite;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{MetricReport, UncertaintyMethod};

const PALETTE: [&str; 6] = [
    "#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860",
];

fn method_str(m: UncertaintyMethod) -> &'static str {
    match m {
        UncertaintyMethod::HanleyMcneil => "hanley_mcneil",
        UncertaintyMethod::Bootstrap => "bootstrap",
        UncertaintyMethod::Point => "point",
    }
}

fn method_from_str(s: &str) -> Result<UncertaintyMethod> {
    match s {
        "hanley_mcneil" => Ok(UncertaintyMethod::HanleyMcneil),
        "bootstrap" => Ok(UncertaintyMethod::Bootstrap),
        "point" => Ok(UncertaintyMethod::Point),
        other => Err(Error::data(format!("unknown uncertainty method '{other}'"))),
    }
}

struct YScale {
    lo: f64,
    hi: f64,
    top: f64,
    bottom: f64,
}

impl YScale {
    fn fit(values: impl Iterator<Item = f64>, top: f64, bottom: f64) -> YScale {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        lo = lo.min(0.0);
        if hi <= lo {
            hi = lo + 1.0;
        }
        hi += (hi - lo) * 0.08;
        YScale {
            lo,
            hi,
            top,
            bottom,
        }
    }

    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.lo) / (self.hi - self.lo) * (self.bottom - self.top)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=5)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0)
            .collect()
    }
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, scale: &YScale, left: f64, right: f64) {
    for t in scale.ticks() {
        let y = scale.y(t);
        out.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{right}\" y2=\"{y:.2}\" stroke=\"#ddd\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" fill=\"#444\">{:.3}</text>\n",
            left - 6.0,
            y + 4.0,
            t
        ));
    }
    out.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{:.2}\" x2=\"{left}\" y2=\"{:.2}\" stroke=\"#222\"/>\n",
        scale.top, scale.bottom
    ));
    out.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{0:.2}\" x2=\"{right}\" y2=\"{0:.2}\" stroke=\"#222\"/>\n",
        scale.bottom
    ));
}

/// Grouped bars in input order, whiskers at ci95. Reports carrying only a
/// point estimate are drawn without whiskers and produce a warning.
pub fn render_bar_chart(
    reports: &[MetricReport],
    title: &str,
    path: &Path,
) -> Result<Vec<String>> {
    if reports.is_empty() {
        return Err(Error::data("no reports to plot".to_string()));
    }
    let n = reports.len();
    let (left, right_pad, top, bottom_pad) = (70.0, 24.0, 48.0, 96.0);
    let slot = 96.0;
    let width = left + right_pad + slot * n as f64;
    let height = 420.0;
    let bottom = height - bottom_pad;
    let scale = YScale::fit(
        reports.iter().flat_map(|r| [r.point, r.ci95.0, r.ci95.1]),
        top,
        bottom,
    );
    let mut warnings = Vec::new();
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" fill=\"#111\">{}</text>\n",
        width / 2.0,
        svg_escape(title)
    ));
    axes(&mut out, &scale, left, width - right_pad);
    for (i, r) in reports.iter().enumerate() {
        let cx = left + slot * (i as f64 + 0.5);
        let bw = slot * 0.55;
        let y0 = scale.y(0.0_f64.max(scale.lo));
        let yv = scale.y(r.point);
        let (rect_y, rect_h) = if yv <= y0 { (yv, y0 - yv) } else { (y0, yv - y0) };
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<rect class=\"bar\" x=\"{:.2}\" y=\"{rect_y:.2}\" width=\"{bw:.2}\" height=\"{rect_h:.2}\" fill=\"{color}\"/>\n",
            cx - bw / 2.0
        ));
        if r.method == UncertaintyMethod::Point {
            warnings.push(format!("no confidence interval for '{}'", r.name));
        } else {
            let (ylo, yhi) = (scale.y(r.ci95.0), scale.y(r.ci95.1));
            out.push_str(&format!(
                "<line class=\"whisker\" x1=\"{cx:.2}\" y1=\"{ylo:.2}\" x2=\"{cx:.2}\" y2=\"{yhi:.2}\" stroke=\"#222\" stroke-width=\"1.5\"/>\n"
            ));
            for ye in [ylo, yhi] {
                out.push_str(&format!(
                    "<line x1=\"{:.2}\" y1=\"{ye:.2}\" x2=\"{:.2}\" y2=\"{ye:.2}\" stroke=\"#222\" stroke-width=\"1.5\"/>\n",
                    cx - 7.0,
                    cx + 7.0
                ));
            }
        }
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#111\">{:.3}</text>\n",
            cx,
            rect_y - 5.0,
            r.point
        ));
        out.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" fill=\"#333\" \
             transform=\"rotate(-30 {cx:.2} {0:.2})\">{1}</text>\n",
            bottom + 16.0,
            svg_escape(&r.name)
        ));
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(warnings)
}

/// One labelled series over training-set fractions.
#[derive(Clone, Debug)]
pub struct FractionCurve {
    pub label: String,
    /// (fraction, report) pairs; drawn in ascending fraction order.
    pub points: Vec<(f64, MetricReport)>,
}

pub fn render_fraction_curves(
    curves: &[FractionCurve],
    title: &str,
    path: &Path,
) -> Result<()> {
    if curves.is_empty() || curves.iter().any(|c| c.points.is_empty()) {
        return Err(Error::data("empty fraction curve".to_string()));
    }
    let (left, right_pad, top, bottom_pad) = (70.0, 150.0, 48.0, 60.0);
    let (width, height) = (720.0, 420.0);
    let bottom = height - bottom_pad;
    let plot_right = width - right_pad;
    let scale = YScale::fit(
        curves
            .iter()
            .flat_map(|c| c.points.iter())
            .flat_map(|(_, r)| [r.point, r.ci95.0, r.ci95.1]),
        top,
        bottom,
    );
    let x_of = |f: f64| left + f.clamp(0.0, 1.0) * (plot_right - left);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" fill=\"#111\">{}</text>\n",
        (left + plot_right) / 2.0,
        svg_escape(title)
    ));
    axes(&mut out, &scale, left, plot_right);
    for fx in [0.0, 0.25, 0.5, 0.75, 1.0] {
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#444\">{fx}</text>\n",
            x_of(fx),
            bottom + 18.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#111\">training fraction</text>\n",
        (left + plot_right) / 2.0,
        bottom + 40.0
    ));
    for (ci, curve) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut pts = curve.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let poly: Vec<String> = pts
            .iter()
            .map(|(f, r)| format!("{:.2},{:.2}", x_of(*f), scale.y(r.point)))
            .collect();
        out.push_str(&format!(
            "<polyline class=\"curve\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            poly.join(" ")
        ));
        for (f, r) in &pts {
            let (x, y) = (x_of(*f), scale.y(r.point));
            if r.method != UncertaintyMethod::Point {
                out.push_str(&format!(
                    "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"1.2\"/>\n",
                    scale.y(r.ci95.0),
                    scale.y(r.ci95.1)
                ));
            }
            out.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3.2\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = top + 16.0 * ci as f64;
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"11\" height=\"11\" fill=\"{color}\"/>\n",
            plot_right + 12.0,
            ly
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#111\">{}</text>\n",
            plot_right + 28.0,
            ly + 9.0,
            svg_escape(&curve.label)
        ));
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Summary table, one row per report. `read_summary_csv` inverts it
/// exactly (f64 text is shortest-roundtrip).
pub fn write_summary_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "name,point,se,ci_lo,ci_hi,n,method,redraws,pathological"
    )?;
    for r in reports {
        let n = r
            .n
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.name,
            r.point,
            r.se,
            r.ci95.0,
            r.ci95.1,
            n,
            method_str(r.method),
            r.redraws,
            r.pathological
        )?;
    }
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if rec.len() != 9 {
            return Err(Error::data(format!(
                "{}: expected 9 columns, got {}",
                path.display(),
                rec.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::data(format!("bad number '{}'", &rec[i])))
        };
        let n = if rec[5].is_empty() {
            Vec::new()
        } else {
            rec[5]
                .split(';')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::data(format!("bad count '{s}'")))
                })
                .collect::<Result<_>>()?
        };
        out.push(MetricReport {
            name: rec[0].to_string(),
            point: f(1)?,
            se: f(2)?,
            ci95: (f(3)?, f(4)?),
            n,
            method: method_from_str(&rec[6])?,
            redraws: rec[7]
                .parse()
                .map_err(|_| Error::data(format!("bad redraws '{}'", &rec[7])))?,
            pathological: rec[8]
                .parse()
                .map_err(|_| Error::data(format!("bad flag '{}'", &rec[8])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_reports() -> Vec<MetricReport> {
        vec![
            MetricReport {
                name: "auroc/model_a".into(),
                point: 0.87,
                se: 0.006,
                ci95: (0.858, 0.882),
                n: vec![120, 380],
                method: UncertaintyMethod::HanleyMcneil,
                redraws: 0,
                pathological: false,
            },
            MetricReport {
                name: "auroc/model_b".into(),
                point: 0.798,
                se: 0.0061,
                ci95: (0.786, 0.81),
                n: vec![120, 380],
                method: UncertaintyMethod::Bootstrap,
                redraws: 3,
                pathological: false,
            },
            MetricReport::point_only("dice", 0.71, vec![41]),
        ]
    }

    #[test]
    fn summary_csv_roundtrips_exactly() {
        let reports = sample_reports();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("summary.csv");
        write_summary_csv(&reports, &p).unwrap();
        let back = read_summary_csv(&p).unwrap();
        assert_eq!(reports, back);
        // awkward values still roundtrip bit-exactly
        let tricky = vec![MetricReport {
            name: "mae".into(),
            point: 0.1 + 0.2,
            se: 1.0 / 3.0,
            ci95: (f64::MIN_POSITIVE, 1e300),
            n: vec![],
            method: UncertaintyMethod::Bootstrap,
            redraws: 100,
            pathological: true,
        }];
        write_summary_csv(&tricky, &p).unwrap();
        assert_eq!(tricky, read_summary_csv(&p).unwrap());
    }

    #[test]
    fn single_report_bar_has_whiskers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bar.svg");
        let warnings = render_bar_chart(&sample_reports()[..1], "one task", &p).unwrap();
        assert!(warnings.is_empty());
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("class=\"bar\"").count(), 1);
        assert_eq!(svg.matches("class=\"whisker\"").count(), 1);
    }

    #[test]
    fn bars_keep_input_order_and_point_only_warns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bars.svg");
        let mut reports = Vec::new();
        for (i, name) in ["m1", "m2", "m3", "m4", "m5"].iter().enumerate() {
            let mut r = sample_reports()[0].clone();
            r.name = name.to_string();
            r.point = 0.5 + 0.05 * i as f64;
            reports.push(r);
        }
        reports[2].method = UncertaintyMethod::Point;
        let warnings = render_bar_chart(&reports, "five models", &p).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("m3"));
        let svg = std::fs::read_to_string(&p).unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 5);
        assert_eq!(svg.matches("class=\"whisker\"").count(), 4);
        // x positions ascend in input order
        let xs: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("class=\"bar\""))
            .map(|l| {
                let s = l.split("x=\"").nth(1).unwrap();
                s[..s.find('"').unwrap()].parse::<f64>().unwrap()
            })
            .collect();
        for w in xs.windows(2) {
            assert!(w[0] < w[1]);
        }
        // labels present in order
        let p1 = svg.find(">m1<").unwrap();
        let p5 = svg.find(">m5<").unwrap();
        assert!(p1 < p5);
    }

    #[test]
    fn fraction_curves_render_all_points() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("frac.svg");
        let mk = |point: f64| MetricReport {
            point,
            ..sample_reports()[0].clone()
        };
        let curves = vec![
            FractionCurve {
                label: "ours".into(),
                points: vec![(1.0, mk(0.9)), (0.2, mk(0.8)), (0.5, mk(0.85))],
            },
            FractionCurve {
                label: "baseline".into(),
                points: vec![(0.2, mk(0.7)), (0.5, mk(0.74)), (1.0, mk(0.78))],
            },
        ];
        render_fraction_curves(&curves, "label efficiency", &p).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert_eq!(svg.matches("class=\"curve\"").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains(">ours<") && svg.contains(">baseline<"));
        // polyline points are sorted by fraction: first curve starts at x of 0.2
        let poly = svg.lines().find(|l| l.contains("polyline")).unwrap();
        let pts: Vec<&str> = poly.split("points=\"").nth(1).unwrap().split('"').next().unwrap().split(' ').collect();
        assert_eq!(pts.len(), 3);
        let x0: f64 = pts[0].split(',').next().unwrap().parse().unwrap();
        let x2: f64 = pts[2].split(',').next().unwrap().parse().unwrap();
        assert!(x0 < x2);

        assert!(render_fraction_curves(&[], "x", &p).is_err());
    }

    #[test]
    fn empty_report_list_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_bar_chart(&[], "t", &dir.path().join("x.svg")).is_err());
    }
}
