//! Experiment reports and plot artifacts: provenance-stamped JSON, flat CSV
//! for table assembly, a minimal SVG emitter for quick-look charts, and a
//! rank-correlation helper for trend checks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{PsnrStats, SsimStats};

pub fn code_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// Hex SHA-256 of a config's serialized form; stamped into every report.
pub fn config_hash(config_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub asr: f64,
    pub benign_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Which knob was swept: "poison_rate", "rho", "tau", or "delta".
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub code_version: String,
    pub dataset: String,
    pub benign_accuracy: f64,
    /// Benign accuracy of a control model trained on the clean set, when one
    /// was trained.
    pub clean_control_accuracy: Option<f64>,
    /// Absent when evaluating without any poisoning.
    pub asr: Option<f64>,
    pub psnr_stats: Option<PsnrStats>,
    pub ssim_stats: Option<SsimStats>,
    pub ssim_windowed_mean: Option<f64>,
    #[serde(default)]
    pub sweeps: Vec<SweepResult>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self).map_err(std::io::Error::other)
    }

    pub fn load(path: &Path) -> std::io::Result<EvalReport> {
        let s = std::fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(std::io::Error::other)
    }

    /// One flat CSV row per experiment for table assembly.
    pub fn csv_row(&self) -> (Vec<&'static str>, Vec<String>) {
        let header = vec!["dataset", "benign_accuracy", "clean_control", "asr", "psnr_mean", "ssim_mean", "config_hash"];
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let row = vec![
            self.dataset.clone(),
            format!("{}", self.benign_accuracy),
            fmt_opt(self.clean_control_accuracy),
            fmt_opt(self.asr),
            self.psnr_stats.as_ref().map_or(String::new(), |p| {
                serde_json::to_string(&p.mean).unwrap().trim_matches('"').to_string()
            }),
            self.ssim_stats.as_ref().map_or(String::new(), |s| format!("{}", s.mean)),
            self.config_hash.clone(),
        ];
        (header, row)
    }
}

/// Spearman rank correlation; average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    assert!(n >= 2);
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn svg_head(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        SVG_W / 2.0
    )
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart: one polyline per named series of (x, y) points.
pub fn write_line_svg(
    path: &Path,
    title: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> std::io::Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    assert!(!all.is_empty(), "empty chart");
    let (x0, x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(x, _)| (a.min(x), b.max(x)));
    let (y0, y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, y)| (a.min(y), b.max(y)));
    let (xs, ys) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let px = |x: f64| MARGIN + (x - x0) / xs * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - (y - y0) / ys * (SVG_H - 2.0 * MARGIN);

    let mut s = svg_head(title);
    s += &format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lbl}\" font-family=\"sans-serif\" font-size=\"10\">{x0:.3} .. {x1:.3}</text>\n\
         <text x=\"5\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"10\">{y1:.3}</text>\n\
         <text x=\"5\" y=\"{b}\" font-family=\"sans-serif\" font-size=\"10\">{y0:.3}</text>\n",
        m = MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN,
        b = SVG_H - MARGIN,
        lbl = SVG_H - MARGIN + 15.0,
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", coords.join(" "));
        s += &format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            SVG_W - MARGIN + 2.0 - 80.0,
            MARGIN + 14.0 * (i as f64 + 1.0)
        );
    }
    s += "</svg>\n";
    std::fs::write(path, s)
}

/// Bar chart from labeled values.
pub fn write_bar_svg(path: &Path, title: &str, bars: &[(String, f64)]) -> std::io::Result<()> {
    assert!(!bars.is_empty(), "empty chart");
    let top = bars.iter().map(|&(_, v)| v).fold(0.0f64, f64::max).max(1e-12);
    let span = SVG_W - 2.0 * MARGIN;
    let bw = span / bars.len() as f64;
    let mut s = svg_head(title);
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (v / top) * (SVG_H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * bw;
        let y = SVG_H - MARGIN - h;
        s += &format!(
            "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#1f77b4\"/>\n",
            x + bw * 0.1,
            bw * 0.8
        );
        s += &format!(
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{label}</text>\n",
            x + bw / 2.0,
            SVG_H - MARGIN + 15.0
        );
        s += &format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">{v:.3}</text>\n",
            x + bw / 2.0,
            y - 3.0
        );
    }
    s += &format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n</svg>\n",
        m = MARGIN,
        r = SVG_W - MARGIN,
        b = SVG_H - MARGIN
    );
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_content_sensitive() {
        let a = config_hash("{\"x\":1}");
        assert_eq!(a, config_hash("{\"x\":1}"));
        assert_ne!(a, config_hash("{\"x\":2}"));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn spearman_monotone_extremes() {
        let xs = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let inc = vec![0.1, 0.3, 0.35, 0.8, 0.9];
        let dec: Vec<f64> = inc.iter().rev().cloned().collect();
        assert!((spearman(&xs, &inc) - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &dec) + 1.0).abs() < 1e-12);
    }

    /// Hand-computed oracle: x = [1,2,3,4], y = [2,1,4,3] → ranks equal
    /// values, d = [1,-1,1,-1] (rank diffs ±1), Σd² = 4,
    /// ρ = 1 − 6·4/(4·15) = 0.6.
    #[test]
    fn spearman_hand_example() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        let ys = vec![2.0, 1.0, 4.0, 3.0];
        assert!((spearman(&xs, &ys) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn spearman_constant_series_is_zero() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn eval_report_round_trips_and_emits_csv() {
        use crate::metrics::{Psnr, PsnrStats, SsimStats};
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport {
            config_hash: config_hash("{}"),
            code_version: code_version(),
            dataset: "synth".into(),
            benign_accuracy: 0.97,
            clean_control_accuracy: Some(0.98),
            asr: Some(0.91),
            psnr_stats: Some(PsnrStats {
                mean: Psnr::Finite(44.0),
                min: Psnr::Finite(40.0),
                max: Psnr::Infinite,
                infinite_count: 1,
                count: 10,
            }),
            ssim_stats: Some(SsimStats { mean: 0.95, min: 0.9, max: 1.0 }),
            ssim_windowed_mean: Some(0.97),
            sweeps: vec![SweepResult {
                parameter: "rho".into(),
                points: vec![SweepPoint { value: 0.1, asr: 0.2, benign_accuracy: 0.97 }],
            }],
        };
        let p = dir.path().join("eval.json");
        r.save(&p).unwrap();
        assert_eq!(EvalReport::load(&p).unwrap(), r);
        let (header, row) = r.csv_row();
        assert_eq!(header.len(), row.len());
        assert_eq!(row[3], "0.91");
    }

    #[test]
    fn svg_emitters_produce_wellformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("line.svg");
        write_line_svg(
            &lp,
            "asr vs rho",
            &[("asr", vec![(0.1, 0.2), (0.5, 0.8), (0.9, 0.95)]), ("ba", vec![(0.1, 0.97), (0.9, 0.96)])],
        )
        .unwrap();
        let s = std::fs::read_to_string(&lp).unwrap();
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));

        let bp = dir.path().join("bar.svg");
        write_bar_svg(&bp, "anomaly", &[("c0".into(), 0.4), ("c1".into(), 2.5)]).unwrap();
        let b = std::fs::read_to_string(&bp).unwrap();
        assert_eq!(b.matches("<rect").count(), 3); // background + 2 bars
    }
}
