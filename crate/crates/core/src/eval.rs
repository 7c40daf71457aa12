//! Error metrics, model comparison, APE distribution and label/feature
//! summaries for the analysis reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ArrivalSample;
use crate::error::{CoreError, Result};

/// Absolute-error thresholds (seconds) reported as "fraction under".
pub const ABS_ERR_THRESHOLDS: [u32; 3] = [30, 60, 120];

/// Published under-60 s rates and the improvement printed next to them.
pub const PUBLISHED_UNDER60_BASE: f64 = 51.07;
pub const PUBLISHED_UNDER60_PROPOSED: f64 = 79.40;
pub const PUBLISHED_UNDER60_IMPROVEMENT: f64 = 28.37;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    pub gamma: f64,
    pub bad_ratio: f64,
    pub ape: Vec<f64>,
    pub pct_abs_err_under: BTreeMap<u32, f64>,
}

/// RMSE, MAE, MAPE, BadRatio at `gamma`, per-sample APE and the fraction of
/// samples with absolute error under each of [`ABS_ERR_THRESHOLDS`].
pub fn metrics(y: &[f64], yhat: &[f64], gamma: f64) -> Result<EvalReport> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(CoreError::Data(format!(
            "metrics need equal non-empty lengths, got {} labels and {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(CoreError::Data(format!("labels must be positive durations, found {bad}")));
    }
    let n = y.len() as f64;
    let err: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| a - b).collect();
    let ape: Vec<f64> = err.iter().zip(y).map(|(e, v)| e.abs() / v).collect();
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mape = ape.iter().sum::<f64>() / n;
    let bad_ratio = ape.iter().filter(|&&a| a > gamma).count() as f64 / n;
    let pct_abs_err_under = ABS_ERR_THRESHOLDS
        .iter()
        .map(|&t| (t, err.iter().filter(|e| e.abs() < t as f64).count() as f64 / n))
        .collect();
    Ok(EvalReport { n: y.len(), rmse, mae, mape, gamma, bad_ratio, ape, pct_abs_err_under })
}

/// Sorted distinct APE values with the empirical CDF at each.
pub fn ape_cdf(report: &EvalReport) -> Vec<(f64, f64)> {
    let mut v = report.ape.clone();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &a) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == a => last.1 = frac,
            _ => out.push((a, frac)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub base: f64,
    pub proposed: f64,
    /// `proposed - base`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MetricDelta>,
    /// Gain in the under-60 s rate, percentage points.
    pub under60_improvement_pts: f64,
    /// Drop in BadRatio, percentage points.
    pub bad_ratio_drop_pts: f64,
    pub notes: Vec<String>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn compare(base: &EvalReport, proposed: &EvalReport) -> Result<Comparison> {
    if base.n != proposed.n {
        return Err(CoreError::Data(format!("reports cover {} and {} samples", base.n, proposed.n)));
    }
    let under = |r: &EvalReport| r.pct_abs_err_under.get(&60).copied().unwrap_or(f64::NAN);
    let row = |metric: &str, b: f64, p: f64| MetricDelta { metric: metric.into(), base: b, proposed: p, delta: p - b };
    let rows = vec![
        row("rmse", base.rmse, proposed.rmse),
        row("mae", base.mae, proposed.mae),
        row("mape", base.mape, proposed.mape),
        row("bad_ratio", base.bad_ratio, proposed.bad_ratio),
        row("under_60s", under(base), under(proposed)),
    ];
    let under60_improvement_pts = (under(proposed) - under(base)) * 100.0;
    let bad_ratio_drop_pts = (base.bad_ratio - proposed.bad_ratio) * 100.0;
    let mut notes = Vec::new();
    let matches_published = (under(base) * 100.0 - PUBLISHED_UNDER60_BASE).abs() < 0.005
        && (under(proposed) * 100.0 - PUBLISHED_UNDER60_PROPOSED).abs() < 0.005;
    if matches_published && (round2(under60_improvement_pts) - PUBLISHED_UNDER60_IMPROVEMENT).abs() > 0.005 {
        notes.push(format!(
            "published under-60s improvement is {PUBLISHED_UNDER60_IMPROVEMENT:.2} pts, but \
             {PUBLISHED_UNDER60_PROPOSED:.2} - {PUBLISHED_UNDER60_BASE:.2} = {:.2} pts",
            round2(under60_improvement_pts)
        ));
    }
    Ok(Comparison { rows, under60_improvement_pts, bad_ratio_drop_pts, notes })
}

impl Comparison {
    /// Baseline / proposed / delta table, two decimals, notes appended.
    pub fn to_table(&self) -> String {
        let mut s = String::from("metric,baseline,proposed,delta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.4},{:+.4}", r.metric, r.base, r.proposed, r.delta);
        }
        let _ = writeln!(s, "under_60s_improvement_pts,,,{:+.2}", self.under60_improvement_pts);
        let _ = writeln!(s, "bad_ratio_drop_pts,,,{:+.2}", self.bad_ratio_drop_pts);
        for n in &self.notes {
            let _ = writeln!(s, "# note: {n}");
        }
        s
    }
}

pub fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::from("n,rmse,mae,mape,gamma,bad_ratio");
    for t in report.pct_abs_err_under.keys() {
        let _ = write!(s, ",under_{t}s");
    }
    let _ = write!(
        s,
        "\n{},{},{},{},{},{}",
        report.n, report.rmse, report.mae, report.mape, report.gamma, report.bad_ratio
    );
    for v in report.pct_abs_err_under.values() {
        let _ = write!(s, ",{v}");
    }
    s.push('\n');
    fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

pub fn write_cdf_csv(path: &Path, cdf: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("ape,cdf\n");
    for (a, c) in cdf {
        let _ = writeln!(s, "{a},{c}");
    }
    fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl GroupSummary {
    fn of(group: impl Into<String>, mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        Self {
            group: group.into(),
            n: v.len(),
            min: v[0],
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub feature: String,
    pub group: String,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub by_recat: Vec<GroupSummary>,
    pub by_holding: Vec<GroupSummary>,
    pub histograms: Vec<HistogramBin>,
    pub notes: Vec<String>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Index of the RECAT code and holding-vector features in the sample vectors.
const RECAT_COL: usize = 11;
const HIST_FEATURES: [(&str, usize); 3] = [("dt_trc", 1), ("dv_avg", 2), ("dv_lead", 3)];

fn group_name(holding: bool) -> &'static str {
    if holding {
        "holding"
    } else {
        "non_holding"
    }
}

/// Label quantiles per RECAT class and per holding status, plus histograms
/// of the holding features split by status. Samples must be unnormalized.
/// Samples with no holding verdict are left out of the holding groups.
pub fn analysis_report(samples: &[ArrivalSample], holdings: &BTreeMap<String, bool>) -> Result<AnalysisReport> {
    if samples.is_empty() {
        return Err(CoreError::Data("analysis needs at least one sample".into()));
    }
    let mut report = AnalysisReport::default();
    let mut recat: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for s in samples {
        recat.entry(s.tabular[RECAT_COL] as u8).or_default().push(s.label_seconds);
    }
    report.by_recat = recat.into_iter().map(|(k, v)| GroupSummary::of(k.to_string(), v)).collect();

    let status = |s: &ArrivalSample| holdings.get(&s.aircraft_id).copied();
    for h in [true, false] {
        let v: Vec<f64> = samples.iter().filter(|s| status(s) == Some(h)).map(|s| s.label_seconds).collect();
        if v.is_empty() {
            report.notes.push(format!("no {} samples; group omitted", group_name(h)));
        } else {
            report.by_holding.push(GroupSummary::of(group_name(h), v));
        }
    }

    for (name, col) in HIST_FEATURES {
        let all: Vec<f64> = samples.iter().filter(|s| status(s).is_some()).map(|s| s.holding[col]).collect();
        if all.is_empty() {
            continue;
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
        for h in [true, false] {
            let mut counts = [0usize; HISTOGRAM_BINS];
            let vals = samples.iter().filter(|s| status(s) == Some(h)).map(|s| s.holding[col]);
            let mut any = false;
            for v in vals {
                any = true;
                counts[(((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
            }
            if !any {
                continue;
            }
            for (i, &count) in counts.iter().enumerate() {
                report.histograms.push(HistogramBin {
                    feature: name.into(),
                    group: group_name(h).into(),
                    lo: lo + i as f64 * width,
                    hi: lo + (i + 1) as f64 * width,
                    count,
                });
            }
        }
    }
    Ok(report)
}

fn summaries_csv(rows: &[GroupSummary], key: &str) -> String {
    let mut s = format!("{key},n,min,q25,median,q75,max\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.group, r.n, r.min, r.q25, r.median, r.q75, r.max);
    }
    s
}

impl AnalysisReport {
    /// Writes `analysis_recat.csv`, `analysis_holding.csv` and
    /// `analysis_features.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| CoreError::io(&p, e))
        };
        put("analysis_recat.csv", summaries_csv(&self.by_recat, "recat"))?;
        put("analysis_holding.csv", summaries_csv(&self.by_holding, "group"))?;
        let mut s = String::from("feature,group,lo,hi,count\n");
        for b in &self.histograms {
            let _ = writeln!(s, "{},{},{},{},{}", b.feature, b.group, b.lo, b.hi, b.count);
        }
        put("analysis_features.csv", s)
    }
}

/// Minimal SVG line chart; each series is scaled into a shared box.
pub fn svg_lines(title: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{M}\" y=\"20\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M,
        H - M
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            coords.join(" "),
            W - M - 100.0,
            M + 16.0 * (i + 1) as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixtures() {
        let r = metrics(&[100.0], &[131.0], 0.3).unwrap();
        assert!((r.ape[0] - 0.31).abs() < 1e-12);
        assert_eq!(r.bad_ratio, 1.0);
        assert_eq!(r.mae, 31.0);
        let r = metrics(&[100.0, 200.0], &[110.0, 180.0], 0.3).unwrap();
        assert_eq!(r.mae, 15.0);
        assert!((r.rmse - 250f64.sqrt()).abs() < 1e-12);
        assert!((r.mape - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_labels() {
        assert!(metrics(&[0.0], &[1.0], 0.3).is_err());
        assert!(metrics(&[1.0], &[], 0.3).is_err());
    }

    #[test]
    fn cdf_steps() {
        let r = metrics(&[100.0, 100.0, 100.0], &[110.0, 90.0, 100.0], 0.3).unwrap();
        assert_eq!(ape_cdf(&r), vec![(0.0, 1.0 / 3.0), (0.1, 1.0)]);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
