//! Confusion counts against ground truth and the seven change-detection
//! metrics derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth_io::{GtFrame, GtLabel, MaskFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts the pixels of `mask` against `gt`. Unknown and outside-ROI truth
/// and pixels outside `roi` are skipped; shadow counts as background.
pub fn accumulate(
    mask: &MaskFrame,
    gt: &GtFrame,
    roi: Option<&MaskFrame>,
) -> Result<ConfusionCounts> {
    mask.ensure_same_dims(gt, "mask vs ground truth")?;
    if let Some(r) = roi {
        mask.ensure_same_dims(r, "mask vs ROI")?;
    }
    let mut c = ConfusionCounts::default();
    for (p, (m, g)) in mask.data.iter().zip(&gt.data).enumerate() {
        if roi.is_some_and(|r| !r.data[p].is_fg()) {
            continue;
        }
        let truth = match g {
            GtLabel::Foreground => true,
            GtLabel::Background | GtLabel::Shadow => false,
            GtLabel::Unknown | GtLabel::OutsideRoi => continue,
        };
        match (m.is_fg(), truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metric values; `None` marks a 0/0 ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub pwc: Option<f64>,
    pub precision: Option<f64>,
    pub f_measure: Option<f64>,
}

pub const METRIC_NAMES: [&str; 7] = [
    "Recall",
    "Specificity",
    "FPR",
    "FNR",
    "PWC",
    "Precision",
    "F-Measure",
];

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.recall,
            self.specificity,
            self.fpr,
            self.fnr,
            self.pwc,
            self.precision,
            self.f_measure,
        ]
    }

    pub fn from_values(v: [Option<f64>; 7]) -> Self {
        MetricReport {
            recall: v[0],
            specificity: v[1],
            fpr: v[2],
            fnr: v[3],
            pwc: v[4],
            precision: v[5],
            f_measure: v[6],
        }
    }
}

pub fn compute_metrics(c: ConfusionCounts) -> MetricReport {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f_measure = match (precision, recall) {
        (Some(p), Some(r)) => ratio(2.0 * p * r, p + r),
        _ => None,
    };
    MetricReport {
        recall,
        specificity: ratio(tn, tn + fp),
        fpr: ratio(fp, fp + tn),
        fnr: ratio(fn_, tp + fn_),
        pwc: ratio(100.0 * (fn_ + fp), tp + fn_ + fp + tn),
        precision,
        f_measure,
    }
}

/// Mean of several reports and, per metric, how many defined values it
/// averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragedReport {
    pub report: MetricReport,
    pub contributors: [usize; 7],
}

/// Unweighted per-metric mean, skipping undefined entries.
pub fn average_reports(reports: &[MetricReport]) -> Result<AveragedReport> {
    if reports.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums = [0.0; 7];
    let mut counts = [0usize; 7];
    for r in reports {
        for (k, v) in r.values().into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let mut means = [None; 7];
    for k in 0..7 {
        if counts[k] > 0 {
            means[k] = Some(sums[k] / counts[k] as f64);
        }
    }
    Ok(AveragedReport {
        report: MetricReport::from_values(means),
        contributors: counts,
    })
}

/// One evaluated video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub category: String,
    pub video: String,
    pub counts: ConfusionCounts,
    pub report: MetricReport,
}

impl VideoResult {
    pub fn new(category: impl Into<String>, video: impl Into<String>, counts: ConfusionCounts) -> Self {
        VideoResult {
            category: category.into(),
            video: video.into(),
            counts,
            report: compute_metrics(counts),
        }
    }
}

/// Per-video rows, then one average row per category, then the overall
/// average of the category averages.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<(String, MetricReport)>,
}

impl MetricTable {
    pub fn build(results: &[VideoResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rows: Vec<(String, MetricReport)> =
            results.iter().map(|r| (r.video.clone(), r.report)).collect();
        let mut by_cat: BTreeMap<&str, Vec<MetricReport>> = BTreeMap::new();
        for r in results {
            by_cat.entry(&r.category).or_default().push(r.report);
        }
        let mut cat_means = Vec::new();
        let multi = by_cat.len() > 1;
        for (cat, reports) in &by_cat {
            let avg = average_reports(reports)?.report;
            if multi {
                rows.push((format!("avg:{cat}"), avg));
            }
            cat_means.push(avg);
        }
        rows.push(("average".into(), average_reports(&cat_means)?.report));
        Ok(MetricTable { rows })
    }

    pub fn average(&self) -> &MetricReport {
        &self.rows.last().expect("table has an average row").1
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("video");
        for n in METRIC_NAMES {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, r) in &self.rows {
            s.push_str(name);
            for v in r.values() {
                s.push(',');
                s.push_str(&fmt_value(v));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .chain(["video".len()])
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<name_w$}", "video");
        for n in METRIC_NAMES {
            let _ = write!(s, "  {n:>11}");
        }
        s.push('\n');
        for (name, r) in &self.rows {
            let _ = write!(s, "{name:<name_w$}");
            for v in r.values() {
                let _ = write!(s, "  {:>11}", fmt_value(v));
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses a table written by [`MetricTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Csv("empty metric table".into()))?;
        if header.split(',').count() != 8 {
            return Err(Error::Csv(format!("unexpected header: {header}")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 8 {
                return Err(Error::Csv(format!("row {}: expected 8 cells", n + 1)));
            }
            let mut vals = [None; 7];
            for (k, cell) in cells[1..].iter().enumerate() {
                vals[k] = match *cell {
                    "NaN" => None,
                    c => Some(
                        c.parse::<f64>()
                            .map_err(|e| Error::Csv(format!("row {}: {e}", n + 1)))?,
                    ),
                };
            }
            rows.push((cells[0].to_string(), MetricReport::from_values(vals)));
        }
        Ok(MetricTable { rows })
    }
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NaN".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_io::{Grid, MaskLabel};
    use proptest::prelude::*;

    const FG: MaskLabel = MaskLabel::Foreground;
    const BG: MaskLabel = MaskLabel::Background;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn four_pixel_enumeration() {
        let gt = Grid::from_vec(
            4,
            1,
            vec![GtLabel::Foreground, GtLabel::Foreground, GtLabel::Background, GtLabel::Background],
        )
        .unwrap();
        let mask = Grid::from_vec(4, 1, vec![FG, BG, FG, BG]).unwrap();
        assert_eq!(accumulate(&mask, &gt, None).unwrap(), counts(1, 1, 1, 1));
    }

    #[test]
    fn exclusions() {
        let gt = Grid::filled(3, 3, GtLabel::Unknown);
        let mask = Grid::filled(3, 3, FG);
        assert_eq!(accumulate(&mask, &gt, None).unwrap(), ConfusionCounts::default());

        let gt = Grid::from_vec(
            4,
            1,
            vec![GtLabel::Shadow, GtLabel::OutsideRoi, GtLabel::Foreground, GtLabel::Foreground],
        )
        .unwrap();
        let mask = Grid::from_vec(4, 1, vec![FG, FG, FG, FG]).unwrap();
        let roi = Grid::from_vec(4, 1, vec![FG, FG, FG, BG]).unwrap();
        assert_eq!(accumulate(&mask, &gt, Some(&roi)).unwrap(), counts(1, 1, 0, 0));
    }

    #[test]
    fn dims_checked() {
        let gt = Grid::filled(3, 3, GtLabel::Background);
        let mask = Grid::filled(3, 2, FG);
        assert!(matches!(
            accumulate(&mask, &gt, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fixture() {
        let r = compute_metrics(counts(50, 10, 25, 915));
        let close = |v: Option<f64>, e: f64| assert!((v.unwrap() - e).abs() < 1e-6, "{v:?} vs {e}");
        close(r.recall, 0.666667);
        close(r.precision, 0.833333);
        close(r.specificity, 0.989189);
        close(r.fpr, 0.010811);
        close(r.fnr, 0.333333);
        close(r.pwc, 3.5);
        close(r.f_measure, 0.740741);
    }

    #[test]
    fn undefined_ratios() {
        let r = compute_metrics(counts(0, 3, 0, 10));
        assert_eq!(r.recall, None);
        assert_eq!(r.fnr, None);
        assert_eq!(r.f_measure, None);
        assert_eq!(r.precision, Some(0.0));
        let empty = compute_metrics(ConfusionCounts::default());
        assert!(empty.values().iter().all(Option::is_none));
        // precision and recall both 0
        let r = compute_metrics(counts(0, 5, 5, 0));
        assert_eq!(r.f_measure, None);
    }

    #[test]
    fn perfect_and_all_wrong() {
        let r = compute_metrics(counts(20, 0, 0, 80));
        assert_eq!(r.pwc, Some(0.0));
        assert_eq!(r.f_measure, Some(1.0));
        let r = compute_metrics(counts(0, 80, 20, 0));
        assert_eq!(r.pwc, Some(100.0));
    }

    #[test]
    fn averaging() {
        let a = MetricReport {
            f_measure: Some(0.8),
            ..Default::default()
        };
        let b = MetricReport {
            f_measure: Some(0.6),
            ..Default::default()
        };
        let avg = average_reports(&[a, b]).unwrap();
        assert!((avg.report.f_measure.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(avg.contributors[6], 2);
        assert_eq!(avg.report.recall, None);

        let one = average_reports(&[a, MetricReport::default()]).unwrap();
        assert_eq!(one.report.f_measure, Some(0.8));
        assert_eq!(one.contributors[6], 1);

        let r = compute_metrics(counts(3, 4, 5, 6));
        assert_eq!(average_reports(&[r]).unwrap().report, r);
        assert!(average_reports(&[]).is_err());
    }

    #[test]
    fn table_csv_roundtrip_and_layout() {
        let results = vec![
            VideoResult::new("a", "v1", counts(50, 10, 25, 915)),
            VideoResult::new("a", "v2", counts(0, 3, 0, 10)),
            VideoResult::new("b", "v3", counts(10, 0, 0, 10)),
        ];
        let table = MetricTable::build(&results).unwrap();
        let names: Vec<_> = table.rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["v1", "v2", "v3", "avg:a", "avg:b", "average"]);
        let csv = table.to_csv();
        assert!(csv.starts_with("video,Recall,Specificity,FPR,FNR,PWC,Precision,F-Measure\n"));
        assert!(csv.contains("NaN"));
        let back = MetricTable::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        let text = table.to_text();
        assert_eq!(text.lines().count(), 7);
        let widths: Vec<_> = text.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn single_category_has_only_overall_average() {
        let results = vec![VideoResult::new("c", "v", counts(1, 1, 1, 1))];
        let table = MetricTable::build(&results).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.average(), &results[0].report);
    }

    fn labels() -> impl Strategy<Value = (usize, usize, Vec<(u8, bool, bool)>)> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            (
                Just(w),
                Just(h),
                prop::collection::vec((0u8..5, any::<bool>(), any::<bool>()), w * h),
            )
        })
    }

    proptest! {
        #[test]
        fn tiles_merge_to_whole((w, h, px) in labels(), split in 0usize..9) {
            let gt_of = |v: &[(u8, bool, bool)]| v.iter().map(|p| GtLabel::ALL[p.0 as usize]).collect::<Vec<_>>();
            let m_of = |v: &[(u8, bool, bool)]| v.iter().map(|p| if p.1 { FG } else { BG }).collect::<Vec<_>>();
            let r_of = |v: &[(u8, bool, bool)]| v.iter().map(|p| if p.2 { FG } else { BG }).collect::<Vec<_>>();
            let whole = accumulate(
                &Grid::from_vec(w, h, m_of(&px)).unwrap(),
                &Grid::from_vec(w, h, gt_of(&px)).unwrap(),
                Some(&Grid::from_vec(w, h, r_of(&px)).unwrap()),
            ).unwrap();
            let cut = split.min(h) * w;
            let (top, bottom) = px.split_at(cut);
            let mut merged = ConfusionCounts::default();
            for part in [top, bottom] {
                if part.is_empty() { continue; }
                let ph = part.len() / w;
                merged = merged.merge(accumulate(
                    &Grid::from_vec(w, ph, m_of(part)).unwrap(),
                    &Grid::from_vec(w, ph, gt_of(part)).unwrap(),
                    Some(&Grid::from_vec(w, ph, r_of(part)).unwrap()),
                ).unwrap());
            }
            prop_assert_eq!(whole, merged);
        }

        #[test]
        fn complementary_rates(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000) {
            let r = compute_metrics(counts(tp, fp, fn_, tn));
            if let (Some(a), Some(b)) = (r.fpr, r.specificity) {
                prop_assert!((a - (1.0 - b)).abs() < 1e-12);
            }
            if let (Some(a), Some(b)) = (r.fnr, r.recall) {
                prop_assert!((a - (1.0 - b)).abs() < 1e-12);
            }
            for (k, v) in r.values().into_iter().enumerate() {
                if let Some(v) = v {
                    let hi = if k == 4 { 100.0 } else { 1.0 };
                    prop_assert!((0.0..=hi).contains(&v));
                }
            }
        }
    }
}
