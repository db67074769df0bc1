//! Per-class confusion counts, precision / sensitivity / specificity / Dice,
//! and table rendering.

use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{ClassPalette, IndexMask, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction {pred:?} and ground truth {gt:?} differ in size")]
    DimensionMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("pair {id}: {source}")]
    Pair {
        id: String,
        #[source]
        source: Box<MetricsError>,
    },
    #[error("malformed report csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub class_id: u8,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

fn check_dims(pred: &IndexMask, gt: &IndexMask) -> Result<(), MetricsError> {
    let (p, g) = ((pred.width(), pred.height()), (gt.width(), gt.height()));
    if p != g {
        return Err(MetricsError::DimensionMismatch { pred: p, gt: g });
    }
    Ok(())
}

/// One-vs-rest counts for `class_id`.
pub fn confusion(pred: &IndexMask, gt: &IndexMask, class_id: u8) -> Result<ConfusionCounts, MetricsError> {
    Ok(confusion_all(pred, gt)?[class_id as usize])
}

/// One-vs-rest counts for every class in a single pass.
pub fn confusion_all(pred: &IndexMask, gt: &IndexMask) -> Result<[ConfusionCounts; NUM_CLASSES], MetricsError> {
    check_dims(pred, gt)?;
    // joint[p][g] histogram
    let mut joint = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        joint[p as usize][g as usize] += 1;
    }
    let total = pred.data().len() as u64;
    let mut out = [ConfusionCounts::default(); NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let tp = joint[c][c];
        let pred_c: u64 = joint[c].iter().sum();
        let gt_c: u64 = joint.iter().map(|row| row[c]).sum();
        let fp = pred_c - tp;
        let fn_ = gt_c - tp;
        out[c] = ConfusionCounts { class_id: c as u8, tp, fp, fn_, tn: total - tp - fp - fn_ };
    }
    Ok(out)
}

/// Metric values; `None` marks a 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub dice: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    ClassMetrics {
        precision: ratio(c.tp, c.tp + c.fp),
        tpr: ratio(c.tp, c.tp + c.fn_),
        tnr: ratio(c.tn, c.tn + c.fp),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub pred: IndexMask,
    pub gt: IndexMask,
}

/// One table row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub label: String,
    pub metrics: ClassMetrics,
    /// Images contributing to P, TPR and Dice.
    pub images: usize,
    /// Images where the class is absent from the ground truth.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBreakdown {
    pub id: String,
    pub counts: [ConfusionCounts; NUM_CLASSES],
    pub metrics: [ClassMetrics; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Per-image averaged rows for classes 1..8 (background excluded).
    pub rows: Vec<ClassRow>,
    /// Mean of the defined values of `rows`.
    pub aggregate: ClassRow,
    /// Rows computed from counts pooled over all images.
    pub micro_rows: Vec<ClassRow>,
    pub micro_aggregate: ClassRow,
    pub per_image: Vec<ImageBreakdown>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate_rows(rows: &[ClassRow], label: &str, images: usize) -> ClassRow {
    let col = |f: fn(&ClassMetrics) -> Option<f64>| mean_defined(rows.iter().map(|r| f(&r.metrics)));
    ClassRow {
        label: label.to_string(),
        metrics: ClassMetrics {
            precision: col(|m| m.precision),
            tpr: col(|m| m.tpr),
            tnr: col(|m| m.tnr),
            dice: col(|m| m.dice),
            accuracy: col(|m| m.accuracy),
        },
        images,
        skipped: 0,
    }
}

pub const AGGREGATE_LABEL: &str = "mean";

pub fn evaluate_dataset(pairs: &[EvalPair], palette: &ClassPalette) -> Result<MetricsReport, MetricsError> {
    let mut per_image = Vec::with_capacity(pairs.len());
    for p in pairs {
        let counts = confusion_all(&p.pred, &p.gt)
            .map_err(|e| MetricsError::Pair { id: p.id.clone(), source: Box::new(e) })?;
        let metrics = counts.map(|c| class_metrics(&c));
        per_image.push(ImageBreakdown { id: p.id.clone(), counts, metrics });
    }

    let mut rows = Vec::new();
    let mut micro_rows = Vec::new();
    for class in 1..NUM_CLASSES {
        let present: Vec<&ImageBreakdown> =
            per_image.iter().filter(|img| img.counts[class].tp + img.counts[class].fn_ > 0).collect();
        let on_present = |f: fn(&ClassMetrics) -> Option<f64>| mean_defined(present.iter().map(|img| f(&img.metrics[class])));
        let on_all = |f: fn(&ClassMetrics) -> Option<f64>| mean_defined(per_image.iter().map(|img| f(&img.metrics[class])));
        let label = palette.name(class as u8).to_string();
        rows.push(ClassRow {
            label: label.clone(),
            metrics: ClassMetrics {
                precision: on_present(|m| m.precision),
                tpr: on_present(|m| m.tpr),
                dice: on_present(|m| m.dice),
                tnr: on_all(|m| m.tnr),
                accuracy: on_all(|m| m.accuracy),
            },
            images: present.len(),
            skipped: per_image.len() - present.len(),
        });

        let mut pooled = ConfusionCounts { class_id: class as u8, ..Default::default() };
        per_image.iter().for_each(|img| pooled.add(&img.counts[class]));
        micro_rows.push(ClassRow {
            label,
            metrics: class_metrics(&pooled),
            images: present.len(),
            skipped: per_image.len() - present.len(),
        });
    }
    let aggregate = aggregate_rows(&rows, AGGREGATE_LABEL, pairs.len());
    let micro_aggregate = aggregate_rows(&micro_rows, AGGREGATE_LABEL, pairs.len());
    Ok(MetricsReport { rows, aggregate, micro_rows, micro_aggregate, per_image })
}

/// Mean Dice over the classes present in the ground truth, per image, averaged over images.
pub fn mean_present_dice(report: &MetricsReport) -> Option<f64> {
    mean_defined(report.per_image.iter().map(|img| {
        mean_defined((1..NUM_CLASSES).filter(|&c| img.counts[c].tp + img.counts[c].fn_ > 0).map(|c| img.metrics[c].dice))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn fmt_full(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v}"))
}

pub const CSV_HEADER: &str = "class,precision,tpr,tnr,dice,images,skipped";

/// CSV content in row order: macro rows, macro mean, then `micro:` rows.
pub fn csv_rows(report: &MetricsReport) -> Vec<ClassRow> {
    let mut out: Vec<ClassRow> = report.rows.clone();
    out.push(report.aggregate.clone());
    for r in report.micro_rows.iter().chain(std::iter::once(&report.micro_aggregate)) {
        out.push(ClassRow { label: format!("micro:{}", r.label), ..r.clone() });
    }
    out
}

pub fn render_report(report: &MetricsReport, format: ReportFormat, with_accuracy: bool) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            let text_rows = |out: &mut String, rows: &[ClassRow], agg: &ClassRow| {
                let acc_h = if with_accuracy { format!(" {:>6}", "Acc") } else { String::new() };
                let _ = writeln!(out, "{:<12} {:>6} {:>6} {:>6} {:>6}{acc_h}", "Class", "P", "TP", "TN", "D");
                for r in rows.iter().chain(std::iter::once(agg)) {
                    let m = &r.metrics;
                    let acc = if with_accuracy { format!(" {:>6}", fmt3(m.accuracy)) } else { String::new() };
                    let _ = writeln!(
                        out,
                        "{:<12} {:>6} {:>6} {:>6} {:>6}{acc}",
                        r.label,
                        fmt3(m.precision),
                        fmt3(m.tpr),
                        fmt3(m.tnr),
                        fmt3(m.dice)
                    );
                }
            };
            let _ = writeln!(out, "Per-image average ({} images)", report.per_image.len());
            text_rows(&mut out, &report.rows, &report.aggregate);
            let _ = writeln!(out);
            let _ = writeln!(out, "Pooled counts");
            text_rows(&mut out, &report.micro_rows, &report.micro_aggregate);
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{CSV_HEADER}{}", if with_accuracy { ",accuracy" } else { "" });
            for r in csv_rows(report) {
                let m = &r.metrics;
                let acc = if with_accuracy { format!(",{}", fmt_full(m.accuracy)) } else { String::new() };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}{acc}",
                    r.label,
                    fmt_full(m.precision),
                    fmt_full(m.tpr),
                    fmt_full(m.tnr),
                    fmt_full(m.dice),
                    r.images,
                    r.skipped
                );
            }
        }
    }
    out
}

/// Parses CSV written by [`render_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ClassRow>, MetricsError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or_default();
    let with_accuracy = match header {
        h if h == CSV_HEADER => false,
        h if h == format!("{CSV_HEADER},accuracy") => true,
        _ => return Err(MetricsError::Csv { line: 1, reason: format!("unexpected header {header:?}") }),
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| MetricsError::Csv { line: i + 1, reason };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 + usize::from(with_accuracy) {
            return Err(err(format!("expected {} fields, got {}", 7 + usize::from(with_accuracy), f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>, MetricsError> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| err(format!("bad number {s:?}")))
            }
        };
        let count = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad count {s:?}")));
        rows.push(ClassRow {
            label: f[0].to_string(),
            metrics: ClassMetrics {
                precision: num(f[1])?,
                tpr: num(f[2])?,
                tnr: num(f[3])?,
                dice: num(f[4])?,
                accuracy: if with_accuracy { num(f[7])? } else { None },
            },
            images: count(f[5])?,
            skipped: count(f[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::default_palette;

    fn mask(w: usize, h: usize, d: &[u8]) -> IndexMask {
        IndexMask::new(w, h, d.to_vec()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let gt = mask(2, 2, &[1, 1, 0, 2]);
        let c = confusion(&gt, &gt, 1).unwrap();
        assert_eq!((c.fp, c.fn_, c.tp), (0, 0, 2));

        let pred = IndexMask::filled(4, 4, 3);
        let bg = IndexMask::filled(4, 4, 0);
        let c = confusion(&pred, &bg, 3).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (0, 16, 0, 0));

        assert!(matches!(
            confusion(&IndexMask::filled(2, 2, 0), &IndexMask::filled(3, 2, 0), 0),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn metric_examples() {
        let absent = class_metrics(&ConfusionCounts { class_id: 1, tp: 0, fp: 0, tn: 9, fn_: 0 });
        assert_eq!((absent.precision, absent.tpr, absent.dice), (None, None, None));
        assert_eq!(absent.tnr, Some(1.0));

        let m = class_metrics(&ConfusionCounts { class_id: 1, tp: 6, fp: 2, tn: 4, fn_: 4 });
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.tpr.unwrap() - 0.6).abs() < 1e-12);
        assert!((m.tnr.unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.dice.unwrap() - 12.0 / 18.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_report() {
        let gt = mask(4, 2, &[0, 1, 2, 3, 4, 5, 6, 7]);
        let pairs = [EvalPair { id: "a".into(), pred: gt.clone(), gt }];
        let r = evaluate_dataset(&pairs, &default_palette()).unwrap();
        assert_eq!(r.rows.len(), 7);
        for row in r.rows.iter().chain([&r.aggregate]) {
            let m = row.metrics;
            assert_eq!((m.precision, m.tpr, m.tnr, m.dice), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
        }
        assert_eq!(mean_present_dice(&r), Some(1.0));
    }

    #[test]
    fn absent_class_is_skipped() {
        let a = mask(2, 1, &[1, 0]);
        let b = mask(2, 1, &[2, 0]);
        let pairs = [
            EvalPair { id: "a".into(), pred: a.clone(), gt: a },
            EvalPair { id: "b".into(), pred: b.clone(), gt: b },
        ];
        let r = evaluate_dataset(&pairs, &default_palette()).unwrap();
        assert_eq!((r.rows[0].images, r.rows[0].skipped), (1, 1));
        assert_eq!(r.rows[0].metrics.dice, Some(1.0));
        // TNR averages over both images.
        assert_eq!(r.rows[0].metrics.tnr, Some(1.0));
    }

    #[test]
    fn pair_errors_carry_id() {
        let pairs = [EvalPair { id: "x7".into(), pred: IndexMask::filled(2, 2, 0), gt: IndexMask::filled(1, 2, 0) }];
        match evaluate_dataset(&pairs, &default_palette()) {
            Err(MetricsError::Pair { id, .. }) => assert_eq!(id, "x7"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn renders_table_row_and_undefined() {
        let row = |label: &str, v: [Option<f64>; 4]| ClassRow {
            label: label.into(),
            metrics: ClassMetrics { precision: v[0], tpr: v[1], tnr: v[2], dice: v[3], accuracy: None },
            images: 1,
            skipped: 0,
        };
        let report = MetricsReport {
            rows: vec![row("caries", [Some(0.418), Some(0.768), Some(0.973), Some(0.584)]), row("enamel", [None; 4])],
            aggregate: row("mean", [Some(0.5); 4]),
            micro_rows: vec![],
            micro_aggregate: row("mean", [None; 4]),
            per_image: vec![],
        };
        let text = render_report(&report, ReportFormat::Text, false);
        let caries: Vec<&str> = text.lines().find(|l| l.starts_with("caries")).unwrap().split_whitespace().collect();
        assert_eq!(caries, ["caries", "0.418", "0.768", "0.973", "0.584"]);
        let enamel: Vec<&str> = text.lines().find(|l| l.starts_with("enamel")).unwrap().split_whitespace().collect();
        assert_eq!(enamel, ["enamel", "-", "-", "-", "-"]);
    }

    #[test]
    fn csv_round_trip() {
        let gt = mask(3, 3, &[0, 1, 1, 2, 2, 3, 4, 5, 6]);
        let pred = mask(3, 3, &[0, 1, 2, 2, 3, 3, 4, 4, 7]);
        let pairs = [EvalPair { id: "a".into(), pred, gt }];
        let r = evaluate_dataset(&pairs, &default_palette()).unwrap();
        for acc in [false, true] {
            let csv = render_report(&r, ReportFormat::Csv, acc);
            let parsed = parse_report_csv(&csv).unwrap();
            let mut expected = csv_rows(&r);
            if !acc {
                expected.iter_mut().for_each(|row| row.metrics.accuracy = None);
            }
            assert_eq!(parsed, expected);
        }
        assert!(parse_report_csv("nope\n").is_err());
    }
}
