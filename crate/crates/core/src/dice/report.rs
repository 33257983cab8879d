//! Per-class Dice tables with AVG/MAX/MIN rows.

use std::io::Write;

use super::{hard_dsc, DiceError};
use crate::voxelgrid::LabelVolume;

/// Per-class DSC values in `[0, 1]` and their aggregates over all classes,
/// background included.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    class_names: Vec<String>,
    per_class: Vec<f64>,
    avg: f64,
    max: f64,
    min: f64,
}

impl DiceReport {
    pub fn from_values(class_names: Vec<String>, per_class: Vec<f64>) -> Result<Self, DiceError> {
        if class_names.len() != per_class.len() {
            return Err(DiceError::NameCount { expected: per_class.len(), found: class_names.len() });
        }
        if per_class.is_empty() {
            return Err(DiceError::Empty);
        }
        if let Some(i) = per_class.iter().position(|v| !v.is_finite()) {
            return Err(DiceError::NonFinite(i));
        }
        let avg = per_class.iter().sum::<f64>() / per_class.len() as f64;
        let max = per_class.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = per_class.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { class_names, per_class, avg, max, min })
    }

    /// Class-wise mean of several reports over the same classes.
    pub fn mean_of(reports: &[DiceReport]) -> Result<Self, DiceError> {
        let first = reports.first().ok_or(DiceError::Empty)?;
        let l = first.per_class.len();
        let mut sums = vec![0.0; l];
        for r in reports {
            if r.per_class.len() != l {
                return Err(DiceError::ClassMismatch { expected: l, found: r.per_class.len() });
            }
            for (s, v) in sums.iter_mut().zip(&r.per_class) {
                *s += v;
            }
        }
        let n = reports.len() as f64;
        Self::from_values(first.class_names.clone(), sums.into_iter().map(|s| s / n).collect())
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn per_class(&self) -> &[f64] {
        &self.per_class
    }

    pub fn avg(&self) -> f64 {
        self.avg
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    /// Mean over every class except class 0.
    pub fn mean_foreground(&self) -> f64 {
        let fg = &self.per_class[1.min(self.per_class.len())..];
        if fg.is_empty() {
            return self.avg;
        }
        fg.iter().sum::<f64>() / fg.len() as f64
    }

    /// Row values in table order: classes, then AVG, MAX, MIN.
    pub fn rows(&self) -> Vec<f64> {
        let mut rows = self.per_class.clone();
        rows.extend([self.avg, self.max, self.min]);
        rows
    }
}

/// A fraction rendered as a percentage with one decimal.
pub fn percent(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

pub fn dice_report(pred: &LabelVolume, truth: &LabelVolume, class_names: &[String]) -> Result<DiceReport, DiceError> {
    if class_names.len() != truth.num_classes() {
        return Err(DiceError::NameCount { expected: truth.num_classes(), found: class_names.len() });
    }
    let per_class = (0..truth.num_classes()).map(|c| hard_dsc(pred, truth, c)).collect::<Result<Vec<_>, _>>()?;
    DiceReport::from_values(class_names.to_vec(), per_class)
}

/// One column per run; a run without a report (diverged) prints as `diverged`.
#[derive(Debug, Clone, Default)]
pub struct ReportTable {
    pub columns: Vec<(String, Option<DiceReport>)>,
}

impl ReportTable {
    pub fn push(&mut self, label: impl Into<String>, report: Option<DiceReport>) {
        self.columns.push((label.into(), report));
    }

    /// Rows are classes followed by AVG, MAX, MIN; values are percentages.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let names: Vec<String> =
            self.columns.iter().find_map(|(_, r)| r.as_ref().map(|r| r.class_names.clone())).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["class".to_string()];
        header.extend(self.columns.iter().map(|(l, _)| l.clone()));
        w.write_record(&header)?;
        let row_names = names.iter().cloned().chain(["AVG", "MAX", "MIN"].map(String::from));
        for (i, name) in row_names.enumerate() {
            let mut rec = vec![name];
            for (_, r) in &self.columns {
                rec.push(match r {
                    Some(r) => percent(r.rows()[i]),
                    None => "diverged".to_string(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv");
        String::from_utf8(buf).expect("utf8 csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelgrid::Shape3;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn table_one_uniform_column() {
        let vals = [99.9, 80.4, 78.6, 96.5, 94.7, 96.3, 77.3, 82.7].map(|v| v / 100.0);
        let r = DiceReport::from_values(names(8), vals.to_vec()).unwrap();
        assert_eq!(percent(r.avg()), "88.3");
        assert_eq!(percent(r.max()), "99.9");
        assert_eq!(percent(r.min()), "77.3");
    }

    #[test]
    fn identical_volumes_give_ones() {
        let v = LabelVolume::new(Shape3::new(3, 1, 1).unwrap(), vec![0, 1, 1], 3).unwrap();
        let r = dice_report(&v, &v, &names(3)).unwrap();
        assert!(r.per_class().iter().all(|&d| d == 1.0));
        assert_eq!((r.avg(), r.max(), r.min()), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_class_mean() {
        let r = DiceReport::from_values(names(2), vec![1.0, 0.6]).unwrap();
        assert!((r.avg() - 0.8).abs() < 1e-15);
        assert_eq!(r.mean_foreground(), 0.6);
    }

    #[test]
    fn name_count_checked() {
        let v = LabelVolume::new(Shape3::new(1, 1, 1).unwrap(), vec![0], 3).unwrap();
        assert!(matches!(dice_report(&v, &v, &names(2)), Err(DiceError::NameCount { .. })));
    }

    #[test]
    fn csv_layout() {
        let mut t = ReportTable::default();
        t.push("a", Some(DiceReport::from_values(names(2), vec![1.0, 0.5]).unwrap()));
        t.push("b", None);
        assert_eq!(
            t.to_csv_string(),
            "class,a,b\nc0,100.0,diverged\nc1,50.0,diverged\nAVG,75.0,diverged\nMAX,100.0,diverged\nMIN,50.0,diverged\n"
        );
    }

    proptest::proptest! {
        #[test]
        fn aggregates_are_ordered(vals in proptest::collection::vec(0.0f64..=1.0, 1..10)) {
            let r = DiceReport::from_values(names(vals.len()), vals.clone()).unwrap();
            proptest::prop_assert!(r.min() <= r.avg() + 1e-15 && r.avg() <= r.max() + 1e-15);
            let all_equal = vals.iter().all(|&v| v == vals[0]);
            proptest::prop_assert_eq!(r.min() == r.max(), all_equal);
        }
    }
}
