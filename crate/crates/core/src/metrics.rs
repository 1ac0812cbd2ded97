//! Confusion-matrix accumulation, IoU/mIoU and the per-class results table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kitti::{CLASS_NAMES, IGNORE};

/// `K x K` counts, rows = ground truth, columns = prediction. Ground-truth
/// [`IGNORE`] entries are skipped; predictions outside `0..K` count as misses of
/// the ground-truth class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], missed: vec![0; classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes, "counts must be K x K");
        Self { classes, counts, missed: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: u8, pred: u8) {
        if gt == IGNORE || gt as usize >= self.classes {
            return;
        }
        if (pred as usize) < self.classes {
            self.counts[gt as usize * self.classes + pred as usize] += 1;
        } else {
            self.missed[gt as usize] += 1;
        }
    }

    pub fn add_all(&mut self, gt: &[u8], pred: &[u8]) {
        assert_eq!(gt.len(), pred.len(), "label arrays differ in length");
        for (&g, &p) in gt.iter().zip(pred) {
            self.add(g, p);
        }
    }

    /// Elementwise sum; the merge of per-worker matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "class count mismatch");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.missed.iter_mut().zip(&other.missed).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// Fraction of counted ground-truth entries predicted correctly.
    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if self.total() == 0 {
            0.0
        } else {
            correct as f64 / self.total() as f64
        }
    }

    /// `IoU_c = TP / (row_c + col_c - TP)`; classes with an empty denominator are
    /// `None` and excluded from the mean.
    pub fn miou(&self) -> MiouReport {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() + self.missed[c];
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let defined = !present.is_empty();
        let mean = if defined { present.iter().sum::<f64>() / present.len() as f64 } else { 0.0 };
        MiouReport { per_class, mean, defined }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// False when no class had a non-zero denominator (mean reported as 0).
    pub defined: bool,
}

impl MiouReport {
    /// Results table: one column per class (short names) plus mIoU, values in percent.
    pub fn table(&self, method: &str) -> String {
        let names: Vec<String> = (0..self.per_class.len())
            .map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("c{c}"), |s| s.to_string()))
            .collect();
        let width = |s: &str| s.len().max(5);
        let mut head = format!("| {:<12} |", "Method");
        let mut rule = format!("|{}|", "-".repeat(14));
        let mut row = format!("| {:<12} |", method);
        for (name, v) in names.iter().zip(&self.per_class) {
            let w = width(name);
            let _ = write!(head, " {name:>w$} |");
            let _ = write!(rule, "{}|", "-".repeat(w + 2));
            let cell = v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
            let _ = write!(row, " {cell:>w$} |");
        }
        let _ = write!(head, " {:>5} |", "mIoU");
        let _ = write!(rule, "{}|", "-".repeat(7));
        let mean = if self.defined { format!("{:.1}", 100.0 * self.mean) } else { "n/a".to_string() };
        let _ = write!(row, " {mean:>5} |");
        format!("{head}\n{rule}\n{row}\n")
    }

    /// Machine-readable form with class names.
    pub fn to_json(&self) -> serde_json::Value {
        let classes: serde_json::Map<String, serde_json::Value> = self
            .per_class
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let name = CLASS_NAMES.get(c).map_or_else(|| format!("c{c}"), |s| s.to_string());
                (name, v.map_or(serde_json::Value::Null, serde_json::Value::from))
            })
            .collect();
        serde_json::json!({ "miou": self.mean, "defined": self.defined, "per_class": classes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let mut cm = ConfusionMatrix::new(19);
        cm.add_all(&[0, 3, 3, 18], &[0, 3, 3, 18]);
        let r = cm.miou();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_class.iter().flatten().count(), 3);
    }

    #[test]
    fn two_class_third() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1]);
        let r = cm.miou();
        assert_eq!(r.per_class, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert!((r.mean - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_flagged() {
        let r = ConfusionMatrix::new(19).miou();
        assert!(!r.defined);
        assert_eq!(r.mean, 0.0);
        assert!(r.table("x").contains("n/a"));
    }

    #[test]
    fn ignore_and_missed() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(IGNORE, 0);
        assert_eq!(cm.total(), 0);
        cm.add(0, 0);
        cm.add(0, IGNORE);
        assert_eq!(cm.miou().per_class[0], Some(0.5));
    }

    #[test]
    fn merge_is_partition_independent() {
        let gt = [0u8, 1, 1, 2, 0, 2, 1];
        let pr = [0u8, 1, 0, 2, 2, 2, 1];
        let mut whole = ConfusionMatrix::new(3);
        whole.add_all(&gt, &pr);
        let mut a = ConfusionMatrix::new(3);
        a.add_all(&gt[..3], &pr[..3]);
        let mut b = ConfusionMatrix::new(3);
        b.add_all(&gt[3..], &pr[3..]);
        b.merge(&a);
        assert_eq!(b, whole);
    }

    #[test]
    fn table_has_all_columns() {
        let mut cm = ConfusionMatrix::new(19);
        cm.add(0, 0);
        let t = cm.miou().table("RangeSAM");
        let header = t.lines().next().unwrap();
        let cols: Vec<&str> = header.split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(cols.len(), 21);
        assert_eq!(&cols[1..20], &CLASS_NAMES);
        assert_eq!(cols[20], "mIoU");
        assert_eq!(cm.miou().to_json()["per_class"]["car"], 1.0);
    }
}
