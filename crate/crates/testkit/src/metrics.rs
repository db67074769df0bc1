//! Per-pixel counting oracle for one-vs-rest segmentation metrics.

use dentgan::codec::IndexMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

pub fn counts(pred: &IndexMask, gt: &IndexMask, class_id: u8) -> Counts {
    let mut c = Counts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let p = pred.get(x, y) == class_id;
            let g = gt.get(x, y) == class_id;
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    c
}

fn div(a: u64, b: u64) -> Option<f64> {
    (b != 0).then(|| a as f64 / b as f64)
}

/// `(precision, tpr, tnr, dice)`, `None` where the denominator is zero.
pub fn metrics(c: Counts) -> [Option<f64>; 4] {
    [div(c.tp, c.tp + c.fp), div(c.tp, c.tp + c.fn_), div(c.tn, c.tn + c.fp), div(2 * c.tp, 2 * c.tp + c.fp + c.fn_)]
}
