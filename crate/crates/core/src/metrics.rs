//! Combined segmentation + clustering objective and confusion-matrix metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg_loss: f64,
    pub clust_loss: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `CE(seg) + lambda * CE(cluster)`, each averaged over its own rows.
///
/// `seg_targets` are contiguous class indices `0..C`; `cluster` pairs the `N x (k+1)`
/// logits with their pseudo labels. Without a cluster head the clustering term is 0.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg_logits: Var,
    seg_targets: &[usize],
    cluster: Option<(Var, &[usize])>,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let seg = tape.cross_entropy(seg_logits, seg_targets, None)?;
    let seg_loss = tape.value(seg).data()[0].as_f64();
    let Some((logits, pseudo)) = cluster else {
        return Ok((
            seg,
            LossReport {
                seg_loss,
                clust_loss: 0.0,
                total: seg_loss,
                lambda,
            },
        ));
    };
    let clust = tape.cross_entropy(logits, pseudo, None)?;
    let clust_loss = tape.value(clust).data()[0].as_f64();
    let total = if lambda == 0.0 {
        seg
    } else {
        let weighted = tape.scale(clust, T::from_f64_lossy(lambda));
        tape.add(seg, weighted)?
    };
    let total_value = tape.value(total).data()[0].as_f64();
    Ok((
        total,
        LossReport {
            seg_loss,
            clust_loss,
            total: total_value,
            lambda,
        },
    ))
}

/// Rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Input("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel; labels are contiguous indices `0..C`.
    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::IndexMismatch {
                expected: gt.len(),
                actual: pred.len(),
            });
        }
        if let Some(i) = (0..gt.len()).find(|&i| gt[i] >= self.classes || pred[i] >= self.classes) {
            return Err(Error::Input(format!(
                "pixel {i}: label pair ({}, {}) outside 0..{}",
                gt[i], pred[i], self.classes
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::IndexMismatch {
                expected: self.classes,
                actual: other.classes,
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Mean IoU over classes present in ground truth or prediction, plus per-class IoU
    /// (`None` for absent classes).
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        if self.total() == 0 {
            return Err(Error::Input("mIoU of an empty confusion matrix".into()));
        }
        let c = self.classes;
        let per: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        Ok((present.iter().sum::<f64>() / present.len() as f64, per))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_closed_form() {
        let mut tape = Tape::<f64>::new();
        let seg = tape.constant(Tensor::zeros(&[10, 3]));
        let cl = tape.constant(Tensor::zeros(&[4, 4]));
        let (_, r) = combined_loss(&mut tape, seg, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0], Some((cl, &[0, 1, 2, 3])), DEFAULT_LAMBDA).unwrap();
        let want = 3f64.ln() + 0.1 * 4f64.ln();
        assert!((r.total - want).abs() < 1e-12);
        assert!((r.total - 1.23722).abs() < 1e-4);
    }

    #[test]
    fn lambda_zero_total_is_seg_and_linear_in_lambda() {
        let logits = Tensor::from_fn(&[6, 3], |i| (i as f64 * 0.7).sin());
        let cl = Tensor::from_fn(&[4, 3], |i| (i as f64 * 1.3).cos());
        let mut totals = vec![];
        for lambda in [0.0, 0.1, 1.0] {
            let mut tape = Tape::<f64>::new();
            let s = tape.constant(logits.clone());
            let c = tape.constant(cl.clone());
            let (_, r) = combined_loss(&mut tape, s, &[0, 1, 2, 2, 1, 0], Some((c, &[0, 1, 2, 0])), lambda).unwrap();
            if lambda == 0.0 {
                assert_eq!(r.total, r.seg_loss);
            }
            assert!((r.total - (r.seg_loss + lambda * r.clust_loss)).abs() < 1e-15);
            totals.push(r.total);
        }
        // linear: f(1) - f(0) = 10 (f(0.1) - f(0))
        assert!(((totals[2] - totals[0]) - 10.0 * (totals[1] - totals[0])).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(logits);
        assert!(combined_loss(&mut tape, s, &[0; 6], None, -1.0).is_err());
    }

    #[test]
    fn miou_examples() {
        let m = ConfusionMatrix::from_rows(&[&[50, 10], &[20, 20]]).unwrap();
        let (v, per) = m.miou().unwrap();
        assert_eq!(per, vec![Some(50.0 / 80.0), Some(20.0 / 50.0)]);
        assert!((v - 0.5125).abs() < 1e-15);
        assert_eq!(ConfusionMatrix::from_rows(&[&[5, 0], &[0, 7]]).unwrap().miou().unwrap().0, 1.0);
        assert_eq!(ConfusionMatrix::from_rows(&[&[0, 5], &[7, 0]]).unwrap().miou().unwrap().0, 0.0);
        assert!(ConfusionMatrix::new(3).miou().is_err());
        // class 2 absent from both: excluded
        let (v, per) = ConfusionMatrix::from_rows(&[&[4, 0, 0], &[0, 4, 0], &[0, 0, 0]]).unwrap().miou().unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(per[2], None);
    }

    #[test]
    fn accumulate_examples() {
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&[1], &[2]).unwrap();
        assert_eq!(m.get(1, 2), 1);
        m.accumulate(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 1), m.get(2, 2), m.total()), (1, 1, 1, 4));
        let e = m.accumulate(&[0, 3], &[0, 0]).unwrap_err().to_string();
        assert!(e.contains("pixel 1"), "{e}");
    }

    proptest! {
        #[test]
        fn prop_accumulate_matches_loop(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (g, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let mut m = ConfusionMatrix::new(4);
            m.accumulate(&g, &p).unwrap();
            let mut naive = [[0u64; 4]; 4];
            for i in 0..g.len() { naive[g[i]][p[i]] += 1; }
            for a in 0..4 { for b in 0..4 { prop_assert_eq!(m.get(a, b), naive[a][b]); } }
            prop_assert_eq!(m.total(), g.len() as u64);
            let (v, _) = m.miou().unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            // simultaneous relabeling leaves mIoU unchanged
            let perm = [2usize, 0, 3, 1];
            let mut r = ConfusionMatrix::new(4);
            r.accumulate(&g.iter().map(|&x| perm[x]).collect::<Vec<_>>(), &p.iter().map(|&x| perm[x]).collect::<Vec<_>>()).unwrap();
            prop_assert!((r.miou().unwrap().0 - v).abs() < 1e-12);
        }
    }
}
