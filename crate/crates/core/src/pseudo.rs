//! Per-patch supervision for the cluster head, derived from ground-truth masks.
//!
//! A patch whose pixels all share one class keeps that class; a mixed patch gets 0.
//! The `k` most frequent pure classes are then renamed `1..=k` by descending patch
//! count (ties to the lower class id) and everything else becomes 0.

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoClusterMask {
    /// Row-major patch labels in `0..=k`.
    pub labels: Vec<usize>,
    /// `class_of_label[j]` is the original class id of label `j + 1`.
    pub class_of_label: Vec<u32>,
}

impl PseudoClusterMask {
    pub fn num_clustered(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Class id of every pure patch, 0 for mixed patches.
pub fn patch_labels(mask: &Mask, patch: usize) -> Result<Vec<u32>> {
    if patch == 0 || mask.height % patch != 0 || mask.width % patch != 0 {
        return Err(Error::Input(format!(
            "mask {}x{} is not divisible into {patch}x{patch} patches",
            mask.height, mask.width
        )));
    }
    if let Some(i) = mask.labels.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!(
            "mask pixel ({}, {}) uses reserved class id 0",
            i / mask.width,
            i % mask.width
        )));
    }
    let (gh, gw) = (mask.height / patch, mask.width / patch);
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let first = mask.get(py * patch, px * patch);
            let pure = (0..patch).all(|dy| (0..patch).all(|dx| mask.get(py * patch + dy, px * patch + dx) == first));
            out.push(if pure { first } else { 0 });
        }
    }
    Ok(out)
}

pub fn topk_relabel(classes: &[u32], k: usize) -> Result<PseudoClusterMask> {
    if k == 0 {
        return Err(Error::Config("topk_relabel needs k >= 1".into()));
    }
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for &c in classes.iter().filter(|&&c| c != 0) {
        match counts.iter_mut().find(|(id, _)| *id == c) {
            Some(e) => e.1 += 1,
            None => counts.push((c, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts.truncate(k);
    let class_of_label: Vec<u32> = counts.iter().map(|&(c, _)| c).collect();
    let labels = classes
        .iter()
        .map(|&c| {
            if c == 0 {
                0
            } else {
                class_of_label.iter().position(|&x| x == c).map_or(0, |j| j + 1)
            }
        })
        .collect();
    Ok(PseudoClusterMask { labels, class_of_label })
}

pub fn pseudo_clusters(mask: &Mask, patch: usize, k: usize) -> Result<PseudoClusterMask> {
    topk_relabel(&patch_labels(mask, patch)?, k)
}

/// Fraction of patches whose predicted label matches the pseudo label.
pub fn cluster_accuracy(predicted: &[usize], pseudo: &[usize]) -> Result<f64> {
    if predicted.len() != pseudo.len() {
        return Err(Error::IndexMismatch {
            expected: pseudo.len(),
            actual: predicted.len(),
        });
    }
    if pseudo.is_empty() {
        return Err(Error::Input("cluster accuracy of zero patches".into()));
    }
    let hits = predicted.iter().zip(pseudo).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pseudo.len() as f64)
}
