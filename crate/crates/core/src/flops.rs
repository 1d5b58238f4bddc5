//! Analytic compute accounting. One multiply-accumulate is 2 FLOPs; only matrix
//! products are counted (norms, softmax, activations, gathers and upsampling are free).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::EncoderConfig;

/// MACs of one Transformer block on `n` tokens: QKV and output projections `4 n D^2`,
/// FFN `2 n D F`, attention scores and weighted sum `2 n^2 D`.
pub fn block_macs(n: u64, d: u64, ffn: u64) -> u64 {
    4 * n * d * d + 2 * n * d * ffn + 2 * n * n * d
}

pub fn block_flops(n: u64, d: u64, ffn: u64) -> u64 {
    2 * block_macs(n, d, ffn)
}

/// Sequence bookkeeping after the cluster block for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    /// Patches left unclustered.
    pub kept: usize,
    /// Non-empty clusters.
    pub active: usize,
    /// Patches merged into some cluster.
    pub clustered: usize,
}

impl TokenCounts {
    pub fn unclustered(num_patches: usize) -> Self {
        TokenCounts {
            kept: num_patches,
            active: 0,
            clustered: 0,
        }
    }

    pub fn from_index(index: &crate::cluster::AssignmentIndex) -> Self {
        TokenCounts {
            kept: index.num_kept(),
            active: index.num_active(),
            clustered: index.num_clustered(),
        }
    }

    pub fn tokens_after_ip(&self) -> usize {
        1 + self.kept + self.active
    }
}

/// FLOPs per pipeline stage; `total()` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub embed: u64,
    pub prefix: u64,
    pub cluster_mlp: u64,
    pub suffix: u64,
    pub regenerator: u64,
    pub head: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.prefix + self.cluster_mlp + self.suffix + self.regenerator + self.head
    }

    pub const COLUMNS: [&'static str; 6] = ["embed", "prefix", "cluster_mlp", "suffix", "regenerator", "head"];

    pub fn values(&self) -> [u64; 6] {
        [self.embed, self.prefix, self.cluster_mlp, self.suffix, self.regenerator, self.head]
    }
}

/// Forward-pass FLOPs for one image with the given post-clustering counts.
pub fn model_cost(cfg: &EncoderConfig, counts: TokenCounts) -> Result<Breakdown> {
    let n = cfg.num_patches() as u64;
    let (d, f, l) = (cfg.embed_dim as u64, cfg.ffn_hidden as u64, cfg.num_layers as u64);
    if counts.kept + counts.clustered != cfg.num_patches() || counts.active > counts.clustered.min(cfg.clusters) {
        return Err(Error::Input(format!("inconsistent token counts {counts:?} for N = {n}")));
    }
    let full = block_macs(n + 1, d, f);
    let mut b = Breakdown {
        embed: n * cfg.patch_dim() as u64 * d,
        head: n * d * cfg.num_classes as u64,
        ..Breakdown::default()
    };
    if !cfg.clustered() {
        b.prefix = l * full;
    } else {
        let ip = cfg.injection_point as u64;
        let h = cfg.cluster_hidden as u64;
        b.prefix = ip * full;
        b.cluster_mlp = n * (d * h + h * (cfg.clusters as u64 + 1));
        b.suffix = (l - ip) * block_macs(counts.tokens_after_ip() as u64, d, f);
        b.regenerator = counts.clustered as u64 * 3 * d * d;
    }
    for v in [&mut b.embed, &mut b.prefix, &mut b.cluster_mlp, &mut b.suffix, &mut b.regenerator, &mut b.head] {
        *v *= 2;
    }
    Ok(b)
}

/// Cost from the sequence length alone. A reduced length is read as every one of the
/// `k` clusters being non-empty, which fixes how many patches were merged.
pub fn model_flops(cfg: &EncoderConfig, tokens_after_ip: usize) -> Result<Breakdown> {
    let n = cfg.num_patches();
    if tokens_after_ip == 0 || tokens_after_ip > n + 1 {
        return Err(Error::Input(format!("tokens after ip {tokens_after_ip} outside 1..={}", n + 1)));
    }
    let counts = if tokens_after_ip == n + 1 || !cfg.clustered() {
        TokenCounts::unclustered(n)
    } else {
        let active = cfg.clusters;
        let kept = tokens_after_ip
            .checked_sub(1 + active)
            .ok_or_else(|| Error::Input(format!("{tokens_after_ip} tokens cannot hold {active} clusters")))?;
        TokenCounts {
            kept,
            active,
            clustered: n - kept,
        }
    };
    model_cost(cfg, counts)
}

/// Largest sequence length after the cluster block at which the clustered model is still
/// cheaper than the plain ViT, if any.
pub fn break_even_tokens(cfg: &EncoderConfig) -> Result<Option<usize>> {
    let vanilla = model_cost(&cfg.vanilla(), TokenCounts::unclustered(cfg.num_patches()))?.total();
    let mut best = None;
    for t in 1 + cfg.clusters..=cfg.num_patches() + 1 {
        if model_flops(cfg, t)?.total() < vanilla {
            best = Some(t);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub ids: Vec<String>,
    pub tokens_after_ip: Vec<usize>,
    pub flops: Vec<u64>,
    pub breakdowns: Vec<Breakdown>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl CostReport {
    pub fn mean_breakdown(&self) -> [f64; 6] {
        let mut acc = [0.0; 6];
        for b in &self.breakdowns {
            for (a, v) in acc.iter_mut().zip(b.values()) {
                *a += v as f64;
            }
        }
        acc.map(|a| a / self.breakdowns.len() as f64)
    }

    pub fn median_tokens(&self) -> f64 {
        median(&self.tokens_after_ip)
    }

    pub fn token_variance(&self) -> f64 {
        let (_, std) = mean_std(&self.tokens_after_ip.iter().map(|&t| t as f64).collect::<Vec<_>>());
        std * std
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[usize]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

/// Per-image costs from recorded token counts.
pub fn dataset_cost(cfg: &EncoderConfig, images: &[(String, TokenCounts)]) -> Result<CostReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let breakdowns = images
        .iter()
        .map(|(_, c)| model_cost(cfg, *c))
        .collect::<Result<Vec<_>>>()?;
    let flops: Vec<u64> = breakdowns.iter().map(Breakdown::total).collect();
    let (mean, std) = mean_std(&flops.iter().map(|&f| f as f64).collect::<Vec<_>>());
    Ok(CostReport {
        ids: images.iter().map(|(id, _)| id.clone()).collect(),
        tokens_after_ip: images.iter().map(|(_, c)| c.tokens_after_ip()).collect(),
        flops,
        breakdowns,
        mean,
        std,
    })
}

/// `(bin_low, bin_high, count)` over `[1, max_tokens]`, bins of `width`, inclusive bounds.
pub fn token_histogram(tokens: &[usize], width: usize, max_tokens: usize) -> Vec<(usize, usize, usize)> {
    let width = width.max(1);
    let mut bins = Vec::new();
    let mut low = 1;
    while low <= max_tokens {
        let high = (low + width - 1).min(max_tokens);
        let count = tokens.iter().filter(|&&t| t >= low && t <= high).count();
        bins.push((low, high, count));
        low = high + 1;
    }
    bins
}

pub fn write_cost_csv(path: &Path, report: &CostReport) -> Result<()> {
    let mut s = String::from("image_id,tokens_after_ip,flops\n");
    for ((id, t), f) in report.ids.iter().zip(&report.tokens_after_ip).zip(&report.flops) {
        writeln!(s, "{id},{t},{f}").unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_cost_summary_csv(path: &Path, report: &CostReport) -> Result<()> {
    let mut s = String::from("mean,std");
    for c in Breakdown::COLUMNS {
        write!(s, ",{c}").unwrap();
    }
    write!(s, "\n{:.3},{:.3}", report.mean, report.std).unwrap();
    for v in report.mean_breakdown() {
        write!(s, ",{v:.3}").unwrap();
    }
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_histogram_csv(path: &Path, bins: &[(usize, usize, usize)]) -> Result<()> {
    let mut s = String::from("bin_low,bin_high,count\n");
    for (lo, hi, c) in bins {
        writeln!(s, "{lo},{hi},{c}").unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

/// Images per second over `iters` calls of `run` after `warmup` discarded calls.
/// `run(i)` must process exactly one image; image `i % count` is a good choice.
pub fn throughput(mut run: impl FnMut(usize) -> Result<()>, warmup: usize, iters: usize) -> Result<f64> {
    if warmup == 0 || iters == 0 {
        return Err(Error::Config("throughput needs warmup >= 1 and iters >= 1".into()));
    }
    for i in 0..warmup {
        run(i)?;
    }
    let start = Instant::now();
    for i in 0..iters {
        run(warmup + i)?;
    }
    Ok(iters as f64 / start.elapsed().as_secs_f64())
}
