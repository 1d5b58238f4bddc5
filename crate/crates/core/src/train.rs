//! Training loop, evaluation, and (k, ip) sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::manifest::{Manifest, Split};
use crate::data::synth::{generate, SceneSpec};
use crate::data::{netpbm, Preset, Sample};
use crate::error::{Error, Result};
use crate::flops::{self, CostReport, TokenCounts};
use crate::metrics::{combined_loss, ConfusionMatrix, LossReport};
use crate::model::{predict_mask, AssignMode, ClustVit};
use crate::params::{ParamId, ParamStore};
use crate::pseudo::{cluster_accuracy, pseudo_clusters};
use crate::scalar::Scalar;

/// XORed into the run seed for the minibatch order.
pub const BATCH_STREAM: u64 = 0xBA7C_4E55;

/// Samples with their segmentation targets (class id - 1) and pseudo-clusters.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub targets: Vec<Vec<usize>>,
    /// Empty per image when `clusters == 0`.
    pub pseudo: Vec<Vec<usize>>,
    pub patch: usize,
    pub clusters: usize,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, patch: usize, clusters: usize) -> Result<Self> {
        let pseudo = samples
            .iter()
            .map(|s| {
                if clusters == 0 {
                    Ok(Vec::new())
                } else {
                    pseudo_clusters(&s.mask, patch, clusters).map(|p| p.labels)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(samples, pseudo, patch, clusters)
    }

    fn assemble(samples: Vec<Sample>, pseudo: Vec<Vec<usize>>, patch: usize, clusters: usize) -> Result<Self> {
        let targets = samples
            .iter()
            .map(|s| {
                s.mask
                    .labels
                    .iter()
                    .map(|&c| {
                        c.checked_sub(1)
                            .map(|v| v as usize)
                            .ok_or_else(|| Error::Input(format!("sample {} uses reserved class 0", s.id)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            samples,
            targets,
            pseudo,
            patch,
            clusters,
        })
    }

    /// Generates one split in memory.
    pub fn generate(preset: Preset, seed: u64, count: usize, split: Split, patch: usize, clusters: usize) -> Result<Self> {
        let samples = generate(&SceneSpec::preset(preset, seed, count, split))?;
        Self::from_samples(samples, patch, clusters)
    }

    /// Loads one split; cached pseudo-clusters are used when `(P, k)` match the manifest.
    pub fn from_manifest(manifest: &Manifest, split: Split, patch: usize, clusters: usize) -> Result<Self> {
        let entries: Vec<_> = manifest.split(split).collect();
        if entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let samples = entries.iter().map(|e| manifest.sample(e)).collect::<Result<Vec<_>>>()?;
        if clusters > 0 && manifest.clusters == clusters && manifest.patch == patch {
            let pseudo = entries.iter().map(|e| manifest.pseudo(e)).collect::<Result<Vec<_>>>()?;
            Self::assemble(samples, pseudo, patch, clusters)
        } else {
            Self::from_samples(samples, patch, clusters)
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Worker count from `CLUSTVIT_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("CLUSTVIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Applies `f` to every index, splitting the list into contiguous chunks per thread;
/// results come back in input order.
fn map_ordered<R: Send>(indices: &[usize], threads: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || indices.len() <= 1 {
        return indices.iter().map(|&i| f(i)).collect();
    }
    let chunk = indices.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                s.spawn(move || part.iter().map(|&i| f(i)).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(indices.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

struct ImageStep<T> {
    grads: Vec<(ParamId, Vec<T>)>,
    report: LossReport,
    cluster_acc: Option<f64>,
    conf: ConfusionMatrix,
    tokens: usize,
}

fn image_step<T: Scalar>(
    model: &ClustVit,
    store: &ParamStore<T>,
    data: &Dataset,
    i: usize,
    cfg: &RunConfig,
) -> Result<ImageStep<T>> {
    let mut tape = Tape::new();
    let pseudo = &data.pseudo[i];
    let mode = if cfg.teacher_forcing && model.cluster.is_some() {
        AssignMode::Forced(pseudo)
    } else {
        AssignMode::Predicted
    };
    let out = model.forward(store, &mut tape, &data.samples[i].image, mode)?;
    let cluster = out.cluster_logits.map(|l| (l, pseudo.as_slice()));
    let (total, report) = combined_loss(&mut tape, out.seg_logits, &data.targets[i], cluster, cfg.lambda)?;
    let scaled = tape.scale(total, T::from_f64_lossy(1.0 / cfg.batch_size as f64));
    tape.backward(scaled)?;

    let pred: Vec<usize> = predict_mask(tape.value(out.seg_logits)).iter().map(|&c| c as usize - 1).collect();
    let mut conf = ConfusionMatrix::new(model.config.num_classes);
    conf.accumulate(&data.targets[i], &pred)?;
    let cluster_acc = match out.predicted_clusters(&tape) {
        Some(p) => Some(cluster_accuracy(&p, pseudo)?),
        None => None,
    };
    Ok(ImageStep {
        grads: tape.take_param_grads(),
        report,
        cluster_acc,
        conf,
        tokens: out.tokens_after_ip,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub seg_loss: f64,
    pub clust_loss: f64,
    pub total: f64,
    pub cluster_acc: f64,
    pub miou: f64,
    pub tokens_after_ip: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "iter,seg_loss,clust_loss,total,cluster_acc,miou,tokens_after_ip,lr";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.2},{:.6e}",
            self.iter, self.seg_loss, self.clust_loss, self.total, self.cluster_acc, self.miou, self.tokens_after_ip, self.lr
        )
    }
}

pub struct Trained<T> {
    pub model: ClustVit,
    pub store: ParamStore<T>,
    pub log: Vec<MetricsRow>,
}

/// Trains from scratch. With `out`, writes `config.json`, `run_id`, `metrics.csv` and
/// checkpoints (`checkpoint_<iter>.ckpt` every `checkpoint_every` iterations, `model.ckpt` at the end).
pub fn train<T: Scalar>(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<Trained<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.clusters != cfg.encoder.clusters || data.patch != cfg.encoder.patch_size {
        return Err(Error::Config(format!(
            "dataset prepared for k={} P={}, model uses k={} P={}",
            data.clusters, data.patch, cfg.encoder.clusters, cfg.encoder.patch_size
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        cfg.save(&dir.join("config.json"))?;
        fs::write(dir.join("run_id"), cfg.run_id() + "\n")?;
        fs::write(dir.join("metrics.csv"), format!("{METRICS_HEADER}\n"))?;
    }
    let (model, mut store) = ClustVit::build::<T>(&cfg.encoder, cfg.seed)?;
    let frozen: Vec<ParamId> = store
        .ids()
        .filter(|&id| cfg.freeze_cluster && store.get(id).name.starts_with("cluster."))
        .collect();
    let threads = thread_count();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let total_iters = cfg.schedule.total_iters;

    for iter in 0..total_iters {
        let lr = cfg.schedule.lr(iter);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().unwrap());
        }
        let steps = map_ordered(&batch, threads, |i| image_step(&model, &store, data, i, cfg))?;

        let b = steps.len() as f64;
        let mut mean = LossReport {
            lambda: cfg.lambda,
            ..LossReport::default()
        };
        let mut conf = ConfusionMatrix::new(cfg.encoder.num_classes);
        let (mut acc, mut tokens) = (0.0, 0.0);
        for s in steps {
            for (id, g) in s.grads {
                for (d, v) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *d += v;
                }
            }
            mean.seg_loss += s.report.seg_loss / b;
            mean.clust_loss += s.report.clust_loss / b;
            mean.total += s.report.total / b;
            acc += s.cluster_acc.unwrap_or(0.0) / b;
            tokens += s.tokens as f64 / b;
            conf.merge(&s.conf)?;
        }
        if !mean.total.is_finite() {
            return Err(Error::NonFinite { iter, lr });
        }
        let saved: Vec<_> = frozen.iter().map(|&id| store.get(id).value.clone()).collect();
        cfg.sgd.step(&mut store, lr);
        for (&id, v) in frozen.iter().zip(saved) {
            store.get_mut(id).value = v;
        }

        let done = iter + 1;
        if done % cfg.log_every == 0 || done == total_iters {
            let row = MetricsRow {
                iter: done,
                seg_loss: mean.seg_loss,
                clust_loss: mean.clust_loss,
                total: mean.total,
                cluster_acc: acc,
                miou: conf.miou()?.0,
                tokens_after_ip: tokens,
                lr,
            };
            if let Some(dir) = out {
                let mut f = fs::OpenOptions::new().append(true).open(dir.join("metrics.csv"))?;
                std::io::Write::write_all(&mut f, format!("{}\n", row.csv()).as_bytes())?;
            }
            log.push(row);
        }
        if let Some(dir) = out {
            if done % cfg.checkpoint_every == 0 && done != total_iters {
                store.save_checkpoint(&dir.join(format!("checkpoint_{done}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out {
        store.save_checkpoint(&dir.join("model.ckpt"))?;
    }
    Ok(Trained { model, store, log })
}

/// Rebuilds the model described by `cfg` and loads `checkpoint` into it.
pub fn load_model<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<(ClustVit, ParamStore<T>)> {
    cfg.validate()?;
    let (model, mut store) = ClustVit::build::<T>(&cfg.encoder, cfg.seed)?;
    store.load_checkpoint(checkpoint)?;
    Ok((model, store))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub tokens_after_ip: usize,
    pub flops: u64,
    pub pixel_acc: f64,
    pub cluster_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub conf: ConfusionMatrix,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over images; `None` for the plain ViT.
    pub cluster_acc: Option<f64>,
    pub cost: CostReport,
    pub rows: Vec<EvalRow>,
    /// Per-image predicted patch clusters (empty for the plain ViT) and class-id masks.
    pub predicted_clusters: Vec<Vec<usize>>,
    pub predicted_masks: Vec<Vec<u32>>,
}

/// Inference with predicted assignments over every image of `data`.
pub fn evaluate<T: Scalar>(model: &ClustVit, store: &ParamStore<T>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let per = map_ordered(&idx, thread_count(), |i| {
        let mut tape = Tape::<T>::new();
        let out = model.forward(store, &mut tape, &data.samples[i].image, AssignMode::Predicted)?;
        let mask = predict_mask(tape.value(out.seg_logits));
        let clusters = out.predicted_clusters(&tape).unwrap_or_default();
        let counts = out
            .index
            .as_ref()
            .map(TokenCounts::from_index)
            .unwrap_or_else(|| TokenCounts::unclustered(model.config.num_patches()));
        Ok((mask, clusters, counts))
    })?;

    let mut conf = ConfusionMatrix::new(model.config.num_classes);
    let mut rows = Vec::with_capacity(data.len());
    let mut counts = Vec::with_capacity(data.len());
    let (mut masks, mut predicted) = (Vec::new(), Vec::new());
    for (i, (mask, clusters, c)) in per.into_iter().enumerate() {
        let pred: Vec<usize> = mask.iter().map(|&m| m as usize - 1).collect();
        conf.accumulate(&data.targets[i], &pred)?;
        let hits = pred.iter().zip(&data.targets[i]).filter(|(a, b)| a == b).count();
        let cluster_acc = if clusters.is_empty() || data.pseudo[i].is_empty() {
            None
        } else {
            Some(cluster_accuracy(&clusters, &data.pseudo[i])?)
        };
        let id = data.samples[i].id.clone();
        rows.push(EvalRow {
            id: id.clone(),
            tokens_after_ip: c.tokens_after_ip(),
            flops: 0,
            pixel_acc: hits as f64 / pred.len() as f64,
            cluster_acc,
        });
        counts.push((id, c));
        masks.push(mask);
        predicted.push(clusters);
    }
    let cost = flops::dataset_cost(&model.config, &counts)?;
    for (r, f) in rows.iter_mut().zip(&cost.flops) {
        r.flops = *f;
    }
    let accs: Vec<f64> = rows.iter().filter_map(|r| r.cluster_acc).collect();
    let cluster_acc = (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);
    let (miou, per_class_iou) = conf.miou()?;
    Ok(EvalReport {
        conf,
        miou,
        per_class_iou,
        cluster_acc,
        cost,
        rows,
        predicted_clusters: predicted,
        predicted_masks: masks,
    })
}

/// Single-threaded single-image inference rate.
pub fn measure_throughput<T: Scalar>(
    model: &ClustVit,
    store: &ParamStore<T>,
    data: &Dataset,
    warmup: usize,
    iters: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    flops::throughput(
        |i| {
            let mut tape = Tape::<T>::new();
            model.forward(store, &mut tape, &data.samples[i % data.len()].image, AssignMode::Predicted)?;
            Ok(())
        },
        warmup,
        iters,
    )
}

/// Writes `eval.csv`, `cost.csv`, `cost_summary.csv`, `token_histogram.csv` and `eval_summary.json`.
pub fn write_eval(dir: &Path, report: &EvalReport, img_per_s: Option<f64>, num_patches: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::from("image_id,tokens_after_ip,flops,pixel_acc,cluster_acc\n");
    for r in &report.rows {
        let ca = r.cluster_acc.map_or(String::new(), |a| format!("{a:.4}"));
        writeln!(s, "{},{},{},{:.4},{ca}", r.id, r.tokens_after_ip, r.flops, r.pixel_acc).unwrap();
    }
    fs::write(dir.join("eval.csv"), s)?;
    flops::write_cost_csv(&dir.join("cost.csv"), &report.cost)?;
    flops::write_cost_summary_csv(&dir.join("cost_summary.csv"), &report.cost)?;
    let bins = flops::token_histogram(&report.cost.tokens_after_ip, 1, num_patches + 1);
    flops::write_histogram_csv(&dir.join("token_histogram.csv"), &bins)?;
    let summary = serde_json::json!({
        "miou": report.miou,
        "per_class_iou": report.per_class_iou,
        "cluster_acc": report.cluster_acc,
        "flops_mean": report.cost.mean,
        "flops_std": report.cost.std,
        "tokens_median": report.cost.median_tokens(),
        "img_per_s": img_per_s,
        "images": report.rows.len(),
    });
    fs::write(dir.join("eval_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

/// Predicted mask (PGM), pseudo-cluster and predicted-cluster images (PPM) for the first `count` images.
pub fn write_visuals(dir: &Path, data: &Dataset, report: &EvalReport, grid: (usize, usize), count: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..count.min(data.len()) {
        let s = &data.samples[i];
        let mask = crate::data::Mask {
            height: s.mask.height,
            width: s.mask.width,
            labels: report.predicted_masks[i].clone(),
        };
        netpbm::write_pgm(&dir.join(format!("{}_pred.pgm", s.id)), &mask)?;
        if !data.pseudo[i].is_empty() {
            let img = crate::cluster::label_image(&data.pseudo[i], grid, 8)?;
            netpbm::write_ppm(&dir.join(format!("{}_pseudo.ppm", s.id)), &img)?;
        }
        if !report.predicted_clusters[i].is_empty() {
            let img = crate::cluster::label_image(&report.predicted_clusters[i], grid, 8)?;
            netpbm::write_ppm(&dir.join(format!("{}_clusters.ppm", s.id)), &img)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub ip: usize,
    pub miou: f64,
    pub img_per_s: f64,
    pub flops_mean: f64,
    pub flops_std: f64,
    pub tokens_median: f64,
    pub tokens_variance: f64,
    pub status: String,
}

pub const ABLATION_HEADER: &str = "k,ip,miou,img_per_s,flops_mean,flops_std,tokens_median,tokens_variance,status";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.4},{:.2},{:.1},{:.1},{:.1},{:.4},{}",
            self.k,
            self.ip,
            self.miou,
            self.img_per_s,
            self.flops_mean,
            self.flops_std,
            self.tokens_median,
            self.tokens_variance,
            self.status
        )
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Trains and evaluates every `(k, ip)` cell on shared data and seed. A failing cell is
/// recorded in its row and the sweep moves on. `k = 0` is the plain ViT.
pub fn ablate<T: Scalar>(
    base: &RunConfig,
    cells: &[(usize, usize)],
    train_split: &[Sample],
    eval_split: &[Sample],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() {
        return Err(Error::Config("ablation needs at least one (k, ip) cell".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), format!("{ABLATION_HEADER}\n"))?;
    }
    let mut rows = Vec::with_capacity(cells.len());
    for &(k, ip) in cells {
        let run = || -> Result<AblationRow> {
            let mut cfg = base.clone();
            cfg.encoder.clusters = k;
            cfg.encoder.injection_point = ip;
            let p = cfg.encoder.patch_size;
            let train_data = Dataset::from_samples(train_split.to_vec(), p, k)?;
            let eval_data = Dataset::from_samples(eval_split.to_vec(), p, k)?;
            let cell_dir = out.map(|d| d.join(format!("k{k}_ip{ip}")));
            let t = train::<T>(&cfg, &train_data, cell_dir.as_deref())?;
            let report = evaluate(&t.model, &t.store, &eval_data)?;
            let ips = measure_throughput(&t.model, &t.store, &eval_data, cfg.eval_warmup, cfg.eval_iters)?;
            if let Some(d) = &cell_dir {
                write_eval(d, &report, Some(ips), cfg.encoder.num_patches())?;
            }
            Ok(AblationRow {
                k,
                ip,
                miou: report.miou,
                img_per_s: ips,
                flops_mean: report.cost.mean,
                flops_std: report.cost.std,
                tokens_median: report.cost.median_tokens(),
                tokens_variance: report.cost.token_variance(),
                status: "ok".into(),
            })
        };
        let row = run().unwrap_or_else(|e| AblationRow {
            k,
            ip,
            miou: f64::NAN,
            img_per_s: f64::NAN,
            flops_mean: f64::NAN,
            flops_std: f64::NAN,
            tokens_median: f64::NAN,
            tokens_variance: f64::NAN,
            status: format!("error: {}", e.to_string().replace([',', '\n'], ";")),
        });
        if let Some(dir) = out {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join("ablation.csv"))?;
            std::io::Write::write_all(&mut f, format!("{}\n", row.csv()).as_bytes())?;
        }
        rows.push(row);
    }
    Ok(rows)
}
