//! `clustvit` command line: dataset generation, training, evaluation, ablation sweeps
//! and cost profiling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clustvit::config::RunConfig;
use clustvit::data::manifest::{write_samples, Manifest, Split};
use clustvit::data::synth::{generate, SceneSpec};
use clustvit::data::Preset;
use clustvit::flops::{break_even_tokens, model_flops};
use clustvit::train::{ablate, evaluate, load_model, measure_throughput, train, write_eval, write_visuals, Dataset};
use clustvit::vit::{EncoderConfig, ModelScale};
use clustvit::Error;

#[derive(Parser)]
#[command(name = "clustvit", version, about = "ViT segmentation with trainable token clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with cached pseudo-clusters.
    Gen {
        #[arg(long, default_value = "sparse")]
        preset: Preset,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Images per split.
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; trailing `--key=value` arguments override config fields.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a trained run on one split.
    Eval {
        /// Run directory holding `config.json` and `model.ckpt`.
        #[arg(long)]
        run: PathBuf,
        /// Config to use instead of the run's own; must describe the same model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write prediction and cluster images for the first N samples.
        #[arg(long, default_value_t = 0)]
        visuals: usize,
    },
    /// Train and evaluate every (k, ip) pair on shared data.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        ip_list: Vec<usize>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Analytic cost over every possible sequence length after the cluster block.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use a reference scale (tiny, small, base, large) instead of the config encoder.
        #[arg(long)]
        scale: Option<String>,
        #[arg(long, default_value_t = 512)]
        image: usize,
        #[arg(long, default_value_t = 150)]
        classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(
    preset: Preset,
    seed: u64,
    count: usize,
    out: &Path,
    patch: usize,
    clusters: usize,
    force: bool,
) -> Result<(), Error> {
    if out.is_dir() && fs::read_dir(out)?.next().is_some() && !force {
        return Err(Error::Config(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    if clusters == 0 {
        return Err(Error::Config("--clusters must be at least 1".into()));
    }
    let mut listed = Vec::new();
    for split in Split::ALL {
        let samples = generate(&SceneSpec::preset(preset, seed, count, split))?;
        write_samples(out, split, &samples)?;
        listed.extend(samples.into_iter().map(|s| (split, s.id)));
    }
    let m = Manifest::build(out, &listed, patch, clusters)?;
    println!("wrote {} samples to {}", m.entries.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Error> {
    let manifest = Manifest::load(&cfg.data_root)?;
    let data = Dataset::from_manifest(&manifest, Split::Train, cfg.encoder.patch_size, cfg.encoder.clusters)?;
    let t = train::<f64>(cfg, &data, Some(&cfg.out_dir))?;
    if let Some(last) = t.log.last() {
        println!("{}", clustvit::train::METRICS_HEADER);
        println!("{}", last.csv());
    }
    println!("run {} written to {}", cfg.run_id(), cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(
    run: &Path,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    split: Split,
    out: Option<&Path>,
    visuals: usize,
) -> Result<(), Error> {
    let saved = RunConfig::load(&run.join("config.json"))?;
    let cfg = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let diff = cfg.diff_encoder(&saved.encoder);
            if !diff.is_empty() {
                return Err(Error::CheckpointMismatch(diff));
            }
            cfg
        }
        None => saved,
    };
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run.join("model.ckpt"));
    let (model, store) = load_model::<f64>(&cfg, &ckpt)?;
    let manifest = Manifest::load(&cfg.data_root)?;
    let data = Dataset::from_manifest(&manifest, split, cfg.encoder.patch_size, cfg.encoder.clusters)?;
    let report = evaluate(&model, &store, &data)?;
    let ips = measure_throughput(&model, &store, &data, cfg.eval_warmup, cfg.eval_iters)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| run.join(format!("eval_{split}")));
    write_eval(&dir, &report, Some(ips), cfg.encoder.num_patches())?;
    if visuals > 0 {
        write_visuals(&dir.join("visuals"), &data, &report, cfg.encoder.grid(), visuals)?;
    }
    println!(
        "{split}: mIoU {:.4}  cluster acc {}  GFLOPs {:.4} ± {:.4}  {:.1} img/s",
        report.miou,
        report.cluster_acc.map_or("-".into(), |a| format!("{a:.4}")),
        report.cost.mean / 1e9,
        report.cost.std / 1e9,
        ips
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, k_list: &[usize], ip_list: &[usize], split: Split) -> Result<(), Error> {
    let manifest = Manifest::load(&cfg.data_root)?;
    let train_split = Dataset::from_manifest(&manifest, Split::Train, cfg.encoder.patch_size, 0)?.samples;
    let eval_split = Dataset::from_manifest(&manifest, split, cfg.encoder.patch_size, 0)?.samples;
    let cells: Vec<(usize, usize)> = k_list.iter().flat_map(|&k| ip_list.iter().map(move |&ip| (k, ip))).collect();
    let dir = cfg.out_dir.join("ablation");
    let rows = ablate::<f64>(cfg, &cells, &train_split, &eval_split, Some(&dir))?;
    println!("{}", clustvit::train::ABLATION_HEADER);
    for r in &rows {
        println!("{}", r.csv());
    }
    Ok(())
}

fn cmd_profile(enc: &EncoderConfig, out: Option<&Path>) -> Result<(), Error> {
    let vanilla = model_flops(&enc.vanilla(), enc.num_patches() + 1)?.total();
    let mut csv = String::from("tokens_after_ip,flops,vanilla_flops,ratio\n");
    let first = if enc.clustered() { 1 + enc.clusters } else { enc.num_patches() + 1 };
    for t in first..=enc.num_patches() + 1 {
        let f = model_flops(enc, t)?.total();
        csv.push_str(&format!("{t},{f},{vanilla},{:.4}\n", f as f64 / vanilla as f64));
    }
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, &csv)?;
        }
        None => print!("{csv}"),
    }
    match break_even_tokens(enc)? {
        Some(t) if enc.clustered() => println!("break-even: at most {t} of {} tokens after ip", enc.num_patches() + 1),
        _ => println!("break-even: none"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen {
            preset,
            seed,
            count,
            out,
            patch,
            clusters,
            force,
        } => cmd_gen(preset, seed, count, &out, patch, clusters, force),
        Command::Train { config, overrides } => cmd_train(&load_config(config.as_deref(), &overrides)?),
        Command::Eval {
            run,
            config,
            checkpoint,
            split,
            out,
            visuals,
        } => cmd_eval(&run, config.as_deref(), checkpoint.as_deref(), split, out.as_deref(), visuals),
        Command::Ablate {
            config,
            k_list,
            ip_list,
            split,
            overrides,
        } => cmd_ablate(&load_config(config.as_deref(), &overrides)?, &k_list, &ip_list, split),
        Command::Profile {
            config,
            scale,
            image,
            classes,
            out,
            overrides,
        } => {
            let enc = match scale {
                Some(s) => {
                    let scale = match s.as_str() {
                        "tiny" => ModelScale::Tiny,
                        "small" => ModelScale::Small,
                        "base" => ModelScale::Base,
                        "large" => ModelScale::Large,
                        _ => return Err(Error::Config(format!("unknown scale {s:?}"))),
                    };
                    EncoderConfig::reference_scale(scale, image, classes)?
                }
                None => load_config(config.as_deref(), &overrides)?.encoder,
            };
            cmd_profile(&enc, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
