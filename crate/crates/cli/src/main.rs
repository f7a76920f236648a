use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmfl::brain_encoder::RoiSubset;
use bmfl::data::{corrupt_dataset, generate_dataset, write_manifest, CorruptionKind, CorruptionSpec, LabeledImages, MaskMode};
use bmfl::harness::{
    evaluate, gradcheck_all, pretrain_brain, pretrain_image, run_ablation_matrix, save_metrics_csv, standard_splits,
    tiny_config, train, BmflModel, Checkpoint, RunConfig, RunSummary, TensorArchive,
};
use bmfl::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bmfl", version, about = "Brain-machine fusion learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Later sources win: defaults, then
/// `--config`, then `--set`, then the named flags.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set fusion.d_f=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    no_fmri: bool,
    #[arg(long, global = true)]
    no_cross_attention: bool,
    #[arg(long, global = true)]
    no_fusion_loss: bool,
    /// lvc, hvc or all.
    #[arg(long, global = true)]
    roi: Option<String>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    image_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    brain_checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and validation archives.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Corrupt an image archive and write the result with a manifest.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// low_light or masked.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0.7)]
        severity: f32,
        #[arg(long, default_value_t = 0.25)]
        mask_ratio: f32,
        /// random or saliency.
        #[arg(long, default_value = "random")]
        mask_mode: String,
        /// Defaults to `val.bmta` in the data directory.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to `<kind>.bmta` in the data directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Warm up the image encoder and save it.
    PretrainImage {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the brain encoder to synthetic responses and save it.
    PretrainBrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the fusion model, then evaluate it on the standard splits.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extra `name=archive` splits; without any, the standard splits are used.
        #[arg(long = "split", value_name = "NAME=PATH")]
        splits: Vec<String>,
    },
    /// Train and evaluate every variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Train the variants on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every parameter at tiny dimensions.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_kv_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = c.alpha {
        cfg.loss.alpha = v;
    }
    cfg.ablation.no_fmri |= c.no_fmri;
    cfg.ablation.no_cross_attention |= c.no_cross_attention;
    cfg.ablation.no_fusion_loss |= c.no_fusion_loss;
    if let Some(r) = &c.roi {
        cfg.ablation.roi = r.parse::<RoiSubset>()?;
    }
    let paths = &mut cfg.paths;
    for (dst, src) in [
        (&mut paths.data_dir, &c.data_dir),
        (&mut paths.out_dir, &c.out_dir),
        (&mut paths.image_checkpoint, &c.image_checkpoint),
        (&mut paths.brain_checkpoint, &c.brain_checkpoint),
    ] {
        if src.is_some() {
            dst.clone_from(src);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.clone().unwrap_or_else(|| PathBuf::from("data"))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn image_ckpt_path(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(match &cfg.paths.image_checkpoint {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join("image_encoder.bmfl"),
    })
}

fn brain_ckpt_path(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(match &cfg.paths.brain_checkpoint {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join("brain_encoder.bmfl"),
    })
}

fn load_images(path: &Path, cfg: &RunConfig) -> Result<LabeledImages> {
    if !path.exists() {
        return Err(Error::Input(format!("{} not found; run gen-data first", path.display())));
    }
    TensorArchive::load(path)?.into_images(cfg.data.num_classes)
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<LabeledImages> {
    load_images(&data_dir(cfg).join(format!("{name}.bmta")), cfg)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Input(format!("{what} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn backbones(cfg: &RunConfig) -> Result<bmfl::numerics::ParamStore> {
    let mut store = load_checkpoint(&image_ckpt_path(cfg)?, "image encoder")?.params;
    if !cfg.ablation.no_fmri {
        let brain = load_checkpoint(&brain_ckpt_path(cfg)?, "brain encoder")?.params;
        store.absorb(brain)?;
    }
    Ok(store)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let cfg = config(&common)?;
            let (train_set, val) = generate_dataset(&cfg.data)?;
            let dir = data_dir(&cfg);
            fs::create_dir_all(&dir)?;
            TensorArchive::from_images(&train_set).save(&dir.join("train.bmta"))?;
            TensorArchive::from_images(&val).save(&dir.join("val.bmta"))?;
            println!("wrote {} train and {} val images to {}", train_set.len(), val.len(), dir.display());
        }
        Command::Corrupt {
            common,
            kind,
            severity,
            mask_ratio,
            mask_mode,
            input,
            output,
        } => {
            let cfg = config(&common)?;
            let kind: CorruptionKind = kind.parse()?;
            let seed = cfg.eval.corruption_seed;
            let spec = match kind {
                CorruptionKind::LowLight => CorruptionSpec::low_light(severity, seed),
                CorruptionKind::Masked => CorruptionSpec::masked(mask_ratio, mask_mode.parse::<MaskMode>()?, seed),
            };
            let dir = data_dir(&cfg);
            let input = input.unwrap_or_else(|| dir.join("val.bmta"));
            let output = output.unwrap_or_else(|| dir.join(format!("{}.bmta", kind.as_str())));
            let (out, manifest) = corrupt_dataset(&load_images(&input, &cfg)?, &spec)?;
            TensorArchive::from_images(&out).save(&output)?;
            let manifest_path = output.with_extension("manifest.csv");
            write_manifest(&manifest, fs::File::create(&manifest_path)?)?;
            println!("wrote {} and {}", output.display(), manifest_path.display());
        }
        Command::PretrainImage { common } => {
            let cfg = config(&common)?;
            let train_set = load_split(&cfg, "train")?;
            let (store, report) = pretrain_image(&cfg, &train_set)?;
            let path = image_ckpt_path(&cfg)?;
            Checkpoint {
                config: cfg.clone(),
                params: store,
                optimizer: None,
            }
            .save(&path)?;
            write_json(&out_dir(&cfg)?.join("image_pretrain.json"), &report)?;
            println!("image encoder: train accuracy {:.4}, saved {}", report.train_accuracy, path.display());
        }
        Command::PretrainBrain { common } => {
            let cfg = config(&common)?;
            let train_set = load_split(&cfg, "train")?;
            let val = load_split(&cfg, "val")?;
            let image = load_checkpoint(&image_ckpt_path(&cfg)?, "image encoder")?;
            let (store, report, responses) = pretrain_brain(&cfg, &image.params, &train_set, Some(&val))?;
            let path = brain_ckpt_path(&cfg)?;
            Checkpoint {
                config: cfg.clone(),
                params: store,
                optimizer: None,
            }
            .save(&path)?;
            let out = out_dir(&cfg)?;
            TensorArchive::from_fmri(&responses, &train_set.labels)?.save(&out.join("train_fmri.bmta"))?;
            write_json(&out.join("brain_pretrain.json"), &report.pretrain)?;
            println!(
                "brain encoder: train R {:.4}, val R {:.4}, saved {}",
                report.pretrain.mean_r,
                report.val_mean_r.unwrap_or(f64::NAN),
                path.display()
            );
        }
        Command::Train { common } => {
            let cfg = config(&common)?;
            let store = backbones(&cfg)?;
            let train_set = load_split(&cfg, "train")?;
            let val = load_split(&cfg, "val")?;
            let model = BmflModel::build(&cfg, &store)?;
            let result = train(&cfg, model, &train_set)?;
            let out = out_dir(&cfg)?;
            result.checkpoint(&cfg).save(&out.join("model.bmfl"))?;
            save_metrics_csv(&result.log, &out.join("metrics.csv"))?;
            let report = evaluate(&result.model, &standard_splits(&cfg, &val)?)?;
            let summary = RunSummary::new(&result, cfg.seed, Some(report));
            fs::write(out.join("summary.json"), summary.to_json() + "\n")?;
            for row in summary.eval.iter().flat_map(|e| &e.rows) {
                println!("{:<10} accuracy {:.4}  loss {:.4}", row.split, row.accuracy, row.mean_loss);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            splits,
        } => {
            let cfg = config(&common)?;
            let path = match checkpoint {
                Some(p) => p,
                None => out_dir(&cfg)?.join("model.bmfl"),
            };
            let ck = load_checkpoint(&path, "model")?;
            let model = BmflModel::from_checkpoint(&ck)?;
            let sets = if splits.is_empty() {
                standard_splits(&ck.config, &load_split(&cfg, "val")?)?
            } else {
                splits
                    .iter()
                    .map(|s| {
                        let (name, p) = s
                            .split_once('=')
                            .ok_or_else(|| Error::Config(format!("--split expects NAME=PATH, got {s}")))?;
                        Ok((name.to_string(), load_images(Path::new(p), &ck.config)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let report = evaluate(&model, &sets)?;
            write_json(&out_dir(&cfg)?.join("eval.json"), &report)?;
            for row in &report.rows {
                println!("{:<10} accuracy {:.4}  loss {:.4}", row.split, row.accuracy, row.mean_loss);
            }
        }
        Command::Ablate { common, parallel } => {
            let cfg = config(&common)?;
            let mut store = load_checkpoint(&image_ckpt_path(&cfg)?, "image encoder")?.params;
            store.absorb(load_checkpoint(&brain_ckpt_path(&cfg)?, "brain encoder")?.params)?;
            let train_set = load_split(&cfg, "train")?;
            let splits = standard_splits(&cfg, &load_split(&cfg, "val")?)?;
            let table = run_ablation_matrix(&cfg, &store, &train_set, &splits, parallel);
            let out = out_dir(&cfg)?;
            fs::write(out.join("ablation.csv"), table.to_csv()?)?;
            let text = table.to_text();
            fs::write(out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Gradcheck { common } => {
            let mut cfg = tiny_config();
            for kv in &common.sets {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            let report = gradcheck_all(&cfg)?;
            for p in &report.params {
                let state = if p.frozen { "frozen" } else { "trainable" };
                println!(
                    "{:<48} {:>9} {:>6}  max_rel_error {:.3e}  max_abs_grad {:.3e}",
                    p.name, state, p.entries, p.max_rel_error, p.max_abs_analytic
                );
            }
            let worst = report.max_rel_error();
            println!("{} parameters, worst relative error {worst:.3e}", report.params.len());
            if worst > 1e-3 {
                return Err(Error::Numerical(format!("gradient check failed: {worst:.3e} > 1e-3")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
