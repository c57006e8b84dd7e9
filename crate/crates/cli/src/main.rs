mod ablate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use pamr_core::checks::gradient_suite;
use pamr_core::io::{
    read_dataset, read_xyz, synthetic_dataset, write_atomic, write_dataset, write_metrics_csv, write_xyz,
};
use pamr_core::training::{derive_seed, few_shot_eval, finetune_classify, pretrain_run};
use pamr_core::{Checkpoint, Error, MaskedAutoencoder, PointCloud, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "pamr", version, about = "Multi-scale masked autoencoder for point clouds")]
struct Cli {
    /// Flat `key = value` config file; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the synthetic shape dataset into DIR/train and DIR/test.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked reconstruction pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification fine-tuning, optionally from a pretrained encoder.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// N-way M-shot evaluation with a frozen encoder.
    Fewshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write original, masked and reconstructed clouds for each input.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Load even if the checkpoint was written for another config.
        #[arg(long)]
        allow_config_mismatch: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation and the model loss.
    Gradcheck,
    /// Pretrain and fine-tune over one ablation grid and write a CSV.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    MaskRatio,
    LaParams,
    LaBranches,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    println!("# resolved config");
    print!("{}", cfg.to_text());
    Ok(cfg)
}

fn save_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    Ok(())
}

fn num_classes(sets: &[&[PointCloud]]) -> anyhow::Result<usize> {
    let mut max = None;
    for c in sets.iter().flat_map(|s| s.iter()) {
        let l = c.label.context("unlabeled cloud in a classification dataset")?;
        max = max.max(Some(l));
    }
    match max {
        Some(m) if m >= 1 => Ok(m + 1),
        _ => bail!("classification needs at least two labels"),
    }
}

fn load_checkpoint(path: &Option<PathBuf>) -> anyhow::Result<Option<Checkpoint>> {
    path.as_ref().map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))).transpose()
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = resolve(&cli)?;
    let seed = cfg.pretrain.seed;
    match &cli.command {
        Command::GenData { out } => {
            let d = &cfg.data;
            let train = synthetic_dataset(&d.kinds, d.train_per_class, d.points, d.jitter, derive_seed(seed, &[100]))?;
            let test = synthetic_dataset(&d.kinds, d.test_per_class, d.points, d.jitter, derive_seed(seed, &[101]))?;
            write_dataset(&out.join("train"), "shape", &train)?;
            if !test.is_empty() {
                write_dataset(&out.join("test"), "shape", &test)?;
            }
            save_config(out, &cfg)?;
            println!("wrote {} train and {} test clouds to {}", train.len(), test.len(), out.display());
        }
        Command::Pretrain { data, out } => {
            let clouds = read_dataset(&data.join("train"))?;
            std::fs::create_dir_all(out)?;
            save_config(out, &cfg)?;
            let r = pretrain_run(&clouds, &cfg.model, &cfg.pretrain, Some(out))?;
            write_metrics_csv(&out.join("metrics.csv"), &r.log)?;
            let losses = r.log.losses();
            println!(
                "pretrained {} steps; loss {:.6} -> {:.6}",
                r.steps,
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Finetune { data, checkpoint, out } => {
            let train = read_dataset(&data.join("train"))?;
            let test = if data.join("test").is_dir() { read_dataset(&data.join("test"))? } else { Vec::new() };
            let k = num_classes(&[&train, &test])?;
            let ckpt = load_checkpoint(checkpoint)?;
            std::fs::create_dir_all(out)?;
            save_config(out, &cfg)?;
            let r = finetune_classify(ckpt.as_ref(), &train, &test, &cfg.model, &cfg.head(k), &cfg.finetune)?;
            write_metrics_csv(&out.join("metrics.csv"), &r.log)?;
            let steps = r.log.rows.len() as u64;
            Checkpoint::capture(&r.params, r.model.cfg.fingerprint(), steps, None)
                .save(&out.join("classifier.pamr"))?;
            println!("train accuracy {:.4}", r.train_accuracy);
            if let Some(a) = r.test_accuracy {
                println!("test accuracy {a:.4}");
            }
        }
        Command::Fewshot { data, checkpoint, out } => {
            let clouds = read_dataset(&data.join("train"))?;
            let ckpt = load_checkpoint(checkpoint)?;
            let f = &cfg.fewshot;
            let r = few_shot_eval(
                ckpt.as_ref(),
                &clouds,
                &cfg.model,
                cfg.head_hidden,
                f.n_way,
                f.m_shot,
                f.trials,
                &cfg.finetune,
            )?;
            let mut csv = String::from("trial,accuracy\n");
            for (i, a) in r.accuracies.iter().enumerate() {
                csv.push_str(&format!("{i},{a}\n"));
            }
            std::fs::create_dir_all(out)?;
            save_config(out, &cfg)?;
            write_atomic(&out.join("fewshot.csv"), csv.as_bytes())?;
            println!("{}-way {}-shot accuracy {:.2} ± {:.2} %", f.n_way, f.m_shot, 100.0 * r.mean, 100.0 * r.std);
        }
        Command::Reconstruct { checkpoint, out, allow_config_mismatch, inputs } => {
            let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let (model, mut params) = MaskedAutoencoder::new(cfg.model.clone(), 0)?;
            ckpt.check_fingerprint(&cfg.model.fingerprint(), *allow_config_mismatch)?;
            ckpt.restore(&mut params)?;
            std::fs::create_dir_all(out)?;
            for (i, input) in inputs.iter().enumerate() {
                let cloud = read_xyz(input).with_context(|| format!("reading {}", input.display()))?;
                let r = model.reconstruct(&params, &cloud, derive_seed(seed, &[200, i as u64]))?;
                let stem =
                    input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("cloud{i}"));
                write_xyz(&out.join(format!("{stem}_original.xyz")), &r.original)?;
                write_xyz(&out.join(format!("{stem}_masked.xyz")), &r.masked)?;
                write_xyz(&out.join(format!("{stem}_reconstructed.xyz")), &r.reconstructed)?;
                println!("{stem}: chamfer loss {:.6}", r.loss);
            }
        }
        Command::Gradcheck => {
            let suite = gradient_suite(&cfg.model, seed)?;
            let mut ok = true;
            let mut worst: f64 = 0.0;
            for e in &suite {
                let r = &e.report;
                worst = worst.max(r.max_rel_err());
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{verdict:4} {:28} checked {:6} max rel err {:.3e} (tol {:.0e})",
                    e.name,
                    r.checked(),
                    r.max_rel_err(),
                    r.tol
                );
                ok &= r.passed();
            }
            println!("max rel err {worst:.3e}");
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { axis, data, out } => {
            ablate::run(&cfg, *axis, data, out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
