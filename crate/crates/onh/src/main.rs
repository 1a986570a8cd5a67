use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use onh::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use onh::config::RunConfig;
use onh::dataset::Dataset;
use onh::tables;
use onh::volume::read_volume;
use onh_core::cv::cross_validate;
use onh_core::geometry::{extract_boundaries, subsample, volume_to_cloud, PointCloud};
use onh_core::metrics::roc_auc;
use onh_core::rnfl::baseline_auc;
use onh_core::split::{split_indices, DatasetManifest};
use onh_core::synth::{EffectProfile, PopulationOptions};
use onh_core::train::{score_clouds, train, Sample};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "onh", version, about = "Point-cloud glaucoma classification of optic nerve head volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic population of phantom volumes and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of subjects.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, value_parser = fraction)]
        glaucoma_frac: f64,
        #[arg(long, value_parser = profile)]
        profile: EffectProfile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability that a subject gets a second scan.
        #[arg(long, default_value_t = 0.0, value_parser = fraction)]
        second_scan_prob: f64,
    },
    /// Extract the aligned boundary point cloud of a volume as CSV.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subsample to this many points.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        points: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a grouped train/validation split and save the best model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest with a saved model.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// ROC CSV path; defaults to `eval_roc.csv` next to the checkpoint.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Subject-grouped k-fold cross-validation.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        k: Option<u64>,
        /// Output directory for fold, history and ROC files.
        #[arg(long, default_value = "cv_out")]
        out_dir: PathBuf,
    },
    /// RNFL thickness baseline AUC.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        /// ROC CSV path; defaults to `baseline_roc.csv` next to the manifest.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn profile(s: &str) -> Result<EffectProfile, String> {
    EffectProfile::parse(s).ok_or_else(|| format!("unknown profile {s:?}; use rnfl, lc or combined"))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(manifest: &Path) -> anyhow::Result<Dataset> {
    let m = tables::read_manifest(manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    Ok(Dataset::load(manifest, m)?)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            n,
            glaucoma_frac,
            profile,
            seed,
            second_scan_prob,
        } => {
            let opts = PopulationOptions {
                second_scan_prob,
                ..PopulationOptions::default()
            };
            let m = onh::dataset::write_synthetic(&out, n as usize, glaucoma_frac, profile, seed, &opts)?;
            let glaucoma = m.labels().iter().filter(|&&l| l == 1).count();
            println!(
                "wrote {} scans ({glaucoma} glaucoma) to {}",
                m.len(),
                out.display()
            );
        }
        Command::Extract {
            input,
            out,
            points,
            seed,
        } => {
            let vol = read_volume(&input)?;
            let id = input.display().to_string();
            let cloud = if extract_boundaries(&vol).is_empty() {
                eprintln!("warning: {} has no tissue boundaries", input.display());
                PointCloud {
                    points: Vec::new(),
                    source_id: id,
                    label: None,
                }
            } else {
                let (c, _) = volume_to_cloud(&vol, &id, None)?;
                match points {
                    Some(s) => subsample(&c, s as usize, seed)?,
                    None => c,
                }
            };
            tables::write_cloud(&out, &cloud)?;
            println!("wrote {} points to {}", cloud.len(), out.display());
        }
        Command::Train {
            manifest,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_dataset(&manifest)?;
            let parts = split_indices(&data.manifest, &cfg.split, cfg.seed)?;
            let labels = data.manifest.labels();
            let samples = |idx: &[usize]| -> Vec<Sample<'_>> {
                idx.iter()
                    .map(|&i| Sample {
                        cloud: &data.clouds[i],
                        label: labels[i],
                    })
                    .collect()
            };
            let outcome = train(
                &cfg.model,
                &samples(&parts[0]),
                &samples(&parts[1]),
                &cfg.train,
                &mut |r| eprintln!("epoch {:3}  loss {:.5}  val AUC {:.4}", r.epoch, r.train_loss, r.val_auc),
            )?;
            save_checkpoint(
                &out,
                &Checkpoint {
                    config: cfg.model.clone(),
                    params: outcome.best_params.clone(),
                    scale_um: cfg.train.scale_um,
                    sample_seed: cfg.train.sample_seed,
                },
            )?;
            let history = cfg.history_path.clone().unwrap_or_else(|| sibling(&out, "history.csv"));
            tables::write_history(&history, &outcome.history)?;
            // Paths are resolved so the test manifest works from its own directory.
            let base = manifest.parent().unwrap_or(Path::new("."));
            let rows = parts[2]
                .iter()
                .map(|&i| {
                    let mut row = data.manifest.rows()[i].clone();
                    row.path = onh::dataset::resolve(base, &row.path).display().to_string();
                    row
                })
                .collect();
            tables::write_manifest(&sibling(&out, "test_manifest.csv"), &DatasetManifest::new(rows)?)?;
            println!(
                "best epoch {} of {}; final val AUC {:.4}",
                outcome.best_epoch,
                outcome.history.len(),
                outcome.best_val_auc()
            );
        }
        Command::Eval { manifest, ckpt, roc } => {
            let ck = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = load_dataset(&manifest)?;
            let clouds: Vec<&PointCloud> = data.clouds.iter().collect();
            let scores = score_clouds(&ck.params, &ck.config, &clouds, ck.sample_seed, ck.scale_um, 32)?;
            let r = roc_auc(&scores, &data.manifest.labels())?;
            tables::write_roc(&roc.unwrap_or_else(|| sibling(&ckpt, "eval_roc.csv")), &r)?;
            println!("held-out AUC {:.4} on {} scans", r.auc, data.len());
        }
        Command::Cv {
            manifest,
            config,
            k,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let k = k.map_or(cfg.folds, |k| k as usize);
            let data = load_dataset(&manifest)?;
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let report = cross_validate(
                &data.manifest,
                &data.clouds,
                &cfg.model,
                &cfg.train,
                k,
                cfg.seed,
                &mut |f, r| eprintln!("fold {f} epoch {:3}  loss {:.5}  val AUC {:.4}", r.epoch, r.train_loss, r.val_auc),
            )?;
            for f in &report.folds {
                tables::write_history(&out_dir.join(format!("fold{}_history.csv", f.fold)), &f.history)?;
                tables::write_roc(&out_dir.join(format!("fold{}_roc.csv", f.fold)), &f.roc)?;
            }
            tables::write_folds(&out_dir.join("folds.csv"), &report, &data.manifest.labels())?;
            if let Some(p) = &cfg.roc_path {
                let labels = data.manifest.labels();
                let (mut s, mut l) = (Vec::new(), Vec::new());
                for f in &report.folds {
                    s.extend_from_slice(&f.test_scores);
                    l.extend(f.test.iter().map(|&i| labels[i]));
                }
                tables::write_roc(p, &roc_auc(&s, &l)?)?;
            }
            for f in &report.folds {
                println!("fold {}: AUC {:.4} (best epoch {})", f.fold, f.roc.auc, f.best_epoch);
            }
            println!("AUC {:.4} ± {:.4} over {k} folds", report.mean_auc, report.sd_auc);
        }
        Command::Baseline { manifest, roc } => {
            let data = load_dataset(&manifest)?;
            let thickness = data.thickness()?;
            let r = baseline_auc(&thickness, &data.manifest.labels())?;
            tables::write_roc(&roc.unwrap_or_else(|| sibling(&manifest, "baseline_roc.csv")), &r)?;
            println!("RNFL thickness baseline AUC {:.4} on {} scans", r.auc, data.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

