use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slgan::config::TrainConfig;
use slgan::dataset::{load_manifest, LoadOptions, LoadedDataset};
use slgan::domain::{Domain, LatentCode};
use slgan::fixtures::{write_synthetic_dataset, SyntheticSpec};
use slgan::histogram;
use slgan::inference::{
    Face, FrozenModel, InterpolationMode, InterpolationSpec, RemovalGuidance,
};
use slgan::training::{fit, load_checkpoint, ModelBundle};

#[derive(Parser)]
#[command(name = "slgan", version, about = "Makeup transfer and removal GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override `total_steps` from the config or checkpoint.
        #[arg(long)]
        total_steps: Option<u64>,
    },
    /// Apply a reference's makeup to a source face.
    Transfer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Strength in [0, 1]: 0 keeps the source's own style.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Remove makeup, guided by a bare-faced reference or a latent seed.
    Remove {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "seed")]
        reference: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a weighted mix of several references' makeup.
    Interpolate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        weights: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a light-to-heavy (or latent) sequence of frames.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        /// Makeup reference; omit to sweep between two latent seeds.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed_a: u64,
        #[arg(long, default_value_t = 1)]
        seed_b: u64,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Write a synthetic dataset in the training layout.
    SynthFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        makeup: usize,
        #[arg(long, default_value_t = 4)]
        non_makeup: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_landmarks: bool,
    },
    /// Index a dataset and print its per-domain counts.
    Inspect {
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare histogram matching against the sort-based oracle.
    HmSelftest {
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    bundle: PathBuf,
    /// Directory of parsing maps named like the images (or `<stem>.png`).
    /// Without it, `<stem>.seg.png` next to each image is used if present.
    #[arg(long)]
    segs: Option<PathBuf>,
}

fn sidecar(image: &Path, suffix: &str) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image.with_file_name(format!("{stem}{suffix}"))
}

fn parsing_for(image: &Path, segs: Option<&Path>) -> Option<PathBuf> {
    let candidates = match segs {
        Some(dir) => {
            let name = image.file_name().unwrap_or_default();
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            vec![dir.join(name), dir.join(format!("{stem}.png"))]
        }
        None => vec![sidecar(image, ".seg.png")],
    };
    candidates.into_iter().find(|p| p.is_file())
}

fn load_face(model: &FrozenModel, image: &Path, segs: Option<&Path>) -> Result<Face> {
    let seg = parsing_for(image, segs);
    if seg.is_none() {
        log::warn!("no parsing map for {}; using the whole image", image.display());
    }
    let lm = Some(sidecar(image, ".lm.txt")).filter(|p| p.is_file());
    model
        .face_from_files(image, seg.as_deref(), lm.as_deref())
        .with_context(|| format!("loading {}", image.display()))
}

fn open_model(args: &ModelArgs) -> Result<FrozenModel> {
    FrozenModel::load(&args.bundle).with_context(|| format!("loading {}", args.bundle.display()))
}

fn save(img: &slgan::dataset::ImageTensor, path: &Path) -> Result<()> {
    img.to_rgb8()
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn train(
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    total_steps: Option<u64>,
) -> Result<()> {
    let mut bundle = match resume {
        Some(p) => load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::desk(),
            };
            ModelBundle::init(&cfg, cfg.seed)?
        }
    };
    if let Some(n) = total_steps {
        bundle.config.total_steps = n;
    }
    let cfg = &bundle.config;
    let res = cfg.model.resolution;
    let index = load_manifest(&data, res)?;
    let (m, n) = index.counts();
    println!("dataset: {m} makeup / {n} non-makeup");
    let opts = LoadOptions {
        resolution: res,
        eye_ring_px: cfg.eye_ring_px(),
        heatmap_sigma: cfg.heatmap_sigma,
    };
    let dataset = LoadedDataset::load(&index, &opts)?;
    let total = cfg.total_steps;
    let (_, outcome) = fit(bundle, &dataset, &out, |r| {
        if r.step % 10 == 0 || r.step + 1 == total {
            println!(
                "step {:>6}  G {:9.4}  D {:7.4}  cyc {:.4}  makeup {:.4}",
                r.step, r.total_g, r.total_d, r.cycle, r.makeup
            );
        }
    })?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            resume,
            total_steps,
        } => train(config, data, out, resume, total_steps)?,
        Command::Transfer {
            model,
            source,
            reference,
            out,
            alpha,
        } => {
            let m = open_model(&model)?;
            let src = load_face(&m, &source, model.segs.as_deref())?;
            let rf = load_face(&m, &reference, model.segs.as_deref())?;
            let img = match alpha {
                None => m.transfer(&src, &rf)?,
                Some(a) if (0.0..=1.0).contains(&a) => {
                    let spec = InterpolationSpec {
                        weights: vec![1.0],
                        mode: InterpolationMode::SourceBlend,
                        alpha: a,
                        latent_seeds: None,
                        domain: Domain::Makeup,
                    };
                    m.run(&src, std::slice::from_ref(&rf), &spec)?
                }
                Some(a) => bail!("--alpha must lie in [0, 1], got {a}"),
            };
            save(&img, &out)?;
        }
        Command::Remove {
            model,
            source,
            out,
            reference,
            seed,
        } => {
            let m = open_model(&model)?;
            let src = load_face(&m, &source, model.segs.as_deref())?;
            let img = match reference {
                Some(r) => {
                    let rf = load_face(&m, &r, model.segs.as_deref())?;
                    m.remove(&src, &RemovalGuidance::Reference(&rf))?
                }
                None => {
                    let z = LatentCode::from_seed(seed.unwrap_or(0));
                    m.remove(&src, &RemovalGuidance::Latent(z))?
                }
            };
            save(&img, &out)?;
        }
        Command::Interpolate {
            model,
            source,
            refs,
            weights,
            out,
        } => {
            if refs.len() != weights.len() {
                bail!("{} references but {} weights", refs.len(), weights.len());
            }
            let m = open_model(&model)?;
            let src = load_face(&m, &source, model.segs.as_deref())?;
            let faces = refs
                .iter()
                .map(|r| load_face(&m, r, model.segs.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            save(&m.interpolate(&src, &faces, &weights)?, &out)?;
        }
        Command::Sweep {
            model,
            source,
            reference,
            steps,
            seed_a,
            seed_b,
            outdir,
        } => {
            let m = open_model(&model)?;
            let src = load_face(&m, &source, model.segs.as_deref())?;
            let frames = match reference {
                Some(r) => {
                    let rf = load_face(&m, &r, model.segs.as_deref())?;
                    m.strength_sweep(&src, Domain::NonMakeup, &rf, steps)?
                }
                None => m.latent_sweep(&src, seed_a, seed_b, steps, Domain::NonMakeup)?,
            };
            std::fs::create_dir_all(&outdir)?;
            for (i, f) in frames.iter().enumerate() {
                save(f, &outdir.join(format!("frame_{i:03}.png")))?;
            }
            println!("wrote {} frames to {}", frames.len(), outdir.display());
        }
        Command::SynthFixture {
            out,
            makeup,
            non_makeup,
            size,
            seed,
            no_landmarks,
        } => {
            let spec = SyntheticSpec {
                makeup,
                non_makeup,
                size,
                seed,
                landmarks: !no_landmarks,
            };
            write_synthetic_dataset(&out, &spec)?;
            println!("wrote {makeup} makeup / {non_makeup} non-makeup faces to {}", out.display());
        }
        Command::Inspect { data } => {
            let index = load_manifest(&data, 64)?;
            let (m, n) = index.counts();
            println!("makeup {m}\nnon-makeup {n}");
        }
        Command::HmSelftest {
            pairs,
            max_len,
            seed,
        } => {
            let r = histogram::self_test(pairs, max_len, seed);
            println!(
                "pairs {}  max oracle error {:.3e}  max idempotence error {:.3e}  multiset failures {}",
                r.pairs, r.max_oracle_error, r.max_idempotence_error, r.multiset_failures
            );
            if !r.passed(1e-9) {
                bail!("histogram matching self-test failed");
            }
            println!("ok");
        }
    }
    Ok(())
}
