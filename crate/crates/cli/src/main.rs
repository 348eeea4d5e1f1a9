//! `cisnet` command-line tool. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cisnet_core::channel::{apply_channel, parse_channel_list, ChannelSpec};
use cisnet_core::checkpoint::ModelCheckpoint;
use cisnet_core::classifier::{Arch, FitOptions};
use cisnet_core::config::TrainConfig;
use cisnet_core::data::{load_image, load_named, make_synthetic_sprites, save_image};
use cisnet_core::evaluation::{eval_accuracy_table, fid, FeatureExtractor, RandomConvEmbedding};
use cisnet_core::message::{ExpressionLabel, SecretMessage, N_EXPRESSIONS};
use cisnet_core::model::StegoModel;
use cisnet_core::security::{export_embedding_features, generalization_experiment, sample_images, DetectorSpec};
use cisnet_core::trainer::{retrain_extractor, train, train_baseline_gan, RetrainOptions, TrainOutputs};

#[derive(Parser)]
#[command(name = "cisnet", version, about = "Coverless image steganography with a message-driven generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a stego model; writes the checkpoint and a loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Condition on expression labels (needs a labelled dataset).
        #[arg(long)]
        expression: bool,
        #[arg(long, default_value = "model.ck")]
        out: PathBuf,
        /// Loss log; defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the baseline GAN on standard-normal inputs.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "baseline.ck")]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Hide a bit string in a generated image.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        /// Literal '0'/'1' characters, most significant first.
        #[arg(long)]
        bits: String,
        /// Expression name or index, for expression-conditioned models.
        #[arg(long)]
        expression: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JPEG quality when `--out` ends in .jpg/.jpeg.
        #[arg(long)]
        quality: Option<u8>,
    },
    /// Recover the bit string from an image.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Send an image through a channel attack.
    Attack {
        #[arg(long = "in")]
        input: PathBuf,
        /// e.g. jpeg:80, rotation:10, gauss:0.05, sp:0.01, median, blur.
        #[arg(long)]
        channel: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bit-accuracy table over a list of channels (CSV, plus JSON next to it).
    EvalAccuracy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "identity,jpeg:90,jpeg:80,jpeg:70,jpeg:60,jpeg:50")]
        channels: String,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID between real images and model samples under the random-conv embedding.
    EvalFid {
        #[arg(long)]
        ckpt: PathBuf,
        /// Image folder, or `sprites`.
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a new extractor for a frozen generator.
    RetrainExtractor {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        channels: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train detectors on baseline-vs-stego images and test them on other models.
    Detect {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        stego: PathBuf,
        /// Comma-separated checkpoints to test on.
        #[arg(long)]
        targets: String,
        #[arg(long, default_value = "simple_cnn")]
        arch: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        n_per_class: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export SRM residual features of model samples for external embedding tools.
    ExportFeatures {
        /// Comma-separated checkpoints; rows are labelled with the file stem.
        #[arg(long)]
        ckpts: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic sprite dataset as PNGs plus labels.csv.
    MakeSprites {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_model(path: &Path) -> anyhow::Result<ModelCheckpoint> {
    ModelCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn split_list(s: &str) -> Vec<PathBuf> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
}

fn parse_label(s: &str) -> anyhow::Result<ExpressionLabel> {
    Ok(match s.parse::<usize>() {
        Ok(i) => ExpressionLabel::new(i)?,
        Err(_) => ExpressionLabel::from_name(s)?,
    })
}

fn print_report(r: &cisnet_core::trainer::LossReport) {
    log::info!(
        "step {} L_d {:.4} (adv {:.4} att {:.4} gp {:.4}) L_g {:.4} (adv {:.4} att {:.4} ext {:.4}) {}",
        r.step,
        r.l_d,
        r.adv_d,
        r.att_d,
        r.gp,
        r.l_g,
        r.adv_g,
        r.att_g,
        r.ext,
        r.channel
    );
}

fn run_training(
    config: &Path,
    expression: bool,
    seed: Option<u64>,
    out: &Path,
    log: Option<PathBuf>,
    baseline: bool,
) -> anyhow::Result<()> {
    if out.exists() {
        bail!("{} already exists; checkpoints are never overwritten", out.display());
    }
    let mut cfg = TrainConfig::load(config)?;
    cfg.expression |= expression;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = load_named(&cfg.dataset, cfg.dataset_size, cfg.seed)?;
    let outputs = TrainOutputs {
        loss_log: Some(log.unwrap_or_else(|| with_suffix(out, ".loss.csv"))),
        checkpoint_dir: (cfg.checkpoint_every > 0).then(|| with_suffix(out, ".steps")),
    };
    let ck = if baseline {
        train_baseline_gan(&cfg, &data, &outputs, print_report)?
    } else {
        train(&cfg, &data, &outputs, print_report)?
    };
    ck.save(out)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            expression,
            out,
            log,
            seed,
        } => run_training(&config, expression, seed, &out, log, false),
        Command::TrainBaseline { config, out, log, seed } => run_training(&config, false, seed, &out, log, true),
        Command::Encode {
            ckpt,
            bits,
            expression,
            out,
            seed,
            quality,
        } => {
            let model = load_model(&ckpt)?.model;
            let msg = SecretMessage::parse(&bits)?;
            let label = expression.as_deref().map(parse_label).transpose()?;
            let labels = label.map(|l| vec![l]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = model.encode(&[msg], labels.as_deref(), &mut rng)?.remove(0);
            save_image(&img, &out, quality)?;
            Ok(())
        }
        Command::Decode { ckpt, input } => {
            let model = load_model(&ckpt)?.model;
            let img = load_image(&input)?;
            println!("{}", model.decode(&[img])?.remove(0));
            Ok(())
        }
        Command::Attack {
            input,
            channel,
            out,
            seed,
        } => {
            let spec: ChannelSpec = channel.parse()?;
            let img = load_image(&input)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let attacked = apply_channel(&img, &spec, &mut rng)?.image;
            // a JPEG channel writing to a .jpg path keeps the exact codec bytes
            let quality = match (spec, out.extension().and_then(|e| e.to_str())) {
                (ChannelSpec::Jpeg { qf }, Some("jpg" | "jpeg")) => {
                    save_image(&img, &out, Some(qf))?;
                    return Ok(());
                }
                (_, Some("jpg" | "jpeg")) => Some(100),
                _ => None,
            };
            save_image(&attacked, &out, quality)?;
            Ok(())
        }
        Command::EvalAccuracy {
            ckpt,
            channels,
            n,
            seed,
            out,
        } => {
            let model = load_model(&ckpt)?.model;
            let specs = parse_channel_list(&channels)?;
            let report = eval_accuracy_table(&model, &specs, n, seed)?;
            report.write_csv(&out)?;
            report.write_json(&out.with_extension("json"))?;
            for r in &report.rows {
                println!("{}\t{:.4}", r.channel, r.accuracy);
            }
            Ok(())
        }
        Command::EvalFid {
            ckpt,
            data,
            n,
            seed,
            out,
        } => {
            let model = load_model(&ckpt)?.model;
            let real = load_named(&data, n, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fake = sample_images(&model, real.len(), &mut rng)?;
            let emb = RandomConvEmbedding::default();
            let value = fid(&emb.embed(&real.images)?, &emb.embed(&fake)?)?;
            let json = serde_json::json!({
                "fid": value,
                "n_real": real.len(),
                "n_generated": fake.len(),
                "real_source": real.source,
                "feature_extractor": emb.id(),
                "seed": seed,
                "variant": model.variant,
                "config": model.config,
            });
            std::fs::write(&out, serde_json::to_vec_pretty(&json)?)?;
            println!("{value:.6}");
            Ok(())
        }
        Command::RetrainExtractor {
            ckpt,
            channels,
            out,
            steps,
            batch,
            lr,
            seed,
        } => {
            if out.exists() {
                bail!("{} already exists; checkpoints are never overwritten", out.display());
            }
            let ck = load_model(&ckpt)?;
            let specs = parse_channel_list(&channels)?;
            let opts = RetrainOptions {
                steps,
                batch_size: batch,
                lr,
                seed,
            };
            let ext = retrain_extractor(&ck.model, &specs, &opts, |s, l| {
                if s % 100 == 0 {
                    log::info!("step {s} L_e {l:.4}");
                }
            })?;
            let mut model: StegoModel = ck.model;
            model.extractor = Some(ext);
            model.config.channels = specs.iter().map(ToString::to_string).collect();
            let rng = ck.rng.restore()?;
            ModelCheckpoint::new(model, ck.step, &rng).save(&out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Detect {
            baseline,
            stego,
            targets,
            arch,
            reps,
            n_per_class,
            epochs,
            seed,
            out,
        } => {
            let arch: Arch = arch.parse()?;
            let base = load_model(&baseline)?.model;
            let reference = load_model(&stego)?.model;
            let target_paths = split_list(&targets);
            let loaded = target_paths
                .iter()
                .map(|p| Ok((p.display().to_string(), load_model(p)?.model)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let target_refs: Vec<(String, &StegoModel)> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
            let spec = DetectorSpec {
                arch,
                n_per_class,
                fit: FitOptions {
                    epochs,
                    ..FitOptions::default()
                },
                ..DetectorSpec::default()
            };
            let report = generalization_experiment(&base, &reference, &target_refs, &spec, reps, seed, |rep, held, acc| {
                log::info!("repetition {rep}: held-out {held:.4}, targets {acc:?}");
            })?;
            let json = serde_json::json!({
                "report": report,
                "baseline": {"path": baseline, "variant": base.variant, "config": base.config},
                "reference": {"path": stego, "variant": reference.variant, "config": reference.config},
                "targets": loaded.iter().map(|(n, m)| serde_json::json!({"path": n, "variant": m.variant, "config": m.config})).collect::<Vec<_>>(),
            });
            std::fs::write(&out, serde_json::to_vec_pretty(&json)?)?;
            println!("held-out\t{:.4}", report.heldout_mean);
            for r in &report.rows {
                println!("{}\t{:.4}", r.name, r.mean);
            }
            Ok(())
        }
        Command::ExportFeatures { ckpts, n, seed, out } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = Vec::new();
            for path in split_list(&ckpts) {
                let model = load_model(&path)?.model;
                let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                rows.extend(sample_images(&model, n, &mut rng)?.into_iter().map(|i| (label.clone(), i)));
            }
            if rows.is_empty() {
                bail!("no checkpoints given");
            }
            export_embedding_features(&rows, &out)?;
            Ok(())
        }
        Command::MakeSprites { n, seed, out } => {
            let d = make_synthetic_sprites(n, seed, N_EXPRESSIONS)?;
            d.save_dir(&out)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
