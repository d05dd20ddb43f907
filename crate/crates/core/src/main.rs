use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use emoedit_core::config::RunConfig;
use emoedit_core::diffusion::{EditorNets, LatentCodec};
use emoedit_core::domain::manifest::write_atomic;
use emoedit_core::domain::{EmotionLabel, ImageBuffer};
use emoedit_core::inference::{iterative_edit_with, save_session};
use emoedit_core::pipeline::{self, RunLayout};
use emoedit_core::predictor::PredictorModel;
use emoedit_core::Result;

#[derive(Parser)]
#[command(name = "emoedit", version, about = "Emotion-conditioned image editing toolkit")]
struct Cli {
    /// TOML run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the artifact root (also settable via EMOEDIT_ARTIFACT_ROOT).
    #[arg(long, global = true)]
    artifact_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural toy corpus and its label manifest.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Train the emotion predictor on a labeled manifest.
    TrainPredictor {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the latent codec on a labeled manifest.
    TrainCodec {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build a paired training manifest.
    Curate(CurateArgs),
    /// Train the emotion editor on a pair manifest.
    TrainEditor {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Critic-guided edit of one image towards a target emotion.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        emotion: EmotionLabel,
        #[arg(long)]
        editor: PathBuf,
        /// Codec checkpoint; defaults to the one recorded in the editor checkpoint.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        session: Option<PathBuf>,
    },
    /// Score (source, generated, target) triples.
    Evaluate {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        /// JSON report path; a plain-text table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage under the artifact root.
    RunAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Epas,
    Epgs,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(value_enum)]
    subset: Subset,
    /// Pair manifest (epas) or labeled source manifest (epgs).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    predictor: PathBuf,
    /// Ranked instruction bank; the built-in bank is used otherwise.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn persist_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_atomic(path, cfg.to_toml()?.as_bytes())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_env();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(root) = cli.artifact_root {
        cfg.artifact_root = root;
    }
    match cli.command {
        Command::SynthCorpus { out, per_class } => {
            if let Some(n) = per_class {
                cfg.synth.per_class = n;
            }
            cfg.validate()?;
            let manifest = emoedit_core::synth::synth_corpus(&cfg.synth_config(), &out)?;
            persist_config(&cfg, &out.join("config.toml"))?;
            println!("{}", manifest.display());
        }
        Command::TrainPredictor { corpus, out, epochs } => {
            if let Some(e) = epochs {
                cfg.predictor.epochs = e;
            }
            cfg.validate()?;
            let report = pipeline::train_predictor_stage(&cfg, &corpus, &out)?;
            persist_config(&cfg, &sibling(&out, ".config.toml"))?;
            println!("train accuracy {:.4}", report.train_accuracy);
        }
        Command::TrainCodec { corpus, out, epochs } => {
            if let Some(e) = epochs {
                cfg.codec.epochs = e;
            }
            cfg.validate()?;
            let report = pipeline::train_codec_stage(&cfg, &corpus, &out)?;
            persist_config(&cfg, &sibling(&out, ".config.toml"))?;
            println!("reconstruction mae {:.3}", report.reconstruction_mae);
        }
        Command::Curate(args) => {
            cfg.validate()?;
            let predictor = PredictorModel::load(&args.predictor)?;
            let report = match args.subset {
                Subset::Epgs => {
                    let bank = pipeline::load_bank(&cfg, args.bank.as_deref())?;
                    let (records, report) = pipeline::curate_epgs(&cfg, &args.input, &predictor, &bank, &args.out)?;
                    println!("{} pairs", records.len());
                    serde_json::to_value(report)?
                }
                Subset::Epas => {
                    let (records, report) = pipeline::curate_epas(&args.input, &predictor, &args.out)?;
                    println!("{} pairs", records.len());
                    serde_json::to_value(report)?
                }
            };
            let report_path = args.report.unwrap_or_else(|| sibling(&args.out, ".report.json"));
            write_json(&report_path, &report)?;
            persist_config(&cfg, &sibling(&args.out, ".config.toml"))?;
        }
        Command::TrainEditor {
            corpus,
            codec,
            out,
            steps,
            lambda,
        } => {
            if let Some(s) = steps {
                cfg.editor.steps = s;
            }
            if let Some(l) = lambda {
                cfg.editor.lambda = l;
            }
            cfg.validate()?;
            let report = pipeline::train_editor_stage(&cfg, &corpus, &codec, &out)?;
            persist_config(&cfg, &out.join("config.toml"))?;
            println!(
                "loss {:.4} -> {:.4} ({:.3})",
                report.initial_loss, report.final_smoothed_loss, report.ratio
            );
        }
        Command::Edit {
            image,
            emotion,
            editor,
            codec,
            predictor,
            out,
            session,
        } => {
            cfg.validate()?;
            let nets = EditorNets::load(&editor)?;
            let codec = match codec {
                Some(p) => {
                    let c = LatentCodec::load(&p)?;
                    nets.check_codec(&c)?;
                    c
                }
                None => nets.load_codec(&editor)?,
            };
            let predictor = PredictorModel::load(&predictor)?;
            let source = ImageBuffer::load(&image)?;
            let sampler = cfg.sampler_config();
            let result = iterative_edit_with(&source, emotion, &nets, &codec, &predictor, &sampler, &cfg.critic)?;
            result.final_image().save(&out)?;
            if let Some(dir) = session {
                save_session(&result, &sampler, &cfg.critic, &dir)?;
                persist_config(&cfg, &dir.join("config.toml"))?;
            }
            let v = result.final_verdict();
            println!(
                "{} iterations, {:?}; predicted {} ({:.3}), ssim {:.3}",
                result.iterations.len(),
                result.stop_reason,
                v.predicted,
                v.confidence,
                v.ssim
            );
        }
        Command::Evaluate { triples, predictor, out } => {
            cfg.validate()?;
            let predictor = PredictorModel::load(&predictor)?;
            let report = emoedit_core::metrics::evaluate_batch(&triples, &predictor, &cfg.evaluate.metrics)?;
            write_json(&out, &report)?;
            let table = report.summary_table();
            write_atomic(&out.with_extension("txt"), table.as_bytes())?;
            print!("{table}");
        }
        Command::RunAll => {
            let summary = pipeline::run_pipeline(&cfg)?;
            let layout = RunLayout::new(&cfg.artifact_root);
            info!("summary written to {}", layout.report_dir().join("summary.json").display());
            println!(
                "predictor accuracy {:.4}; curated {}; editor loss ratio {:.3}; EMR {:.3}; mean SSIM {:.3}",
                summary.predictor_train_accuracy,
                summary.curation.filter.accepted,
                summary.editor.ratio,
                summary.metrics.emr,
                summary.edit.mean_ssim
            );
            print!("{}", summary.metrics.summary_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
