use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mused::augment::PlusBank;
use mused::media::{read_frames, read_wav};
use mused::model::Stage;
use mused::signal::{Waveform, SAMPLES_PER_FRAME};
use mused::synth::{write_mixtures, AudioBank, Corpus, CorpusManifest, InterferenceMode, MixOptions};
use mused::toy::make_toy_dataset;
use mused::train::{
    asd_items, evaluate, finetune, in_domain_bank, pretrain, Checkpoint, RunConfig, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "mused",
    version,
    about = "Audio-visual extraction pre-training and active speaker detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus with noise and RIR banks.
    MakeToyData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        num_clips: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Render mixtures with their clean targets to disk.
    GenerateMixtures {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        noise_bank: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "SSN")]
        mode: InterferenceMode,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
    },
    /// Pre-train on target speaker extraction.
    Pretrain {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        mode: Option<InterferenceMode>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune for active speaker detection.
    Finetune {
        #[command(flatten)]
        common: TrainArgs,
        /// Pre-training checkpoint whose trunk initializes the model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        val_corpus: Option<PathBuf>,
        #[arg(long)]
        rir_bank: Option<PathBuf>,
        #[arg(long)]
        no_augment: bool,
    },
    /// Score a labeled corpus with a fine-tuned checkpoint.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write per-frame speaking probabilities for one face track as CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Directory of PNG frames or a packed frame file.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    noise_bank: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = Result<(), Failure>;

fn existing(path: &Path) -> Result<&Path, Failure> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("no such file: {}", path.display())))
    }
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    let m = CorpusManifest::load(existing(path)?).map_err(usage)?;
    Corpus::load(&m).map_err(usage)
}

fn load_bank(path: Option<&PathBuf>) -> Result<Option<AudioBank>, Failure> {
    path.map(|p| {
        let m = CorpusManifest::load(existing(p)?).map_err(usage)?;
        AudioBank::load(&m).map_err(usage)
    })
    .transpose()
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(existing(path)?).map_err(usage)
}

fn run_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(existing(p)?).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        run.seed = s;
    }
    Ok(run)
}

fn num_workers() -> Result<usize, Failure> {
    match std::env::var("MUSED_NUM_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("MUSED_NUM_WORKERS must be a count, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn prepare_out(dir: &Path, run: &RunConfig) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    run.save(&dir.join("run.cfg")).map_err(runtime)
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::MakeToyData { out_dir, num_clips, seed } => {
            if num_clips == 0 {
                return Err(usage("--num-clips must be positive"));
            }
            let p = make_toy_dataset(&out_dir, num_clips, seed).map_err(runtime)?;
            println!("corpus manifest: {}", p.manifest.display());
            println!("noise bank: {}", p.noise_manifest.display());
            println!("rir bank: {}", p.rir_manifest.display());
            Ok(())
        }
        Command::GenerateMixtures { corpus, noise_bank, out_dir, mode, count, seed, duration } => {
            let corpus = load_corpus(&corpus)?;
            let noise = load_bank(noise_bank.as_ref())?;
            mused::synth::check_mode_support(&corpus, noise.as_ref(), mode).map_err(usage)?;
            let opts = MixOptions { duration_s: duration, ..MixOptions::default() };
            write_mixtures(&corpus, noise.as_ref(), mode, &opts, seed, count, &out_dir).map_err(runtime)?;
            println!("wrote {count} mixtures to {}", out_dir.display());
            Ok(())
        }
        Command::Pretrain { common, mode, resume } => {
            let mut run = run_config(&common)?;
            if let Some(m) = mode {
                run.pretrain_mode = m;
            }
            run.validate().map_err(usage)?;
            let corpus = load_corpus(&common.corpus)?;
            let noise = load_bank(common.noise_bank.as_ref())?;
            mused::synth::check_mode_support(&corpus, noise.as_ref(), run.pretrain_mode).map_err(usage)?;
            let resume = resume.as_deref().map(load_ckpt).transpose()?;
            let workers = num_workers()?;
            prepare_out(&common.out_dir, &run)?;
            let out = pretrain(
                &run,
                &corpus,
                noise.as_ref(),
                TrainOptions {
                    out_dir: Some(common.out_dir.clone()),
                    resume,
                    num_workers: workers,
                    ..Default::default()
                },
            )
            .map_err(runtime)?;
            if let Some(last) = out.history.last() {
                println!(
                    "epoch {} train SI-SDRi {:.2} dB, val SI-SDRi {:.2} dB",
                    last.epoch, last.train_si_sdri, last.val_metric
                );
            }
            println!("checkpoints in {}", common.out_dir.display());
            Ok(())
        }
        Command::Finetune { common, ckpt, val_corpus, rir_bank, no_augment } => {
            let mut run = run_config(&common)?;
            if no_augment {
                run.augment_enabled = false;
            }
            run.validate().map_err(usage)?;
            let items = asd_items(&load_corpus(&common.corpus)?).map_err(usage)?;
            let val =
                val_corpus.as_deref().map(|p| asd_items(&load_corpus(p)?).map_err(usage)).transpose()?;
            let init = ckpt.as_deref().map(load_ckpt).transpose()?;
            let bank = PlusBank {
                in_domain: in_domain_bank(&items),
                ambient: load_bank(common.noise_bank.as_ref())?.unwrap_or_default(),
                rir: load_bank(rir_bank.as_ref())?.unwrap_or_default(),
            };
            let workers = num_workers()?;
            prepare_out(&common.out_dir, &run)?;
            let out = finetune(
                &run,
                &items,
                val.as_deref(),
                init.as_ref(),
                bank,
                TrainOptions {
                    out_dir: Some(common.out_dir.clone()),
                    num_workers: workers,
                    ..Default::default()
                },
            )
            .map_err(runtime)?;
            if let Some(last) = out.history.last() {
                println!("epoch {} loss {:.4}, mAP {:.4}", last.epoch, last.train_loss, last.val_metric);
            }
            println!("checkpoints in {}", common.out_dir.display());
            Ok(())
        }
        Command::Evaluate { ckpt, corpus, out_dir } => {
            let ckpt = load_ckpt(&ckpt)?;
            if ckpt.stage != Stage::Finetune {
                return Err(usage("evaluation needs a fine-tuning checkpoint"));
            }
            let items = asd_items(&load_corpus(&corpus)?).map_err(usage)?;
            let report = evaluate(&ckpt, &items).map_err(runtime)?;
            print!("{}", report.to_text());
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
                fs::write(dir.join("report.txt"), report.to_text()).map_err(runtime)?;
                fs::write(dir.join("report.jsonl"), report.to_json_line() + "\n").map_err(runtime)?;
            }
            Ok(())
        }
        Command::Predict { ckpt, audio, frames, out_dir } => {
            let ckpt = load_ckpt(&ckpt)?;
            if ckpt.stage != Stage::Finetune {
                return Err(usage("prediction needs a fine-tuning checkpoint"));
            }
            let audio = read_wav(existing(&audio)?).map_err(usage)?;
            let faces = read_frames(existing(&frames)?).map_err(usage)?;
            let audio = fit_to_frames(audio, faces.num_frames())?;
            let model = ckpt.model().map_err(runtime)?;
            let scores = model.forward_asd(&audio, &faces).map_err(runtime)?;
            let mut csv = String::from("frame_index,prob\n");
            for (i, p) in scores.0.iter().enumerate() {
                csv.push_str(&format!("{i},{p}\n"));
            }
            match out_dir {
                Some(dir) => {
                    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
                    fs::write(dir.join("predictions.csv"), csv).map_err(runtime)?;
                }
                None => std::io::stdout().write_all(csv.as_bytes()).map_err(runtime)?,
            }
            Ok(())
        }
    }
}

/// Pads or trims audio that is within one frame of the video length.
fn fit_to_frames(audio: Waveform, frames: usize) -> Result<Waveform, Failure> {
    let want = frames * SAMPLES_PER_FRAME;
    if audio.len().abs_diff(want) > SAMPLES_PER_FRAME {
        return Err(Failure::Usage(format!(
            "audio has {} samples but {frames} frames need {want}",
            audio.len()
        )));
    }
    let mut s = audio.samples().to_vec();
    s.resize(want, 0.0);
    Waveform::new(s, audio.sample_rate()).map_err(usage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
