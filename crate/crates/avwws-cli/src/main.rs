//! `avwws`: generate data, train, evaluate, and analyze audio-visual wake
//! word spotting models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avwws_core::ablation::{ablation_csv, run_ablation, unimodal_csv};
use avwws_core::ckpt::{load_checkpoint, save_checkpoint};
use avwws_core::config::{Profile, RunConfig};
use avwws_core::corpus_io::{load_corpus, save_corpus};
use avwws_core::error::{Error, Result};
use avwws_core::eval::{evaluate, rollout_analysis, ThresholdPolicy};
use avwws_core::model::{FusionKind, Modality};
use avwws_core::synth::generate_corpus;
use avwws_core::train::{
    fine_tune, pretrain_transfer, step_log_csv, train, ModelVariant, TrainOutcome,
};

#[derive(Parser)]
#[command(name = "avwws", about = "Audio-visual wake word spotting pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run configuration; missing fields take profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the corpus/training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Model/corpus size profile.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    Tiny,
    Paper,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::defaults(Profile::Tiny, 0),
        };
        base.with_overrides(
            self.seed,
            self.profile.map(|p| match p {
                ProfileArg::Tiny => Profile::Tiny,
                ProfileArg::Paper => Profile::Paper,
            }),
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus to a directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured multi-modal model from scratch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the two uni-modal models (pretrain stage).
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for audio.ckpt and visual.ckpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer uni-modal donors into the multi-modal model and fine-tune.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Audio donor checkpoint.
        #[arg(long)]
        audio_ckpt: PathBuf,
        /// Visual donor checkpoint.
        #[arg(long)]
        visual_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split name: train, dev or eval.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Fixed decision threshold; omitted = sweep on dev.
        #[arg(long)]
        threshold: Option<f64>,
        /// Output directory for report.csv and scores.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the full fusion/pretrain ablation grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the tables and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention rollout and cross-modal attention maps for a sample.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id (as listed in the corpus manifest).
        #[arg(long)]
        sample_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn cmd_gen_data(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    save_corpus(out, &corpus, &cfg.corpus)?;
    println!(
        "wrote {} train / {} dev / {} eval samples to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.eval.len(),
        out.display()
    );
    Ok(())
}

fn save_training(out: &Path, outcome: &TrainOutcome, cfg: &RunConfig) -> Result<()> {
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(out, &outcome.best_params, Some(&cfg.model), Some(&cfg.train))?;
    write(&out.with_extension("log.csv"), &step_log_csv(&outcome.log))?;
    println!(
        "best dev WWS {:.4} (final {:.4}); checkpoint {}",
        outcome.best_dev_wws,
        outcome.final_dev_wws,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let (corpus, _) = load_corpus(data)?;
    let outcome = train(
        &cfg.model,
        &cfg.train,
        ModelVariant::MultiModal,
        &corpus.train,
        &corpus.dev,
    )?;
    save_training(out, &outcome, &cfg)
}

fn cmd_pretrain(config: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let (corpus, _) = load_corpus(data)?;
    std::fs::create_dir_all(out)?;
    for modality in [Modality::Audio, Modality::Visual] {
        let outcome = train(
            &cfg.model,
            &cfg.train,
            ModelVariant::UniModal(modality),
            &corpus.train,
            &corpus.dev,
        )?;
        let path = out.join(format!("{}.ckpt", modality.stream()));
        save_checkpoint(&path, &outcome.best_params, Some(&cfg.model), Some(&cfg.train))?;
        write(&path.with_extension("log.csv"), &step_log_csv(&outcome.log))?;
        println!(
            "{} model: best dev WWS {:.4}; checkpoint {}",
            modality.stream(),
            outcome.best_dev_wws,
            path.display()
        );
    }
    Ok(())
}

fn check_donor_compat(
    cfg: &RunConfig,
    donor: &avwws_core::ckpt::Checkpoint,
    which: &str,
) -> Result<()> {
    if let Some(mc) = &donor.model_config {
        if mc.embed_dim != cfg.model.embed_dim
            || mc.n_heads != cfg.model.n_heads
            || mc.n_blocks != cfg.model.n_blocks
            || mc.block_kind != cfg.model.block_kind
        {
            return Err(Error::Incompatible(format!(
                "{which} donor was trained with a different architecture"
            )));
        }
    }
    Ok(())
}

fn cmd_finetune(
    config: &ConfigArgs,
    data: &Path,
    audio_ckpt: &Path,
    visual_ckpt: &Path,
    out: &Path,
) -> Result<()> {
    let mut cfg = config.resolve()?;
    cfg.model.fusion = FusionKind::Flcma;
    let (corpus, _) = load_corpus(data)?;
    let audio = load_checkpoint(audio_ckpt)?;
    let visual = load_checkpoint(visual_ckpt)?;
    check_donor_compat(&cfg, &audio, "audio")?;
    check_donor_compat(&cfg, &visual, "visual")?;
    let mut params = avwws_core::model::init_params::<f32>(
        &avwws_core::model::multimodal_parameter_specs(&cfg.model),
        avwws_core::synth::derive_seed(cfg.train.seed, "init", 0),
    );
    let manifest = pretrain_transfer(&audio.params, &visual.params, &mut params)?;
    let outcome = fine_tune(
        params,
        &cfg.model,
        &cfg.train,
        ModelVariant::MultiModal,
        &corpus.train,
        &corpus.dev,
    )?;
    save_training(out, &outcome, &cfg)?;
    write(
        &out.with_extension("transfer.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "transferred {} parameters, {} fresh",
        manifest.copied().count(),
        manifest.fresh.len()
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    split: &str,
    threshold: Option<f64>,
    out: &Path,
) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    let model_cfg = checkpoint
        .model_config
        .ok_or_else(|| Error::Format("checkpoint lacks a model config".into()))?;
    let (corpus, _) = load_corpus(data)?;
    let samples = corpus.split(split)?;
    let policy = match threshold {
        Some(t) => ThresholdPolicy::Fixed(t),
        None => ThresholdPolicy::SweepOnDev,
    };
    let report = evaluate(
        &checkpoint.params,
        &model_cfg,
        ModelVariant::MultiModal,
        samples,
        &corpus.dev,
        policy,
        16,
    )?;
    std::fs::create_dir_all(out)?;
    write(&out.join(format!("report_{split}.csv")), &report.report_csv())?;
    write(&out.join(format!("scores_{split}.csv")), &report.scores_csv())?;
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_ablate(config: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let (corpus, _) = load_corpus(data)?;
    let result = run_ablation(&corpus, &cfg.model, &cfg.train)?;
    std::fs::create_dir_all(out)?;
    write(&out.join("ablation.csv"), &ablation_csv(&result))?;
    write(&out.join("ablation_unimodal.csv"), &unimodal_csv(&result))?;
    let ckpt_dir = out.join("ckpt");
    std::fs::create_dir_all(&ckpt_dir)?;
    for (method, (model_cfg, params)) in &result.checkpoints {
        save_checkpoint(
            &ckpt_dir.join(format!("{method}.ckpt")),
            params,
            Some(model_cfg),
            Some(&cfg.train),
        )?;
    }
    for (method, manifest) in &result.manifests {
        write(
            &out.join(format!("transfer_{method}.json")),
            &serde_json::to_string_pretty(manifest)?,
        )?;
    }
    print!("{}", ablation_csv(&result));
    Ok(())
}

fn cmd_rollout(ckpt: &Path, data: &Path, sample_id: &str, out: &Path) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    let model_cfg = checkpoint
        .model_config
        .ok_or_else(|| Error::Format("checkpoint lacks a model config".into()))?;
    let (corpus, _) = load_corpus(data)?;
    let sample = corpus
        .train
        .iter()
        .chain(&corpus.dev)
        .chain(&corpus.eval)
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Error::invalid("rollout", format!("no sample with id `{sample_id}`")))?;
    let analysis = rollout_analysis(&checkpoint.params, &model_cfg, sample)?;
    std::fs::create_dir_all(out)?;
    write(&out.join("rollout.csv"), &analysis.time_attention_csv())?;
    if analysis.flcma_last.is_some() {
        write(&out.join("flcma.csv"), &analysis.flcma_csv()?)?;
    }
    println!(
        "rollout for {sample_id}: {} frames, peaks at {:?}",
        analysis.t,
        analysis.attention_peaks()
    );
    Ok(())
}

fn run() -> Result<()> {
    avwws_core::runtime::init_from_env();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { config, out } => cmd_gen_data(config, out),
        Command::Train { config, data, out } => cmd_train(config, data, out),
        Command::Pretrain { config, data, out } => cmd_pretrain(config, data, out),
        Command::Finetune {
            config,
            data,
            audio_ckpt,
            visual_ckpt,
            out,
        } => cmd_finetune(config, data, audio_ckpt, visual_ckpt, out),
        Command::Eval {
            ckpt,
            data,
            split,
            threshold,
            out,
        } => cmd_eval(ckpt, data, split, *threshold, out),
        Command::Ablate { config, data, out } => cmd_ablate(config, data, out),
        Command::Rollout {
            ckpt,
            data,
            sample_id,
            out,
        } => cmd_rollout(ckpt, data, sample_id, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
