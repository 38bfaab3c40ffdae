use std::path::{Path, PathBuf};

use accent_core::config::{Ablation, ConfigLayers, Override, RunConfig};
use accent_core::data::{read_manifest, UtteranceRecord};
use accent_core::features::{
    compute_mel, extract_prosody, load_pretrained_features, Lexicon, PhoneInventory, SourceKind, Waveform,
};
use accent_core::inference::{export_mel, invoke_vocoder_adapter, Converter, ProsodySource};
use accent_core::model::SpeakerCondition;
use accent_core::pipeline::{evaluate_records, run_pipeline, train_stage, Splits};
use accent_core::preprocess::{preprocess, CorpusSource, PreprocessSettings};
use accent_core::toy::{self, ToySpec};
use accent_core::training::{Checkpoint, Stage};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "accent", version, about = "Non-autoregressive accent conversion")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to runs/<timestamp>-<config hash>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Config override, e.g. `--set stage1.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features for both corpora into the content-hashed cache.
    Preprocess {
        #[arg(long)]
        native: Option<PathBuf>,
        #[arg(long)]
        accented: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run stage 3 directly from a stage-1 checkpoint.
        #[arg(long)]
        allow_skip_stage2: bool,
        /// Manifest written by `preprocess`. Defaults to `<data.cache_dir>/manifest.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Convert one utterance.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source waveform.
        #[arg(long)]
        input: PathBuf,
        /// Pretrained-encoder features for the input (required for checkpoints trained on them).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Target speaker, by name or table index.
        #[arg(long)]
        speaker: String,
        /// Copy pitch and energy from the input instead of predicting them.
        #[arg(long)]
        copy_prosody: bool,
        /// Output mel file. Defaults to `<run dir>/<input stem>.mel.acft`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also render a waveform through the configured vocoder adapter.
        #[arg(long)]
        wav: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the accented test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Preprocess (unless a manifest is given), train all stages and evaluate.
    Pipeline {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Apply one of the ablation presets: baseline, mel_star, pretrained, full.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Write the synthetic toy corpus and a matching config file.
    ToyCorpus {
        dir: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<(RunConfig, Vec<Override>)> {
    let mut layers = ConfigLayers::new(&RunConfig::default())?;
    if let Some(path) = &cli.config {
        layers = layers.file(path)?;
    }
    layers = layers.env(std::env::vars())?;
    let mut flags = cli.set.clone();
    if let Some(seed) = cli.seed {
        flags.push(format!("seed={seed}"));
    }
    if let Command::Pipeline {
        ablation: Some(a), ..
    } = &cli.command
    {
        let mut preset = RunConfig::default();
        a.apply(&mut preset);
        flags.extend([
            format!("stage3.use_mel_star={}", preset.stage3.use_mel_star),
            format!("stage2.feature_kind=\"{}\"", preset.stage2.feature_kind),
            format!("stage3.feature_kind=\"{}\"", preset.stage3.feature_kind),
            format!("pipeline.skip_stage2={}", preset.pipeline.skip_stage2),
        ]);
    }
    Ok(layers.assignments(&flags)?.build()?)
}

fn open_run_dir(cli: &Cli, cfg: &RunConfig, applied: &[Override]) -> Result<PathBuf> {
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
            let base = PathBuf::from("runs").join(format!("{stamp}-{}", cfg.digest()?));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let effective = cfg.to_toml()?;
    std::fs::write(dir.join("config.toml"), &effective)?;
    std::fs::write(dir.join("overrides.json"), serde_json::to_vec_pretty(applied)?)?;
    for o in applied {
        log::info!("config {} {} = {}", o.source, o.key, o.value);
    }
    log::info!("effective config:\n{effective}");
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn speaker_table(records: &[UtteranceRecord]) -> Vec<String> {
    let n = records.iter().map(|r| r.speaker_id as usize + 1).max().unwrap_or(0);
    let mut names = vec![String::new(); n];
    for r in records {
        names[r.speaker_id as usize] = r.speaker.clone();
    }
    names
}

fn manifest_path(cfg: &RunConfig, given: &Option<PathBuf>) -> Result<PathBuf> {
    match (given, &cfg.data.cache_dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(cache)) => Ok(cache.join("manifest.jsonl")),
        (None, None) => bail!("no manifest: pass --manifest or set data.cache_dir"),
    }
}

fn cmd_preprocess(cfg: &RunConfig, run_dir: &Path) -> Result<(Vec<UtteranceRecord>, Vec<String>)> {
    let lexicon_path = cfg.data.lexicon.as_ref().context("data.lexicon is not set")?;
    let lexicon = Lexicon::load(lexicon_path, &PhoneInventory::default())
        .with_context(|| format!("loading lexicon {}", lexicon_path.display()))?;
    let mut corpora = Vec::new();
    if let Some(root) = &cfg.data.native_corpus {
        corpora.push(CorpusSource {
            root: root.clone(),
            accent: accent_core::data::AccentTag::Native,
        });
    }
    if let Some(root) = &cfg.data.accented_corpus {
        corpora.push(CorpusSource {
            root: root.clone(),
            accent: accent_core::data::AccentTag::Accented,
        });
    }
    if corpora.is_empty() {
        bail!("no corpora configured: set data.native_corpus and/or data.accented_corpus");
    }
    let settings = PreprocessSettings {
        mel: cfg.mel.clone(),
        pretrained_dim: cfg.model.pretrained_dim,
        cache_dir: cfg.data.cache_dir.clone().unwrap_or_else(|| run_dir.join("cache")),
        workers: cfg.data.workers,
    };
    let out = preprocess(&corpora, &lexicon, &settings)?;
    log::info!(
        "preprocessed {} utterances ({} computed, {} up to date); manifest {}",
        out.records.len(),
        out.computed.len(),
        out.reused,
        out.manifest_path.display()
    );
    println!("{}", out.manifest_path.display());
    Ok((out.records, out.speakers))
}

fn cmd_train(cfg: &RunConfig, run_dir: &Path, stage: u8, init: &Option<PathBuf>, skip: bool, manifest: &Option<PathBuf>) -> Result<()> {
    let stage = Stage::try_from(stage).map_err(anyhow::Error::msg)?;
    let records = read_manifest(&manifest_path(cfg, manifest)?)?;
    let splits = Splits::new(cfg, &records)?;
    let split = splits.select(cfg.stage(stage).dataset);
    let init = match init {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let out_dir = run_dir.join(format!("stage{}", stage.number()));
    let out = train_stage(cfg, stage, &split, &speaker_table(&records), init.as_ref(), &out_dir, skip)?;
    if let Some(v) = out.best.meta.val_total {
        log::info!("best validation total {v:.6} at step {}", out.best.meta.step);
    }
    println!("{}", out_dir.join("best.ckpt").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    cfg: &RunConfig,
    run_dir: &Path,
    checkpoint: &Path,
    input: &Path,
    features: &Option<PathBuf>,
    speaker: &str,
    copy_prosody: bool,
    output: &Option<PathBuf>,
    wav: &Option<PathBuf>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if ckpt.model.n_mels != cfg.mel.n_mels {
        bail!("checkpoint decodes {} mel channels, config extracts {}", ckpt.model.n_mels, cfg.mel.n_mels);
    }
    let conv = Converter::new(&ckpt)?;
    let wave = Waveform::load(input).with_context(|| format!("reading {}", input.display()))?;
    let mel = compute_mel(&wave, &cfg.mel)?;
    let source = match conv.feature_kind() {
        SourceKind::Mel => mel.clone(),
        SourceKind::Pretrained => {
            let path = features
                .as_ref()
                .context("this checkpoint expects pretrained features: pass --features")?;
            load_pretrained_features(path, mel.num_frames(), ckpt.model.pretrained_dim, cfg.mel.frame_rate_hz())?
        }
    };
    let id = match speaker.parse::<u32>() {
        Ok(i) => i,
        Err(_) => ckpt
            .meta
            .speakers
            .iter()
            .position(|s| s == speaker)
            .with_context(|| format!("unknown speaker {speaker:?}; known: {}", ckpt.meta.speakers.join(", ")))?
            as u32,
    };
    let prosody = if copy_prosody {
        ProsodySource::CopyFromSource(extract_prosody(&wave, &cfg.mel)?)
    } else {
        ProsodySource::Predicted
    };
    let out = conv.convert(&source, &SpeakerCondition::Id(id), &prosody)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "converted".into());
    let mel_out = output.clone().unwrap_or_else(|| run_dir.join(format!("{stem}.mel.acft")));
    export_mel(&out.frames, &mel_out)?;
    println!("{}", mel_out.display());
    if let Some(w) = wav {
        invoke_vocoder_adapter(&out.frames, cfg.adapters.vocoder_cmd.as_deref(), w)?;
        println!("{}", w.display());
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, run_dir: &Path, checkpoint: &Path, manifest: &Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let records = read_manifest(&manifest_path(cfg, manifest)?)?;
    let splits = Splits::new(cfg, &records)?;
    let report = evaluate_records(cfg, &splits.accented.test, &ckpt, &run_dir.join("eval"))?;
    let path = run_dir.join("eval_report.json");
    report.write(&path)?;
    match report.corpus_wer {
        Some(w) => log::info!("corpus WER {:.2}% ({} failures)", 100.0 * w, report.failures.len()),
        None => log::warn!("no utterance could be scored ({} failures)", report.failures.len()),
    }
    println!("{}", path.display());
    Ok(())
}

fn cmd_pipeline(cfg: &RunConfig, run_dir: &Path, manifest: &Option<PathBuf>) -> Result<()> {
    let (records, speakers) = match manifest {
        Some(p) => {
            let records = read_manifest(p)?;
            let speakers = speaker_table(&records);
            (records, speakers)
        }
        None => cmd_preprocess(cfg, run_dir)?,
    };
    let out = run_pipeline(cfg, &records, &speakers, run_dir)?;
    for s in &out.stages {
        let lineage: Vec<String> = s.lineage.iter().map(|x| x.to_string()).collect();
        log::info!("stage {} done in {} (lineage {})", s.stage, s.dir.display(), lineage.join("->"));
    }
    if let Some(p) = &out.report_path {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_toy_corpus(dir: &Path) -> Result<()> {
    let spec = ToySpec::default();
    let corpus = toy::generate(dir, &spec)?;
    let mut cfg = toy::run_config(&corpus, &spec);
    cfg.data.cache_dir = Some(dir.join("cache"));
    let path = dir.join("toy.toml");
    std::fs::write(&path, cfg.to_toml()?)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::ToyCorpus { dir } = &cli.command {
        return cmd_toy_corpus(dir);
    }
    let (mut cfg, applied) = load_config(&cli)?;
    if let Command::Preprocess {
        native,
        accented,
        lexicon,
    } = &cli.command
    {
        // explicit paths win over the config file
        cfg.data.native_corpus = native.clone().or(cfg.data.native_corpus);
        cfg.data.accented_corpus = accented.clone().or(cfg.data.accented_corpus);
        cfg.data.lexicon = lexicon.clone().or(cfg.data.lexicon);
    }
    let run_dir = open_run_dir(&cli, &cfg, &applied)?;
    match &cli.command {
        Command::Preprocess { .. } => cmd_preprocess(&cfg, &run_dir).map(|_| ()),
        Command::Train {
            stage,
            init,
            allow_skip_stage2,
            manifest,
        } => cmd_train(&cfg, &run_dir, *stage, init, *allow_skip_stage2, manifest),
        Command::Convert {
            checkpoint,
            input,
            features,
            speaker,
            copy_prosody,
            output,
            wav,
        } => cmd_convert(&cfg, &run_dir, checkpoint, input, features, speaker, *copy_prosody, output, wav),
        Command::Evaluate { checkpoint, manifest } => cmd_evaluate(&cfg, &run_dir, checkpoint, manifest),
        Command::Pipeline { manifest, .. } => cmd_pipeline(&cfg, &run_dir, manifest),
        Command::ToyCorpus { .. } => unreachable!(),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
