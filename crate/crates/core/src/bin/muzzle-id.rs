use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use muzzle_id::compression::{
    compress_corpus, rate_distortion_report, ChromaSubsampling, CompressionConfig, Engine, QualityLevel,
};
use muzzle_id::dataset::{load_manifest, save_manifest, scan_corpus_detailed, stratified_split, DatasetManifest, SplitConfig};
use muzzle_id::experiment::{
    cell_dir, emit_results_table, quality_dir, run_grid, ExperimentConfig, GridResult, Identifier,
};
use muzzle_id::model::{build_model, load_checkpoint, BackboneName, BuildOptions};
use muzzle_id::synthetic::{write_corpus, SyntheticSpec};
use muzzle_id::training::{evaluate_accuracy, timing_report, train};
use muzzle_id::{Error, Result};

#[derive(Parser)]
#[command(name = "muzzle-id", version, about = "Cattle muzzle-print identification toolkit")]
struct Cli {
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Standard,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class-per-directory corpus, split it, and write a manifest.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-encode a corpus at one or more quality levels.
    Compress {
        /// Repeat for a rate-distortion sweep; each level goes to <out>/qNNN.
        #[arg(long = "quality", required = true)]
        qualities: Vec<u8>,
        /// Corpus directory or manifest file.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        engine: EngineArg,
        /// 4:2:0 chroma (reference engine only).
        #[arg(long)]
        subsample_chroma: bool,
    },
    /// Train one backbone on the corpus named in a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        freeze_backbone: bool,
    },
    /// Run the full backbone x quality grid from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint over a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        side: Side,
    },
    /// Rank the most likely animals for one image.
    Identify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        json: bool,
    },
    /// Print result tables for a finished sweep.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        csv: bool,
    },
    /// Write a procedurally generated stand-in corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn quality(q: u8) -> Result<QualityLevel> {
    QualityLevel::new(q)
}

fn read_corpus(input: &Path) -> Result<DatasetManifest> {
    if input.is_file() {
        return load_manifest(input);
    }
    let scan = scan_corpus_detailed(input)?;
    for (path, reason) in &scan.skipped {
        log::warn!("skipped {}: {reason}", path.display());
    }
    Ok(scan.manifest)
}

fn prepare(corpus: &Path, out: &Path, train_fraction: f64, seed: u64) -> Result<()> {
    let cfg = SplitConfig { train_fraction, seed };
    cfg.validate()?;
    let mut manifest = read_corpus(corpus)?;
    let split = stratified_split(&manifest, &cfg)?;
    manifest.attach_split(&split, &cfg)?;
    save_manifest(&manifest, out)?;
    println!(
        "{} classes, {} images: {} train / {} test (split {})",
        manifest.classes().len(),
        manifest.records().len(),
        split.train.len(),
        split.test.len(),
        &split.fingerprint()[..12]
    );
    Ok(())
}

fn compress(qualities: &[u8], input: &Path, out: &Path, engine: EngineArg, quarter: bool) -> Result<()> {
    let manifest = read_corpus(input)?;
    let mut reports = Vec::new();
    for &q in qualities {
        let cfg = CompressionConfig {
            quality: quality(q)?,
            engine: match engine {
                EngineArg::Standard => Engine::Standard,
                EngineArg::Reference => Engine::Reference,
            },
            optimize: false,
            subsampling: if quarter { ChromaSubsampling::Quarter } else { ChromaSubsampling::None },
        };
        let dest = if qualities.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("q{:03}", q))
        };
        reports.push(compress_corpus(&manifest, &cfg, &dest)?);
    }
    print!("{}", rate_distortion_report(&reports)?.render());
    Ok(())
}

fn train_one(config: &Path, backbone: Option<&str>, run_dir: Option<PathBuf>, freeze: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if freeze {
        cfg.training.freeze_backbone = true;
    }
    let name: BackboneName = match backbone {
        Some(b) => b.parse()?,
        None => cfg.model.backbone,
    };
    let q = cfg.compression.quality;
    let run_dir = run_dir.unwrap_or_else(|| cell_dir(&cfg.grid.run_dir, name, q));
    let original = read_corpus(&cfg.corpus.root)?;
    let manifest = if q == QualityLevel::MAX {
        original
    } else {
        compress_corpus(&original, &cfg.compression, &quality_dir(&run_dir, q))?;
        read_corpus(&quality_dir(&run_dir, q))?
    };
    let split = stratified_split(&manifest, &cfg.split)?;
    let opts = BuildOptions {
        seed: cfg.training.seed,
        pretrained_weights: cfg.model.weights_path(name),
    };
    let mut model = build_model(
        &cfg.model.backbone_spec(name),
        &cfg.model.head_spec(manifest.classes().len()),
        &opts,
    )?;
    let result = train(&mut model, &split, manifest.classes(), &cfg.augmentation, &cfg.training, Some(&run_dir))?;
    println!(
        "first-epoch accuracy {:.4}, final accuracy {:.4} (epoch {})",
        result.first_epoch_accuracy, result.final_accuracy, result.best_epoch
    );
    println!("{}", timing_report(&result));
    if let Some(p) = &result.best_checkpoint_path {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn print_tables(gr: &GridResult, backbone: Option<&str>, csv: bool) -> Result<()> {
    let backbones = match backbone {
        Some(b) => vec![b.parse()?],
        None => gr.backbones(),
    };
    for b in backbones {
        let table = emit_results_table(gr, b)?;
        if csv {
            print!("{}", table.csv);
        } else {
            println!("{}", table.text);
        }
    }
    Ok(())
}

/// Returns true when every cell succeeded.
fn sweep(config: &Path) -> Result<bool> {
    let grid = ExperimentConfig::load(config)?.grid()?;
    let result = run_grid(&grid)?;
    print_tables(&result, None, false)?;
    println!("split {}; machine: {}", &result.split_fingerprint[..12], result.machine);
    let failures = result.failures();
    for c in &failures {
        eprintln!("cell {} q{} failed: {}", c.backbone, c.quality, c.error.as_deref().unwrap_or(""));
    }
    Ok(failures.is_empty())
}

fn evaluate(checkpoint: &Path, manifest: &Path, side: Side) -> Result<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let records = match (side, manifest.stored_split()) {
        (Side::All, _) => manifest.records().to_vec(),
        (Side::Train, Some(s)) => s.train,
        (Side::Test, Some(s)) => s.test,
        (_, None) => return Err(Error::Argument("manifest has no stored split; use --side all".into())),
    };
    let aug = ck.meta.augmentation.clone().unwrap_or_default();
    let acc = evaluate_accuracy(&mut ck.model, &records, &ck.meta.classes, &aug)?;
    println!("top-1 accuracy {acc:.4} over {} images", records.len());
    Ok(())
}

fn identify(checkpoint: &Path, image: &Path, k: usize, json: bool) -> Result<()> {
    let id = Identifier::open(checkpoint)?.identify(image, k)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&id).expect("identification serializes"));
        return Ok(());
    }
    for (rank, (class, p)) in id.top_k.iter().enumerate() {
        println!("{:>3}. {class:<24} {p:.4}", rank + 1);
    }
    println!("latency {:.1} ms", id.latency_seconds * 1e3);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Prepare {
            corpus,
            out,
            train_fraction,
            seed,
        } => prepare(&corpus, &out, train_fraction, seed)?,
        Command::Compress {
            qualities,
            input,
            out,
            engine,
            subsample_chroma,
        } => compress(&qualities, &input, &out, engine, subsample_chroma)?,
        Command::Train {
            config,
            backbone,
            run_dir,
            freeze_backbone,
        } => train_one(&config, backbone.as_deref(), run_dir, freeze_backbone)?,
        Command::Sweep { config } => {
            if !sweep(&config)? {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            side,
        } => evaluate(&checkpoint, &manifest, side)?,
        Command::Identify {
            checkpoint,
            image,
            top_k,
            json,
        } => identify(&checkpoint, &image, top_k, json)?,
        Command::Report { run_dir, backbone, csv } => {
            let gr = GridResult::load(&run_dir.join("grid_result.json"))?;
            print_tables(&gr, backbone.as_deref(), csv)?;
        }
        Command::Synth {
            out,
            classes,
            per_class,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes,
                images_per_class: per_class,
                seed,
                ..Default::default()
            };
            write_corpus(&out, &spec)?;
            println!("wrote {classes} classes x {per_class} images to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
