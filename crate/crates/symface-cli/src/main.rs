//! Batch pipeline driver: corpus synthesis, frontness scoring, splitting,
//! manifest preparation, training, evaluation, threshold sweeps, and run
//! reports.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 data, 4 numeric
//! divergence.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use symface::data::{self, DiskImages, ImageProvider, Manifest, SourceEntry};
use symface::eval::{self, EvalReport};
use symface::geometry::{self, Landmarks, Point2};
use symface::model::{Checkpoint, Embedder};
use symface::raster::RasterImage;
use symface::seeds;
use symface::synth;
use symface::train::{EpochMetrics, Trainer};

use settings::{Overrides, Settings};

#[derive(Parser)]
#[command(
    name = "symface",
    version,
    about = "Face-symmetry training pipeline: score, split, train, evaluate"
)]
struct Cli {
    /// JSON run configuration (flags take precedence over the file).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Top-level seed; all component seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Frontness threshold tau in [0, 1).
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Fraction p of symmetric images split per epoch.
    #[arg(long, global = true)]
    p: Option<f64>,
    /// Margin family: softmax | norm_softmax | cosface | sphereface | arcface.
    #[arg(long, global = true, value_name = "FAMILY")]
    margin_family: Option<String>,
    /// Margin scale s.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Margin m.
    #[arg(long, global = true)]
    margin: Option<f64>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Corpus directory (images plus manifests).
    #[arg(long, global = true, value_name = "DIR")]
    corpus_dir: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and reports.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Measure the frontness discrepancy relative to the inter-ocular
    /// distance instead of raw pixels (affects manifest building).
    #[arg(long, global = true)]
    inter_ocular: bool,
    /// Force sequential execution everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face corpus with known landmarks.
    Synth,
    /// Print the frontness-score distribution of a manifest.
    Score {
        /// Manifest to score (default: <corpus_dir>/manifest.jsonl).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the zero-padded hemi-face canvases of symmetric records.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory (default: <out_dir>/halves).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Build a manifest from a landmarks file, scoring every record.
    Prepare {
        /// Landmarks JSONL: one {id, path, label, lm, detected} per line.
        #[arg(long)]
        landmarks: PathBuf,
        /// Output manifest path (default: <corpus_dir>/manifest.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report symmetric/asymmetric proportions of a manifest.
    Stats {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model: checkpoint plus metrics log.
    Train {
        /// Training manifest (default: <corpus_dir>/train.jsonl, falling
        /// back to manifest.jsonl).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Keep the split augmentation but drop the symmetry loss.
        #[arg(long)]
        no_sym_loss: bool,
    },
    /// Evaluate a checkpoint: verification accuracy, inter-class
    /// variance, hemi-pair distance.
    Evaluate {
        /// Held-out manifest (default: <corpus_dir>/eval.jsonl).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint to load (default: <out_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Report destination (default: <out_dir>/eval_report.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-pair cosine similarities as CSV.
        #[arg(long)]
        pairs_csv: Option<PathBuf>,
        /// Also write raw embeddings as CSV (id, label, then one column
        /// per dimension).
        #[arg(long)]
        embeddings_csv: Option<PathBuf>,
    },
    /// Sweep the frontness threshold (and optionally p), reporting the
    /// symmetric-image proportion per cell; --train adds accuracy.
    Sweep {
        /// Comma-separated tau grid.
        #[arg(long, default_value = "0.05,0.1,0.2,0.3,0.4")]
        taus: String,
        /// Optional comma-separated split-fraction grid.
        #[arg(long)]
        ps: Option<String>,
        /// Train and evaluate a model per grid cell.
        #[arg(long)]
        train: bool,
        /// CSV destination (default: <out_dir>/sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run from its metrics log and eval report.
    Report {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Plot-ready CSV destination (default: <out_dir>/metrics.csv).
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code_for(&e));
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    use symface::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) | Some(E::Shape { .. }) | Some(E::Contract(_)) => 2,
        Some(E::Diverged { .. }) | Some(E::NumericGuard(_)) | Some(E::Domain { .. }) => 4,
        Some(_) => 3,
        None => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides {
        config: cli.config.clone(),
        seed: cli.seed,
        tau: cli.tau,
        split_fraction: cli.p,
        margin_family: cli.margin_family.clone(),
        scale: cli.scale,
        margin: cli.margin,
        epochs: cli.epochs,
        corpus_dir: cli.corpus_dir.clone(),
        out_dir: cli.out_dir.clone(),
        inter_ocular: cli.inter_ocular,
        deterministic: cli.deterministic,
    };
    let settings = settings::resolve(&overrides)?;

    match cli.command {
        Command::Synth => cmd_synth(&settings),
        Command::Score { manifest } => cmd_score(&settings, manifest),
        Command::Split { manifest, dir } => cmd_split(&settings, manifest, dir),
        Command::Prepare { landmarks, out } => cmd_prepare(&settings, &landmarks, out),
        Command::Stats { manifest } => cmd_stats(&settings, manifest),
        Command::Train {
            manifest,
            no_sym_loss,
        } => cmd_train(&settings, manifest, no_sym_loss),
        Command::Evaluate {
            manifest,
            checkpoint,
            out,
            pairs_csv,
            embeddings_csv,
        } => cmd_evaluate(
            &settings,
            manifest,
            checkpoint,
            out,
            pairs_csv,
            embeddings_csv,
        ),
        Command::Sweep {
            taus,
            ps,
            train,
            out,
        } => cmd_sweep(&settings, &taus, ps.as_deref(), train, out),
        Command::Report {
            metrics,
            eval,
            out_csv,
        } => cmd_report(&settings, metrics, eval, out_csv),
    }
}

/// One landmarks-file row: everything a manifest needs except the derived
/// frontness fields.
#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    id: String,
    path: String,
    label: usize,
    lm: [[f64; 2]; 3],
    detected: bool,
}

impl LandmarkRow {
    fn to_entry(&self) -> SourceEntry {
        let landmarks = if self.detected {
            Landmarks::detected(
                Point2::new(self.lm[0][0], self.lm[0][1]),
                Point2::new(self.lm[1][0], self.lm[1][1]),
                Point2::new(self.lm[2][0], self.lm[2][1]),
            )
        } else {
            Landmarks::undetected()
        };
        SourceEntry {
            id: self.id.clone(),
            path: self.path.clone(),
            label: self.label,
            landmarks,
        }
    }

    fn from_synth(s: &synth::SynthImage) -> Self {
        LandmarkRow {
            id: s.id.clone(),
            path: s.rel_path(),
            label: s.label,
            lm: [
                [s.landmarks.left_eye().x, s.landmarks.left_eye().y],
                [s.landmarks.right_eye().x, s.landmarks.right_eye().y],
                [s.landmarks.nose().x, s.landmarks.nose().y],
            ],
            detected: s.landmarks.is_detected(),
        }
    }
}

fn default_manifest_path(settings: &Settings, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| settings.corpus_dir.join(name))
}

fn train_manifest_path(settings: &Settings, explicit: Option<PathBuf>) -> PathBuf {
    if let Some(path) = explicit {
        return path;
    }
    let split = settings.corpus_dir.join("train.jsonl");
    if split.exists() {
        split
    } else {
        settings.corpus_dir.join("manifest.jsonl")
    }
}

fn cmd_synth(settings: &Settings) -> anyhow::Result<()> {
    let dir = &settings.corpus_dir;
    let threads = settings::worker_threads(settings.deterministic);
    let corpus = synth::generate_corpus_with_threads(&settings.synth, threads)?;
    synth::write_images(&corpus, dir)?;

    // Landmarks file, one row per image.
    let mut landmarks_out = Vec::new();
    for s in &corpus {
        serde_json::to_writer(&mut landmarks_out, &LandmarkRow::from_synth(s))?;
        landmarks_out.push(b'\n');
    }
    fs::write(dir.join("landmarks.jsonl"), landmarks_out)?;

    let tau = settings.train.tau;
    let (manifest, skipped) = Manifest::build_with(
        synth::manifest_entries(&corpus),
        tau,
        settings.frontness_mode,
        |_| Ok(()),
    )?;
    anyhow::ensure!(skipped.is_empty(), "in-memory corpus cannot skip records");
    manifest.save(&dir.join("manifest.jsonl"))?;

    // Optional held-out split: the last images of each identity.
    let holdout = settings.eval.holdout_per_identity;
    if holdout > 0 && holdout < settings.synth.images_per_identity {
        let train_count = settings.synth.images_per_identity - holdout;
        let is_train = |i: usize| i % settings.synth.images_per_identity < train_count;
        let mut train_entries = Vec::new();
        let mut eval_entries = Vec::new();
        for (i, entry) in synth::manifest_entries(&corpus).into_iter().enumerate() {
            if is_train(i) {
                train_entries.push(entry);
            } else {
                eval_entries.push(entry);
            }
        }
        let (train_manifest, _) =
            Manifest::build_with(train_entries, tau, settings.frontness_mode, |_| Ok(()))?;
        let (eval_manifest, _) =
            Manifest::build_with(eval_entries, tau, settings.frontness_mode, |_| Ok(()))?;
        train_manifest.save(&dir.join("train.jsonl"))?;
        eval_manifest.save(&dir.join("eval.jsonl"))?;
        println!(
            "split: {} training / {} held-out images",
            train_manifest.len(),
            eval_manifest.len()
        );
    }

    let n_sym = manifest.symmetric_count();
    println!(
        "corpus: {} identities x {} images ({}x{}) -> {}",
        settings.synth.num_identities,
        settings.synth.images_per_identity,
        settings.synth.width,
        settings.synth.height,
        dir.display()
    );
    println!(
        "records: {} total, {} symmetric at tau {} ({:.1}%)",
        manifest.len(),
        n_sym,
        tau,
        100.0 * n_sym as f64 / manifest.len().max(1) as f64
    );
    Ok(())
}

fn cmd_score(settings: &Settings, manifest: Option<PathBuf>) -> anyhow::Result<()> {
    let path = default_manifest_path(settings, manifest, "manifest.jsonl");
    let manifest = Manifest::load(&path, settings.train.tau)?;
    let records = manifest.records();
    anyhow::ensure!(
        !records.is_empty(),
        symface::Error::Data("empty manifest".into())
    );

    let exact_one = records.iter().filter(|r| r.rho == 1.0).count();
    let zero = records.iter().filter(|r| r.rho == 0.0).count();
    let bins = [
        ("rho = 1.0 (perfectly frontal)", exact_one),
        (
            "0.5 <= rho < 1.0",
            records
                .iter()
                .filter(|r| (0.5..1.0).contains(&r.rho))
                .count(),
        ),
        (
            "0.2 <= rho < 0.5",
            records
                .iter()
                .filter(|r| (0.2..0.5).contains(&r.rho))
                .count(),
        ),
        (
            "0.1 <= rho < 0.2",
            records
                .iter()
                .filter(|r| (0.1..0.2).contains(&r.rho))
                .count(),
        ),
        (
            "0.0 <  rho < 0.1",
            records
                .iter()
                .filter(|r| r.rho > 0.0 && r.rho < 0.1)
                .count(),
        ),
        ("rho = 0.0 (undetected)", zero),
    ];
    println!(
        "frontness scores over {} records ({})",
        records.len(),
        path.display()
    );
    for (label, count) in bins {
        let bar = "#".repeat((60 * count / records.len().max(1)).min(60));
        println!("  {label:<30} {count:>6}  {bar}");
    }
    let n_sym = manifest.symmetric_count();
    println!(
        "symmetric at tau {}: {} ({:.1}%)",
        manifest.tau(),
        n_sym,
        100.0 * n_sym as f64 / records.len() as f64
    );
    Ok(())
}

fn cmd_split(
    settings: &Settings,
    manifest: Option<PathBuf>,
    dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let path = default_manifest_path(settings, manifest, "manifest.jsonl");
    let manifest = Manifest::load(&path, settings.train.tau)?;
    let out = dir.unwrap_or_else(|| settings.out_dir.join("halves"));
    fs::create_dir_all(&out)?;
    let provider = DiskImages::new(&settings.corpus_dir);

    let mut written = 0usize;
    for record in manifest.records().iter().filter(|r| r.symmetric) {
        let image = provider.image(record)?;
        let n_x = data::split_column(record, image.width())?;
        let pair = geometry::split_face(&image, n_x)?;
        pair.left()
            .save(&out.join(format!("{}_left.pgm", record.id)))?;
        pair.right()
            .save(&out.join(format!("{}_right.pgm", record.id)))?;
        written += 1;
    }
    println!(
        "wrote {written} hemi-face pairs (of {} symmetric records) to {}",
        manifest.symmetric_count(),
        out.display()
    );
    Ok(())
}

fn cmd_prepare(settings: &Settings, landmarks: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let text = fs::read_to_string(landmarks)
        .with_context(|| format!("cannot read landmarks {}", landmarks.display()))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: LandmarkRow = serde_json::from_str(line).map_err(|e| {
            symface::Error::Data(format!(
                "{}:{}: bad landmark row: {e}",
                landmarks.display(),
                lineno + 1
            ))
        })?;
        entries.push(row.to_entry());
    }

    let corpus_dir = settings.corpus_dir.clone();
    let (manifest, skipped) = Manifest::build_with(
        entries,
        settings.train.tau,
        settings.frontness_mode,
        |entry| RasterImage::load(&corpus_dir.join(&entry.path)).map(|_| ()),
    )?;
    for skip in &skipped {
        eprintln!("skipped {}: {}", skip.id, skip.reason);
    }

    let out = default_manifest_path(settings, out, "manifest.jsonl");
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    manifest.save(&out)?;
    print_manifest_counts(&manifest);
    println!("skipped: {}", skipped.len());
    println!("manifest: {}", out.display());
    Ok(())
}

fn print_manifest_counts(manifest: &Manifest) {
    let n = manifest.len();
    let n_sym = manifest.symmetric_count();
    println!("records: {n}");
    println!(
        "symmetric (rho > {}): {} ({:.1}%)",
        manifest.tau(),
        n_sym,
        100.0 * n_sym as f64 / n.max(1) as f64
    );
    println!(
        "cross-posed or non-frontal: {} ({:.1}%)",
        n - n_sym,
        100.0 * (n - n_sym) as f64 / n.max(1) as f64
    );
}

fn cmd_stats(settings: &Settings, manifest: Option<PathBuf>) -> anyhow::Result<()> {
    let path = default_manifest_path(settings, manifest, "manifest.jsonl");
    let manifest = Manifest::load(&path, settings.train.tau)?;
    print_manifest_counts(&manifest);
    Ok(())
}

fn cmd_train(
    settings: &Settings,
    manifest: Option<PathBuf>,
    no_sym_loss: bool,
) -> anyhow::Result<()> {
    let path = train_manifest_path(settings, manifest);
    let manifest = Manifest::load(&path, settings.train.tau)?;
    let provider = DiskImages::new(&settings.corpus_dir);
    check_input_dims(settings, &manifest, &provider)?;

    fs::create_dir_all(&settings.out_dir)?;
    let metrics_path = settings.out_dir.join("metrics.jsonl");
    let checkpoint_path = settings.out_dir.join("model.ckpt");

    let mut tcfg = settings.train.clone();
    if no_sym_loss {
        tcfg.sym_loss = false;
    }
    let outcome = Trainer::new(&manifest, &provider, settings.embedder.clone(), tcfg)
        .metrics_path(&metrics_path)
        .checkpoint_path(&checkpoint_path)
        .run()?;

    for m in &outcome.metrics {
        println!(
            "epoch {:>3}  lf {:.6}  lrho {:.6}  ltotal {:.6}  pair_dist {:.6}  lr {}",
            m.epoch, m.lf, m.lrho, m.ltotal, m.pair_dist_mean, m.lr
        );
    }
    if outcome.margin_clamp_events > 0 {
        eprintln!(
            "note: additive-angle margin clamped {} target logits past pi",
            outcome.margin_clamp_events
        );
    }
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

fn check_input_dims(
    settings: &Settings,
    manifest: &Manifest,
    provider: &impl ImageProvider,
) -> anyhow::Result<()> {
    if let Some(record) = manifest.records().first() {
        let img = provider.image(record)?;
        let e = &settings.embedder;
        if img.width() != e.input_width
            || img.height() != e.input_height
            || img.channels() != e.input_channels
        {
            bail!(symface::Error::Config(format!(
                "corpus images are {}x{}x{} but the embedder expects {}x{}x{}",
                img.width(),
                img.height(),
                img.channels(),
                e.input_width,
                e.input_height,
                e.input_channels,
            )));
        }
    }
    Ok(())
}

fn normalized_tensor(image: &RasterImage) -> Vec<f64> {
    image
        .data()
        .iter()
        .map(|&v| data::normalize_pixel(v as f64))
        .collect()
}

fn embed_manifest(
    embedder: &Embedder,
    manifest: &Manifest,
    provider: &impl ImageProvider,
) -> anyhow::Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut tensors = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for record in manifest.records() {
        let image = provider.image(record)?;
        tensors.push(normalized_tensor(&image));
        labels.push(record.label);
    }
    Ok((embedder.embed_images(&tensors)?, labels))
}

fn hemi_pairs(
    manifest: &Manifest,
    provider: &impl ImageProvider,
) -> anyhow::Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut halves = Vec::new();
    for record in manifest.records().iter().filter(|r| r.symmetric) {
        let image = provider.image(record)?;
        let n_x = data::split_column(record, image.width())?;
        let pair = geometry::split_face(&image, n_x)?;
        halves.push((
            normalized_tensor(pair.left()),
            normalized_tensor(pair.right()),
        ));
    }
    Ok(halves)
}

fn evaluate_checkpoint(
    settings: &Settings,
    manifest: &Manifest,
    provider: &impl ImageProvider,
    checkpoint: &Path,
) -> anyhow::Result<(EvalReport, Vec<eval::VerificationPair>, Vec<f64>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (embedder, _) = ckpt.restore_model()?;
    let (embeddings, labels) = embed_manifest(&embedder, manifest, provider)?;

    let pairs = eval::make_verification_pairs(
        &labels,
        settings.eval.folds,
        settings.eval.pairs_per_fold,
        seeds::derive(settings.train.seed, "eval-pairs", 0),
    )?;
    let outcome = eval::verify(&embeddings, &pairs, settings.eval.folds)?;
    let icv = eval::inter_class_variance(&embeddings, &labels)?;
    let halves = hemi_pairs(manifest, provider)?;
    let mean_sym_pair_distance = eval::sym_pair_distance(&embedder, &halves)?;
    let sims = eval::pair_similarities(&embeddings, &pairs)?;

    Ok((
        EvalReport {
            accuracy: outcome.accuracy,
            best_threshold: outcome.best_threshold,
            inter_class_variance: icv,
            mean_sym_pair_distance,
            fold_accuracies: outcome.fold_accuracies,
        },
        pairs,
        sims,
    ))
}

fn cmd_evaluate(
    settings: &Settings,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    pairs_csv: Option<PathBuf>,
    embeddings_csv: Option<PathBuf>,
) -> anyhow::Result<()> {
    let manifest_path = default_manifest_path(settings, manifest, "eval.jsonl");
    let manifest = Manifest::load(&manifest_path, settings.train.tau)?;
    let provider = DiskImages::new(&settings.corpus_dir);
    let checkpoint = checkpoint.unwrap_or_else(|| settings.out_dir.join("model.ckpt"));

    if let Some(csv_path) = &embeddings_csv {
        let ckpt = Checkpoint::load(&checkpoint)?;
        let (embedder, _) = ckpt.restore_model()?;
        let (embeddings, labels) = embed_manifest(&embedder, &manifest, &provider)?;
        let dim = embeddings.first().map(|e| e.len()).unwrap_or(0);
        let mut csv = String::from("id,label");
        for j in 0..dim {
            csv.push_str(&format!(",e{j}"));
        }
        csv.push('\n');
        for ((record, label), e) in manifest.records().iter().zip(&labels).zip(&embeddings) {
            csv.push_str(&record.id);
            csv.push_str(&format!(",{label}"));
            for v in e {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        fs::write(csv_path, csv)?;
        println!("embeddings: {}", csv_path.display());
    }

    let (report, pairs, sims) = evaluate_checkpoint(settings, &manifest, &provider, &checkpoint)?;

    let out = out.unwrap_or_else(|| settings.out_dir.join("eval_report.json"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, serde_json::to_vec_pretty(&report)?)?;

    if let Some(csv_path) = pairs_csv {
        let mut csv = String::from("pair,a,b,same_identity,cosine\n");
        for (i, (p, s)) in pairs.iter().zip(&sims).enumerate() {
            csv.push_str(&format!("{i},{},{},{},{s}\n", p.a, p.b, p.same_identity));
        }
        fs::write(&csv_path, csv)?;
        println!("pair similarities: {}", csv_path.display());
    }

    println!("verification accuracy: {:.4}", report.accuracy);
    println!("best threshold: {:.4}", report.best_threshold);
    println!("inter-class variance: {:.6}", report.inter_class_variance);
    println!(
        "mean hemi-pair distance: {:.6}",
        report.mean_sym_pair_distance
    );
    println!("report: {}", out.display());
    Ok(())
}

fn parse_grid(text: &str, name: &str) -> anyhow::Result<Vec<f64>> {
    let values: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let values =
        values.map_err(|e| symface::Error::Config(format!("bad {name} grid '{text}': {e}")))?;
    anyhow::ensure!(
        !values.is_empty(),
        symface::Error::Config(format!("{name} grid is empty"))
    );
    Ok(values)
}

fn cmd_sweep(
    settings: &Settings,
    taus: &str,
    ps: Option<&str>,
    train: bool,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let tau_grid = parse_grid(taus, "tau")?;
    for &tau in &tau_grid {
        anyhow::ensure!(
            (0.0..1.0).contains(&tau),
            symface::Error::Config(format!("tau {tau} outside [0, 1)"))
        );
    }
    let p_grid = match ps {
        Some(text) => parse_grid(text, "p")?,
        None => vec![settings.train.split_fraction],
    };

    let full = Manifest::load(
        &settings.corpus_dir.join("manifest.jsonl"),
        settings.train.tau,
    )?;
    let provider = DiskImages::new(&settings.corpus_dir);

    fs::create_dir_all(&settings.out_dir)?;
    let out = out.unwrap_or_else(|| settings.out_dir.join("sweep.csv"));
    let mut csv = String::new();
    if train {
        csv.push_str("tau,p,n_total,n_sym,sym_fraction,cross_posed_pct,accuracy,inter_class_variance,mean_sym_pair_distance\n");
    } else {
        csv.push_str("tau,p,n_total,n_sym,sym_fraction,cross_posed_pct\n");
    }

    println!(
        "{:>6} {:>5} {:>8} {:>8} {:>12} {:>15}{}",
        "tau",
        "p",
        "total",
        "sym",
        "sym_frac",
        "cross_posed_%",
        if train { "  accuracy" } else { "" }
    );
    for &tau in &tau_grid {
        let at_tau = full.with_tau(tau)?;
        let n = at_tau.len();
        let n_sym = at_tau.symmetric_count();
        let sym_fraction = n_sym as f64 / n.max(1) as f64;
        let cross_posed = 100.0 * (1.0 - sym_fraction);
        for &p in &p_grid {
            if train {
                let train_path = train_manifest_path(settings, None);
                let train_manifest =
                    Manifest::load(&train_path, settings.train.tau)?.with_tau(tau)?;
                let eval_manifest =
                    Manifest::load(&settings.corpus_dir.join("eval.jsonl"), settings.train.tau)?
                        .with_tau(tau)?;

                let mut tcfg = settings.train.clone();
                tcfg.tau = tau;
                tcfg.split_fraction = p;
                let cell_dir = settings.out_dir.join(format!("sweep_tau{tau}_p{p}"));
                fs::create_dir_all(&cell_dir)?;
                let ckpt_path = cell_dir.join("model.ckpt");
                Trainer::new(&train_manifest, &provider, settings.embedder.clone(), tcfg)
                    .metrics_path(cell_dir.join("metrics.jsonl"))
                    .checkpoint_path(&ckpt_path)
                    .run()?;

                let mut cell_settings = settings.clone();
                cell_settings.train.tau = tau;
                let (report, _, _) =
                    evaluate_checkpoint(&cell_settings, &eval_manifest, &provider, &ckpt_path)?;
                println!(
                    "{tau:>6} {p:>5} {n:>8} {n_sym:>8} {sym_fraction:>12.4} {cross_posed:>15.1}  {:.4}",
                    report.accuracy
                );
                csv.push_str(&format!(
                    "{tau},{p},{n},{n_sym},{sym_fraction},{cross_posed},{},{},{}\n",
                    report.accuracy, report.inter_class_variance, report.mean_sym_pair_distance
                ));
            } else {
                println!(
                    "{tau:>6} {p:>5} {n:>8} {n_sym:>8} {sym_fraction:>12.4} {cross_posed:>15.1}"
                );
                csv.push_str(&format!(
                    "{tau},{p},{n},{n_sym},{sym_fraction},{cross_posed}\n"
                ));
            }
        }
    }
    fs::write(&out, csv)?;
    println!("sweep table: {}", out.display());
    Ok(())
}

fn cmd_report(
    settings: &Settings,
    metrics: Option<PathBuf>,
    eval_path: Option<PathBuf>,
    out_csv: Option<PathBuf>,
) -> anyhow::Result<()> {
    let metrics_path = metrics.unwrap_or_else(|| settings.out_dir.join("metrics.jsonl"));
    let text = fs::read_to_string(&metrics_path)
        .with_context(|| format!("cannot read metrics {}", metrics_path.display()))?;
    let mut rows: Vec<EpochMetrics> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        rows.push(serde_json::from_str(line).map_err(symface::Error::from)?);
    }
    anyhow::ensure!(
        !rows.is_empty(),
        symface::Error::Data("metrics log is empty".into())
    );

    println!(
        "{:>5} {:>12} {:>12} {:>12} {:>12} {:>9}",
        "epoch", "lf", "lrho", "ltotal", "pair_dist", "lr"
    );
    for m in &rows {
        println!(
            "{:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>9}",
            m.epoch, m.lf, m.lrho, m.ltotal, m.pair_dist_mean, m.lr
        );
    }
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    println!(
        "classification loss {:.6} -> {:.6}; symmetry loss {:.6} -> {:.6}",
        first.lf, last.lf, first.lrho, last.lrho
    );

    let eval_path = eval_path.unwrap_or_else(|| settings.out_dir.join("eval_report.json"));
    if eval_path.exists() {
        let report: EvalReport =
            serde_json::from_str(&fs::read_to_string(&eval_path)?).map_err(symface::Error::from)?;
        println!(
            "evaluation: accuracy {:.4}, inter-class variance {:.6}, hemi-pair distance {:.6}",
            report.accuracy, report.inter_class_variance, report.mean_sym_pair_distance
        );
    }

    let csv_path = out_csv.unwrap_or_else(|| settings.out_dir.join("metrics.csv"));
    let mut csv = String::from("epoch,lf,lrho,ltotal,pair_dist_mean,lr\n");
    for m in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.lf, m.lrho, m.ltotal, m.pair_dist_mean, m.lr
        ));
    }
    fs::write(&csv_path, csv)?;
    println!("metrics csv: {}", csv_path.display());
    Ok(())
}
