//! Cross-module integration checks: sampling statistics, epoch loss
//! accounting, the verification protocol against a brute-force oracle,
//! and file-level reproducibility of training runs.

use rand::Rng;
use symface::data::{self, Manifest};
use symface::eval;
use symface::loss::{MarginConfig, MarginFamily};
use symface::model::{Checkpoint, EmbedderConfig};
use symface::seeds;
use symface::synth;
use symface::train::{TrainConfig, Trainer};

fn corpus_setup(
    seed: u64,
    ids: usize,
    per_id: usize,
) -> (Manifest, data::MemoryImages, EmbedderConfig) {
    let cfg = synth::CorpusConfig {
        num_identities: ids,
        images_per_identity: per_id,
        width: 16,
        height: 16,
        frontal_fraction: 0.6,
        max_pose_offset: 3,
        asymmetry_max: 0.4,
        noise_sigma: 4.0,
        identity_variation: 1.0,
        seed,
    };
    let corpus = synth::generate_corpus(&cfg).unwrap();
    let provider = synth::memory_provider(&corpus);
    let (manifest, _) = Manifest::build(synth::manifest_entries(&corpus), 0.2, |_| Ok(())).unwrap();
    let ecfg = EmbedderConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 1,
        hidden: vec![12, 8],
        embedding_dim: 4,
        embed_norm: false,
        init_seed: 0,
    };
    (manifest, provider, ecfg)
}

fn small_train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size_slots: 6,
        lr_initial: 0.02,
        lr_steps: vec![],
        margin: MarginConfig {
            family: MarginFamily::ArcFace,
            scale: 16.0,
            margin: 0.2,
        },
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn split_membership_frequency_matches_the_fraction() {
    // Exact-count sampling still leaves membership uniform: over many
    // seeds, each symmetric record is chosen at rate p.
    let (manifest, _, _) = corpus_setup(5, 4, 30);
    let n_sym = manifest.symmetric_count();
    assert!(n_sym >= 20, "corpus too asymmetric for this test: {n_sym}");
    let p = 0.3;
    let trials = 1000usize;

    let sym_ids: Vec<&str> = manifest
        .records()
        .iter()
        .filter(|r| r.symmetric)
        .map(|r| r.id.as_str())
        .collect();
    let mut counts = vec![0usize; sym_ids.len()];
    for seed in 0..trials as u64 {
        let plan = data::plan_epoch(&manifest, p, seed).unwrap();
        assert_eq!(plan.n_split, (p * n_sym as f64).round() as usize);
        for (k, id) in sym_ids.iter().enumerate() {
            if plan.split_flags[*id] {
                counts[k] += 1;
            }
        }
    }

    // Binomial(1000, ~p) five-sigma band, Bonferroni-safe for ~30 records.
    let rate = plan_rate(n_sym, p);
    let sigma = (trials as f64 * rate * (1.0 - rate)).sqrt();
    for (k, &count) in counts.iter().enumerate() {
        let expected = trials as f64 * rate;
        assert!(
            (count as f64 - expected).abs() <= 5.0 * sigma,
            "record {k} selected {count} times, expected {expected:.1} +- {:.1}",
            5.0 * sigma
        );
    }
}

fn plan_rate(n_sym: usize, p: f64) -> f64 {
    // Exact-count sampling picks round(p * n) of n, so the per-record
    // inclusion probability is round(p * n) / n.
    (p * n_sym as f64).round() / n_sym as f64
}

#[test]
fn epoch_loss_matches_monolithic_recomputation() {
    // Train one epoch with a learning rate too small to move any weight,
    // then recompute the epoch's classification loss in one pass over the
    // same image stream: sum of per-term CE / N'.
    let (manifest, provider, ecfg) = corpus_setup(11, 3, 8);
    let mut tcfg = small_train_config(21, 1);
    tcfg.lr_initial = 1e-300; // representable, but adds nothing to weights
    tcfg.batch_size_slots = 4;
    tcfg.flip_prob = 0.5;

    let outcome = Trainer::new(&manifest, &provider, ecfg.clone(), tcfg.clone())
        .run()
        .unwrap();
    let reported_lf = outcome.metrics[0].lf;

    // Rebuild the identical epoch-0 stream.
    let plan = data::plan_epoch(
        &manifest,
        tcfg.split_fraction,
        seeds::derive(tcfg.seed, "plan", 0),
    )
    .unwrap();
    let batches = data::assemble_batches(
        &plan,
        &manifest,
        tcfg.batch_size_slots,
        seeds::derive(tcfg.seed, "shuffle", 0),
    )
    .unwrap();
    let mut augment_rng = seeds::rng(tcfg.seed, "augment", 0);

    // The weights never moved, so the final state embeds with the initial
    // parameters.
    let embedder = outcome.state.embedder.clone();
    let head = outcome.state.head.clone();

    let mut term_sum = 0.0;
    let mut term_count = 0usize;
    for batch in &batches {
        let mut tensors: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for &planned in batch.iter() {
            let raw = data::load_item(&manifest, &provider, planned).unwrap();
            match data::augment(&raw, tcfg.flip_prob, &mut augment_rng) {
                data::BatchItem::Full { tensor, label, .. } => {
                    tensors.push(tensor);
                    labels.push(label);
                }
                data::BatchItem::HalfPair {
                    left, right, label, ..
                } => {
                    tensors.push(left);
                    labels.push(label);
                    tensors.push(right);
                    labels.push(label);
                }
            }
        }
        let embeddings = embedder.embed_images(&tensors).unwrap();
        for (e, &y) in embeddings.iter().zip(&labels) {
            term_sum += scalar_arcface_ce(e, &head.weight, y, 16.0, 0.2);
            term_count += 1;
        }
    }
    assert_eq!(term_count, plan.n_effective);
    let monolithic = term_sum / plan.n_effective as f64;
    assert!(
        (reported_lf - monolithic).abs() <= 1e-9 * monolithic.max(1.0),
        "reported {reported_lf} vs monolithic {monolithic}"
    );
}

/// Scalar re-derivation of the additive-angular-margin cross entropy for
/// one embedding, independent of the graph code.
fn scalar_arcface_ce(
    embedding: &[f64],
    head_weight: &symface::autodiff::Tensor,
    label: usize,
    scale: f64,
    margin: f64,
) -> f64 {
    let d = embedding.len();
    let classes = head_weight.shape()[0];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let en = norm(embedding);
    let mut logits = Vec::with_capacity(classes);
    for j in 0..classes {
        let w = &head_weight.data()[j * d..(j + 1) * d];
        let cos = embedding.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (en * norm(w));
        let adjusted = if j == label {
            cos * margin.cos() - (1.0 - cos * cos).max(0.0).sqrt() * margin.sin()
        } else {
            cos
        };
        logits.push(scale * adjusted);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[test]
fn kfold_accuracy_tracks_the_exhaustive_sweep_oracle() {
    // 3000 pairs over noisy clustered embeddings. The oracle fits a single
    // threshold on everything by brute force; cross-validated accuracy has
    // to land within protocol noise of it.
    let mut rng = seeds::rng(31, "kfold-oracle", 0);
    let classes = 20usize;
    let per_class = 15usize;
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        let angle = c as f64 * std::f64::consts::TAU / classes as f64;
        for _ in 0..per_class {
            let r = 1.0 + rng.random_range(-0.1..0.1);
            let jitter = rng.random_range(-0.35..0.35);
            embeddings.push(vec![
                r * (angle + jitter).cos(),
                r * (angle + jitter).sin(),
                rng.random_range(-0.2..0.2),
            ]);
            labels.push(c);
        }
    }
    let pairs = eval::make_verification_pairs(&labels, 10, 300, 77).unwrap();
    assert_eq!(pairs.len(), 3000);
    let outcome = eval::verify(&embeddings, &pairs, 10).unwrap();

    // Brute-force oracle: try every observed similarity as the threshold.
    let sims = eval::pair_similarities(&embeddings, &pairs).unwrap();
    let mut best = 0usize;
    for candidate in &sims {
        let correct = sims
            .iter()
            .zip(&pairs)
            .filter(|(s, p)| (**s >= *candidate) == p.same_identity)
            .count();
        best = best.max(correct);
    }
    let oracle_accuracy = best as f64 / pairs.len() as f64;

    assert!(
        (outcome.accuracy - oracle_accuracy).abs() <= 0.02,
        "kfold {} vs oracle {oracle_accuracy}",
        outcome.accuracy
    );
}

#[test]
fn training_runs_are_file_level_reproducible() {
    let (manifest, provider, ecfg) = corpus_setup(3, 3, 6);
    let tcfg = small_train_config(9, 2);
    let dir = tempfile::tempdir().unwrap();

    let run = |tag: &str| {
        let metrics = dir.path().join(format!("metrics_{tag}.jsonl"));
        let ckpt = dir.path().join(format!("model_{tag}.ckpt"));
        Trainer::new(&manifest, &provider, ecfg.clone(), tcfg.clone())
            .metrics_path(&metrics)
            .checkpoint_path(&ckpt)
            .run()
            .unwrap();
        (
            std::fs::read(metrics).unwrap(),
            std::fs::read(ckpt).unwrap(),
        )
    };
    let (m1, c1) = run("a");
    let (m2, c2) = run("b");
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);

    // The checkpoint parses and restores a usable model.
    let ckpt = Checkpoint::from_bytes(&c1).unwrap();
    assert_eq!(ckpt.epoch, 2);
    let (embedder, _) = ckpt.restore_model().unwrap();
    let img = vec![0.1; 256];
    assert_eq!(embedder.embed_images(&[img]).unwrap().len(), 1);
}

#[test]
fn null_effect_control_is_byte_identical_on_disk() {
    let (manifest, provider, ecfg) = corpus_setup(13, 3, 6);
    let mut tcfg = small_train_config(4, 2);
    tcfg.split_fraction = 0.0;
    let dir = tempfile::tempdir().unwrap();

    let run = |tag: &str, sym_loss: bool| {
        let metrics = dir.path().join(format!("metrics_{tag}.jsonl"));
        let ckpt = dir.path().join(format!("model_{tag}.ckpt"));
        let mut cfg = tcfg.clone();
        cfg.sym_loss = sym_loss;
        Trainer::new(&manifest, &provider, ecfg.clone(), cfg)
            .metrics_path(&metrics)
            .checkpoint_path(&ckpt)
            .run()
            .unwrap();
        (
            std::fs::read(metrics).unwrap(),
            std::fs::read(ckpt).unwrap(),
        )
    };
    let (m_sym, c_sym) = run("sym", true);
    let (m_base, c_base) = run("base", false);
    assert_eq!(m_sym, m_base);
    assert_eq!(c_sym, c_base);
}
