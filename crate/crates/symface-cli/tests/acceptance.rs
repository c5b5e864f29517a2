//! Acceptance suite: one test per shipped guarantee, each printing a
//! PASS line with its measurements (run with `--nocapture` to see them).
//!
//! Run with: `cargo test -p symface-cli --test acceptance`

use std::process::Command;
use std::time::Instant;

use rand::Rng;
use symface::autodiff::{Graph, Tensor, TensorId};
use symface::data::{self, ImageProvider, Manifest, MemoryImages};
use symface::eval;
use symface::geometry::{self, Landmarks, Point2};
use symface::loss::{self, MarginConfig, MarginFamily, SymBatchView, SymPairRows};
use symface::model::{Embedder, EmbedderConfig};
use symface::raster::RasterImage;
use symface::seeds;
use symface::synth::{self, CorpusConfig};
use symface::train::{LrStep, TrainConfig, Trainer};

fn symface_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symface"))
}

#[test]
fn criterion_01_frontness_scoring_is_exact() {
    let started = Instant::now();
    let mut rng = seeds::rng(0xACCE97, "criterion-1", 0);
    for _ in 0..1000 {
        let ex_a = rng.random_range(0.0..200.0);
        let ex_b = rng.random_range(0.0..200.0);
        let ey = rng.random_range(0.0..200.0);
        let nx = rng.random_range(0.0..200.0);
        let ny = rng.random_range(0.0..200.0);
        let lm = Landmarks::detected(
            Point2::new(ex_a, ey),
            Point2::new(ex_b, ey),
            Point2::new(nx, ny),
        );
        let score = geometry::frontness_score(&lm).unwrap();
        // Closed form recomputed from the raw coordinates.
        let d = (nx - (ex_a + ex_b) / 2.0).abs();
        let rho = 1.0 / (1.0 + d * d);
        assert!((score.discrepancy - d).abs() <= 1e-12);
        assert!((score.rho - rho).abs() <= 1e-12);
    }
    let undetected = geometry::frontness_score(&Landmarks::undetected()).unwrap();
    assert_eq!(undetected.rho, 0.0);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("criterion 01 (frontness scoring exact over 1000 triples, {elapsed:?}): PASS");
}

#[test]
fn criterion_02_threshold_is_strict() {
    assert!(
        !geometry::classify_symmetric(0.2, 0.2),
        "boundary must be asymmetric"
    );
    assert!(!geometry::classify_symmetric(0.01, 0.2));
    assert!(geometry::classify_symmetric(0.38, 0.2));
    assert!(geometry::classify_symmetric(0.5, 0.2));
    println!("criterion 02 (strict threshold semantics incl. 0.01/0.38/boundary): PASS");
}

#[test]
fn criterion_03_split_merge_is_bit_exact_for_all_widths() {
    let started = Instant::now();
    let mut rng = seeds::rng(0xACCE97, "criterion-3", 0);
    let mut splits = 0usize;
    for w in 2..=128usize {
        let h = rng.random_range(2..10);
        let mut img = RasterImage::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, 0, rng.random_range(0..=255u32) as u8);
            }
        }
        for n_x in 1..w {
            let pair = geometry::split_face(&img, n_x).unwrap();
            assert_eq!(geometry::unsplit(&pair).unwrap(), img, "w={w} n_x={n_x}");
            // Padding regions are exactly zero.
            let off_l = geometry::center_offset(w, n_x);
            let off_r = geometry::center_offset(w, w - n_x);
            for y in 0..h {
                for x in 0..w {
                    if x < off_l || x >= off_l + n_x {
                        assert_eq!(pair.left().get(x, y, 0), 0);
                    }
                    if x < off_r || x >= off_r + (w - n_x) {
                        assert_eq!(pair.right().get(x, y, 0), 0);
                    }
                }
            }
            splits += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!("criterion 03 (split/merge bit-exact over {splits} splits, {elapsed:?}): PASS");
}

#[test]
fn criterion_04_sample_accounting_is_exact() {
    let started = Instant::now();
    let mut rng = seeds::rng(0xACCE97, "criterion-4", 0);
    for trial in 0..500u64 {
        let n_sym = rng.random_range(0..60);
        let n_asym = rng.random_range(0..60);
        let p: f64 = rng.random_range(0.0..=1.0);
        let manifest = accounting_manifest(n_sym, n_asym);
        let plan = data::plan_epoch(&manifest, p, trial).unwrap();

        assert_eq!(plan.n_sym, n_sym);
        assert_eq!(plan.n_split, (p * n_sym as f64).round() as usize);
        assert_eq!(plan.n_effective, plan.n_total + plan.n_split);
        for (i, r) in manifest.records().iter().enumerate() {
            if plan.is_split(i) {
                assert!(r.rho > manifest.tau(), "h_i=1 requires rho > tau");
            }
        }
        if !manifest.is_empty() {
            let slots = rng.random_range(1..20);
            let batches = data::assemble_batches(&plan, &manifest, slots, trial).unwrap();
            let images: usize = batches
                .iter()
                .flatten()
                .map(|i| if i.split { 2 } else { 1 })
                .sum();
            assert_eq!(images, plan.n_effective, "epoch image throughput");
        }
    }
    println!(
        "criterion 04 (N' = N + round(p*N_sym) over 500 manifests, {:?}): PASS",
        started.elapsed()
    );
}

fn accounting_manifest(n_sym: usize, n_asym: usize) -> Manifest {
    let mut entries = Vec::new();
    for i in 0..n_sym {
        entries.push(data::SourceEntry {
            id: format!("s{i:05}"),
            path: format!("s{i:05}.pgm"),
            label: i % 3,
            landmarks: Landmarks::detected(
                Point2::new(8.0, 10.0),
                Point2::new(24.0, 10.0),
                Point2::new(16.0, 20.0),
            ),
        });
    }
    for i in 0..n_asym {
        entries.push(data::SourceEntry {
            id: format!("a{i:05}"),
            path: format!("a{i:05}.pgm"),
            label: i % 3,
            landmarks: Landmarks::detected(
                Point2::new(8.0, 10.0),
                Point2::new(24.0, 10.0),
                Point2::new(21.0, 20.0),
            ),
        });
    }
    Manifest::build(entries, 0.2, |_| Ok(())).unwrap().0
}

// ---- criterion 5: finite-difference gate over every loss ----

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            hi[i] += FD_STEP;
            let mut lo = x.to_vec();
            lo[i] -= FD_STEP;
            (f(&hi) - f(&lo)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compare the autodiff gradient of a scalar loss against central
/// differences, with the loss rebuilt from scratch at every probe.
fn fd_gate(
    name: &str,
    shape: &[usize],
    x0: &[f64],
    build: impl Fn(&mut Graph, TensorId) -> TensorId,
) {
    let run = |x: &[f64], with_grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let t = Tensor::from_vec(shape, x.to_vec()).unwrap();
        let p = if with_grad { g.param(t) } else { g.constant(t) };
        let loss = build(&mut g, p);
        assert!(g.value(loss).is_scalar(), "{name} must produce a scalar");
        if with_grad {
            g.backward(loss).unwrap();
            (g.value(loss).item(), Some(g.grad(p).unwrap().to_vec()))
        } else {
            (g.value(loss).item(), None)
        }
    };
    let (_, analytic) = run(x0, true);
    let analytic = analytic.unwrap();
    let numeric = central_diff(|x| run(x, false).0, x0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!(
            (a - n).abs() <= FD_TOLERANCE * scale,
            "{name}[{i}]: analytic {a} vs numeric {n}"
        );
    }
}

#[test]
fn criterion_05_every_loss_passes_gradcheck() {
    let started = Instant::now();
    let configs = 100usize;
    let (n, c, d) = (3usize, 4usize, 5usize);
    let mut rng = seeds::rng(0xACCE97, "criterion-5", 0);

    for k in 0..configs {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cosines: Vec<f64> = (0..n * c).map(|_| rng.random_range(-0.85..0.85)).collect();
        let scale = rng.random_range(4.0..32.0);
        let margin = rng.random_range(0.1..0.5);

        // Eq.-(1)-style plain softmax cross entropy.
        fd_gate(&format!("softmax-ce[{k}]"), &[n, c], &logits, |g, p| {
            loss::ce_softmax(g, p, &labels).unwrap()
        });

        // Normalized softmax and the three margin families over cosines.
        for family in [
            MarginFamily::NormSoftmax,
            MarginFamily::CosFace,
            MarginFamily::SphereFace,
            MarginFamily::ArcFace,
        ] {
            let cfg = MarginConfig {
                family,
                scale,
                margin: if family == MarginFamily::SphereFace {
                    1.0 + margin
                } else {
                    margin
                },
            };
            fd_gate(&format!("{family:?}[{k}]"), &[n, c], &cosines, |g, p| {
                let l = loss::margin_logits(g, p, &labels, &cfg).unwrap();
                loss::ce_softmax(g, l, &labels).unwrap()
            });
        }

        // Symmetry loss over embeddings (two pairs).
        let emb: Vec<f64> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let view = SymBatchView {
            pairs: vec![
                SymPairRows {
                    left_row: 0,
                    right_row: 1,
                    rho: rng.random_range(0.2..1.0),
                },
                SymPairRows {
                    left_row: 2,
                    right_row: 3,
                    rho: rng.random_range(0.2..1.0),
                },
            ],
            epoch_split_count: rng.random_range(2..8),
        };
        fd_gate(&format!("symface[{k}]"), &[4, d], &emb, |g, p| {
            loss::symface_loss(g, p, &view).unwrap()
        });

        // Generic face loss: per-term CE over N' (here one split sample).
        let n_eff = n + 1;
        fd_gate(&format!("generic[{k}]"), &[n, c], &logits, |g, p| {
            loss::generic_face_loss(g, p, &labels, n_eff).unwrap()
        });

        // Total loss through a shared embedding matrix: classification
        // branch (normalize, cosines, margin, CE) plus symmetry branch.
        let head: Vec<f64> = (0..c * d).map(|_| rng.random_range(-0.9..0.9)).collect();
        let emb4: Vec<f64> = (0..4 * d)
            .map(|_| {
                let v: f64 = rng.random_range(0.25..1.2);
                if rng.random_range(0..2) == 0 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let labels4: Vec<usize> = (0..4).map(|_| rng.random_range(0..c)).collect();
        let total_cfg = MarginConfig {
            family: MarginFamily::ArcFace,
            scale,
            margin,
        };
        let total_view = SymBatchView {
            pairs: vec![SymPairRows {
                left_row: 1,
                right_row: 2,
                rho: rng.random_range(0.3..1.0),
            }],
            epoch_split_count: 3,
        };
        fd_gate(&format!("total[{k}]"), &[4, d], &emb4, |g, p| {
            let w = g.constant(Tensor::matrix(c, d, head.clone()).unwrap());
            let zn = g.normalize_rows(p).unwrap();
            let wn = g.normalize_rows(w).unwrap();
            let cos = g.matmul_nt(zn, wn).unwrap();
            let ml = loss::margin_logits(g, cos, &labels4, &total_cfg).unwrap();
            let face = loss::generic_face_loss(g, ml, &labels4, 5).unwrap();
            let sym = loss::symface_loss(g, p, &total_view).unwrap();
            loss::total_loss_node(g, face, sym).unwrap()
        });
    }

    // Closed-form symmetry gradient: rho * (e_l - e_r) / split_count,
    // against autodiff to 1e-10.
    for k in 0..100 {
        let mut g = Graph::new();
        let d = 6;
        let data: Vec<f64> = (0..2 * d)
            .map(|i| ((k * 13 + i * 7) % 19) as f64 / 19.0 - 0.5)
            .collect();
        let e = g.param(Tensor::matrix(2, d, data.clone()).unwrap());
        let rho = 0.3 + (k as f64) / 250.0;
        let split_count = 1 + k % 7;
        let view = SymBatchView {
            pairs: vec![SymPairRows {
                left_row: 0,
                right_row: 1,
                rho,
            }],
            epoch_split_count: split_count,
        };
        let l = loss::symface_loss(&mut g, e, &view).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(e).unwrap();
        for j in 0..d {
            let closed = rho * (data[j] - data[d + j]) / split_count as f64;
            assert!((grad[j] - closed).abs() <= 1e-10);
            assert!((grad[d + j] + closed).abs() <= 1e-10);
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "criterion 05 (gradcheck, {configs} configs x 8 losses + closed form, {elapsed:?}): PASS"
    );
}

#[test]
fn criterion_06_margin_reductions() {
    let mut rng = seeds::rng(0xACCE97, "criterion-6", 0);
    let (n, c) = (4usize, 5usize);
    for _ in 0..100 {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let cosines: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let reference = {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(n, c, cosines.clone()).unwrap());
            let cfg = MarginConfig {
                family: MarginFamily::NormSoftmax,
                scale: 32.0,
                margin: 0.0,
            };
            let out = loss::margin_logits(&mut g, x, &labels, &cfg).unwrap();
            g.value(out).data().to_vec()
        };
        for family in [
            MarginFamily::CosFace,
            MarginFamily::SphereFace,
            MarginFamily::ArcFace,
        ] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(n, c, cosines.clone()).unwrap());
            let cfg = MarginConfig {
                family,
                scale: 32.0,
                margin: 0.0,
            };
            let out = loss::margin_logits(&mut g, x, &labels, &cfg).unwrap();
            for (a, b) in g.value(out).data().iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-9, "{family:?} m=0 deviates: {a} vs {b}");
            }
        }
    }

    // Additive angular margin with the reference scale and margin values,
    // against a direct trigonometric oracle over a theta grid.
    let (s, m) = (32.0, 0.45);
    for k in 0..10 {
        let theta = 0.05 + k as f64 * (std::f64::consts::PI - m - 0.1) / 9.0;
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![theta.cos(), 0.1]).unwrap());
        let cfg = MarginConfig {
            family: MarginFamily::ArcFace,
            scale: s,
            margin: m,
        };
        let out = loss::margin_logits(&mut g, x, &[0], &cfg).unwrap();
        let oracle = s * (theta + m).cos();
        let got = g.value(out).get2(0, 0);
        assert!(
            (got - oracle).abs() <= 1e-9,
            "theta={theta}: {got} vs oracle {oracle}"
        );
    }
    println!(
        "criterion 06 (m=0 reductions within 1e-9; s=32 m=0.45 trig oracle at 10 thetas): PASS"
    );
}

// ---- desk-scale experiment plumbing ----

fn experiment_corpus(run_seed: u64) -> CorpusConfig {
    CorpusConfig {
        seed: seeds::derive(run_seed, "corpus", 0),
        ..CorpusConfig::default()
    }
}

fn experiment_embedder() -> EmbedderConfig {
    EmbedderConfig::default()
}

fn experiment_train(run_seed: u64, split_fraction: f64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size_slots: 32,
        lr_initial: 0.01,
        lr_steps: vec![LrStep {
            epoch: 20,
            lr: 0.001,
        }],
        split_fraction,
        margin: MarginConfig {
            family: MarginFamily::ArcFace,
            scale: 8.0,
            margin: 0.2,
        },
        seed: run_seed,
        ..TrainConfig::default()
    }
}

struct CorpusSplit {
    train: Manifest,
    eval: Manifest,
    images: MemoryImages,
}

/// Default corpus with the last `holdout` images of each identity held out.
fn build_corpus(run_seed: u64, holdout: usize) -> CorpusSplit {
    let cfg = experiment_corpus(run_seed);
    let corpus = synth::generate_corpus(&cfg).unwrap();
    let images = synth::memory_provider(&corpus);
    let per_id = cfg.images_per_identity;
    let mut train_entries = Vec::new();
    let mut eval_entries = Vec::new();
    for (i, entry) in synth::manifest_entries(&corpus).into_iter().enumerate() {
        if i % per_id < per_id - holdout {
            train_entries.push(entry);
        } else {
            eval_entries.push(entry);
        }
    }
    let (train, _) = Manifest::build(train_entries, 0.2, |_| Ok(())).unwrap();
    let (eval, _) = Manifest::build(eval_entries, 0.2, |_| Ok(())).unwrap();
    CorpusSplit {
        train,
        eval,
        images,
    }
}

fn normalized_tensor(image: &RasterImage) -> Vec<f64> {
    image
        .data()
        .iter()
        .map(|&v| data::normalize_pixel(v as f64))
        .collect()
}

struct ExperimentMetrics {
    accuracy: f64,
    inter_class_variance: f64,
    pair_distance: f64,
}

fn evaluate_model(embedder: &Embedder, split: &CorpusSplit, run_seed: u64) -> ExperimentMetrics {
    let mut tensors = Vec::new();
    let mut labels = Vec::new();
    for record in split.eval.records() {
        let img = split.images.image(record).unwrap();
        tensors.push(normalized_tensor(&img));
        labels.push(record.label);
    }
    let embeddings = embedder.embed_images(&tensors).unwrap();

    let pairs =
        eval::make_verification_pairs(&labels, 10, 60, seeds::derive(run_seed, "eval-pairs", 0))
            .unwrap();
    let outcome = eval::verify(&embeddings, &pairs, 10).unwrap();
    let icv = eval::inter_class_variance(&embeddings, &labels).unwrap();

    let mut halves = Vec::new();
    for record in split.eval.records().iter().filter(|r| r.symmetric) {
        let img = split.images.image(record).unwrap();
        let n_x = data::split_column(record, img.width()).unwrap();
        let pair = geometry::split_face(&img, n_x).unwrap();
        halves.push((
            normalized_tensor(pair.left()),
            normalized_tensor(pair.right()),
        ));
    }
    let pair_distance = eval::sym_pair_distance(embedder, &halves).unwrap();

    ExperimentMetrics {
        accuracy: outcome.accuracy,
        inter_class_variance: icv,
        pair_distance,
    }
}

#[test]
fn criterion_07_zero_split_fraction_is_a_null_effect() {
    let split = build_corpus(777, 8);
    let dir = tempfile::tempdir().unwrap();
    let run = |sym_loss: bool, tag: &str| {
        let metrics = dir.path().join(format!("metrics_{tag}.jsonl"));
        let ckpt = dir.path().join(format!("model_{tag}.ckpt"));
        let mut cfg = experiment_train(777, 0.0);
        cfg.epochs = 6;
        cfg.sym_loss = sym_loss;
        Trainer::new(&split.train, &split.images, experiment_embedder(), cfg)
            .metrics_path(&metrics)
            .checkpoint_path(&ckpt)
            .run()
            .unwrap();
        (
            std::fs::read(metrics).unwrap(),
            std::fs::read(ckpt).unwrap(),
        )
    };
    let (metrics_sym, ckpt_sym) = run(true, "sym");
    let (metrics_base, ckpt_base) = run(false, "base");
    assert_eq!(
        metrics_sym, metrics_base,
        "metrics logs must be byte-identical"
    );
    assert_eq!(ckpt_sym, ckpt_base, "checkpoints must be byte-identical");
    println!("criterion 07 (p=0 pipeline reproduces the baseline byte-for-byte): PASS");
}

#[test]
fn criterion_08_mechanism_experiment() {
    let started = Instant::now();
    let seed_list = [1u64, 2, 3, 4, 5];
    for &run_seed in &seed_list {
        let seed_started = Instant::now();
        let split = build_corpus(run_seed, 8);

        let train = |p: f64| {
            let cfg = experiment_train(run_seed, p);
            Trainer::new(&split.train, &split.images, experiment_embedder(), cfg)
                .run()
                .unwrap()
        };
        let with_sym = train(0.3);
        let baseline = train(0.0);

        let sym = evaluate_model(&with_sym.state.embedder, &split, run_seed);
        let base = evaluate_model(&baseline.state.embedder, &split, run_seed);

        let pair_reduction = 1.0 - sym.pair_distance / base.pair_distance;
        let icv_ratio = sym.inter_class_variance / base.inter_class_variance;
        let accuracy_delta = sym.accuracy - base.accuracy;

        println!(
            "criterion 08 seed {run_seed}: pair distance {:.4} vs {:.4} ({:.1}% lower), \
             inter-class variance {:.2} vs {:.2} (ratio {:.3}), \
             accuracy {:.4} vs {:.4} (delta {:+.4}), {:?}",
            sym.pair_distance,
            base.pair_distance,
            100.0 * pair_reduction,
            sym.inter_class_variance,
            base.inter_class_variance,
            icv_ratio,
            sym.accuracy,
            base.accuracy,
            accuracy_delta,
            seed_started.elapsed(),
        );

        assert!(
            pair_reduction >= 0.20,
            "seed {run_seed}: pair distance only {:.1}% lower",
            100.0 * pair_reduction
        );
        assert!(
            icv_ratio > 1.0,
            "seed {run_seed}: inter-class variance ratio {icv_ratio:.3} <= 1"
        );
        assert!(
            accuracy_delta >= -0.01,
            "seed {run_seed}: accuracy dropped {accuracy_delta:.4}"
        );
        assert!(
            seed_started.elapsed().as_secs_f64() < 600.0,
            "seed budget exceeded"
        );
    }
    println!(
        "criterion 08 (mechanism experiment, 5 seeds, {:?}): PASS",
        started.elapsed()
    );
}

#[test]
fn criterion_09_tau_sweep_proportions_are_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");

    let synth_status = symface_bin()
        .args(["synth", "--seed", "11", "--corpus-dir"])
        .arg(&corpus_dir)
        .status()
        .unwrap();
    assert!(synth_status.success());

    let sweep_csv = dir.path().join("sweep.csv");
    let output = symface_bin()
        .args(["sweep", "--taus", "0.05,0.1,0.2,0.3,0.4", "--corpus-dir"])
        .arg(&corpus_dir)
        .args(["--out-dir"])
        .arg(dir.path())
        .args(["--out"])
        .arg(&sweep_csv)
        .output()
        .unwrap();
    assert!(output.status.success(), "sweep failed: {output:?}");

    let csv = std::fs::read_to_string(&sweep_csv).unwrap();
    let mut previous: Option<f64> = None;
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let sym_fraction: f64 = fields[4].parse().unwrap();
        if let Some(prev) = previous {
            assert!(
                sym_fraction <= prev + 1e-12,
                "symmetric proportion rose from {prev} to {sym_fraction}"
            );
        }
        previous = Some(sym_fraction);
        rows += 1;
    }
    assert_eq!(rows, 5, "expected one row per tau");
    println!("criterion 09 (tau sweep emits monotone non-increasing proportions): PASS");
}

#[test]
fn criterion_10_training_is_deterministic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    let config_path = dir.path().join("run.json");
    std::fs::write(
        &config_path,
        r#"{
  "schema": "symface-run/1",
  "seed": 3,
  "synth": {"num_identities": 6, "images_per_identity": 10, "width": 24, "height": 24},
  "embedder": {"input_height": 24, "input_width": 24, "hidden": [24, 12], "embedding_dim": 8},
  "train": {"epochs": 3, "batch_size_slots": 8},
  "eval": {"holdout_per_identity": 2}
}"#,
    )
    .unwrap();

    let status = symface_bin()
        .args(["--config"])
        .arg(&config_path)
        .args(["synth", "--corpus-dir"])
        .arg(&corpus_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let run = |tag: &str| {
        let out_dir = dir.path().join(tag);
        let status = symface_bin()
            .args(["--config"])
            .arg(&config_path)
            .args(["--deterministic", "train", "--corpus-dir"])
            .arg(&corpus_dir)
            .args(["--out-dir"])
            .arg(&out_dir)
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read(out_dir.join("metrics.jsonl")).unwrap(),
            std::fs::read(out_dir.join("model.ckpt")).unwrap(),
        )
    };
    let (metrics_a, ckpt_a) = run("a");
    let (metrics_b, ckpt_b) = run("b");
    assert_eq!(metrics_a, metrics_b, "metrics logs differ between runs");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between runs");
    assert!(!metrics_a.is_empty() && !ckpt_a.is_empty());
    println!("criterion 10 (identical seed => byte-identical checkpoint and metrics): PASS");
}
