//! Finite-difference checks for every differentiable operation, applied
//! individually and composed through the full loss pipeline.
//!
//! The oracle is central differences over a scalar readout of each op:
//! `loss = sum(weights * op(x))` with fixed pseudo-random weights, so the
//! whole Jacobian is probed. The forward path used by the oracle treats
//! the inputs as constants; only values are reused, never gradients.

use rand::Rng;
use symface::autodiff::{Graph, MarginKind, Tensor, TensorId};
use symface::loss::{self, SymBatchView, SymPairRows};
use symface::seeds;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            hi[i] += h;
            let mut lo = x.to_vec();
            lo[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(name: &str, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len(), "{name}: gradient length");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(n.abs()).max(1.0);
        assert!(
            (a - n).abs() <= TOLERANCE * scale,
            "{name}[{i}]: analytic {a} vs finite-difference {n}"
        );
    }
}

/// Check d(sum(w * build(x)))/dx against central differences.
fn gradcheck(
    name: &str,
    shape: &[usize],
    x0: &[f64],
    build: impl Fn(&mut Graph, TensorId) -> TensorId,
) {
    let mut wrng = seeds::rng(0xC0FFEE, name, 0);

    let weights: std::cell::OnceCell<Vec<f64>> = std::cell::OnceCell::new();
    let eval = |x: &[f64], param: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::new();
        let tensor = Tensor::from_vec(shape, x.to_vec()).unwrap();
        let p = if param {
            g.param(tensor)
        } else {
            g.constant(tensor)
        };
        let out = build(&mut g, p);
        let w = weights.get().expect("weights fixed before eval").clone();
        let wc = g.constant(Tensor::from_vec(g.value(out).shape(), w).unwrap());
        let weighted = g.mul(out, wc).unwrap();
        let loss = g.sum(weighted);
        if param {
            g.backward(loss).unwrap();
            let grad = g.grad(p).unwrap().to_vec();
            (g.value(loss).item(), Some(grad))
        } else {
            (g.value(loss).item(), None)
        }
    };

    // Fix the readout weights from the output size of a probe run.
    {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(shape, x0.to_vec()).unwrap());
        let out = build(&mut g, p);
        let n = g.value(out).len();
        weights
            .set((0..n).map(|_| wrng.random_range(0.2..1.0)).collect())
            .unwrap();
    }

    let (_, analytic) = eval(x0, true);
    let numeric = central_diff(|x| eval(x, false).0, x0, FD_STEP);
    assert_close(name, &analytic.unwrap(), &numeric);
}

fn random_vec(n: usize, lo: f64, hi: f64, tag: &str) -> Vec<f64> {
    let mut rng = seeds::rng(0xFEED, tag, 0);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn elementwise_ops() {
    let x = random_vec(6, -2.0, 2.0, "elementwise");
    gradcheck("identity-add", &[6], &x, |g, p| {
        let c = g.constant(Tensor::vector(vec![0.3; 6]));
        g.add(p, c).unwrap()
    });
    gradcheck("self-add", &[6], &x, |g, p| g.add(p, p).unwrap());
    gradcheck("sub", &[6], &x, |g, p| {
        let c = g.constant(Tensor::vector(vec![0.7; 6]));
        g.sub(p, c).unwrap()
    });
    gradcheck("mul", &[6], &x, |g, p| {
        let c = g.constant(Tensor::vector((1..=6).map(|v| v as f64 / 3.0).collect()));
        g.mul(p, c).unwrap()
    });
    gradcheck("square", &[6], &x, |g, p| g.mul(p, p).unwrap());
    gradcheck("add_scalar", &[6], &x, |g, p| g.add_scalar(p, 1.5));
    gradcheck("mul_scalar", &[6], &x, |g, p| g.mul_scalar(p, -2.5));
    gradcheck("exp", &[6], &x, |g, p| g.exp(p));
    gradcheck("cos", &[6], &x, |g, p| g.cos(p));
}

#[test]
fn guarded_elementwise_ops() {
    let positive = random_vec(5, 0.2, 3.0, "log-input");
    gradcheck("log", &[5], &positive, |g, p| g.log(p).unwrap());

    // Stay away from relu's kink and acos's endpoints.
    let off_kink = random_vec(5, 0.2, 2.0, "relu-pos");
    gradcheck("relu-positive", &[5], &off_kink, |g, p| g.relu(p));
    let negative = random_vec(5, -2.0, -0.2, "relu-neg");
    gradcheck("relu-negative", &[5], &negative, |g, p| g.relu(p));

    let interior = random_vec(5, -0.9, 0.9, "acos-input");
    gradcheck("acos", &[5], &interior, |g, p| g.acos(p).unwrap());

    let spread = random_vec(5, -3.0, 3.0, "clamp-input");
    // Keep every sample at least one FD step away from the clamp edges.
    let spread: Vec<f64> = spread
        .into_iter()
        .map(|v| {
            if (v - 1.0).abs() < 0.01 || (v + 1.0).abs() < 0.01 {
                v + 0.05
            } else {
                v
            }
        })
        .collect();
    gradcheck("clamp", &[5], &spread, |g, p| g.clamp(p, -1.0, 1.0));
}

#[test]
fn reduction_ops() {
    let x = random_vec(8, -1.5, 1.5, "reduce");
    gradcheck("sum", &[8], &x, |g, p| g.sum(p));
    gradcheck("mean", &[8], &x, |g, p| g.mean(p).unwrap());
    gradcheck("row_sum", &[2, 4], &x, |g, p| g.row_sum(p).unwrap());
    let nz = random_vec(8, 0.3, 1.5, "l2");
    gradcheck("l2_norm", &[8], &nz, |g, p| g.l2_norm(p));
}

#[test]
fn structural_ops() {
    let x = random_vec(12, -1.0, 1.0, "structural");
    gradcheck("add_row", &[3, 4], &x, |g, p| {
        let row = g.constant(Tensor::vector(vec![0.1, -0.2, 0.3, -0.4]));
        g.add_row(p, row).unwrap()
    });
    gradcheck("add_row-bias", &[4], &x[..4], |g, p| {
        let m = g.constant(Tensor::matrix(3, 4, x.to_vec()).unwrap());
        g.add_row(m, p).unwrap()
    });
    gradcheck("matmul-left", &[3, 4], &x, |g, p| {
        let b = g.constant(Tensor::matrix(4, 2, random_vec(8, -1.0, 1.0, "mm-b")).unwrap());
        g.matmul(p, b).unwrap()
    });
    gradcheck("matmul-right", &[3, 4], &x, |g, p| {
        let a = g.constant(Tensor::matrix(2, 3, random_vec(6, -1.0, 1.0, "mm-a")).unwrap());
        g.matmul(a, p).unwrap()
    });
    gradcheck("matmul_nt-left", &[3, 4], &x, |g, p| {
        let b = g.constant(Tensor::matrix(5, 4, random_vec(20, -1.0, 1.0, "nt-b")).unwrap());
        g.matmul_nt(p, b).unwrap()
    });
    gradcheck("matmul_nt-right", &[3, 4], &x, |g, p| {
        let a = g.constant(Tensor::matrix(5, 4, random_vec(20, -1.0, 1.0, "nt-a")).unwrap());
        g.matmul_nt(a, p).unwrap()
    });
    gradcheck("gather_rows", &[3, 4], &x, |g, p| {
        g.gather_rows(p, &[2, 0, 2, 1]).unwrap()
    });
    gradcheck("standardize", &[4, 3], &x, |g, p| {
        g.standardize(p, 1e-5).unwrap()
    });
    let away_from_zero: Vec<f64> = random_vec(12, 0.4, 1.6, "normrows")
        .into_iter()
        .enumerate()
        .map(|(i, v)| if i % 3 == 0 { -v } else { v })
        .collect();
    gradcheck("normalize_rows", &[3, 4], &away_from_zero, |g, p| {
        g.normalize_rows(p).unwrap()
    });
}

#[test]
fn cross_entropy_and_margins() {
    let labels = [2usize, 0, 1];
    let logits = random_vec(9, -2.0, 2.0, "xent");
    gradcheck("softmax_cross_entropy", &[3, 3], &logits, |g, p| {
        g.softmax_cross_entropy(p, &labels).unwrap()
    });

    let cosines = random_vec(9, -0.85, 0.85, "margins");
    for (name, kind) in [
        ("margin-none", MarginKind::None),
        ("margin-cosine", MarginKind::CosineOffset(0.35)),
        ("margin-angle-add", MarginKind::AngleOffset(0.45)),
        ("margin-angle-mul", MarginKind::AngleScale(1.35)),
    ] {
        gradcheck(name, &[3, 3], &cosines, |g, p| {
            g.target_margin(p, &labels, 16.0, kind).unwrap()
        });
    }
}

#[test]
fn symmetry_loss_composition() {
    // Four embeddings, two pairs; gradient flows through gather, sub,
    // square, row-sum, weighting, and the epoch denominator.
    let emb = random_vec(12, -1.0, 1.0, "sym-emb");
    let view = SymBatchView {
        pairs: vec![
            SymPairRows {
                left_row: 0,
                right_row: 1,
                rho: 0.8,
            },
            SymPairRows {
                left_row: 2,
                right_row: 3,
                rho: 0.4,
            },
        ],
        epoch_split_count: 5,
    };
    gradcheck("symface_loss", &[4, 3], &emb, |g, p| {
        loss::symface_loss(g, p, &view).unwrap()
    });
}

#[test]
fn margin_pipeline_composition() {
    // Embeddings -> normalize -> cosines -> margin -> cross entropy, plus
    // the symmetry branch from the same embeddings: the full per-batch
    // objective as one scalar.
    let labels = [1usize, 0, 1, 0];
    let view = SymBatchView {
        pairs: vec![SymPairRows {
            left_row: 1,
            right_row: 2,
            rho: 0.9,
        }],
        epoch_split_count: 2,
    };
    let weights = random_vec(6, -0.9, 0.9, "pipe-head");
    let emb = random_vec(12, 0.3, 1.2, "pipe-emb");
    gradcheck("embeddings-to-total-loss", &[4, 3], &emb, |g, p| {
        let w = g.constant(Tensor::matrix(2, 3, weights.clone()).unwrap());
        let zn = g.normalize_rows(p).unwrap();
        let wn = g.normalize_rows(w).unwrap();
        let cos = g.matmul_nt(zn, wn).unwrap();
        let margined = g
            .target_margin(cos, &labels, 24.0, MarginKind::AngleOffset(0.3))
            .unwrap();
        let ce = g.softmax_cross_entropy(margined, &labels).unwrap();
        let ce_mean = g.mean(ce).unwrap();
        let sym = loss::symface_loss(g, p, &view).unwrap();
        g.add(ce_mean, sym).unwrap()
    });
}
