//! Acceptance gate. Prints one `PASS`, `FAIL` or `SKIP` line per criterion
//! and exits non-zero when any criterion fails.
//!
//! Criterion 9 needs a Cora dataset folder under `$NCGNN_DATA_ROOT/cora`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ncgnn::capsule::{
    baseline_mean_aggregate, baseline_weights, routing_forward, squash, CapsuleTensor, ModelDims,
    ModelParams, ParamKind,
};
use ncgnn::data::{generate_split, load_dataset, locate_manifest, DatasetManifest, SplitSpec, DATA_ROOT_ENV};
use ncgnn::eval::{evaluate, mixing_metric, receptive_field_sweep, run_protocol};
use ncgnn::filter::{adjacency_poly_to_laplacian_poly, ppr_exact_dense, ppr_truncated, FilterMode};
use ncgnn::gradcheck::{run_gradcheck, GradcheckFilter, GradcheckSize, TOLERANCE};
use ncgnn::graph::{normalize_adjacency, normalized_laplacian};
use ncgnn::synth::{make_sbm, SbmSpec};
use ncgnn::train::{train_model, Model, TrainConfig};
use ncgnn::{GraphDataset, SparseMatrix, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SBM_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn judged(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn sbm_config() -> TrainConfig {
    TrainConfig::from_json_file(&repo().join("configs/sbm.json")).expect("configs/sbm.json")
}

fn sbm_split() -> SplitSpec {
    SplitSpec { per_class_train: 20, val_size: 50, split_seed: 0 }
}

fn sbm(seed: u64) -> GraphDataset {
    make_sbm(&SbmSpec {
        n_per_class: 100,
        n_classes: 2,
        p_in: 0.05,
        p_out: 0.005,
        signal: 1.0,
        seed,
        ..SbmSpec::default()
    })
    .expect("SBM fixture")
}

fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> SparseMatrix {
    let mut trip = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                trip.push((i, j, 1.0));
                trip.push((j, i, 1.0));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &trip).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(GradcheckSize::Tiny, GradcheckFilter::Attention, 0, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let i = report.instance;
    let shape_ok = (i.n_nodes, i.n_primary, i.n_classes, i.primary_dim, i.class_dim, i.iterations) == (12, 3, 2, 5, 4, 2);
    let errors: Vec<Option<f64>> = report.rows.iter().map(|r| r.max_rel_error).collect();
    let worst = errors.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let all_checked = errors.iter().all(Option::is_some);
    judged(
        shape_ok && all_checked && worst < TOLERANCE && secs < 60.0,
        format!("{} tensors, max relative error {worst:.2e}, {secs:.2}s", errors.len()),
    )
}

/// Straight-line capsule graph layer over a dense filter.
fn interpret(
    a: &[Vec<f64>],
    h: &[Vec<Vec<f64>>],
    w: &[Vec<Vec<Vec<f64>>>],
    bias: &[Vec<f64>],
    t: usize,
) -> Vec<Vec<Vec<f64>>> {
    let (n, k, c, fc) = (h.len(), w.len(), bias.len(), bias[0].len());
    let uhat: Vec<Vec<Vec<Vec<f64>>>> = (0..n)
        .map(|j| {
            (0..k)
                .map(|kk| {
                    (0..c)
                        .map(|l| {
                            (0..fc)
                                .map(|o| w[kk][l][o].iter().zip(&h[j][kk]).map(|(x, y)| x * y).sum())
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut b = vec![vec![vec![0.0f64; c]; k]; n];
    let mut v = vec![vec![vec![0.0; fc]; c]; n];
    for pass in 0..=t {
        let mut pred = vec![vec![vec![0.0; fc]; c]; n];
        for j in 0..n {
            for l in 0..c {
                let z: f64 = (0..k).map(|kk| b[j][kk][l].exp()).sum();
                for kk in 0..k {
                    let cpl = b[j][kk][l].exp() / z;
                    for o in 0..fc {
                        pred[j][l][o] += cpl * uhat[j][kk][l][o];
                    }
                }
            }
        }
        for i in 0..n {
            for l in 0..c {
                let mut u = bias[l].clone();
                for j in 0..n {
                    for o in 0..fc {
                        u[o] += a[i][j] * pred[j][l][o];
                    }
                }
                let sq: f64 = u.iter().map(|x| x * x).sum();
                let s = if sq == 0.0 { 0.0 } else { sq / (1.0 + sq) / sq.sqrt() };
                v[i][l] = u.iter().map(|x| x * s).collect();
            }
        }
        if pass < t {
            for j in 0..n {
                for kk in 0..k {
                    for l in 0..c {
                        b[j][kk][l] += (0..fc).map(|o| v[j][l][o] * uhat[j][kk][l][o]).sum::<f64>();
                    }
                }
            }
        }
    }
    v
}

fn c2_routing_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, k, c) = (rng.random_range(3..=7), rng.random_range(1..=4), rng.random_range(2..=3));
        let (fp, fc, t) = (rng.random_range(2..=5), rng.random_range(2..=4), rng.random_range(1..=4));
        let mut u = |s: f64| rng.random_range(-s..s);
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j || u(1.0) > 0.2 { u(1.0).abs() + 0.05 } else { 0.0 }).collect())
            .collect();
        let h: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..k).map(|_| (0..fp).map(|_| u(1.0)).collect()).collect()).collect();
        let w: Vec<Vec<Vec<Vec<f64>>>> = (0..k)
            .map(|_| (0..c).map(|_| (0..fc).map(|_| (0..fp).map(|_| u(0.8)).collect()).collect()).collect())
            .collect();
        let bias: Vec<Vec<f64>> = (0..c).map(|_| (0..fc).map(|_| u(0.3)).collect()).collect();
        let want = interpret(&a, &h, &w, &bias, t);

        let trip: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| a[i][j] != 0.0)
            .map(|(i, j)| (i, j, a[i][j]))
            .collect();
        let filter = SparseMatrix::from_triplets(n, n, &trip).unwrap();
        let hflat: Vec<f64> = h.iter().flatten().flatten().copied().collect();
        let primaries = CapsuleTensor::from_tensor(Tensor::new(vec![n, k, fp], hflat).unwrap()).unwrap();
        let dims = ModelDims { n_features: 1, n_primary: k, primary_dim: fp, n_classes: c, class_dim: fc, n_hops: 0 };
        let mut params = ModelParams::zeros(dims).unwrap();
        let wflat: Vec<f64> = w.iter().flatten().flatten().flatten().copied().collect();
        params.get_mut(ParamKind::RoutingWeights).unwrap().data_mut().copy_from_slice(&wflat);
        let bflat: Vec<f64> = bias.iter().flatten().copied().collect();
        params.get_mut(ParamKind::ClassBias).unwrap().data_mut().copy_from_slice(&bflat);
        let (caps, _) = routing_forward(&primaries, &filter, &params, t).unwrap();
        for (i, wi) in want.iter().enumerate() {
            for (l, wl) in wi.iter().enumerate() {
                for (x, y) in caps.vector(i, l).iter().zip(wl) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    judged(worst < 1e-12, format!("10 instances, max deviation {worst:.2e}"))
}

fn c3_simplex_during_training() -> Outcome {
    let ds = sbm(0);
    let ds = ds.clone().with_splits(generate_split(&ds, &sbm_split()).unwrap()).unwrap();
    let model = Model::new(sbm_config(), &ds).unwrap();
    let (mut snapshots, mut worst_sum, mut min_c) = (0usize, 0.0f64, f64::INFINITY);
    let mut observe = |_: &ncgnn::train::EpochRecord, couplings: &[&Tensor]| {
        for t in couplings {
            snapshots += 1;
            let [n, k, c] = [t.shape()[0], t.shape()[1], t.shape()[2]];
            let d = t.data();
            for j in 0..n {
                for l in 0..c {
                    let s: f64 = (0..k).map(|kk| d[(j * k + kk) * c + l]).sum();
                    worst_sum = worst_sum.max((s - 1.0).abs());
                    for kk in 0..k {
                        min_c = min_c.min(d[(j * k + kk) * c + l]);
                    }
                }
            }
        }
    };
    train_model(model, &ds, Some(&mut observe)).unwrap();
    judged(
        snapshots > 0 && worst_sum < 1e-12 && min_c > 0.0,
        format!("{snapshots} snapshots, max |Σc−1| {worst_sum:.2e}, min c {min_c:.2e}"),
    )
}

fn c4_squash() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut max_norm, mut worst_dir) = (0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let dim = rng.random_range(1..=16);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let u: Vec<f64> = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let v = squash(&u);
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        max_norm = max_norm.max(nv);
        if nv > 0.0 {
            let dev = u.iter().zip(&v).map(|(a, b)| (a / nu - b / nv).powi(2)).sum::<f64>().sqrt();
            worst_dir = worst_dir.max(dev);
        } else {
            worst_dir = f64::INFINITY;
        }
    }
    let zero_ok = squash(&[0.0; 5]).iter().all(|&x| x == 0.0);
    judged(
        max_norm < 1.0 && worst_dir < 1e-10 && zero_ok,
        format!("max norm {max_norm:.12}, max direction error {worst_dir:.2e}, squash(0)=0: {zero_ok}"),
    )
}

fn dense_powers(m: &Tensor, count: usize) -> Vec<Tensor> {
    let n = m.rows();
    let mut out = vec![Tensor::identity(n)];
    for i in 1..count {
        out.push(out[i - 1].matmul(m).unwrap());
    }
    out
}

fn c5_polynomial_conversion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=16);
        let adj = random_graph(n, 0.3, &mut rng);
        let xi: Vec<f64> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let theta = adjacency_poly_to_laplacian_poly(&xi).unwrap();
        let a = normalize_adjacency(&adj).unwrap().to_dense();
        let l = normalized_laplacian(&adj).unwrap().to_dense();
        let (pa, pl) = (dense_powers(&a, xi.len()), dense_powers(&l, theta.len()));
        let mut diff = Tensor::zeros(&[n, n]);
        for (x, p) in xi.iter().zip(&pa) {
            diff.add_assign(&p.scale(*x));
        }
        for (t, p) in theta.iter().zip(&pl) {
            diff.add_assign(&p.scale(-t));
        }
        worst = worst.max(diff.norm());
    }
    judged(worst < 1e-10, format!("20 pairs, max Frobenius gap {worst:.2e}"))
}

fn c6_ppr_truncation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = normalize_adjacency(&random_graph(10, 0.35, &mut rng)).unwrap();
    let exact = ppr_exact_dense(&a, 0.1).unwrap();
    let ps = [1usize, 2, 5, 10, 20, 50, 100, 150, 200, 250, 300];
    let errors: Vec<f64> = ps
        .iter()
        .map(|&p| ppr_truncated(&a, 0.1, p).unwrap().to_dense().max_abs_diff(&exact))
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let last = *errors.last().unwrap();
    judged(
        monotone && last < 1e-12,
        format!("errors at P={ps:?}: {:?}", errors.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>()),
    )
}

fn c7_sbm_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = sbm_config();
    let accs: Vec<f64> = SBM_SEEDS
        .iter()
        .map(|&s| run_protocol(&sbm(s), &cfg, &sbm_split(), &[s], &[s]).unwrap().mean_test_accuracy)
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let m = mean(&accs);
    judged(
        m >= 0.95 && secs < 120.0,
        format!("per-seed {:?}, mean {m:.4}, {secs:.1}s", accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()),
    )
}

fn c8_receptive_field() -> Outcome {
    let cfg = sbm_config();
    let (mut hop2, mut hop5) = (Vec::new(), Vec::new());
    let depths = [2usize, 3, 4, 5];
    let mut mixing = vec![Vec::new(); depths.len()];
    for &s in &SBM_SEEDS {
        let ds = sbm(s);
        let reports = receptive_field_sweep(&ds, &cfg, &[2, 5], &sbm_split(), &[s], &[s]).unwrap();
        hop2.push(reports[0].mean_test_accuracy);
        hop5.push(reports[1].mean_test_accuracy);
        let a = normalize_adjacency(&ds.adjacency).unwrap();
        for (slot, &d) in mixing.iter_mut().zip(&depths) {
            let emb = baseline_mean_aggregate(&ds.features, &a, &baseline_weights(ds.n_features(), 16, d, s)).unwrap();
            slot.push(mixing_metric(&emb, &ds.labels).unwrap());
        }
    }
    let (a2, a5) = (mean(&hop2), mean(&hop5));
    let m: Vec<f64> = mixing.iter().map(|v| mean(v)).collect();
    let accuracy_ok = a5 >= a2 - 0.02;
    let mixing_ok = m[3] < m[0];
    judged(
        accuracy_ok && mixing_ok,
        format!(
            "accuracy hop2 {a2:.4} hop5 {a5:.4} ({}); baseline mixing at depths {depths:?}: {:?} ({})",
            if accuracy_ok { "ok" } else { "violated" },
            m.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            if mixing_ok { "decreases" } else { "does not decrease" },
        ),
    )
}

fn c9_cora() -> Outcome {
    let Ok(root) = std::env::var(DATA_ROOT_ENV) else {
        return Outcome { verdict: Verdict::Skip, detail: format!("${DATA_ROOT_ENV} not set") };
    };
    let Ok(path) = locate_manifest(&Path::new(&root).join("cora").display().to_string()) else {
        return Outcome { verdict: Verdict::Skip, detail: format!("no cora manifest under {root}") };
    };
    let start = Instant::now();
    let ds = load_dataset(&DatasetManifest::load(&path).unwrap()).unwrap();
    let ds = ds.clone().with_splits(generate_split(&ds, &SplitSpec::default()).unwrap()).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!(cfg.filter.mode, FilterMode::Attention { max_hop: 2 });
    let out = train_model(Model::new(cfg, &ds).unwrap(), &ds, None).unwrap();
    let acc = evaluate(&out.model, &ds, &ds.splits.test).unwrap();
    let secs = start.elapsed().as_secs_f64();
    judged(acc >= 0.78 && secs < 900.0, format!("test accuracy {acc:.4}, {secs:.0}s"))
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sbm");
    let bin = env!("CARGO_BIN_EXE_ncgnn");
    let ok = Command::new(bin)
        .args(["synth", "--seed", "3", "--out"])
        .arg(&data)
        .output()
        .unwrap()
        .status
        .success();
    assert!(ok, "synth failed");
    let run = |dir: &Path| {
        let status = Command::new(bin)
            .args(["train", "--dataset"])
            .arg(&data)
            .arg("--config")
            .arg(repo().join("configs/sbm.json"))
            .args(["--epochs", "40", "--val-size", "50", "--split-seed", "1", "--weight-seed", "2", "--out-dir"])
            .arg(dir)
            .output()
            .unwrap();
        assert!(status.status.success(), "{status:?}");
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (ck, hist) = (same("checkpoint.json"), same("history.jsonl"));
    judged(ck && hist, format!("checkpoint identical: {ck}, history identical: {hist}"))
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(u8, &str, Check); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "routing oracle equivalence", c2_routing_oracle),
        (3, "routing simplex during training", c3_simplex_during_training),
        (4, "squash contract", c4_squash),
        (5, "adjacency/Laplacian polynomial conversion", c5_polynomial_conversion),
        (6, "PPR truncation convergence", c6_ppr_truncation),
        (7, "synthetic end-to-end accuracy", c7_sbm_end_to_end),
        (8, "receptive field and over-smoothing", c8_receptive_field),
        (9, "Cora desk-scale reproduction", c9_cora),
        (10, "determinism of train", c10_determinism),
    ];
    let (mut pass, mut fail, mut skip) = (0, 0, 0);
    for (id, name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome { verdict: Verdict::Fail, detail: format!("panicked: {msg}") }
        });
        let tag = match outcome.verdict {
            Verdict::Pass => {
                pass += 1;
                "PASS"
            }
            Verdict::Fail => {
                fail += 1;
                "FAIL"
            }
            Verdict::Skip => {
                skip += 1;
                "SKIP"
            }
        };
        println!(
            "criterion {id:>2} {tag} {name}: {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {pass} passed, {fail} failed, {skip} skipped");
    if fail > 0 {
        std::process::exit(1);
    }
}
