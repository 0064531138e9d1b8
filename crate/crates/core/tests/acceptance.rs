//! Release gate. Every test prints one `criterion N (title): pass|FAIL`
//! line; run with `-- --nocapture` to watch them as they complete.
//!
//! Criteria 5, 7, 8 and 9 share one fixture: the default desk experiment
//! run across five seeds. The fixture is built once, by whichever of those
//! tests executes first, and its build time is the budget criterion 7
//! checks against.

use std::sync::OnceLock;
use std::time::Instant;

use hdcnn_core::engine::layers::{LayerSpec, Shape};
use hdcnn_core::engine::network::{Network, NetworkSpec};
use hdcnn_core::engine::rng::Rng;
use hdcnn_core::engine::tensor::Tensor;
use hdcnn_core::harness::config::default_config;
use hdcnn_core::harness::pipeline::{run_pipeline, MetricsRow, PipelineResult};
use hdcnn_core::hierarchy::{
    distance_from_confusion, extend_overlapping, misclassification_likelihood, spectral_cluster,
    ConfusionMatrix, Hierarchy,
};
use hdcnn_core::model::{assemble, gather_rows, HdcnnModel};
use hdcnn_core::runtime::{
    center_crop_batch, compression_factor, load_quantized, pq_compress, pq_forward,
    pq_forward_reconstruct, save_quantized, ExecPolicy, TIMING_BATCH,
};
use hdcnn_core::trainer::{consistency_targets, hdcnn_loss_and_grad};

use proptest::strategy::Strategy;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};

fn verdict(id: u32, title: &str, ok: bool, detail: String) {
    println!(
        "criterion {id} ({title}): {} [{detail}]",
        if ok { "pass" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} ({title}): {detail}");
}

#[test]
fn criterion_1_compression_factors() {
    let cases = [
        (1024, 3456, 3, 128, 4.8),
        (1024, 1024, 2, 256, 2.7),
        (4096, 25088, 14, 64, 29.9),
        (4096, 4096, 4, 256, 8.0),
    ];
    let mut worst = 0.0f64;
    for &(m, n, s, k, want) in &cases {
        let got = compression_factor(m, n, s, k);
        worst = worst.max((got - want).abs());
    }
    verdict(
        1,
        "compression factors",
        worst <= 0.1,
        format!("max deviation {worst:.4} over {} shapes", cases.len()),
    );
}

/// Tiny overlapping model for the gradient check: 4 categories, 2 coarse,
/// 8x8 inputs, every layer kind on some path.
fn tiny_model(seed: u64) -> HdcnnModel {
    let spec = NetworkSpec {
        input: Shape::Chw { c: 1, h: 8, w: 8 },
        layers: vec![
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { units: 4 },
            LayerSpec::Softmax,
        ],
        split_index: 3,
    };
    let mut rng = Rng::new(seed);
    let block = Network::init(spec, &mut rng).unwrap();
    // u_t = 1/(1.25 * 2) = 0.4, so categories 1 and 2 join both coarse
    // categories and the partial sets genuinely overlap.
    let u = Tensor::from_vec(&[2, 4], vec![0.9, 0.6, 0.4, 0.1, 0.1, 0.4, 0.6, 0.9]).unwrap();
    let hierarchy = extend_overlapping(&[0, 0, 1, 1], &u, 1.25).unwrap();
    assert!(hierarchy.overlapping.iter().any(|s| s.len() > 1));
    assemble(&block, 3, &hierarchy, &mut rng).unwrap()
}

/// Relative disagreement; magnitudes below the finite-difference noise
/// floor count as agreement.
fn rel_err(a: f64, f: f64) -> f64 {
    let denom = a.abs().max(f.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (a - f).abs() / denom
    }
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    const EPS: f64 = 1e-5;
    let mut model = tiny_model(2);
    let mut rng = Rng::new(20);
    let n = 3;
    let mut batch = Tensor::zeros(&[n, 1, 8, 8]);
    for v in batch.data_mut() {
        *v = rng.gen_normal();
    }
    let labels = [0usize, 2, 3];
    let targets = consistency_targets(&model.hierarchy, &[3, 2, 4, 1]).unwrap();

    let mut worst_line = String::new();
    let mut worst = 0.0f64;
    let mut penalty_active = true;
    for lambda in [0.0, 20.0] {
        let eval = hdcnn_loss_and_grad(&model, &batch, &labels, &targets, lambda).unwrap();
        // A zero penalty would make the lambda=20 pass vacuous.
        if lambda > 0.0 && eval.consistency_term <= 0.0 {
            penalty_active = false;
        }
        let group_count = 2 + model.fine.len();
        for g in 0..group_count {
            let (name, analytic): (String, Vec<Vec<Tensor>>) = match g {
                0 => ("shared".into(), eval.grads.shared.clone()),
                1 => ("coarse".into(), eval.grads.coarse.clone()),
                k => (format!("fine-{}", k - 1), eval.grads.fine[k - 2].clone()),
            };
            let mut group_worst = 0.0f64;
            for (li, tensors) in analytic.iter().enumerate() {
                for (ti, grad) in tensors.iter().enumerate() {
                    for idx in 0..grad.len() {
                        let nudge = |model: &mut HdcnnModel, value: f64| match g {
                            0 => model.shared.params[li][ti].data_mut()[idx] = value,
                            1 => model.coarse.params[li][ti].data_mut()[idx] = value,
                            k => model.fine[k - 2].rear.params[li][ti].data_mut()[idx] = value,
                        };
                        let orig = match g {
                            0 => model.shared.params[li][ti].data()[idx],
                            1 => model.coarse.params[li][ti].data()[idx],
                            k => model.fine[k - 2].rear.params[li][ti].data()[idx],
                        };
                        nudge(&mut model, orig + EPS);
                        let plus = hdcnn_loss_and_grad(&model, &batch, &labels, &targets, lambda)
                            .unwrap()
                            .loss;
                        nudge(&mut model, orig - EPS);
                        let minus = hdcnn_loss_and_grad(&model, &batch, &labels, &targets, lambda)
                            .unwrap()
                            .loss;
                        nudge(&mut model, orig);
                        let fd = (plus - minus) / (2.0 * EPS);
                        group_worst = group_worst.max(rel_err(grad.data()[idx], fd));
                    }
                }
            }
            if group_worst > worst {
                worst = group_worst;
                worst_line = format!("lambda={lambda} {name} rel={group_worst:.2e}");
            }
        }
    }
    verdict(
        2,
        "analytic gradients",
        worst <= 1e-4 && penalty_active,
        format!("worst {worst_line}, consistency term active: {penalty_active}"),
    );
}

/// Partitions agree when they induce the same equivalence relation.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn criterion_3_planted_hierarchy_recovery() {
    let c = 16;
    let mut recovered = 0;
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed);
        let mut planted: Vec<usize> = (0..c).map(|j| j / 4).collect();
        rng.shuffle(&mut planted);
        // Row-stochastic confusion: within-block off-diagonal entries 0.3,
        // cross-block entries jittered in [0, 0.004] (at most 0.05 per
        // row), diagonal takes the remainder.
        let mut f = Tensor::zeros(&[c, c]);
        for i in 0..c {
            let mut off = 0.0;
            for j in 0..c {
                if i == j {
                    continue;
                }
                let v = if planted[i] == planted[j] {
                    0.3
                } else {
                    rng.gen_range_f64(0.0, 0.004)
                };
                f.set(i, j, v);
                off += v;
            }
            f.set(i, i, 1.0 - off);
        }
        let distance = distance_from_confusion(&ConfusionMatrix { f });
        let got = spectral_cluster(&distance, 4, &mut Rng::new(seed ^ 0x5eed)).unwrap();
        if same_partition(&got, &planted) {
            recovered += 1;
        }
    }
    verdict(3, "planted hierarchy recovery", recovered == 10, format!("{recovered}/10 seeds"));
}

const PROP_CASES: u32 = 1000;

fn prop_config() -> PropConfig {
    PropConfig {
        cases: PROP_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    }
}

fn check<T: core::fmt::Debug>(
    failures: &mut Vec<String>,
    name: &str,
    strategy: impl Strategy<Value = T>,
    run: impl Fn(T) -> Result<(), TestCaseError>,
) {
    let mut runner = TestRunner::new(prop_config());
    if let Err(e) = runner.run(&strategy, run) {
        failures.push(format!("{name}: {e}"));
    }
}

/// Random valid hierarchy: surjective disjoint map, column-stochastic
/// likelihood, threshold drawn from a spread of gammas including infinity.
fn random_hierarchy(rng: &mut Rng, c: usize, k: usize) -> Hierarchy {
    let mut disjoint: Vec<usize> = (0..c).map(|j| j % k).collect();
    rng.shuffle(&mut disjoint);
    let mut u = Tensor::zeros(&[k, c]);
    for j in 0..c {
        let col: Vec<f64> = (0..k).map(|_| rng.gen_range_f64(0.05, 1.0)).collect();
        let total: f64 = col.iter().sum();
        for (kk, v) in col.iter().enumerate() {
            u.set(kk, j, v / total);
        }
    }
    let gamma = [0.7, 1.5, 8.0, f64::INFINITY][rng.gen_index(4)];
    extend_overlapping(&disjoint, &u, gamma).unwrap()
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

#[test]
fn criterion_4_invariant_properties() {
    let mut failures = Vec::new();

    // Final predictions live on the simplex under full execution.
    check(
        &mut failures,
        "predictions-on-simplex",
        (proptest::prelude::any::<u64>(), 2usize..=6, 1usize..=3, 1usize..=4),
        |(seed, c, k_raw, n)| {
            let mut rng = Rng::new(seed);
            let k = k_raw.min(c);
            let hierarchy = random_hierarchy(&mut rng, c, k);
            let spec = NetworkSpec {
                input: Shape::Flat { d: 6 },
                layers: vec![
                    LayerSpec::FullyConnected { units: 5 },
                    LayerSpec::Relu,
                    LayerSpec::FullyConnected { units: c },
                    LayerSpec::Softmax,
                ],
                split_index: 1,
            };
            let block = Network::init(spec, &mut rng).map_err(|e| fail(e.to_string()))?;
            let model = assemble(&block, 1, &hierarchy, &mut rng).map_err(|e| fail(e.to_string()))?;
            let mut batch = Tensor::zeros(&[n, 6]);
            for v in batch.data_mut() {
                *v = rng.gen_normal();
            }
            let pred = model
                .full_forward(&batch, ExecPolicy::All)
                .map_err(|e| fail(e.to_string()))?;
            for i in 0..n {
                let row = pred.p.row(i);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(fail(format!("row {i} sums to {sum}")));
                }
                if let Some(v) = row.iter().find(|v| **v < -1e-12 || **v > 1.0 + 1e-9) {
                    return Err(fail(format!("row {i} leaves the simplex at {v}")));
                }
            }
            Ok(())
        },
    );

    // Consistency targets are a distribution over coarse categories.
    check(
        &mut failures,
        "targets-sum-to-one",
        (proptest::prelude::any::<u64>(), 2usize..=8, 1usize..=4),
        |(seed, c, k_raw)| {
            let mut rng = Rng::new(seed);
            let k = k_raw.min(c);
            let hierarchy = random_hierarchy(&mut rng, c, k);
            let sizes: Vec<usize> = (0..c).map(|_| 1 + rng.gen_index(40)).collect();
            let targets = consistency_targets(&hierarchy, &sizes).map_err(|e| fail(e.to_string()))?;
            let sum: f64 = targets.t.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(fail(format!("targets sum to {sum}")));
            }
            if targets.t.iter().any(|v| *v < 0.0) {
                return Err(fail("negative target".into()));
            }
            Ok(())
        },
    );

    // Confusion rows are distributions over predictions.
    check(
        &mut failures,
        "confusion-rows-sum-to-one",
        (proptest::prelude::any::<u64>(), 2usize..=5, 0usize..=30),
        |(seed, c, extra)| {
            let mut rng = Rng::new(seed);
            let spec = NetworkSpec {
                input: Shape::Flat { d: 4 },
                layers: vec![LayerSpec::FullyConnected { units: c }, LayerSpec::Softmax],
                split_index: 0,
            };
            let net = Network::init(spec, &mut rng).map_err(|e| fail(e.to_string()))?;
            let n = c + extra;
            let mut images = Tensor::zeros(&[n, 4]);
            for v in images.data_mut() {
                *v = rng.gen_normal();
            }
            let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.gen_index(c) }).collect();
            let confusion = hdcnn_core::hierarchy::confusion_matrix(&net, &images, &labels)
                .map_err(|e| fail(e.to_string()))?;
            for i in 0..c {
                let sum: f64 = confusion.f.row(i).iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(fail(format!("confusion row {i} sums to {sum}")));
                }
            }
            Ok(())
        },
    );

    // The overlapping mapping extends the disjoint one.
    check(
        &mut failures,
        "overlapping-extends-disjoint",
        (proptest::prelude::any::<u64>(), 2usize..=10, 1usize..=4),
        |(seed, c, k_raw)| {
            let mut rng = Rng::new(seed);
            let k = k_raw.min(c);
            let hierarchy = random_hierarchy(&mut rng, c, k);
            for j in 0..c {
                if !hierarchy.overlapping[j].contains(&hierarchy.disjoint[j]) {
                    return Err(fail(format!("category {j} lost its home")));
                }
            }
            for kk in 0..k {
                for j in 0..c {
                    if hierarchy.disjoint[j] == kk && !hierarchy.partial_sets[kk].contains(&j) {
                        return Err(fail(format!("partial set {kk} misses {j}")));
                    }
                }
            }
            Ok(())
        },
    );

    // Likelihood columns are distributions over coarse categories.
    check(
        &mut failures,
        "likelihood-columns-sum-to-one",
        (proptest::prelude::any::<u64>(), 2usize..=6, 1usize..=4, 0usize..=20),
        |(seed, c, k, extra)| {
            let mut rng = Rng::new(seed);
            let n = c + extra;
            let mut probs = Tensor::zeros(&[n, k]);
            for i in 0..n {
                let row: Vec<f64> = (0..k).map(|_| rng.gen_range_f64(0.01, 1.0)).collect();
                let total: f64 = row.iter().sum();
                for (kk, v) in row.iter().enumerate() {
                    probs.set(i, kk, v / total);
                }
            }
            let labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.gen_index(c) }).collect();
            let u = misclassification_likelihood(&probs, &labels, c).map_err(|e| fail(e.to_string()))?;
            for j in 0..c {
                let sum: f64 = (0..k).map(|kk| u.at(kk, j)).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(fail(format!("likelihood column {j} sums to {sum}")));
                }
            }
            Ok(())
        },
    );

    verdict(
        4,
        "aggregation and hierarchy invariants",
        failures.is_empty(),
        if failures.is_empty() {
            format!("5 properties x {PROP_CASES} cases")
        } else {
            failures.join("; ")
        },
    );
}

struct Fixture {
    dir: tempfile::TempDir,
    runs: Vec<(u64, PipelineResult)>,
    build_secs: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

const FIXTURE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Five full default-config pipeline runs, one per seed.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let start = Instant::now();
        let mut runs = Vec::new();
        for &seed in &FIXTURE_SEEDS {
            let mut cfg = default_config();
            cfg.seed = seed;
            let out = dir.path().join(format!("seed-{seed}"));
            let result = run_pipeline(&cfg, &out, 1).expect("default pipeline");
            runs.push((seed, result));
        }
        Fixture { dir, runs, build_secs: start.elapsed().as_secs_f64() }
    })
}

fn top1(rows: &[MetricsRow], variant: &str, view: &str, exec: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.view == view && r.exec == exec && r.pq == "none")
        .map(|r| r.report.top1_err)
}

/// Forward in serving-size chunks; returns the bit patterns of the final
/// probabilities and the mean number of fine components executed.
fn forward_bits(model: &HdcnnModel, batch: &Tensor, policy: ExecPolicy) -> (Vec<u64>, f64) {
    let n = batch.shape()[0];
    let mut bits = Vec::with_capacity(n * model.label_count());
    let mut executed = 0usize;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + TIMING_BATCH).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let sub = gather_rows(batch, &idx);
        let pred = model.full_forward(&sub, policy).expect("forward");
        bits.extend(pred.p.data().iter().map(|v| v.to_bits()));
        executed += pred.executed.iter().map(|e| e.len()).sum::<usize>();
        lo = hi;
    }
    (bits, executed as f64 / n as f64)
}

#[test]
fn criterion_5_conditional_execution_contract() {
    let fx = fixture();
    let (_, run) = &fx.runs[0];
    let model = &run.ft;
    let input = model.shared.input_shape();
    let idx: Vec<usize> = (0..run.test_labels.len()).collect();
    let batch = center_crop_batch(&run.test_images, &idx, input).unwrap();

    let (all_bits, all_mean) = forward_bits(model, &batch, ExecPolicy::All);
    let grid = [1.0, 2.0, 4.0, 8.0, 16.0, f64::INFINITY];
    let mut means = Vec::new();
    let mut inf_identical = false;
    for beta in grid {
        let policy = ExecPolicy::threshold(beta).unwrap();
        let (bits, mean) = forward_bits(model, &batch, policy);
        if beta.is_infinite() {
            inf_identical = bits == all_bits && mean == all_mean;
        }
        means.push(mean);
    }
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        5,
        "conditional execution",
        monotone && inf_identical,
        format!(
            "mean executed {:?} over beta {{1,2,4,8,16,inf}}, beta=inf bit-identical to all: {inf_identical}",
            means.iter().map(|m| (m * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_6_quantization_paths_and_sizes() {
    let mut rng = Rng::new(60);

    // Lookup path against reconstruct-then-multiply.
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = [2usize, 3, 4][rng.gen_index(3)];
        let n = s * (1 + rng.gen_index(5));
        let m = 4 + rng.gen_index(28);
        let k = (2 + rng.gen_index(7)).min(m);
        let mut w = Tensor::zeros(&[m, n]);
        for v in w.data_mut() {
            *v = rng.gen_normal();
        }
        let q = pq_compress(&w, s, k, &mut rng).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_normal()).collect();
        let direct = pq_forward(&q, &x).unwrap();
        let rebuilt = pq_forward_reconstruct(&q, &x).unwrap();
        for (a, b) in direct.iter().zip(&rebuilt) {
            worst = worst.max((a - b).abs());
        }
    }
    let dual_ok = worst <= 1e-10;

    // Lossless when each segment holds at most k distinct rows. Patterns
    // use small halves so the f32 codebook stores them exactly.
    let mut lossless_ok = true;
    for trial in 0..10u64 {
        let (m, s, segs, k) = (12usize, 2usize, 3usize, 4usize);
        let n = s * segs;
        let mut pick = Rng::new(100 + trial);
        let mut w = Tensor::zeros(&[m, n]);
        for r in 0..m {
            for seg in 0..segs {
                // round-robin for the first k rows so every pattern occurs
                let c = if r < k { r } else { pick.gen_index(k) };
                for j in 0..s {
                    let v = (c as f64) * 0.5 - 1.0 + (seg * s + j) as f64 * 0.25;
                    w.row_mut(r)[seg * s + j] = v;
                }
            }
        }
        let q = pq_compress(&w, s, k, &mut pick).unwrap();
        if q.reconstruct().data() != w.data() {
            lossless_ok = false;
        }
    }

    // Stored size: 20-byte header + one index byte per row segment + an
    // f32 per codebook cell.
    let dir = tempfile::tempdir().unwrap();
    let mut size_ok = true;
    for trial in 0..5u64 {
        let mut srng = Rng::new(200 + trial);
        let s = [2usize, 4][srng.gen_index(2)];
        let n = s * (2 + srng.gen_index(4));
        let m = 6 + srng.gen_index(20);
        let k = (2 + srng.gen_index(6)).min(m);
        let mut w = Tensor::zeros(&[m, n]);
        for v in w.data_mut() {
            *v = srng.gen_normal();
        }
        let q = pq_compress(&w, s, k, &mut srng).unwrap();
        let path = dir.path().join(format!("q{trial}.hdq"));
        save_quantized(&path, &q).unwrap();
        let expect = 20 + m * (n / s) + 4 * k * n;
        if std::fs::metadata(&path).unwrap().len() as usize != expect {
            size_ok = false;
        }
        let back = load_quantized(&path).unwrap();
        if back.reconstruct().data() != q.reconstruct().data() {
            size_ok = false;
        }
    }

    verdict(
        6,
        "quantization dual path, losslessness, file size",
        dual_ok && lossless_ok && size_ok,
        format!("dual-path worst {worst:.2e}, lossless {lossless_ok}, sizes {size_ok}"),
    );
}

#[test]
fn criterion_7_hierarchical_model_beats_block() {
    let fx = fixture();
    let mut wins = 0;
    let mut improvements = Vec::new();
    let mut pairs = Vec::new();
    for (seed, run) in &fx.runs {
        let block = top1(&run.rows, "block", "single", "all").expect("block row");
        let ft = top1(&run.rows, "hdcnn-ft", "single", "all").expect("ft row");
        if ft <= block {
            wins += 1;
        }
        improvements.push(block - ft);
        pairs.push(format!("seed {seed}: {block:.2} -> {ft:.2}"));
    }
    improvements.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = improvements[improvements.len() / 2];
    let in_budget = fx.build_secs <= 1800.0;
    verdict(
        7,
        "hierarchical model beats the block",
        wins >= 4 && median >= 1.0 && in_budget,
        format!(
            "{}; {wins}/5 improved, median +{median:.2}pp, 5 runs in {:.0}s",
            pairs.join("; "),
            fx.build_secs
        ),
    );
}

#[test]
fn criterion_8_ablation_rows_and_direction() {
    let fx = fixture();
    let mut wins = 0;
    let mut rows_ok = true;
    let mut summary = Vec::new();
    for (seed, run) in &fx.runs {
        let noft = top1(&run.rows, "hdcnn-noft", "single", "all");
        let nocc = top1(&run.rows, "hdcnn-ft-nocc", "single", "all");
        let ft = top1(&run.rows, "hdcnn-ft", "single", "all");
        match (noft, nocc, ft) {
            (Some(noft), Some(_), Some(ft)) => {
                if ft <= noft {
                    wins += 1;
                }
                summary.push(format!("seed {seed}: noft {noft:.2} ft {ft:.2}"));
            }
            _ => rows_ok = false,
        }
    }
    verdict(
        8,
        "ablation rows",
        rows_ok && wins >= 3,
        format!("all three variants present: {rows_ok}; ft <= noft in {wins}/5; {}", summary.join("; ")),
    );
}

#[test]
fn criterion_9_pipeline_rerun_byte_identical() {
    let fx = fixture();
    let (seed, run) = &fx.runs[0];
    let mut cfg = default_config();
    cfg.seed = *seed;
    let rerun_dir = fx.dir.path().join("rerun");
    run_pipeline(&cfg, &rerun_dir, 1).expect("rerun pipeline");
    let first = std::fs::read(run.dir.join("metrics.csv")).unwrap();
    let second = std::fs::read(rerun_dir.join("metrics.csv")).unwrap();
    verdict(
        9,
        "byte-identical rerun",
        first == second,
        format!("metrics.csv {} bytes, seed {seed}", first.len()),
    );
}
