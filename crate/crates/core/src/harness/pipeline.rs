//! End-to-end drivers: the training pipeline, baseline comparisons, and
//! hyperparameter sweeps. Every artifact except wall-clock columns in sweep
//! output is a deterministic function of (config, seed).

use std::fs;
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::engine::loss::{top1_error, topk_error};
use crate::engine::network::{load_params, save_params, Network, NetworkSpec};
use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::harness::config::{DataConfig, ExperimentConfig, PqMode};
use crate::harness::dataset::{synth_dataset, Dataset, Preprocessor, Split};
use crate::hierarchy::{
    aggregate_coarse, confusion_matrix, distance_from_confusion, extend_overlapping,
    misclassification_likelihood, sample_held_out, spectral_cluster, CoarseMapping,
    DistanceMatrix, Hierarchy,
};
use crate::model::{assemble, gather_rows, load_bundle, save_bundle, HdcnnModel, PqEntry};
use crate::runtime::{
    center_crop_batch, compress_model, evaluate, pq_candidates, pq_layer_name, EvalReport,
    EvalTarget, ExecPolicy, ViewMode, TIMING_BATCH,
};
use crate::trainer::{
    consistency_targets, finetune, pretrain_building_block, pretrain_fine_component, JsonlLogger,
    LogRecord, MemoryLogger, TrainConfig, TrainLogger,
};
use crate::engine::layers::{LayerSpec, Shape};

/// Holds `pipeline.lock` inside an experiment directory for the lifetime of
/// a run; a second acquire fails until the first guard drops.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join("pipeline.lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::state(format!(
                "{} is owned by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// The stock building block: two conv+pool stages, one fully-connected
/// classifier, softmax. The split sits after the first pooling layer, so
/// the shared prefix is conv-relu-pool. Eight channels per stage keep the
/// block capacity-tight on the 16-way task, which is exactly the situation
/// the hierarchical decomposition exploits: each fine component spends the
/// same rear on a quarter of the categories.
pub fn default_block_spec(input: Shape, classes: usize, split_index: usize) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        input,
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Conv2d {
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { units: classes },
            LayerSpec::Softmax,
        ],
        split_index,
    };
    spec.validate()?;
    Ok(spec)
}

/// One line of metrics.csv.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub variant: String,
    pub view: String,
    pub exec: String,
    pub pq: String,
    pub report: EvalReport,
}

/// Floats that read naturally in CSV cells: integral values print bare,
/// infinity prints `inf`.
pub fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

pub const METRICS_HEADER: &str =
    "variant,view,exec,pq,top1_err,top5_err,mean_executed,raw_param_bytes,compressed_param_bytes";

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        let top5 = match row.report.top5_err {
            Some(v) => format!("{v:.4}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{:.4},{},{:.4},{},{}\n",
            row.variant,
            row.view,
            row.exec,
            row.pq,
            row.report.top1_err,
            top5,
            row.report.mean_executed,
            row.report.raw_param_bytes,
            row.report.compressed_param_bytes,
        ));
    }
    out
}

/// Everything a pipeline run produces, kept in memory for callers that keep
/// going (sweeps, baselines, tests).
#[derive(Debug)]
pub struct PipelineResult {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub block: Network,
    /// Assembled and fine-pretrained, no finetuning.
    pub noft: HdcnnModel,
    /// Finetuned without the consistency penalty.
    pub nocc: HdcnnModel,
    /// Finetuned with the consistency penalty; the headline model.
    pub ft: HdcnnModel,
    pub hierarchy: Hierarchy,
    pub pq_entries: Vec<PqEntry>,
    /// Preprocessed test images, `[n, c, h, w]`.
    pub test_images: Tensor,
    pub test_labels: Vec<usize>,
}

/// Rewrites the stage field of every record before forwarding; lets one
/// finetune routine log under distinct ablation names.
struct StageRename<'a> {
    inner: &'a mut dyn TrainLogger,
    stage: &'a str,
}

impl TrainLogger for StageRename<'_> {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        let mut r = record.clone();
        r.stage = self.stage.to_string();
        self.inner.log(&r)
    }
}

/// Substream ids for pipeline-level randomness; training stages use their
/// own documented substreams.
pub const SUBSTREAM_HELDOUT: u64 = 5;
pub const SUBSTREAM_SPECTRAL: u64 = 6;
pub const SUBSTREAM_ASSEMBLE: u64 = 7;
pub const SUBSTREAM_SYNTH: u64 = 8;

/// Disjoint coarse assignment for any K ≥ 1. Clustering needs at least two
/// clusters; K=1 is the degenerate single-coarse-category hierarchy and maps
/// everything to it directly.
pub fn cluster_disjoint(distance: &DistanceMatrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 1 {
        return Ok(vec![0; distance.d.shape()[0]]);
    }
    spectral_cluster(distance, k, &mut Rng::substream(seed, SUBSTREAM_SPECTRAL))
}

/// Preprocessed remainder/held-out tensors drawn from the training split.
pub struct SplitTensors {
    pub rem_images: Tensor,
    pub rem_labels: Vec<usize>,
    pub held_images: Tensor,
    pub held_labels: Vec<usize>,
}

/// Draws the balanced held-out part that steers hierarchy learning; the
/// remainder pretrains the building block.
pub fn hierarchy_split(
    cfg: &ExperimentConfig,
    train: &Dataset,
    train_x: &Tensor,
) -> Result<SplitTensors> {
    let split = sample_held_out(
        &train.labels,
        train.label_count,
        cfg.hierarchy.per_class_heldout,
        &mut Rng::substream(cfg.seed, SUBSTREAM_HELDOUT),
    )?;
    let rem_idx: Vec<usize> = split.remainder.iter().map(|&(i, _)| i).collect();
    let held_idx: Vec<usize> = split.heldout.iter().map(|&(i, _)| i).collect();
    Ok(SplitTensors {
        rem_images: gather_rows(train_x, &rem_idx),
        rem_labels: split.remainder.iter().map(|&(_, y)| y).collect(),
        held_images: gather_rows(train_x, &held_idx),
        held_labels: split.heldout.iter().map(|&(_, y)| y).collect(),
    })
}

/// Hierarchy learning on held-out data: confusion, distance transform,
/// clustering into K coarse categories, misclassification likelihood, and
/// the likelihood-thresholded overlapping extension.
pub fn learn_hierarchy(
    block: &Network,
    held_images: &Tensor,
    held_labels: &[usize],
    k: usize,
    gamma: f64,
    seed: u64,
) -> Result<Hierarchy> {
    let c = block.label_count();
    let confusion = confusion_matrix(block, held_images, held_labels)?;
    let distance = distance_from_confusion(&confusion);
    let disjoint = cluster_disjoint(&distance, k, seed)?;
    let fine_probs = predict_chunked(block, held_images);
    let coarse_probs = aggregate_coarse(
        &fine_probs,
        CoarseMapping::Disjoint {
            map: &disjoint,
            coarse_count: k,
        },
    )?;
    let u = misclassification_likelihood(&coarse_probs, held_labels, c)?;
    extend_overlapping(&disjoint, &u, gamma)
}

/// Reads the pretrained block back from `block.netspec` + `block.hdw`.
pub fn load_block(out: &Path) -> Result<Network> {
    let spec = NetworkSpec::parse(&fs::read_to_string(out.join("block.netspec"))?)?;
    let mut block = Network::init(spec, &mut Rng::new(0))?;
    block.params = load_params(&out.join("block.hdw"), &block.params)?;
    Ok(block)
}

/// Loads or synthesizes the (train, test) pair named by the config.
pub fn obtain_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data {
        DataConfig::Synth(spec) => synth_dataset(spec, &mut Rng::substream(cfg.seed, SUBSTREAM_SYNTH))?,
        DataConfig::Files { train, test } => (
            Dataset::load(train, Split::Train)?,
            Dataset::load(test, Split::Test)?,
        ),
    };
    if train.label_count != test.label_count
        || train.height != test.height
        || train.width != test.width
        || train.channels != test.channels
    {
        return Err(Error::rejected(
            "train and test datasets disagree on image size or label count",
        ));
    }
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// Resolves the building-block architecture: the configured netspec file if
/// one is named (it carries its own split index), the stock block otherwise.
pub fn block_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<NetworkSpec> {
    match &cfg.model.spec {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            NetworkSpec::parse(&text)
        }
        None => default_block_spec(
            Shape::Chw {
                c: data.channels,
                h: data.height,
                w: data.width,
            },
            data.label_count,
            cfg.model.split_index,
        ),
    }
}

/// Class probabilities over a full set, predicted in bounded batches.
pub fn predict_chunked(net: &Network, images: &Tensor) -> Tensor {
    let n = images.shape()[0];
    let volume: usize = images.shape()[1..].iter().product();
    let mut probs = Tensor::zeros(&[n, net.label_count()]);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + TIMING_BATCH).min(n);
        let mut dims = images.shape().to_vec();
        dims[0] = hi - lo;
        let batch =
            Tensor::from_vec(&dims, images.data()[lo * volume..hi * volume].to_vec()).unwrap();
        let p = net.predict(&batch);
        for i in lo..hi {
            probs.row_mut(i).copy_from_slice(p.row(i - lo));
        }
        lo = hi;
    }
    probs
}

/// Pretrains every fine component. With more than one worker, components
/// run on threads against cloned read-only state; results are merged in
/// component order, so the outcome is identical to the sequential path.
pub fn pretrain_fine_all(
    model: &mut HdcnnModel,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    workers: usize,
    logger: &mut dyn TrainLogger,
) -> Result<()> {
    let k_total = model.fine.len();
    let workers = workers.max(1).min(k_total.max(1));
    if workers <= 1 {
        for k in 0..k_total {
            pretrain_fine_component(model, k, images, labels, cfg, logger)?;
        }
        return Ok(());
    }
    let ids: Vec<usize> = (0..k_total).collect();
    for wave in ids.chunks(workers) {
        let frozen = &*model;
        let outs: Vec<Result<(Vec<Vec<Tensor>>, Vec<LogRecord>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&k| {
                    s.spawn(move || {
                        let mut local = frozen.clone();
                        let mut mem = MemoryLogger::default();
                        pretrain_fine_component(&mut local, k, images, labels, cfg, &mut mem)?;
                        Ok((std::mem::take(&mut local.fine[k].rear.params), mem.0))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (&k, out) in wave.iter().zip(outs) {
            let (params, records) = out?;
            model.fine[k].rear.params = params;
            for r in &records {
                logger.log(r)?;
            }
        }
    }
    Ok(())
}

/// Quantization descriptors for every rear fully-connected weight whose
/// table would actually be smaller than the raw matrix. Tiny classifiers
/// (few output units) are left alone; quantizing them would grow the model.
pub fn auto_pq_entries(model: &HdcnnModel, s: usize, k: usize, seed: u64) -> Vec<PqEntry> {
    let mut entries = Vec::new();
    for (i, (component, layer, _)) in pq_candidates(model).into_iter().enumerate() {
        let w = match crate::runtime::pq_target_weight(model, component, layer) {
            Ok(w) => w,
            Err(_) => continue,
        };
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if s == 0 || n % s != 0 {
            continue;
        }
        let k_eff = k.min(m).min(256);
        if k_eff == 0 {
            continue;
        }
        let table = crate::runtime::HDQ_HEADER_BYTES + m * (n / s) + 4 * k_eff * n;
        if table >= 4 * m * n {
            continue;
        }
        entries.push(PqEntry {
            layer: pq_layer_name(component, layer),
            s,
            k: k_eff,
            seed: seed.wrapping_add(1000 + i as u64),
        });
    }
    entries
}

fn eval_row(
    target: &EvalTarget,
    images: &Tensor,
    labels: &[usize],
    view: ViewMode,
    variant: &str,
    exec: &str,
    pq: &str,
) -> Result<MetricsRow> {
    let report = evaluate(target, images, labels, view)?;
    Ok(MetricsRow {
        variant: variant.to_string(),
        view: match view {
            ViewMode::Single => "single".to_string(),
            ViewMode::TenView => "ten".to_string(),
        },
        exec: exec.to_string(),
        pq: pq.to_string(),
        report,
    })
}

/// The metrics.csv row set: block and every ablation single-view with full
/// execution, plus the headline model ten-view, thresholded, and (when
/// quantization descriptors exist) thresholded-and-quantized.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    block: &Network,
    noft: &HdcnnModel,
    nocc: &HdcnnModel,
    ft: &HdcnnModel,
    pq_entries: &[PqEntry],
    test_x: &Tensor,
    labels: &[usize],
) -> Result<Vec<MetricsRow>> {
    let beta = cfg.runtime.eval_beta;
    let beta_label = format!("beta={}", fmt_value(beta));
    let mut rows = Vec::new();
    let block_t = EvalTarget::Block(block);
    rows.push(eval_row(&block_t, test_x, labels, ViewMode::Single, "block", "all", "none")?);
    rows.push(eval_row(&block_t, test_x, labels, ViewMode::TenView, "block", "all", "none")?);
    rows.push(eval_row(
        &EvalTarget::Hdcnn(noft, ExecPolicy::All),
        test_x, labels, ViewMode::Single, "hdcnn-noft", "all", "none",
    )?);
    rows.push(eval_row(
        &EvalTarget::Hdcnn(nocc, ExecPolicy::All),
        test_x, labels, ViewMode::Single, "hdcnn-ft-nocc", "all", "none",
    )?);
    let ft_t = EvalTarget::Hdcnn(ft, ExecPolicy::All);
    rows.push(eval_row(&ft_t, test_x, labels, ViewMode::Single, "hdcnn-ft", "all", "none")?);
    rows.push(eval_row(&ft_t, test_x, labels, ViewMode::TenView, "hdcnn-ft", "all", "none")?);
    rows.push(eval_row(
        &EvalTarget::Hdcnn(ft, ExecPolicy::threshold(beta)?),
        test_x, labels, ViewMode::Single, "hdcnn-ft", &beta_label, "none",
    )?);
    if !pq_entries.is_empty() {
        let pq_model = compress_model(ft, pq_entries)?;
        rows.push(eval_row(
            &EvalTarget::Quantized(&pq_model, ExecPolicy::threshold(beta)?),
            test_x, labels, ViewMode::Single, "hdcnn-ft", &beta_label,
            &format!("s{}-k{}", cfg.runtime.pq_s, cfg.runtime.pq_k),
        )?);
    }
    Ok(rows)
}

/// Writes the row set as metrics.csv; wall time is deliberately excluded so
/// a rerun under the same (config, seed) is byte-identical.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Runs the whole experiment into `out`: data, held-out split, block
/// pretraining, hierarchy learning, assembly, fine pretraining, the two
/// finetuning ablations, quantization, and evaluation. See the README for
/// the artifact layout.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: usize,
) -> Result<PipelineResult> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let _lock = DirLock::acquire(out)?;

    fn stage(name: &'static str) -> impl Fn(Error) -> Error {
        move |e| e.in_stage(name)
    }

    // Data and preprocessing. Standardization statistics come from the full
    // training split; the held-out part only steers hierarchy learning.
    let (train, test) = obtain_data(cfg).map_err(stage("data"))?;
    if matches!(cfg.data, DataConfig::Synth(_)) {
        train.save(&out.join("train.hdc")).map_err(stage("data"))?;
        test.save(&out.join("test.hdc")).map_err(stage("data"))?;
    }
    let prep = Preprocessor::fit(&train);
    let train_x = prep.apply(&train);
    let test_x = prep.apply(&test);

    let spec = block_spec(cfg, &train).map_err(stage("model-spec"))?;
    fs::write(out.join("block.netspec"), spec.to_text()).map_err(|e| stage("model-spec")(e.into()))?;

    let log_file = fs::File::create(out.join("train_log.jsonl"))?;
    let mut logger = JsonlLogger(BufWriter::new(log_file));

    // Held-out split for hierarchy learning; the block pretrains on the rest.
    let split = hierarchy_split(cfg, &train, &train_x).map_err(stage("split"))?;

    let block = pretrain_building_block(
        &spec,
        &split.rem_images,
        &split.rem_labels,
        &cfg.block_train(),
        &mut logger,
    )
    .map_err(stage("pretrain-block"))?;
    save_params(&out.join("block.hdw"), &block.params).map_err(stage("pretrain-block"))?;

    let hierarchy = learn_hierarchy(
        &block,
        &split.held_images,
        &split.held_labels,
        cfg.hierarchy.k,
        cfg.hierarchy.gamma,
        cfg.seed,
    )
    .map_err(stage("hierarchy"))?;
    hierarchy
        .save(&out.join("hierarchy.txt"), &out.join("hierarchy_u.csv"))
        .map_err(stage("hierarchy"))?;

    // Assemble and pretrain the fine components on the full training split.
    let mut model = assemble(
        &block,
        spec.split_index,
        &hierarchy,
        &mut Rng::substream(cfg.seed, SUBSTREAM_ASSEMBLE),
    )
    .map_err(stage("assemble"))?;
    pretrain_fine_all(
        &mut model,
        &train_x,
        &train.labels,
        &cfg.fine_train(),
        workers,
        &mut logger,
    )
    .map_err(stage("pretrain-fine"))?;
    save_bundle(&model, &out.join("bundle"), &[]).map_err(stage("bundle"))?;

    // Finetune twice from the same pretrained state: with the consistency
    // penalty (headline) and without (ablation).
    let targets =
        consistency_targets(&hierarchy, &train.class_sizes()).map_err(stage("finetune"))?;
    let mut ft = model.clone();
    finetune(
        &mut ft,
        &train_x,
        &train.labels,
        &targets,
        &cfg.ft_train(),
        &mut StageRename {
            inner: &mut logger,
            stage: "finetune",
        },
    )
    .map_err(stage("finetune"))?;
    let mut nocc = model.clone();
    let mut nocc_cfg = cfg.ft_train();
    nocc_cfg.lambda = 0.0;
    finetune(
        &mut nocc,
        &train_x,
        &train.labels,
        &targets,
        &nocc_cfg,
        &mut StageRename {
            inner: &mut logger,
            stage: "finetune-nocc",
        },
    )
    .map_err(stage("finetune-nocc"))?;
    let noft = model;

    let pq_entries = match cfg.runtime.pq {
        PqMode::Auto => auto_pq_entries(&ft, cfg.runtime.pq_s, cfg.runtime.pq_k, cfg.seed),
        PqMode::None => Vec::new(),
    };
    save_bundle(&ft, &out.join("bundle_ft"), &pq_entries).map_err(stage("bundle"))?;
    save_bundle(&nocc, &out.join("bundle_ft_nocc"), &[]).map_err(stage("bundle"))?;

    let rows = evaluate_all(cfg, &block, &noft, &nocc, &ft, &pq_entries, &test_x, &test.labels)
        .map_err(stage("evaluate"))?;
    fs::write(out.join("metrics.csv"), metrics_csv(&rows)).map_err(|e| stage("metrics")(e.into()))?;

    logger.0.flush()?;
    Ok(PipelineResult {
        dir: out.to_path_buf(),
        rows,
        block,
        noft,
        nocc,
        ft,
        hierarchy,
        pq_entries,
        test_images: test_x,
        test_labels: test.labels,
    })
}

/// Pipeline state reloaded from an artifacts directory, for drivers that
/// build on a finished run.
pub struct LoadedRun {
    pub block: Network,
    pub noft: HdcnnModel,
    pub nocc: HdcnnModel,
    pub ft: HdcnnModel,
    pub pq_entries: Vec<PqEntry>,
    pub train: Dataset,
    pub train_images: Tensor,
    pub test_images: Tensor,
    pub test_labels: Vec<usize>,
}

/// Loads a finished run from disk, or executes the pipeline first when the
/// directory lacks its artifacts. Reloading is bit-exact: checkpoints store
/// the full-precision parameters.
pub fn ensure_pipeline(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<LoadedRun> {
    let needed = [
        "block.netspec",
        "block.hdw",
        "bundle/manifest.txt",
        "bundle_ft/manifest.txt",
        "bundle_ft_nocc/manifest.txt",
    ];
    if !needed.iter().all(|f| out.join(f).is_file()) {
        run_pipeline(cfg, out, workers)?;
    }
    let (train, test) = obtain_data(cfg)?;
    let prep = Preprocessor::fit(&train);
    let train_images = prep.apply(&train);
    let test_images = prep.apply(&test);
    let block = load_block(out)?;
    let noft = load_bundle(&out.join("bundle"))?;
    let ft = load_bundle(&out.join("bundle_ft"))?;
    let nocc = load_bundle(&out.join("bundle_ft_nocc"))?;
    Ok(LoadedRun {
        block,
        noft: noft.model,
        nocc: nocc.model,
        ft: ft.model,
        pq_entries: ft.pq,
        train,
        train_images,
        test_images,
        test_labels: test.labels,
    })
}

#[derive(Clone, Debug)]
pub struct BaselineRow {
    pub name: String,
    pub top1_err: f64,
    pub top5_err: Option<f64>,
}

pub const BASELINES_HEADER: &str = "name,top1_err,top5_err";

fn baselines_csv(rows: &[BaselineRow]) -> String {
    let mut out = String::from(BASELINES_HEADER);
    out.push('\n');
    for row in rows {
        let top5 = match row.top5_err {
            Some(v) => format!("{v:.4}"),
            None => String::new(),
        };
        out.push_str(&format!("{},{:.4},{}\n", row.name, row.top1_err, top5));
    }
    out
}

/// Single-view error of an averaged probability table, mirroring the
/// single-view path of `evaluate` exactly (same crops, same tie rule).
fn errors_from_probs(probs: &Tensor, labels: &[usize]) -> (f64, Option<f64>) {
    let c = probs.shape()[1];
    let top1 = 100.0 * top1_error(probs, labels);
    let top5 = (c >= 5).then(|| 100.0 * topk_error(probs, labels, 5));
    (top1, top5)
}

fn single_view_probs(net: &Network, images: &Tensor, labels_len: usize) -> Result<Tensor> {
    let mut probs = Tensor::zeros(&[labels_len, net.label_count()]);
    let mut lo = 0;
    while lo < labels_len {
        let hi = (lo + TIMING_BATCH).min(labels_len);
        let idx: Vec<usize> = (lo..hi).collect();
        let batch = center_crop_batch(images, &idx, net.spec.input)?;
        let p = net.predict(&batch);
        for i in lo..hi {
            probs.row_mut(i).copy_from_slice(p.row(i - lo));
        }
        lo = hi;
    }
    Ok(probs)
}

/// Doubles every convolution's channel count; the classifier width is
/// untouched.
fn doubled_spec(spec: &NetworkSpec) -> Result<NetworkSpec> {
    let mut wide = spec.clone();
    for layer in &mut wide.layers {
        if let LayerSpec::Conv2d { out_channels, .. } = layer {
            *out_channels *= 2;
        }
    }
    wide.validate()?;
    Ok(wide)
}

/// Baseline table: the building block, an M-member averaging ensemble of
/// independently seeded blocks, a doubled-width block, and the three
/// hierarchical ablations. All rows are single-view on the test split.
pub fn run_baselines(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: usize,
    members: usize,
) -> Result<Vec<BaselineRow>> {
    if members == 0 {
        return Err(Error::rejected("averaging needs at least one member"));
    }
    let run = ensure_pipeline(cfg, out, workers)?;
    let test_x = &run.test_images;
    let labels = &run.test_labels;
    let n = labels.len();

    // The ensemble members retrain the block under fresh seeds on the same
    // remainder split; member 0 is the pipeline block itself.
    let split = hierarchy_split(cfg, &run.train, &run.train_images)?;
    let rem_images = split.rem_images;
    let rem_labels = split.rem_labels;

    let mut rows = Vec::new();
    let block_probs = single_view_probs(&run.block, test_x, n)?;
    let (top1, top5) = errors_from_probs(&block_probs, labels);
    rows.push(BaselineRow {
        name: "block".into(),
        top1_err: top1,
        top5_err: top5,
    });

    let mut mean = block_probs;
    for m in 1..members {
        let mut member_cfg = cfg.block_train();
        member_cfg.seed = cfg.seed.wrapping_add(m as u64);
        let member = pretrain_building_block(
            &run.block.spec,
            &rem_images,
            &rem_labels,
            &member_cfg,
            &mut crate::trainer::NullLogger,
        )?;
        let probs = single_view_probs(&member, test_x, n)?;
        for (acc, &v) in mean.data_mut().iter_mut().zip(probs.data()) {
            *acc += v;
        }
    }
    for v in mean.data_mut() {
        *v /= members as f64;
    }
    let (top1, top5) = errors_from_probs(&mean, labels);
    rows.push(BaselineRow {
        name: format!("avg-{members}"),
        top1_err: top1,
        top5_err: top5,
    });

    let wide_spec = doubled_spec(&run.block.spec)?;
    let wide = pretrain_building_block(
        &wide_spec,
        &rem_images,
        &rem_labels,
        &cfg.block_train(),
        &mut crate::trainer::NullLogger,
    )?;
    let probs = single_view_probs(&wide, test_x, n)?;
    let (top1, top5) = errors_from_probs(&probs, labels);
    rows.push(BaselineRow {
        name: "block-double".into(),
        top1_err: top1,
        top5_err: top5,
    });

    for (name, model) in [
        ("hdcnn-noft", &run.noft),
        ("hdcnn-ft-nocc", &run.nocc),
        ("hdcnn-ft", &run.ft),
    ] {
        let report = evaluate(
            &EvalTarget::Hdcnn(model, ExecPolicy::All),
            test_x,
            labels,
            ViewMode::Single,
        )?;
        rows.push(BaselineRow {
            name: name.into(),
            top1_err: report.top1_err,
            top5_err: report.top5_err,
        });
    }
    fs::write(out.join("baselines.csv"), baselines_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Beta,
    Gamma,
    K,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<SweepParam> {
        match name {
            "beta" => Ok(SweepParam::Beta),
            "gamma" => Ok(SweepParam::Gamma),
            "k" | "K" => Ok(SweepParam::K),
            other => Err(Error::rejected(format!(
                "unknown sweep parameter `{other}` (want beta, gamma, or k)"
            ))),
        }
    }

    fn file_name(self) -> &'static str {
        match self {
            SweepParam::Beta => "sweep_beta.csv",
            SweepParam::Gamma => "sweep_gamma.csv",
            SweepParam::K => "sweep_k.csv",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub ok: bool,
    pub top1_err: Option<f64>,
    pub top5_err: Option<f64>,
    pub mean_executed: Option<f64>,
    pub wall_time_sec: f64,
}

pub const SWEEP_HEADER: &str = "value,status,top1_err,top5_err,mean_executed,wall_time_sec";

fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            fmt_value(row.value),
            if row.ok { "ok" } else { "failed" },
            opt(row.top1_err),
            opt(row.top5_err),
            opt(row.mean_executed),
            row.wall_time_sec,
        ));
    }
    out
}

/// Rebuilds the hierarchy under new (K, γ) from the stored block, then
/// pretrains fresh fine components. Finetuning is skipped: sweeps trace the
/// hierarchy's effect, not the finetuner's.
fn sweep_point_model(
    cfg: &ExperimentConfig,
    run: &LoadedRun,
    k: usize,
    gamma: f64,
    workers: usize,
) -> Result<HdcnnModel> {
    let split = hierarchy_split(cfg, &run.train, &run.train_images)?;
    let hierarchy = learn_hierarchy(
        &run.block,
        &split.held_images,
        &split.held_labels,
        k,
        gamma,
        cfg.seed,
    )?;
    let mut model = assemble(
        &run.block,
        run.block.spec.split_index,
        &hierarchy,
        &mut Rng::substream(cfg.seed, SUBSTREAM_ASSEMBLE),
    )?;
    pretrain_fine_all(
        &mut model,
        &run.train_images,
        &run.train.labels,
        &cfg.fine_train(),
        workers,
        &mut crate::trainer::NullLogger,
    )?;
    Ok(model)
}

/// Evaluates one grid point; β points rerun the stored headline model under
/// a new execution policy, γ and K points rebuild the hierarchy.
fn sweep_point(
    cfg: &ExperimentConfig,
    run: &LoadedRun,
    param: SweepParam,
    value: f64,
    workers: usize,
) -> Result<EvalReport> {
    match param {
        SweepParam::Beta => {
            let policy = ExecPolicy::threshold(value)?;
            evaluate(
                &EvalTarget::Hdcnn(&run.ft, policy),
                &run.test_images,
                &run.test_labels,
                ViewMode::Single,
            )
        }
        SweepParam::Gamma => {
            let model = sweep_point_model(cfg, run, cfg.hierarchy.k, value, workers)?;
            evaluate(
                &EvalTarget::Hdcnn(&model, ExecPolicy::All),
                &run.test_images,
                &run.test_labels,
                ViewMode::Single,
            )
        }
        SweepParam::K => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::rejected(format!(
                    "K grid point {value} is not a positive integer"
                )));
            }
            let model = sweep_point_model(cfg, run, value as usize, cfg.hierarchy.gamma, workers)?;
            evaluate(
                &EvalTarget::Hdcnn(&model, ExecPolicy::All),
                &run.test_images,
                &run.test_labels,
                ViewMode::Single,
            )
        }
    }
}

/// Evaluates the grid, one row per point; an invalid point records a failed
/// row and the sweep keeps going. Writes `sweep_<param>.csv` into `out`.
pub fn sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: usize,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::rejected("empty sweep grid"));
    }
    let run = ensure_pipeline(cfg, out, workers)?;
    let mut rows = Vec::new();
    for &value in grid {
        let start = Instant::now();
        let row = match sweep_point(cfg, &run, param, value, workers) {
            Ok(report) => SweepRow {
                value,
                ok: true,
                top1_err: Some(report.top1_err),
                top5_err: report.top5_err,
                mean_executed: Some(report.mean_executed),
                wall_time_sec: start.elapsed().as_secs_f64(),
            },
            Err(_) => SweepRow {
                value,
                ok: false,
                top1_err: None,
                top5_err: None,
                mean_executed: None,
                wall_time_sec: start.elapsed().as_secs_f64(),
            },
        };
        rows.push(row);
    }
    fs::write(out.join(param.file_name()), sweep_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::SynthSpec;
    use crate::trainer::NullLogger;

    /// A run small enough that the whole pipeline takes well under a second.
    fn micro_config() -> ExperimentConfig {
        let mut cfg = crate::harness::config::default_config();
        cfg.seed = 11;
        cfg.data = DataConfig::Synth(SynthSpec {
            groups: 2,
            classes_per_group: 2,
            height: 12,
            width: 12,
            channels: 1,
            similarity: 0.8,
            noise: 0.2,
            train_per_class: 12,
            test_per_class: 4,
        });
        cfg.hierarchy.k = 2;
        cfg.hierarchy.per_class_heldout = 4;
        for stage in [
            &mut cfg.train.block,
            &mut cfg.train.fine,
            &mut cfg.train.ft,
        ] {
            stage.iterations = 20;
            stage.drop_every = 10;
            stage.batch = 8;
        }
        cfg.train.log_every = 10;
        cfg.runtime.eval_beta = 2.0;
        cfg
    }

    #[test]
    fn micro_pipeline_emits_declared_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        let result = run_pipeline(&cfg, dir.path(), 1).unwrap();
        for name in [
            "train.hdc",
            "test.hdc",
            "block.netspec",
            "block.hdw",
            "hierarchy.txt",
            "hierarchy_u.csv",
            "train_log.jsonl",
            "metrics.csv",
            "bundle/manifest.txt",
            "bundle_ft/manifest.txt",
            "bundle_ft_nocc/manifest.txt",
        ] {
            assert!(dir.path().join(name).is_file(), "missing {name}");
        }
        // The lock is released once the run finishes.
        assert!(!dir.path().join("pipeline.lock").exists());
        // Micro classifiers are too small for quantization to pay off.
        assert!(result.pq_entries.is_empty());
        assert_eq!(result.rows.len(), 7);
        let all_exec: Vec<&MetricsRow> = result
            .rows
            .iter()
            .filter(|r| r.variant.starts_with("hdcnn") && r.exec == "all")
            .collect();
        assert_eq!(all_exec.len(), 4);
        for row in all_exec {
            assert!((row.report.mean_executed - 2.0).abs() < 1e-12);
        }
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(text.lines().count(), 8);
    }

    /// The generator's planted structure must survive training: a block
    /// pretrained on the synthetic set confuses within-group classes more
    /// than cross-group ones, which is what hierarchy learning feeds on.
    #[test]
    fn synth_within_group_confusion_dominates() {
        let mut cfg = micro_config();
        if let DataConfig::Synth(spec) = &mut cfg.data {
            spec.train_per_class = 24;
            spec.noise = 0.3;
        }
        cfg.hierarchy.per_class_heldout = 8;
        cfg.train.block.iterations = 120;
        cfg.train.block.drop_every = 80;
        let (train, _) = obtain_data(&cfg).unwrap();
        let prep = Preprocessor::fit(&train);
        let train_x = prep.apply(&train);
        let split = hierarchy_split(&cfg, &train, &train_x).unwrap();
        let spec = block_spec(&cfg, &train).unwrap();
        let net = pretrain_building_block(
            &spec,
            &split.rem_images,
            &split.rem_labels,
            &cfg.block_train(),
            &mut NullLogger,
        )
        .unwrap();
        let confusion = confusion_matrix(&net, &split.held_images, &split.held_labels).unwrap();
        let mut within = (0.0, 0usize);
        let mut cross = (0.0, 0usize);
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let bucket = if i / 2 == j / 2 { &mut within } else { &mut cross };
                bucket.0 += confusion.f.at(i, j);
                bucket.1 += 1;
            }
        }
        assert!(
            within.0 / within.1 as f64 > cross.0 / cross.1 as f64,
            "within {:?} cross {:?}",
            within,
            cross
        );
    }

    #[test]
    fn rerun_reproduces_metrics_and_log_bytes() {
        let cfg = micro_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, a.path(), 1).unwrap();
        run_pipeline(&cfg, b.path(), 2).unwrap();
        for name in ["metrics.csv", "train_log.jsonl", "hierarchy.txt"] {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between reruns");
        }
    }

    #[test]
    fn lock_rejects_concurrent_run() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        let err = run_pipeline(&micro_config(), dir.path(), 1).unwrap_err();
        assert!(matches!(err, Error::StateError(_)));
    }

    #[test]
    fn degenerate_single_coarse_category_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config();
        cfg.hierarchy.k = 1;
        cfg.hierarchy.gamma = f64::INFINITY;
        let result = run_pipeline(&cfg, dir.path(), 1).unwrap();
        assert_eq!(result.hierarchy.k, 1);
        assert_eq!(result.hierarchy.partial_sets[0].len(), 4);
        for row in &result.rows {
            if row.variant.starts_with("hdcnn") {
                assert!((row.report.mean_executed - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage_tag_names_failing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config();
        // More held-out images per class than the class has.
        cfg.hierarchy.per_class_heldout = 1000;
        let err = run_pipeline(&cfg, dir.path(), 1).unwrap_err();
        match err {
            Error::Stage { stage, .. } => assert_eq!(stage, "split"),
            other => panic!("expected stage error, got {other}"),
        }
    }

    #[test]
    fn beta_sweep_records_failures_and_keeps_going() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        run_pipeline(&cfg, dir.path(), 1).unwrap();
        let rows = sweep(
            &cfg,
            dir.path(),
            1,
            SweepParam::Beta,
            &[1.0, 2.0, f64::INFINITY, -1.0],
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[..3].iter().all(|r| r.ok));
        assert!(!rows[3].ok);
        let execs: Vec<f64> = rows[..3].iter().map(|r| r.mean_executed.unwrap()).collect();
        assert!(execs.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let text = fs::read_to_string(dir.path().join("sweep_beta.csv")).unwrap();
        assert!(text.starts_with(SWEEP_HEADER));
        assert!(text.contains("-1,failed,,,,"));
        assert!(text.contains("inf,ok,"));
    }

    #[test]
    fn k_sweep_covers_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        run_pipeline(&cfg, dir.path(), 1).unwrap();
        let rows = sweep(
            &cfg,
            dir.path(),
            1,
            SweepParam::K,
            &[1.0, 4.0, 2.5],
        )
        .unwrap();
        assert!(rows[0].ok && rows[1].ok);
        assert!(!rows[2].ok, "fractional K must fail");
    }

    #[test]
    fn gamma_sweep_partial_sets_grow_with_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        run_pipeline(&cfg, dir.path(), 1).unwrap();
        let run = ensure_pipeline(&cfg, dir.path(), 1).unwrap();
        let mut sizes = Vec::new();
        for gamma in [0.5, 5.0, f64::INFINITY] {
            let model = sweep_point_model(&cfg, &run, cfg.hierarchy.k, gamma, 1).unwrap();
            let total: usize = model.hierarchy.partial_sets.iter().map(Vec::len).sum();
            sizes.push(total);
        }
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*sizes.last().unwrap(), 8, "gamma=inf puts every class everywhere");
    }

    #[test]
    fn ensure_pipeline_reloads_bit_exact_models() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        let built = run_pipeline(&cfg, dir.path(), 1).unwrap();
        let loaded = ensure_pipeline(&cfg, dir.path(), 1).unwrap();
        assert_eq!(loaded.ft.coarse.params, built.ft.coarse.params);
        assert_eq!(loaded.noft.shared.params, built.noft.shared.params);
        for (a, b) in loaded.nocc.fine.iter().zip(&built.nocc.fine) {
            assert_eq!(a.rear.params, b.rear.params);
        }
        let report = evaluate(
            &EvalTarget::Hdcnn(&loaded.ft, ExecPolicy::All),
            &loaded.test_images,
            &loaded.test_labels,
            ViewMode::Single,
        )
        .unwrap();
        let built_row = built
            .rows
            .iter()
            .find(|r| r.variant == "hdcnn-ft" && r.view == "single" && r.exec == "all")
            .unwrap();
        assert_eq!(report.top1_err, built_row.report.top1_err);
    }

    #[test]
    fn baselines_single_member_average_equals_block() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        run_pipeline(&cfg, dir.path(), 1).unwrap();
        let rows = run_baselines(&cfg, dir.path(), 1, 1).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            ["block", "avg-1", "block-double", "hdcnn-noft", "hdcnn-ft-nocc", "hdcnn-ft"]
        );
        assert_eq!(rows[0].top1_err, rows[1].top1_err);
        assert_eq!(rows[0].top5_err, rows[1].top5_err);
        assert!(dir.path().join("baselines.csv").is_file());
    }

    #[test]
    fn parallel_fine_pretraining_matches_sequential() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        let seq = run_pipeline(&cfg, dir_a.path(), 1).unwrap();
        let par = run_pipeline(&cfg, dir_b.path(), 4).unwrap();
        for (a, b) in seq.noft.fine.iter().zip(&par.noft.fine) {
            assert_eq!(a.rear.params, b.rear.params);
        }
    }

    #[test]
    fn default_block_spec_shapes_check_out() {
        let spec = default_block_spec(Shape::Chw { c: 1, h: 32, w: 32 }, 16, 3).unwrap();
        assert_eq!(spec.split_index, 3);
        assert_eq!(spec.label_count().unwrap(), 16);
        let doubled = doubled_spec(&spec).unwrap();
        let widths: Vec<usize> = doubled
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(widths, [16, 16]);
    }
}
