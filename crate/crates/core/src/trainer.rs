//! Staged training: building-block pretraining, per-component fine
//! pretraining with the shared layers frozen, and whole-model fine-tuning
//! under the coarse-category-consistency regularizer.

use serde::Serialize;

use crate::engine::layers::Shape;
use crate::engine::loss::{multinomial_logistic, top1_error, LOG_LOSS_FLOOR};
use crate::engine::network::{Network, NetworkSpec};
use crate::engine::optim::{OptimizerState, Schedule};
use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::model::{gather_rows, HdcnnModel};
use crate::runtime::{crop, hflip};

/// One SGD stage's hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Minibatch size.
    pub batch: usize,
    /// SGD steps to run.
    pub iterations: u64,
    pub initial_lr: f64,
    pub drop_factor: f64,
    pub drop_every: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Consistency weight; only fine-tuning reads it.
    pub lambda: f64,
    /// Train-time random crop edge; must match the network input size.
    /// None feeds images at their stored size.
    pub crop: Option<usize>,
    pub flip: bool,
    pub seed: u64,
    /// Emit a log record every this many iterations (and at the last one);
    /// 0 logs only the last.
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::rejected("batch size must be at least 1"));
        }
        if self.initial_lr < 0.0 || !self.initial_lr.is_finite() {
            return Err(Error::rejected("learning rate must be finite and >= 0"));
        }
        if self.drop_factor <= 0.0 {
            return Err(Error::rejected("drop factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::rejected("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::rejected("weight decay must be >= 0"));
        }
        if self.lambda < 0.0 {
            return Err(Error::rejected("consistency weight must be >= 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            initial_lr: self.initial_lr,
            drop_factor: self.drop_factor,
            drop_every: self.drop_every,
        }
    }
}

/// Per-coarse-category training-mass fractions the mean coarse weights are
/// pulled toward: t_k sums class sizes over the categories containing each
/// class, renormalized to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTargets {
    pub t: Vec<f64>,
}

pub fn consistency_targets(
    hierarchy: &Hierarchy,
    class_sizes: &[usize],
) -> Result<ConsistencyTargets> {
    let c = hierarchy.label_count();
    if class_sizes.len() != c {
        return Err(Error::shape(format!(
            "{} class sizes for {c} categories",
            class_sizes.len()
        )));
    }
    if let Some(j) = class_sizes.iter().position(|&s| s == 0) {
        return Err(Error::rejected(format!("fine category {} is empty", j + 1)));
    }
    let mut t = vec![0.0; hierarchy.k];
    for (j, coarse) in hierarchy.overlapping.iter().enumerate() {
        for &k in coarse {
            t[k] += class_sizes[j] as f64;
        }
    }
    let total: f64 = t.iter().sum();
    for v in &mut t {
        *v /= total;
    }
    Ok(ConsistencyTargets { t })
}

/// One line of the training trace.
#[derive(Clone, Debug, Serialize)]
pub struct LogRecord {
    pub stage: String,
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub consistency_term: f64,
    pub top1_train_err: f64,
}

pub trait TrainLogger {
    fn log(&mut self, record: &LogRecord) -> Result<()>;
}

/// Keeps records in memory; handy for tests and summaries.
#[derive(Default)]
pub struct MemoryLogger(pub Vec<LogRecord>);

impl TrainLogger for MemoryLogger {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullLogger;

impl TrainLogger for NullLogger {
    fn log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams records as JSON lines.
pub struct JsonlLogger<W: std::io::Write>(pub W);

impl<W: std::io::Write> TrainLogger for JsonlLogger<W> {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::state(format!("log serialization: {e}")))?;
        writeln!(self.0, "{line}")?;
        Ok(())
    }
}

fn should_log(cfg: &TrainConfig, it: u64) -> bool {
    let last = it + 1 == cfg.iterations;
    last || (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
}

/// Epoch-shuffled index stream: every pass visits each example once in a
/// freshly shuffled order.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> BatchSampler {
        BatchSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Gathers a training minibatch, applying the configured random crop and
/// horizontal flip. Per example the stream is consumed in a fixed order:
/// crop top, crop left, then the flip coin.
fn augment_gather(
    images: &Tensor,
    idx: &[usize],
    input: Shape,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    match input {
        Shape::Flat { d } => {
            if images.shape().len() != 2 || images.shape()[1] != d {
                return Err(Error::shape(format!(
                    "expected [n, {d}] training inputs, got {:?}",
                    images.shape()
                )));
            }
            if cfg.crop.is_some() {
                return Err(Error::rejected("cropping needs a spatial input layout"));
            }
            let mut batch = gather_rows(images, idx);
            if cfg.flip {
                // No spatial axes; the flip flag is a no-op for flat data.
                let _ = &mut batch;
            }
            Ok(batch)
        }
        Shape::Chw { c, h, w } => {
            let dims = images.shape();
            if dims.len() != 4 || dims[1] != c {
                return Err(Error::shape(format!(
                    "expected [n, {c}, _, _] training inputs, got {dims:?}"
                )));
            }
            let (ih, iw) = (dims[2], dims[3]);
            match cfg.crop {
                Some(edge) if edge != h || edge != w => {
                    return Err(Error::rejected(format!(
                        "crop edge {edge} does not match the {h}x{w} input"
                    )));
                }
                None if (ih, iw) != (h, w) => {
                    return Err(Error::rejected(format!(
                        "stored images are {ih}x{iw} but the input is {h}x{w} and no crop is configured"
                    )));
                }
                _ => {}
            }
            if cfg.crop.is_none() && !cfg.flip {
                return Ok(gather_rows(images, idx));
            }
            let mut out = Tensor::zeros(&[idx.len(), c, h, w]);
            let volume = c * h * w;
            for (row, &i) in idx.iter().enumerate() {
                let image = crate::runtime::image_at(images, i)?;
                let mut patch = if cfg.crop.is_some() && (ih, iw) != (h, w) {
                    let top = rng.gen_index(ih - h + 1);
                    let left = rng.gen_index(iw - w + 1);
                    crop(&image, top, left, h, w)
                } else {
                    image
                };
                if cfg.flip && rng.gen_f64() < 0.5 {
                    patch = hflip(&patch);
                }
                out.data_mut()[row * volume..(row + 1) * volume].copy_from_slice(patch.data());
            }
            Ok(out)
        }
    }
}

fn pick_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// Trains a fresh flat network on the remainder split. Initialization,
/// batch order, and augmentation each own a substream of `cfg.seed`.
pub fn pretrain_building_block(
    spec: &NetworkSpec,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    logger: &mut dyn TrainLogger,
) -> Result<Network> {
    cfg.validate()?;
    if images.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let mut net = Network::init(spec.clone(), &mut Rng::substream(cfg.seed, 0))?;
    let mut sampler = BatchSampler::new(labels.len(), Rng::substream(cfg.seed, 1));
    let mut aug = Rng::substream(cfg.seed, 2);
    let mut opt = OptimizerState::new(&net.params, cfg.schedule(), cfg.momentum, cfg.weight_decay);
    for it in 0..cfg.iterations {
        let idx = sampler.next(cfg.batch);
        let batch = augment_gather(images, &idx, net.spec.input, cfg, &mut aug)?;
        let batch_labels = pick_labels(labels, &idx);
        let acts = net.forward(&batch);
        let probs = acts.last().unwrap();
        let (loss, grad) = multinomial_logistic(probs, &batch_labels);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: it,
                detail: "non-finite training loss".into(),
            });
        }
        let lr = opt.lr();
        let err = top1_error(probs, &batch_labels);
        let (grads, _) = net.backward_range(0, &acts, &grad);
        opt.step(&mut net.params, &grads)?;
        if should_log(cfg, it) {
            logger.log(&LogRecord {
                stage: "pretrain-block".into(),
                iteration: it + 1,
                lr,
                loss,
                consistency_term: 0.0,
                top1_train_err: err,
            })?;
        }
    }
    Ok(net)
}

/// Position of each partial-set member, for reindexing fine labels.
fn partial_position(partial_set: &[usize], label: usize) -> Option<usize> {
    partial_set.binary_search(&label).ok()
}

/// Trains fine component k's rear layers on exactly the images whose label
/// falls in its partial set, labels reindexed into the set. Shared and
/// coarse parameters are never touched; the rng substreams are keyed on k
/// so components can train in any order with identical results.
pub fn pretrain_fine_component(
    model: &mut HdcnnModel,
    k: usize,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    logger: &mut dyn TrainLogger,
) -> Result<()> {
    cfg.validate()?;
    if k >= model.fine.len() {
        return Err(Error::rejected(format!("fine component {k} out of range")));
    }
    let partial_set = model.fine[k].partial_set.clone();
    let idx: Vec<usize> = (0..labels.len())
        .filter(|&i| partial_position(&partial_set, labels[i]).is_some())
        .collect();
    if idx.is_empty() {
        return Err(Error::rejected(format!(
            "no training images for coarse category {}",
            k + 1
        )));
    }
    let local_labels: Vec<usize> = idx
        .iter()
        .map(|&i| partial_position(&partial_set, labels[i]).unwrap())
        .collect();

    // With no augmentation the frozen shared prefix maps each image to the
    // same activations every epoch, so compute them once.
    let premapped = if cfg.crop.is_none() && !cfg.flip {
        let subset = gather_rows(images, &idx);
        Some(model.shared.forward(&subset).pop().unwrap())
    } else {
        None
    };

    let mut sampler = BatchSampler::new(idx.len(), Rng::substream(cfg.seed, 100 + k as u64));
    let mut aug = Rng::substream(cfg.seed, 200 + k as u64);
    let stage = format!("pretrain-fine-{:03}", k + 1);
    let rear = &model.fine[k].rear;
    let mut opt = OptimizerState::new(&rear.params, cfg.schedule(), cfg.momentum, cfg.weight_decay);
    for it in 0..cfg.iterations {
        let sel = sampler.next(cfg.batch);
        let shared_out = match &premapped {
            Some(all) => gather_rows(all, &sel),
            None => {
                let abs: Vec<usize> = sel.iter().map(|&p| idx[p]).collect();
                let batch =
                    augment_gather(images, &abs, model.block_spec.input, cfg, &mut aug)?;
                model.shared.forward(&batch).pop().unwrap()
            }
        };
        let batch_labels = pick_labels(&local_labels, &sel);
        let rear = &model.fine[k].rear;
        let acts = rear.forward(&shared_out);
        let probs = acts.last().unwrap();
        let (loss, grad) = multinomial_logistic(probs, &batch_labels);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: it,
                detail: format!("non-finite loss in {stage}"),
            });
        }
        let lr = opt.lr();
        let err = top1_error(probs, &batch_labels);
        let (grads, _) = rear.backward(&acts, &grad);
        opt.step(&mut model.fine[k].rear.params, &grads)?;
        if should_log(cfg, it) {
            logger.log(&LogRecord {
                stage: stage.clone(),
                iteration: it + 1,
                lr,
                loss,
                consistency_term: 0.0,
                top1_train_err: err,
            })?;
        }
    }
    Ok(())
}

/// Gradients in the model's parameter layout.
#[derive(Clone, Debug)]
pub struct HdcnnGradients {
    pub shared: Vec<Vec<Tensor>>,
    pub coarse: Vec<Vec<Tensor>>,
    pub fine: Vec<Vec<Vec<Tensor>>>,
}

/// Loss, diagnostics, and gradients for one batch.
#[derive(Clone, Debug)]
pub struct HdcnnBatchEval {
    pub loss: f64,
    pub consistency_term: f64,
    /// Final averaged predictions, `[n, C]`.
    pub probs: Tensor,
    /// Batch-mean coarse weights, length K.
    pub coarse_mean: Vec<f64>,
    pub grads: HdcnnGradients,
}

/// Sub-batch size for gradient accumulation. Fixed so the reduction order
/// (and hence every bit of the result) is independent of worker count.
pub const GRAD_CHUNK: usize = 8;

fn zeros_like(groups: &[Vec<Tensor>]) -> Vec<Vec<Tensor>> {
    groups
        .iter()
        .map(|g| g.iter().map(|t| Tensor::zeros(t.shape())).collect())
        .collect()
}

fn accumulate(total: &mut [Vec<Tensor>], part: &[Vec<Tensor>]) {
    for (tg, pg) in total.iter_mut().zip(part) {
        for (t, p) in tg.iter_mut().zip(pg) {
            t.add_assign(p);
        }
    }
}

/// Unnormalized coarse masses and their row sums for one C-way batch.
fn aggregate_raw(q: &Tensor, hierarchy: &Hierarchy) -> (Tensor, Vec<f64>) {
    let n = q.shape()[0];
    let kk = hierarchy.k;
    let mut a = Tensor::zeros(&[n, kk]);
    let mut totals = vec![0.0; n];
    for i in 0..n {
        let row = q.row(i);
        let arow = a.row_mut(i);
        for (j, coarse) in hierarchy.overlapping.iter().enumerate() {
            for &k in coarse {
                arow[k] += row[j];
            }
        }
        totals[i] = arow.iter().sum();
    }
    (a, totals)
}

/// The fine-tuning objective on one batch: mean negative log-likelihood of
/// the averaged prediction plus the coarse-consistency penalty, with
/// analytic gradients for every parameter group. No conditional masking:
/// every component sees every image. Gradients flow through the fine
/// components, through the averaging weights (numerator and denominator),
/// and back through the normalization and aggregation into the coarse rear
/// and shared layers.
pub fn hdcnn_loss_and_grad(
    model: &HdcnnModel,
    batch: &Tensor,
    labels: &[usize],
    targets: &ConsistencyTargets,
    lambda: f64,
) -> Result<HdcnnBatchEval> {
    let n = batch.shape()[0];
    let c = model.label_count();
    let kk = model.coarse_count();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
    }
    if targets.t.len() != kk {
        return Err(Error::shape(format!(
            "{} consistency targets for {kk} coarse categories",
            targets.t.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::rejected("consistency weight must be >= 0"));
    }

    // First pass: coarse weights and averaged predictions for the whole
    // batch; the consistency gradient needs the batch-mean weights before
    // any parameter gradient can be formed.
    let mut b = Tensor::zeros(&[n, kk]);
    let mut p = Tensor::zeros(&[n, c]);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + GRAD_CHUNK).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        let sub = gather_rows(batch, &idx);
        let shared_out = model.shared.forward(&sub).pop().unwrap();
        let q = model.coarse.forward(&shared_out).pop().unwrap();
        let (a, totals) = aggregate_raw(&q, &model.hierarchy);
        for (row, i) in (lo..hi).enumerate() {
            let arow = a.row(row);
            let brow = b.row_mut(i);
            for k in 0..kk {
                brow[k] = arow[k] / totals[row];
            }
        }
        for (k, component) in model.fine.iter().enumerate() {
            let pk = component.rear.forward(&shared_out).pop().unwrap();
            for (row, i) in (lo..hi).enumerate() {
                let w = b.at(i, k);
                let src = pk.row(row);
                let dst = p.row_mut(i);
                for (pos, &j) in component.partial_set.iter().enumerate() {
                    dst[j] += w * src[pos];
                }
            }
        }
        // Averaging denominator: the row sum of B (1 up to rounding).
        for i in lo..hi {
            let s: f64 = b.row(i).iter().sum();
            let dst = p.row_mut(i);
            for v in dst {
                *v /= s;
            }
        }
        lo = hi;
    }
    if !p.all_finite() {
        return Err(Error::state("non-finite predictions in the loss"));
    }
    let mut coarse_mean = vec![0.0; kk];
    for i in 0..n {
        let row = b.row(i);
        for k in 0..kk {
            coarse_mean[k] += row[k] / n as f64;
        }
    }
    let (cls_loss, g) = multinomial_logistic(&p, labels);
    let consistency_term = 0.5
        * lambda
        * targets
            .t
            .iter()
            .zip(&coarse_mean)
            .map(|(t, m)| (t - m) * (t - m))
            .sum::<f64>();
    let loss = cls_loss + consistency_term;
    if !loss.is_finite() {
        return Err(Error::state("non-finite loss"));
    }

    // Second pass: recompute each chunk's activations and push gradients
    // back. Chunks accumulate in index order.
    let mut grads = HdcnnGradients {
        shared: zeros_like(&model.shared.params),
        coarse: zeros_like(&model.coarse.params),
        fine: model.fine.iter().map(|f| zeros_like(&f.rear.params)).collect(),
    };
    let mut lo = 0;
    while lo < n {
        let hi = (lo + GRAD_CHUNK).min(n);
        let ch = hi - lo;
        let idx: Vec<usize> = (lo..hi).collect();
        let sub = gather_rows(batch, &idx);
        let shared_acts = model.shared.forward(&sub);
        let shared_out = shared_acts.last().unwrap();
        let coarse_acts = model.coarse.forward(shared_out);
        let q = coarse_acts.last().unwrap();
        let (_, totals) = aggregate_raw(q, &model.hierarchy);
        let fine_acts: Vec<Vec<Tensor>> = model
            .fine
            .iter()
            .map(|f| f.rear.forward(shared_out))
            .collect();

        // Per-example gradients into the coarse weights and each fine
        // component's output.
        let mut d_b = Tensor::zeros(&[ch, kk]);
        let mut d_fine: Vec<Tensor> = model
            .fine
            .iter()
            .map(|f| Tensor::zeros(&[ch, f.partial_set.len()]))
            .collect();
        for row in 0..ch {
            let i = lo + row;
            let y = labels[i];
            let gval = g.at(i, y);
            let brow = b.row(i);
            let s: f64 = brow.iter().sum();
            let piy = p.at(i, y);
            for (k, component) in model.fine.iter().enumerate() {
                let pk_iy = match partial_position(&component.partial_set, y) {
                    Some(pos) => {
                        let v = fine_acts[k].last().unwrap().at(row, pos);
                        d_fine[k].set(row, pos, gval * brow[k] / s);
                        v
                    }
                    None => 0.0,
                };
                let classification = gval * (pk_iy - piy) / s;
                let consistency = -(lambda / n as f64) * (targets.t[k] - coarse_mean[k]);
                d_b.set(row, k, classification + consistency);
            }
        }
        // Through the normalization B = a / T ...
        let mut d_q = Tensor::zeros(&[ch, c]);
        for row in 0..ch {
            let i = lo + row;
            let brow = b.row(i);
            let dbrow = d_b.row(row);
            let inner: f64 = dbrow.iter().zip(brow).map(|(d, bv)| d * bv).sum();
            let mut d_a = vec![0.0; kk];
            for k in 0..kk {
                d_a[k] = (dbrow[k] - inner) / totals[row];
            }
            // ... and the aggregation a_k = sum of q over member classes.
            let dqrow = d_q.row_mut(row);
            for (j, coarse) in model.hierarchy.overlapping.iter().enumerate() {
                dqrow[j] = coarse.iter().map(|&k| d_a[k]).sum();
            }
        }

        let (coarse_grads, d_shared_coarse) = model.coarse.backward(&coarse_acts, &d_q);
        accumulate(&mut grads.coarse, &coarse_grads);
        let mut d_shared = d_shared_coarse;
        for (k, component) in model.fine.iter().enumerate() {
            let (fine_grads, d_shared_k) = component.rear.backward(&fine_acts[k], &d_fine[k]);
            accumulate(&mut grads.fine[k], &fine_grads);
            d_shared.add_assign(&d_shared_k);
        }
        let (shared_grads, _) = model.shared.backward(&shared_acts, &d_shared);
        accumulate(&mut grads.shared, &shared_grads);
        lo = hi;
    }

    Ok(HdcnnBatchEval {
        loss,
        consistency_term,
        probs: p,
        coarse_mean,
        grads,
    })
}

/// Fine-tunes every parameter of the assembled model by SGD on the
/// consistency-regularized loss.
pub fn finetune(
    model: &mut HdcnnModel,
    images: &Tensor,
    labels: &[usize],
    targets: &ConsistencyTargets,
    cfg: &TrainConfig,
    logger: &mut dyn TrainLogger,
) -> Result<()> {
    cfg.validate()?;
    if images.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let mut sampler = BatchSampler::new(labels.len(), Rng::substream(cfg.seed, 3));
    let mut aug = Rng::substream(cfg.seed, 4);
    // One optimizer per component, stepped in lockstep: momentum buffers
    // are per-tensor, so this matches a single flat optimizer exactly.
    let schedule = cfg.schedule();
    let mut opt_shared = OptimizerState::new(
        &model.shared.params,
        schedule,
        cfg.momentum,
        cfg.weight_decay,
    );
    let mut opt_coarse = OptimizerState::new(
        &model.coarse.params,
        schedule,
        cfg.momentum,
        cfg.weight_decay,
    );
    let mut opt_fine: Vec<OptimizerState> = model
        .fine
        .iter()
        .map(|f| OptimizerState::new(&f.rear.params, schedule, cfg.momentum, cfg.weight_decay))
        .collect();
    for it in 0..cfg.iterations {
        let idx = sampler.next(cfg.batch);
        let batch = augment_gather(images, &idx, model.block_spec.input, cfg, &mut aug)?;
        let batch_labels = pick_labels(labels, &idx);
        let eval = hdcnn_loss_and_grad(model, &batch, &batch_labels, targets, cfg.lambda)
            .map_err(|e| match e {
                Error::StateError(detail) => Error::TrainingDiverged {
                    iteration: it,
                    detail,
                },
                other => other,
            })?;
        let lr = opt_shared.lr();
        let err = top1_error(&eval.probs, &batch_labels);
        opt_shared.step(&mut model.shared.params, &eval.grads.shared)?;
        opt_coarse.step(&mut model.coarse.params, &eval.grads.coarse)?;
        for (k, opt) in opt_fine.iter_mut().enumerate() {
            opt.step(&mut model.fine[k].rear.params, &eval.grads.fine[k])?;
        }
        if should_log(cfg, it) {
            logger.log(&LogRecord {
                stage: "finetune".into(),
                iteration: it + 1,
                lr,
                loss: eval.loss,
                consistency_term: eval.consistency_term,
                top1_train_err: err,
            })?;
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the averaged predictions alone; the
/// λ=0 objective, for before/after comparisons.
pub fn classification_loss(model: &HdcnnModel, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = model.full_forward(images, crate::runtime::ExecPolicy::All)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= pred.p.at(i, y).max(LOG_LOSS_FLOOR).ln();
    }
    Ok(loss / labels.len() as f64)
}
