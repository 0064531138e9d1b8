//! Inference-time machinery: conditional execution of fine components,
//! product-quantization compression of rear parameter matrices, multi-view
//! prediction, and evaluation reports.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use crate::engine::kmeans::kmeans;
use crate::engine::layers::{self, LayerSpec, Shape};
use crate::engine::loss::{top1_error, topk_error};
use crate::engine::network::Network;
use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::{Chain, FinalPrediction, HdcnnModel, PqEntry};

/// Which fine components to run for each image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExecPolicy {
    /// Every component, every image.
    All,
    /// Component k only when its coarse weight clears `1/(beta K)`.
    /// `beta = +inf` drives the threshold to zero and so runs everything;
    /// it is accepted as the explicit "no pruning" limit.
    Threshold { beta: f64 },
}

impl ExecPolicy {
    pub fn threshold(beta: f64) -> Result<ExecPolicy> {
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::rejected(format!(
                "beta must be positive, got {beta}"
            )));
        }
        Ok(ExecPolicy::Threshold { beta })
    }

    /// Component ids to evaluate for one coarse row, ascending, never empty.
    pub fn mask(&self, b_row: &[f64]) -> Vec<usize> {
        match *self {
            ExecPolicy::All => (0..b_row.len()).collect(),
            ExecPolicy::Threshold { beta } => conditional_mask(b_row, beta),
        }
    }
}

/// `{k : B_ik >= 1/(beta K)}`. An empty mask falls back to the single
/// largest-weight component (lowest id on ties) so one is always evaluated.
pub fn conditional_mask(b_row: &[f64], beta: f64) -> Vec<usize> {
    let k = b_row.len();
    let bt = 1.0 / (beta * k as f64);
    let mask: Vec<usize> = (0..k).filter(|&i| b_row[i] >= bt).collect();
    if !mask.is_empty() {
        return mask;
    }
    let mut best = 0;
    for i in 1..k {
        if b_row[i] > b_row[best] {
            best = i;
        }
    }
    vec![best]
}

/// A product-quantized m-by-n matrix: per horizontal segment of width `s`,
/// the rows are k-means clustered; `indices` keeps each row's center id and
/// `centers` the center values.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub k: usize,
    /// m x (n/s) center ids, row-major.
    pub indices: Vec<u8>,
    /// k x n center values, row-major; segment i owns columns
    /// `[i*s, (i+1)*s)` of every center row.
    pub centers: Vec<f32>,
}

pub const HDQ_MAGIC: &[u8; 4] = b"HDQ1";
/// Magic plus four u32 dimensions.
pub const HDQ_HEADER_BYTES: usize = 20;

impl QuantizedMatrix {
    pub fn segments(&self) -> usize {
        self.n / self.s
    }

    /// Serialized size in bytes: header + 1 byte per index + 4 per center.
    pub fn byte_size(&self) -> usize {
        HDQ_HEADER_BYTES + self.indices.len() + 4 * self.centers.len()
    }

    /// The decompressed approximation of the original matrix.
    pub fn reconstruct(&self) -> Tensor {
        let segs = self.segments();
        let mut w = Tensor::zeros(&[self.m, self.n]);
        for r in 0..self.m {
            let row = w.row_mut(r);
            for seg in 0..segs {
                let center = self.indices[r * segs + seg] as usize;
                let base = center * self.n + seg * self.s;
                for j in 0..self.s {
                    row[seg * self.s + j] = self.centers[base + j] as f64;
                }
            }
        }
        w
    }
}

/// Compresses a weight matrix by clustering each width-`s` column segment's
/// rows into `k` centers. Deterministic given `rng`; segments consume the
/// stream in column order.
pub fn pq_compress(w: &Tensor, s: usize, k: usize, rng: &mut Rng) -> Result<QuantizedMatrix> {
    let dims = w.shape();
    if dims.len() != 2 {
        return Err(Error::shape(format!(
            "product quantization needs a rank-2 matrix, got rank {}",
            dims.len()
        )));
    }
    let (m, n) = (dims[0], dims[1]);
    if s == 0 || n % s != 0 {
        return Err(Error::rejected(format!(
            "segment width {s} does not divide {n} columns"
        )));
    }
    if k == 0 || k > 256 {
        return Err(Error::rejected(format!(
            "center count {k} outside the 8-bit index range 1..=256"
        )));
    }
    if k > m {
        return Err(Error::rejected(format!(
            "center count {k} exceeds {m} rows"
        )));
    }
    let segs = n / s;
    let mut indices = vec![0u8; m * segs];
    let mut centers = vec![0f32; k * n];
    for seg in 0..segs {
        let mut pts = Tensor::zeros(&[m, s]);
        for r in 0..m {
            pts.row_mut(r).copy_from_slice(&w.row(r)[seg * s..(seg + 1) * s]);
        }
        let res = kmeans(&pts, k, rng)?;
        for r in 0..m {
            indices[r * segs + seg] = res.assignments[r] as u8;
        }
        for c in 0..k {
            for j in 0..s {
                centers[c * n + seg * s + j] = res.centers.at(c, j) as f32;
            }
        }
    }
    Ok(QuantizedMatrix {
        m,
        n,
        s,
        k,
        indices,
        centers,
    })
}

/// Storage ratio of the uncompressed single-precision matrix to the
/// quantized tables: 32mn / (32kn + 8mn/s).
pub fn compression_factor(m: usize, n: usize, s: usize, k: usize) -> f64 {
    let (m, n, s, k) = (m as f64, n as f64, s as f64, k as f64);
    32.0 * m * n / (32.0 * k * n + 8.0 * m * n / s)
}

/// `y = W_hat x` via per-segment center dot-product lookup: each segment
/// computes k dot products once and every row reuses its center's value.
pub fn pq_forward(q: &QuantizedMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != q.n {
        return Err(Error::shape(format!(
            "input length {} does not match {} columns",
            x.len(),
            q.n
        )));
    }
    let segs = q.segments();
    let mut lut = vec![0.0; q.k];
    let mut y = vec![0.0; q.m];
    for seg in 0..segs {
        let xs = &x[seg * q.s..(seg + 1) * q.s];
        for (c, slot) in lut.iter_mut().enumerate() {
            let base = c * q.n + seg * q.s;
            let mut dot = 0.0;
            for (j, &xv) in xs.iter().enumerate() {
                dot += q.centers[base + j] as f64 * xv;
            }
            *slot = dot;
        }
        for r in 0..q.m {
            y[r] += lut[q.indices[r * segs + seg] as usize];
        }
    }
    Ok(y)
}

/// `y = W_hat x` by materializing the reconstruction; the slow cross-check
/// path for pq_forward.
pub fn pq_forward_reconstruct(q: &QuantizedMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != q.n {
        return Err(Error::shape(format!(
            "input length {} does not match {} columns",
            x.len(),
            q.n
        )));
    }
    let w = q.reconstruct();
    let mut y = vec![0.0; q.m];
    for (r, slot) in y.iter_mut().enumerate() {
        let row = w.row(r);
        let mut dot = 0.0;
        for j in 0..q.n {
            dot += row[j] * x[j];
        }
        *slot = dot;
    }
    Ok(y)
}

pub fn save_quantized(path: &Path, q: &QuantizedMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(q.byte_size());
    buf.extend_from_slice(HDQ_MAGIC);
    for v in [q.m, q.n, q.s, q.k] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&q.indices);
    for v in &q.centers {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedMatrix> {
    let buf = std::fs::read(path)?;
    if buf.len() < HDQ_HEADER_BYTES || &buf[..4] != HDQ_MAGIC {
        return Err(Error::parse(0, "not a quantized-matrix file"));
    }
    let field = |i: usize| {
        u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
    };
    let (m, n, s, k) = (field(0), field(1), field(2), field(3));
    if s == 0 || n % s != 0 {
        return Err(Error::parse(
            12,
            format!("segment width {s} does not divide {n} columns"),
        ));
    }
    if k == 0 || k > 256 {
        return Err(Error::parse(16, format!("center count {k} out of range")));
    }
    let segs = n / s;
    let expect = HDQ_HEADER_BYTES + m * segs + 4 * k * n;
    if buf.len() != expect {
        return Err(Error::parse(
            buf.len() as u64,
            format!("expected {expect} bytes, found {}", buf.len()),
        ));
    }
    let indices = buf[HDQ_HEADER_BYTES..HDQ_HEADER_BYTES + m * segs].to_vec();
    for (i, &idx) in indices.iter().enumerate() {
        if idx as usize >= k {
            return Err(Error::parse(
                (HDQ_HEADER_BYTES + i) as u64,
                format!("center id {idx} out of range for k={k}"),
            ));
        }
    }
    let mut centers = Vec::with_capacity(k * n);
    let base = HDQ_HEADER_BYTES + m * segs;
    for i in 0..k * n {
        centers.push(f32::from_le_bytes(
            buf[base + 4 * i..base + 4 * i + 4].try_into().unwrap(),
        ));
    }
    Ok(QuantizedMatrix {
        m,
        n,
        s,
        k,
        indices,
        centers,
    })
}

/// Component half of a quantized-layer name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PqComponent {
    Coarse,
    Fine(usize),
}

/// `coarse/<layer>` or `fine<NNN>/<layer>`, layer index 1-based on disk.
pub fn pq_layer_name(component: PqComponent, layer: usize) -> String {
    match component {
        PqComponent::Coarse => format!("coarse/{}", layer + 1),
        PqComponent::Fine(k) => format!("fine{:03}/{}", k + 1, layer + 1),
    }
}

pub fn parse_pq_layer_name(name: &str) -> Result<(PqComponent, usize)> {
    let bad = || Error::rejected(format!("malformed quantized-layer name `{name}`"));
    let (comp, layer) = name.split_once('/').ok_or_else(bad)?;
    let layer: usize = layer.parse().map_err(|_| bad())?;
    if layer == 0 {
        return Err(bad());
    }
    let component = if comp == "coarse" {
        PqComponent::Coarse
    } else if let Some(id) = comp.strip_prefix("fine") {
        let id: usize = id.parse().map_err(|_| bad())?;
        if id == 0 {
            return Err(bad());
        }
        PqComponent::Fine(id - 1)
    } else {
        return Err(bad());
    };
    Ok((component, layer - 1))
}

/// File holding one quantized layer inside a bundle directory.
pub fn pq_file_name(component: PqComponent, layer: usize) -> String {
    match component {
        PqComponent::Coarse => format!("pq_coarse_{}.hdq", layer + 1),
        PqComponent::Fine(k) => format!("pq_fine{:03}_{}.hdq", k + 1, layer + 1),
    }
}

/// A model whose listed rear fully-connected weights run through their
/// quantized tables instead of the original parameters.
#[derive(Debug)]
pub struct PqModel<'a> {
    pub model: &'a HdcnnModel,
    pub tables: HashMap<(PqComponent, usize), QuantizedMatrix>,
}

fn component_chain(model: &HdcnnModel, component: PqComponent) -> Result<&Chain> {
    match component {
        PqComponent::Coarse => Ok(&model.coarse),
        PqComponent::Fine(k) => model
            .fine
            .get(k)
            .map(|f| &f.rear)
            .ok_or_else(|| Error::rejected(format!("fine component {} out of range", k + 1))),
    }
}

/// Checks that a pq entry points at a fully-connected layer and returns its
/// weight matrix.
pub fn pq_target_weight(
    model: &HdcnnModel,
    component: PqComponent,
    layer: usize,
) -> Result<&Tensor> {
    let chain = component_chain(model, component)?;
    let spec = chain.layers.get(layer).ok_or_else(|| {
        Error::rejected(format!(
            "layer {} out of range for {}",
            layer + 1,
            pq_layer_name(component, 0).split('/').next().unwrap()
        ))
    })?;
    if !matches!(spec, LayerSpec::FullyConnected { .. }) {
        return Err(Error::rejected(format!(
            "quantized layer {} is not fully-connected",
            pq_layer_name(component, layer)
        )));
    }
    Ok(&chain.params[layer][0])
}

/// Builds quantized tables for every manifest entry. Each entry's k-means
/// runs on its own stream seeded from the descriptor.
pub fn compress_model<'a>(model: &'a HdcnnModel, entries: &[PqEntry]) -> Result<PqModel<'a>> {
    let mut tables = HashMap::new();
    for entry in entries {
        let (component, layer) = parse_pq_layer_name(&entry.layer)?;
        let w = pq_target_weight(model, component, layer)?;
        let q = pq_compress(w, entry.s, entry.k, &mut Rng::new(entry.seed))?;
        if tables.insert((component, layer), q).is_some() {
            return Err(Error::rejected(format!(
                "duplicate quantization entry for {}",
                entry.layer
            )));
        }
    }
    Ok(PqModel { model, tables })
}

/// Rear weight matrices eligible for quantization, largest element count
/// first (coarse before fine, lower component first on ties). Shared layers
/// are never quantized.
pub fn pq_candidates(model: &HdcnnModel) -> Vec<(PqComponent, usize, usize)> {
    let mut out = Vec::new();
    let mut push = |component: PqComponent, chain: &Chain| {
        for (i, spec) in chain.layers.iter().enumerate() {
            if matches!(spec, LayerSpec::FullyConnected { .. }) {
                out.push((component, i, chain.params[i][0].len()));
            }
        }
    };
    push(PqComponent::Coarse, &model.coarse);
    for f in &model.fine {
        push(PqComponent::Fine(f.k), &f.rear);
    }
    out.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    out
}

impl PqModel<'_> {
    /// Runs a component chain, swapping quantized fully-connected layers in
    /// for their original weights.
    fn chain_forward_pq(
        &self,
        component: PqComponent,
        chain: &Chain,
        input: &Tensor,
    ) -> Result<Tensor> {
        let mut cur = input.clone();
        for (i, spec) in chain.layers.iter().enumerate() {
            cur = match self.tables.get(&(component, i)) {
                Some(q) => {
                    let n = cur.shape()[0];
                    let bias = &chain.params[i][1];
                    let mut out = Tensor::zeros(&[n, q.m]);
                    for r in 0..n {
                        let y = pq_forward(q, cur.row(r))?;
                        let dst = out.row_mut(r);
                        for (j, v) in y.iter().enumerate() {
                            dst[j] = v + bias.data()[j];
                        }
                    }
                    out
                }
                None => layers::forward(spec, &chain.shapes[i], &chain.params[i], &cur),
            };
        }
        Ok(cur)
    }

    pub fn full_forward(&self, batch: &Tensor, policy: ExecPolicy) -> Result<FinalPrediction> {
        self.model.full_forward_with(
            batch,
            policy,
            |shared_out| self.chain_forward_pq(PqComponent::Coarse, &self.model.coarse, shared_out),
            |k, shared_sub| {
                self.chain_forward_pq(PqComponent::Fine(k), &self.model.fine[k].rear, shared_sub)
            },
        )
    }

    /// Bytes the quantized model occupies under 4-byte-per-parameter
    /// accounting: unquantized parameters stay at 4 bytes each, quantized
    /// matrices shrink to their table sizes.
    pub fn compressed_param_bytes(&self) -> usize {
        let mut bytes = 4 * self.model.param_count();
        for ((component, layer), q) in &self.tables {
            let chain = component_chain(self.model, *component).unwrap();
            bytes -= 4 * chain.params[*layer][0].len();
            bytes += q.byte_size();
        }
        bytes
    }
}

/// Flips a `[c, h, w]` image left-right.
pub fn hflip(image: &Tensor) -> Tensor {
    let dims = image.shape();
    assert_eq!(dims.len(), 3, "hflip expects one [c,h,w] image");
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = image.data()[(ch * h + y) * w + x];
                out.data_mut()[(ch * h + y) * w + (w - 1 - x)] = v;
            }
        }
    }
    out
}

/// Copies the `[ch, cw]` window at (top, left) out of a `[c, h, w]` image.
pub fn crop(image: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Tensor {
    let dims = image.shape();
    assert_eq!(dims.len(), 3, "crop expects one [c,h,w] image");
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    assert!(top + ch <= h && left + cw <= w, "crop window out of bounds");
    let mut out = Tensor::zeros(&[c, ch, cw]);
    for chn in 0..c {
        for y in 0..ch {
            let src = (chn * h + top + y) * w + left;
            let dst = (chn * ch + y) * cw;
            out.data_mut()[dst..dst + cw].copy_from_slice(&image.data()[src..src + cw]);
        }
    }
    out
}

/// The 10 test views of one `[c, h, w]` image: four corner crops plus the
/// center crop, each followed by its horizontal reflection, stacked into
/// `[10, c, ch, cw]`.
pub fn ten_views(image: &Tensor, ch: usize, cw: usize) -> Result<Tensor> {
    let dims = image.shape();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "expected one [c,h,w] image, got rank {}",
            dims.len()
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if ch > h || cw > w {
        return Err(Error::rejected(format!(
            "crop {ch}x{cw} exceeds image {h}x{w}"
        )));
    }
    let offsets = [
        (0, 0),
        (0, w - cw),
        (h - ch, 0),
        (h - ch, w - cw),
        ((h - ch) / 2, (w - cw) / 2),
    ];
    let mut out = Tensor::zeros(&[10, c, ch, cw]);
    let volume = c * ch * cw;
    for (v, &(top, left)) in offsets.iter().enumerate() {
        let patch = crop(image, top, left, ch, cw);
        out.data_mut()[2 * v * volume..(2 * v + 1) * volume].copy_from_slice(patch.data());
        let flipped = hflip(&patch);
        out.data_mut()[(2 * v + 1) * volume..(2 * v + 2) * volume]
            .copy_from_slice(flipped.data());
    }
    Ok(out)
}

/// Averaged prediction over the 10 views. `predict` maps a `[10, ...]`
/// batch to per-view probability rows.
pub fn multiview_predict<F>(predict: F, image: &Tensor, ch: usize, cw: usize) -> Result<Vec<f64>>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let views = ten_views(image, ch, cw)?;
    let probs = predict(&views)?;
    if probs.shape()[0] != 10 {
        return Err(Error::shape(format!(
            "view predictions have {} rows, expected 10",
            probs.shape()[0]
        )));
    }
    let c = probs.shape()[1];
    let mut mean = vec![0.0; c];
    for v in 0..10 {
        let row = probs.row(v);
        for j in 0..c {
            mean[j] += row[j] / 10.0;
        }
    }
    Ok(mean)
}

/// How each test image is presented to the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Center crop to the input size (identity when sizes match).
    Single,
    /// Average of the 10 crop/flip views.
    TenView,
}

/// What evaluate runs: the flat building block, the hierarchical model, or
/// the hierarchical model with quantized rear layers.
pub enum EvalTarget<'a> {
    Block(&'a Network),
    Hdcnn(&'a HdcnnModel, ExecPolicy),
    Quantized(&'a PqModel<'a>, ExecPolicy),
}

impl EvalTarget<'_> {
    fn input_shape(&self) -> Shape {
        match self {
            EvalTarget::Block(net) => net.spec.input,
            EvalTarget::Hdcnn(model, _) => model.block_spec.input,
            EvalTarget::Quantized(pq, _) => pq.model.block_spec.input,
        }
    }

    fn label_count(&self) -> usize {
        match self {
            EvalTarget::Block(net) => net.label_count(),
            EvalTarget::Hdcnn(model, _) => model.label_count(),
            EvalTarget::Quantized(pq, _) => pq.model.label_count(),
        }
    }

    /// Probabilities plus executed-component count per row.
    fn predict(&self, batch: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let n = batch.shape()[0];
        match self {
            EvalTarget::Block(net) => Ok((net.predict(batch), vec![1; n])),
            EvalTarget::Hdcnn(model, policy) => {
                let pred = model.full_forward(batch, *policy)?;
                let counts = pred.executed.iter().map(Vec::len).collect();
                Ok((pred.p, counts))
            }
            EvalTarget::Quantized(pq, policy) => {
                let pred = pq.full_forward(batch, *policy)?;
                let counts = pred.executed.iter().map(Vec::len).collect();
                Ok((pred.p, counts))
            }
        }
    }

    /// (raw, compressed) parameter bytes at 4 bytes per value.
    fn param_bytes(&self) -> (usize, usize) {
        match self {
            EvalTarget::Block(net) => {
                let raw = 4 * net.param_count();
                (raw, raw)
            }
            EvalTarget::Hdcnn(model, _) => {
                let raw = 4 * model.param_count();
                (raw, raw)
            }
            EvalTarget::Quantized(pq, _) => {
                (4 * pq.model.param_count(), pq.compressed_param_bytes())
            }
        }
    }
}

/// Evaluation summary; everything but the wall time is deterministic.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Percent in [0, 100].
    pub top1_err: f64,
    /// Percent; absent when fewer than 5 categories.
    pub top5_err: Option<f64>,
    /// Mean fine components run per prediction row.
    pub mean_executed: f64,
    pub wall_time_sec: f64,
    pub raw_param_bytes: usize,
    pub compressed_param_bytes: usize,
}

/// Prediction mini-batch size used when timing.
pub const TIMING_BATCH: usize = 50;

/// Runs the target over a labeled set. Images are `[n, c, h, w]` (or
/// `[n, d]` for flat inputs) and may be larger than the input size, in
/// which case views are cropped out of them; labels are 0-based.
pub fn evaluate(
    target: &EvalTarget,
    images: &Tensor,
    labels: &[usize],
    view: ViewMode,
) -> Result<EvalReport> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::rejected("empty evaluation set"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let c = target.label_count();
    let mut probs = Tensor::zeros(&[n, c]);
    let mut executed = 0usize;
    let mut rows = 0usize;
    let start = Instant::now();
    match (view, target.input_shape()) {
        (ViewMode::Single, input) => {
            let mut lo = 0;
            while lo < n {
                let hi = (lo + TIMING_BATCH).min(n);
                let idx: Vec<usize> = (lo..hi).collect();
                let batch = center_crop_batch(images, &idx, input)?;
                let (p, counts) = target.predict(&batch)?;
                for (row, i) in (lo..hi).enumerate() {
                    probs.row_mut(i).copy_from_slice(p.row(row));
                }
                executed += counts.iter().sum::<usize>();
                rows += hi - lo;
                lo = hi;
            }
        }
        (ViewMode::TenView, Shape::Chw { c: _, h, w }) => {
            for i in 0..n {
                let image = image_at(images, i)?;
                let views = ten_views(&image, h, w)?;
                let (p, counts) = target.predict(&views)?;
                let dst = probs.row_mut(i);
                for v in 0..10 {
                    let row = p.row(v);
                    for j in 0..c {
                        dst[j] += row[j] / 10.0;
                    }
                }
                executed += counts.iter().sum::<usize>();
                rows += 10;
            }
        }
        (ViewMode::TenView, Shape::Flat { .. }) => {
            return Err(Error::rejected(
                "multi-view testing needs a spatial input layout",
            ))
        }
    }
    let wall_time_sec = start.elapsed().as_secs_f64();
    let (raw_param_bytes, compressed_param_bytes) = target.param_bytes();
    Ok(EvalReport {
        top1_err: 100.0 * top1_error(&probs, labels),
        top5_err: if c >= 5 {
            Some(100.0 * topk_error(&probs, labels, 5))
        } else {
            None
        },
        mean_executed: executed as f64 / rows as f64,
        wall_time_sec,
        raw_param_bytes,
        compressed_param_bytes,
    })
}

/// One `[c, h, w]` image copied out of an `[n, c, h, w]` batch.
pub fn image_at(images: &Tensor, i: usize) -> Result<Tensor> {
    let dims = images.shape();
    if dims.len() != 4 {
        return Err(Error::shape(format!(
            "expected an [n,c,h,w] batch, got rank {}",
            dims.len()
        )));
    }
    let volume: usize = dims[1..].iter().product();
    let mut out = Tensor::zeros(&dims[1..]);
    out.data_mut()
        .copy_from_slice(&images.data()[i * volume..(i + 1) * volume]);
    Ok(out)
}

/// Gathers the listed images and center-crops them to the input shape.
pub fn center_crop_batch(images: &Tensor, idx: &[usize], input: Shape) -> Result<Tensor> {
    match input {
        Shape::Flat { d } => {
            if images.shape().len() != 2 || images.shape()[1] != d {
                return Err(Error::shape(format!(
                    "expected [n, {d}] inputs, got {:?}",
                    images.shape()
                )));
            }
            Ok(crate::model::gather_rows(images, idx))
        }
        Shape::Chw { c, h, w } => {
            let dims = images.shape();
            if dims.len() != 4 || dims[1] != c {
                return Err(Error::shape(format!(
                    "expected [n, {c}, _, _] inputs, got {dims:?}"
                )));
            }
            let (ih, iw) = (dims[2], dims[3]);
            if h > ih || w > iw {
                return Err(Error::rejected(format!(
                    "input {h}x{w} exceeds stored images {ih}x{iw}"
                )));
            }
            if (ih, iw) == (h, w) {
                return Ok(crate::model::gather_rows(images, idx));
            }
            let mut out = Tensor::zeros(&[idx.len(), c, h, w]);
            let volume = c * h * w;
            for (row, &i) in idx.iter().enumerate() {
                let image = image_at(images, i)?;
                let patch = crop(&image, (ih - h) / 2, (iw - w) / 2, h, w);
                out.data_mut()[row * volume..(row + 1) * volume].copy_from_slice(patch.data());
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::network::NetworkSpec;
    use crate::hierarchy::extend_overlapping;
    use crate::model::assemble;

    #[test]
    fn mask_threshold_examples() {
        let b = [0.7, 0.2, 0.1];
        assert_eq!(conditional_mask(&b, 2.0), vec![0, 1]);
        assert_eq!(conditional_mask(&b, f64::INFINITY), vec![0, 1, 2]);
        // Threshold just above the max weight: fall back to the argmax.
        let beta = 1.0 / (3.0 * 0.7) - 0.01;
        assert_eq!(conditional_mask(&b, beta), vec![0]);
    }

    #[test]
    fn policy_validation() {
        assert!(ExecPolicy::threshold(0.0).is_err());
        assert!(ExecPolicy::threshold(-1.0).is_err());
        assert!(ExecPolicy::threshold(f64::NAN).is_err());
        assert!(ExecPolicy::threshold(f64::INFINITY).is_ok());
        assert_eq!(ExecPolicy::All.mask(&[0.5, 0.5]), vec![0, 1]);
    }

    fn matrix(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[rows.len(), n], data).unwrap()
    }

    #[test]
    fn identical_rows_reconstruct_exactly() {
        let row = [1.0, -2.0, 3.0, 4.0, 0.5, -0.5, 2.0, 1.5];
        let rows: Vec<&[f64]> = vec![&row; 6];
        let w = matrix(&rows);
        let q = pq_compress(&w, 4, 3, &mut Rng::new(7)).unwrap();
        assert_eq!(q.reconstruct(), w);
    }

    #[test]
    fn distinct_rows_with_matching_k_are_lossless() {
        // Four distinct integer-valued rows repeated twice; k=4 covers every
        // distinct value in each segment.
        let base: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![-1.0, 0.0, 2.0, 8.0],
            vec![5.0, 5.0, -3.0, 1.0],
            vec![0.0, 7.0, 6.0, -2.0],
        ];
        let rows: Vec<&[f64]> = base.iter().chain(base.iter()).map(|r| r.as_slice()).collect();
        let w = matrix(&rows);
        let q = pq_compress(&w, 2, 4, &mut Rng::new(3)).unwrap();
        assert_eq!(q.reconstruct(), w);
        // And forwarding equals the uncompressed product.
        let x = [0.5, -1.0, 2.0, 0.25];
        let y = pq_forward(&q, &x).unwrap();
        for r in 0..8 {
            let want: f64 = (0..4).map(|j| w.at(r, j) * x[j]).sum();
            assert!((y[r] - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn compress_validates_inputs() {
        let w = Tensor::zeros(&[4, 6]);
        assert!(pq_compress(&w, 4, 2, &mut Rng::new(0)).is_err()); // 4 does not divide 6
        assert!(pq_compress(&w, 2, 0, &mut Rng::new(0)).is_err());
        assert!(pq_compress(&w, 2, 5, &mut Rng::new(0)).is_err()); // k > m
        let big = Tensor::zeros(&[300, 4]);
        assert!(pq_compress(&big, 2, 257, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn reconstruction_sse_matches_cluster_sse() {
        let mut rng = Rng::new(11);
        let mut w = Tensor::zeros(&[12, 8]);
        for v in w.data_mut() {
            *v = rng.gen_normal();
        }
        let q = pq_compress(&w, 4, 3, &mut Rng::new(5)).unwrap();
        let recon = q.reconstruct();
        let sse_recon: f64 = w
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // Oracle: redo the clustering with the same stream and total the
        // within-cluster SSE per segment.
        let mut rng2 = Rng::new(5);
        let mut sse_kmeans = 0.0;
        for seg in 0..2 {
            let mut pts = Tensor::zeros(&[12, 4]);
            for r in 0..12 {
                pts.row_mut(r).copy_from_slice(&w.row(r)[seg * 4..(seg + 1) * 4]);
            }
            let res = kmeans(&pts, 3, &mut rng2).unwrap();
            for r in 0..12 {
                let center = res.centers.row(res.assignments[r]);
                for j in 0..4 {
                    let d = pts.at(r, j) - center[j];
                    sse_kmeans += d * d;
                }
            }
        }
        // The reconstruction stores centers in single precision, so allow
        // rounding slack.
        assert!(
            (sse_recon - sse_kmeans).abs() <= 1e-4 * sse_kmeans.max(1.0),
            "{sse_recon} vs {sse_kmeans}"
        );
    }

    /// Seed-matched runs share their center prefix (the first center is the
    /// same rng pick, the rest greedy), so extra centers only refine.
    #[test]
    fn more_centers_never_hurt_reconstruction() {
        for data_seed in [11u64, 12, 13] {
            let mut rng = Rng::new(data_seed);
            let mut w = Tensor::zeros(&[24, 8]);
            for v in w.data_mut() {
                *v = rng.gen_normal();
            }
            let mut prev = f64::INFINITY;
            for k in [1usize, 2, 4, 8, 16, 24] {
                let q = pq_compress(&w, 4, k, &mut Rng::new(5)).unwrap();
                let recon = q.reconstruct();
                let sse: f64 = w
                    .data()
                    .iter()
                    .zip(recon.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(
                    sse <= prev + 1e-9,
                    "data seed {data_seed}: sse {sse} at k={k} exceeds {prev}"
                );
                prev = sse;
            }
        }
    }

    #[test]
    fn dual_paths_agree_on_random_matrices() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let mut w = Tensor::zeros(&[8, 8]);
            for v in w.data_mut() {
                *v = rng.gen_normal();
            }
            let q = pq_compress(&w, 4, 8, &mut rng).unwrap();
            let x: Vec<f64> = (0..8).map(|_| rng.gen_normal()).collect();
            let fast = pq_forward(&q, &x).unwrap();
            let slow = pq_forward_reconstruct(&q, &x).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
        let q = pq_compress(&Tensor::zeros(&[4, 4]), 2, 2, &mut Rng::new(0)).unwrap();
        assert_eq!(pq_forward(&q, &[0.0; 4]).unwrap(), vec![0.0; 4]);
        assert!(pq_forward(&q, &[0.0; 3]).is_err());
    }

    #[test]
    fn factor_matches_published_instances() {
        assert!((compression_factor(1024, 3456, 3, 128) - 4.8).abs() <= 0.1);
        assert!((compression_factor(1024, 1024, 2, 256) - 2.7).abs() <= 0.1);
        assert!((compression_factor(4096, 25088, 14, 64) - 29.9).abs() <= 0.1);
        assert!((compression_factor(4096, 4096, 4, 256) - 8.0).abs() <= 0.1);
    }

    #[test]
    fn quantized_file_round_trip_and_size() {
        let mut rng = Rng::new(2);
        let mut w = Tensor::zeros(&[6, 8]);
        for v in w.data_mut() {
            *v = rng.gen_normal();
        }
        let q = pq_compress(&w, 2, 4, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.hdq");
        save_quantized(&path, &q).unwrap();
        let bytes = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(bytes, q.byte_size());
        assert_eq!(bytes, HDQ_HEADER_BYTES + 6 * (8 / 2) + 4 * 4 * 8);
        assert_eq!(load_quantized(&path).unwrap(), q);

        std::fs::write(&path, b"XXXX rest").unwrap();
        match load_quantized(&path) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("expected parse error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn layer_names_round_trip() {
        assert_eq!(pq_layer_name(PqComponent::Coarse, 4), "coarse/5");
        assert_eq!(pq_layer_name(PqComponent::Fine(1), 2), "fine002/3");
        assert_eq!(
            parse_pq_layer_name("coarse/5").unwrap(),
            (PqComponent::Coarse, 4)
        );
        assert_eq!(
            parse_pq_layer_name("fine002/3").unwrap(),
            (PqComponent::Fine(1), 2)
        );
        assert!(parse_pq_layer_name("coarse").is_err());
        assert!(parse_pq_layer_name("fine0/1").is_err());
        assert!(parse_pq_layer_name("coarse/0").is_err());
        assert!(parse_pq_layer_name("middle/2").is_err());
    }

    #[test]
    fn flips_and_crops() {
        let image = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let flipped = hflip(&image);
        assert_eq!(flipped.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let patch = crop(&image, 0, 1, 2, 2);
        assert_eq!(patch.data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn views_of_constant_image_coincide() {
        let image = Tensor::from_vec(&[1, 4, 4], vec![0.5; 16]).unwrap();
        let views = ten_views(&image, 3, 3).unwrap();
        assert_eq!(views.shape(), &[10, 1, 3, 3]);
        for v in 0..10 {
            assert!(views.data()[v * 9..(v + 1) * 9].iter().all(|&x| x == 0.5));
        }
        assert!(ten_views(&image, 5, 4).is_err());
    }

    #[test]
    fn symmetric_image_pairs_views() {
        // Left-right symmetric 4x4 image: flips equal their sources.
        let row = [1.0, 2.0, 2.0, 1.0];
        let data: Vec<f64> = (0..4).flat_map(|_| row).collect();
        let image = Tensor::from_vec(&[1, 4, 4], data).unwrap();
        let views = ten_views(&image, 4, 4).unwrap();
        for v in 0..5 {
            let a = &views.data()[2 * v * 16..(2 * v + 1) * 16];
            let b = &views.data()[(2 * v + 1) * 16..(2 * v + 2) * 16];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn multiview_constant_image_equals_single_view() {
        let image = Tensor::from_vec(&[1, 4, 4], vec![0.25; 16]).unwrap();
        // Per-view prediction keyed off the first pixel: constant image
        // keeps every view identical.
        let predict = |batch: &Tensor| {
            let n = batch.shape()[0];
            let volume: usize = batch.shape()[1..].iter().product();
            let mut out = Tensor::zeros(&[n, 2]);
            for i in 0..n {
                let v = batch.data()[i * volume];
                out.row_mut(i).copy_from_slice(&[v, 1.0 - v]);
            }
            Ok(out)
        };
        let mean = multiview_predict(predict, &image, 3, 3).unwrap();
        assert!((mean[0] - 0.25).abs() <= 1e-12);
        assert!((mean[1] - 0.75).abs() <= 1e-12);
    }

    fn toy_model(seed: u64) -> HdcnnModel {
        let spec = NetworkSpec {
            input: Shape::Chw { c: 1, h: 6, w: 6 },
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected { units: 8 },
                LayerSpec::Softmax,
            ],
            split_index: 2,
        };
        let mut rng = Rng::new(seed);
        let block = Network::init(spec, &mut rng).unwrap();
        let disjoint: Vec<usize> = (0..8).map(|j| j / 2).collect();
        let mut u = Tensor::zeros(&[4, 8]);
        for (j, &k) in disjoint.iter().enumerate() {
            u.set(k, j, 1.0);
        }
        let hierarchy = extend_overlapping(&disjoint, &u, 1.0).unwrap();
        assemble(&block, 2, &hierarchy, &mut rng).unwrap()
    }

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(&[n, 1, 6, 6]);
        for v in t.data_mut() {
            *v = rng.gen_normal();
        }
        t
    }

    #[test]
    fn quantized_model_stays_close_when_lossless() {
        let model = toy_model(19);
        // k = row count makes per-segment clustering exact up to the f32
        // center storage.
        let entries = vec![PqEntry {
            layer: "coarse/2".into(),
            s: 2,
            k: 8,
            seed: 41,
        }];
        let pq = compress_model(&model, &entries).unwrap();
        let images = random_images(6, 23);
        let plain = model.full_forward(&images, ExecPolicy::All).unwrap();
        let quant = pq.full_forward(&images, ExecPolicy::All).unwrap();
        for i in 0..6 {
            for j in 0..8 {
                assert!((plain.p.at(i, j) - quant.p.at(i, j)).abs() <= 1e-4);
            }
        }
        // Byte accounting swaps the one matrix for its tables.
        let q = &pq.tables[&(PqComponent::Coarse, 1)];
        assert_eq!(
            pq.compressed_param_bytes(),
            4 * model.param_count() - 4 * q.m * q.n + q.byte_size()
        );
    }

    #[test]
    fn compress_rejects_bad_targets() {
        let model = toy_model(19);
        let bad = |layer: &str| {
            compress_model(
                &model,
                &[PqEntry {
                    layer: layer.into(),
                    s: 2,
                    k: 4,
                    seed: 1,
                }],
            )
            .is_err()
        };
        assert!(bad("coarse/1")); // flatten, not fully-connected
        assert!(bad("coarse/9"));
        assert!(bad("fine009/3"));
    }

    #[test]
    fn candidates_sorted_by_size() {
        let model = toy_model(19);
        let cands = pq_candidates(&model);
        // Coarse classifier (8 units) outranks every fine classifier (2).
        assert_eq!(cands[0].0, PqComponent::Coarse);
        for pair in cands.windows(2) {
            assert!(pair[0].2 >= pair[1].2);
        }
        assert_eq!(cands.len(), 5);
    }

    #[test]
    fn evaluate_flat_identity_model() {
        // Flat 3-feature inputs, identity classifier: one-hot rows predict
        // themselves.
        let spec = NetworkSpec {
            input: Shape::Flat { d: 3 },
            layers: vec![LayerSpec::FullyConnected { units: 3 }, LayerSpec::Softmax],
            split_index: 0,
        };
        let mut net = Network::init(spec, &mut Rng::new(0)).unwrap();
        for j in 0..3 {
            net.params[0][0].set(j, j, 10.0);
        }
        let images = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let report = evaluate(
            &EvalTarget::Block(&net),
            &images,
            &[0, 1, 2],
            ViewMode::Single,
        )
        .unwrap();
        assert_eq!(report.top1_err, 0.0);
        assert_eq!(report.top5_err, None);
        assert_eq!(report.mean_executed, 1.0);
        assert_eq!(report.raw_param_bytes, report.compressed_param_bytes);
        assert!(evaluate(
            &EvalTarget::Block(&net),
            &Tensor::zeros(&[0, 3]),
            &[],
            ViewMode::Single
        )
        .is_err());
    }

    #[test]
    fn evaluate_hdcnn_counts_components() {
        let model = toy_model(31);
        let images = random_images(7, 37);
        let labels = vec![0; 7];
        let all = evaluate(
            &EvalTarget::Hdcnn(&model, ExecPolicy::All),
            &images,
            &labels,
            ViewMode::Single,
        )
        .unwrap();
        assert_eq!(all.mean_executed, 4.0);
        assert!(all.top5_err.is_some());
        // Mean executed grows with beta.
        let mut last = 0.0;
        for beta in [1.0, 2.0, 4.0, 8.0, f64::INFINITY] {
            let report = evaluate(
                &EvalTarget::Hdcnn(&model, ExecPolicy::Threshold { beta }),
                &images,
                &labels,
                ViewMode::Single,
            )
            .unwrap();
            assert!(report.mean_executed >= last);
            last = report.mean_executed;
        }
        assert_eq!(last, 4.0);
    }

    #[test]
    fn evaluate_ten_view_crops_larger_images() {
        let model = toy_model(31);
        // Stored images are 8x8, the model eats 6x6 crops.
        let mut rng = Rng::new(43);
        let mut images = Tensor::zeros(&[3, 1, 8, 8]);
        for v in images.data_mut() {
            *v = rng.gen_normal();
        }
        let labels = vec![1, 2, 3];
        let single = evaluate(
            &EvalTarget::Hdcnn(&model, ExecPolicy::All),
            &images,
            &labels,
            ViewMode::Single,
        )
        .unwrap();
        let ten = evaluate(
            &EvalTarget::Hdcnn(&model, ExecPolicy::All),
            &images,
            &labels,
            ViewMode::TenView,
        )
        .unwrap();
        assert_eq!(single.mean_executed, 4.0);
        assert_eq!(ten.mean_executed, 4.0);
    }
}
