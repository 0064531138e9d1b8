//! The assembled hierarchical model: shared layers, one coarse category
//! component, K fine category components, and the probabilistic averaging
//! that combines their predictions.

use std::path::{Path, PathBuf};

use crate::engine::layers::{LayerSpec, Shape};
use crate::engine::network::{
    chain_backward, chain_forward, init_layer_params, load_params, save_params, Network,
    NetworkSpec,
};
use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::hierarchy::{aggregate_coarse, Hierarchy};
use crate::runtime::ExecPolicy;

/// A run of consecutive layers with its own parameters: the shared prefix,
/// the coarse rear, or a fine component's rear.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub layers: Vec<LayerSpec>,
    /// Activation shape before each layer plus the output shape.
    pub shapes: Vec<Shape>,
    pub params: Vec<Vec<Tensor>>,
}

impl Chain {
    pub fn new(input: Shape, layer_specs: Vec<LayerSpec>, params: Vec<Vec<Tensor>>) -> Result<Chain> {
        let mut shapes = vec![input];
        for (i, layer) in layer_specs.iter().enumerate() {
            let next = crate::engine::layers::infer_shape(layer, shapes.last().unwrap())
                .map_err(|e| Error::rejected(format!("chain layer {i}: {e}")))?;
            shapes.push(next);
        }
        if params.len() != layer_specs.len() {
            return Err(Error::shape(format!(
                "{} parameter groups for {} layers",
                params.len(),
                layer_specs.len()
            )));
        }
        for (i, layer) in layer_specs.iter().enumerate() {
            let expect = crate::engine::layers::param_shapes(layer, &shapes[i]);
            let got: Vec<Vec<usize>> = params[i].iter().map(|t| t.shape().to_vec()).collect();
            if expect != got {
                return Err(Error::shape(format!(
                    "chain layer {i} ({}): expected parameter shapes {expect:?}, got {got:?}",
                    layer.kind()
                )));
            }
        }
        Ok(Chain {
            layers: layer_specs,
            shapes,
            params,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    pub fn forward(&self, input: &Tensor) -> Vec<Tensor> {
        chain_forward(&self.layers, &self.shapes, &self.params, input)
    }

    pub fn backward(&self, acts: &[Tensor], grad_out: &Tensor) -> (Vec<Vec<Tensor>>, Tensor) {
        chain_backward(&self.layers, &self.shapes, &self.params, acts, grad_out)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }
}

/// One fine category component: rear layers specializing in the partial set
/// `S^c_k`, with a final classifier of width `|S^c_k|`.
#[derive(Clone, Debug, PartialEq)]
pub struct FineComponent {
    pub k: usize,
    /// Sorted, duplicate-free fine category ids this component predicts.
    pub partial_set: Vec<usize>,
    pub rear: Chain,
}

/// Prediction of one fine component over a batch, embedded into full
/// category space: zeros outside the partial set, simplex mass inside.
#[derive(Clone, Debug)]
pub struct PartialPrediction {
    pub k: usize,
    /// `[n, C]` with nonzero entries only at partial-set positions.
    pub probs: Tensor,
}

/// End-to-end prediction for a batch.
#[derive(Clone, Debug)]
pub struct FinalPrediction {
    /// `[n, C]` averaged probabilities.
    pub p: Tensor,
    /// `[n, K]` coarse weights used for the averaging.
    pub b: Tensor,
    /// Fine component ids evaluated per image, ascending.
    pub executed: Vec<Vec<usize>>,
}

/// Shared prefix + coarse component + K fine components over a hierarchy.
#[derive(Clone, Debug)]
pub struct HdcnnModel {
    /// The building block's layer chain; shared/rear specs are its slices.
    pub block_spec: NetworkSpec,
    pub split: usize,
    pub shared: Chain,
    /// Full C-way rear; its softmax output is aggregated into coarse
    /// probabilities with the overlapping mapping.
    pub coarse: Chain,
    pub fine: Vec<FineComponent>,
    pub hierarchy: Hierarchy,
}

/// Builds the fine rear layer list: the block's rear with the final
/// classifier narrowed to `width`. The final classifier is the last
/// parameterized layer and must be fully-connected.
fn fine_rear_layers(rear: &[LayerSpec], width: usize) -> Result<(Vec<LayerSpec>, usize)> {
    let last_param = rear
        .iter()
        .rposition(|l| {
            matches!(
                l,
                LayerSpec::FullyConnected { .. } | LayerSpec::Conv2d { .. }
            )
        })
        .ok_or_else(|| Error::rejected("rear layers have no classifier layer"))?;
    let mut out = rear.to_vec();
    match out[last_param] {
        LayerSpec::FullyConnected { .. } => {
            out[last_param] = LayerSpec::FullyConnected { units: width };
        }
        _ => {
            return Err(Error::rejected(
                "final classifier layer must be fully-connected",
            ))
        }
    }
    Ok((out, last_param))
}

/// Copies the trained building block into an HD-CNN skeleton: shared and
/// coarse parameters are exact copies; each fine component copies the rear
/// too, except its final classifier, which is freshly initialized at width
/// `|S^c_k|` from `rng`.
pub fn assemble(
    block: &Network,
    split_index: usize,
    hierarchy: &Hierarchy,
    rng: &mut Rng,
) -> Result<HdcnnModel> {
    if split_index > block.spec.layers.len() {
        return Err(Error::rejected(format!(
            "split index {split_index} exceeds {} layers",
            block.spec.layers.len()
        )));
    }
    let c = block.label_count();
    if hierarchy.label_count() != c {
        return Err(Error::rejected(format!(
            "hierarchy covers {} categories, block predicts {c}",
            hierarchy.label_count()
        )));
    }
    hierarchy.validate()?;
    let shapes = block.shapes();
    let shared = Chain::new(
        block.spec.input,
        block.spec.layers[..split_index].to_vec(),
        block.params[..split_index].to_vec(),
    )?;
    let rear_input = shapes[split_index];
    let coarse = Chain::new(
        rear_input,
        block.spec.layers[split_index..].to_vec(),
        block.params[split_index..].to_vec(),
    )?;
    let mut fine = Vec::with_capacity(hierarchy.k);
    for (k, partial_set) in hierarchy.partial_sets.iter().enumerate() {
        let (layer_specs, classifier) =
            fine_rear_layers(&block.spec.layers[split_index..], partial_set.len())?;
        // Shapes of the narrowed chain differ from the block's only at and
        // after the classifier, so compute them fresh.
        let mut shapes_k = vec![rear_input];
        for (i, layer) in layer_specs.iter().enumerate() {
            shapes_k.push(crate::engine::layers::infer_shape(layer, &shapes_k[i])?);
        }
        let mut params = Vec::with_capacity(layer_specs.len());
        for (i, layer) in layer_specs.iter().enumerate() {
            if i == classifier {
                params.push(init_layer_params(layer, &shapes_k[i], rng));
            } else {
                params.push(block.params[split_index + i].clone());
            }
        }
        fine.push(FineComponent {
            k,
            partial_set: partial_set.clone(),
            rear: Chain::new(rear_input, layer_specs, params)?,
        });
    }
    Ok(HdcnnModel {
        block_spec: NetworkSpec {
            split_index,
            ..block.spec.clone()
        },
        split: split_index,
        shared,
        coarse,
        fine,
        hierarchy: hierarchy.clone(),
    })
}

impl HdcnnModel {
    pub fn label_count(&self) -> usize {
        self.hierarchy.label_count()
    }

    pub fn coarse_count(&self) -> usize {
        self.hierarchy.k
    }

    /// Shared-prefix activations for a pixel batch.
    pub fn shared_forward(&self, batch: &Tensor) -> Vec<Tensor> {
        self.shared.forward(batch)
    }

    /// Coarse weights `B` (`[n, K]`): the rear's fine prediction aggregated
    /// over the overlapping mapping.
    pub fn coarse_forward(&self, batch: &Tensor) -> Result<Tensor> {
        let shared_out = self.shared_forward(batch);
        self.coarse_from_shared(shared_out.last().unwrap())
    }

    pub fn coarse_from_shared(&self, shared_out: &Tensor) -> Result<Tensor> {
        let acts = self.coarse.forward(shared_out);
        aggregate_coarse(acts.last().unwrap(), self.hierarchy.overlapping_mapping())
    }

    /// One fine component's embedded prediction from shared activations.
    pub fn fine_forward(&self, k: usize, shared_out: &Tensor) -> Result<PartialPrediction> {
        let component = self
            .fine
            .get(k)
            .ok_or_else(|| Error::rejected(format!("fine component {k} out of range")))?;
        let acts = component.rear.forward(shared_out);
        Ok(PartialPrediction {
            k,
            probs: embed_partial(
                acts.last().unwrap(),
                &component.partial_set,
                self.label_count(),
            ),
        })
    }

    /// Full conditional inference for one batch.
    pub fn full_forward(&self, batch: &Tensor, policy: ExecPolicy) -> Result<FinalPrediction> {
        self.full_forward_with(
            batch,
            policy,
            |shared_out| Ok(self.coarse.forward(shared_out).pop().unwrap()),
            |k, shared_sub| Ok(self.fine[k].rear.forward(shared_sub).pop().unwrap()),
        )
    }

    /// Conditional inference with pluggable rear execution; `coarse_rear`
    /// maps shared activations to the full C-way prediction, `fine_rear`
    /// maps (component, shared sub-batch) to partial-set probabilities.
    /// This carries the masking, sub-batch routing, and averaging shared by
    /// the plain and quantized paths.
    pub fn full_forward_with<FC, FF>(
        &self,
        batch: &Tensor,
        policy: ExecPolicy,
        coarse_rear: FC,
        fine_rear: FF,
    ) -> Result<FinalPrediction>
    where
        FC: Fn(&Tensor) -> Result<Tensor>,
        FF: Fn(usize, &Tensor) -> Result<Tensor>,
    {
        let n = batch.shape()[0];
        let c = self.label_count();
        let kk = self.coarse_count();
        let shared_acts = self.shared_forward(batch);
        let shared_out = shared_acts.last().unwrap();
        let b = aggregate_coarse(
            &coarse_rear(shared_out)?,
            self.hierarchy.overlapping_mapping(),
        )?;

        // Which images does each component serve?
        let mut masks: Vec<Vec<usize>> = Vec::with_capacity(n);
        for i in 0..n {
            masks.push(policy.mask(b.row(i)));
        }
        let mut weighted = Tensor::zeros(&[n, c]);
        let mut denoms = vec![0.0; n];
        let mut fallback = Tensor::zeros(&[n, c]);
        for k in 0..kk {
            let serve: Vec<usize> = (0..n).filter(|&i| masks[i].contains(&k)).collect();
            if serve.is_empty() {
                continue;
            }
            let sub = gather_rows(shared_out, &serve);
            let partial = embed_partial(&fine_rear(k, &sub)?, &self.fine[k].partial_set, c);
            for (row, &i) in serve.iter().enumerate() {
                let w = b.at(i, k);
                denoms[i] += w;
                let src = partial.row(row);
                let dst = weighted.row_mut(i);
                for j in 0..c {
                    dst[j] += w * src[j];
                }
                // A zero total weight falls back to the largest-weight
                // executed component alone (lowest id on ties); keep each
                // image's current best candidate as components stream by.
                let best = best_masked(&masks[i], b.row(i));
                if best == k {
                    fallback.row_mut(i).copy_from_slice(src);
                }
            }
        }
        let mut p = Tensor::zeros(&[n, c]);
        for i in 0..n {
            if masks[i].is_empty() {
                return Err(Error::state("empty execution mask"));
            }
            if denoms[i] > 0.0 {
                let src = weighted.row(i);
                let dst = p.row_mut(i);
                for j in 0..c {
                    dst[j] = src[j] / denoms[i];
                }
            } else {
                p.row_mut(i).copy_from_slice(fallback.row(i));
            }
        }
        Ok(FinalPrediction {
            p,
            b,
            executed: masks,
        })
    }

    /// Sum of parameter element counts across all components.
    pub fn param_count(&self) -> usize {
        self.shared.param_count()
            + self.coarse.param_count()
            + self.fine.iter().map(|f| f.rear.param_count()).sum::<usize>()
    }
}

/// Largest-weight member of a mask, lowest id on ties.
fn best_masked(mask: &[usize], b_row: &[f64]) -> usize {
    *mask
        .iter()
        .max_by(|&&a, &&b| b_row[a].partial_cmp(&b_row[b]).unwrap().then(b.cmp(&a)))
        .unwrap()
}

/// Embeds `[n, |S|]` partial-set probabilities into `[n, C]`.
pub fn embed_partial(probs: &Tensor, partial_set: &[usize], c: usize) -> Tensor {
    let n = probs.shape()[0];
    assert_eq!(probs.shape()[1], partial_set.len());
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let src = probs.row(i);
        let dst = out.row_mut(i);
        for (pos, &j) in partial_set.iter().enumerate() {
            dst[j] = src[pos];
        }
    }
    out
}

/// Copies the selected rows of a batch tensor into a new contiguous batch.
pub fn gather_rows(batch: &Tensor, rows: &[usize]) -> Tensor {
    let volume: usize = batch.shape()[1..].iter().product();
    let mut dims = batch.shape().to_vec();
    dims[0] = rows.len();
    let mut out = Tensor::zeros(&dims);
    for (dst, &src) in rows.iter().enumerate() {
        out.data_mut()[dst * volume..(dst + 1) * volume]
            .copy_from_slice(&batch.data()[src * volume..(src + 1) * volume]);
    }
    out
}

/// Eq.-1 weighted average: `p = Σ_k B_k p_k / Σ_k B_k` over the supplied
/// component predictions. A zero denominator falls back to the single
/// supplied component with the largest weight (lowest id on ties).
pub fn probabilistic_average(b_row: &[f64], partials: &[(usize, &[f64])]) -> Result<Vec<f64>> {
    if partials.is_empty() {
        return Err(Error::state("empty execution mask"));
    }
    let c = partials[0].1.len();
    let denom: f64 = partials.iter().map(|(k, _)| b_row[*k]).sum();
    if denom > 0.0 {
        let mut p = vec![0.0; c];
        for (k, probs) in partials {
            let w = b_row[*k];
            for j in 0..c {
                p[j] += w * probs[j];
            }
        }
        for v in &mut p {
            *v /= denom;
        }
        Ok(p)
    } else {
        let (_, probs) = partials
            .iter()
            .max_by(|(ka, _), (kb, _)| {
                b_row[*ka]
                    .partial_cmp(&b_row[*kb])
                    .unwrap()
                    .then(kb.cmp(ka))
            })
            .unwrap();
        Ok(probs.to_vec())
    }
}

/// `pq layer=<name> s=<int> k=<int> seed=<int>` manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PqEntry {
    pub layer: String,
    pub s: usize,
    pub k: usize,
    pub seed: u64,
}

impl PqEntry {
    pub fn to_line(&self) -> String {
        format!(
            "pq layer={} s={} k={} seed={}",
            self.layer, self.s, self.k, self.seed
        )
    }
}

/// A model bundle on disk plus any quantization descriptors recorded in its
/// manifest.
#[derive(Debug)]
pub struct Bundle {
    pub model: HdcnnModel,
    pub pq: Vec<PqEntry>,
    pub dir: PathBuf,
}

fn fine_file_name(k: usize) -> String {
    format!("fine{:03}.hdw", k + 1)
}

/// Writes a bundle directory: block spec, hierarchy, one checkpoint per
/// component, and a manifest tying them together.
pub fn save_bundle(model: &HdcnnModel, dir: &Path, pq: &[PqEntry]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("block.netspec"), model.block_spec.to_text())?;
    model
        .hierarchy
        .save(&dir.join("hierarchy.txt"), &dir.join("hierarchy_u.csv"))?;
    save_params(&dir.join("shared.hdw"), &model.shared.params)?;
    save_params(&dir.join("coarse.hdw"), &model.coarse.params)?;
    for component in &model.fine {
        save_params(&dir.join(fine_file_name(component.k)), &component.rear.params)?;
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("split index={}\n", model.split));
    manifest.push_str(&format!("coarse-categories count={}\n", model.hierarchy.k));
    manifest.push_str("spec file=block.netspec\n");
    manifest.push_str("hierarchy file=hierarchy.txt ufile=hierarchy_u.csv\n");
    manifest.push_str("shared file=shared.hdw\n");
    manifest.push_str("coarse file=coarse.hdw aggregation=overlapping\n");
    for component in &model.fine {
        manifest.push_str(&format!(
            "fine {} file={}\n",
            component.k + 1,
            fine_file_name(component.k)
        ));
    }
    for entry in pq {
        manifest.push_str(&entry.to_line());
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a bundle directory back. Quantized layers are returned as
/// descriptors; parameters in the checkpoints are the uncompressed ones.
pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = std::fs::read_to_string(&manifest_path)?;
    let mut split = None;
    let mut pq = Vec::new();
    let mut fine_files: Vec<(usize, String)> = Vec::new();
    let mut shared_file = None;
    let mut coarse_file = None;
    let mut spec_file = None;
    let mut hierarchy_files = None;
    for (lineno, raw) in manifest.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let at = |detail: String| Error::parse(lineno as u64 + 1, detail);
        let mut words = line.split_whitespace();
        let kind = words.next().unwrap();
        // A `fine` line carries its 1-based id before the key=value pairs.
        let mut fine_id = None;
        if kind == "fine" {
            let id = words
                .next()
                .and_then(|w| w.parse::<usize>().ok())
                .ok_or_else(|| at("fine line needs a 1-based id".into()))?;
            fine_id = Some(id);
        }
        let kv: Vec<(&str, &str)> = words
            .map(|w| {
                w.split_once('=')
                    .ok_or_else(|| at(format!("expected key=value, got `{w}`")))
            })
            .collect::<Result<_>>()?;
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| at(format!("missing key `{key}` in `{kind}` line")))
        };
        match kind {
            "split" => split = Some(parse_usize(get("index")?, lineno)?),
            "coarse-categories" => {
                parse_usize(get("count")?, lineno)?;
            }
            "spec" => spec_file = Some(get("file")?.to_string()),
            "hierarchy" => {
                hierarchy_files = Some((get("file")?.to_string(), get("ufile")?.to_string()))
            }
            "shared" => shared_file = Some(get("file")?.to_string()),
            "coarse" => coarse_file = Some(get("file")?.to_string()),
            "fine" => fine_files.push((fine_id.unwrap(), get("file")?.to_string())),
            "pq" => pq.push(PqEntry {
                layer: get("layer")?.to_string(),
                s: parse_usize(get("s")?, lineno)?,
                k: parse_usize(get("k")?, lineno)?,
                seed: get("seed")?
                    .parse()
                    .map_err(|_| at("seed must be an integer".into()))?,
            }),
            other => return Err(at(format!("unknown manifest entry `{other}`"))),
        }
    }
    let split = split.ok_or_else(|| Error::parse(0, "manifest missing split line"))?;
    let spec_file = spec_file.ok_or_else(|| Error::parse(0, "manifest missing spec line"))?;
    let (hfile, ufile) =
        hierarchy_files.ok_or_else(|| Error::parse(0, "manifest missing hierarchy line"))?;
    let shared_file =
        shared_file.ok_or_else(|| Error::parse(0, "manifest missing shared line"))?;
    let coarse_file =
        coarse_file.ok_or_else(|| Error::parse(0, "manifest missing coarse line"))?;

    let spec_text = std::fs::read_to_string(dir.join(&spec_file))?;
    let block_spec = NetworkSpec {
        split_index: split,
        ..NetworkSpec::parse(&spec_text)?
    };
    let hierarchy = Hierarchy::load(&dir.join(&hfile), &dir.join(&ufile))?;
    let shapes = block_spec.validate()?;
    if split > block_spec.layers.len() {
        return Err(Error::rejected(format!(
            "split index {split} exceeds {} layers",
            block_spec.layers.len()
        )));
    }

    // Rebuild chains with zero parameters to get the template shapes, then
    // load checkpoints into them.
    let mut template = Network::init(block_spec.clone(), &mut Rng::new(0))?;
    for group in &mut template.params {
        for t in group.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }
    let shared_params = load_params(&dir.join(&shared_file), &template.params[..split])?;
    let coarse_params = load_params(&dir.join(&coarse_file), &template.params[split..])?;
    let shared = Chain::new(
        block_spec.input,
        block_spec.layers[..split].to_vec(),
        shared_params,
    )?;
    let coarse = Chain::new(
        shapes[split],
        block_spec.layers[split..].to_vec(),
        coarse_params,
    )?;

    fine_files.sort();
    if fine_files.len() != hierarchy.k
        || fine_files.iter().enumerate().any(|(i, (id, _))| *id != i + 1)
    {
        return Err(Error::parse(
            0,
            format!(
                "manifest lists {} fine components, hierarchy has {}",
                fine_files.len(),
                hierarchy.k
            ),
        ));
    }
    let mut fine = Vec::with_capacity(hierarchy.k);
    for (k, (_, file)) in fine_files.iter().enumerate() {
        let partial_set = hierarchy.partial_sets[k].clone();
        let (layer_specs, _) =
            fine_rear_layers(&block_spec.layers[split..], partial_set.len())?;
        let mut shapes_k = vec![shapes[split]];
        for (i, layer) in layer_specs.iter().enumerate() {
            shapes_k.push(crate::engine::layers::infer_shape(layer, &shapes_k[i])?);
        }
        let zero_template: Vec<Vec<Tensor>> = layer_specs
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                crate::engine::layers::param_shapes(layer, &shapes_k[i])
                    .into_iter()
                    .map(|s| Tensor::zeros(&s))
                    .collect()
            })
            .collect();
        let params = load_params(&dir.join(file), &zero_template)?;
        fine.push(FineComponent {
            k,
            partial_set,
            rear: Chain::new(shapes[split], layer_specs, params)?,
        });
    }

    let model = HdcnnModel {
        block_spec,
        split,
        shared,
        coarse,
        fine,
        hierarchy,
    };
    Ok(Bundle {
        model,
        pq,
        dir: dir.to_path_buf(),
    })
}

fn parse_usize(v: &str, lineno: usize) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::parse(lineno as u64 + 1, format!("`{v}` is not an integer")))
}
