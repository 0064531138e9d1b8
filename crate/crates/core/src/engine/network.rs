use std::io::{Read, Write};
use std::path::Path;

use crate::engine::layers::{self, LayerSpec, Shape};
use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered layer chain with a designated shared/rear split.
///
/// `split_index` partitions the chain into shared preceding layers
/// `[0, split_index)` and rear layers `[split_index, len)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub split_index: usize,
}

impl NetworkSpec {
    /// Activation shape before each layer plus the final output shape.
    /// Errors if any layer cannot accept its predecessor's output.
    pub fn activation_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input);
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layers::infer_shape(layer, shapes.last().unwrap())
                .map_err(|e| Error::rejected(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<Shape>> {
        if self.split_index > self.layers.len() {
            return Err(Error::rejected(format!(
                "split index {} exceeds layer count {}",
                self.split_index,
                self.layers.len()
            )));
        }
        let shapes = self.activation_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return Err(Error::rejected("final layer must be softmax")),
        }
        match shapes.last() {
            Some(Shape::Flat { d }) if *d > 0 => Ok(shapes),
            _ => Err(Error::rejected("network output must be a flat label vector")),
        }
    }

    pub fn label_count(&self) -> Result<usize> {
        match self.validate()?.last() {
            Some(Shape::Flat { d }) => Ok(*d),
            _ => unreachable!("validate checked output shape"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.input {
            Shape::Chw { c, h, w } => out.push_str(&format!("input c={c} h={h} w={w}\n")),
            Shape::Flat { d } => out.push_str(&format!("input d={d}\n")),
        }
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => out.push_str(&format!(
                    "conv2d out={out_channels} k={kernel} stride={stride} pad={padding}\n"
                )),
                LayerSpec::MaxPool { kernel, stride } => {
                    out.push_str(&format!("maxpool k={kernel} stride={stride}\n"))
                }
                LayerSpec::AvgPool { kernel, stride } => {
                    out.push_str(&format!("avgpool k={kernel} stride={stride}\n"))
                }
                LayerSpec::Relu => out.push_str("relu\n"),
                LayerSpec::FullyConnected { units } => {
                    out.push_str(&format!("fully-connected units={units}\n"))
                }
                LayerSpec::Softmax => out.push_str("softmax\n"),
                LayerSpec::Flatten => out.push_str("flatten\n"),
            }
        }
        out.push_str(&format!("split index={}\n", self.split_index));
        out
    }

    pub fn parse(text: &str) -> Result<NetworkSpec> {
        let mut input = None;
        let mut layer_specs = Vec::new();
        let mut split_index = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => raw[..pos].trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let at = |detail: String| Error::parse(lineno as u64 + 1, detail);
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap();
            let mut kv = KeyValues::parse(words, lineno as u64 + 1)?;
            match kind {
                "input" => {
                    if input.is_some() {
                        return Err(at("duplicate input line".into()));
                    }
                    input = Some(if kv.has("d") {
                        Shape::Flat { d: kv.take("d")? }
                    } else {
                        Shape::Chw {
                            c: kv.take("c")?,
                            h: kv.take("h")?,
                            w: kv.take("w")?,
                        }
                    });
                }
                "split" => {
                    if split_index.is_some() {
                        return Err(at("duplicate split line".into()));
                    }
                    split_index = Some(kv.take("index")?);
                }
                "conv2d" => layer_specs.push(LayerSpec::Conv2d {
                    out_channels: kv.take("out")?,
                    kernel: kv.take("k")?,
                    stride: kv.take_or("stride", 1)?,
                    padding: kv.take_or("pad", 0)?,
                }),
                "maxpool" => layer_specs.push(LayerSpec::MaxPool {
                    kernel: kv.take("k")?,
                    stride: kv.take_or("stride", 1)?,
                }),
                "avgpool" => layer_specs.push(LayerSpec::AvgPool {
                    kernel: kv.take("k")?,
                    stride: kv.take_or("stride", 1)?,
                }),
                "relu" => layer_specs.push(LayerSpec::Relu),
                "fully-connected" => layer_specs.push(LayerSpec::FullyConnected {
                    units: kv.take("units")?,
                }),
                "softmax" => layer_specs.push(LayerSpec::Softmax),
                "flatten" => layer_specs.push(LayerSpec::Flatten),
                other => return Err(at(format!("unknown layer kind `{other}`"))),
            }
            kv.finish()?;
        }
        let spec = NetworkSpec {
            input: input.ok_or_else(|| Error::parse(0, "missing input line"))?,
            layers: layer_specs,
            split_index: split_index.ok_or_else(|| Error::parse(0, "missing split line"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

struct KeyValues {
    line: u64,
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    fn parse<'a>(words: impl Iterator<Item = &'a str>, line: u64) -> Result<KeyValues> {
        let mut pairs = Vec::new();
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| Error::parse(line, format!("expected key=value, got `{word}`")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        Ok(KeyValues { line, pairs })
    }

    fn has(&self, key: &str) -> bool {
        self.pairs.iter().any(|(k, _)| k == key)
    }

    fn take(&mut self, key: &str) -> Result<usize> {
        let pos = self
            .pairs
            .iter()
            .position(|(k, _)| k == key)
            .ok_or_else(|| Error::parse(self.line, format!("missing key `{key}`")))?;
        let (_, v) = self.pairs.remove(pos);
        v.parse()
            .map_err(|_| Error::parse(self.line, format!("`{key}` must be an integer, got `{v}`")))
    }

    fn take_or(&mut self, key: &str, default: usize) -> Result<usize> {
        if self.has(key) {
            self.take(key)
        } else {
            Ok(default)
        }
    }

    fn finish(self) -> Result<()> {
        match self.pairs.into_iter().next() {
            Some((k, _)) => Err(Error::parse(self.line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Layer chain plus its parameter tensors.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    /// Cached `spec.activation_shapes()`.
    shapes: Vec<Shape>,
    /// Per-layer parameter tensors; empty vectors for parameter-free layers.
    pub params: Vec<Vec<Tensor>>,
}

impl Network {
    /// Builds a network with weights drawn uniformly from
    /// `±1/sqrt(fan_in)` and zero biases.
    pub fn init(spec: NetworkSpec, rng: &mut Rng) -> Result<Network> {
        let shapes = spec.validate()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            params.push(init_layer_params(layer, &shapes[i], rng));
        }
        Ok(Network {
            spec,
            shapes,
            params,
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Vec<Tensor>>) -> Result<Network> {
        let shapes = spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        for (i, layer) in spec.layers.iter().enumerate() {
            let expect = layers::param_shapes(layer, &shapes[i]);
            let got: Vec<Vec<usize>> = params[i].iter().map(|t| t.shape().to_vec()).collect();
            if expect != got {
                return Err(Error::shape(format!(
                    "layer {i} ({}): expected parameter shapes {expect:?}, got {got:?}",
                    layer.kind()
                )));
            }
        }
        Ok(Network {
            spec,
            shapes,
            params,
        })
    }

    pub fn label_count(&self) -> usize {
        match self.shapes.last() {
            Some(Shape::Flat { d }) => *d,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flat_map(|group| group.iter())
            .map(Tensor::len)
            .sum()
    }

    /// Runs layers `[lo, len)` on `input` (whose shape must match the
    /// activation shape at `lo`). Returns activations: index 0 is `input`,
    /// index `i+1` the output of layer `lo + i`.
    ///
    /// Panics on a batch shape mismatch; callers construct batches from the
    /// same spec the network was built with.
    pub fn forward_range(&self, lo: usize, input: &Tensor) -> Vec<Tensor> {
        chain_forward(
            &self.spec.layers[lo..],
            &self.shapes[lo..],
            &self.params[lo..],
            input,
        )
    }

    pub fn forward(&self, input: &Tensor) -> Vec<Tensor> {
        self.forward_range(0, input)
    }

    /// Final class probabilities only.
    pub fn predict(&self, input: &Tensor) -> Tensor {
        self.forward(input).pop().unwrap()
    }

    /// Backpropagates `grad_out` (gradient at the final activation) down to
    /// layer `lo`. Returns per-layer parameter gradients for layers
    /// `[lo, len)` and the gradient with respect to the input of layer `lo`.
    /// `acts` must come from `forward_range(lo, ..)`.
    pub fn backward_range(
        &self,
        lo: usize,
        acts: &[Tensor],
        grad_out: &Tensor,
    ) -> (Vec<Vec<Tensor>>, Tensor) {
        chain_backward(
            &self.spec.layers[lo..],
            &self.shapes[lo..],
            &self.params[lo..],
            acts,
            grad_out,
        )
    }
}

/// Runs an arbitrary layer chain. `shapes` holds the activation shape
/// before each layer (`shapes[i]` feeds `layer[i]`); `input`'s shape must
/// match `shapes[0]` with a leading batch dimension. Returns `input`
/// followed by each layer's output.
pub fn chain_forward(
    layer_specs: &[LayerSpec],
    shapes: &[Shape],
    params: &[Vec<Tensor>],
    input: &Tensor,
) -> Vec<Tensor> {
    let n = input.shape()[0];
    assert_eq!(
        input.shape(),
        shapes[0].batch_dims(n).as_slice(),
        "batch shape does not match the chain's input shape"
    );
    let mut acts = Vec::with_capacity(layer_specs.len() + 1);
    acts.push(input.clone());
    for i in 0..layer_specs.len() {
        let out = layers::forward(&layer_specs[i], &shapes[i], &params[i], acts.last().unwrap());
        acts.push(out);
    }
    acts
}

/// Backpropagates through an arbitrary layer chain; the counterpart of
/// `chain_forward` whose activations it consumes.
pub fn chain_backward(
    layer_specs: &[LayerSpec],
    shapes: &[Shape],
    params: &[Vec<Tensor>],
    acts: &[Tensor],
    grad_out: &Tensor,
) -> (Vec<Vec<Tensor>>, Tensor) {
    assert_eq!(acts.len(), layer_specs.len() + 1, "activations out of step");
    let mut grad = grad_out.clone();
    let mut param_grads = vec![Vec::new(); layer_specs.len()];
    for i in (0..layer_specs.len()).rev() {
        let (pg, gin) = layers::backward(
            &layer_specs[i],
            &shapes[i],
            &params[i],
            &acts[i],
            &acts[i + 1],
            &grad,
        );
        param_grads[i] = pg;
        grad = gin;
    }
    (param_grads, grad)
}

pub fn init_layer_params(layer: &LayerSpec, in_shape: &Shape, rng: &mut Rng) -> Vec<Tensor> {
    let shapes = layers::param_shapes(layer, in_shape);
    if shapes.is_empty() {
        return vec![];
    }
    let bound = 1.0 / (layers::fan_in(layer, in_shape) as f64).sqrt();
    let mut weight = Tensor::zeros(&shapes[0]);
    for v in weight.data_mut() {
        *v = rng.gen_range_f64(-bound, bound);
    }
    let bias = Tensor::zeros(&shapes[1]);
    vec![weight, bias]
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HDW1";

/// Writes tensors as: magic "HDW1", then per tensor rank (u32 LE),
/// dims (u32 LE each), payload (f64 LE row-major).
pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    tensors: impl Iterator<Item = &'a Tensor>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads every tensor from a checkpoint stream. Parse errors carry the byte
/// offset where the malformed field starts.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() < 4 || &data[..4] != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, "missing HDW1 magic"));
    }
    let mut pos = 4usize;
    let mut tensors = Vec::new();
    let take_u32 = |data: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > data.len() {
            return Err(Error::parse(*pos as u64, "truncated u32 field"));
        }
        let v = u32::from_le_bytes(data[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    while pos < data.len() {
        let start = pos as u64;
        let rank = take_u32(&data, &mut pos)? as usize;
        if rank > 8 {
            return Err(Error::parse(start, format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(take_u32(&data, &mut pos)? as usize);
        }
        let len: usize = dims.iter().product();
        if pos + len * 8 > data.len() {
            return Err(Error::parse(
                pos as u64,
                format!("payload truncated: tensor {dims:?} needs {} bytes", len * 8),
            ));
        }
        let mut payload = Vec::with_capacity(len);
        for i in 0..len {
            let b = &data[pos + i * 8..pos + i * 8 + 8];
            payload.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        pos += len * 8;
        tensors.push(Tensor::from_vec(&dims, payload)?);
    }
    Ok(tensors)
}

pub fn save_params(path: &Path, groups: &[Vec<Tensor>]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, groups.iter().flat_map(|g| g.iter()))?;
    w.flush()?;
    Ok(())
}

/// Loads a flat tensor list and regroups it to match `template` (per-layer
/// parameter shapes). Shape mismatches are rejected.
pub fn load_params(path: &Path, template: &[Vec<Tensor>]) -> Result<Vec<Vec<Tensor>>> {
    let file = std::fs::File::open(path)?;
    let flat = read_checkpoint(std::io::BufReader::new(file))?;
    let expected: usize = template.iter().map(Vec::len).sum();
    if flat.len() != expected {
        return Err(Error::shape(format!(
            "checkpoint holds {} tensors, network needs {expected}",
            flat.len()
        )));
    }
    let mut it = flat.into_iter();
    let mut groups = Vec::with_capacity(template.len());
    for group in template {
        let mut g = Vec::with_capacity(group.len());
        for want in group {
            let t = it.next().unwrap();
            if t.shape() != want.shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor shape {:?} does not match network shape {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            g.push(t);
        }
        groups.push(g);
    }
    Ok(groups)
}
