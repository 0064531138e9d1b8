//! Labeled image sets: the binary container, the synthetic confusable-group
//! generator, and pixel preprocessing.

use std::path::Path;

use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

pub const HDC_MAGIC: &[u8; 4] = b"HDC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labeled 8-bit image set. Pixels are stored height-major with channels
/// innermost, matching the on-disk layout; labels are 0-based in memory and
/// 1-based in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub label_count: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.label_count];
        for &y in &self.labels {
            sizes[y] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::rejected("image dimensions must be positive"));
        }
        if self.label_count == 0 {
            return Err(Error::rejected("category count must be positive"));
        }
        if self.pixels.len() != self.len() * self.pixels_per_image() {
            return Err(Error::shape(format!(
                "{} pixel bytes for {} images of {} bytes",
                self.pixels.len(),
                self.len(),
                self.pixels_per_image()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.label_count) {
            return Err(Error::rejected(format!(
                "label {} out of range for {} categories",
                y + 1,
                self.label_count
            )));
        }
        if self.split == Split::Train {
            if let Some(j) = self.class_sizes().iter().position(|&s| s == 0) {
                return Err(Error::rejected(format!(
                    "training split has no images of category {}",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// Raw pixel values as a `[n, channels, height, width]` batch in
    /// [0, 255].
    pub fn to_chw_tensor(&self) -> Tensor {
        let (n, c, h, w) = (self.len(), self.channels, self.height, self.width);
        let mut t = Tensor::zeros(&[n, c, h, w]);
        let data = t.data_mut();
        let per = h * w * c;
        for i in 0..n {
            let src = &self.pixels[i * per..(i + 1) * per];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data[((i * c + ch) * h + y) * w + x] =
                            src[(y * w + x) * c + ch] as f64;
                    }
                }
            }
        }
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut buf =
            Vec::with_capacity(20 + 2 * self.len() + self.pixels.len());
        buf.extend_from_slice(HDC_MAGIC);
        for v in [
            self.len(),
            self.height,
            self.width,
            self.channels,
            self.label_count,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &y in &self.labels {
            buf.extend_from_slice(&((y + 1) as u16).to_le_bytes());
        }
        buf.extend_from_slice(&self.pixels);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, split: Split) -> Result<Dataset> {
        let buf = std::fs::read(path)?;
        if buf.len() < 4 || &buf[..4] != HDC_MAGIC {
            return Err(Error::parse(0, "not a dataset file"));
        }
        if buf.len() < 24 {
            return Err(Error::parse(buf.len() as u64, "truncated header"));
        }
        let field = |i: usize| {
            u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        };
        let (n, h, w, c, classes) = (field(0), field(1), field(2), field(3), field(4));
        let labels_at = 24;
        let pixels_at = labels_at + 2 * n;
        let expect = pixels_at + n * h * w * c;
        if buf.len() != expect {
            return Err(Error::parse(
                buf.len() as u64,
                format!("expected {expect} bytes, found {}", buf.len()),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let off = labels_at + 2 * i;
            let raw = u16::from_le_bytes(buf[off..off + 2].try_into().unwrap()) as usize;
            if raw == 0 || raw > classes {
                return Err(Error::parse(
                    off as u64,
                    format!("label {raw} out of range 1..={classes}"),
                ));
            }
            labels.push(raw - 1);
        }
        let data = Dataset {
            split,
            height: h,
            width: w,
            channels: c,
            label_count: classes,
            pixels: buf[pixels_at..].to_vec(),
            labels,
        };
        data.validate()?;
        Ok(data)
    }
}

/// Generator parameters for the synthetic confusable-group set: C = G·f
/// fine categories in G groups; categories within a group share
/// `similarity` of their mean pattern.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub groups: usize,
    pub classes_per_group: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub similarity: f64,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl SynthSpec {
    pub fn label_count(&self) -> usize {
        self.groups * self.classes_per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.classes_per_group == 0 {
            return Err(Error::rejected("need at least one group and one class"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::rejected("image dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::rejected("similarity must lie in [0, 1]"));
        }
        if self.noise < 0.0 {
            return Err(Error::rejected("noise level must be >= 0"));
        }
        if self.train_per_class == 0 {
            return Err(Error::rejected("need at least one training image per class"));
        }
        Ok(())
    }
}

/// Synthesizes train and test splits. Every class mean is a mix of its
/// group's base pattern and a class-private pattern at the similarity
/// ratio; samples add per-pixel Gaussian noise. Deterministic given `rng`:
/// base patterns, then class patterns, then train images class-major, then
/// test images class-major.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let c = spec.label_count();
    let per = spec.height * spec.width * spec.channels;
    let mut bases = Vec::with_capacity(spec.groups);
    for _ in 0..spec.groups {
        bases.push((0..per).map(|_| rng.gen_f64()).collect::<Vec<f64>>());
    }
    let mut means = Vec::with_capacity(c);
    for class in 0..c {
        let base = &bases[class / spec.classes_per_group];
        let mean: Vec<f64> = (0..per)
            .map(|px| {
                spec.similarity * base[px] + (1.0 - spec.similarity) * rng.gen_f64()
            })
            .collect();
        means.push(mean);
    }
    let mut draw_split = |split: Split, per_class: usize| -> Dataset {
        let n = c * per_class;
        let mut pixels = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let v = m + spec.noise * rng.gen_normal();
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
                labels.push(class);
            }
        }
        Dataset {
            split,
            height: spec.height,
            width: spec.width,
            channels: spec.channels,
            label_count: c,
            pixels,
            labels,
        }
    };
    let train = draw_split(Split::Train, spec.train_per_class);
    let test = draw_split(Split::Test, spec.test_per_class);
    train.validate()?;
    if !test.is_empty() {
        test.validate()?;
    }
    Ok((train, test))
}

/// Per-channel standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocessor {
    pub fn fit(data: &Dataset) -> Preprocessor {
        let c = data.channels;
        let mut mean = vec![0.0; c];
        let mut count = vec![0u64; c];
        for (i, &px) in data.pixels.iter().enumerate() {
            let ch = i % c;
            mean[ch] += px as f64;
            count[ch] += 1;
        }
        for ch in 0..c {
            mean[ch] /= count[ch] as f64;
        }
        let mut var = vec![0.0; c];
        for (i, &px) in data.pixels.iter().enumerate() {
            let ch = i % c;
            let d = px as f64 - mean[ch];
            var[ch] += d * d;
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(v, &n)| (v / n as f64).sqrt().max(1e-8))
            .collect();
        Preprocessor { mean, std }
    }

    /// Standardized `[n, channels, height, width]` batch.
    pub fn apply(&self, data: &Dataset) -> Tensor {
        let mut t = data.to_chw_tensor();
        let (c, hw) = (data.channels, data.height * data.width);
        let td = t.data_mut();
        for i in 0..data.len() {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for v in &mut td[base..base + hw] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
        t
    }
}
