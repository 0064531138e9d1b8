//! Learning the two-level category hierarchy.
//!
//! A flat classifier is evaluated on a balanced held-out set; its confusion
//! structure becomes a category distance, spectral clustering groups the
//! fine categories into K disjoint coarse categories, and a likelihood
//! threshold extends those into overlapping partial sets.

use std::path::Path;

use crate::engine::eigh::eigh_symmetric;
use crate::engine::kmeans::kmeans;
use crate::engine::network::Network;
use crate::engine::rng::Rng;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Balanced held-out split of a training set. Index pairs are
/// (image index, label); labels are 0-based.
#[derive(Clone, Debug)]
pub struct HeldOutSplit {
    pub heldout: Vec<(usize, usize)>,
    pub remainder: Vec<(usize, usize)>,
    pub per_class_count: usize,
}

/// Row-stochastic confusion matrix; rows are true categories, columns
/// predictions.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub f: Tensor,
}

/// Symmetric category distance with zero diagonal, entries in [0,1].
#[derive(Clone, Debug)]
pub struct DistanceMatrix {
    pub d: Tensor,
}

/// The learned hierarchy. Coarse and fine ids are 0-based in memory and
/// 1-based in serialized form.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub k: usize,
    pub gamma: f64,
    /// Disjoint mapping: fine category j belongs to coarse `disjoint[j]`.
    pub disjoint: Vec<usize>,
    /// Overlapping mapping: sorted coarse ids per fine category; always
    /// contains `disjoint[j]`.
    pub overlapping: Vec<Vec<usize>>,
    /// Partial sets: sorted fine ids per coarse category, derived from
    /// `overlapping`.
    pub partial_sets: Vec<Vec<usize>>,
    /// Misclassification likelihood, `[K, C]`.
    pub u: Tensor,
}

/// Fine-to-coarse aggregation rule.
#[derive(Clone, Copy, Debug)]
pub enum CoarseMapping<'a> {
    Disjoint {
        map: &'a [usize],
        coarse_count: usize,
    },
    Overlapping {
        membership: &'a [Vec<usize>],
        coarse_count: usize,
    },
}

/// Draws `per_class_count` images of every class into the held-out set,
/// uniformly without replacement; everything else lands in the remainder.
pub fn sample_held_out(
    labels: &[usize],
    label_count: usize,
    per_class_count: usize,
    rng: &mut Rng,
) -> Result<HeldOutSplit> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); label_count];
    for (i, &y) in labels.iter().enumerate() {
        if y >= label_count {
            return Err(Error::rejected(format!(
                "label {y} out of range for {label_count} classes"
            )));
        }
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class_count {
            return Err(Error::rejected(format!(
                "class {} has {} images, need {per_class_count} for the held-out set",
                class + 1,
                members.len()
            )));
        }
    }
    let mut heldout = Vec::with_capacity(per_class_count * label_count);
    let mut remainder = Vec::with_capacity(labels.len() - per_class_count * label_count);
    for (class, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        let mut picked = members[..per_class_count].to_vec();
        picked.sort_unstable();
        heldout.extend(picked.iter().map(|&i| (i, class)));
        let mut rest = members[per_class_count..].to_vec();
        rest.sort_unstable();
        remainder.extend(rest.iter().map(|&i| (i, class)));
    }
    remainder.sort_unstable();
    heldout.sort_unstable();
    Ok(HeldOutSplit {
        heldout,
        remainder,
        per_class_count,
    })
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Confusion over an evaluated batch: `images` holds the held-out pixels
/// (already preprocessed), `labels` their true classes. Row j is the
/// prediction distribution of true class j; argmax ties break low.
pub fn confusion_matrix(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
) -> Result<ConfusionMatrix> {
    let c = net.label_count();
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; c * c];
    let mut class_totals = vec![0usize; c];
    let chunk = 64;
    let volume: usize = images.shape()[1..].iter().product();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut dims = images.shape().to_vec();
        dims[0] = end - start;
        let batch = Tensor::from_vec(&dims, images.data()[start * volume..end * volume].to_vec())?;
        let probs = net.predict(&batch);
        for i in 0..(end - start) {
            let y = labels[start + i];
            if y >= c {
                return Err(Error::rejected(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            let pred = argmax_row(probs.row(i));
            counts[y * c + pred] += 1;
            class_totals[y] += 1;
        }
        start = end;
    }
    let mut f = Tensor::zeros(&[c, c]);
    for j in 0..c {
        if class_totals[j] == 0 {
            return Err(Error::rejected(format!(
                "class {} absent from the held-out set",
                j + 1
            )));
        }
        let inv = 1.0 / class_totals[j] as f64;
        for l in 0..c {
            f.set(j, l, counts[j * c + l] as f64 * inv);
        }
    }
    Ok(ConfusionMatrix { f })
}

/// D = 1 − F with the diagonal zeroed, then symmetrized as 0.5(D + Dᵀ).
/// The output is exactly symmetric with an exactly zero diagonal.
pub fn distance_from_confusion(confusion: &ConfusionMatrix) -> DistanceMatrix {
    let c = confusion.f.shape()[0];
    let mut d = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in (i + 1)..c {
            let dij = 1.0 - confusion.f.at(i, j);
            let dji = 1.0 - confusion.f.at(j, i);
            let v = 0.5 * (dij + dji);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    DistanceMatrix { d }
}

/// Normalized-cuts clustering of the fine categories.
///
/// Affinity is 1 − D off the diagonal; the K eigenvectors of the symmetric
/// normalized Laplacian's smallest eigenvalues are row-normalized and
/// clustered with k-means. Coarse ids are relabeled in order of first
/// appearance, so id 0 always contains fine category 0.
pub fn spectral_cluster(distance: &DistanceMatrix, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let c = distance.d.shape()[0];
    if k < 2 || k > c {
        return Err(Error::rejected(format!(
            "K={k} must be in [2, {c}] for {c} categories"
        )));
    }
    let mut affinity = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in 0..c {
            if i != j {
                affinity.set(i, j, 1.0 - distance.d.at(i, j));
            }
        }
    }
    let mut degrees: Vec<f64> = (0..c).map(|i| affinity.row(i).iter().sum()).collect();
    if degrees.iter().any(|&d| d <= 0.0) {
        // Keep the degree matrix invertible when a category is maximally
        // distant from all others.
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    affinity.set(i, j, affinity.at(i, j) + 1e-8);
                }
            }
        }
        degrees = (0..c).map(|i| affinity.row(i).iter().sum()).collect();
    }
    let mut laplacian = Tensor::zeros(&[c, c]);
    for i in 0..c {
        laplacian.set(i, i, 1.0);
        for j in 0..c {
            if i != j {
                let v = -affinity.at(i, j) / (degrees[i] * degrees[j]).sqrt();
                laplacian.set(i, j, v);
            }
        }
    }
    let (_, vectors) = eigh_symmetric(&laplacian)?;
    let mut embedding = Tensor::zeros(&[c, k]);
    for i in 0..c {
        let mut norm = 0.0;
        for col in 0..k {
            let v = vectors.at(i, col);
            embedding.set(i, col, v);
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm > 0.0 {
            for col in 0..k {
                embedding.set(i, col, embedding.at(i, col) / norm);
            }
        }
    }
    for attempt in 0..5 {
        let result = kmeans(&embedding, k, rng)?;
        let mut counts = vec![0usize; k];
        for &a in &result.assignments {
            counts[a] += 1;
        }
        if counts.iter().all(|&n| n > 0) {
            // Relabel by first appearance for a stable id convention.
            let mut relabel = vec![usize::MAX; k];
            let mut next = 0;
            let mut out = Vec::with_capacity(c);
            for &a in &result.assignments {
                if relabel[a] == usize::MAX {
                    relabel[a] = next;
                    next += 1;
                }
                out.push(relabel[a]);
            }
            return Ok(out);
        }
        if attempt == 4 {
            break;
        }
    }
    Err(Error::state(format!(
        "k-means left a coarse category empty in 5 attempts (K={k}, C={c})"
    )))
}

fn check_simplex_rows(probs: &Tensor) -> Result<()> {
    let n = probs.shape()[0];
    for i in 0..n {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < -1e-9) {
            return Err(Error::rejected(format!(
                "probability row {i} off the simplex (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Collapses fine probabilities `[n, C]` into coarse probabilities `[n, K]`.
/// The disjoint rule sums partition members; the overlapping rule sums over
/// memberships and then L1-normalizes each row.
pub fn aggregate_coarse(fine_probs: &Tensor, mapping: CoarseMapping) -> Result<Tensor> {
    check_simplex_rows(fine_probs)?;
    let n = fine_probs.shape()[0];
    let c = fine_probs.shape()[1];
    let (k, normalize) = match mapping {
        CoarseMapping::Disjoint { map, coarse_count } => {
            if map.len() != c {
                return Err(Error::shape(format!(
                    "mapping covers {} categories, probabilities have {c}",
                    map.len()
                )));
            }
            (coarse_count, false)
        }
        CoarseMapping::Overlapping {
            membership,
            coarse_count,
        } => {
            if membership.len() != c {
                return Err(Error::shape(format!(
                    "mapping covers {} categories, probabilities have {c}",
                    membership.len()
                )));
            }
            (coarse_count, true)
        }
    };
    let mut coarse = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = fine_probs.row(i);
        let out = coarse.row_mut(i);
        match mapping {
            CoarseMapping::Disjoint { map, .. } => {
                for j in 0..c {
                    out[map[j]] += row[j];
                }
            }
            CoarseMapping::Overlapping { membership, .. } => {
                for j in 0..c {
                    for &cc in &membership[j] {
                        out[cc] += row[j];
                    }
                }
            }
        }
        if normalize {
            let total: f64 = out.iter().sum();
            if total > 0.0 {
                for v in out.iter_mut() {
                    *v /= total;
                }
            }
        }
    }
    Ok(coarse)
}

/// Mean coarse probability per true fine category: `u[k][j]` is the average
/// disjoint-mapped coarse probability mass on k over held-out images of
/// class j. Columns sum to 1 when the coarse rows do.
pub fn misclassification_likelihood(
    coarse_probs: &Tensor,
    labels: &[usize],
    label_count: usize,
) -> Result<Tensor> {
    let n = coarse_probs.shape()[0];
    let k = coarse_probs.shape()[1];
    if labels.len() != n {
        return Err(Error::shape(format!("{n} rows but {} labels", labels.len())));
    }
    let mut u = Tensor::zeros(&[k, label_count]);
    let mut counts = vec![0usize; label_count];
    for i in 0..n {
        let y = labels[i];
        if y >= label_count {
            return Err(Error::rejected(format!(
                "label {y} out of range for {label_count} classes"
            )));
        }
        counts[y] += 1;
        let row = coarse_probs.row(i);
        for kk in 0..k {
            u.data_mut()[kk * label_count + y] += row[kk];
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::rejected(format!(
                "class {} absent from the held-out set",
                class + 1
            )));
        }
        let inv = 1.0 / count as f64;
        for kk in 0..k {
            u.data_mut()[kk * label_count + class] *= inv;
        }
    }
    Ok(u)
}

/// Threshold u at u_t = 1/(γK): fine category j joins every coarse category
/// whose likelihood reaches the threshold, besides its disjoint home.
/// γ = ∞ gives u_t = 0 (every category everywhere); a u_t above every
/// off-home likelihood reproduces the disjoint mapping.
pub fn extend_overlapping(disjoint: &[usize], u: &Tensor, gamma: f64) -> Result<Hierarchy> {
    if !(gamma > 0.0) {
        return Err(Error::rejected(format!("gamma must be positive, got {gamma}")));
    }
    let k = u.shape()[0];
    let c = u.shape()[1];
    if disjoint.len() != c {
        return Err(Error::shape(format!(
            "disjoint mapping covers {} categories, u has {c}",
            disjoint.len()
        )));
    }
    if let Some(&bad) = disjoint.iter().find(|&&v| v >= k) {
        return Err(Error::rejected(format!(
            "disjoint coarse id {bad} out of range for K={k}"
        )));
    }
    let u_t = 1.0 / (gamma * k as f64);
    let mut overlapping = Vec::with_capacity(c);
    for j in 0..c {
        let mut set = vec![disjoint[j]];
        for kk in 0..k {
            if kk != disjoint[j] && u.at(kk, j) >= u_t {
                set.push(kk);
            }
        }
        set.sort_unstable();
        overlapping.push(set);
    }
    let hierarchy = Hierarchy {
        k,
        gamma,
        disjoint: disjoint.to_vec(),
        overlapping: overlapping.clone(),
        partial_sets: partial_sets_from(&overlapping, k),
        u: u.clone(),
    };
    hierarchy.validate()?;
    Ok(hierarchy)
}

fn partial_sets_from(overlapping: &[Vec<usize>], k: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); k];
    for (j, coarse_ids) in overlapping.iter().enumerate() {
        for &kk in coarse_ids {
            sets[kk].push(j);
        }
    }
    sets
}

impl Hierarchy {
    pub fn label_count(&self) -> usize {
        self.disjoint.len()
    }

    pub fn disjoint_mapping(&self) -> CoarseMapping<'_> {
        CoarseMapping::Disjoint {
            map: &self.disjoint,
            coarse_count: self.k,
        }
    }

    pub fn overlapping_mapping(&self) -> CoarseMapping<'_> {
        CoarseMapping::Overlapping {
            membership: &self.overlapping,
            coarse_count: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.disjoint.len();
        if self.overlapping.len() != c {
            return Err(Error::rejected("overlapping mapping length mismatch"));
        }
        if self.partial_sets.len() != self.k {
            return Err(Error::rejected("partial set count mismatch"));
        }
        for j in 0..c {
            if !self.overlapping[j].contains(&self.disjoint[j]) {
                return Err(Error::rejected(format!(
                    "fine category {} missing from its disjoint coarse category",
                    j + 1
                )));
            }
            if self.overlapping[j].iter().any(|&kk| kk >= self.k) {
                return Err(Error::rejected(format!(
                    "fine category {} maps to a coarse id outside [1, {}]",
                    j + 1,
                    self.k
                )));
            }
        }
        if self.partial_sets != partial_sets_from(&self.overlapping, self.k) {
            return Err(Error::rejected(
                "partial sets inconsistent with overlapping mapping",
            ));
        }
        for (kk, set) in self.partial_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::rejected(format!("coarse category {} is empty", kk + 1)));
            }
        }
        Ok(())
    }

    /// Structured text form; ids are 1-based on disk.
    pub fn to_text(&self) -> String {
        let mut out = format!("K={} gamma={}\n", self.k, self.gamma);
        for j in 0..self.disjoint.len() {
            let ids: Vec<String> = self.overlapping[j]
                .iter()
                .map(|&kk| (kk + 1).to_string())
                .collect();
            out.push_str(&format!(
                "fine {} disjoint {} overlapping {}\n",
                j + 1,
                self.disjoint[j] + 1,
                ids.join(",")
            ));
        }
        out
    }

    pub fn parse(text: &str, u_csv: &str) -> Result<Hierarchy> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(0, "empty hierarchy file"))?;
        let mut k = None;
        let mut gamma = None;
        for word in header.split_whitespace() {
            match word.split_once('=') {
                Some(("K", v)) => {
                    k = Some(v.parse::<usize>().map_err(|_| {
                        Error::parse(1, format!("K must be an integer, got `{v}`"))
                    })?)
                }
                Some(("gamma", v)) => {
                    gamma = Some(v.parse::<f64>().map_err(|_| {
                        Error::parse(1, format!("gamma must be a float, got `{v}`"))
                    })?)
                }
                _ => return Err(Error::parse(1, format!("unexpected token `{word}`"))),
            }
        }
        let k = k.ok_or_else(|| Error::parse(1, "missing K"))?;
        let gamma = gamma.ok_or_else(|| Error::parse(1, "missing gamma"))?;
        let mut disjoint = Vec::new();
        let mut overlapping = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let at = |detail: String| Error::parse(lineno as u64 + 1, detail);
            let words: Vec<&str> = line.split_whitespace().collect();
            if words.len() != 6 || words[0] != "fine" || words[2] != "disjoint" || words[4] != "overlapping" {
                return Err(at(format!("malformed hierarchy line `{line}`")));
            }
            let j: usize = words[1]
                .parse()
                .map_err(|_| at(format!("bad fine id `{}`", words[1])))?;
            if j != disjoint.len() + 1 {
                return Err(at(format!(
                    "fine ids must be consecutive from 1, got {j} at position {}",
                    disjoint.len() + 1
                )));
            }
            let d: usize = words[3]
                .parse()
                .map_err(|_| at(format!("bad coarse id `{}`", words[3])))?;
            if d == 0 || d > k {
                return Err(at(format!("coarse id {d} outside [1, {k}]")));
            }
            let mut set = Vec::new();
            for tok in words[5].split(',') {
                let v: usize = tok
                    .parse()
                    .map_err(|_| at(format!("bad coarse id `{tok}`")))?;
                if v == 0 || v > k {
                    return Err(at(format!("coarse id {v} outside [1, {k}]")));
                }
                set.push(v - 1);
            }
            set.sort_unstable();
            set.dedup();
            disjoint.push(d - 1);
            overlapping.push(set);
        }
        let c = disjoint.len();
        let mut u = Tensor::zeros(&[k, c]);
        let mut rows = 0;
        for (lineno, line) in u_csv.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if rows >= k {
                return Err(Error::parse(lineno as u64 + 1, "too many rows in u matrix"));
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != c {
                return Err(Error::parse(
                    lineno as u64 + 1,
                    format!("expected {c} columns, got {}", vals.len()),
                ));
            }
            for (col, tok) in vals.iter().enumerate() {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(lineno as u64 + 1, format!("bad value `{tok}`")))?;
                u.set(rows, col, v);
            }
            rows += 1;
        }
        if rows != k {
            return Err(Error::parse(0, format!("u matrix has {rows} rows, expected {k}")));
        }
        let hierarchy = Hierarchy {
            k,
            gamma,
            partial_sets: partial_sets_from(&overlapping, k),
            disjoint,
            overlapping,
            u,
        };
        hierarchy.validate()?;
        Ok(hierarchy)
    }

    pub fn u_to_csv(&self) -> String {
        let mut out = String::new();
        for kk in 0..self.k {
            let row: Vec<String> = (0..self.label_count())
                .map(|j| format!("{}", self.u.at(kk, j)))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, txt_path: &Path, u_path: &Path) -> Result<()> {
        std::fs::write(txt_path, self.to_text())?;
        std::fs::write(u_path, self.u_to_csv())?;
        Ok(())
    }

    pub fn load(txt_path: &Path, u_path: &Path) -> Result<Hierarchy> {
        let text = std::fs::read_to_string(txt_path)?;
        let u_csv = std::fs::read_to_string(u_path)?;
        Hierarchy::parse(&text, &u_csv)
    }
}
