//! Label distributions, synthetic datasets, mini-batch partitions and batch
//! index sequences.
//!
//! All indices are zero-based: class `0..classes`, batch `0..k`, step
//! position `0..T`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{usage, Error, Result};
use crate::math::{argmax, norm};
use crate::rng::RngStream;

/// Default spread of the Gaussian label distribution.
pub const DEFAULT_LABEL_SIGMA: f64 = 2.0;

/// A probability vector over the `M` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates positivity and normalization (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(usage!("label distribution needs at least one class"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Domain("label distribution entries must be finite and > 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("label distribution sums to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Wraps a softmax output without re-validating it.
    pub(crate) fn from_simplex(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for LabelDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Discretized Gaussian `∝ exp(-(m - center)² / 2σ²)` over `m = 0..classes`.
pub fn make_label_distribution(center: usize, classes: usize, sigma: f64) -> Result<LabelDistribution> {
    if classes == 0 || center >= classes {
        return Err(usage!("center {center} outside 0..{classes}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(usage!("label sigma must be positive, got {sigma}"));
    }
    let denom = 2.0 * sigma * sigma;
    let mut probs: Vec<f64> = (0..classes)
        .map(|m| {
            let d = m as f64 - center as f64;
            (-d * d / denom).exp()
        })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    // Very small sigma can underflow far bins to zero.
    if probs.iter().any(|&p| p <= 0.0) {
        return Err(Error::Domain(format!("sigma {sigma} too small for {classes} classes: zero mass bins")));
    }
    LabelDistribution::new(probs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Features, `‖x‖ ≤ 1`.
    pub x: Vec<f64>,
    pub y: LabelDistribution,
    pub label: usize,
}

/// Generation parameters carried alongside a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMeta {
    pub dim: usize,
    pub classes: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, meta: DatasetMeta) -> Result<Self> {
        if samples.len() < 2 {
            return Err(usage!("dataset needs at least two samples, got {}", samples.len()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != meta.dim || s.y.classes() != meta.classes {
                return Err(usage!("sample {i} has shape ({}, {}), expected ({}, {})", s.x.len(), s.y.classes(), meta.dim, meta.classes));
            }
        }
        Ok(Self { samples, meta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn meta(&self) -> DatasetMeta {
        self.meta
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Samples selected by index, in order.
    pub fn select<'a>(&'a self, indices: &'a [usize]) -> impl Iterator<Item = &'a Sample> + Clone + 'a {
        indices.iter().map(move |&i| &self.samples[i])
    }

    /// Plain-text export: a header line, then one line per sample with the
    /// features followed by the integer label. Floats use shortest
    /// round-trip scientific notation, so `from_text(to_text())` is exact.
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = format!("N={} d={} M={} sigma={:e} seed={}\n", self.len(), m.dim, m.classes, m.sigma, m.seed);
        for s in &self.samples {
            for v in &s.x {
                let _ = write!(out, "{v:e} ");
            }
            let _ = writeln!(out, "{}", s.label);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty input".into() })?;
        let header_err = |msg: String| Error::Parse { line: 1, msg };
        let mut fields = [None::<&str>; 5];
        for tok in header.split_whitespace() {
            let (key, val) = tok.split_once('=').ok_or_else(|| header_err(format!("bad header token `{tok}`")))?;
            let slot = match key {
                "N" => 0,
                "d" => 1,
                "M" => 2,
                "sigma" => 3,
                "seed" => 4,
                _ => return Err(header_err(format!("unknown header key `{key}`"))),
            };
            fields[slot] = Some(val);
        }
        let get = |i: usize, name: &str| fields[i].ok_or_else(|| header_err(format!("missing `{name}`")));
        let n: usize = get(0, "N")?.parse().map_err(|e| header_err(format!("N: {e}")))?;
        let dim: usize = get(1, "d")?.parse().map_err(|e| header_err(format!("d: {e}")))?;
        let classes: usize = get(2, "M")?.parse().map_err(|e| header_err(format!("M: {e}")))?;
        let sigma: f64 = get(3, "sigma")?.parse().map_err(|e| header_err(format!("sigma: {e}")))?;
        let seed: u64 = get(4, "seed")?.parse().map_err(|e| header_err(format!("seed: {e}")))?;
        let meta = DatasetMeta { dim, classes, sigma, seed };

        let mut samples = Vec::with_capacity(n);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let perr = |msg: String| Error::Parse { line: lineno, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != dim + 1 {
                return Err(perr(format!("expected {} fields, found {}", dim + 1, toks.len())));
            }
            let x = toks[..dim]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| perr(format!("feature `{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let label: usize = toks[dim].parse().map_err(|e| perr(format!("label: {e}")))?;
            let y = make_label_distribution(label, classes, sigma).map_err(|e| perr(e.to_string()))?;
            samples.push(Sample { x, y, label });
        }
        if samples.len() != n {
            return Err(Error::Parse { line: 1, msg: format!("header says N={n}, found {} samples", samples.len()) });
        }
        Dataset::new(samples, meta)
    }
}

/// Ground-truth process behind the synthetic datasets: features uniform in
/// the unit ball, label = argmax of a fixed random linear map plus Gaussian
/// score noise, target = Gaussian label distribution around that label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGenerator {
    dim: usize,
    classes: usize,
    sigma: f64,
    seed: u64,
    /// `classes × dim`, row-major.
    weights: Vec<f64>,
}

impl SyntheticGenerator {
    const WEIGHT_SCALE: f64 = 3.0;
    const SCORE_NOISE: f64 = 0.5;

    pub fn new(dim: usize, classes: usize, sigma: f64, seed: u64) -> Result<Self> {
        if dim < 1 || classes < 2 {
            return Err(usage!("synthetic data needs d >= 1 and M >= 2 (got d={dim}, M={classes})"));
        }
        // validates sigma
        make_label_distribution(0, classes, sigma)?;
        let mut rng = RngStream::new(seed, "truth").rng();
        let weights = (0..dim * classes)
            .map(|_| Self::WEIGHT_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self { dim, classes, sigma, seed, weights })
    }

    pub fn from_meta(meta: DatasetMeta) -> Result<Self> {
        Self::new(meta.dim, meta.classes, meta.sigma, meta.seed)
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta { dim: self.dim, classes: self.classes, sigma: self.sigma, seed: self.seed }
    }

    /// Draws `n` samples from the stream.
    pub fn draw(&self, n: usize, stream: &RngStream) -> Vec<Sample> {
        let mut rng = stream.rng();
        (0..n).map(|_| self.draw_one(&mut rng)).collect()
    }

    fn draw_one<R: Rng>(&self, rng: &mut R) -> Sample {
        // Uniform in the unit ball: random direction, radius u^(1/d).
        let mut x: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm(&x);
        let radius = rng.random::<f64>().powf(1.0 / self.dim as f64);
        let scale = if len > 0.0 { radius / len } else { 0.0 };
        x.iter_mut().for_each(|v| *v *= scale);
        // Guard against rounding pushing the norm a hair above one.
        let len = norm(&x);
        if len > 1.0 {
            x.iter_mut().for_each(|v| *v /= len);
        }

        let scores: Vec<f64> = self
            .weights
            .chunks_exact(self.dim)
            .map(|row| {
                let s: f64 = row.iter().zip(&x).map(|(w, v)| w * v).sum();
                s + Self::SCORE_NOISE * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let label = argmax(&scores);
        let y = make_label_distribution(label, self.classes, self.sigma).expect("sigma validated at construction");
        Sample { x, y, label }
    }
}

/// `n` samples with `d` features over `classes` classes. The ground-truth
/// map is keyed by `rng.seed()`; the draws come from `rng` itself.
pub fn gen_synthetic_dataset(n: usize, d: usize, classes: usize, sigma: f64, rng: &RngStream) -> Result<Dataset> {
    if n < 2 {
        return Err(usage!("dataset size must be >= 2, got {n}"));
    }
    let gen = SyntheticGenerator::new(d, classes, sigma, rng.seed())?;
    Dataset::new(gen.draw(n, rng), gen.meta())
}

/// `k` equally sized mini-batches of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    batches: Vec<Vec<usize>>,
    batch_size: usize,
}

impl Partition {
    pub fn from_batches(batches: Vec<Vec<usize>>) -> Result<Self> {
        let batch_size = batches.first().map(Vec::len).unwrap_or(0);
        if batches.len() < 2 || batch_size == 0 {
            return Err(usage!("partition needs at least two non-empty batches"));
        }
        if batches.iter().any(|b| b.len() != batch_size) {
            return Err(usage!("all batches must have size {batch_size}"));
        }
        Ok(Self { batches, batch_size })
    }

    pub fn k(&self) -> usize {
        self.batches.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batch(&self, i: usize) -> &[usize] {
        &self.batches[i]
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    /// Total entries including padding repeats.
    pub fn padded_len(&self) -> usize {
        self.k() * self.batch_size
    }
}

/// Shuffles the sample indices into `k` batches. When `k` does not divide
/// `N`, the last sample is repeated until it does.
pub fn partition(ds: &Dataset, k: usize, rng: &RngStream) -> Result<Partition> {
    let n = ds.len();
    if !(1 < k && k < n) {
        return Err(usage!("partition requires 1 < k < N (k={k}, N={n})"));
    }
    let padded = n.div_ceil(k) * k;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.resize(padded, n - 1);
    idx.shuffle(&mut rng.rng());
    let b = padded / k;
    let batches = idx.chunks_exact(b).map(<[usize]>::to_vec).collect();
    Ok(Partition { batches, batch_size: b })
}

/// Neighbouring partition: batch `batch_idx` replaced by `b` fresh samples
/// from the dataset's generator. The fresh samples are appended to a copy of
/// the dataset; every other batch is untouched.
pub fn neighbor_partition(p: &Partition, ds: &Dataset, batch_idx: usize, rng: &RngStream) -> Result<(Partition, Dataset)> {
    if batch_idx >= p.k() {
        return Err(usage!("batch index {batch_idx} outside 0..{}", p.k()));
    }
    let gen = SyntheticGenerator::from_meta(ds.meta())?;
    let fresh = gen.draw(p.batch_size(), rng);
    let start = ds.len();
    let mut samples = ds.samples().to_vec();
    samples.extend(fresh);
    let mut batches = p.batches.clone();
    batches[batch_idx] = (start..start + p.batch_size()).collect();
    Ok((Partition { batches, batch_size: p.batch_size() }, Dataset::new(samples, ds.meta())?))
}

/// The random batch-index sequence `R`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSequence {
    indices: Vec<usize>,
    k: usize,
}

impl BatchSequence {
    pub fn new(indices: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(usage!("batch index {bad} outside 0..{k}"));
        }
        Ok(Self { indices, k })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// `steps` uniform draws from `0..k`.
pub fn sample_sequence(k: usize, steps: usize, rng: &RngStream) -> Result<BatchSequence> {
    if k < 2 || steps < 1 {
        return Err(usage!("sample_sequence requires k >= 2 and T >= 1 (k={k}, T={steps})"));
    }
    let mut r = rng.rng();
    let indices = (0..steps).map(|_| r.random_range(0..k)).collect();
    Ok(BatchSequence { indices, k })
}

/// Exchanges the entries at positions `i < j`.
pub fn swap_two(r: &BatchSequence, i: usize, j: usize) -> Result<BatchSequence> {
    if !(i < j && j < r.len()) {
        return Err(usage!("swap positions must satisfy i < j < T (i={i}, j={j}, T={})", r.len()));
    }
    let mut out = r.clone();
    out.indices.swap(i, j);
    Ok(out)
}
