//! Small differentiable predictors over a flat parameter vector.
//!
//! Parameter layout is row-major weights then biases, layer by layer:
//!
//! * `LinearSoftmax { d, classes }`: `W (classes × d)`, `b (classes)`.
//! * `Mlp { d, hidden, classes }`: `W1 (hidden × d)`, `b1 (hidden)`,
//!   `W2 (classes × hidden)`, `b2 (classes)`, with a `tanh` hidden layer.
//!
//! Both end in a softmax, so every prediction lies on the simplex.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{LabelDistribution, Sample};
use crate::error::{usage, Error, Result};
use crate::losses::LossSpec;
use crate::math::{dist, dot, softmax};
use crate::rng::RngStream;

const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    LinearSoftmax { d: usize, classes: usize },
    Mlp { d: usize, hidden: usize, classes: usize },
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::LinearSoftmax { d, .. } | Arch::Mlp { d, .. } => d,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::LinearSoftmax { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_len(&self) -> usize {
        match *self {
            Arch::LinearSoftmax { d, classes } => d * classes + classes,
            Arch::Mlp { d, hidden, classes } => d * hidden + hidden + hidden * classes + classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::LinearSoftmax { .. } => "linear",
            Arch::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub arch: Arch,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch, init_seed: u64) -> Result<Self> {
        let ok = match arch {
            Arch::LinearSoftmax { d, classes } => d >= 1 && classes >= 1,
            Arch::Mlp { d, hidden, classes } => d >= 1 && hidden >= 1 && classes >= 1,
        };
        if !ok {
            return Err(usage!("invalid architecture {arch:?}"));
        }
        Ok(Self { arch, init_seed })
    }

    pub fn param_len(&self) -> usize {
        self.arch.param_len()
    }

    /// `0.1 · N(0, 1)` entries drawn from the `init` stream of `init_seed`.
    pub fn init_params(&self) -> ParamVector {
        let mut rng = RngStream::new(self.init_seed, "init").rng();
        ParamVector((0..self.param_len()).map(|_| INIT_SCALE * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    fn check(&self, theta: &ParamVector, x: &[f64]) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(usage!("parameter vector has length {}, {} expects {}", theta.len(), self.arch.name(), self.param_len()));
        }
        if x.len() != self.arch.input_dim() {
            return Err(usage!("input has dimension {}, model expects {}", x.len(), self.arch.input_dim()));
        }
        Ok(())
    }

    /// Final-layer logits and, for the MLP, the hidden activations.
    fn logits(&self, theta: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.arch {
            Arch::LinearSoftmax { d, classes } => {
                let (w, b) = theta.split_at(d * classes);
                let z = w.chunks_exact(d).zip(b).map(|(row, bias)| dot(row, x) + bias).collect();
                (z, Vec::new())
            }
            Arch::Mlp { d, hidden, classes } => {
                let (w1, rest) = theta.split_at(d * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden * classes);
                let h: Vec<f64> = w1.chunks_exact(d).zip(b1).map(|(row, bias)| (dot(row, x) + bias).tanh()).collect();
                let z = w2.chunks_exact(hidden).zip(b2).map(|(row, bias)| dot(row, &h) + bias).collect();
                (z, h)
            }
        }
    }

    pub fn forward(&self, theta: &ParamVector, x: &[f64]) -> Result<LabelDistribution> {
        self.check(theta, x)?;
        let (z, _) = self.logits(theta.as_slice(), x);
        Ok(LabelDistribution::from_simplex(softmax(&z)))
    }

    /// Adds `∇_θ ℓ(f^θ(x), y)` into `acc`.
    fn accumulate_grad(&self, theta: &[f64], sample: &Sample, loss: &LossSpec, acc: &mut [f64]) -> Result<()> {
        let x = &sample.x;
        let (z, h) = self.logits(theta, x);
        let p = softmax(&z);
        let dl_dp = loss.grad(&p, sample.y.probs())?;
        // softmax Jacobian: dz = p ⊙ (g − ⟨g, p⟩)
        let inner = dot(&dl_dp, &p);
        let dz: Vec<f64> = p.iter().zip(&dl_dp).map(|(pi, gi)| pi * (gi - inner)).collect();

        match self.arch {
            Arch::LinearSoftmax { d, classes } => {
                let (gw, gb) = acc.split_at_mut(d * classes);
                for (m, row) in gw.chunks_exact_mut(d).enumerate() {
                    row.iter_mut().zip(x).for_each(|(g, xj)| *g += dz[m] * xj);
                    gb[m] += dz[m];
                }
            }
            Arch::Mlp { d, hidden, classes } => {
                let w2 = &theta[d * hidden + hidden..d * hidden + hidden + hidden * classes];
                let (gw1, rest) = acc.split_at_mut(d * hidden);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden * classes);
                let mut dh = vec![0.0; hidden];
                for m in 0..classes {
                    let row = &w2[m * hidden..(m + 1) * hidden];
                    let grow = &mut gw2[m * hidden..(m + 1) * hidden];
                    for j in 0..hidden {
                        grow[j] += dz[m] * h[j];
                        dh[j] += row[j] * dz[m];
                    }
                    gb2[m] += dz[m];
                }
                for (j, row) in gw1.chunks_exact_mut(d).enumerate() {
                    let da = dh[j] * (1.0 - h[j] * h[j]);
                    row.iter_mut().zip(x).for_each(|(g, xi)| *g += da * xi);
                    gb1[j] += da;
                }
            }
        }
        Ok(())
    }

    /// Exact gradient of the mean mini-batch loss.
    pub fn loss_grad<'a, I>(&self, theta: &ParamVector, batch: I, loss: &LossSpec) -> Result<GradVector>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut acc = vec![0.0; self.param_len()];
        let mut count = 0usize;
        for s in batch {
            self.check(theta, &s.x)?;
            self.accumulate_grad(theta.as_slice(), s, loss, &mut acc)?;
            count += 1;
        }
        if count == 0 {
            return Err(usage!("empty batch"));
        }
        let inv = 1.0 / count as f64;
        acc.iter_mut().for_each(|g| *g *= inv);
        Ok(GradVector(acc))
    }
}

pub fn init_params(spec: &ModelSpec) -> ParamVector {
    spec.init_params()
}

pub fn forward(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<LabelDistribution> {
    spec.forward(theta, x)
}

pub fn loss_grad<'a, I>(spec: &ModelSpec, theta: &ParamVector, batch: I, loss: &LossSpec) -> Result<GradVector>
where
    I: IntoIterator<Item = &'a Sample>,
{
    spec.loss_grad(theta, batch, loss)
}

/// `‖a − b‖`.
pub fn param_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(usage!("parameter vectors differ in length ({} vs {})", a.len(), b.len()));
    }
    Ok(dist(a.as_slice(), b.as_slice()))
}

/// Snapshot text: one header line describing the architecture, then one
/// value per line in shortest round-trip notation.
pub fn snapshot_to_text(arch: &Arch, theta: &ParamVector) -> String {
    let mut out = match *arch {
        Arch::LinearSoftmax { d, classes } => format!("arch=linear d={d} M={classes} len={}\n", theta.len()),
        Arch::Mlp { d, hidden, classes } => format!("arch=mlp d={d} hidden={hidden} M={classes} len={}\n", theta.len()),
    };
    for v in theta.as_slice() {
        let _ = writeln!(out, "{v:e}");
    }
    out
}

pub fn snapshot_from_text(text: &str) -> Result<(Arch, ParamVector)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty snapshot".into() })?;
    let herr = |msg: String| Error::Parse { line: 1, msg };
    let mut kind = None;
    let (mut d, mut hidden, mut classes, mut len) = (None, None, None, None);
    for tok in header.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| herr(format!("bad header token `{tok}`")))?;
        let num = || v.parse::<usize>().map_err(|e| herr(format!("{k}: {e}")));
        match k {
            "arch" => kind = Some(v.to_string()),
            "d" => d = Some(num()?),
            "hidden" => hidden = Some(num()?),
            "M" => classes = Some(num()?),
            "len" => len = Some(num()?),
            _ => return Err(herr(format!("unknown header key `{k}`"))),
        }
    }
    let need = |o: Option<usize>, name: &str| o.ok_or_else(|| herr(format!("missing `{name}`")));
    let arch = match kind.as_deref() {
        Some("linear") => Arch::LinearSoftmax { d: need(d, "d")?, classes: need(classes, "M")? },
        Some("mlp") => Arch::Mlp { d: need(d, "d")?, hidden: need(hidden, "hidden")?, classes: need(classes, "M")? },
        other => return Err(herr(format!("unknown arch {other:?}"))),
    };
    let len = need(len, "len")?;
    if len != arch.param_len() {
        return Err(herr(format!("len={len} does not match {} parameters for the architecture", arch.param_len())));
    }
    let mut values = Vec::with_capacity(len);
    for (i, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        values.push(t.parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("value `{t}`: {e}") })?);
    }
    if values.len() != len {
        return Err(herr(format!("expected {len} values, found {}", values.len())));
    }
    Ok((arch, ParamVector(values)))
}
