//! Backbone, classification head and projection head.
//!
//! ```text
//! x -> backbone (Linear+ReLU)* -> h -> classifier (Linear) -> logits
//!                                 h -> projector (Linear+ReLU, Linear+ReLU, Linear) -> z -> z/|z|
//! ```

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, norm, Matrix};

/// Added to `|z|` before dividing.
pub const NORM_EPS: f64 = 1e-12;

const CHECKPOINT_MAGIC: &str = "tvmf-lab-params v1";

/// Dense layer `y = W x + b`, `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            let xi = x.row(i);
            let yi = y.row_mut(i);
            for (j, out) in yi.iter_mut().enumerate() {
                *out = self.bias[j] + dot(self.weight.row(j), xi);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear, need_dx: bool) -> Option<Matrix> {
        for i in 0..x.rows() {
            let xi = x.row(i);
            let gi = dy.row(i);
            for (j, &g) in gi.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, xi, grad.weight.row_mut(j));
                    grad.bias[j] += g;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Matrix::zeros(x.rows(), self.input_dim());
        for i in 0..x.rows() {
            let gi = dy.row(i);
            let dxi = dx.row_mut(i);
            for (j, &g) in gi.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, self.weight.row(j), dxi);
                }
            }
        }
        Some(dx)
    }
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn relu_backward(pre: &Matrix, grad: &mut Matrix) {
    for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Dimensions of the full model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            embed_dim: 16,
        }
    }
}

/// All trainable parameters. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub backbone: Vec<Linear>,
    pub classifier: Linear,
    pub projector: [Linear; 3],
    generation: u64,
}

/// Gradients share the parameter layout.
pub type ParamGrads = NetworkParams;

impl NetworkParams {
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || embed_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Shape("network dimensions must all be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(hidden_dims.len());
        let mut width = input_dim;
        for &h in hidden_dims {
            backbone.push(Linear::init(width, h, &mut rng));
            width = h;
        }
        let classifier = Linear::init(width, num_classes, &mut rng);
        let projector = [
            Linear::init(width, width, &mut rng),
            Linear::init(width, width, &mut rng),
            Linear::init(width, embed_dim, &mut rng),
        ];
        Ok(Self {
            backbone,
            classifier,
            projector,
            generation: 0,
        })
    }

    /// Zero-valued parameters with the same shapes.
    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            backbone: self.backbone.iter().map(z).collect(),
            classifier: z(&self.classifier),
            projector: [z(&self.projector[0]), z(&self.projector[1]), z(&self.projector[2])],
            generation: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.backbone
            .first()
            .unwrap_or(&self.classifier)
            .input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector[2].output_dim()
    }

    /// Bumped whenever parameters are mutated through [`Self::tensors_mut`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.classifier))
            .chain(self.projector.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(self.projector.iter_mut())
    }

    /// Flat views of every weight and bias, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    /// Mutable flat views; marks the parameters as changed.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.backbone.len() == other.backbone.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Writes a text checkpoint: a magic line, the layer count, then per
    /// layer `rows cols` followed by the row-major weights and the biases,
    /// one value per line. Values use Rust's shortest round-trip formatting.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "backbone_layers {}", self.backbone.len())?;
        for l in self.layers() {
            writeln!(out, "{} {}", l.weight.rows(), l.weight.cols())?;
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                writeln!(out, "{v}")?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated checkpoint".into()))?
                .map_err(Error::from)
        };
        if next()?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a parameter checkpoint".into()));
        }
        let header = next()?;
        let depth: usize = header
            .strip_prefix("backbone_layers ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad layer count line `{header}`")))?;
        let parse_f = |s: String| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad value `{s}`")))
        };
        let mut layers = Vec::with_capacity(depth + 4);
        for _ in 0..depth + 4 {
            let shape = next()?;
            let dims: Vec<usize> = shape
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad shape `{shape}`"))))
                .collect::<Result<_>>()?;
            let [rows, cols] = dims[..] else {
                return Err(Error::Parse(format!("bad shape `{shape}`")));
            };
            let mut w = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                w.push(parse_f(next()?)?);
            }
            let mut b = Vec::with_capacity(rows);
            for _ in 0..rows {
                b.push(parse_f(next()?)?);
            }
            layers.push(Linear {
                weight: Matrix::from_vec(rows, cols, w)?,
                bias: b,
            });
        }
        let projector: [Linear; 3] = layers.split_off(depth + 1).try_into().expect("three layers");
        let classifier = layers.pop().expect("classifier layer");
        let params = Self {
            backbone: layers,
            classifier,
            projector,
            generation: 0,
        };
        params.check_chain()?;
        Ok(params)
    }

    fn check_chain(&self) -> Result<()> {
        let mut width = self.input_dim();
        for l in &self.backbone {
            if l.input_dim() != width {
                return Err(Error::Shape("backbone layers do not chain".into()));
            }
            width = l.output_dim();
        }
        if self.classifier.input_dim() != width
            || self.projector[0].input_dim() != width
            || self.projector[1].input_dim() != self.projector[0].output_dim()
            || self.projector[2].input_dim() != self.projector[1].output_dim()
        {
            return Err(Error::Shape("head layers do not chain".into()));
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    backbone_pre: Vec<Matrix>,
    backbone_act: Vec<Matrix>,
    proj_pre: [Matrix; 2],
    proj_act: [Matrix; 2],
    projection: Matrix,
    norms: Vec<f64>,
    pub features: Matrix,
    pub logits: Matrix,
    pub embedding: Matrix,
    generation: u64,
}

impl ForwardTrace {
    pub fn rows(&self) -> usize {
        self.input.rows()
    }

    /// Projector output before normalization.
    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

pub fn forward(params: &NetworkParams, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Contract("non-finite network input".into()));
    }
    let mut backbone_pre = Vec::with_capacity(params.backbone.len());
    let mut backbone_act = Vec::with_capacity(params.backbone.len());
    let mut h = x.clone();
    for layer in &params.backbone {
        let pre = layer.forward(&h);
        h = relu(&pre);
        backbone_pre.push(pre);
        backbone_act.push(h.clone());
    }
    let logits = params.classifier.forward(&h);

    let p0 = params.projector[0].forward(&h);
    let a0 = relu(&p0);
    let p1 = params.projector[1].forward(&a0);
    let a1 = relu(&p1);
    let projection = params.projector[2].forward(&a1);

    let mut embedding = projection.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..embedding.rows() {
        let row = embedding.row_mut(i);
        let n = norm(row);
        let d = n + NORM_EPS;
        row.iter_mut().for_each(|v| *v /= d);
        norms.push(n);
    }

    Ok(ForwardTrace {
        input: x.clone(),
        backbone_pre,
        backbone_act,
        proj_pre: [p0, p1],
        proj_act: [a0, a1],
        projection,
        norms,
        features: h,
        logits,
        embedding,
        generation: params.generation(),
    })
}

/// Reverse-mode gradients of the parameters given output gradients.
///
/// Either output gradient may be absent, in which case that head is skipped.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    grad_logits: Option<&Matrix>,
    grad_embedding: Option<&Matrix>,
) -> Result<ParamGrads> {
    if trace.generation != params.generation() {
        return Err(Error::Contract(
            "forward trace is stale: parameters changed since it was recorded".into(),
        ));
    }
    let n = trace.rows();
    let check = |m: &Matrix, cols: usize, what: &str| -> Result<()> {
        if m.rows() != n || m.cols() != cols {
            return Err(Error::Shape(format!(
                "{what} gradient is {}x{}, expected {n}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    };
    let mut grads = params.zeros_like();
    let mut d_features = Matrix::zeros(n, params.feature_dim());

    if let Some(gl) = grad_logits {
        check(gl, params.num_classes(), "logit")?;
        let dh = params
            .classifier
            .backward(&trace.features, gl, &mut grads.classifier, true)
            .expect("dx requested");
        axpy(1.0, dh.as_slice(), d_features.as_mut_slice());
    }

    if let Some(ge) = grad_embedding {
        check(ge, params.embed_dim(), "embedding")?;
        // e = z / (|z| + eps): dz = (g - e <e, g>) / (|z| + eps)
        let mut dz = Matrix::zeros(n, params.embed_dim());
        for i in 0..n {
            let e = trace.embedding.row(i);
            let g = ge.row(i);
            let eg = dot(e, g);
            let d = trace.norms[i] + NORM_EPS;
            for ((out, &gj), &ej) in dz.row_mut(i).iter_mut().zip(g).zip(e) {
                *out = (gj - ej * eg) / d;
            }
        }
        let mut da1 = params.projector[2]
            .backward(&trace.proj_act[1], &dz, &mut grads.projector[2], true)
            .expect("dx requested");
        relu_backward(&trace.proj_pre[1], &mut da1);
        let mut da0 = params.projector[1]
            .backward(&trace.proj_act[0], &da1, &mut grads.projector[1], true)
            .expect("dx requested");
        relu_backward(&trace.proj_pre[0], &mut da0);
        let dh = params.projector[0]
            .backward(&trace.features, &da0, &mut grads.projector[0], true)
            .expect("dx requested");
        axpy(1.0, dh.as_slice(), d_features.as_mut_slice());
    }

    let mut upstream = d_features;
    for k in (0..params.backbone.len()).rev() {
        relu_backward(&trace.backbone_pre[k], &mut upstream);
        let input = if k == 0 { &trace.input } else { &trace.backbone_act[k - 1] };
        match params.backbone[k].backward(input, &upstream, &mut grads.backbone[k], k > 0) {
            Some(dx) => upstream = dx,
            None => break,
        }
    }
    Ok(grads)
}
