//! Small dense-network substrate: row-major matrices, dense layers with
//! analytic backward passes, learned embeddings, masked softmax, Adam and
//! checkpoint files.
//!
//! Gradients are chained by hand per architecture (see `nets`); there is no
//! general tape.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("mask selects no entry")]
    EmptyMask,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

fn expect_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(NeuralError::Dimension { expected, found })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        expect_len(rows * cols, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NeuralError::NonFinite("tensor data"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                axpy(alpha * ui, v, self.row_mut(i));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// `activation(W x + b)` with `W` stored as (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self { weight: Tensor2::glorot(output, input, rng), bias: vec![0.0; output], activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }
    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        expect_len(self.input_dim(), x.len())?;
        Ok(self.forward_unchecked(x))
    }

    #[inline]
    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let act = self.activation;
        (0..self.output_dim()).map(|i| act.apply(dot(self.weight.row(i), x) + self.bias[i])).collect()
    }

    /// Gradients of `upstream · layer(input)` wrt the parameters and the
    /// input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(DenseLayer, Vec<f64>)> {
        expect_len(self.input_dim(), input.len())?;
        expect_len(self.output_dim(), upstream.len())?;
        let output = self.forward_unchecked(input);
        let mut grads = self.zeros_like();
        let dx = self.accumulate_backward(input, &output, upstream, &mut grads);
        Ok((grads, dx))
    }

    /// Adds parameter gradients into `grads` and returns the input gradient.
    pub(crate) fn accumulate_backward(&self, input: &[f64], output: &[f64], upstream: &[f64], grads: &mut DenseLayer) -> Vec<f64> {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(output)
            .map(|(&u, &y)| u * self.activation.derivative_at_output(y))
            .collect();
        grads.weight.add_outer(1.0, &delta, input);
        axpy(1.0, &delta, &mut grads.bias);
        self.weight.matvec_t(&delta)
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Tensor2::zeros(self.weight.rows, self.weight.cols), bias: vec![0.0; self.bias.len()], activation: self.activation }
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(input: usize, widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for &w in widths {
            layers.push(DenseLayer::new(prev, w, activation, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        self.layers.last().map_or(input, DenseLayer::output_dim)
    }

    /// Activations of every layer, input included: `[x, a1, ..., an]`.
    pub(crate) fn forward_cached(&self, x: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = layer.forward_unchecked(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    pub(crate) fn backward(&self, acts: &[Vec<f64>], upstream: Vec<f64>, grads: &mut Mlp) -> Vec<f64> {
        let mut g = upstream;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.accumulate_backward(&acts[i], &acts[i + 1], &g, &mut grads.layers[i]);
        }
        g
    }

    fn tensors<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
    }

    fn describe(&self, prefix: &str, out: &mut Vec<(String, usize, usize)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.rows, l.weight.cols));
            out.push((format!("{prefix}.{i}.bias"), 1, l.bias.len()));
        }
    }
}

/// Linear projection of numeric features plus one learned lookup row per
/// categorical slot. Row 0 of every table is the padding id and stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub projection: DenseLayer,
    pub tables: Vec<Tensor2>,
}

impl Embedding {
    pub fn new(numeric: usize, vocabularies: &[usize], dim: usize, rng: &mut impl Rng) -> Self {
        let projection = DenseLayer::new(numeric, dim, Activation::Identity, rng);
        let tables = vocabularies
            .iter()
            .map(|&v| {
                let mut t = Tensor2::glorot(v + 1, dim, rng);
                t.row_mut(0).fill(0.0);
                t
            })
            .collect();
        Self { projection, tables }
    }

    pub fn dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub(crate) fn forward(&self, numeric: &[f64], ids: &[usize]) -> Vec<f64> {
        let mut out = self.projection.forward_unchecked(numeric);
        for (table, &id) in self.tables.iter().zip(ids) {
            axpy(1.0, table.row(id), &mut out);
        }
        out
    }

    /// Accumulates parameter gradients; returns the numeric-input gradient.
    pub(crate) fn backward(&self, numeric: &[f64], ids: &[usize], output: &[f64], upstream: &[f64], grads: &mut Embedding) -> Vec<f64> {
        for (table, &id) in grads.tables.iter_mut().zip(ids) {
            if id != 0 {
                axpy(1.0, upstream, table.row_mut(id));
            }
        }
        // identity activation: output only matters through its length
        debug_assert_eq!(output.len(), upstream.len());
        self.projection.accumulate_backward(numeric, output, upstream, &mut grads.projection)
    }

    fn tensors<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        out.push(self.projection.weight.data());
        out.push(&self.projection.bias);
        for t in &self.tables {
            out.push(t.data());
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.projection.weight.data_mut());
        out.push(&mut self.projection.bias);
        for t in &mut self.tables {
            out.push(t.data_mut());
        }
    }

    fn describe(&self, prefix: &str, out: &mut Vec<(String, usize, usize)>) {
        let p = &self.projection;
        out.push((format!("{prefix}.proj.weight"), p.weight.rows, p.weight.cols));
        out.push((format!("{prefix}.proj.bias"), 1, p.bias.len()));
        for (i, t) in self.tables.iter().enumerate() {
            out.push((format!("{prefix}.table{i}"), t.rows, t.cols));
        }
    }
}

/// A network's trainable parameters as an ordered list of flat tensors.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// `(name, rows, cols)` per tensor, in `tensors()` order.
    fn layout(&self) -> Vec<(String, usize, usize)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, b, a);
        }
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Helpers for composite `ParamSet` implementations.
pub(crate) mod parts {
    use super::*;

    pub fn mlp<'a>(m: &'a Mlp, out: &mut Vec<&'a [f64]>) {
        m.tensors(out)
    }
    pub fn mlp_mut<'a>(m: &'a mut Mlp, out: &mut Vec<&'a mut [f64]>) {
        m.tensors_mut(out)
    }
    pub fn mlp_layout(m: &Mlp, prefix: &str, out: &mut Vec<(String, usize, usize)>) {
        m.describe(prefix, out)
    }
    pub fn emb<'a>(e: &'a Embedding, out: &mut Vec<&'a [f64]>) {
        e.tensors(out)
    }
    pub fn emb_mut<'a>(e: &'a mut Embedding, out: &mut Vec<&'a mut [f64]>) {
        e.tensors_mut(out)
    }
    pub fn emb_layout(e: &Embedding, prefix: &str, out: &mut Vec<(String, usize, usize)>) {
        e.describe(prefix, out)
    }
}

/// Softmax over the unmasked entries; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    expect_len(logits.len(), mask.len())?;
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NeuralError::EmptyMask);
    }
    if !max.is_finite() {
        return Err(NeuralError::NonFinite("logits"));
    }
    let mut out: Vec<f64> = logits.iter().zip(mask).map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 }).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Gradient wrt the logits given the upstream gradient wrt the
/// probabilities. Zero at masked positions since their probability is zero.
pub fn masked_softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(probs, upstream);
    probs.iter().zip(upstream).map(|(&p, &u)| p * (u - inner)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &impl ParamSet, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam descent step (`params -= lr * m̂ / (sqrt(v̂) + ε)`).
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grads = grads.tensors();
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(NeuralError::NonFinite("gradient"));
    }
    let mut params = params.tensors_mut();
    expect_len(state.first.len(), params.len())?;
    expect_len(params.len(), grads.len())?;
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
        expect_len(state.first[i].len(), p.len())?;
        expect_len(p.len(), g.len())?;
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

const CHECKPOINT_FORMAT: &str = "opa-params";

/// Write all tensors with names and shapes, plus a self-describing config.
pub fn save_checkpoint(path: impl AsRef<Path>, kind: &str, config: &impl Serialize, params: &impl ParamSet) -> Result<()> {
    let tensors = params
        .layout()
        .into_iter()
        .zip(params.tensors())
        .map(|((name, rows, cols), data)| TensorRecord { name, rows, cols, data: data.to_vec() })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(|e| NeuralError::Checkpoint(e.to_string()))?,
        tensors,
    };
    let text = serde_json::to_string(&file).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Read the config block of a checkpoint of the given kind.
pub fn read_checkpoint_config<C: for<'de> Deserialize<'de>>(path: impl AsRef<Path>, kind: &str) -> Result<C> {
    let file = read_file(path.as_ref(), kind)?;
    serde_json::from_value(file.config).map_err(|e| NeuralError::Checkpoint(e.to_string()))
}

fn read_file(path: &Path, kind: &str) -> Result<CheckpointFile> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != 1 {
        return Err(NeuralError::Checkpoint(format!("unsupported format {} v{}", file.format, file.version)));
    }
    if file.kind != kind {
        return Err(NeuralError::Checkpoint(format!("expected a {kind} checkpoint, found {}", file.kind)));
    }
    Ok(file)
}

/// Fill `params` (already built with the right architecture) from a
/// checkpoint. Any name or shape disagreement is an error.
pub fn load_checkpoint_into(path: impl AsRef<Path>, kind: &str, params: &mut impl ParamSet) -> Result<()> {
    let file = read_file(path.as_ref(), kind)?;
    let layout = params.layout();
    if layout.len() != file.tensors.len() {
        return Err(NeuralError::Checkpoint(format!("expected {} tensors, found {}", layout.len(), file.tensors.len())));
    }
    for ((name, rows, cols), rec) in layout.iter().zip(&file.tensors) {
        if *name != rec.name || *rows != rec.rows || *cols != rec.cols || rec.data.len() != rows * cols {
            return Err(NeuralError::Checkpoint(format!(
                "tensor {} has shape {}x{}, expected {name} {rows}x{cols}",
                rec.name, rec.rows, rec.cols
            )));
        }
        if rec.data.iter().any(|x| !x.is_finite()) {
            return Err(NeuralError::NonFinite("checkpoint tensor"));
        }
    }
    for (dst, rec) in params.tensors_mut().into_iter().zip(file.tensors) {
        dst.copy_from_slice(&rec.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone)]
    struct One(DenseLayer);

    impl ParamSet for One {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![self.0.weight.data(), &self.0.bias]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![self.0.weight.data_mut(), &mut self.0.bias]
        }
        fn layout(&self) -> Vec<(String, usize, usize)> {
            vec![("w".into(), self.0.weight.rows(), self.0.weight.cols()), ("b".into(), 1, self.0.bias.len())]
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut w = Tensor2::zeros(3, 3);
        for i in 0..3 {
            w.row_mut(i)[i] = 1.0;
        }
        let layer = DenseLayer { weight: w, bias: vec![0.0; 3], activation: Activation::Identity };
        assert_eq!(layer.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn relu_definition() {
        let layer = DenseLayer {
            weight: Tensor2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: vec![0.0; 2],
            activation: Activation::Relu,
        };
        assert_eq!(layer.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = DenseLayer::new(3, 2, Activation::Relu, &mut rng);
        assert!(matches!(layer.forward(&[1.0, 2.0]), Err(NeuralError::Dimension { expected: 3, found: 2 })));
    }

    /// Central differences on `u · layer(x)` for every activation.
    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for act in [Activation::Relu, Activation::Sigmoid, Activation::Identity] {
            for _ in 0..20 {
                let (n_in, n_out) = (rng.random_range(1..6), rng.random_range(1..6));
                let mut layer = DenseLayer::new(n_in, n_out, act, &mut rng);
                layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
                let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
                let u: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
                let f = |l: &DenseLayer, x: &[f64]| dot(&l.forward(x).unwrap(), &u);
                let (grads, dx) = layer.backward(&x, &u).unwrap();
                let h = 1e-5;
                for i in 0..n_in {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * h);
                    assert!(rel_err(fd, dx[i]) < 1e-5 || (fd - dx[i]).abs() < 1e-8, "{act:?} dx {fd} vs {}", dx[i]);
                }
                let mut p = One(layer.clone());
                let g = One(grads);
                let analytic: Vec<f64> = g.tensors().concat();
                let mut k = 0;
                for t in 0..2 {
                    let len = p.tensors()[t].len();
                    for j in 0..len {
                        p.tensors_mut()[t][j] += h;
                        let fp = f(&p.0, &x);
                        p.tensors_mut()[t][j] -= 2.0 * h;
                        let fm = f(&p.0, &x);
                        p.tensors_mut()[t][j] += h;
                        let fd = (fp - fm) / (2.0 * h);
                        assert!(rel_err(fd, analytic[k]) < 1e-5 || (fd - analytic[k]).abs() < 1e-8);
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_symmetry_masking_and_stability() {
        assert_eq!(masked_softmax(&[0.0, 0.0], &[true, true]).unwrap(), vec![0.5, 0.5]);
        let p = masked_softmax(&[0.3, 7.0, -1.0], &[true, false, true]).unwrap();
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = masked_softmax(&[1000.0, 1001.0], &[true, true]).unwrap();
        assert!(p.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!((p[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert!(matches!(masked_softmax(&[1.0, 2.0], &[false, false]), Err(NeuralError::EmptyMask)));
    }

    #[test]
    fn softmax_backward_matches_finite_differences_and_ignores_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = masked_softmax(&logits, &mask).unwrap();
            let g = masked_softmax_backward(&p, &u);
            for i in 0..n {
                if !mask[i] {
                    assert_eq!(g[i], 0.0);
                    continue;
                }
                let h = 1e-5;
                let (mut lp, mut lm) = (logits.clone(), logits.clone());
                lp[i] += h;
                lm[i] -= h;
                let fd = (dot(&masked_softmax(&lp, &mask).unwrap(), &u) - dot(&masked_softmax(&lm, &mask).unwrap(), &u)) / (2.0 * h);
                assert!(rel_err(fd, g[i]) < 1e-5 || (fd - g[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = One(DenseLayer::new(3, 2, Activation::Relu, &mut rng));
        let before = p.0.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p, 1e-3);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p.0, before);
    }

    /// First step: m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
    #[test]
    fn adam_first_step_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = One(DenseLayer::new(2, 2, Activation::Relu, &mut rng));
        let before = p.clone();
        let mut g = p.zeros_like();
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.37));
        let mut st = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = 1e-3 * 0.37 / (0.37 + 1e-8);
        for (a, b) in before.tensors().concat().iter().zip(p.tensors().concat()) {
            assert!(((a - b) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut p = One(DenseLayer::new(4, 3, Activation::Sigmoid, &mut rng));
            let mut st = AdamState::new(&p, 1e-3);
            for s in 0..10 {
                let mut g = p.zeros_like();
                g.tensors_mut().into_iter().flatten().enumerate().for_each(|(i, x)| *x = ((i + s) as f64).sin());
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p.0
        };
        assert_eq!(run(), run());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = One(DenseLayer::new(2, 2, Activation::Relu, &mut rng));
        let mut g = p.zeros_like();
        g.0.bias[0] = f64::NAN;
        let mut st = AdamState::new(&p, 1e-3);
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(NeuralError::NonFinite(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = One(DenseLayer::new(3, 2, Activation::Relu, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_checkpoint(&path, "one", &(3, 2), &p).unwrap();
        let mut q = One(DenseLayer::new(3, 2, Activation::Relu, &mut rng));
        load_checkpoint_into(&path, "one", &mut q).unwrap();
        assert_eq!(p.0, q.0);
        let cfg: (usize, usize) = read_checkpoint_config(&path, "one").unwrap();
        assert_eq!(cfg, (3, 2));
        let mut wrong = One(DenseLayer::new(4, 2, Activation::Relu, &mut rng));
        assert!(load_checkpoint_into(&path, "one", &mut wrong).is_err());
        assert!(load_checkpoint_into(&path, "other", &mut q).is_err());
    }
}
