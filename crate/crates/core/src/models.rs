//! Classifier models over flat parameter vectors: a softmax-linear model and a
//! one-hidden-layer tanh MLP. Loss is mean cross-entropy with log-sum-exp
//! stabilization; gradients are hand-rolled backprop (verified against the
//! finite-difference oracle in tests).
//!
//! Parameter layout (row-major, biases after their weight block):
//! - softmax_linear: `W[c][j]` at `c·d + j`, then `b[c]` at `C·d + c`.
//! - mlp1: `W1[h][j]`, `b1[h]`, `W2[c][h]`, `b2[c]` in that order.

use crate::numkit::{ParamVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SoftmaxLinear,
    /// One hidden layer with tanh activation.
    Mlp1 { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax_linear(input_dim: usize, num_classes: usize) -> Self {
        assert!(input_dim >= 1 && num_classes >= 2);
        Self {
            kind: ModelKind::SoftmaxLinear,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        assert!(input_dim >= 1 && hidden_dim >= 1 && num_classes >= 2);
        Self {
            kind: ModelKind::Mlp1 { hidden_dim },
            input_dim,
            num_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::SoftmaxLinear => (self.input_dim + 1) * self.num_classes,
            ModelKind::Mlp1 { hidden_dim } => {
                (self.input_dim + 1) * hidden_dim + (hidden_dim + 1) * self.num_classes
            }
        }
    }
}

/// A labeled minibatch. Rows are owned; construction checks shape consistency.
#[derive(Debug, Clone)]
pub struct Batch {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Self {
        assert_eq!(features.len(), labels.len(), "features/labels length mismatch");
        assert!(!features.is_empty(), "empty batch");
        let dim = features[0].len();
        assert!(features.iter().all(|f| f.len() == dim), "ragged feature rows");
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty batches
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// I.i.d. uniform draw in [−0.05, 0.05) per coordinate.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> ParamVector {
    let n = spec.param_count();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(rng.uniform(-0.05, 0.05));
    }
    ParamVector::new(values)
}

struct Forward {
    logits: Vec<f64>,
    /// tanh activations, mlp1 only.
    hidden: Option<Vec<f64>>,
}

fn forward(spec: &ModelSpec, w: &[f64], x: &[f64]) -> Forward {
    let d = spec.input_dim;
    let c_out = spec.num_classes;
    debug_assert_eq!(x.len(), d, "feature dimension mismatch");
    match spec.kind {
        ModelKind::SoftmaxLinear => {
            let bias_at = c_out * d;
            let mut logits = Vec::with_capacity(c_out);
            for c in 0..c_out {
                let row = &w[c * d..(c + 1) * d];
                let mut z = w[bias_at + c];
                for (wi, xi) in row.iter().zip(x) {
                    z += wi * xi;
                }
                logits.push(z);
            }
            Forward { logits, hidden: None }
        }
        ModelKind::Mlp1 { hidden_dim } => {
            let b1_at = hidden_dim * d;
            let w2_at = b1_at + hidden_dim;
            let b2_at = w2_at + c_out * hidden_dim;
            let mut hidden = Vec::with_capacity(hidden_dim);
            for h in 0..hidden_dim {
                let row = &w[h * d..(h + 1) * d];
                let mut a = w[b1_at + h];
                for (wi, xi) in row.iter().zip(x) {
                    a += wi * xi;
                }
                hidden.push(a.tanh());
            }
            let mut logits = Vec::with_capacity(c_out);
            for c in 0..c_out {
                let row = &w[w2_at + c * hidden_dim..w2_at + (c + 1) * hidden_dim];
                let mut z = w[b2_at + c];
                for (wi, hi) in row.iter().zip(&hidden) {
                    z += wi * hi;
                }
                logits.push(z);
            }
            Forward {
                logits,
                hidden: Some(hidden),
            }
        }
    }
}

/// Log-softmax of `logits`, stabilized by subtracting the max.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Accumulates the parameter gradient of `Σ_c residual[c] · logit_c(x)` into
/// `grad`. `hidden` must come from the same forward pass for mlp1.
fn backprop_logits(
    spec: &ModelSpec,
    w: &[f64],
    x: &[f64],
    hidden: Option<&[f64]>,
    residual: &[f64],
    grad: &mut [f64],
) {
    let d = spec.input_dim;
    let c_out = spec.num_classes;
    match spec.kind {
        ModelKind::SoftmaxLinear => {
            let bias_at = c_out * d;
            for (c, r) in residual.iter().enumerate() {
                if *r == 0.0 {
                    continue;
                }
                let row = &mut grad[c * d..(c + 1) * d];
                for (gi, xi) in row.iter_mut().zip(x) {
                    *gi += r * xi;
                }
                grad[bias_at + c] += r;
            }
        }
        ModelKind::Mlp1 { hidden_dim } => {
            let hidden = hidden.expect("mlp1 backprop needs hidden activations");
            let b1_at = hidden_dim * d;
            let w2_at = b1_at + hidden_dim;
            let b2_at = w2_at + c_out * hidden_dim;
            let mut d_hidden = vec![0.0; hidden_dim];
            for (c, r) in residual.iter().enumerate() {
                if *r == 0.0 {
                    continue;
                }
                let w2_row = &w[w2_at + c * hidden_dim..w2_at + (c + 1) * hidden_dim];
                let g2_row = &mut grad[w2_at + c * hidden_dim..w2_at + (c + 1) * hidden_dim];
                for h in 0..hidden_dim {
                    g2_row[h] += r * hidden[h];
                    d_hidden[h] += r * w2_row[h];
                }
                grad[b2_at + c] += r;
            }
            for h in 0..hidden_dim {
                // d tanh(a)/da = 1 − tanh²(a)
                let da = d_hidden[h] * (1.0 - hidden[h] * hidden[h]);
                if da == 0.0 {
                    continue;
                }
                let g1_row = &mut grad[h * d..(h + 1) * d];
                for (gi, xi) in g1_row.iter_mut().zip(x) {
                    *gi += da * xi;
                }
                grad[b1_at + h] += da;
            }
        }
    }
}

fn check_shapes(spec: &ModelSpec, w: &ParamVector, batch: &Batch) {
    assert_eq!(w.dim(), spec.param_count(), "parameter count mismatch");
    assert_eq!(batch.feature_dim(), spec.input_dim, "feature dimension mismatch");
    assert!(
        batch.labels().iter().all(|&y| y < spec.num_classes),
        "label out of range"
    );
}

/// Mean cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> f64 {
    check_shapes(spec, w, batch);
    let wv = w.values();
    let mut total = 0.0;
    for (x, &y) in batch.features().iter().zip(batch.labels()) {
        let fw = forward(spec, wv, x);
        let logp = log_softmax(&fw.logits);
        total -= logp[y];
    }
    total / batch.len() as f64
}

/// Gradient of [`loss`] with respect to `w`.
pub fn grad(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> ParamVector {
    check_shapes(spec, w, batch);
    let wv = w.values();
    let mut g = vec![0.0; w.dim()];
    let inv_n = 1.0 / batch.len() as f64;
    let mut residual = vec![0.0; spec.num_classes];
    for (x, &y) in batch.features().iter().zip(batch.labels()) {
        let fw = forward(spec, wv, x);
        let logp = log_softmax(&fw.logits);
        for (c, r) in residual.iter_mut().enumerate() {
            *r = (logp[c].exp() - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
        backprop_logits(spec, wv, x, fw.hidden.as_deref(), &residual, &mut g);
    }
    ParamVector::new(g)
}

/// Fraction of the batch classified correctly; argmax ties resolve to the
/// lowest class index.
pub fn accuracy(spec: &ModelSpec, w: &ParamVector, batch: &Batch) -> f64 {
    check_shapes(spec, w, batch);
    let wv = w.values();
    let mut hits = 0usize;
    for (x, &y) in batch.features().iter().zip(batch.labels()) {
        let fw = forward(spec, wv, x);
        let mut best = 0usize;
        for (c, z) in fw.logits.iter().enumerate().skip(1) {
            if *z > fw.logits[best] {
                best = c;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / batch.len() as f64
}

/// Mean KL(softmax(anchor logits) ‖ softmax(w logits)) over the batch, at
/// temperature 1. The anchor acts as a frozen teacher.
pub fn distill_kl(spec: &ModelSpec, w: &ParamVector, anchor: &ParamVector, batch: &Batch) -> f64 {
    check_shapes(spec, w, batch);
    assert_eq!(anchor.dim(), w.dim(), "anchor dimension mismatch");
    let wv = w.values();
    let av = anchor.values();
    let mut total = 0.0;
    for x in batch.features() {
        let logp_s = log_softmax(&forward(spec, wv, x).logits);
        let logp_t = log_softmax(&forward(spec, av, x).logits);
        for c in 0..spec.num_classes {
            let pt = logp_t[c].exp();
            total += pt * (logp_t[c] - logp_s[c]);
        }
    }
    total / batch.len() as f64
}

/// Gradient of [`distill_kl`] with respect to `w` (the anchor is constant).
pub fn distill_kl_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    anchor: &ParamVector,
    batch: &Batch,
) -> ParamVector {
    check_shapes(spec, w, batch);
    assert_eq!(anchor.dim(), w.dim(), "anchor dimension mismatch");
    let wv = w.values();
    let av = anchor.values();
    let mut g = vec![0.0; w.dim()];
    let inv_n = 1.0 / batch.len() as f64;
    let mut residual = vec![0.0; spec.num_classes];
    for x in batch.features() {
        let fw = forward(spec, wv, x);
        let logp_s = log_softmax(&fw.logits);
        let logp_t = log_softmax(&forward(spec, av, x).logits);
        for (c, r) in residual.iter_mut().enumerate() {
            *r = (logp_s[c].exp() - logp_t[c].exp()) * inv_n;
        }
        backprop_logits(spec, wv, x, fw.hidden.as_deref(), &residual, &mut g);
    }
    ParamVector::new(g)
}
