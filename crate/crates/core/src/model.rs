//! Fully-connected network: loss, gradient, exact Hessian-vector products
//! (R-operator) and Gauss-Newton-vector products, all matrix-free.
//!
//! Parameters are stored flat, layer by layer: for layer i the weight matrix
//! W_i (rows = fan-out, row-major) is followed by the bias vector b_i.
//! Hidden layers apply the configured activation; the output layer is linear
//! and the loss interprets the logits (softmax cross-entropy folds the
//! softmax into the loss for numerical stability).
//!
//! Every evaluation comes in two flavours: the public operation, which
//! averages over the batch, and a crate-internal `*_sum` variant that
//! returns the unnormalised sum over an optional row subset. Batch means
//! accumulate per-row sums chunk by chunk over the canonical reduction
//! grid and combine the chunks with the fixed-tree reduce — the same
//! association the parallel layer uses — so a one-worker distributed run
//! reproduces the serial result bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{
    deterministic_reduce, deterministic_sum, dot_slices, reduction_chunk_ranges, Matrix, Vector,
};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// First derivative, written in terms of z and the stored activation a.
    fn d1(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            // Almost-everywhere derivative; the kink at 0 takes 0.
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Second derivative (0 almost everywhere for relu).
    fn d2(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a) * (1.0 - 2.0 * a),
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Relu => {
                let _ = z;
                0.0
            }
        }
    }
}

/// Loss applied to the network's linear outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLoss {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Architecture description: layer widths plus activation and loss choices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    dims: Vec<usize>,
    hidden_activation: Activation,
    output: OutputLoss,
}

impl NetworkSpec {
    pub fn new(dims: Vec<usize>, hidden_activation: Activation, output: OutputLoss) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {} entries",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        Ok(NetworkSpec {
            dims,
            hidden_activation,
            output,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of weight layers (l).
    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_loss(&self) -> OutputLoss {
        self.output
    }

    /// Total parameter count: Σ (d_{i−1}+1)·d_i.
    pub fn num_params(&self) -> usize {
        self.dims
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Flat ranges of (weights, biases) for each layer.
    fn layer_ranges(&self) -> Vec<(Range<usize>, Range<usize>)> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for w in self.dims.windows(2) {
            let (din, dout) = (w[0], w[1]);
            let wr = off..off + din * dout;
            let br = wr.end..wr.end + dout;
            off = br.end;
            out.push((wr, br));
        }
        out
    }
}

/// Flat parameter vector tied to a spec's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    theta: Vector,
}

impl ParameterVector {
    /// Validates length against the spec and finiteness of every entry.
    pub fn new(spec: &NetworkSpec, theta: Vector) -> Result<Self> {
        if theta.len() != spec.num_params() {
            return Err(Error::DimensionMismatch {
                context: "ParameterVector::new",
                expected: spec.num_params(),
                actual: theta.len(),
            });
        }
        if !theta.is_finite() {
            return Err(Error::NonFinite("ParameterVector::new"));
        }
        Ok(ParameterVector { theta })
    }

    /// Wraps a vector produced by our own arithmetic.
    pub fn from_vector_unchecked(theta: Vector) -> Self {
        ParameterVector { theta }
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn into_vector(self) -> Vector {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Training targets: class indices for classification, or explicit value
/// rows for regression-style (MSE) targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

/// A mini-batch: inputs plus matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        let rows = inputs.rows();
        if rows == 0 {
            return Err(Error::EmptyInput("Batch::new"));
        }
        let target_rows = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.rows(),
        };
        if target_rows != rows {
            return Err(Error::DimensionMismatch {
                context: "Batch::new",
                expected: rows,
                actual: target_rows,
            });
        }
        Ok(Batch { inputs, targets })
    }

    pub fn size(&self) -> usize {
        self.inputs.rows()
    }
}

/// Borrowed view of one layer's parameters inside a flat slice.
struct Layers<'a> {
    theta: &'a [f64],
    ranges: &'a [(Range<usize>, Range<usize>)],
}

impl<'a> Layers<'a> {
    fn weights(&self, i: usize) -> &'a [f64] {
        &self.theta[self.ranges[i].0.clone()]
    }

    fn biases(&self, i: usize) -> &'a [f64] {
        &self.theta[self.ranges[i].1.clone()]
    }
}

/// Glorot-uniform initialisation: weights uniform in
/// ±√(6/(fan_in + fan_out)) per layer, biases zero, deterministic in the
/// seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; spec.num_params()];
    for (i, (wr, _br)) in spec.layer_ranges().iter().enumerate() {
        let (din, dout) = (spec.dims[i], spec.dims[i + 1]);
        let limit = (6.0 / (din + dout) as f64).sqrt();
        for w in &mut theta[wr.clone()] {
            *w = rng.gen_range(-limit..limit);
        }
        // Biases stay zero.
    }
    ParameterVector::from_vector_unchecked(Vector::from_vec_unchecked(theta))
}

/// Scratch buffers reused across the samples of one batch evaluation.
struct Workspace {
    /// Pre-activations z_i, one buffer per weight layer.
    zs: Vec<Vec<f64>>,
    /// Activations a_i (last layer holds the logits unchanged).
    acts: Vec<Vec<f64>>,
    /// Loss deltas ∂loss/∂z_i.
    delta: Vec<Vec<f64>>,
    /// Cached Wᵀδ per hidden layer (input to the φ' product).
    wtd: Vec<Vec<f64>>,
    /// R-forward pre-activations Rz_i.
    rz: Vec<Vec<f64>>,
    /// R-forward activations Ra_i.
    ra: Vec<Vec<f64>>,
    /// R-backward deltas Rδ_i.
    rdelta: Vec<Vec<f64>>,
    /// Softmax probabilities for the current sample.
    sm: Vec<f64>,
}

impl Workspace {
    fn new(spec: &NetworkSpec) -> Self {
        let per_layer = || {
            spec.dims[1..]
                .iter()
                .map(|&d| vec![0.0; d])
                .collect::<Vec<_>>()
        };
        Workspace {
            zs: per_layer(),
            acts: per_layer(),
            delta: per_layer(),
            wtd: per_layer(),
            rz: per_layer(),
            ra: per_layer(),
            rdelta: per_layer(),
            sm: vec![0.0; spec.output_dim()],
        }
    }
}

/// dst = W·src + b, with W row-major (rows = dst length).
fn affine(w: &[f64], b: &[f64], src: &[f64], dst: &mut [f64]) {
    let din = src.len();
    for (r, out) in dst.iter_mut().enumerate() {
        *out = dot_slices(&w[r * din..(r + 1) * din], src) + b[r];
    }
}

/// dst = Wᵀ·d for row-major W with `d.len()` rows and `dst.len()` columns.
fn transpose_apply(w: &[f64], d: &[f64], dst: &mut [f64]) {
    let din = dst.len();
    dst.fill(0.0);
    for (r, &dr) in d.iter().enumerate() {
        let row = &w[r * din..(r + 1) * din];
        for c in 0..din {
            dst[c] += row[c] * dr;
        }
    }
}

/// grad_w += d ⊗ src; grad_b += d.
fn accumulate_layer_grad(grad_w: &mut [f64], grad_b: &mut [f64], d: &[f64], src: &[f64]) {
    let din = src.len();
    for (r, &dr) in d.iter().enumerate() {
        let row = &mut grad_w[r * din..(r + 1) * din];
        for c in 0..din {
            row[c] += dr * src[c];
        }
    }
    for (r, &dr) in d.iter().enumerate() {
        grad_b[r] += dr;
    }
}

/// Runs the forward pass for one sample, filling ws.zs and ws.acts.
fn forward_sample(spec: &NetworkSpec, layers: &Layers, x: &[f64], ws: &mut Workspace) {
    let l = spec.num_layers();
    for i in 0..l {
        // Affine into zs[i], reading the previous activation (or input).
        if i == 0 {
            affine(layers.weights(0), layers.biases(0), x, &mut ws.zs[0]);
        } else {
            let (acts, zs) = (&ws.acts, &mut ws.zs);
            affine(layers.weights(i), layers.biases(i), &acts[i - 1], &mut zs[i]);
        }
        // Activation (output layer is linear).
        if i + 1 < l {
            let act = spec.hidden_activation;
            for r in 0..spec.dims[i + 1] {
                ws.acts[i][r] = act.apply(ws.zs[i][r]);
            }
        } else {
            let (z, a) = (&ws.zs[i], &mut ws.acts[i]);
            a.copy_from_slice(z);
        }
    }
}

/// Per-sample loss on the logits currently in the workspace; also fills
/// ws.sm for cross-entropy. Returns an error if the value is not finite.
fn sample_loss(
    spec: &NetworkSpec,
    ws: &mut Workspace,
    target: SampleTarget,
) -> Result<f64> {
    let l = spec.num_layers();
    let logits = &ws.zs[l - 1];
    let value = match (spec.output, target) {
        (OutputLoss::SoftmaxCrossEntropy, SampleTarget::Class(t)) => {
            let d = spec.output_dim();
            if t >= d {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    num_classes: d,
                });
            }
            // Max-subtracted log-sum-exp keeps the exponentials in range.
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &z) in logits.iter().enumerate() {
                let e = (z - m).exp();
                ws.sm[j] = e;
                sum += e;
            }
            for p in ws.sm.iter_mut() {
                *p /= sum;
            }
            (m + sum.ln()) - logits[t]
        }
        (OutputLoss::MeanSquaredError, target) => {
            let mut acc = 0.0;
            for (j, &z) in logits.iter().enumerate() {
                let y = target.value(j);
                let r = z - y;
                acc += r * r;
            }
            acc
        }
        (OutputLoss::SoftmaxCrossEntropy, SampleTarget::Values(_)) => {
            return Err(Error::InvalidConfig(
                "softmax cross-entropy requires class targets".into(),
            ));
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("loss evaluation"));
    }
    Ok(value)
}

/// One sample's target, borrowed from the batch.
#[derive(Clone, Copy)]
enum SampleTarget<'a> {
    Class(usize),
    Values(&'a [f64]),
}

impl<'a> SampleTarget<'a> {
    /// The j-th target value, treating a class index as a one-hot row.
    fn value(&self, j: usize) -> f64 {
        match self {
            SampleTarget::Class(t) => {
                if *t == j {
                    1.0
                } else {
                    0.0
                }
            }
            SampleTarget::Values(v) => v[j],
        }
    }
}

fn sample_target<'a>(spec: &NetworkSpec, batch: &'a Batch, row: usize) -> Result<SampleTarget<'a>> {
    match &batch.targets {
        Targets::Classes(cs) => {
            let t = cs[row];
            if t >= spec.output_dim() {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    num_classes: spec.output_dim(),
                });
            }
            Ok(SampleTarget::Class(t))
        }
        Targets::Values(m) => {
            if m.cols() != spec.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "value targets",
                    expected: spec.output_dim(),
                    actual: m.cols(),
                });
            }
            Ok(SampleTarget::Values(m.row(row)))
        }
    }
}

/// Fills ws.delta[l−1] = ∂loss/∂z_l for the current sample. Requires ws.sm
/// for cross-entropy (i.e. sample_loss must already have run).
fn output_delta(spec: &NetworkSpec, ws: &mut Workspace, target: SampleTarget) {
    let l = spec.num_layers();
    match spec.output {
        OutputLoss::SoftmaxCrossEntropy => {
            for j in 0..spec.output_dim() {
                ws.delta[l - 1][j] = ws.sm[j] - target.value(j);
            }
        }
        OutputLoss::MeanSquaredError => {
            for j in 0..spec.output_dim() {
                ws.delta[l - 1][j] = 2.0 * (ws.zs[l - 1][j] - target.value(j));
            }
        }
    }
}

/// Backward pass: fills every ws.delta[i] and caches Wᵀδ in ws.wtd[i−1].
/// Assumes output_delta has filled the last delta.
fn backward_deltas(spec: &NetworkSpec, layers: &Layers, ws: &mut Workspace) {
    let l = spec.num_layers();
    for i in (1..l).rev() {
        let (head, tail) = ws.delta.split_at_mut(i);
        let d_next = &tail[0];
        transpose_apply(layers.weights(i), d_next, &mut ws.wtd[i - 1]);
        let act = spec.hidden_activation;
        for c in 0..spec.dims[i] {
            head[i - 1][c] = act.d1(ws.zs[i - 1][c], ws.acts[i - 1][c]) * ws.wtd[i - 1][c];
        }
    }
}

/// R-forward pass for direction v: fills ws.rz and ws.ra.
fn r_forward(spec: &NetworkSpec, layers: &Layers, vlayers: &Layers, x: &[f64], ws: &mut Workspace) {
    let l = spec.num_layers();
    for i in 0..l {
        let dout = spec.dims[i + 1];
        // Rz_i = W_i·Ra_{i−1} + V_i·a_{i−1} + c_i   (Ra_0 = 0)
        {
            let prev_a: &[f64] = if i == 0 { x } else { &ws.acts[i - 1] };
            let vw = vlayers.weights(i);
            let vb = vlayers.biases(i);
            let din = prev_a.len();
            for r in 0..dout {
                let mut acc = dot_slices(&vw[r * din..(r + 1) * din], prev_a) + vb[r];
                if i > 0 {
                    let w = layers.weights(i);
                    acc += dot_slices(&w[r * din..(r + 1) * din], &ws.ra[i - 1]);
                }
                ws.rz[i][r] = acc;
            }
        }
        // Ra_i = φ'(z_i) ⊙ Rz_i on hidden layers; output is linear.
        if i + 1 < l {
            let act = spec.hidden_activation;
            for r in 0..dout {
                ws.ra[i][r] = act.d1(ws.zs[i][r], ws.acts[i][r]) * ws.rz[i][r];
            }
        } else {
            let (rz, ra) = (&ws.rz[i], &mut ws.ra[i]);
            ra.copy_from_slice(rz);
        }
    }
}

/// Which rows of a batch to visit: all of them, or an explicit subset.
fn visit_rows(batch: &Batch, rows: Option<&[usize]>) -> (usize, bool) {
    match rows {
        Some(r) => (r.len(), true),
        None => (batch.size(), false),
    }
}

fn row_at(rows: Option<&[usize]>, k: usize) -> usize {
    match rows {
        Some(r) => r[k],
        None => k,
    }
}

/// Unnormalised loss sum over the selected rows.
pub(crate) fn loss_sum(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    batch: &Batch,
    rows: Option<&[usize]>,
) -> Result<f64> {
    check_shapes(spec, theta, batch)?;
    let ranges = spec.layer_ranges();
    let layers = Layers {
        theta: theta.theta.as_slice(),
        ranges: &ranges,
    };
    let mut ws = Workspace::new(spec);
    let (count, _) = visit_rows(batch, rows);
    let mut acc = 0.0;
    for k in 0..count {
        let r = row_at(rows, k);
        let target = sample_target(spec, batch, r)?;
        forward_sample(spec, &layers, batch.inputs.row(r), &mut ws);
        acc += sample_loss(spec, &mut ws, target)?;
    }
    Ok(acc)
}

/// Unnormalised gradient sum over the selected rows.
pub(crate) fn gradient_sum(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    batch: &Batch,
    rows: Option<&[usize]>,
) -> Result<Vector> {
    check_shapes(spec, theta, batch)?;
    let ranges = spec.layer_ranges();
    let layers = Layers {
        theta: theta.theta.as_slice(),
        ranges: &ranges,
    };
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; spec.num_params()];
    let l = spec.num_layers();
    let (count, _) = visit_rows(batch, rows);
    for k in 0..count {
        let r = row_at(rows, k);
        let target = sample_target(spec, batch, r)?;
        let x = batch.inputs.row(r);
        forward_sample(spec, &layers, x, &mut ws);
        // sample_loss fills softmax probabilities and catches overflow.
        sample_loss(spec, &mut ws, target)?;
        output_delta(spec, &mut ws, target);
        backward_deltas(spec, &layers, &mut ws);
        for i in 0..l {
            let (wr, br) = &ranges[i];
            let src: &[f64] = if i == 0 { x } else { &ws.acts[i - 1] };
            // Split the flat gradient into this layer's weight/bias slices.
            let (gw, gb) = grad.split_at_mut(br.start);
            accumulate_layer_grad(
                &mut gw[wr.clone()],
                &mut gb[..br.len()],
                &ws.delta[i],
                src,
            );
        }
    }
    let out = Vector::from_vec_unchecked(grad);
    if !out.is_finite() {
        return Err(Error::NonFinite("gradient accumulation"));
    }
    Ok(out)
}

/// Unnormalised exact Hessian-vector product sum (R-operator,
/// forward-over-reverse) over the selected rows.
pub(crate) fn hessian_vec_sum(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    batch: &Batch,
    v: &Vector,
    rows: Option<&[usize]>,
) -> Result<Vector> {
    check_shapes(spec, theta, batch)?;
    if v.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            context: "hessian_vec direction",
            expected: spec.num_params(),
            actual: v.len(),
        });
    }
    let ranges = spec.layer_ranges();
    let layers = Layers {
        theta: theta.theta.as_slice(),
        ranges: &ranges,
    };
    let vlayers = Layers {
        theta: v.as_slice(),
        ranges: &ranges,
    };
    let mut ws = Workspace::new(spec);
    let mut hv = vec![0.0; spec.num_params()];
    let l = spec.num_layers();
    let d_out = spec.output_dim();
    let (count, _) = visit_rows(batch, rows);
    for k in 0..count {
        let r = row_at(rows, k);
        let target = sample_target(spec, batch, r)?;
        let x = batch.inputs.row(r);
        forward_sample(spec, &layers, x, &mut ws);
        sample_loss(spec, &mut ws, target)?;
        output_delta(spec, &mut ws, target);
        backward_deltas(spec, &layers, &mut ws);
        r_forward(spec, &layers, &vlayers, x, &mut ws);

        // Rδ_l from the output-loss Hessian applied to Rz_l.
        match spec.output {
            OutputLoss::SoftmaxCrossEntropy => {
                let rz = &ws.rz[l - 1];
                let sm_dot_rz = dot_slices(&ws.sm, rz);
                for j in 0..d_out {
                    ws.rdelta[l - 1][j] = ws.sm[j] * (rz[j] - sm_dot_rz);
                }
            }
            OutputLoss::MeanSquaredError => {
                for j in 0..d_out {
                    ws.rdelta[l - 1][j] = 2.0 * ws.rz[l - 1][j];
                }
            }
        }

        // R-backward: accumulate RdW_i = Rδ_i⊗a_{i−1} + δ_i⊗Ra_{i−1} and
        // propagate Rδ_{i−1}.
        for i in (0..l).rev() {
            let (wr, br) = &ranges[i];
            {
                let src: &[f64] = if i == 0 { x } else { &ws.acts[i - 1] };
                let (gw, gb) = hv.split_at_mut(br.start);
                accumulate_layer_grad(
                    &mut gw[wr.clone()],
                    &mut gb[..br.len()],
                    &ws.rdelta[i],
                    src,
                );
            }
            if i > 0 {
                // δ_i ⊗ Ra_{i−1} lands on the weights only (the bias term
                // has no cross piece: R of the bias gradient is Rδ alone).
                // For i = 0 the "previous R-activation" is the input's,
                // which is zero, so there is nothing to add.
                let rsrc: &[f64] = &ws.ra[i - 1];
                let gw = &mut hv[wr.clone()];
                let din = rsrc.len();
                for (rr, &dr) in ws.delta[i].iter().enumerate() {
                    let row = &mut gw[rr * din..(rr + 1) * din];
                    for c in 0..din {
                        row[c] += dr * rsrc[c];
                    }
                }
            }
            if i > 0 {
                // Rδ_{i−1} = φ''⊙Rz_{i−1}⊙(Wᵀδ) + φ'⊙(Vᵀδ + WᵀRδ)
                let act = spec.hidden_activation;
                let din = spec.dims[i];
                let mut vt_d = vec![0.0; din];
                transpose_apply(vlayers.weights(i), &ws.delta[i], &mut vt_d);
                let mut wt_rd = vec![0.0; din];
                transpose_apply(layers.weights(i), &ws.rdelta[i], &mut wt_rd);
                for c in 0..din {
                    let z = ws.zs[i - 1][c];
                    let a = ws.acts[i - 1][c];
                    ws.rdelta[i - 1][c] = act.d2(z, a) * ws.rz[i - 1][c] * ws.wtd[i - 1][c]
                        + act.d1(z, a) * (vt_d[c] + wt_rd[c]);
                }
            }
        }
    }
    let out = Vector::from_vec_unchecked(hv);
    if !out.is_finite() {
        return Err(Error::NonFinite("hessian-vector accumulation"));
    }
    Ok(out)
}

/// Unnormalised Gauss-Newton-vector product sum: Gv = Jᵀ·H_out·(Jv) through
/// the linearised network (R-forward for Jv, plain backward for Jᵀ).
pub(crate) fn gauss_newton_vec_sum(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    batch: &Batch,
    v: &Vector,
    rows: Option<&[usize]>,
) -> Result<Vector> {
    check_shapes(spec, theta, batch)?;
    if v.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            context: "gauss_newton_vec direction",
            expected: spec.num_params(),
            actual: v.len(),
        });
    }
    let ranges = spec.layer_ranges();
    let layers = Layers {
        theta: theta.theta.as_slice(),
        ranges: &ranges,
    };
    let vlayers = Layers {
        theta: v.as_slice(),
        ranges: &ranges,
    };
    let mut ws = Workspace::new(spec);
    let mut gv = vec![0.0; spec.num_params()];
    let l = spec.num_layers();
    let d_out = spec.output_dim();
    let (count, _) = visit_rows(batch, rows);
    for k in 0..count {
        let r = row_at(rows, k);
        let target = sample_target(spec, batch, r)?;
        let x = batch.inputs.row(r);
        forward_sample(spec, &layers, x, &mut ws);
        sample_loss(spec, &mut ws, target)?;
        r_forward(spec, &layers, &vlayers, x, &mut ws);

        // u = H_out·(Jv): same output-Hessian action as the exact HVP.
        match spec.output {
            OutputLoss::SoftmaxCrossEntropy => {
                let rz = &ws.rz[l - 1];
                let sm_dot_rz = dot_slices(&ws.sm, rz);
                for j in 0..d_out {
                    ws.rdelta[l - 1][j] = ws.sm[j] * (rz[j] - sm_dot_rz);
                }
            }
            OutputLoss::MeanSquaredError => {
                for j in 0..d_out {
                    ws.rdelta[l - 1][j] = 2.0 * ws.rz[l - 1][j];
                }
            }
        }

        // Backward through the linearisation: only φ' appears.
        for i in (0..l).rev() {
            let (wr, br) = &ranges[i];
            {
                let src: &[f64] = if i == 0 { x } else { &ws.acts[i - 1] };
                let (gw, gb) = gv.split_at_mut(br.start);
                accumulate_layer_grad(
                    &mut gw[wr.clone()],
                    &mut gb[..br.len()],
                    &ws.rdelta[i],
                    src,
                );
            }
            if i > 0 {
                let act = spec.hidden_activation;
                let din = spec.dims[i];
                let mut wt_rd = vec![0.0; din];
                transpose_apply(layers.weights(i), &ws.rdelta[i], &mut wt_rd);
                for c in 0..din {
                    ws.rdelta[i - 1][c] =
                        act.d1(ws.zs[i - 1][c], ws.acts[i - 1][c]) * wt_rd[c];
                }
            }
        }
    }
    let out = Vector::from_vec_unchecked(gv);
    if !out.is_finite() {
        return Err(Error::NonFinite("gauss-newton accumulation"));
    }
    Ok(out)
}

/// Misclassification count over the selected rows of an input/target pair.
pub(crate) fn misclassified_count(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    inputs: &Matrix,
    targets: &[usize],
    rows: Option<&[usize]>,
) -> Result<usize> {
    if inputs.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "classification_error inputs",
            expected: spec.input_dim(),
            actual: inputs.cols(),
        });
    }
    if theta.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            context: "classification_error parameters",
            expected: spec.num_params(),
            actual: theta.len(),
        });
    }
    if targets.len() != inputs.rows() {
        return Err(Error::DimensionMismatch {
            context: "classification_error targets",
            expected: inputs.rows(),
            actual: targets.len(),
        });
    }
    let ranges = spec.layer_ranges();
    let layers = Layers {
        theta: theta.theta.as_slice(),
        ranges: &ranges,
    };
    let mut ws = Workspace::new(spec);
    let l = spec.num_layers();
    let count = rows.map_or(inputs.rows(), |r| r.len());
    let mut wrong = 0;
    for k in 0..count {
        let r = match rows {
            Some(rs) => rs[k],
            None => k,
        };
        forward_sample(spec, &layers, inputs.row(r), &mut ws);
        let logits = &ws.zs[l - 1];
        // Argmax with ties broken toward the lowest class index.
        let mut best = 0;
        for j in 1..logits.len() {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        if best != targets[r] {
            wrong += 1;
        }
    }
    Ok(wrong)
}

fn check_shapes(spec: &NetworkSpec, theta: &ParameterVector, batch: &Batch) -> Result<()> {
    if theta.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected: spec.num_params(),
            actual: theta.len(),
        });
    }
    if batch.inputs.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch inputs",
            expected: spec.input_dim(),
            actual: batch.inputs.cols(),
        });
    }
    Ok(())
}

/// Mean per-sample loss over the batch.
pub fn loss(spec: &NetworkSpec, theta: &ParameterVector, batch: &Batch) -> Result<f64> {
    let chunks = chunked_scalar(batch.size(), |rows| loss_sum(spec, theta, batch, Some(rows)))?;
    Ok(deterministic_sum(&chunks) / batch.size() as f64)
}

/// Exact gradient of the mean loss via reverse accumulation.
pub fn gradient(spec: &NetworkSpec, theta: &ParameterVector, batch: &Batch) -> Result<Vector> {
    let chunks =
        chunked_vector(batch.size(), |rows| gradient_sum(spec, theta, batch, Some(rows)))?;
    Ok(deterministic_reduce(&chunks)?.scale(1.0 / batch.size() as f64))
}

/// Exact Hessian-vector product H(θ)v of the mean loss.
pub fn hessian_vec(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    batch: &Batch,
    v: &Vector,
) -> Result<Vector> {
    let chunks = chunked_vector(batch.size(), |rows| {
        hessian_vec_sum(spec, theta, batch, v, Some(rows))
    })?;
    Ok(deterministic_reduce(&chunks)?.scale(1.0 / batch.size() as f64))
}

/// Gauss-Newton-vector product Gv of the mean loss.
pub fn gauss_newton_vec(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    batch: &Batch,
    v: &Vector,
) -> Result<Vector> {
    let chunks = chunked_vector(batch.size(), |rows| {
        gauss_newton_vec_sum(spec, theta, batch, v, Some(rows))
    })?;
    Ok(deterministic_reduce(&chunks)?.scale(1.0 / batch.size() as f64))
}

/// Per-chunk sums over the canonical reduction grid for a batch of `size`
/// rows. The grid and the tree combine are shared with the parallel
/// layer, which is what lets a distributed run over any aligned worker
/// count reproduce these serial means bitwise.
fn chunked_scalar(
    size: usize,
    mut sum_rows: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Vec<f64>> {
    reduction_chunk_ranges(size)
        .into_iter()
        .map(|(lo, hi)| sum_rows(&(lo..hi).collect::<Vec<_>>()))
        .collect()
}

fn chunked_vector(
    size: usize,
    mut sum_rows: impl FnMut(&[usize]) -> Result<Vector>,
) -> Result<Vec<Vector>> {
    reduction_chunk_ranges(size)
        .into_iter()
        .map(|(lo, hi)| sum_rows(&(lo..hi).collect::<Vec<_>>()))
        .collect()
}

/// Fraction of samples whose argmax output differs from the target class;
/// argmax ties break toward the lowest class index.
pub fn classification_error(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    inputs: &Matrix,
    targets: &[usize],
) -> Result<f64> {
    let wrong = misclassified_count(spec, theta, inputs, targets, None)?;
    Ok(wrong as f64 / inputs.rows() as f64)
}

/// Network outputs (logits) for every input row.
pub fn network_outputs(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    inputs: &Matrix,
) -> Result<Matrix> {
    if inputs.cols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "network_outputs inputs",
            expected: spec.input_dim(),
            actual: inputs.cols(),
        });
    }
    let ranges = spec.layer_ranges();
    let layers = Layers {
        theta: theta.theta.as_slice(),
        ranges: &ranges,
    };
    let mut ws = Workspace::new(spec);
    let l = spec.num_layers();
    let mut out = Matrix::zeros(inputs.rows(), spec.output_dim());
    for r in 0..inputs.rows() {
        forward_sample(spec, &layers, inputs.row(r), &mut ws);
        out.row_mut(r).copy_from_slice(&ws.zs[l - 1]);
    }
    Ok(out)
}
