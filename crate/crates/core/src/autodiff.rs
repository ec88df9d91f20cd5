//! Forward evaluation, reverse-mode gradients and exact Hessian-vector
//! products for [`MlpSpec`] models.
//!
//! The HVP is Pearlmutter's R-operator: a forward pass propagating the
//! directional derivative `R{.}` alongside the activations, followed by a
//! backward pass that differentiates the ordinary backward recursion in the
//! same direction. Nothing of size `p x p` is ever formed.
//!
//! ReLU is treated as having zero second derivative everywhere (and zero
//! derivative at the kink).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::mlp::{Activation, Batch, Head, LayerShape, MlpSpec, ParamVector};

/// How per-example losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

/// Which scalar of a multi-output head a prediction gradient differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSelect {
    /// The largest logit at the query point.
    ArgmaxLogit,
    Logit(usize),
    /// Softmax probability of the argmax class.
    ArgmaxProbability,
}

impl Default for OutputSelect {
    fn default() -> Self {
        OutputSelect::ArgmaxLogit
    }
}

/// Cached activations from one forward pass over a batch.
pub(crate) struct Tape {
    /// `acts[0]` is the input; `acts[l]` the post-activation of hidden layer l.
    pub acts: Vec<Array2<f64>>,
    /// Pre-activations of every layer, output layer last.
    pub pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }
}

fn act(kind: Activation, z: f64) -> f64 {
    match kind {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

/// First and second derivative of the activation, given pre- and post-activation.
fn act_derivs(kind: Activation, z: f64, a: f64) -> (f64, f64) {
    match kind {
        Activation::Tanh => {
            let d1 = 1.0 - a * a;
            (d1, -2.0 * a * d1)
        }
        Activation::Relu => (if z > 0.0 { 1.0 } else { 0.0 }, 0.0),
    }
}

fn affine(input: ArrayView2<f64>, params: &ParamVector, layer: &LayerShape) -> Array2<f64> {
    let mut z = input.dot(&params.weights(layer).t());
    z += &params.bias(layer);
    z
}

pub(crate) fn forward_tape(spec: &MlpSpec, params: &ParamVector, inputs: ArrayView2<f64>) -> Tape {
    let layers = spec.layers();
    let mut acts = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    acts.push(inputs.to_owned());
    for (l, layer) in layers.iter().enumerate() {
        let z = affine(acts[l].view(), params, layer);
        if l + 1 < layers.len() {
            acts.push(z.mapv(|v| act(spec.activation, v)));
        }
        pre.push(z);
    }
    Tape { acts, pre }
}

fn check_inputs(spec: &MlpSpec, params: &ParamVector, dim: usize) -> Result<()> {
    spec.check_params(params)?;
    if dim != spec.input_dim {
        return Err(Error::dim("input", spec.input_dim, dim));
    }
    Ok(())
}

/// Raw model outputs (logits for classifiers) for each row of `inputs`.
pub fn predict_batch(spec: &MlpSpec, params: &ParamVector, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_inputs(spec, params, inputs.ncols())?;
    Ok(forward_tape(spec, params, inputs).pre.pop().expect("at least one layer"))
}

/// Model output at a single input: length 1 for regression, k logits otherwise.
pub fn predict(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(predict_batch(spec, params, x)?.row(0).to_vec())
}

/// Scalar prediction of a regression model.
pub fn predict_scalar(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<f64> {
    if spec.head != Head::ScalarRegression {
        return Err(Error::HeadMismatch("scalar prediction requires a regression head".into()));
    }
    Ok(predict(spec, params, x)?[0])
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    e /= total;
    e
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_slice(v: &[f64]) -> usize {
    argmax(ArrayView1::from(v))
}

/// Per-example losses and their gradient with respect to the output layer.
fn output_loss(spec: &MlpSpec, out: &Array2<f64>, targets: &[f64]) -> (Vec<f64>, Array2<f64>) {
    let n = out.nrows();
    let mut losses = Vec::with_capacity(n);
    let mut delta = Array2::zeros(out.raw_dim());
    match spec.head {
        Head::ScalarRegression => {
            for i in 0..n {
                let r = out[[i, 0]] - targets[i];
                losses.push(r * r);
                delta[[i, 0]] = 2.0 * r;
            }
        }
        Head::KClassLogits { .. } => {
            for (i, row) in out.outer_iter().enumerate() {
                let y = targets[i] as usize;
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                losses.push(lse - row[y]);
                let sm = softmax(row);
                delta.row_mut(i).assign(&sm);
                delta[[i, y]] -= 1.0;
            }
        }
    }
    (losses, delta)
}

/// Training loss under the given reduction: MSE for regression heads,
/// softmax cross-entropy for classifier heads.
pub fn loss(spec: &MlpSpec, params: &ParamVector, batch: &Batch, reduction: Reduction) -> Result<f64> {
    check_inputs(spec, params, batch.dim())?;
    batch.check(spec)?;
    let tape = forward_tape(spec, params, batch.inputs.view());
    let (losses, _) = output_loss(spec, tape.output(), &batch.targets);
    Ok(losses.iter().sum::<f64>() * reduction.factor(batch.len()))
}

/// Summed loss `L = sum_i l(z_i)`, the reduction used by all scoring code.
pub fn loss_sum(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    loss(spec, params, batch, Reduction::Sum)
}

/// Backpropagates `delta_out` (gradient wrt output pre-activations, summed
/// over rows) into a parameter-space gradient.
fn backward(spec: &MlpSpec, params: &ParamVector, tape: &Tape, delta_out: Array2<f64>) -> ParamVector {
    let layers = spec.layers();
    let mut grad = ParamVector::zeros(spec.param_count());
    let mut delta = delta_out;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        write_layer_grad(&mut grad, layer, &delta, tape.acts[l].view());
        if l > 0 {
            let mut g_prev = delta.dot(&params.weights(layer));
            Zip::from(&mut g_prev)
                .and(&tape.pre[l - 1])
                .and(&tape.acts[l])
                .for_each(|g, &z, &a| *g *= act_derivs(spec.activation, z, a).0);
            delta = g_prev;
        }
    }
    grad
}

/// Adds `delta^T input` into the weight block and column sums into the bias block.
fn write_layer_grad(grad: &mut ParamVector, layer: &LayerShape, delta: &Array2<f64>, input: ArrayView2<f64>) {
    let gw = delta.t().dot(&input);
    let gb = delta.sum_axis(Axis(0));
    let w_slice = &mut grad.0[layer.offset..layer.bias_offset()];
    for (dst, src) in w_slice.iter_mut().zip(gw.iter()) {
        *dst += src;
    }
    let b_slice = &mut grad.0[layer.bias_offset()..layer.end()];
    for (dst, src) in b_slice.iter_mut().zip(gb.iter()) {
        *dst += src;
    }
}

fn resolve_output(spec: &MlpSpec, logits: ArrayView1<f64>, select: OutputSelect) -> Result<(usize, bool)> {
    match spec.head {
        Head::ScalarRegression => match select {
            OutputSelect::Logit(i) if i != 0 => Err(Error::dim("output index", 1, i + 1)),
            _ => Ok((0, false)),
        },
        Head::KClassLogits { k } => match select {
            OutputSelect::ArgmaxLogit => Ok((argmax(logits), false)),
            OutputSelect::ArgmaxProbability => Ok((argmax(logits), true)),
            OutputSelect::Logit(i) if i < k => Ok((i, false)),
            OutputSelect::Logit(i) => Err(Error::dim("output index", k, i + 1)),
        },
    }
}

/// Gradient of one model output at `x` with respect to all parameters.
/// Returns the gradient and the output index that was differentiated.
pub fn prediction_gradient(
    spec: &MlpSpec,
    params: &ParamVector,
    x: &[f64],
    select: OutputSelect,
) -> Result<(ParamVector, usize)> {
    check_inputs(spec, params, x.len())?;
    let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let tape = forward_tape(spec, params, x);
    let out = tape.output().row(0).to_owned();
    let (index, through_softmax) = resolve_output(spec, out.view(), select)?;
    let mut delta = Array2::zeros((1, spec.output_dim()));
    if through_softmax {
        // d s_i / d z_j = s_i (1[i=j] - s_j)
        let sm = softmax(out.view());
        for j in 0..sm.len() {
            delta[[0, j]] = -sm[index] * sm[j];
        }
        delta[[0, index]] += sm[index];
    } else {
        delta[[0, index]] = 1.0;
    }
    Ok((backward(spec, params, &tape, delta), index))
}

/// Gradient of the loss of `batch` under `reduction`.
pub fn loss_gradient(spec: &MlpSpec, params: &ParamVector, batch: &Batch, reduction: Reduction) -> Result<ParamVector> {
    check_inputs(spec, params, batch.dim())?;
    batch.check(spec)?;
    let tape = forward_tape(spec, params, batch.inputs.view());
    let (_, mut delta) = output_loss(spec, tape.output(), &batch.targets);
    delta *= reduction.factor(batch.len());
    Ok(backward(spec, params, &tape, delta))
}

/// Loss and its gradient from a single forward pass.
pub fn loss_and_gradient(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
    reduction: Reduction,
) -> Result<(f64, ParamVector)> {
    check_inputs(spec, params, batch.dim())?;
    batch.check(spec)?;
    let tape = forward_tape(spec, params, batch.inputs.view());
    let (losses, mut delta) = output_loss(spec, tape.output(), &batch.targets);
    let factor = reduction.factor(batch.len());
    delta *= factor;
    let value = losses.iter().sum::<f64>() * factor;
    Ok((value, backward(spec, params, &tape, delta)))
}

/// Gradient of the summed loss of a single labelled example.
pub fn example_loss_gradient(spec: &MlpSpec, params: &ParamVector, x: &[f64], y: f64) -> Result<ParamVector> {
    let inputs = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let batch = Batch::new(inputs, vec![y])?;
    loss_gradient(spec, params, &batch, Reduction::Sum)
}

/// Exact product of the summed-loss Hessian with `v`.
pub fn hvp(spec: &MlpSpec, params: &ParamVector, batch: &Batch, v: &ParamVector) -> Result<ParamVector> {
    hvp_reduced(spec, params, batch, v, Reduction::Sum)
}

pub fn hvp_reduced(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
    reduction: Reduction,
) -> Result<ParamVector> {
    check_inputs(spec, params, batch.dim())?;
    batch.check(spec)?;
    if v.len() != params.len() {
        return Err(Error::dim("hvp direction", params.len(), v.len()));
    }
    let layers = spec.layers();
    let kind = spec.activation;
    let tape = forward_tape(spec, params, batch.inputs.view());

    // R-forward: directional derivatives of pre-activations (rz) and
    // activations (ra) along v.
    let mut ra: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    let mut rz: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    ra.push(Array2::zeros(tape.acts[0].raw_dim()));
    for (l, layer) in layers.iter().enumerate() {
        let mut r = ra[l].dot(&params.weights(layer).t());
        r += &tape.acts[l].dot(&v.weights(layer).t());
        r += &v.bias(layer);
        if l + 1 < layers.len() {
            let mut r_act = r.clone();
            Zip::from(&mut r_act)
                .and(&tape.pre[l])
                .and(&tape.acts[l + 1])
                .for_each(|ra, &z, &a| *ra *= act_derivs(kind, z, a).0);
            ra.push(r_act);
        }
        rz.push(r);
    }

    let out = tape.output();
    let (_, mut delta) = output_loss(spec, out, &batch.targets);
    let r_out = rz.last().expect("output layer");
    let mut r_delta = match spec.head {
        Head::ScalarRegression => r_out * 2.0,
        Head::KClassLogits { .. } => {
            let mut rd = Array2::zeros(out.raw_dim());
            for (i, row) in out.outer_iter().enumerate() {
                let sm = softmax(row);
                let rrow = r_out.row(i);
                let inner = sm.dot(&rrow);
                for j in 0..sm.len() {
                    rd[[i, j]] = sm[j] * (rrow[j] - inner);
                }
            }
            rd
        }
    };
    let factor = reduction.factor(batch.len());
    delta *= factor;
    r_delta *= factor;

    let mut hv = ParamVector::zeros(spec.param_count());
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        // R{dW} = R{delta}^T a + delta^T R{a};  R{db} = sum R{delta}
        write_layer_grad(&mut hv, layer, &r_delta, tape.acts[l].view());
        if l > 0 {
            let gw = delta.t().dot(&ra[l]);
            let w_slice = &mut hv.0[layer.offset..layer.bias_offset()];
            for (dst, src) in w_slice.iter_mut().zip(gw.iter()) {
                *dst += src;
            }

            let w = params.weights(layer);
            let g_prev = delta.dot(&w);
            let mut r_g_prev = r_delta.dot(&w);
            r_g_prev += &delta.dot(&v.weights(layer));

            let mut next_delta = g_prev.clone();
            let mut next_r_delta = r_g_prev;
            Zip::from(&mut next_delta)
                .and(&mut next_r_delta)
                .and(&g_prev)
                .and(&tape.pre[l - 1])
                .and(&tape.acts[l])
                .and(&rz[l - 1])
                .for_each(|d, rd, &g, &z, &a, &r| {
                    let (d1, d2) = act_derivs(kind, z, a);
                    *d = d1 * g;
                    *rd = d2 * r * g + d1 * *rd;
                });
            delta = next_delta;
            r_delta = next_r_delta;
        }
    }
    Ok(hv)
}

/// Post-activations of every hidden layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn concatenated(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    /// Final hidden layer; empty for a model without hidden layers.
    pub fn final_hidden(&self) -> Vec<f64> {
        self.layers.last().cloned().unwrap_or_default()
    }
}

pub fn activation_trace(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<ActivationTrace> {
    check_inputs(spec, params, x.len())?;
    let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let tape = forward_tape(spec, params, x);
    Ok(ActivationTrace {
        layers: tape.acts[1..].iter().map(|a| a.row(0).to_vec()).collect(),
    })
}

/// Hidden activations for every row, as (concatenated, final-hidden) matrices.
pub fn activation_matrices(
    spec: &MlpSpec,
    params: &ParamVector,
    inputs: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_inputs(spec, params, inputs.ncols())?;
    let tape = forward_tape(spec, params, inputs);
    let n = inputs.nrows();
    let hidden = &tape.acts[1..];
    let total: usize = hidden.iter().map(|a| a.ncols()).sum();
    let mut concat = Array2::zeros((n, total));
    let mut col = 0;
    for a in hidden {
        concat.slice_mut(s![.., col..col + a.ncols()]).assign(a);
        col += a.ncols();
    }
    let last = hidden.last().cloned().unwrap_or_else(|| Array2::zeros((n, 0)));
    Ok((concat, last))
}
