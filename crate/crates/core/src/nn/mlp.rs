//! Fully connected networks evaluated a batch at a time.
//!
//! Besides the plain forward pass a network can propagate forward-mode
//! tangents with respect to its raw inputs (one channel per input
//! coordinate). Tangents are carried through the same matrix products as the
//! values, and the reverse pass differentiates through both, so losses built
//! from input gradients stay differentiable with respect to the weights.

use std::f64::consts::{PI, SQRT_2};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::encoding::{encode_derivative_into, encode_into, encode_second_derivative_into, encoded_dim, source_component};
use super::params::ParamStore;
use super::tape::{sigmoid, BlockOp, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus { beta: f64 },
    Sigmoid,
}

impl Activation {
    /// Value, first and second derivative.
    #[inline]
    fn eval(self, y: f64) -> (f64, f64, f64) {
        match self {
            Activation::Identity => (y, 1.0, 0.0),
            Activation::Relu => {
                if y > 0.0 {
                    (y, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Activation::Softplus { beta } => {
                let z = beta * y;
                let v = if z > 30.0 { y } else { z.exp().ln_1p() / beta };
                let s = sigmoid(z);
                (v, s, beta * s * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(y);
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
        }
    }

    #[inline]
    fn value(self, y: f64) -> f64 {
        match self {
            Activation::Identity => y,
            Activation::Relu => y.max(0.0),
            Activation::Softplus { beta } => {
                let z = beta * y;
                if z > 30.0 {
                    y
                } else {
                    z.exp().ln_1p() / beta
                }
            }
            Activation::Sigmoid => sigmoid(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Raw input width before positional encoding.
    pub input_dim: usize,
    /// Positional-encoding frequencies applied to the whole raw input (0 = none).
    pub pe_freqs: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: Activation,
    /// Layer indices (1..=hidden.len()) whose input is `concat(h, encoded input) / sqrt(2)`.
    pub skip_layers: Vec<usize>,
    pub weight_norm: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if let Some(&l) = self.skip_layers.iter().find(|&&l| l == 0 || l > self.hidden.len()) {
            return Err(Error::Config(format!("skip layer {l} out of range")));
        }
        Ok(())
    }

    pub fn encoded_dim(&self) -> usize {
        encoded_dim(self.input_dim, self.pe_freqs)
    }

    /// `(fan_in, fan_out)` of every linear layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let enc = self.encoded_dim();
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = enc;
        for l in 0..=self.hidden.len() {
            let fan_in = if self.skip_layers.contains(&l) { prev + enc } else { prev };
            let fan_out = if l < self.hidden.len() { self.hidden[l] } else { self.output_dim };
            dims.push((fan_in, fan_out));
            prev = fan_out;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| o * i + o + if self.weight_norm { o } else { 0 })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    g: Option<usize>,
    b: usize,
    skip: bool,
}

/// A network bound to a segment of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    offset: usize,
    len: usize,
    layers: Vec<LayerLayout>,
}

/// Network outputs for a batch. Tangents are stacked channel-major:
/// row `c * rows + r` holds the derivative of row `r` with respect to raw input `c`.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub values: Array2<f64>,
    pub tangents: Option<Array2<f64>>,
}

struct LayerTrace {
    x: Array2<f64>,
    xt: Option<Array2<f64>>,
    y: Array2<f64>,
    yt: Option<Array2<f64>>,
}

struct Trace {
    raw: Array2<f64>,
    layers: Vec<LayerTrace>,
}

impl Mlp {
    /// Allocates the network's parameters in `store` (zero-filled).
    pub fn new(spec: MlpSpec, store: &mut ParamStore, name: &str) -> Result<Self> {
        spec.validate()?;
        let len = spec.param_count();
        let range = store.allocate(name, len);
        let mut layers = Vec::new();
        let mut cursor = range.start;
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let w = cursor;
            cursor += fan_in * fan_out;
            let g = spec.weight_norm.then(|| {
                let g = cursor;
                cursor += fan_out;
                g
            });
            let b = cursor;
            cursor += fan_out;
            layers.push(LayerLayout {
                fan_in,
                fan_out,
                w,
                g,
                b,
                skip: spec.skip_layers.contains(&l),
            });
        }
        debug_assert_eq!(cursor, range.end);
        Ok(Self {
            spec,
            offset: range.start,
            len,
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() < self.offset + self.len {
            return Err(Error::Config(format!(
                "parameter vector of length {} too short for network ending at {}",
                params.len(),
                self.offset + self.len
            )));
        }
        Ok(())
    }

    fn weights(&self, layer: &LayerLayout, params: &[f64]) -> Array2<f64> {
        let v = ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params[layer.w..layer.w + layer.fan_in * layer.fan_out])
            .expect("layer layout");
        match layer.g {
            None => v.to_owned(),
            Some(g) => {
                let mut w = v.to_owned();
                for (o, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
                    let n = row.dot(&row).sqrt().max(1e-12);
                    row *= params[g + o] / n;
                }
                w
            }
        }
    }

    /// Encoded inputs and, when asked, their tangents with respect to the raw inputs.
    fn encode(&self, raw: ArrayView2<f64>, tangents: bool) -> (Array2<f64>, Option<Array2<f64>>) {
        let rows = raw.nrows();
        let d = self.spec.input_dim;
        let e = self.spec.encoded_dim();
        let mut enc = Array2::zeros((rows, e));
        let mut buf = vec![0.0; d];
        for (r, mut out) in enc.axis_iter_mut(Axis(0)).enumerate() {
            buf.iter_mut().zip(raw.row(r)).for_each(|(b, &x)| *b = x);
            encode_into(&buf, self.spec.pe_freqs, out.as_slice_mut().unwrap());
        }
        let enc_t = tangents.then(|| {
            let mut t = Array2::zeros((d * rows, e));
            let mut deriv = vec![0.0; e];
            for r in 0..rows {
                buf.iter_mut().zip(raw.row(r)).for_each(|(b, &x)| *b = x);
                encode_derivative_into(&buf, self.spec.pe_freqs, &mut deriv);
                for (k, &dk) in deriv.iter().enumerate() {
                    t[[source_component(k, d) * rows + r, k]] = dk;
                }
            }
            t
        });
        (enc, enc_t)
    }

    fn run(&self, params: &[f64], raw: ArrayView2<f64>, tangents: bool, keep: bool) -> (BatchOutput, Option<Trace>) {
        let rows = raw.nrows();
        let channels = self.spec.input_dim;
        let (enc, enc_t) = self.encode(raw, tangents);
        let mut h = enc.clone();
        let mut ht = enc_t.clone();
        let mut traces = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (x, xt) = if layer.skip {
                let x = concat_scaled(&h, &enc);
                let xt = ht.as_ref().map(|ht| concat_scaled(ht, enc_t.as_ref().unwrap()));
                (x, xt)
            } else {
                (h, ht)
            };
            let w = self.weights(layer, params);
            let bias = ndarray::ArrayView1::from(&params[layer.b..layer.b + layer.fan_out]);
            let mut y = matmul(x.view(), w.t());
            y += &bias;
            let yt = xt.as_ref().map(|xt| matmul(xt.view(), w.t()));
            let act = if l == last { self.spec.output_activation } else { self.spec.activation };
            let (hn, htn) = match &yt {
                None => (y.mapv(|v| act.value(v)), None),
                Some(yt) => {
                    let mut hn = Array2::zeros(y.raw_dim());
                    let mut htn = Array2::zeros(yt.raw_dim());
                    let ys = y.as_slice().unwrap();
                    let hs = hn.as_slice_mut().unwrap();
                    let n = ys.len();
                    let mut d1 = vec![0.0; n];
                    for i in 0..n {
                        let (v, a1, _) = act.eval(ys[i]);
                        hs[i] = v;
                        d1[i] = a1;
                    }
                    let yts = yt.as_slice().unwrap();
                    let hts = htn.as_slice_mut().unwrap();
                    for c in 0..channels {
                        let base = c * n;
                        for i in 0..n {
                            hts[base + i] = d1[i] * yts[base + i];
                        }
                    }
                    (hn, Some(htn))
                }
            };
            if keep {
                traces.push(LayerTrace { x, xt, y, yt });
            }
            h = hn;
            ht = htn;
        }
        let out = BatchOutput { values: h, tangents: ht };
        debug_assert!(out.values.nrows() == rows);
        let trace = keep.then(|| Trace {
            raw: raw.to_owned(),
            layers: traces,
        });
        (out, trace)
    }

    /// Plain evaluation of a batch (rows are raw inputs).
    pub fn eval_batch(&self, params: &[f64], raw: ArrayView2<f64>, tangents: bool) -> Result<BatchOutput> {
        self.check_params(params)?;
        if raw.ncols() != self.spec.input_dim {
            return Err(Error::Config(format!(
                "input width {} does not match network input {}",
                raw.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(self.run(params, raw, tangents, false).0)
    }

    pub fn eval(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        let raw = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.eval_batch(params, raw, false)?.values.into_raw_vec_and_offset().0)
    }

    /// Records a batch evaluation on `tape`.
    ///
    /// `input_vars` lists `(row * input_dim + col, var)` for raw inputs that
    /// are themselves differentiable; every other input is a constant.
    /// Tangent outputs are recorded only for the output columns in
    /// `tangent_outputs`.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &[f64],
        raw: Array2<f64>,
        input_vars: Vec<(usize, Var)>,
        tangent_outputs: &[usize],
    ) -> Result<RecordedBatch> {
        self.check_params(params)?;
        if raw.ncols() != self.spec.input_dim {
            return Err(Error::Config(format!(
                "input width {} does not match network input {}",
                raw.ncols(),
                self.spec.input_dim
            )));
        }
        if let Some(&j) = tangent_outputs.iter().find(|&&j| j >= self.spec.output_dim) {
            return Err(Error::Config(format!("tangent output {j} out of range")));
        }
        let rows = raw.nrows();
        let tangents = !tangent_outputs.is_empty();
        let (out, trace) = self.run(params, raw.view(), tangents, true);
        let out_dim = self.spec.output_dim;
        let channels = self.spec.input_dim;
        let n_sel = tangent_outputs.len();
        let mut values = Vec::with_capacity(rows * out_dim + rows * n_sel * channels);
        values.extend(out.values.iter().copied());
        if let Some(t) = &out.tangents {
            for r in 0..rows {
                for &j in tangent_outputs {
                    for c in 0..channels {
                        values.push(t[[c * rows + r, j]]);
                    }
                }
            }
        }
        let first = tape.push_block(
            &values,
            Box::new(MlpBlock {
                mlp: self.clone(),
                trace: trace.unwrap(),
                input_vars,
                tangent_outputs: tangent_outputs.to_vec(),
            }),
        );
        Ok(RecordedBatch {
            first: first.0,
            rows,
            out_dim,
            n_sel,
            channels,
        })
    }

    /// Single-input evaluation recorded on the tape.
    pub fn forward(&self, tape: &mut Tape, params: &[f64], input: &[f64]) -> Result<Vec<Var>> {
        let raw = Array2::from_shape_vec((1, input.len()), input.to_vec()).map_err(|e| Error::Config(e.to_string()))?;
        let batch = self.record(tape, params, raw, Vec::new(), &[])?;
        Ok((0..self.spec.output_dim).map(|j| batch.value(0, j)).collect())
    }

    /// Output `output_index` and its exact gradient with respect to a 3-D input,
    /// both recorded so that losses built from them remain differentiable.
    pub fn input_gradient(&self, tape: &mut Tape, params: &[f64], x: [f64; 3], output_index: usize) -> Result<(Var, [Var; 3])> {
        if self.spec.input_dim != 3 {
            return Err(Error::Config("input_gradient needs a 3-D input network".into()));
        }
        let raw = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
        let batch = self.record(tape, params, raw, Vec::new(), &[output_index])?;
        Ok((batch.value(0, output_index), [batch.tangent(0, 0, 0), batch.tangent(0, 0, 1), batch.tangent(0, 0, 2)]))
    }

    /// Random init: `N(0, 2 / fan_in)` weights and zero biases. With
    /// `zero_output` the output layer starts at exactly zero.
    pub fn init_default(&self, params: &mut [f64], rng: &mut impl Rng, zero_output: bool) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let std = (2.0 / layer.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            for w in &mut params[layer.w..layer.w + layer.fan_in * layer.fan_out] {
                *w = if l == last && zero_output { 0.0 } else { normal.sample(rng) };
            }
            params[layer.b..layer.b + layer.fan_out].fill(0.0);
            self.sync_weight_norm_gain(layer, params);
        }
    }

    /// Geometric ("sphere") initialisation: the fresh network approximates
    /// `‖x‖ - radius` (or `radius - ‖x‖` when `inward`, for scenes observed
    /// from inside) on the cube `[-1, 1]^3`.
    ///
    /// Hidden layers get the usual geometric init (raw coordinates only,
    /// zero-mean weights scaled by fan-out). The first output row is then
    /// fitted by least squares to the radial target so that the offset holds
    /// for a narrow network too; the remaining output rows start small.
    pub fn sphere_init(&self, params: &mut [f64], radius: f64, inward: bool, rng: &mut impl Rng) {
        let d = self.spec.input_dim;
        let enc = self.spec.encoded_dim();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate().take(last) {
            let weights = &mut params[layer.w..layer.w + layer.fan_in * layer.fan_out];
            let normal = Normal::new(0.0, SQRT_2 / (layer.fan_out as f64).sqrt()).unwrap();
            for (k, w) in weights.iter_mut().enumerate() {
                let col = k % layer.fan_in;
                // encoded input columns other than the raw coordinates start at zero
                let zeroed = if l == 0 {
                    col >= d
                } else if layer.skip {
                    col >= layer.fan_in - enc + d
                } else {
                    false
                };
                *w = if zeroed { 0.0 } else { normal.sample(rng) };
            }
            params[layer.b..layer.b + layer.fan_out].fill(0.0);
            self.sync_weight_norm_gain(layer, params);
        }

        let out = &self.layers[last];
        let n_in = out.fan_in;
        let mean = PI.sqrt() / (n_in as f64).sqrt();
        let sign = if inward { -1.0 } else { 1.0 };
        let jitter = Normal::new(0.0, 1e-4).unwrap();
        for (k, w) in params[out.w..out.w + n_in * out.fan_out].iter_mut().enumerate() {
            *w = if k < n_in {
                sign * mean + jitter.sample(rng)
            } else {
                Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).unwrap().sample(rng)
            };
        }
        params[out.b..out.b + out.fan_out].fill(0.0);
        params[out.b] = -sign * radius;
        self.sync_weight_norm_gain(out, params);

        // least-squares refit of the distance row on the penultimate features
        let samples = 8192;
        // a quarter of the fit points sit near the apex of the cone at the origin
        let raw = Array2::from_shape_fn((samples, d), |(r, _)| {
            let half = if r < samples / 4 { 0.25 } else { 1.0 };
            rng.random_range(-half..half)
        });
        let (feats, feat_t) = self.penultimate(params, raw.view());
        let dim = n_in + 1;
        let mut gram = vec![0.0; dim * dim];
        let mut rhs = vec![0.0; dim];
        let mut row = vec![0.0; dim];
        let mut accumulate = |row: &[f64], target: f64, weight: f64| {
            for i in 0..dim {
                rhs[i] += weight * row[i] * target;
                for j in 0..=i {
                    gram[i * dim + j] += weight * row[i] * row[j];
                }
            }
        };
        for r in 0..samples {
            row[..n_in].iter_mut().zip(feats.row(r)).for_each(|(a, &b)| *a = b);
            row[n_in] = 1.0;
            let x = raw.row(r);
            let norm = x.dot(&x).sqrt();
            accumulate(&row, sign * (norm - radius), 1.0);
            // gradient rows: the distance row is linear in the features' tangents too
            if norm > 0.05 {
                for c in 0..d {
                    row[..n_in].iter_mut().zip(feat_t.row(c * samples + r)).for_each(|(a, &b)| *a = b);
                    row[n_in] = 0.0;
                    accumulate(&row, sign * x[c] / norm, 1.0);
                }
            }
        }
        let ridge = 1e-6 * samples as f64;
        for i in 0..dim {
            for j in 0..i {
                gram[j * dim + i] = gram[i * dim + j];
            }
            gram[i * dim + i] += ridge;
        }
        if let Some(sol) = cholesky_solve(&mut gram, &rhs, dim) {
            params[out.w..out.w + n_in].copy_from_slice(&sol[..n_in]);
            params[out.b] = sol[n_in];
            self.sync_weight_norm_gain(out, params);
        }
    }

    /// Activations feeding the output layer and their tangents (channel-major rows).
    fn penultimate(&self, params: &[f64], raw: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (enc, enc_t) = self.encode(raw, true);
        let enc_t = enc_t.unwrap();
        let rows = raw.nrows();
        let (mut h, mut ht) = (enc.clone(), enc_t.clone());
        for layer in &self.layers[..self.layers.len() - 1] {
            let (x, xt) = if layer.skip {
                (concat_scaled(&h, &enc), concat_scaled(&ht, &enc_t))
            } else {
                (h, ht)
            };
            let w = self.weights(layer, params);
            let mut y = matmul(x.view(), w.t());
            y += &ndarray::ArrayView1::from(&params[layer.b..layer.b + layer.fan_out]);
            let mut yt = matmul(xt.view(), w.t());
            for c in 0..self.spec.input_dim {
                for r in 0..rows {
                    for o in 0..layer.fan_out {
                        yt[[c * rows + r, o]] *= self.spec.activation.eval(y[[r, o]]).1;
                    }
                }
            }
            h = y.mapv(|v| self.spec.activation.value(v));
            ht = yt;
        }
        (h, ht)
    }

    /// Sets weight-norm gains so the effective weights equal the direction vectors.
    fn sync_weight_norm_gain(&self, layer: &LayerLayout, params: &mut [f64]) {
        if let Some(g) = layer.g {
            for o in 0..layer.fan_out {
                let row = &params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                params[g + o] = n;
            }
        }
    }

    /// Reverse pass. Returns the adjoint of the raw inputs.
    fn backward(
        &self,
        trace: &Trace,
        params: &[f64],
        out_adj: Array2<f64>,
        out_adj_t: Option<Array2<f64>>,
        param_grad: &mut [f64],
    ) -> Array2<f64> {
        let rows = trace.raw.nrows();
        let channels = self.spec.input_dim;
        let enc_dim = self.spec.encoded_dim();
        let mut enc_adj = Array2::<f64>::zeros((rows, enc_dim));
        let mut enc_adj_t = out_adj_t.as_ref().map(|_| Array2::<f64>::zeros((channels * rows, enc_dim)));
        let mut h_adj = out_adj;
        let mut ht_adj = out_adj_t;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lt = &trace.layers[l];
            let act = if l == last { self.spec.output_activation } else { self.spec.activation };
            let n = lt.y.len();
            let ys = lt.y.as_slice().unwrap();
            let mut y_adj = Array2::<f64>::zeros(lt.y.raw_dim());
            let mut yt_adj = lt.yt.as_ref().map(|yt| Array2::<f64>::zeros(yt.raw_dim()));
            {
                let ya = y_adj.as_slice_mut().unwrap();
                let ha = h_adj.as_slice().unwrap();
                match (&lt.yt, &ht_adj, &mut yt_adj) {
                    (Some(yt), Some(hta), Some(yta)) => {
                        let yts = yt.as_slice().unwrap();
                        let htas = hta.as_slice().unwrap();
                        let ytas = yta.as_slice_mut().unwrap();
                        for i in 0..n {
                            let (_, a1, a2) = act.eval(ys[i]);
                            let mut acc = a1 * ha[i];
                            for c in 0..channels {
                                let k = c * n + i;
                                acc += a2 * yts[k] * htas[k];
                                ytas[k] = a1 * htas[k];
                            }
                            ya[i] = acc;
                        }
                    }
                    _ => {
                        for i in 0..n {
                            let (_, a1, _) = act.eval(ys[i]);
                            ya[i] = a1 * ha[i];
                        }
                    }
                }
            }
            // weight gradient
            let mut w_adj = matmul(y_adj.t(), lt.x.view());
            if let (Some(yta), Some(xt)) = (&yt_adj, &lt.xt) {
                general_mat_mul(1.0, &yta.t(), xt, 1.0, &mut w_adj);
            }
            let b_adj = y_adj.sum_axis(Axis(0));
            for (o, g) in b_adj.iter().enumerate() {
                param_grad[layer.b + o] += g;
            }
            let w = self.weights(layer, params);
            self.scatter_weight_grad(layer, params, &w_adj, param_grad);
            let x_adj = matmul(y_adj.view(), w.view());
            let xt_adj = yt_adj.as_ref().map(|yta| matmul(yta.view(), w.view()));
            let (prev_adj, prev_adj_t) = if layer.skip {
                let prev = layer.fan_in - enc_dim;
                enc_adj.scaled_add(1.0 / SQRT_2, &x_adj.slice(s![.., prev..]));
                if let (Some(ea), Some(xa)) = (&mut enc_adj_t, &xt_adj) {
                    ea.scaled_add(1.0 / SQRT_2, &xa.slice(s![.., prev..]));
                }
                (
                    x_adj.slice(s![.., ..prev]).mapv(|v| v / SQRT_2).as_standard_layout().into_owned(),
                    xt_adj.map(|xa| xa.slice(s![.., ..prev]).mapv(|v| v / SQRT_2).as_standard_layout().into_owned()),
                )
            } else {
                (x_adj, xt_adj)
            };
            h_adj = prev_adj;
            ht_adj = prev_adj_t;
        }
        enc_adj += &h_adj;
        if let (Some(ea), Some(ha)) = (&mut enc_adj_t, &ht_adj) {
            *ea += ha;
        }
        // chain through the encoding
        let d = channels;
        let mut raw_adj = Array2::<f64>::zeros((rows, d));
        let mut d1 = vec![0.0; enc_dim];
        let mut d2 = vec![0.0; enc_dim];
        let mut buf = vec![0.0; d];
        for r in 0..rows {
            buf.iter_mut().zip(trace.raw.row(r)).for_each(|(b, &x)| *b = x);
            encode_derivative_into(&buf, self.spec.pe_freqs, &mut d1);
            if enc_adj_t.is_some() {
                encode_second_derivative_into(&buf, self.spec.pe_freqs, &mut d2);
            }
            for k in 0..enc_dim {
                let c = source_component(k, d);
                let mut a = enc_adj[[r, k]] * d1[k];
                if let Some(ea) = &enc_adj_t {
                    a += ea[[c * rows + r, k]] * d2[k];
                }
                raw_adj[[r, c]] += a;
            }
        }
        raw_adj
    }

    fn scatter_weight_grad(&self, layer: &LayerLayout, params: &[f64], w_adj: &Array2<f64>, param_grad: &mut [f64]) {
        match layer.g {
            None => {
                let dst = &mut param_grad[layer.w..layer.w + layer.fan_in * layer.fan_out];
                for (d, s) in dst.iter_mut().zip(w_adj.iter()) {
                    *d += s;
                }
            }
            Some(g) => {
                for o in 0..layer.fan_out {
                    let v = &params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    let gain = params[g + o];
                    let row = w_adj.row(o);
                    let proj: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm;
                    param_grad[g + o] += proj;
                    for (k, (&a, &vk)) in row.iter().zip(v).enumerate() {
                        param_grad[layer.w + o * layer.fan_in + k] += gain / norm * (a - proj * vk / norm);
                    }
                }
            }
        }
    }
}

fn concat_scaled(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (rows, ca) = a.dim();
    let cb = b.ncols();
    let mut out = Array2::zeros((rows, ca + cb));
    out.slice_mut(s![.., ..ca]).assign(a);
    out.slice_mut(s![.., ca..]).assign(b);
    out.mapv_inplace(|v| v / SQRT_2);
    out
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, overwritten).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if diag <= 0.0 {
            return None;
        }
        let diag = diag.sqrt();
        a[j * n + j] = diag;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / diag;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    Some(y)
}

/// `a · b` into a fresh row-major array.
fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

/// Handles to the outputs of a recorded batch.
#[derive(Debug, Clone, Copy)]
pub struct RecordedBatch {
    first: u32,
    rows: usize,
    out_dim: usize,
    n_sel: usize,
    channels: usize,
}

impl RecordedBatch {
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn value(&self, row: usize, output: usize) -> Var {
        debug_assert!(row < self.rows && output < self.out_dim);
        Var(self.first + (row * self.out_dim + output) as u32)
    }

    /// Derivative of the `sel`-th selected tangent output of `row` with respect to raw input `channel`.
    #[inline]
    pub fn tangent(&self, row: usize, sel: usize, channel: usize) -> Var {
        debug_assert!(sel < self.n_sel && channel < self.channels);
        let base = self.rows * self.out_dim;
        Var(self.first + (base + (row * self.n_sel + sel) * self.channels + channel) as u32)
    }
}

struct MlpBlock {
    mlp: Mlp,
    trace: Trace,
    input_vars: Vec<(usize, Var)>,
    tangent_outputs: Vec<usize>,
}

impl BlockOp for MlpBlock {
    fn backward(&self, out_adj: &[f64], params: &[f64], param_grad: &mut [f64], input_adj: &mut dyn FnMut(Var, f64)) {
        let rows = self.trace.raw.nrows();
        let out_dim = self.mlp.spec.output_dim;
        let channels = self.mlp.spec.input_dim;
        let values = Array2::from_shape_vec((rows, out_dim), out_adj[..rows * out_dim].to_vec()).unwrap();
        let tangents = (!self.tangent_outputs.is_empty()).then(|| {
            let mut t = Array2::zeros((channels * rows, out_dim));
            let rest = &out_adj[rows * out_dim..];
            let n_sel = self.tangent_outputs.len();
            for r in 0..rows {
                for (s, &j) in self.tangent_outputs.iter().enumerate() {
                    for c in 0..channels {
                        t[[c * rows + r, j]] = rest[(r * n_sel + s) * channels + c];
                    }
                }
            }
            t
        });
        let raw_adj = self.mlp.backward(&self.trace, params, values, tangents, param_grad);
        let flat = raw_adj.as_slice().unwrap();
        for &(idx, var) in &self.input_vars {
            input_adj(var, flat[idx]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(pe: usize, hidden: Vec<usize>, act: Activation, skip: Vec<usize>, wn: bool) -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            pe_freqs: pe,
            hidden,
            output_dim: 4,
            activation: act,
            output_activation: Activation::Identity,
            skip_layers: skip,
            weight_norm: wn,
        }
    }

    fn random_net(spec: MlpSpec, seed: u64) -> (Mlp, ParamStore) {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(spec, &mut store, "net").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        store.values_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        (mlp, store)
    }

    /// Straightforward per-sample evaluator, independent of the batched path.
    fn naive_eval(mlp: &Mlp, params: &[f64], x: &[f64]) -> Vec<f64> {
        let enc = super::super::encoding::positional_encoding(x, mlp.spec.pe_freqs);
        let mut h = enc.clone();
        let last = mlp.layers.len() - 1;
        for (l, layer) in mlp.layers.iter().enumerate() {
            let input: Vec<f64> = if layer.skip {
                h.iter().chain(enc.iter()).map(|v| v / SQRT_2).collect()
            } else {
                h.clone()
            };
            let act = if l == last { mlp.spec.output_activation } else { mlp.spec.activation };
            h = (0..layer.fan_out)
                .map(|o| {
                    let row = &params[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                    let scale = match layer.g {
                        Some(g) => params[g + o] / row.iter().map(|v| v * v).sum::<f64>().sqrt(),
                        None => 1.0,
                    };
                    let y: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() * scale + params[layer.b + o];
                    act.value(y)
                })
                .collect();
        }
        h
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(spec(2, vec![8, 8], Activation::Relu, vec![], false), &mut store, "n").unwrap();
        let out = mlp.eval(store.values(), &[0.3, -0.2, 0.9]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn single_linear_layer_matches_hand_computation() {
        let s = MlpSpec {
            input_dim: 3,
            pe_freqs: 0,
            hidden: vec![1],
            output_dim: 1,
            activation: Activation::Identity,
            output_activation: Activation::Identity,
            skip_layers: vec![],
            weight_norm: false,
        };
        let mut store = ParamStore::new();
        let mlp = Mlp::new(s, &mut store, "lin").unwrap();
        // hidden: w=(1,2,3), b=0.5 ; output: w=2, b=-1  => f = 2(w.x + 0.5) - 1
        store.values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 0.5, 2.0, -1.0]);
        let x = [0.1, -0.4, 2.0];
        let f = mlp.eval(store.values(), &x).unwrap()[0];
        assert!((f - (2.0 * (0.1 - 0.8 + 6.0 + 0.5) - 1.0)).abs() < 1e-14);
        let mut tape = Tape::new();
        let (_, g) = mlp.input_gradient(&mut tape, store.values(), x, 0).unwrap();
        let g: Vec<f64> = g.iter().map(|&v| tape.value(v)).collect();
        assert_eq!(g, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let (mlp, store) = random_net(spec(0, vec![4], Activation::Relu, vec![], false), 1);
        assert!(matches!(mlp.eval(store.values(), &[1.0, 2.0]), Err(Error::Config(_))));
        assert!(matches!(mlp.eval(&store.values()[..3], &[1.0, 2.0, 3.0]), Err(Error::Config(_))));
    }

    #[test]
    fn batched_forward_matches_naive_evaluator() {
        for (k, s) in [
            spec(0, vec![16, 16, 16], Activation::Relu, vec![], false),
            spec(4, vec![16, 16, 16], Activation::Softplus { beta: 100.0 }, vec![2], false),
            spec(3, vec![8, 8], Activation::Softplus { beta: 10.0 }, vec![1], true),
        ]
        .into_iter()
        .enumerate()
        {
            let (mlp, store) = random_net(s, 10 + k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let raw = Array2::from_shape_fn((17, 3), |_| rng.random_range(-1.0..1.0));
            let out = mlp.eval_batch(store.values(), raw.view(), true).unwrap();
            for r in 0..17 {
                let naive = naive_eval(&mlp, store.values(), raw.row(r).as_slice().unwrap());
                for j in 0..4 {
                    assert!((out.values[[r, j]] - naive[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let (mlp, store) = random_net(spec(6, vec![32, 32], Activation::Softplus { beta: 100.0 }, vec![1], false), 3);
        let a = mlp.eval(store.values(), &[0.1, 0.2, 0.3]).unwrap();
        let b = mlp.eval(store.values(), &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (mlp, store) = random_net(spec(3, vec![16, 16, 16], Activation::Softplus { beta: 10.0 }, vec![2], true), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            for j in 0..4 {
                let mut tape = Tape::new();
                let (_, g) = mlp.input_gradient(&mut tape, store.values(), x, j).unwrap();
                for c in 0..3 {
                    let h = 1e-5;
                    let (mut xp, mut xm) = (x, x);
                    xp[c] += h;
                    xm[c] -= h;
                    let fd = (mlp.eval(store.values(), &xp).unwrap()[j] - mlp.eval(store.values(), &xm).unwrap()[j]) / (2.0 * h);
                    let an = tape.value(g[c]);
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "fd {fd} vs {an}");
                }
            }
        }
    }

    fn eikonal_like_loss(mlp: &Mlp, params: &[f64], xs: &[[f64; 3]], tape: &mut Tape) -> Var {
        let raw = Array2::from_shape_fn((xs.len(), 3), |(r, c)| xs[r][c]);
        let batch = mlp.record(tape, params, raw, Vec::new(), &[0]).unwrap();
        let mut terms = Vec::new();
        for r in 0..xs.len() {
            let g = [batch.tangent(r, 0, 0), batch.tangent(r, 0, 1), batch.tangent(r, 0, 2)];
            let n = tape.norm3(g);
            let d = tape.add_const(n, -1.0);
            let sq = tape.square(d);
            // mix in a value output as well
            let s = batch.value(r, 0);
            let z = batch.value(r, 2);
            let sz = tape.mul(s, z);
            terms.push(tape.add(sq, sz));
        }
        tape.sum(&terms)
    }

    #[test]
    fn nested_gradient_loss_matches_finite_differences() {
        let (mlp, store) = random_net(spec(2, vec![12, 12, 12], Activation::Softplus { beta: 5.0 }, vec![2], true), 21);
        let xs = [[0.1, 0.5, -0.3], [-0.7, 0.2, 0.4], [0.3, -0.3, 0.9]];
        let mut tape = Tape::new();
        let loss = eikonal_like_loss(&mlp, store.values(), &xs, &mut tape);
        let grad = tape.backward(loss, store.values());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let i = rng.random_range(0..store.len());
            let h = 1e-5;
            let mut p = store.values().to_vec();
            p[i] += h;
            let mut t = Tape::new();
            let lp = eikonal_like_loss(&mlp, &p, &xs, &mut t);
            let fp = t.value(lp);
            p[i] -= 2.0 * h;
            let mut t = Tape::new();
            let lm = eikonal_like_loss(&mlp, &p, &xs, &mut t);
            let fm = t.value(lm);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn differentiable_inputs_receive_adjoints() {
        let s = MlpSpec {
            input_dim: 3,
            pe_freqs: 2,
            hidden: vec![8],
            output_dim: 2,
            activation: Activation::Softplus { beta: 3.0 },
            output_activation: Activation::Sigmoid,
            skip_layers: vec![],
            weight_norm: false,
        };
        let (mlp, mut store) = random_net(s, 2);
        let extra = store.allocate("x", 3);
        store.values_mut()[extra.clone()].copy_from_slice(&[0.2, -0.1, 0.6]);
        let f = |p: &[f64], tape: &mut Tape| {
            let xs: Vec<Var> = extra.clone().map(|i| tape.param(p, i)).collect();
            let raw = Array2::from_shape_vec((1, 3), extra.clone().map(|i| p[i]).collect()).unwrap();
            let vars = (0..3).map(|c| (c, xs[c])).collect();
            let b = mlp.record(tape, p, raw, vars, &[]).unwrap();
            let a = b.value(0, 0);
            let c = b.value(0, 1);
            tape.mul(a, c)
        };
        let mut tape = Tape::new();
        let loss = f(store.values(), &mut tape);
        let g = tape.backward(loss, store.values());
        for i in extra.clone() {
            let h = 1e-6;
            let mut p = store.values().to_vec();
            p[i] += h;
            let mut t = Tape::new();
            let l1 = f(&p, &mut t);
            let fp = t.value(l1);
            p[i] -= 2.0 * h;
            let mut t = Tape::new();
            let l2 = f(&p, &mut t);
            let fd = (fp - t.value(l2)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn sphere_init_approximates_radial_distance() {
        let geo = MlpSpec {
            input_dim: 3,
            pe_freqs: 6,
            hidden: vec![64; 4],
            output_dim: 65,
            activation: Activation::Softplus { beta: 100.0 },
            output_activation: Activation::Identity,
            skip_layers: vec![2],
            weight_norm: false,
        };
        for seed in [1u64, 2] {
            let mut store = ParamStore::new();
            let mlp = Mlp::new(geo.clone(), &mut store, "g").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mlp.sphere_init(store.values_mut(), 0.5, false, &mut rng);
            let mut sample_rng = ChaCha8Rng::seed_from_u64(100);
            let n = 2000;
            let raw = Array2::from_shape_fn((n, 3), |_| sample_rng.random_range(-1.0..1.0));
            let out = mlp.eval_batch(store.values(), raw.view(), false).unwrap();
            let good = (0..n)
                .filter(|&r| {
                    let x = raw.row(r);
                    let radial = x.dot(&x).sqrt() - 0.5;
                    (out.values[[r, 0]] - radial).abs() < 0.15
                })
                .count();
            assert!(good as f64 >= 0.95 * n as f64, "seed {seed}: {good}/{n}");
            let f0 = mlp.eval(store.values(), &[0.0, 0.0, 0.0]).unwrap()[0];
            assert!((f0 + 0.5).abs() < 0.15, "f(0) = {f0}");
        }
    }
}
