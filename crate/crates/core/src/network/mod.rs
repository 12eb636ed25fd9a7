//! Feed-forward network used as the observer gain `k(x_hat, y)`.
//!
//! Besides the plain forward pass the network exposes its exact input
//! Jacobian and a reverse pass that differentiates scalar functions of
//! both the output and the input Jacobian with respect to the parameters.
//! The Jacobian is carried forward as tangent columns next to the
//! activations; the reverse pass then runs back through that extended
//! computation, which yields the mixed second derivatives the contraction
//! loss needs without nesting a generic autodiff engine.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sampling::CollocationSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::LossSpec;
use crate::systems::SystemModel;

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// First derivative given the pre-activation `z` and activation `a`.
    #[inline]
    fn derivative(self, _z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    fn second_derivative(self, _z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Identity => 0.0,
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Flat parameter vector: every weight matrix (row-major, layer order)
/// followed by every bias vector (layer order).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl Mlp {
    /// Network with all weights and biases set to zero.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Glorot-uniform weights (`U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`)
    /// and zero biases, drawn from a ChaCha stream seeded with `seed`.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, w) in net.weights.iter_mut().enumerate() {
            let fan_in = layer_dims[l] as f64;
            let fan_out = layer_dims[l + 1] as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit row-major weights and biases.
    pub fn from_parts(
        layer_dims: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        check_dims(layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers {
            return Err(Error::shape("weight layers", layers, weights.len()));
        }
        if biases.len() != layers {
            return Err(Error::shape("bias layers", layers, biases.len()));
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            if weights[l].len() != fan_in * fan_out {
                return Err(Error::shape("weight matrix", fan_in * fan_out, weights[l].len()));
            }
            if biases[l].len() != fan_out {
                return Err(Error::shape("bias vector", fan_out, biases[l].len()));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("network parameter"));
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Row-major `layer_dims[l+1] x layer_dims[l]` weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        &self.weights[l]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        &self.biases[l]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn pack(&self) -> ParamVector {
        let mut flat = Vec::with_capacity(self.param_count());
        for w in &self.weights {
            flat.extend_from_slice(w);
        }
        for b in &self.biases {
            flat.extend_from_slice(b);
        }
        ParamVector(flat)
    }

    /// Copy of this network with parameters taken from `params`.
    pub fn unpack(&self, params: &ParamVector) -> Result<Mlp> {
        let mut net = self.clone();
        net.set_params(params.as_slice())?;
        Ok(net)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape("parameter vector", self.param_count(), params.len()));
        }
        let mut offset = 0;
        for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            let len = w.len();
            w.copy_from_slice(&params[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn weight_offsets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut w_off = Vec::with_capacity(self.weights.len());
        let mut offset = 0;
        for w in &self.weights {
            w_off.push(offset);
            offset += w.len();
        }
        let mut b_off = Vec::with_capacity(self.biases.len());
        for b in &self.biases {
            b_off.push(offset);
            offset += b.len();
        }
        (w_off, b_off)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), input.len()));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("network input"));
        }
        Ok(())
    }

    /// Evaluates the network. Pure; the network is never mutated.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(input, &mut out);
        Ok(out)
    }

    /// Unchecked forward pass into `out`.
    pub(crate) fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            next.clear();
            next.extend_from_slice(&self.biases[l]);
            let w = &self.weights[l];
            for (i, z) in next.iter_mut().enumerate() {
                let row = &w[i * fan_in..(i + 1) * fan_in];
                *z += dot(row, &cur);
            }
            debug_assert_eq!(next.len(), fan_out);
            if l < last {
                for z in next.iter_mut() {
                    *z = self.activation.apply(*z);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur);
    }

    /// Exact Jacobian of the output with respect to the whole input,
    /// row-major `output_dim x input_dim`. The leading `n` columns are the
    /// derivative with respect to `x_hat`, the trailing ones with respect
    /// to `y`.
    pub fn input_jacobian(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut tape = Tape::new(self, self.input_dim());
        tape.record(self, input);
        Ok(tape.jacobian().to_vec())
    }

    /// Upper bound on the Lipschitz constant of the output with respect to
    /// the trailing input block `y` (columns `output_dim..input_dim`).
    ///
    /// Product of layer spectral norms (the first layer restricted to the
    /// `y` columns) and the activation constant per hidden layer.
    pub fn lipschitz_bound(&self) -> f64 {
        let n = self.output_dim();
        let in_dim = self.input_dim();
        let mut bound = 1.0;
        for (l, w) in self.weights.iter().enumerate() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let sigma = if l == 0 {
                let cols = in_dim.saturating_sub(n);
                let mut block = Vec::with_capacity(fan_out * cols);
                for i in 0..fan_out {
                    block.extend_from_slice(&w[i * fan_in + n..(i + 1) * fan_in]);
                }
                linalg::spectral_norm(&block, fan_out, cols, SPECTRAL_TOL, SPECTRAL_MAX_ITER)
            } else {
                linalg::spectral_norm(w, fan_out, fan_in, SPECTRAL_TOL, SPECTRAL_MAX_ITER)
            };
            bound *= sigma;
            if l + 1 < self.num_layers() {
                bound *= self.activation.lipschitz();
            }
        }
        bound
    }
}

const SPECTRAL_TOL: f64 = 1e-6;
const SPECTRAL_MAX_ITER: usize = 500;

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config("a network needs at least an input and an output layer".into()));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("layer sizes must be positive: {layer_dims:?}")));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the layer sizes `[n + p, hidden..., n]`.
pub fn layer_dims_for(n: usize, p: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(n + p);
    dims.extend_from_slice(hidden);
    dims.push(n);
    dims
}

/// Activations and input tangents of one forward evaluation, kept for the
/// reverse pass. Buffers are sized once and reused across points.
pub(crate) struct Tape {
    /// Number of leading input columns carried as tangents.
    tangent_cols: usize,
    input: Vec<f64>,
    /// Pre-activations per layer.
    z: Vec<Vec<f64>>,
    /// Post-activations per hidden layer (the output layer is affine).
    a: Vec<Vec<f64>>,
    /// `d z_l / d input[..tangent_cols]`, row-major `fan_out x tangent_cols`.
    tz: Vec<Vec<f64>>,
    /// `d a_l / d input[..tangent_cols]`.
    ta: Vec<Vec<f64>>,
    // reverse-pass scratch
    zbar: Vec<f64>,
    tzbar: Vec<f64>,
    abar: Vec<f64>,
    tabar: Vec<f64>,
}

impl Tape {
    pub(crate) fn new(net: &Mlp, tangent_cols: usize) -> Self {
        let dims = &net.layer_dims;
        let layers = net.num_layers();
        let widest = dims.iter().copied().max().unwrap_or(0);
        Tape {
            tangent_cols,
            input: vec![0.0; dims[0]],
            z: (0..layers).map(|l| vec![0.0; dims[l + 1]]).collect(),
            a: (0..layers).map(|l| vec![0.0; dims[l + 1]]).collect(),
            tz: (0..layers).map(|l| vec![0.0; dims[l + 1] * tangent_cols]).collect(),
            ta: (0..layers).map(|l| vec![0.0; dims[l + 1] * tangent_cols]).collect(),
            zbar: vec![0.0; widest],
            tzbar: vec![0.0; widest * tangent_cols],
            abar: vec![0.0; widest],
            tabar: vec![0.0; widest * tangent_cols],
        }
    }

    pub(crate) fn output(&self) -> &[f64] {
        self.z.last().expect("at least one layer")
    }

    /// `d output / d input[..tangent_cols]`, row-major.
    pub(crate) fn jacobian(&self) -> &[f64] {
        self.tz.last().expect("at least one layer")
    }

    pub(crate) fn record(&mut self, net: &Mlp, input: &[f64]) {
        let tc = self.tangent_cols;
        let last = net.num_layers() - 1;
        self.input.copy_from_slice(input);
        for l in 0..=last {
            let (fan_in, fan_out) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let w = &net.weights[l];
            let b = &net.biases[l];
            let (done, rest) = self.a.split_at_mut(l);
            let (tdone, trest) = self.ta.split_at_mut(l);
            let prev: &[f64] = if l == 0 { &self.input } else { &done[l - 1] };
            let z = &mut self.z[l];
            let tz = &mut self.tz[l];
            for i in 0..fan_out {
                let row = &w[i * fan_in..(i + 1) * fan_in];
                z[i] = b[i] + dot(row, prev);
                if l == 0 {
                    tz[i * tc..(i + 1) * tc].copy_from_slice(&row[..tc]);
                } else {
                    let prev_t = &tdone[l - 1];
                    let out = &mut tz[i * tc..(i + 1) * tc];
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for (k, &wik) in row.iter().enumerate() {
                        if wik != 0.0 {
                            let src = &prev_t[k * tc..(k + 1) * tc];
                            for (o, s) in out.iter_mut().zip(src) {
                                *o += wik * s;
                            }
                        }
                    }
                }
            }
            if l < last {
                let a = &mut rest[0];
                let ta = &mut trest[0];
                for i in 0..fan_out {
                    a[i] = net.activation.apply(z[i]);
                    let s = net.activation.derivative(z[i], a[i]);
                    for c in 0..tc {
                        ta[i * tc + c] = s * tz[i * tc + c];
                    }
                }
            }
        }
    }

    /// Accumulates into `grad` (packed layout) the parameter gradient of a
    /// scalar whose partials are `out_bar` (w.r.t. the output) and
    /// `jac_bar` (w.r.t. the recorded Jacobian, row-major
    /// `output_dim x tangent_cols`; `None` means zero).
    pub(crate) fn backward(&mut self, net: &Mlp, out_bar: &[f64], jac_bar: Option<&[f64]>, grad: &mut [f64]) {
        let tc = self.tangent_cols;
        let (w_off, b_off) = net.weight_offsets();
        let last = net.num_layers() - 1;
        let out_dim = net.output_dim();
        self.zbar[..out_dim].copy_from_slice(out_bar);
        match jac_bar {
            Some(jb) => self.tzbar[..out_dim * tc].copy_from_slice(jb),
            None => self.tzbar[..out_dim * tc].iter_mut().for_each(|v| *v = 0.0),
        }
        for l in (0..=last).rev() {
            let (fan_in, fan_out) = (net.layer_dims[l], net.layer_dims[l + 1]);
            if l < last {
                // through a = act(z), ta = act'(z) * tz
                let z = &self.z[l];
                let a = &self.a[l];
                let tz = &self.tz[l];
                for i in 0..fan_out {
                    let s = net.activation.derivative(z[i], a[i]);
                    let s2 = net.activation.second_derivative(z[i], a[i]);
                    let mut sbar = 0.0;
                    for c in 0..tc {
                        let tab = self.tabar[i * tc + c];
                        sbar += tab * tz[i * tc + c];
                        self.tzbar[i * tc + c] = s * tab;
                    }
                    self.zbar[i] = self.abar[i] * s + sbar * s2;
                }
            }
            let w = &net.weights[l];
            let gw = &mut grad[w_off[l]..w_off[l] + fan_in * fan_out];
            let prev: &[f64] = if l == 0 { &self.input } else { &self.a[l - 1] };
            for i in 0..fan_out {
                let zb = self.zbar[i];
                let grow = &mut gw[i * fan_in..(i + 1) * fan_in];
                if zb != 0.0 {
                    for (g, p) in grow.iter_mut().zip(prev) {
                        *g += zb * p;
                    }
                }
                let tzb = &self.tzbar[i * tc..(i + 1) * tc];
                if l == 0 {
                    for (g, t) in grow[..tc].iter_mut().zip(tzb) {
                        *g += t;
                    }
                } else {
                    let prev_t = &self.ta[l - 1];
                    for (k, g) in grow.iter_mut().enumerate() {
                        *g += dot(tzb, &prev_t[k * tc..(k + 1) * tc]);
                    }
                }
            }
            let gb = &mut grad[b_off[l]..b_off[l] + fan_out];
            for (g, zb) in gb.iter_mut().zip(&self.zbar[..fan_out]) {
                *g += zb;
            }
            if l > 0 {
                // abar = W^T zbar, tabar = W^T tzbar
                self.abar[..fan_in].iter_mut().for_each(|v| *v = 0.0);
                self.tabar[..fan_in * tc].iter_mut().for_each(|v| *v = 0.0);
                for i in 0..fan_out {
                    let row = &w[i * fan_in..(i + 1) * fan_in];
                    let zb = self.zbar[i];
                    let tzb = &self.tzbar[i * tc..(i + 1) * tc];
                    for (k, &wik) in row.iter().enumerate() {
                        self.abar[k] += wik * zb;
                        let dst = &mut self.tabar[k * tc..(k + 1) * tc];
                        for (d, t) in dst.iter_mut().zip(tzb) {
                            *d += wik * t;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the total physics loss with respect to the packed
/// parameters, evaluated on `batch`.
pub fn loss_gradient(
    net: &Mlp,
    batch: &CollocationSet,
    spec: &LossSpec,
    system: &SystemModel,
) -> Result<ParamVector> {
    let eval = crate::loss::evaluate(system, net, batch, spec, true)?;
    Ok(ParamVector(eval.gradient.expect("gradient requested")))
}
