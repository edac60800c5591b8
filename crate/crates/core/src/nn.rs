//! Small fully connected networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `l` with fan-in `n_in` and
//! fan-out `n_out` stores its weights as an `n_in x n_out` row-major block
//! (`w[i * n_out + j]` connects input `i` to output `j`) followed by `n_out`
//! biases. Batched inputs are row-major `n x n_in` matrices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AORL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut [f64]) {
        match self {
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the layer output `y`.
    fn backprop(self, y: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => grad.iter_mut().zip(y).for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad
                .iter_mut()
                .zip(y)
                .for_each(|(g, &y)| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    /// One activation per affine layer (`layer_sizes.len() - 1` entries).
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            activations,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `input -> hidden... -> output`, with `hidden_act` on every hidden layer.
    pub fn feedforward(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(output_act);
        MlpSpec::new(sizes, acts, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer sizes, got {}",
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(Error::InvalidSpec(format!(
                "{} layers need {} activations, got {}",
                self.layer_sizes.len(),
                self.layer_sizes.len() - 1,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerView {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
    act: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

/// Post-activation outputs of every layer for one batch, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    n: usize,
    /// `layers[0]` is the input; `layers[l + 1]` the output of affine layer `l`.
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }
}

impl Mlp {
    /// Uniform `±sqrt(6 / n_in)` weights, zero biases, seeded from `MlpSpec::seed`.
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::from_seed(spec.seed);
        let mut params = vec![0.0; spec.param_count()];
        let mut offset = 0;
        for w in spec.layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / n_in as f64).sqrt();
            for p in &mut params[offset..offset + n_in * n_out] {
                *p = rng.gen_range(-bound..bound);
            }
            offset += (n_in + 1) * n_out;
        }
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.param_count()];
        Ok(Mlp { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: spec.param_count(),
                actual: params.len(),
            });
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn layers(&self) -> impl Iterator<Item = LayerView> + '_ {
        let mut offset = 0;
        self.spec
            .layer_sizes
            .windows(2)
            .zip(&self.spec.activations)
            .map(move |(w, &act)| {
                let (n_in, n_out) = (w[0], w[1]);
                let view = LayerView {
                    w: offset,
                    b: offset + n_in * n_out,
                    n_in,
                    n_out,
                    act,
                };
                offset += (n_in + 1) * n_out;
                view
            })
    }

    /// Index of the layer owning parameter `idx`.
    pub fn layer_of_param(&self, idx: usize) -> usize {
        self.layers()
            .position(|l| idx < l.b + l.n_out)
            .unwrap_or(self.spec.n_layers() - 1)
    }

    /// Weight and bias slices of layer `l`.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let v = self.layers().nth(l).expect("layer index out of range");
        (
            &self.params[v.w..v.w + v.n_in * v.n_out],
            &self.params[v.b..v.b + v.n_out],
        )
    }

    pub fn layer_params_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let v = self.layers().nth(l).expect("layer index out of range");
        let (w, rest) = self.params[v.w..].split_at_mut(v.n_in * v.n_out);
        (w, &mut rest[..v.n_out])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    pub fn forward_batch(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_input(inputs, n)?;
        let mut x = inputs.to_vec();
        for layer in self.layers() {
            x = self.affine(layer, &x, n);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, inputs: &[f64], n: usize) -> Result<ForwardCache> {
        self.check_input(inputs, n)?;
        let mut layers = Vec::with_capacity(self.spec.layer_sizes.len());
        layers.push(inputs.to_vec());
        for layer in self.layers() {
            let y = self.affine(layer, layers.last().unwrap(), n);
            layers.push(y);
        }
        Ok(ForwardCache { n, layers })
    }

    fn check_input(&self, inputs: &[f64], n: usize) -> Result<()> {
        let expected = n * self.input_dim();
        if inputs.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected,
                actual: inputs.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: LayerView, x: &[f64], n: usize) -> Vec<f64> {
        let bias = &self.params[l.b..l.b + l.n_out];
        let mut y = Vec::with_capacity(n * l.n_out);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        let w = &self.params[l.w..l.w + l.n_in * l.n_out];
        // SAFETY: x is n x n_in, w is n_in x n_out, y is n x n_out, all row-major
        // and sized accordingly above.
        unsafe {
            matrixmultiply::dgemm(
                n,
                l.n_in,
                l.n_out,
                1.0,
                x.as_ptr(),
                l.n_in as isize,
                1,
                w.as_ptr(),
                l.n_out as isize,
                1,
                1.0,
                y.as_mut_ptr(),
                l.n_out as isize,
                1,
            );
        }
        l.act.apply(&mut y);
        y
    }

    /// Parameter gradient of `output_gradient · f(input)` for a single input.
    pub fn backward(&self, input: &[f64], output_gradient: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(input, 1)?;
        let mut grads = vec![0.0; self.params.len()];
        self.backward_cached(&cache, output_gradient, &mut grads, false)?;
        Ok(grads)
    }

    /// Accumulates the parameter gradient into `param_grad` and, when asked,
    /// returns the gradient with respect to the batch inputs.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        output_gradient: &[f64],
        param_grad: &mut [f64],
        want_input_grad: bool,
    ) -> Result<Option<Vec<f64>>> {
        let n = cache.n;
        let expected = n * self.output_dim();
        if output_gradient.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "output gradient",
                expected,
                actual: output_gradient.len(),
            });
        }
        if param_grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter gradient buffer",
                expected: self.params.len(),
                actual: param_grad.len(),
            });
        }
        let layers: Vec<LayerView> = self.layers().collect();
        let mut delta = output_gradient.to_vec();
        for (idx, l) in layers.iter().enumerate().rev() {
            let y = &cache.layers[idx + 1];
            let x = &cache.layers[idx];
            l.act.backprop(y, &mut delta);

            let gw = &mut param_grad[l.w..l.w + l.n_in * l.n_out];
            // gw (n_in x n_out) += x^T (n_in x n) * delta (n x n_out)
            unsafe {
                matrixmultiply::dgemm(
                    l.n_in,
                    n,
                    l.n_out,
                    1.0,
                    x.as_ptr(),
                    1,
                    l.n_in as isize,
                    delta.as_ptr(),
                    l.n_out as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    l.n_out as isize,
                    1,
                );
            }
            let gb = &mut param_grad[l.b..l.b + l.n_out];
            for row in delta.chunks_exact(l.n_out) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }

            if idx == 0 && !want_input_grad {
                return Ok(None);
            }
            // next delta (n x n_in) = delta (n x n_out) * w^T (n_out x n_in)
            let w = &self.params[l.w..l.w + l.n_in * l.n_out];
            let mut next = vec![0.0; n * l.n_in];
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    l.n_out,
                    l.n_in,
                    1.0,
                    delta.as_ptr(),
                    l.n_out as isize,
                    1,
                    w.as_ptr(),
                    1,
                    l.n_out as isize,
                    0.0,
                    next.as_mut_ptr(),
                    l.n_in as isize,
                    1,
                );
            }
            delta = next;
        }
        Ok(Some(delta))
    }

    /// `self <- (1 - tau) * self + tau * online`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        debug_assert_eq!(self.params.len(), online.params.len());
        self.params
            .iter_mut()
            .zip(&online.params)
            .for_each(|(t, o)| *t = (1.0 - tau) * *t + tau * o);
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.spec.layer_sizes.len() as u32).to_le_bytes())?;
        for &n in &self.spec.layer_sizes {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for act in &self.spec.activations {
            w.write_all(&[act.code()])?;
        }
        w.write_all(&self.spec.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_sizes = read_u32(r, "layer count")? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(read_u32(r, "layer size")? as usize);
        }
        let mut acts = Vec::with_capacity(n_sizes - 1);
        for _ in 0..n_sizes - 1 {
            let mut b = [0u8; 1];
            read_exact(r, &mut b, "activation")?;
            acts.push(Activation::from_code(b[0])?);
        }
        let mut seed = [0u8; 8];
        read_exact(r, &mut seed, "seed")?;
        let spec = MlpSpec::new(sizes, acts, u64::from_le_bytes(seed))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut count = [0u8; 8];
        read_exact(r, &mut count, "parameter count")?;
        let count = u64::from_le_bytes(count) as usize;
        if count != spec.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match spec ({})",
                spec.param_count()
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            read_exact(r, &mut buf, "parameters")?;
            params.push(f64::from_le_bytes(buf));
        }
        Ok(Mlp { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Mlp::read_checkpoint(&mut BufReader::new(file))
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Length-prefixed `f64` vector.
pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, what: &str) -> Result<Vec<f64>> {
    let n = read_u64(r, what)? as usize;
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("implausible length {n} for {what}")));
    }
    (0..n).map(|_| read_f64(r, what)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 3e-4;

    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_net(net: &Mlp) -> Self {
        AdamState::new(net.params().len(), Self::DEFAULT_LR)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.step_count.to_le_bytes())?;
        for x in [self.lr, self.beta1, self.beta2, self.eps] {
            w.write_all(&x.to_le_bytes())?;
        }
        write_f64s(w, &self.m)?;
        write_f64s(w, &self.v)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let step_count = read_u64(r, "adam step count")?;
        let lr = read_f64(r, "adam lr")?;
        let beta1 = read_f64(r, "adam beta1")?;
        let beta2 = read_f64(r, "adam beta2")?;
        let eps = read_f64(r, "adam eps")?;
        let m = read_f64s(r, "adam first moment")?;
        let v = read_f64s(r, "adam second moment")?;
        if m.len() != v.len() {
            return Err(Error::Checkpoint("adam moment lengths differ".into()));
        }
        Ok(AdamState {
            m,
            v,
            step_count,
            lr,
            beta1,
            beta2,
            eps,
        })
    }
}

/// One bias-corrected Adam update. Rejects the whole step (leaving `net` and
/// `state` untouched) if any gradient entry is non-finite.
pub fn adam_step(net: &mut Mlp, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let n = net.params.len();
    if grads.len() != n {
        return Err(Error::DimensionMismatch {
            context: "adam gradient",
            expected: n,
            actual: grads.len(),
        });
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            context: "adam moments",
            expected: n,
            actual: state.m.len().min(state.v.len()),
        });
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            layer: net.layer_of_param(idx),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (((p, &g), m), v) in net
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
