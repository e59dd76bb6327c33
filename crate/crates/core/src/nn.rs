//! Minimal differentiable-function toolkit: fixed-graph multilayer
//! perceptrons with ReLU hidden layers, reverse-mode gradients, an
//! adaptive-moment optimizer, flat parameter (de)serialization, and the
//! weighted parameter averaging used for model aggregation.
//!
//! Parameters live in one flat `Vec<f64>` with a documented layout (per
//! layer: row-major `out x in` weights, then biases), so optimizer state,
//! gradients, checkpoints, and aggregation payloads all share the same
//! indexing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Output-head variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Raw affine output.
    Linear,
    /// Elementwise logistic output, strictly inside (0, 1).
    Sigmoid,
    /// First half of the output is the action mean, second half the
    /// log-standard-deviation clamped to `LOG_STD_RANGE`.
    GaussianPolicy,
}

/// Clamp range for the gaussian-policy log-std head.
pub const LOG_STD_RANGE: (f64, f64) = (-5.0, 2.0);

/// Pre-activation clamp for the sigmoid head; keeps outputs strictly inside
/// (0, 1) in f64.
const SIGMOID_CLAMP: f64 = 30.0;

/// Feed-forward network with ReLU hidden activations and a configurable
/// output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    head: HeadKind,
    params: Vec<f64>,
}

/// Number of parameters implied by a dimension chain.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Maps a flat parameter index to `(layer, "weights"|"biases")`.
pub fn param_location(dims: &[usize], flat_idx: usize) -> (usize, &'static str) {
    let mut off = 0;
    for (l, w) in dims.windows(2).enumerate() {
        let n_w = w[0] * w[1];
        if flat_idx < off + n_w {
            return (l, "weights");
        }
        off += n_w;
        if flat_idx < off + w[1] {
            return (l, "biases");
        }
        off += w[1];
    }
    (dims.len().saturating_sub(2), "biases")
}

impl Mlp {
    /// Builds a network with fan-in-scaled uniform initialization.
    pub fn new(dims: Vec<usize>, head: HeadKind, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Dimension("an MLP needs at least input and output dims".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension("zero-width layer".into()));
        }
        if head == HeadKind::GaussianPolicy && dims.last().unwrap() % 2 != 0 {
            return Err(Error::Dimension("gaussian-policy head needs an even output dim".into()));
        }
        let mut params = Vec::with_capacity(param_count(&dims));
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(rng.gen_range(-bound..bound));
            }
            for _ in 0..w[1] {
                params.push(0.0);
            }
        }
        Ok(Mlp { dims, head, params })
    }

    /// Builds a network with all parameters zero.
    pub fn zeros(dims: Vec<usize>, head: HeadKind) -> Result<Self> {
        let n = param_count(&dims);
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension("bad dimension chain".into()));
        }
        Ok(Mlp { dims, head, params: vec![0.0; n] })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter view (documented layout, stable across calls).
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "parameter vector length {} does not match network {}",
                flat.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        // (weight offset, bias offset) per layer
        let mut out = Vec::with_capacity(self.dims.len() - 1);
        let mut off = 0;
        for w in self.dims.windows(2) {
            let w_off = off;
            off += w[0] * w[1];
            out.push((w_off, off));
            off += w[1];
        }
        out
    }

    /// Deterministic forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    /// Forward pass retaining the activations needed for `backward`.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input length {} does not match input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        let offsets = self.layer_offsets();
        let n_layers = self.dims.len() - 1;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);

        for l in 0..n_layers {
            let (in_dim, out_dim) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = offsets[l];
            let prev = &activations[l];
            let mut z = vec![0.0; out_dim];
            for o in 0..out_dim {
                let row = &self.params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                let mut acc = self.params[b_off + o];
                for (wi, xi) in row.iter().zip(prev) {
                    acc += wi * xi;
                }
                z[o] = acc;
            }
            let a = if l + 1 == n_layers {
                apply_head(self.head, &z)
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            preacts.push(z);
            activations.push(a);
        }

        let output = activations.last().unwrap().clone();
        Ok(ForwardTrace { activations, preacts, output })
    }

    /// Exact reverse-mode gradient of `sum(upstream .* output)` with respect
    /// to the flat parameter vector.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension(format!(
                "upstream length {} does not match output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let offsets = self.layer_offsets();
        let n_layers = self.dims.len() - 1;
        let mut grad = vec![0.0; self.params.len()];

        // gradient w.r.t. the last layer's pre-activation
        let mut dz = head_backward(self.head, &trace.preacts[n_layers - 1], upstream);

        for l in (0..n_layers).rev() {
            let (in_dim, out_dim) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = offsets[l];
            let prev = &trace.activations[l];

            for o in 0..out_dim {
                let g = dz[o];
                grad[b_off + o] += g;
                let row = &mut grad[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                for (gi, xi) in row.iter_mut().zip(prev) {
                    *gi += g * xi;
                }
            }

            if l > 0 {
                let mut dx = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let g = dz[o];
                    let row = &self.params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                    for (di, wi) in dx.iter_mut().zip(row) {
                        *di += g * wi;
                    }
                }
                // ReLU mask of the previous hidden layer
                for (d, z) in dx.iter_mut().zip(&trace.preacts[l - 1]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = dx;
            }
        }
        Ok(grad)
    }
}

/// Activations cached by `forward_trace`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input followed by each layer's post-activation output.
    pub activations: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pub preacts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

fn apply_head(head: HeadKind, z: &[f64]) -> Vec<f64> {
    match head {
        HeadKind::Linear => z.to_vec(),
        HeadKind::Sigmoid => z
            .iter()
            .map(|&v| sigmoid(v.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)))
            .collect(),
        HeadKind::GaussianPolicy => {
            let half = z.len() / 2;
            let mut out = z.to_vec();
            for v in out.iter_mut().skip(half) {
                *v = v.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
            }
            out
        }
    }
}

fn head_backward(head: HeadKind, z: &[f64], upstream: &[f64]) -> Vec<f64> {
    match head {
        HeadKind::Linear => upstream.to_vec(),
        HeadKind::Sigmoid => z
            .iter()
            .zip(upstream)
            .map(|(&v, &u)| {
                if v.abs() >= SIGMOID_CLAMP {
                    0.0
                } else {
                    let y = sigmoid(v);
                    u * y * (1.0 - y)
                }
            })
            .collect(),
        HeadKind::GaussianPolicy => {
            let half = z.len() / 2;
            z.iter()
                .zip(upstream)
                .enumerate()
                .map(|(i, (&v, &u))| {
                    if i >= half && (v <= LOG_STD_RANGE.0 || v >= LOG_STD_RANGE.1) {
                        0.0
                    } else {
                        u
                    }
                })
                .collect()
        }
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment gradient descent state.
///
/// Update rule per step `t` with learning rate `lr` and decays `b1`, `b2`:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`,
/// `p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One descent step in place. Rejects non-finite gradients, naming the
    /// offending layer.
    pub fn step(&mut self, dims: &[usize], params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer sized for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
            let (layer, kind) = param_location(dims, bad);
            return Err(Error::NonFinite(format!(
                "gradient at layer {layer} ({kind}) is {}",
                grad[bad]
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Element-wise convex combination of parameter vectors. Weights must be
/// nonnegative and sum to one within 1e-9.
pub fn weighted_average(params: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if params.is_empty() {
        return Err(Error::Dimension("weighted_average of zero vectors".into()));
    }
    if params.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} parameter vectors but {} weights",
            params.len(),
            weights.len()
        )));
    }
    let len = params[0].len();
    for (i, p) in params.iter().enumerate() {
        if p.len() != len {
            return Err(Error::Dimension(format!(
                "parameter vector {i} has length {} (expected {len})",
                p.len()
            )));
        }
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("aggregation weights must be nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("aggregation weights sum to {sum}, expected 1")));
    }
    let mut out = vec![0.0; len];
    for (p, &w) in params.iter().zip(weights) {
        for (o, &x) in out.iter_mut().zip(*p) {
            *o += w * x;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameter files
// ---------------------------------------------------------------------------

const PARAM_MAGIC: &[u8; 8] = b"NTNMLP01";

fn head_tag(head: HeadKind) -> u8 {
    match head {
        HeadKind::Linear => 0,
        HeadKind::Sigmoid => 1,
        HeadKind::GaussianPolicy => 2,
    }
}

fn head_from_tag(tag: u8, path: &Path) -> Result<HeadKind> {
    match tag {
        0 => Ok(HeadKind::Linear),
        1 => Ok(HeadKind::Sigmoid),
        2 => Ok(HeadKind::GaussianPolicy),
        _ => Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unknown head tag {tag}"),
        }),
    }
}

/// Writes a network checkpoint: magic, version, head tag, dimension chain,
/// then the flat little-endian parameter array.
pub fn save_params(path: &Path, net: &Mlp) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(PARAM_MAGIC).map_err(io_err)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[head_tag(net.head)]).map_err(io_err)?;
    w.write_all(&(net.dims.len() as u32).to_le_bytes()).map_err(io_err)?;
    for d in &net.dims {
        w.write_all(&(*d as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(net.params.len() as u64).to_le_bytes()).map_err(io_err)?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a checkpoint written by [`save_params`].
pub fn load_params(path: &Path) -> Result<Mlp> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != PARAM_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(io_err)?;
    if version != 1 {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    let head = head_from_tag(tag[0], path)?;
    let n_dims = read_u32(&mut r).map_err(io_err)? as usize;
    if n_dims < 2 || n_dims > 64 {
        return Err(bad(format!("implausible dimension count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(read_u32(&mut r).map_err(io_err)? as usize);
    }
    let n_params = read_u64(&mut r).map_err(io_err)? as usize;
    if n_params != param_count(&dims) {
        return Err(bad(format!(
            "parameter count {n_params} does not match dims {dims:?}"
        )));
    }
    let mut params = Vec::with_capacity(n_params);
    let mut buf = [0u8; 8];
    for _ in 0..n_params {
        r.read_exact(&mut buf).map_err(io_err)?;
        params.push(f64::from_le_bytes(buf));
    }
    Ok(Mlp { dims, head, params })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Diagonal gaussian head semantics
// ---------------------------------------------------------------------------

/// Mean / log-std split of a gaussian-policy head output.
#[derive(Debug, Clone)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    /// Splits a gaussian-policy head output in half.
    pub fn from_head_output(out: &[f64]) -> Self {
        let half = out.len() / 2;
        DiagGaussian { mean: out[..half].to_vec(), log_std: out[half..].to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws a sample `z = mean + std * eps`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * standard_normal(rng))
            .collect()
    }

    /// Log density of a sample `z`.
    pub fn log_prob(&self, z: &[f64]) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(z)
            .map(|((&m, &ls), &zi)| {
                let inv_std = (-ls).exp();
                let d = (zi - m) * inv_std;
                -0.5 * d * d - ls - HALF_LN_2PI
            })
            .sum()
    }

    /// Differential entropy of the (pre-squash) gaussian.
    pub fn entropy(&self) -> f64 {
        const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7;
        self.log_std.iter().map(|&ls| ls + HALF_LN_2PI_E).sum()
    }

    /// Gradient of `log_prob(z)` with respect to `(mean, log_std)`,
    /// concatenated in head-output order.
    pub fn log_prob_grad(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut grad = vec![0.0; 2 * d];
        for i in 0..d {
            let inv_var = (-2.0 * self.log_std[i]).exp();
            let diff = z[i] - self.mean[i];
            grad[i] = diff * inv_var;
            grad[d + i] = diff * diff * inv_var - 1.0;
        }
        grad
    }

    /// Gradient of `entropy()` with respect to `(mean, log_std)`.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let d = self.dim();
        let mut grad = vec![0.0; 2 * d];
        for g in grad.iter_mut().skip(d) {
            *g = 1.0;
        }
        grad
    }
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_network_maps_to_zero() {
        let net = Mlp::zeros(vec![3, 4, 2], HeadKind::Linear).unwrap();
        let out = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = Mlp::zeros(vec![3, 3], HeadKind::Linear).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        let out = net.forward(&[0.3, -1.2, 7.0]).unwrap();
        assert_eq!(out, vec![0.3, -1.2, 7.0]);
    }

    #[test]
    fn hand_computed_2_3_1_forward() {
        // x -> relu(W1 x + b1) -> W2 h + b2
        let mut net = Mlp::zeros(vec![2, 3, 1], HeadKind::Linear).unwrap();
        let p = net.params_mut();
        // W1 rows: [1, 2], [-1, 0.5], [0.25, -0.25]; b1 = [0.1, 0, -0.2]
        p[..6].copy_from_slice(&[1.0, 2.0, -1.0, 0.5, 0.25, -0.25]);
        p[6..9].copy_from_slice(&[0.1, 0.0, -0.2]);
        // W2 = [1, -2, 4]; b2 = [0.5]
        p[9..12].copy_from_slice(&[1.0, -2.0, 4.0]);
        p[12] = 0.5;

        let x = [1.0, -1.0];
        let h = [
            (1.0 * 1.0 + 2.0 * -1.0 + 0.1f64).max(0.0),
            (-1.0 * 1.0 + 0.5 * -1.0 + 0.0f64).max(0.0),
            (0.25 * 1.0 - 0.25 * -1.0 - 0.2f64).max(0.0),
        ];
        let expect = 1.0 * h[0] - 2.0 * h[1] + 4.0 * h[2] + 0.5;
        let out = net.forward(&x).unwrap();
        assert!((out[0] - expect).abs() < 1e-15, "{} vs {expect}", out[0]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let net = Mlp::zeros(vec![3, 2], HeadKind::Linear).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn sigmoid_head_strictly_inside_unit_interval() {
        let mut rng = crate::seeds::rng(3, "nn-sig", 0);
        let mut net = Mlp::new(vec![4, 8, 1], HeadKind::Sigmoid, &mut rng).unwrap();
        // exaggerate weights to push the pre-activation far out
        for p in net.params_mut() {
            *p *= 1e6;
        }
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let y = net.forward(&x).unwrap()[0];
            assert!(y > 0.0 && y < 1.0, "sigmoid out of open interval: {y}");
        }
    }

    #[test]
    fn bias_gradient_of_last_layer_equals_upstream() {
        let mut rng = crate::seeds::rng(3, "nn-bias", 0);
        let net = Mlp::new(vec![2, 3, 2], HeadKind::Linear, &mut rng).unwrap();
        let trace = net.forward_trace(&[0.4, -0.7]).unwrap();
        let grad = net.backward(&trace, &[1.5, -2.5]).unwrap();
        let n = grad.len();
        assert!((grad[n - 2] - 1.5).abs() < 1e-15);
        assert!((grad[n - 1] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = crate::seeds::rng(3, "nn-zero-up", 0);
        let net = Mlp::new(vec![3, 5, 2], HeadKind::Linear, &mut rng).unwrap();
        let trace = net.forward_trace(&[0.1, 0.2, 0.3]).unwrap();
        let grad = net.backward(&trace, &[0.0, 0.0]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    /// Central-difference gradient of `loss(net) = sum(coefs .* output)`.
    fn fd_grad(net: &Mlp, input: &[f64], coefs: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.num_params());
        let mut probe = net.clone();
        for i in 0..net.num_params() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let plus: f64 =
                probe.forward(input).unwrap().iter().zip(coefs).map(|(y, c)| y * c).sum();
            probe.params_mut()[i] = orig - h;
            let minus: f64 =
                probe.forward(input).unwrap().iter().zip(coefs).map(|(y, c)| y * c).sum();
            probe.params_mut()[i] = orig;
            out.push((plus - minus) / (2.0 * h));
        }
        out
    }

    /// A trace is FD-safe when no ReLU pre-activation sits on its kink.
    fn relu_safe(trace: &ForwardTrace, margin: f64) -> bool {
        trace.preacts[..trace.preacts.len() - 1]
            .iter()
            .all(|z| z.iter().all(|v| v.abs() > margin))
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::seeds::rng(5, "nn-fd", 0);
        let mut checked = 0;
        while checked < 100 {
            let hidden = rng.gen_range(2..5usize);
            let net = Mlp::new(vec![2, hidden, 1], HeadKind::Linear, &mut rng).unwrap();
            let input: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let trace = net.forward_trace(&input).unwrap();
            if !relu_safe(&trace, 1e-4) {
                continue; // resample away from ReLU kinks
            }
            let grad = net.backward(&trace, &[1.0]).unwrap();
            let fd = fd_grad(&net, &input, &[1.0], 1e-6);
            for (a, n) in grad.iter().zip(&fd) {
                let denom = a.abs().max(n.abs()).max(1e-8);
                assert!(
                    (a - n).abs() / denom < 1e-5,
                    "analytic {a} vs numeric {n}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut opt = Adam::new(0.1, 3);
        let mut params = vec![1.0, -2.0, 3.0];
        opt.step(&[3, 1], &mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_single_param_matches_hand_arithmetic() {
        let mut opt = Adam::new(0.01, 1);
        let mut params = vec![2.0];
        let g = 0.5;
        opt.step(&[1, 1], &mut params, &[g]).unwrap();
        // t=1: m=(1-0.9)*g, v=(1-0.999)*g^2, bias-corrected back to g and g^2
        let m_hat = g;
        let v_hat = g * g;
        let expect = 2.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((params[0] - expect).abs() < 1e-15, "{} vs {expect}", params[0]);
    }

    #[test]
    fn adam_step_magnitude_nonincreasing_under_equal_grads() {
        let mut opt = Adam::new(0.01, 1);
        let mut params = vec![0.0];
        let before = params[0];
        opt.step(&[1, 1], &mut params, &[1.0]).unwrap();
        let step1 = (params[0] - before).abs();
        let mid = params[0];
        opt.step(&[1, 1], &mut params, &[1.0]).unwrap();
        let step2 = (params[0] - mid).abs();
        assert!(step2 <= step1 + 1e-15, "step grew: {step1} -> {step2}");
    }

    #[test]
    fn adam_rejects_non_finite_gradient_naming_layer() {
        let mut opt = Adam::new(0.01, param_count(&[2, 3, 1]));
        let mut params = vec![0.0; param_count(&[2, 3, 1])];
        let mut grad = vec![0.0; params.len()];
        grad[8] = f64::NAN; // inside layer 0 biases
        let err = opt.step(&[2, 3, 1], &mut params, &grad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "message was: {msg}");
    }

    #[test]
    fn weighted_average_basics() {
        let a = vec![1.0, 3.0];
        let b = vec![3.0, 5.0];
        let mid = weighted_average(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(mid, vec![2.0, 4.0]);
        let first = weighted_average(&[&a, &b], &[1.0, 0.0]).unwrap();
        assert_eq!(first, a);
        let same = weighted_average(&[&a, &a, &a], &[0.2, 0.3, 0.5]).unwrap();
        for (x, y) in same.iter().zip(&a) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_average_validates_inputs() {
        let a = vec![1.0, 2.0];
        let b = vec![1.0];
        assert!(weighted_average(&[&a, &b], &[0.5, 0.5]).is_err());
        assert!(weighted_average(&[&a, &a], &[0.7, 0.7]).is_err());
        assert!(weighted_average(&[&a, &a], &[1.5, -0.5]).is_err());
    }

    #[test]
    fn weighted_average_permutation_equivariant() {
        let mut rng = crate::seeds::rng(5, "nn-avg-perm", 0);
        for _ in 0..20 {
            let vs: Vec<Vec<f64>> =
                (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let mut ws = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 0.0];
            let partial: f64 = ws.iter().sum();
            ws[2] = 1.0 - partial.min(1.0);
            let total: f64 = ws.iter().sum();
            for w in ws.iter_mut() {
                *w /= total;
            }
            let fwd =
                weighted_average(&[&vs[0], &vs[1], &vs[2]], &ws).unwrap();
            let rev =
                weighted_average(&[&vs[2], &vs[0], &vs[1]], &[ws[2], ws[0], ws[1]]).unwrap();
            for (a, b) in fwd.iter().zip(&rev) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flatten_roundtrip_through_set_params() {
        let mut rng = crate::seeds::rng(5, "nn-rt", 0);
        let net = Mlp::new(vec![3, 7, 2], HeadKind::Sigmoid, &mut rng).unwrap();
        let flat = net.params().to_vec();
        let mut other = Mlp::zeros(vec![3, 7, 2], HeadKind::Sigmoid).unwrap();
        other.set_params(&flat).unwrap();
        assert_eq!(net, other);
    }

    #[test]
    fn param_file_roundtrip() {
        let mut rng = crate::seeds::rng(5, "nn-file", 0);
        let net = Mlp::new(vec![4, 8, 6], HeadKind::GaussianPolicy, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("ntnlab-nn-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.bin");
        save_params(&path, &net).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(net, loaded);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn gaussian_log_prob_and_grads_match_finite_differences() {
        let mut rng = crate::seeds::rng(7, "nn-gauss", 0);
        for _ in 0..20 {
            let d = 3;
            let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let log_std: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..0.5)).collect();
            let g = DiagGaussian { mean: mean.clone(), log_std: log_std.clone() };
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let grad = g.log_prob_grad(&z);
            let h = 1e-6;
            for i in 0..d {
                let mut gp = g.clone();
                gp.mean[i] += h;
                let mut gm = g.clone();
                gm.mean[i] -= h;
                let fd = (gp.log_prob(&z) - gm.log_prob(&z)) / (2.0 * h);
                assert!((grad[i] - fd).abs() < 1e-5, "mean grad {} vs {fd}", grad[i]);

                let mut gp = g.clone();
                gp.log_std[i] += h;
                let mut gm = g.clone();
                gm.log_std[i] -= h;
                let fd = (gp.log_prob(&z) - gm.log_prob(&z)) / (2.0 * h);
                assert!((grad[d + i] - fd).abs() < 1e-5, "log-std grad {} vs {fd}", grad[d + i]);
            }
        }
    }

    #[test]
    fn gaussian_entropy_increases_with_log_std() {
        let g1 = DiagGaussian { mean: vec![0.0], log_std: vec![0.0] };
        let g2 = DiagGaussian { mean: vec![0.0], log_std: vec![1.0] };
        assert!(g2.entropy() > g1.entropy());
        assert_eq!(g1.entropy_grad(), vec![0.0, 1.0]);
    }
}
