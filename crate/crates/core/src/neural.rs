//! Fixed-architecture MLPs with hand-derived reverse-mode gradients.
//!
//! Every network is `input -> 128 -> 128 -> output` with a hidden activation
//! (`tanh` or `softplus`) and a linear output layer. Parameters are stored
//! flat, layer by layer: `W1 (h1×in, row-major), b1, W2, b2, W3, b3`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN: usize = 128;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Softplus,
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: [usize; 2],
    pub output: usize,
    pub activation: Activation,
}

impl MlpShape {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            hidden: [HIDDEN, HIDDEN],
            output,
            activation,
        }
    }

    fn layer_dims(&self) -> [(usize, usize); 3] {
        [
            (self.hidden[0], self.input),
            (self.hidden[1], self.hidden[0]),
            (self.output, self.hidden[1]),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Offsets of (weights, bias) for each layer.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut off = 0;
        let mut out = [(0, 0); 3];
        for (k, (o, i)) in self.layer_dims().into_iter().enumerate() {
            out[k] = (off, off + o * i);
            off += o * i + o;
        }
        out
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: [Array2<f64>; 2],
    hidden: [Array2<f64>; 2],
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub shape: MlpShape,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(shape: MlpShape) -> Self {
        Self {
            params: vec![0.0; shape.num_params()],
            shape,
        }
    }

    /// Orthogonal initialisation: hidden layers with gain `sqrt(2)`, output
    /// layer with `output_gain`, zero biases.
    pub fn orthogonal(shape: MlpShape, output_gain: f64, rng: &mut impl Rng) -> Self {
        let mut mlp = Self::zeros(shape);
        let gains = [2f64.sqrt(), 2f64.sqrt(), output_gain];
        for (k, ((rows, cols), (w_off, _))) in shape.layer_dims().into_iter().zip(shape.offsets()).enumerate() {
            let w = orthogonal_matrix(rows, cols, rng);
            for (dst, src) in mlp.params[w_off..w_off + rows * cols].iter_mut().zip(w.iter()) {
                *dst = gains[k] * src;
            }
        }
        mlp
    }

    fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (rows, cols) = self.shape.layer_dims()[layer];
        let (w, _) = self.shape.offsets()[layer];
        ArrayView2::from_shape((rows, cols), &self.params[w..w + rows * cols]).expect("layout")
    }

    fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (rows, _) = self.shape.layer_dims()[layer];
        let (_, b) = self.shape.offsets()[layer];
        ArrayView1::from(&self.params[b..b + rows])
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let (rows, _) = self.shape.layer_dims()[2];
        let (_, b) = self.shape.offsets()[2];
        &mut self.params[b..b + rows]
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.shape.input {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.shape.input,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let z1 = x.dot(&self.weights(0).t()) + self.bias(0);
        let h1 = self.activate(&z1);
        let z2 = h1.dot(&self.weights(1).t()) + self.bias(1);
        let h2 = self.activate(&z2);
        let output = h2.dot(&self.weights(2).t()) + self.bias(2);
        Ok(ForwardCache {
            input: x.to_owned(),
            pre: [z1, z2],
            hidden: [h1, h2],
            output,
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row");
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.shape.activation {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Softplus => z.mapv(softplus),
        }
    }

    fn activation_grad(&self, pre: &Array2<f64>, post: &Array2<f64>, upstream: Array2<f64>) -> Array2<f64> {
        match self.shape.activation {
            Activation::Tanh => upstream * post.mapv(|h| 1.0 - h * h),
            Activation::Softplus => upstream * pre.mapv(sigmoid),
        }
    }

    /// Accumulate `∂loss/∂params` into `grad` given `dy = ∂loss/∂output`.
    pub fn backward(&self, cache: &ForwardCache, dy: ArrayView2<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let offsets = self.shape.offsets();
        let mut upstream = dy.to_owned();
        for layer in (0..3).rev() {
            let input = if layer == 0 {
                cache.input.view()
            } else {
                cache.hidden[layer - 1].view()
            };
            let dw = upstream.t().dot(&input);
            let db = upstream.sum_axis(Axis(0));
            let (w_off, b_off) = offsets[layer];
            for (g, d) in grad[w_off..w_off + dw.len()].iter_mut().zip(dw.iter()) {
                *g += d;
            }
            for (g, d) in grad[b_off..b_off + db.len()].iter_mut().zip(db.iter()) {
                *g += d;
            }
            if layer > 0 {
                let dh = upstream.dot(&self.weights(layer));
                upstream = self.activation_grad(&cache.pre[layer - 1], &cache.hidden[layer - 1], dh);
            }
        }
    }
}

fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    // Orthonormalise the shorter dimension with modified Gram-Schmidt.
    let (n, m) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Array1<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Array1<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &vecs {
            let proj = v.dot(u);
            v.scaled_add(-proj, u);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            vecs.push(v / norm);
        }
    }
    let mut out = Array2::zeros((rows, cols));
    for (k, v) in vecs.iter().enumerate() {
        if rows >= cols {
            out.column_mut(k).assign(v);
        } else {
            out.row_mut(k).assign(v);
        }
    }
    out
}

/// Flat parameter access used by the optimizer and checkpoints.
pub trait Parameters {
    fn num_params(&self) -> usize;
    fn flat(&self) -> Vec<f64>;
    fn load_flat(&mut self, values: &[f64]) -> Result<()>;
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// Diagonal Gaussian policy with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mlp: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, action_dim: usize, init_log_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::orthogonal(MlpShape::new(obs_dim, action_dim, Activation::Tanh), 0.01, rng),
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); action_dim],
        }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// Mean and clamped log standard deviation for one observation.
    pub fn forward_policy(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.mlp.forward_one(obs)?, self.clamped_log_std()))
    }

    pub fn clamp_log_std(&mut self) {
        for l in &mut self.log_std {
            *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

impl Parameters for GaussianPolicy {
    fn num_params(&self) -> usize {
        self.mlp.params.len() + self.log_std.len()
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.mlp.params.clone();
        v.extend_from_slice(&self.log_std);
        v
    }

    fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        check_len("policy parameters", self.num_params(), values.len())?;
        let n = self.mlp.params.len();
        self.mlp.params.copy_from_slice(&values[..n]);
        self.log_std.copy_from_slice(&values[n..]);
        Ok(())
    }
}

/// Per-sample log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), l)| {
            let z = (a - m) * (-l).exp();
            -0.5 * z * z - l - HALF_LOG_2PI
        })
        .sum()
}

/// Draw `mean + exp(log_std) ⊙ ε` and return it with its log-density.
pub fn sample_and_logprob(mean: &[f64], log_std: &[f64], rng: &mut impl Rng) -> (Vec<f64>, f64) {
    let action: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_log_prob(&action, mean, log_std);
    (action, lp)
}

/// Scalar-head network: the PPO value baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub mlp: Mlp,
}

impl ValueNet {
    pub fn new(obs_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::orthogonal(MlpShape::new(obs_dim, 1, Activation::Tanh), 1.0, rng),
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.mlp.forward_one(obs)?[0])
    }
}

/// Non-negative Lyapunov critic `L(o) = softplus(mlp(o))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovNet {
    pub mlp: Mlp,
}

impl LyapunovNet {
    pub fn new(obs_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::orthogonal(MlpShape::new(obs_dim, 1, Activation::Softplus), 1.0, rng),
        }
    }

    pub fn forward_lyapunov(&self, obs: &[f64]) -> Result<f64> {
        Ok(softplus(self.mlp.forward_one(obs)?[0]))
    }

    /// Batched outputs together with the cache needed for backpropagation.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = self.mlp.forward_cached(x)?;
        let out = cache.output.column(0).iter().map(|&z| softplus(z)).collect();
        Ok((out, cache))
    }

    /// Backpropagate `dL` (gradient w.r.t. the non-negative outputs).
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let dy = Array2::from_shape_fn((d_out.len(), 1), |(i, _)| d_out[i] * sigmoid(cache.output[[i, 0]]));
        self.mlp.backward(cache, dy.view(), grad);
    }
}

macro_rules! mlp_parameters {
    ($t:ty, $what:literal) => {
        impl Parameters for $t {
            fn num_params(&self) -> usize {
                self.mlp.params.len()
            }
            fn flat(&self) -> Vec<f64> {
                self.mlp.params.clone()
            }
            fn load_flat(&mut self, values: &[f64]) -> Result<()> {
                check_len($what, self.mlp.params.len(), values.len())?;
                self.mlp.params.copy_from_slice(values);
                Ok(())
            }
        }
    };
}

mlp_parameters!(ValueNet, "value parameters");
mlp_parameters!(LyapunovNet, "Lyapunov parameters");

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// Bias-corrected Adam step applied in place.
pub fn optimizer_update(params: &mut [f64], grads: &[f64], state: &mut OptimState) -> Result<()> {
    check_len("optimizer gradient", params.len(), grads.len())?;
    check_len("optimizer state", params.len(), state.m.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Rescale `grads` to at most `max_norm` in L2; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

// ---------------------------------------------------------------------------
// Checkpoint container.
//
// Binary layout, all integers and floats little-endian:
//
//   magic     8 bytes  "AVMCCKPT"
//   version   u32      (currently 1)
//   meta_len  u32      length of the UTF-8 metadata block
//   meta      bytes    free-form text (the harness stores the resolved config)
//   count     u32      number of sections
//   sections  count ×  { name_len u32, name bytes, len u64, len × f64 }

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVMCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: String,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.sections.push((name.to_string(), values));
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, values) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, sections })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_output_bias() {
        let mut p = GaussianPolicy::new(30, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        p.mlp.params.iter_mut().for_each(|v| *v = 0.0);
        let bias: Vec<f64> = (0..8).map(|k| k as f64 * 0.1 - 0.3).collect();
        p.mlp.output_bias_mut().copy_from_slice(&bias);
        let (mean, _) = p.forward_policy(&[0.5; 30]).unwrap();
        assert_eq!(mean, bias);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = GaussianPolicy::new(30, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let x: Vec<f64> = (0..30).map(|k| (k as f64).sin()).collect();
        assert_eq!(p.forward_policy(&x).unwrap(), p.forward_policy(&x).unwrap());
        assert!(p.forward_policy(&x[..29]).is_err());
    }

    #[test]
    fn log_prob_at_mean() {
        let mean = [0.3; 8];
        let ls = [-0.5, 0.0, 0.1, -1.0, 0.2, 0.3, -0.2, 0.0];
        let lp = gaussian_log_prob(&mean, &mean, &ls);
        let expected = -ls.iter().sum::<f64>() - 4.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_samples_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.9, -0.9];
        let (a, _) = sample_and_logprob(&mean, &[LOG_STD_MIN; 8], &mut rng);
        for (x, m) in a.iter().zip(mean) {
            assert!((x - m).abs() < 0.05);
        }
    }

    #[test]
    fn log_std_is_clamped() {
        let mut p = GaussianPolicy::new(30, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(3));
        p.log_std = vec![-9.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let ls = p.clamped_log_std();
        assert_eq!((ls[0], ls[1]), (LOG_STD_MIN, LOG_STD_MAX));
    }

    #[test]
    fn adam_zero_gradient_and_descent() {
        let mut x = vec![1.0, -2.0];
        let mut st = OptimState::new(2, 3e-4);
        optimizer_update(&mut x, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);

        let mut x = vec![1.0];
        let mut st = OptimState::new(1, 3e-4);
        let g = [2.0 * x[0]];
        optimizer_update(&mut x, &g, &mut st).unwrap();
        assert!(x[0] * x[0] < 1.0);
        assert!(optimizer_update(&mut x, &[1.0, 2.0], &mut st).is_err());
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let w = orthogonal_matrix(128, 30, &mut ChaCha8Rng::seed_from_u64(4));
        let g = w.t().dot(&w);
        for i in 0..30 {
            for j in 0..30 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let mut c = Checkpoint::default();
        c.meta = "x".into();
        c.push("a", vec![1.0, f64::MIN_POSITIVE, -0.0]);
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(c.section("b").is_err());
    }
}
