//! Dense ReLU multilayer perceptron with an output clamp to joint limits,
//! exact reverse-mode gradients of the mean squared error, and Adam.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a network. `f32` is used for training
/// throughput, `f64` for gradient checks.
pub trait Real: Float + Debug + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows > 0 && cols > 0 {
        let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every operand's extent was bounds-checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Flushes subnormal floats to zero on this thread until dropped, then
/// restores the previous floating-point mode. Adam's second moments of
/// inactive units decay through the subnormal range over thousands of
/// steps, and subnormal arithmetic is several times slower on x86.
pub(crate) struct FlushSubnormals {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    saved: u32,
}

#[cfg(target_arch = "x86")]
use std::arch::x86 as simd;
#[cfg(target_arch = "x86_64")]
use std::arch::x86_64 as simd;

impl FlushSubnormals {
    /// Flush-to-zero and denormals-are-zero bits of MXCSR.
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    const FTZ_DAZ: u32 = 0x8040;

    #[allow(deprecated)]
    pub(crate) fn enable() -> Self {
        #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
        {
            // SAFETY: SSE is baseline on these targets; only mode bits change.
            let saved = unsafe { simd::_mm_getcsr() };
            unsafe { simd::_mm_setcsr(saved | Self::FTZ_DAZ) };
            Self { saved }
        }
        #[cfg(not(any(target_arch = "x86", target_arch = "x86_64")))]
        Self {}
    }
}

impl Drop for FlushSubnormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
        // SAFETY: restores the value read in `enable`.
        unsafe {
            simd::_mm_setcsr(self.saved)
        };
    }
}

/// Network parameters. Layer `l` maps `layer_dims[l]` inputs to
/// `layer_dims[l+1]` outputs with a row-major `out x in` weight matrix.
/// Hidden layers use ReLU; the output layer is affine followed by a clamp
/// to `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    hand_tag: String,
}

/// Gradients (or Adam moments) shaped like an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    /// Every gradient entry, weights before biases, layer by layer.
    pub fn flatten(&self) -> Vec<T> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

impl<T: Real> Mlp<T> {
    /// All-zero parameters.
    pub fn zeros(layer_dims: &[usize], lower: Vec<f64>, upper: Vec<f64>, hand_tag: impl Into<String>) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer dims {layer_dims:?}")));
        }
        let out = *layer_dims.last().unwrap();
        if lower.len() != out || upper.len() != out {
            return Err(Error::Dimension {
                what: "joint limits",
                expected: out,
                got: lower.len().min(upper.len()),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("joint limits need lower <= upper".into()));
        }
        let weights = layer_dims.windows(2).map(|w| vec![T::zero(); w[0] * w[1]]).collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            lower,
            upper,
            hand_tag: hand_tag.into(),
        })
    }

    /// He-uniform hidden weights, LeCun-uniform output weights, zero hidden
    /// biases and output biases at the joint mid-range.
    pub fn init<R: Rng>(
        layer_dims: &[usize],
        lower: Vec<f64>,
        upper: Vec<f64>,
        hand_tag: impl Into<String>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, lower, upper, hand_tag)?;
        let layers = net.num_layers();
        for l in 0..layers {
            let fan_in = net.layer_dims[l] as f64;
            let bound = if l + 1 < layers { (6.0 / fan_in).sqrt() } else { (3.0 / fan_in).sqrt() };
            for w in net.weights[l].iter_mut() {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        let mid: Vec<T> = net
            .lower
            .iter()
            .zip(&net.upper)
            .map(|(l, u)| T::lit(0.5 * (l + u)))
            .collect();
        net.biases[layers - 1] = mid;
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn hand_tag(&self) -> &str {
        &self.hand_tag
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[T] {
        &self.biases[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [T], &mut [T]) {
        (&mut self.weights[layer], &mut self.biases[layer])
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Converts parameters to another element type.
    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64_lossless())).collect();
        Mlp {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.iter().map(conv).collect(),
            biases: self.biases.iter().map(conv).collect(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            hand_tag: self.hand_tag.clone(),
        }
    }

    fn batch_size(&self, batch: &[T]) -> Result<usize> {
        let d = self.input_dim();
        if !batch.len().is_multiple_of(d) {
            return Err(Error::Dimension {
                what: "network input row",
                expected: d,
                got: batch.len() % d,
            });
        }
        Ok(batch.len() / d)
    }

    /// Affine map of layer `l`: `out = input W^T + b`, row-major batches.
    fn affine(&self, l: usize, input: &[T], rows: usize) -> Vec<T> {
        let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(&self.biases[l]);
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            input,
            (din as isize, 1),
            &self.weights[l],
            (1, din as isize),
            T::one(),
            &mut out,
            (dout as isize, 1),
        );
        out
    }

    /// Post-activation outputs of every hidden layer plus the raw output
    /// layer (before clamping).
    fn forward_cache(&self, batch: &[T], rows: usize) -> Vec<Vec<T>> {
        let layers = self.num_layers();
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let input = if l == 0 { batch } else { &acts[l - 1] };
            let mut z = self.affine(l, input, rows);
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            acts.push(z);
        }
        acts
    }

    fn clamp_row(&self, row: &mut [T]) {
        for ((v, lo), hi) in row.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(T::lit(*lo)).min(T::lit(*hi));
        }
    }

    /// Output before the joint-limit clamp, `rows x m`.
    pub fn forward_raw(&self, batch: &[T]) -> Result<Vec<T>> {
        let rows = self.batch_size(batch)?;
        Ok(self.forward_cache(batch, rows).pop().unwrap())
    }

    /// Clamped network output, `rows x m`.
    pub fn forward(&self, batch: &[T]) -> Result<Vec<T>> {
        let mut out = self.forward_raw(batch)?;
        for row in out.chunks_mut(self.output_dim()) {
            self.clamp_row(row);
        }
        Ok(out)
    }

    /// Mean squared error over all `rows x m` outputs of the clamped network
    /// and its exact gradient. The clamp passes gradients where the raw
    /// output lies inside `[lower, upper]` and blocks them outside.
    pub fn backward(&self, batch: &[T], labels: &[T]) -> Result<(T, Gradients<T>)> {
        let rows = self.batch_size(batch)?;
        let m = self.output_dim();
        if labels.len() != rows * m {
            return Err(Error::Dimension {
                what: "label batch",
                expected: rows * m,
                got: labels.len(),
            });
        }
        if rows == 0 {
            return Err(Error::Empty("batch"));
        }
        let layers = self.num_layers();
        let acts = self.forward_cache(batch, rows);
        let scale = T::lit(2.0 / (rows * m) as f64);
        let mut loss = T::zero();
        let mut delta = vec![T::zero(); rows * m];
        for (i, (&z, &y)) in acts[layers - 1].iter().zip(labels).enumerate() {
            let (lo, hi) = (T::lit(self.lower[i % m]), T::lit(self.upper[i % m]));
            let out = z.max(lo).min(hi);
            let err = out - y;
            loss = loss + err * err;
            if z >= lo && z <= hi {
                delta[i] = scale * err;
            }
        }
        loss = loss / T::lit((rows * m) as f64);

        let mut grads = Gradients::zeros_like(self);
        for l in (0..layers).rev() {
            let (din, dout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let input: &[T] = if l == 0 { batch } else { &acts[l - 1] };
            // dW = delta^T input
            T::gemm(
                dout,
                rows,
                din,
                T::one(),
                &delta,
                (1, dout as isize),
                input,
                (din as isize, 1),
                T::zero(),
                &mut grads.weights[l],
                (din as isize, 1),
            );
            for row in delta.chunks(dout) {
                for (g, d) in grads.biases[l].iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
            if l > 0 {
                // d input = delta W, masked by the ReLU derivative.
                let mut next = vec![T::zero(); rows * din];
                T::gemm(
                    rows,
                    dout,
                    din,
                    T::one(),
                    &delta,
                    (dout as isize, 1),
                    &self.weights[l],
                    (din as isize, 1),
                    T::zero(),
                    &mut next,
                    (din as isize, 1),
                );
                for (d, a) in next.iter_mut().zip(&acts[l - 1]) {
                    if *a <= T::zero() {
                        *d = T::zero();
                    }
                }
                delta = next;
            }
        }
        Ok((loss, grads))
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Mlp<T>, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let lr_t = T::lit(
            self.learning_rate * (1.0 - self.beta2.powi(self.step)).sqrt() / (1.0 - self.beta1.powi(self.step)),
        );
        let eps_hat = T::lit(self.epsilon * (1.0 - self.beta2.powi(self.step)).sqrt());
        let params = net.weights.iter_mut().chain(net.biases.iter_mut());
        let g = grads.weights.iter().chain(&grads.biases);
        let m = self.m.weights.iter_mut().chain(self.m.biases.iter_mut());
        let v = self.v.weights.iter_mut().chain(self.v.biases.iter_mut());
        for (((p, g), m), v) in params.zip(g).zip(m).zip(v) {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * *g;
                *v = b2 * *v + one_b2 * *g * *g;
                *p = *p - lr_t * *m / (v.sqrt() + eps_hat);
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    layer_dims: Vec<usize>,
    layers: Vec<LayerRecord>,
    hand_tag: String,
    joint_limits: Vec<[f64; 2]>,
}

pub const WEIGHTS_MAGIC: &[u8; 8] = b"XDEXMLP1";

impl<T: Real> Mlp<T> {
    pub fn to_json(&self) -> String {
        let file = WeightsFile {
            layer_dims: self.layer_dims.clone(),
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| LayerRecord {
                    weight: w.iter().map(|x| x.to_f64_lossless()).collect(),
                    bias: b.iter().map(|x| x.to_f64_lossless()).collect(),
                })
                .collect(),
            hand_tag: self.hand_tag.clone(),
            joint_limits: self.lower.iter().zip(&self.upper).map(|(l, u)| [*l, *u]).collect(),
        };
        serde_json::to_string(&file).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightsFile = serde_json::from_str(text)?;
        let (lower, upper) = file.joint_limits.iter().map(|[l, u]| (*l, *u)).unzip();
        let mut net = Self::zeros(&file.layer_dims, lower, upper, file.hand_tag)?;
        if file.layers.len() != net.num_layers() {
            return Err(Error::Dimension {
                what: "weights layers",
                expected: net.num_layers(),
                got: file.layers.len(),
            });
        }
        for (l, rec) in file.layers.into_iter().enumerate() {
            if rec.weight.len() != net.weights[l].len() || rec.bias.len() != net.biases[l].len() {
                return Err(Error::Format(format!("layer {l} parameter count does not match layer_dims")));
            }
            net.weights[l] = rec.weight.into_iter().map(T::lit).collect();
            net.biases[l] = rec.bias.into_iter().map(T::lit).collect();
        }
        if !net.all_finite() {
            return Err(Error::NonFinite("network weights"));
        }
        Ok(net)
    }

    /// Binary weights: magic, u32 dim count, u32 dims, per layer f32 weights
    /// then biases, f64 limit pairs, u32 tag length and UTF-8 tag; all
    /// little-endian.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter().chain(b) {
                out.extend_from_slice(&(v.to_f64_lossless() as f32).to_le_bytes());
            }
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            out.extend_from_slice(&l.to_le_bytes());
            out.extend_from_slice(&u.to_le_bytes());
        }
        out.extend_from_slice(&(self.hand_tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.hand_tag.as_bytes());
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut cur = crate::formats::Reader::new(bytes);
        if cur.take(8)? != WEIGHTS_MAGIC {
            return Err(Error::BadMagic { expected: "XDEXMLP1" });
        }
        let count = cur.u32()? as usize;
        if count > 64 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let dims: Vec<usize> = (0..count).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if dims.len() < 2 {
            return Err(Error::Format("weights need at least two layer dims".into()));
        }
        let m = *dims.last().unwrap();
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let weight: Vec<f32> = (0..w[0] * w[1]).map(|_| cur.f32()).collect::<Result<_>>()?;
            let bias: Vec<f32> = (0..w[1]).map(|_| cur.f32()).collect::<Result<_>>()?;
            layers.push((weight, bias));
        }
        let mut lower = Vec::with_capacity(m);
        let mut upper = Vec::with_capacity(m);
        for _ in 0..m {
            lower.push(cur.f64()?);
            upper.push(cur.f64()?);
        }
        let tag_len = cur.u32()? as usize;
        let tag = String::from_utf8(cur.take(tag_len)?.to_vec())
            .map_err(|e| Error::Format(format!("hand tag is not UTF-8: {e}")))?;
        let mut net = Self::zeros(&dims, lower, upper, tag)?;
        for (l, (w, b)) in layers.into_iter().enumerate() {
            net.weights[l] = w.into_iter().map(|v| T::lit(v as f64)).collect();
            net.biases[l] = b.into_iter().map(|v| T::lit(v as f64)).collect();
        }
        Ok(net)
    }
}
