//! Fully-connected networks with manual backpropagation, and Adam.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix
//! (`out × in`, row-major) followed by the bias. Batches are row-major
//! `batch × features`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use matrixmultiply::dgemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: [u8; 4] = *b"TTWN";
/// Half-width of the uniform initialization of a tanh head's last layer.
pub const ACTOR_HEAD_INIT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Tanh,
}

impl Head {
    fn code(self) -> u8 {
        match self {
            Head::Linear => 0,
            Head::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Head::Linear),
            1 => Ok(Head::Tanh),
            other => Err(Error::Format(format!("unknown head code {other}"))),
        }
    }
}

/// `Σ (n_in·n_out + n_out)` over consecutive layer sizes.
pub fn count_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone)]
struct Cache {
    batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the post-activation output of layer `l`.
    acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    head: Head,
    params: Vec<f64>,
    grads: Vec<f64>,
    cache: Option<Cache>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes && self.head == other.head && self.params == other.params
    }
}

/// `c ← a·bᵀ + beta·c` with `a: m×k`, `b: n×k`, `c: m×n`, all row-major.
fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c ← aᵀ·b + beta·c` with `a: k×m`, `b: k×n`, `c: m×n`, all row-major.
fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c ← a·b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], head: Head) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let n = count_params(sizes);
        Mlp {
            sizes: sizes.to_vec(),
            head,
            params: vec![0.0; n],
            grads: vec![0.0; n],
            cache: None,
        }
    }

    /// Weights and biases `U(±1/√fan_in)`; a tanh head's last layer uses
    /// `U(±ACTOR_HEAD_INIT)` so the initial output is close to zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, head);
        let layers = net.layers();
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = if l + 1 == layers && head == Head::Tanh {
                ACTOR_HEAD_INIT
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            for p in &mut net.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn from_params(sizes: &[usize], head: Head, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes, head);
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Parameters and gradients borrowed together for an optimizer step.
    pub fn params_and_grads(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.params, &self.grads)
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.head == other.head
    }

    /// `θ ← (1 − rate)·θ + rate·θ_src`.
    pub fn soft_update_from(&mut self, src: &Mlp, rate: f64) {
        assert!(self.same_shape(src), "soft update between different shapes");
        for (t, s) in self.params.iter_mut().zip(&src.params) {
            *t += rate * (s - *t);
        }
    }

    pub fn copy_from(&mut self, src: &Mlp) {
        assert!(self.same_shape(src), "copy between different shapes");
        self.params.copy_from_slice(&src.params);
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        let expected = batch * self.input_dim();
        if x.len() != expected || batch == 0 {
            return Err(Error::DimensionMismatch {
                expected,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &[f64], batch: usize, mut keep: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let layers = self.layers();
        let mut offset = 0;
        let mut current = x.to_vec();
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut out = vec![0.0; batch * n_out];
            for row in out.chunks_exact_mut(n_out) {
                row.copy_from_slice(b);
            }
            gemm_abt(batch, n_in, n_out, &current, w, 1.0, &mut out);
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            } else if self.head == Head::Tanh {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            let input = std::mem::replace(&mut current, out);
            if let Some(acts) = keep.as_deref_mut() {
                acts.push(input);
            }
        }
        if let Some(acts) = keep {
            acts.push(current.clone());
        }
        current
    }

    /// Inference on a batch; leaves the training cache untouched.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        Ok(self.run(x, batch, None))
    }

    /// Single-sample inference.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, 1)
    }

    /// Forward pass that keeps the activations for one [`Mlp::backward`].
    pub fn forward_train(&mut self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        let out = self.run(x, batch, Some(&mut acts));
        self.cache = Some(Cache { batch, acts });
        Ok(out)
    }

    /// Backpropagate `grad_out` (∂L/∂output, `batch × out`) through the last
    /// training forward pass. Parameter gradients are accumulated into the
    /// gradient buffer; the input gradient is returned. Consumes the cache.
    pub fn backward(&mut self, grad_out: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let batch = cache.batch;
        let layers = self.layers();
        if grad_out.len() != batch * self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: batch * self.output_dim(),
                got: grad_out.len(),
            });
        }
        let mut delta = grad_out.to_vec();
        if self.head == Head::Tanh {
            for (d, y) in delta.iter_mut().zip(&cache.acts[layers]) {
                *d *= 1.0 - y * y;
            }
        }
        let mut offset = self.params.len();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            let input = &cache.acts[l];
            {
                let (gw, gb) = self.grads[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                gemm_atb(n_out, batch, n_in, &delta, input, 1.0, gw);
                for row in delta.chunks_exact(n_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            let w = &self.params[offset..offset + n_in * n_out];
            let mut prev = vec![0.0; batch * n_in];
            gemm_ab(batch, n_out, n_in, &delta, w, &mut prev);
            if l > 0 {
                for (d, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Write the checkpoint atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&CHECKPOINT_MAGIC)?;
            w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
            for &s in &self.sizes {
                w.write_all(&(s as u32).to_le_bytes())?;
            }
            w.write_all(&[self.head.code()])?;
            w.write_all(&(self.params.len() as u64).to_le_bytes())?;
            for p in &self.params {
                w.write_all(&p.to_le_bytes())?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            let s = u32::from_le_bytes(b4) as usize;
            if s == 0 {
                return Err(Error::Format("zero-width layer".into()));
            }
            sizes.push(s);
        }
        let mut head = [0u8; 1];
        r.read_exact(&mut head)?;
        let head = Head::from_code(head[0])?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        if count != count_params(&sizes) {
            return Err(Error::DimensionMismatch {
                expected: count_params(&sizes),
                got: count,
            });
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            params.push(f64::from_le_bytes(b8));
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Self::from_params(&sizes, head, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        Self::new(net.param_count(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "Adam state shape");
        assert_eq!(grads.len(), self.m.len(), "gradient shape");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr / c1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= step * self.m[i] / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }

    pub fn step_net(&mut self, net: &mut Mlp) {
        let (p, g) = net.params_and_grads();
        self.step(p, g);
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut Adam) {
    state.step(params, grads);
}
