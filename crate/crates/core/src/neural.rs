//! Small differentiable building blocks with hand-written gradients: dense
//! layers, an LSTM cell, label embeddings, softmax cross-entropy, mean squared
//! error, a diagonal Gaussian log-density and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`]. Forward passes read from the store;
//! backward passes write into a separate [`Grads`] buffer so several
//! sequences can be differentiated independently and summed afterwards.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &str = "hilearn-checkpoint v1";

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("class index {index} out of range for {width} logits")]
    IndexOutOfRange { index: usize, width: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), NeuralError> {
    if expected != got {
        return Err(NeuralError::ShapeMismatch {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor, NeuralError> {
        check_len("tensor", shape.iter().product(), values.len())?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFinite("tensor".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named parameters with paired gradients and Adam moment estimates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

/// Gradient buffer shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let len = value.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value.values
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value.values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Adds a gradient buffer into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (p, g) in self.params.iter_mut().zip(grads.data.iter()) {
            for (a, b) in p.grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales stored gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.grad_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        n
    }

    /// One Adam step with bias correction, then zeroes the gradients.
    pub fn adam_update(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for p in &mut self.params {
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                p.m[i] = ADAM_BETA1 * p.m[i] + (1.0 - ADAM_BETA1) * g;
                p.v[i] = ADAM_BETA2 * p.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                p.value.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                p.grad[i] = 0.0;
            }
        }
    }

    /// Writes `manifest.txt` and `params.bin` into `dir`. The manifest lists
    /// `meta` key/value pairs followed by one `tensor` line per parameter
    /// (name, comma-separated shape, offset and count in 64-bit floats).
    /// `params.bin` holds all values as little-endian IEEE-754 doubles.
    pub fn save_checkpoint(&self, dir: &Path, meta: &[(String, String)]) -> Result<(), NeuralError> {
        let io_err = |source| NeuralError::Io {
            path: dir.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(io_err)?;
        let mut manifest = String::new();
        writeln!(manifest, "{CHECKPOINT_MAGIC}").unwrap();
        for (k, v) in meta {
            writeln!(manifest, "meta {k} {v}").unwrap();
        }
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        let mut offset = 0;
        for p in &self.params {
            let shape: Vec<String> = p.value.shape.iter().map(|d| d.to_string()).collect();
            writeln!(
                manifest,
                "tensor {} {} {} {}",
                p.name,
                shape.join(","),
                offset,
                p.value.len()
            )
            .unwrap();
            for v in &p.value.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += p.value.len();
        }
        fs::write(dir.join("manifest.txt"), manifest).map_err(io_err)?;
        let mut f = fs::File::create(dir.join("params.bin")).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, Vec<(String, String)>), NeuralError> {
        let path = dir.display().to_string();
        let io_err = |source| NeuralError::Io {
            path: path.clone(),
            source,
        };
        let bad = |msg: String| NeuralError::Checkpoint {
            path: path.clone(),
            msg,
        };
        let manifest = fs::read_to_string(dir.join("manifest.txt")).map_err(io_err)?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join("params.bin"))
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err)?;
        if bytes.len() % 8 != 0 {
            return Err(bad("params.bin length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut lines = manifest.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing checkpoint header".into()));
        }
        let mut store = ParamStore::new();
        let mut meta = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["meta", k, rest @ ..] => meta.push((k.to_string(), rest.join(" "))),
                ["tensor", name, shape, offset, count] => {
                    let shape: Vec<usize> = shape
                        .split(',')
                        .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
                        .collect::<Result<_, _>>()?;
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
                    let count: usize = count.parse().map_err(|_| bad(format!("bad count for {name}")))?;
                    if offset + count > values.len() {
                        return Err(bad(format!("tensor {name} runs past end of params.bin")));
                    }
                    let t = Tensor::from_vec(&shape, values[offset..offset + count].to_vec())
                        .map_err(|e| bad(format!("tensor {name}: {e}")))?;
                    store.add(name, t);
                }
                _ => return Err(bad(format!("unrecognized manifest line '{line}'"))),
            }
        }
        Ok((store, meta))
    }
}

/// Weight initialization schemes (uniform, fan-in scaled).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    He,
    Xavier,
    Zero,
}

fn init_tensor<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize, init: Init) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let bound = match init {
        Init::He => (6.0 / fan_in as f64).sqrt(),
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Zero => 0.0,
    };
    if bound > 0.0 {
        t.values.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
    }
    t
}

/// Affine layer `y = W x + b`, optionally followed by ReLU.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
    pub relu: bool,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, relu: bool, rng: &mut R) -> Dense {
        let init = if relu { Init::He } else { Init::Xavier };
        Dense::with_init(store, name, input, output, relu, init, rng)
    }

    pub fn with_init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        relu: bool,
        init: Init,
        rng: &mut R,
    ) -> Dense {
        let w = store.add(&format!("{name}.w"), init_tensor(rng, &[output, input], input, output, init));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[output]));
        Dense {
            w,
            b,
            input,
            output,
            relu,
        }
    }

    pub fn from_store(store: &ParamStore, name: &str, relu: bool) -> Option<Dense> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = store.params[w.0].value.shape();
        Some(Dense {
            w,
            b,
            output: shape[0],
            input: shape[1],
            relu,
        })
    }

    /// Returns the post-activation output.
    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        check_len("dense input", self.input, x.len())?;
        let w = store.value(self.w);
        let b = store.value(self.b);
        let mut y = b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.input..(o + 1) * self.input];
            *yo += dot(row, x);
        }
        if self.relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`. `y` is the
    /// forward output (post-activation).
    pub fn backward(&self, store: &ParamStore, x: &[f64], y: &[f64], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let w = store.value(self.w);
        let mut dx = vec![0.0; self.input];
        let mut dz = dy.to_vec();
        if self.relu {
            for (d, v) in dz.iter_mut().zip(y.iter()) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        {
            let gb = grads.get_mut(self.b);
            for (g, d) in gb.iter_mut().zip(dz.iter()) {
                *g += d;
            }
        }
        let gw = grads.get_mut(self.w);
        for (o, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[o * self.input..(o + 1) * self.input];
            let grow = &mut gw[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }

    /// Sets weights and bias of the layer to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).iter_mut().for_each(|v| *v = 0.0);
        store.value_mut(self.b).iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Lookup table of learned vectors, one row per id.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub width: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, width: usize, rng: &mut R) -> Embedding {
        let mut t = Tensor::zeros(&[count, width]);
        t.values.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        let table = store.add(&format!("{name}.table"), t);
        Embedding { table, count, width }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Option<Embedding> {
        let table = store.id(&format!("{name}.table"))?;
        let shape = store.params[table.0].value.shape();
        Some(Embedding {
            table,
            count: shape[0],
            width: shape[1],
        })
    }

    pub fn forward<'a>(&self, store: &'a ParamStore, id: usize) -> Result<&'a [f64], NeuralError> {
        if id >= self.count {
            return Err(NeuralError::IndexOutOfRange {
                index: id,
                width: self.count,
            });
        }
        Ok(&store.value(self.table)[id * self.width..(id + 1) * self.width])
    }

    pub fn backward(&self, id: usize, dy: &[f64], grads: &mut Grads) {
        let g = grads.get_mut(self.table);
        for (a, b) in g[id * self.width..(id + 1) * self.width].iter_mut().zip(dy) {
            *a += b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(width: usize) -> LstmState {
        LstmState {
            hidden: vec![0.0; width],
            cell: vec![0.0; width],
        }
    }
}

/// Intermediate values of one LSTM step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    input: Vec<f64>,
    prev: LstmState,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Standard LSTM cell. Gate rows are stacked as input, forget, candidate,
/// output; the weight matrix acts on `[x, h_prev]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> LstmCell {
        let cols = input + hidden;
        let w = store.add(
            &format!("{name}.w"),
            init_tensor(rng, &[4 * hidden, cols], cols, hidden, Init::Xavier),
        );
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.values[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(&format!("{name}.b"), bias);
        LstmCell { w, b, input, hidden }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Option<LstmCell> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = store.params[w.0].value.shape();
        let hidden = shape[0] / 4;
        Some(LstmCell {
            w,
            b,
            hidden,
            input: shape[1] - hidden,
        })
    }

    pub fn step(&self, store: &ParamStore, state: &LstmState, x: &[f64]) -> Result<(LstmState, LstmCache), NeuralError> {
        check_len("lstm input", self.input, x.len())?;
        check_len("lstm state", self.hidden, state.hidden.len())?;
        let h = self.hidden;
        let cols = self.input + h;
        let w = store.value(self.w);
        let b = store.value(self.b);
        let mut z = b.to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            *zr += dot(&row[..self.input], x) + dot(&row[self.input..], &state.hidden);
        }
        let i: Vec<f64> = z[..h].iter().map(|v| sigmoid(*v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|v| sigmoid(*v)).collect();
        let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * h..].iter().map(|v| sigmoid(*v)).collect();
        let cell: Vec<f64> = (0..h).map(|k| f[k] * state.cell[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = cell.iter().map(|c| c.tanh()).collect();
        let hidden: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
        let next = LstmState { hidden, cell };
        let cache = LstmCache {
            input: x.to_vec(),
            prev: state.clone(),
            i,
            f,
            g,
            o,
            tanh_c,
        };
        Ok((next, cache))
    }

    /// Given gradients w.r.t. the new hidden and cell states, accumulates
    /// parameter gradients and returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LstmCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let cols = self.input + h;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let do_ = dh[k] * cache.tanh_c[k];
            let dct = dc[k] + dh[k] * cache.o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]);
            let di = dct * cache.g[k];
            let df = dct * cache.prev.cell[k];
            let dg = dct * cache.i[k];
            dc_prev[k] = dct * cache.f[k];
            dz[k] = di * cache.i[k] * (1.0 - cache.i[k]);
            dz[h + k] = df * cache.f[k] * (1.0 - cache.f[k]);
            dz[2 * h + k] = dg * (1.0 - cache.g[k] * cache.g[k]);
            dz[3 * h + k] = do_ * cache.o[k] * (1.0 - cache.o[k]);
        }
        {
            let gb = grads.get_mut(self.b);
            for (g, d) in gb.iter_mut().zip(dz.iter()) {
                *g += d;
            }
        }
        let w = store.value(self.w);
        let mut dx = vec![0.0; self.input];
        let mut dh_prev = vec![0.0; h];
        let gw = grads.get_mut(self.w);
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[r * cols..(r + 1) * cols];
            let grow = &mut gw[r * cols..(r + 1) * cols];
            for c in 0..self.input {
                grow[c] += d * cache.input[c];
                dx[c] += d * row[c];
            }
            for c in 0..h {
                grow[self.input + c] += d * cache.prev.hidden[c];
                dh_prev[c] += d * row[self.input + c];
            }
        }
        (dx, dh_prev, dc_prev)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let n = a.len().min(b.len());
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in 4 * chunks..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

/// Softmax probabilities. Entries equal to `-inf` get probability zero.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .filter(|l| l.is_finite())
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `-log softmax(logits)[class]` and its gradient `softmax - onehot`.
pub fn softmax_ce(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>), NeuralError> {
    if class >= logits.len() || !logits[class].is_finite() {
        return Err(NeuralError::IndexOutOfRange {
            index: class,
            width: logits.len(),
        });
    }
    let logp = log_softmax(logits);
    let mut grad = softmax(logits);
    grad[class] -= 1.0;
    Ok((-logp[class], grad))
}

/// Cross-entropy of the event "class is in `members`": `-log sum_{j in S} p_j`.
/// The gradient is `p - p * 1_S / p(S)`.
pub fn subset_ce(logits: &[f64], members: &[bool]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let mass: f64 = p.iter().zip(members).filter(|(_, m)| **m).map(|(v, _)| v).sum();
    let grad = p
        .iter()
        .zip(members)
        .map(|(v, m)| if *m { v - v / mass } else { *v })
        .collect();
    // log of the subset mass via log-sum-exp for accuracy
    let lp = log_softmax(logits);
    let sel: Vec<f64> = lp.iter().zip(members).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    let mx = sel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_mass = mx + sel.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    (-log_mass, grad)
}

/// Mean squared error over components and its gradient w.r.t. `pred`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Sum over dimensions of the diagonal Gaussian log-density.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Gradients of [`gaussian_logpdf`] w.r.t. the mean and the log-std.
pub fn gaussian_logpdf_grad(x: &[f64], mean: &[f64], log_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dmean = Vec::with_capacity(x.len());
    let mut dls = Vec::with_capacity(x.len());
    for ((x, m), ls) in x.iter().zip(mean).zip(log_std) {
        let inv_var = (-2.0 * ls).exp();
        let d = x - m;
        dmean.push(d * inv_var);
        dls.push(d * d * inv_var - 1.0);
    }
    (dmean, dls)
}
