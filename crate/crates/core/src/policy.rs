//! Feedforward policy network trained by behavioral cloning.
//!
//! `10 → 64 → 64 → 3` with tanh hidden units and a linear head. Weights are
//! stored input-major (`w[i * fan_out + j]` connects input `i` to unit `j`).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::operator::Source;
use crate::rng;

pub const HIDDEN: usize = 64;
pub const DEFAULT_SHAPE: [usize; 4] = [OBS_DIM, HIDDEN, HIDDEN, ACT_DIM];

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            w: vec![0.0; fan_in * fan_out],
            b: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
    }
}

/// Network weights. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<Dense>,
}

impl PolicyParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        Self::init_with_shape(&DEFAULT_SHAPE, seed)
    }

    pub fn init_with_shape(shape: &[usize], seed: u64) -> Self {
        let mut r = rng::keyed(seed, rng::stream::INIT);
        let layers = shape
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut d = Dense::zeros(fan_in, fan_out);
                for v in &mut d.w {
                    *v = r.random_range(-bound..bound);
                }
                d
            })
            .collect();
        PolicyParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].fan_in];
        s.extend(self.layers.iter().map(|l| l.fan_out));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter slices in serialization order: `w1, b1, w2, b2, ...`.
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
    }

    /// Flat copy in serialization order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length mismatch");
        let mut it = flat.iter();
        for s in self.slices_mut() {
            for v in s {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().flatten().all(|v| v.is_finite())
    }

    pub fn forward(&self, obs: &Observation) -> Action {
        let mut y = [0.0; ACT_DIM];
        self.forward_raw(&obs.0, &mut y);
        Action::from_array(y)
    }

    fn forward_raw(&self, x: &[f64], y: &mut [f64]) {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.fan_out];
            layer.apply(&cur, &mut next);
            if k != last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = next;
        }
        y.copy_from_slice(&cur);
    }

    /// Mean squared action error over the batch and its exact gradient.
    ///
    /// `loss = (1/B) Σ_b ‖π(s_b) − a_b‖²`.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, PolicyParams) {
        let mut grads = self.zeros_like();
        let n = batch.len();
        if n == 0 {
            return (f64::NAN, grads);
        }
        let scale = 1.0 / n as f64;
        let nl = self.layers.len();

        // Row-major activation matrices; acts[k] is the input to layer k.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        acts.push(batch.observations.iter().flatten().copied().collect());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out: Vec<f64> = Vec::with_capacity(n * layer.fan_out);
            for _ in 0..n {
                out.extend_from_slice(&layer.b);
            }
            let w = MatRef::row_major(&layer.w, layer.fan_out);
            gemm(MatRef::row_major(&acts[k], layer.fan_in), w, &mut out, 1.0);
            if k + 1 != nl {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }

        let mut loss = 0.0;
        let mut delta: Vec<f64> = acts[nl]
            .chunks_exact(ACT_DIM)
            .zip(&batch.actions)
            .flat_map(|(y, a)| {
                let e = [y[0] - a[0], y[1] - a[1], y[2] - a[2]];
                loss += e.iter().map(|v| v * v).sum::<f64>();
                e.map(|v| 2.0 * v * scale)
            })
            .collect();

        for k in (0..nl).rev() {
            let layer = &self.layers[k];
            let g = &mut grads.layers[k];
            for row in delta.chunks_exact(layer.fan_out) {
                for (gb, d) in g.b.iter_mut().zip(row) {
                    *gb += d;
                }
            }
            // dW = Xᵀ Δ
            let xt = MatRef::transposed(&acts[k], layer.fan_in);
            gemm(xt, MatRef::row_major(&delta, layer.fan_out), &mut g.w, 0.0);
            if k > 0 {
                // dX = Δ Wᵀ, then through tanh.
                let mut prev = vec![0.0; n * layer.fan_in];
                let wt = MatRef::transposed(&layer.w, layer.fan_out);
                gemm(MatRef::row_major(&delta, layer.fan_out), wt, &mut prev, 0.0);
                for (d, h) in prev.iter_mut().zip(&acts[k]) {
                    *d *= 1.0 - h * h;
                }
                delta = prev;
            }
        }
        (loss * scale, grads)
    }

    /// Loss only; cheaper than [`loss_and_grad`](Self::loss_and_grad).
    pub fn loss(&self, batch: &Batch) -> f64 {
        let mut y = [0.0; ACT_DIM];
        let total: f64 = batch
            .observations
            .iter()
            .zip(&batch.actions)
            .map(|(x, a)| {
                self.forward_raw(x, &mut y);
                y.iter().zip(a).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
            })
            .sum();
        total / batch.len() as f64
    }
}

/// Dense matrix view: `rows × cols` with explicit strides.
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rows: data.len() / cols,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of the row-major matrix with `cols` columns stored in `data`.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: data.len() / cols,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c ← a·b + beta·c` with `c` row-major.
fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    // SAFETY: the views and `c` are in bounds for the given shapes and
    // strides (checked above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: PolicyParams,
    pub v: PolicyParams,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams, config: AdamConfig) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            config,
        }
    }

    /// One bias-corrected Adam update, in place.
    pub fn apply(&mut self, params: &mut PolicyParams, grads: &PolicyParams) {
        let c = &self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params
            .slices_mut()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

/// Value-returning form of [`OptimizerState::apply`].
pub fn adam_step(
    params: &PolicyParams,
    state: &OptimizerState,
    grads: &PolicyParams,
) -> (PolicyParams, OptimizerState) {
    let (mut p, mut s) = (params.clone(), state.clone());
    s.apply(&mut p, grads);
    (p, s)
}

/// Training rows. `sources` records which bucket each row came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub observations: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<[f64; ACT_DIM]>,
    pub sources: Vec<Source>,
}

impl Batch {
    pub fn with_capacity(n: usize) -> Self {
        Batch {
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            sources: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, obs: &Observation, action: &Action, source: Source) {
        self.observations.push(obs.0);
        self.actions.push(action.to_array());
        self.sources.push(source);
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

const CHECKPOINT_MAGIC: &str = "IWR-POLICY";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters: an ASCII header
///
/// ```text
/// IWR-POLICY 1
/// shape 10 64 64 3
/// end
/// ```
///
/// followed by each layer's weights then biases as little-endian `f64`.
pub fn encode_checkpoint(params: &PolicyParams) -> Vec<u8> {
    let shape: Vec<String> = params.shape().iter().map(usize::to_string).collect();
    let mut out = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nshape {}\nend\n",
        shape.join(" ")
    )
    .into_bytes();
    out.reserve(params.num_params() * 8);
    for v in params.slices().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    let mut lines = Vec::with_capacity(3);
    let mut pos = 0;
    while lines.len() < 3 {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| corrupt("header is not ASCII".into()))?;
        lines.push(line);
        pos += nl + 1;
    }
    if lines[0] != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
        return Err(corrupt(format!("unexpected header `{}`", lines[0])));
    }
    let shape: Vec<usize> = lines[1]
        .strip_prefix("shape ")
        .ok_or_else(|| corrupt("missing shape line".into()))?
        .split(' ')
        .map(|s| s.parse::<usize>().map_err(|_| corrupt(format!("bad dimension `{s}`"))))
        .collect::<Result<_>>()?;
    if lines[2] != "end" {
        return Err(corrupt("missing header terminator".into()));
    }
    if shape.len() < 2 || shape[0] != OBS_DIM || shape[shape.len() - 1] != ACT_DIM {
        return Err(corrupt(format!(
            "shape {shape:?} must start at {OBS_DIM} inputs and end at {ACT_DIM} outputs"
        )));
    }
    if shape.iter().any(|&d| d == 0 || d > 1 << 16) {
        return Err(corrupt(format!("implausible layer width in {shape:?}")));
    }
    let mut params = PolicyParams {
        layers: shape.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
    };
    let body = &bytes[pos..];
    if body.len() != params.num_params() * 8 {
        return Err(corrupt(format!(
            "expected {} payload bytes, found {}",
            params.num_params() * 8,
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(8);
    for s in params.slices_mut() {
        for v in s {
            *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, seed: u64) -> Batch {
        let mut r = rng::keyed(seed, 99);
        let mut b = Batch::with_capacity(n);
        for _ in 0..n {
            let mut o = [0.0; OBS_DIM];
            o.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
            let a = Action::new(r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), r.random_range(-1.0..1.0));
            b.push(&Observation(o), &a, Source::Human);
        }
        b
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let a = PolicyParams::init(3);
        assert_eq!(a, PolicyParams::init(3));
        assert!(a.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / 74.0).sqrt();
        assert!((bound - 0.2847).abs() < 1e-4);
        assert!(a.layers[0].w.iter().all(|w| w.abs() <= bound));
        assert_eq!(a.shape(), vec![10, 64, 64, 3]);
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut p = PolicyParams::init(0).zeros_like();
        p.layers[2].b.copy_from_slice(&[0.1, -0.2, 0.3]);
        let y = p.forward(&Observation([0.7; OBS_DIM]));
        assert_eq!(y, Action::new(0.1, -0.2, 0.3));
    }

    #[test]
    fn one_hidden_unit_closed_form() {
        let mut p = PolicyParams::init_with_shape(&[OBS_DIM, 1, ACT_DIM], 0);
        p.layers[0].b[0] = 0.4;
        p.layers[1].w.copy_from_slice(&[1.5, -2.0, 0.25]);
        p.layers[1].b.copy_from_slice(&[0.1, 0.2, 0.3]);
        let y = p.forward(&Observation([0.0; OBS_DIM]));
        let h = 0.4f64.tanh();
        let expected = [0.1 + 1.5 * h, 0.2 - 2.0 * h, 0.3 + 0.25 * h];
        assert_eq!(y.to_array(), expected);
    }

    #[test]
    fn perfect_targets_give_zero_loss_and_grad() {
        let p = PolicyParams::init(1);
        let mut b = random_batch(8, 2);
        for (x, a) in b.observations.iter().zip(b.actions.iter_mut()) {
            *a = p.forward(&Observation(*x)).to_array();
        }
        // The batched path sums in a different order than `forward`, so
        // residuals are rounding-sized rather than exactly zero.
        let (loss, g) = p.loss_and_grad(&b);
        assert!(loss < 1e-28, "{loss}");
        assert!(g.slices().flatten().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn duplicated_batch_same_loss_and_grad() {
        let p = PolicyParams::init(4);
        let b = random_batch(5, 6);
        let mut d = b.clone();
        d.observations.extend(b.observations.clone());
        d.actions.extend(b.actions.clone());
        d.sources.extend(b.sources.clone());
        let (l1, g1) = p.loss_and_grad(&b);
        let (l2, g2) = p.loss_and_grad(&d);
        assert!((l1 - l2).abs() <= 1e-15 * l1.abs().max(1.0));
        for (a, b) in g1.slices().flatten().zip(g2.slices().flatten()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3));
        }
        assert!((p.loss(&b) - l1).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let p = PolicyParams::init(5);
        let s = OptimizerState::new(&p, AdamConfig::default());
        let (p2, s2) = adam_step(&p, &s, &p.zeros_like());
        assert_eq!(p2, p);
        assert_eq!(s2.m, s.m);
        assert_eq!(s2.v, s.v);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn adam_first_step_unit_gradient() {
        let mut p = PolicyParams::init_with_shape(&[OBS_DIM, 1, ACT_DIM], 0).zeros_like();
        let s = OptimizerState::new(&p, AdamConfig::default());
        let mut g = p.zeros_like();
        g.layers[1].b[0] = 1.0;
        let (p2, s2) = adam_step(&p, &s, &g);
        // m_hat = 1, v_hat = 1 → Δ = −lr / (1 + ε).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p2.layers[1].b[0] - expected).abs() < 1e-15);
        assert_eq!(p2.layers[1].b[1], 0.0);
        let (p3, _) = adam_step(&p2, &s2, &g);
        let (p3b, _) = adam_step(&p2, &s2, &g);
        assert_eq!(p3, p3b);
        p.layers[1].b[0] = 9.0;
        assert_ne!(p, p2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = PolicyParams::init(8);
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   q.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let bytes = encode_checkpoint(&PolicyParams::init(8));
        for cut in [0, 5, 30, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
    }

    #[test]
    fn wrong_dimension_header_is_corrupt() {
        let bytes = encode_checkpoint(&PolicyParams::init(8));
        let header_len = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
        let mut forged = b"IWR-POLICY 1\nshape 11 64 64 3\nend\n".to_vec();
        forged.extend_from_slice(&bytes[header_len..]);
        assert!(matches!(decode_checkpoint(&forged), Err(Error::CorruptCheckpoint(_))));
        let mut versioned = b"IWR-POLICY 2\nshape 10 64 64 3\nend\n".to_vec();
        versioned.extend_from_slice(&bytes[header_len..]);
        assert!(matches!(decode_checkpoint(&versioned), Err(Error::CorruptCheckpoint(_))));
    }
}
