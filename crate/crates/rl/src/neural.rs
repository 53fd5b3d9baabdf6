//! Small recurrent networks with hand-written gradients.
//!
//! A network is `input -> tanh dense -> GRU -> linear heads`. All parameters
//! live in one flat `Vec<f64>`; layers are views (offset ranges) into it, and
//! gradients use the same layout.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense layer view: row-major `out x inp` weights followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub offset: usize,
}

impl Linear {
    pub fn len(&self) -> usize {
        self.inp * self.out + self.out
    }

    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.inp * self.out
    }

    pub fn bias(&self) -> Range<usize> {
        let w = self.weights();
        w.end..w.end + self.out
    }

    /// `y = W x + b`.
    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &p[self.weights()];
        let b = &p[self.bias()];
        for o in 0..self.out {
            y[o] = b[o] + dot(&w[o * self.inp..(o + 1) * self.inp], x);
        }
    }

    /// Accumulates parameter gradients and, when `dx` is given, input gradients.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let wr = self.weights();
        let br = self.bias();
        {
            let gw = &mut grad[wr.clone()];
            for o in 0..self.out {
                if dy[o] != 0.0 {
                    axpy(dy[o], x, &mut gw[o * self.inp..(o + 1) * self.inp]);
                }
            }
        }
        for (g, d) in grad[br].iter_mut().zip(dy) {
            *g += d;
        }
        if let Some(dx) = dx {
            let w = &p[wr];
            for o in 0..self.out {
                if dy[o] != 0.0 {
                    axpy(dy[o], &w[o * self.inp..(o + 1) * self.inp], dx);
                }
            }
        }
    }
}

/// Gated recurrent cell view: input weights `3H x I`, input biases `3H`,
/// hidden weights `3H x H`, hidden biases `3H`, gates ordered reset, update, candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
}

impl Gru {
    pub fn size(&self) -> usize {
        self.hidden.inp
    }
}

/// Activations of one GRU step kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct GruStep {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub n: Vec<f64>,
    /// `W_hn h + b_hn`.
    pub hn: Vec<f64>,
}

impl Gru {
    /// One step. Returns the new hidden state and the cached activations.
    pub fn forward(&self, p: &[f64], x: &[f64], h: &[f64], gi: &mut [f64], gh: &mut [f64]) -> (Vec<f64>, GruStep) {
        let hs = self.size();
        self.input.forward(p, x, gi);
        self.hidden.forward(p, h, gh);
        let mut step = GruStep {
            r: vec![0.0; hs],
            z: vec![0.0; hs],
            n: vec![0.0; hs],
            hn: gh[2 * hs..].to_vec(),
        };
        let mut h_new = vec![0.0; hs];
        for k in 0..hs {
            let r = sigmoid(gi[k] + gh[k]);
            let z = sigmoid(gi[hs + k] + gh[hs + k]);
            let n = (gi[2 * hs + k] + r * gh[2 * hs + k]).tanh();
            step.r[k] = r;
            step.z[k] = z;
            step.n[k] = n;
            h_new[k] = (1.0 - z) * n + z * h[k];
        }
        (h_new, step)
    }

    /// Backward through one step. `dh_new` is consumed; returns `dh_prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        h: &[f64],
        step: &GruStep,
        dh_new: &[f64],
        grad: &mut [f64],
        dx: &mut [f64],
    ) -> Vec<f64> {
        let hs = self.size();
        let mut d_in = vec![0.0; 3 * hs];
        let mut d_hid = vec![0.0; 3 * hs];
        let mut dh = vec![0.0; hs];
        for k in 0..hs {
            let (r, z, n) = (step.r[k], step.z[k], step.n[k]);
            let dn = dh_new[k] * (1.0 - z);
            let dz = dh_new[k] * (h[k] - n);
            dh[k] = dh_new[k] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr_pre = dn_pre * step.hn[k] * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            d_in[k] = dr_pre;
            d_in[hs + k] = dz_pre;
            d_in[2 * hs + k] = dn_pre;
            d_hid[k] = dr_pre;
            d_hid[hs + k] = dz_pre;
            d_hid[2 * hs + k] = dn_pre * r;
        }
        self.input.backward(p, x, &d_in, grad, Some(dx));
        self.hidden.backward(p, h, &d_hid, grad, Some(&mut dh));
        dh
    }
}

/// Shape of a recurrent network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub heads: Vec<usize>,
}

/// `input -> tanh dense -> GRU -> heads`, as views into a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentNet {
    pub shape: NetShape,
    pub fc: Linear,
    pub gru: Gru,
    pub heads: Vec<Linear>,
    pub num_params: usize,
}

/// Per-step activations of a sequence forward pass.
#[derive(Debug, Clone, Default)]
pub struct SeqCache {
    pub inputs: Vec<Vec<f64>>,
    pub trunk: Vec<Vec<f64>>,
    /// Hidden state entering each step; `hiddens[t + 1]` leaves step `t`.
    pub hiddens: Vec<Vec<f64>>,
    pub gru: Vec<GruStep>,
}

/// Outputs of a sequence forward pass: `outputs[t][head]`.
#[derive(Debug, Clone)]
pub struct SeqOutput {
    pub outputs: Vec<Vec<Vec<f64>>>,
    pub final_hidden: Vec<f64>,
    pub cache: SeqCache,
}

impl RecurrentNet {
    pub fn new(shape: NetShape) -> Self {
        let mut offset = 0;
        let mut take = |inp: usize, out: usize| {
            let l = Linear { inp, out, offset };
            offset += l.len();
            l
        };
        let fc = take(shape.input, shape.hidden);
        let gru = Gru {
            input: take(shape.hidden, 3 * shape.hidden),
            hidden: take(shape.hidden, 3 * shape.hidden),
        };
        let heads = shape.heads.iter().map(|&o| take(shape.hidden, o)).collect();
        Self {
            shape,
            fc,
            gru,
            heads,
            num_params: offset,
        }
    }

    /// Named parameter views in layout order.
    pub fn views(&self) -> Vec<(String, Range<usize>)> {
        let mut v = vec![
            ("fc.weight".to_string(), self.fc.weights()),
            ("fc.bias".to_string(), self.fc.bias()),
            ("gru.input.weight".to_string(), self.gru.input.weights()),
            ("gru.input.bias".to_string(), self.gru.input.bias()),
            ("gru.hidden.weight".to_string(), self.gru.hidden.weights()),
            ("gru.hidden.bias".to_string(), self.gru.hidden.bias()),
        ];
        for (i, h) in self.heads.iter().enumerate() {
            v.push((format!("head{i}.weight"), h.weights()));
            v.push((format!("head{i}.bias"), h.bias()));
        }
        v
    }

    /// Orthogonal weights (gain 1 for the trunk, `head_gain` for heads), zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, head_gain: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params];
        orthogonal_into(&mut p[self.fc.weights()], self.fc.out, self.fc.inp, 1.0, rng);
        for g in 0..3 {
            let hs = self.shape.hidden;
            let wi = self.gru.input.weights();
            let wh = self.gru.hidden.weights();
            let block = hs * hs;
            orthogonal_into(&mut p[wi.start + g * block..wi.start + (g + 1) * block], hs, hs, 1.0, rng);
            orthogonal_into(&mut p[wh.start + g * block..wh.start + (g + 1) * block], hs, hs, 1.0, rng);
        }
        for h in &self.heads {
            orthogonal_into(&mut p[h.weights()], h.out, h.inp, head_gain, rng);
        }
        p
    }

    /// Runs a sequence from `h0`, keeping everything the backward pass needs.
    pub fn forward_seq(&self, p: &[f64], inputs: &[&[f64]], h0: &[f64]) -> SeqOutput {
        let hs = self.shape.hidden;
        let mut gi = vec![0.0; 3 * hs];
        let mut gh = vec![0.0; 3 * hs];
        let mut cache = SeqCache {
            inputs: Vec::with_capacity(inputs.len()),
            trunk: Vec::with_capacity(inputs.len()),
            hiddens: Vec::with_capacity(inputs.len() + 1),
            gru: Vec::with_capacity(inputs.len()),
        };
        cache.hiddens.push(h0.to_vec());
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut a = vec![0.0; hs];
            self.fc.forward(p, x, &mut a);
            a.iter_mut().for_each(|v| *v = v.tanh());
            let h = cache.hiddens.last().expect("h0 pushed");
            let (h_new, step) = self.gru.forward(p, &a, h, &mut gi, &mut gh);
            let outs = self
                .heads
                .iter()
                .map(|head| {
                    let mut y = vec![0.0; head.out];
                    head.forward(p, &h_new, &mut y);
                    y
                })
                .collect();
            outputs.push(outs);
            cache.inputs.push(x.to_vec());
            cache.trunk.push(a);
            cache.gru.push(step);
            cache.hiddens.push(h_new);
        }
        SeqOutput {
            outputs,
            final_hidden: cache.hiddens.last().expect("non-empty").clone(),
            cache,
        }
    }

    /// One step without a cache; returns head outputs and the new hidden state.
    pub fn step(&self, p: &[f64], x: &[f64], h: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let out = self.forward_seq(p, &[x], h);
        (out.outputs.into_iter().next().expect("one step"), out.final_hidden)
    }

    /// Truncated BPTT over the cached sequence. `d_outputs[t][head]` are loss
    /// gradients w.r.t. head outputs; gradients are accumulated into `grad`. No
    /// gradient flows into the initial hidden state.
    pub fn backward_seq(&self, p: &[f64], cache: &SeqCache, d_outputs: &[Vec<Vec<f64>>], grad: &mut [f64]) {
        let hs = self.shape.hidden;
        let mut dh_next = vec![0.0; hs];
        let mut da = vec![0.0; hs];
        for t in (0..cache.inputs.len()).rev() {
            let h_out = &cache.hiddens[t + 1];
            let mut dh = dh_next.clone();
            for (head, dy) in self.heads.iter().zip(&d_outputs[t]) {
                head.backward(p, h_out, dy, grad, Some(&mut dh));
            }
            da.iter_mut().for_each(|v| *v = 0.0);
            dh_next = self
                .gru
                .backward(p, &cache.trunk[t], &cache.hiddens[t], &cache.gru[t], &dh, grad, &mut da);
            let a = &cache.trunk[t];
            let d_pre: Vec<f64> = da.iter().zip(a).map(|(d, y)| d * (1.0 - y * y)).collect();
            self.fc.backward(p, &cache.inputs[t], &d_pre, grad, None);
        }
    }
}

/// Fills a `rows x cols` row-major block with a scaled (semi-)orthogonal matrix
/// via Gram-Schmidt on Gaussian vectors.
fn orthogonal_into<R: Rng + ?Sized>(out: &mut [f64], rows: usize, cols: usize, gain: f64, rng: &mut R) {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // k orthonormal vectors of length n.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        for b in &basis {
            let proj = dot(&v, b);
            axpy(-proj, b, &mut v);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
}

/// Log-probabilities of a categorical over `logits`; masked entries get `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.map(|m| m[i]).unwrap_or(true);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, v)| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, v)| if allowed(i) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

pub fn entropy(logp: &[f64]) -> f64 {
    -logp
        .iter()
        .filter(|l| l.is_finite())
        .map(|l| l.exp() * l)
        .sum::<f64>()
}

/// Accumulates `coef * d logp[action] / d logits` into `dlogits`.
pub fn log_prob_grad(logp: &[f64], action: usize, coef: f64, dlogits: &mut [f64]) {
    for (i, l) in logp.iter().enumerate() {
        if l.is_finite() {
            let ind = if i == action { 1.0 } else { 0.0 };
            dlogits[i] += coef * (ind - l.exp());
        }
    }
}

/// Accumulates `coef * d entropy / d logits` into `dlogits`.
pub fn entropy_grad(logp: &[f64], coef: f64, dlogits: &mut [f64]) {
    let h = entropy(logp);
    for (i, l) in logp.iter().enumerate() {
        if l.is_finite() {
            dlogits[i] += coef * (-l.exp() * (l + h));
        }
    }
}

pub fn argmax_masked(logits: &[f64], mask: Option<&[bool]>) -> usize {
    let mut best = None;
    for (i, v) in logits.iter().enumerate() {
        if mask.map(|m| m[i]).unwrap_or(true) && best.map(|(_, b)| *v > b).unwrap_or(true) {
            best = Some((i, *v));
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

pub fn sample_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, l) in logp.iter().enumerate() {
        if l.is_finite() {
            acc += l.exp();
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(params: &mut [f64], grads: &[f64], cfg: &AdamConfig, lr: f64, state: &mut AdamState) {
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Running moments of value targets with debiased exponential averaging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopArt {
    pub beta: f64,
    pub floor: f64,
    pub mean: f64,
    pub mean_sq: f64,
    /// Accumulated debias weight `1 - (1 - beta)^n`.
    pub weight: f64,
}

impl PopArt {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            floor: 1e-4,
            mean: 0.0,
            mean_sq: 0.0,
            weight: 0.0,
        }
    }

    pub fn mu(&self) -> f64 {
        if self.weight > 0.0 {
            self.mean / self.weight
        } else {
            0.0
        }
    }

    pub fn sigma(&self) -> f64 {
        if self.weight > 0.0 {
            let mu = self.mu();
            (self.mean_sq / self.weight - mu * mu).max(self.floor * self.floor).sqrt()
        } else {
            1.0
        }
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.mu()) / self.sigma()
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        norm * self.sigma() + self.mu()
    }

    /// Folds a batch of raw targets into the statistics and rescales the value
    /// head `head` in `params` so its raw-unit outputs are unchanged.
    pub fn update(&mut self, targets: &[f64], head: &Linear, params: &mut [f64]) {
        if targets.is_empty() {
            return;
        }
        let (old_mu, old_sigma) = (self.mu(), self.sigma());
        let n = targets.len() as f64;
        let batch_mean = targets.iter().sum::<f64>() / n;
        let batch_sq = targets.iter().map(|t| t * t).sum::<f64>() / n;
        self.mean = (1.0 - self.beta) * self.mean + self.beta * batch_mean;
        self.mean_sq = (1.0 - self.beta) * self.mean_sq + self.beta * batch_sq;
        self.weight = (1.0 - self.beta) * self.weight + self.beta;
        let (mu, sigma) = (self.mu(), self.sigma());
        for w in &mut params[head.weights()] {
            *w *= old_sigma / sigma;
        }
        for b in &mut params[head.bias()] {
            *b = (old_sigma * *b + old_mu - mu) / sigma;
        }
    }
}

/// Serialized parameter set: named views of the flat vector.
pub fn named_views(net: &RecurrentNet, params: &[f64]) -> BTreeMap<String, Vec<f64>> {
    net.views()
        .into_iter()
        .map(|(name, r)| (name, params[r].to_vec()))
        .collect()
}

/// Inverse of [`named_views`]; every view must be present with the right length.
pub fn from_named_views(net: &RecurrentNet, views: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
    let mut p = vec![0.0; net.num_params];
    for (name, r) in net.views() {
        let v = views
            .get(&name)
            .ok_or_else(|| RlError::Checkpoint(format!("missing parameter view {name}")))?;
        if v.len() != r.len() {
            return Err(RlError::Checkpoint(format!(
                "view {name} has {} values, expected {}",
                v.len(),
                r.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RlError::Checkpoint(format!("view {name} holds non-finite values")));
        }
        p[r].copy_from_slice(v);
    }
    Ok(p)
}
