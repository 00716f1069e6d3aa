//! A one-layer attention language model with hand-written backprop.
//!
//! For tokens `x_0..x_{n-1}` with embeddings `e_t`:
//!
//! ```text
//! s_t = (e_{t-m+1} + ... + e_t) / sqrt(m)       trailing summary
//! q_t = Wq s_t + Wqp e_t
//! k_j = Wk s_{j-1} + Wkp e_{j-1},  k_0 = 0      key describes what precedes j
//! v_j = Wv e_j
//! o_t = sum_{j<=t} softmax_j(q_t . k_j / sqrt(H)) v_j
//! h_t = e_t + Wo o_t
//! z_t = U h_t + b + c * sum_{j<=t} softmax_j(...) onehot(x_j)    copy path
//! p(x_{t+1} | x_0..x_t) = softmax(z_t)
//! p(x_0) = softmax(b)
//! ```
//!
//! There are no position embeddings, so a window cut from a longer sequence
//! is scored exactly as the same tokens on their own.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scoring::{ScoreError, Scorer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyLMConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Tokens pooled into the trailing summary used by queries and keys.
    #[serde(default = "TinyLMConfig::default_summary")]
    pub summary_window: usize,
    pub seed: u64,
}

pub const MAX_VOCAB: usize = 512;
pub const MAX_CONTEXT: usize = 512;
pub const MAX_PARAMS: usize = 1_000_000;

impl TinyLMConfig {
    fn default_summary() -> usize {
        16
    }

    pub fn new(vocab_size: usize, context_window: usize, embedding_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        TinyLMConfig {
            vocab_size,
            context_window,
            embedding_dim,
            hidden_dim,
            summary_window: Self::default_summary(),
            seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.embedding_dim, self.hidden_dim);
        2 * v * d + 6 * h * d + v + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return Err(format!("vocab_size {} outside 1..={MAX_VOCAB}", self.vocab_size));
        }
        if self.context_window == 0 || self.context_window > MAX_CONTEXT {
            return Err(format!("context_window {} outside 1..={MAX_CONTEXT}", self.context_window));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.summary_window == 0 {
            return Err("embedding_dim, hidden_dim and summary_window must be positive".into());
        }
        if self.parameter_count() > MAX_PARAMS {
            return Err(format!("{} parameters exceeds {MAX_PARAMS}", self.parameter_count()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub e: Range<usize>,
    pub wq: Range<usize>,
    pub wqp: Range<usize>,
    pub wk: Range<usize>,
    pub wkp: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub u: Range<usize>,
    pub b: Range<usize>,
    pub copy: Range<usize>,
}

impl Layout {
    fn new(cfg: &TinyLMConfig) -> Self {
        let (v, d, h) = (cfg.vocab_size, cfg.embedding_dim, cfg.hidden_dim);
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Layout {
            e: take(v * d),
            wq: take(h * d),
            wqp: take(h * d),
            wk: take(h * d),
            wkp: take(h * d),
            wv: take(h * d),
            wo: take(d * h),
            u: take(v * d),
            b: take(v),
            copy: take(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM {
    config: TinyLMConfig,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Cache {
    n: usize,
    e: Vec<f64>,
    s: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Row `t` holds attention weights over `0..=t`, stride `n`.
    p: Vec<f64>,
    o: Vec<f64>,
    h: Vec<f64>,
    /// Softmax of the output at each query position, `n - 1` rows.
    probs: Vec<f64>,
    /// Unconditional distribution for the first token.
    probs0: Vec<f64>,
    logp: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += W x` for row-major `W` with `cols` columns.
fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += W^T y`.
fn matvec_t(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (&yr, row) in y.iter().zip(w.chunks_exact(cols)) {
        axpy(yr, row, out);
    }
}

/// `G += y x^T`.
fn outer_add(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (&yr, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        axpy(yr, x, row);
    }
}

/// Softmax in place; returns the log-sum-exp of the input.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in z.iter_mut() {
        *x /= total;
    }
    max + total.ln()
}

impl TinyLM {
    pub fn new(config: TinyLMConfig) -> Result<Self, String> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.copy.end];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embedding_dim as f64;
        let h = config.hidden_dim as f64;
        let mut fill = |r: Range<usize>, std: f64, params: &mut [f64]| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[r] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(layout.e.clone(), 1.0 / d.sqrt(), &mut params);
        for r in [&layout.wq, &layout.wqp, &layout.wv] {
            fill(r.clone(), 1.0 / d.sqrt(), &mut params);
        }
        // keys start equal to queries, so attention begins as a similarity
        // kernel between contexts; the two are trained independently
        params.copy_within(layout.wq.clone(), layout.wk.start);
        params.copy_within(layout.wqp.clone(), layout.wkp.start);
        fill(layout.wo.clone(), 0.5 / h.sqrt(), &mut params);
        fill(layout.u.clone(), 1.0 / d.sqrt(), &mut params);
        params[layout.copy.start] = 1.0;
        Ok(TinyLM { config, params })
    }

    pub(crate) fn from_parts(config: TinyLMConfig, params: Vec<f64>) -> Result<Self, String> {
        config.validate()?;
        let expected = Layout::new(&config).copy.end;
        if params.len() != expected {
            return Err(format!("expected {expected} parameters, got {}", params.len()));
        }
        Ok(TinyLM { config, params })
    }

    pub fn config(&self) -> &TinyLMConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ScoreError> {
        if ids.len() > self.config.context_window {
            return Err(ScoreError::Window(format!(
                "{} tokens exceed the context window of {}",
                ids.len(),
                self.config.context_window
            )));
        }
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ScoreError::OutOfVocab(t)),
            None => Ok(()),
        }
    }

    fn forward(&self, ids: &[u32]) -> Cache {
        let cfg = &self.config;
        let (vsz, dd, hh, m) = (cfg.vocab_size, cfg.embedding_dim, cfg.hidden_dim, cfg.summary_window);
        let l = Layout::new(cfg);
        let w = &self.params;
        let n = ids.len();
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let scale = 1.0 / (hh as f64).sqrt();

        let mut e = vec![0.0; n * dd];
        for (t, &id) in ids.iter().enumerate() {
            let row = id as usize * dd;
            e[t * dd..(t + 1) * dd].copy_from_slice(&w[l.e.start + row..l.e.start + row + dd]);
        }
        let mut s = vec![0.0; n * dd];
        let mut run = vec![0.0; dd];
        for t in 0..n {
            axpy(1.0, &e[t * dd..(t + 1) * dd], &mut run);
            if t >= m {
                axpy(-1.0, &e[(t - m) * dd..(t - m + 1) * dd], &mut run);
            }
            for (si, ri) in s[t * dd..(t + 1) * dd].iter_mut().zip(&run) {
                *si = ri * inv_sqrt_m;
            }
        }

        let mut q = vec![0.0; n * hh];
        let mut k = vec![0.0; n * hh];
        let mut v = vec![0.0; n * hh];
        for t in 0..n {
            let (et, st) = (&e[t * dd..(t + 1) * dd], &s[t * dd..(t + 1) * dd]);
            let qt = &mut q[t * hh..(t + 1) * hh];
            matvec(&w[l.wq.clone()], dd, st, qt);
            matvec(&w[l.wqp.clone()], dd, et, qt);
            matvec(&w[l.wv.clone()], dd, et, &mut v[t * hh..(t + 1) * hh]);
            if t + 1 < n {
                let kt = &mut k[(t + 1) * hh..(t + 2) * hh];
                matvec(&w[l.wk.clone()], dd, st, kt);
                matvec(&w[l.wkp.clone()], dd, et, kt);
            }
        }

        let queries = n.saturating_sub(1);
        let mut p = vec![0.0; n * n];
        let mut o = vec![0.0; n * hh];
        let mut h = vec![0.0; n * dd];
        let mut probs = vec![0.0; queries * vsz];
        let mut logp = vec![0.0; n];
        for t in 0..queries {
            let qt = &q[t * hh..(t + 1) * hh];
            let row = &mut p[t * n..t * n + t + 1];
            for (j, pj) in row.iter_mut().enumerate() {
                *pj = dot(qt, &k[j * hh..(j + 1) * hh]) * scale;
            }
            softmax(row);
            let ot = &mut o[t * hh..(t + 1) * hh];
            for (j, &pj) in row.iter().enumerate() {
                axpy(pj, &v[j * hh..(j + 1) * hh], ot);
            }
            let ht = &mut h[t * dd..(t + 1) * dd];
            ht.copy_from_slice(&e[t * dd..(t + 1) * dd]);
            matvec(&w[l.wo.clone()], hh, ot, ht);
            let z = &mut probs[t * vsz..(t + 1) * vsz];
            z.copy_from_slice(&w[l.b.clone()]);
            matvec(&w[l.u.clone()], dd, ht, z);
            let copy = w[l.copy.start];
            for (j, &pj) in p[t * n..t * n + t + 1].iter().enumerate() {
                z[ids[j] as usize] += copy * pj;
            }
            let target = ids[t + 1] as usize;
            let logit = z[target];
            let lse = softmax(z);
            logp[t + 1] = logit - lse;
        }
        let mut probs0 = w[l.b.clone()].to_vec();
        if n > 0 {
            let logit = probs0[ids[0] as usize];
            logp[0] = logit - softmax(&mut probs0);
        }
        Cache { n, e, s, q, k, v, p, o, h, probs, probs0, logp }
    }

    /// Log-probability of every token given its prefix. A model with a single
    /// vocabulary entry returns all zeros.
    pub fn forward_logps(&self, ids: &[u32]) -> Result<Vec<f64>, ScoreError> {
        self.check_ids(ids)?;
        Ok(self.forward(ids).logp)
    }

    /// Accumulates into `grad` the gradient of `-sum_t coef_t * logp_t` and
    /// returns the per-token log-probabilities. `coef` is a constant.
    pub fn accumulate_gradients(&self, ids: &[u32], coef: &[f64], grad: &mut [f64]) -> Result<Vec<f64>, ScoreError> {
        self.check_ids(ids)?;
        if coef.len() != ids.len() || grad.len() != self.params.len() {
            return Err(ScoreError::Config(format!(
                "{} coefficients and {} gradient slots for {} tokens and {} parameters",
                coef.len(),
                grad.len(),
                ids.len(),
                self.params.len()
            )));
        }
        let cache = self.forward(ids);
        self.backward(ids, coef, &cache, grad);
        Ok(cache.logp)
    }

    fn backward(&self, ids: &[u32], coef: &[f64], c: &Cache, grad: &mut [f64]) {
        let cfg = &self.config;
        let (vsz, dd, hh, m) = (cfg.vocab_size, cfg.embedding_dim, cfg.hidden_dim, cfg.summary_window);
        let l = Layout::new(cfg);
        let w = &self.params;
        let n = c.n;
        if n == 0 {
            return;
        }
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let scale = 1.0 / (hh as f64).sqrt();

        // first token: -c0 * log softmax(b)[x0]
        {
            let gb = &mut grad[l.b.clone()];
            axpy(coef[0], &c.probs0, gb);
            gb[ids[0] as usize] -= coef[0];
        }

        let mut de = vec![0.0; n * dd];
        let mut ds = vec![0.0; n * dd];
        let mut dq = vec![0.0; n * hh];
        let mut dk = vec![0.0; n * hh];
        let mut dv = vec![0.0; n * hh];
        let mut dz = vec![0.0; vsz];
        let mut dh = vec![0.0; dd];
        let mut dout = vec![0.0; hh];
        let mut dp = vec![0.0; n];
        for t in 0..n - 1 {
            let ct = coef[t + 1];
            if ct == 0.0 {
                continue;
            }
            for (dzi, &pi) in dz.iter_mut().zip(&c.probs[t * vsz..(t + 1) * vsz]) {
                *dzi = ct * pi;
            }
            dz[ids[t + 1] as usize] -= ct;
            let ht = &c.h[t * dd..(t + 1) * dd];
            outer_add(&mut grad[l.u.clone()], dd, &dz, ht);
            axpy(1.0, &dz, &mut grad[l.b.clone()]);
            dh.fill(0.0);
            matvec_t(&w[l.u.clone()], dd, &dz, &mut dh);
            axpy(1.0, &dh, &mut de[t * dd..(t + 1) * dd]);
            let ot = &c.o[t * hh..(t + 1) * hh];
            outer_add(&mut grad[l.wo.clone()], hh, &dh, ot);
            dout.fill(0.0);
            matvec_t(&w[l.wo.clone()], hh, &dh, &mut dout);

            let row = &c.p[t * n..t * n + t + 1];
            let copy = w[l.copy.start];
            let mut mean = 0.0;
            let mut dcopy = 0.0;
            for (j, &pj) in row.iter().enumerate() {
                axpy(pj, &dout, &mut dv[j * hh..(j + 1) * hh]);
                let dzj = dz[ids[j] as usize];
                dcopy += pj * dzj;
                dp[j] = dot(&dout, &c.v[j * hh..(j + 1) * hh]) + copy * dzj;
                mean += pj * dp[j];
            }
            grad[l.copy.start] += dcopy;
            let qt = &c.q[t * hh..(t + 1) * hh];
            for (j, &pj) in row.iter().enumerate() {
                let da = pj * (dp[j] - mean) * scale;
                if da != 0.0 {
                    axpy(da, &c.k[j * hh..(j + 1) * hh], &mut dq[t * hh..(t + 1) * hh]);
                    axpy(da, qt, &mut dk[j * hh..(j + 1) * hh]);
                }
            }
        }

        for t in 0..n {
            let et = &c.e[t * dd..(t + 1) * dd];
            let st = &c.s[t * dd..(t + 1) * dd];
            let dvt = &dv[t * hh..(t + 1) * hh];
            outer_add(&mut grad[l.wv.clone()], dd, dvt, et);
            matvec_t(&w[l.wv.clone()], dd, dvt, &mut de[t * dd..(t + 1) * dd]);
            let dqt = &dq[t * hh..(t + 1) * hh];
            outer_add(&mut grad[l.wq.clone()], dd, dqt, st);
            matvec_t(&w[l.wq.clone()], dd, dqt, &mut ds[t * dd..(t + 1) * dd]);
            outer_add(&mut grad[l.wqp.clone()], dd, dqt, et);
            matvec_t(&w[l.wqp.clone()], dd, dqt, &mut de[t * dd..(t + 1) * dd]);
            if t + 1 < n {
                let dkt = &dk[(t + 1) * hh..(t + 2) * hh];
                outer_add(&mut grad[l.wk.clone()], dd, dkt, st);
                matvec_t(&w[l.wk.clone()], dd, dkt, &mut ds[t * dd..(t + 1) * dd]);
                outer_add(&mut grad[l.wkp.clone()], dd, dkt, et);
                matvec_t(&w[l.wkp.clone()], dd, dkt, &mut de[t * dd..(t + 1) * dd]);
            }
        }

        // s_t pools e_u for u in (t-m, t], so e_u receives ds_t for t in [u, u+m)
        let mut run = vec![0.0; dd];
        for u in (0..n).rev() {
            axpy(1.0, &ds[u * dd..(u + 1) * dd], &mut run);
            if u + m < n {
                axpy(-1.0, &ds[(u + m) * dd..(u + m + 1) * dd], &mut run);
            }
            axpy(inv_sqrt_m, &run, &mut de[u * dd..(u + 1) * dd]);
        }
        let ge = &mut grad[l.e.clone()];
        for (t, &id) in ids.iter().enumerate() {
            let row = id as usize * dd;
            axpy(1.0, &de[t * dd..(t + 1) * dd], &mut ge[row..row + dd]);
        }
    }
}

impl Scorer for TinyLM {
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError> {
        let mut ids = context.to_vec();
        ids.push(target);
        Ok(*self.forward_logps(&ids)?.last().expect("non-empty"))
    }

    /// One forward pass over the whole window.
    fn score_suffix(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>, ScoreError> {
        Ok(self.forward_logps(tokens)?.split_off(from.min(tokens.len())))
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.config.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> TinyLM {
        let mut cfg = TinyLMConfig::new(11, 32, 6, 5, seed);
        cfg.summary_window = 3;
        TinyLM::new(cfg).unwrap()
    }

    #[test]
    fn deterministic_init() {
        assert_eq!(small(3), small(3));
        assert_ne!(small(3).params(), small(4).params());
    }

    #[test]
    fn distributions_are_normalized() {
        let lm = small(1);
        let ids = [3u32, 1, 4, 1, 5, 9, 2, 6];
        for t in 0..=ids.len() {
            let total: f64 = (0..11).map(|x| lm.logprob(&ids[..t], x).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
        }
    }

    #[test]
    fn single_token_vocabulary_is_certain() {
        let lm = TinyLM::new(TinyLMConfig::new(1, 16, 4, 4, 0)).unwrap();
        assert_eq!(lm.forward_logps(&[0, 0, 0, 0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn windows_score_like_standalone_sequences() {
        let lm = small(2);
        let ids = [3u32, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let full = lm.forward_logps(&ids[4..]).unwrap();
        assert_eq!(lm.score_suffix(&ids[4..], 2).unwrap(), full[2..]);
        assert_eq!(lm.logprob(&ids[4..7], ids[7]).unwrap(), full[3]);
    }

    #[test]
    fn rejects_bad_input() {
        let lm = small(0);
        assert!(matches!(lm.forward_logps(&[11]), Err(ScoreError::OutOfVocab(11))));
        assert!(lm.forward_logps(&[0; 33]).is_err());
        assert!(TinyLM::new(TinyLMConfig::new(513, 8, 2, 2, 0)).is_err());
        assert!(TinyLM::new(TinyLMConfig::new(500, 512, 1000, 2, 0)).is_err());
    }

    #[test]
    fn zero_coefficients_give_zero_gradient() {
        let lm = small(5);
        let ids = [1u32, 2, 3, 4, 5];
        let mut g = vec![0.0; lm.params().len()];
        lm.accumulate_gradients(&ids, &[0.0; 5], &mut g).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    fn loss(lm: &TinyLM, ids: &[u32], coef: &[f64]) -> f64 {
        -lm.forward_logps(ids).unwrap().iter().zip(coef).map(|(l, c)| l * c).sum::<f64>()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut lm = small(7);
        let ids = [1u32, 2, 3, 1, 2, 4, 7, 1, 2, 3, 10, 0];
        let coef: Vec<f64> = (0..ids.len()).map(|i| 0.3 + 0.2 * i as f64).collect();
        let mut g = vec![0.0; lm.params().len()];
        lm.accumulate_gradients(&ids, &coef, &mut g).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..lm.params().len() {
            let orig = lm.params()[i];
            lm.params_mut()[i] = orig + eps;
            let up = loss(&lm, &ids, &coef);
            lm.params_mut()[i] = orig - eps;
            let down = loss(&lm, &ids, &coef);
            lm.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - g[i]).abs());
        }
        assert!(worst < 1e-8, "max abs error {worst}");
    }
}
