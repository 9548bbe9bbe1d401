//! Pre-norm causal transformer with hand-written reverse mode.
//!
//! All arithmetic is `f64`. Frozen weights are kept at `f32`-representable
//! values so that the on-disk float32 format reproduces them exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gemm};

const LN_EPS: f64 = 1e-5;
const POS_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab: super::BASE_VOCAB, dim: 64, layers: 2, heads: 2, mlp: 256, context: 320 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Validation("model dim must be a positive multiple of heads".into()));
        }
        if self.vocab < 258 || self.layers == 0 || self.mlp == 0 || self.context < 2 {
            return Err(Error::Validation("model config has a zero-sized component".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Every frozen tensor of the base model. Also used as the gradient buffer
/// during base pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `vocab x dim` input embedding table.
    pub tok_emb: Vec<f64>,
    /// Added to every image-patch position.
    pub img_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// `vocab x dim`; row `i` is classifier column `i`.
    pub head: Vec<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.dim, cfg.mlp);
        let layer = LayerParams {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        };
        Self {
            tok_emb: vec![0.0; cfg.vocab * d],
            img_emb: vec![0.0; d],
            layers: vec![layer; cfg.layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            head: vec![0.0; cfg.vocab * d],
        }
    }

    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (cfg.dim, cfg.mlp);
        let sd = 1.0 / (d as f64).sqrt();
        let mut p = Self::zeros(cfg);
        p.tok_emb = linalg::gaussian(&mut rng, cfg.vocab, d, sd);
        p.img_emb = linalg::gaussian(&mut rng, 1, d, 0.1);
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            l.wq = linalg::gaussian(&mut rng, d, d, sd);
            l.wk = linalg::gaussian(&mut rng, d, d, sd);
            l.wv = linalg::gaussian(&mut rng, d, d, sd);
            l.wo = linalg::gaussian(&mut rng, d, d, sd * 0.5);
            l.w1 = linalg::gaussian(&mut rng, d, f, sd);
            l.w2 = linalg::gaussian(&mut rng, f, d, 0.5 / (f as f64).sqrt());
        }
        p.lnf_g.fill(1.0);
        p.head = linalg::gaussian(&mut rng, cfg.vocab, d, sd);
        p.round_to_f32();
        p
    }

    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("img_emb".to_string(), &self.img_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.img_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head]);
        out
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            linalg::round_f32(t);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

/// One input position.
#[derive(Debug, Clone, Copy)]
pub enum Piece<'a> {
    Token(u32),
    /// Injected embedding (concept tokens, or probe vectors in pre-training).
    Vector(&'a [f64]),
    /// Projected image patch feature.
    Image(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    None,
    /// Gradients with respect to injected vectors and extra head rows only.
    Inputs,
    /// Additionally every frozen tensor (base pre-training only).
    All,
}

#[derive(Debug, Clone)]
pub struct Pass {
    pub loss: f64,
    /// Per-position gradient of the input embeddings, `len x dim`.
    pub dx0: Option<Vec<f64>>,
    /// Gradient of each extra classifier row.
    pub dextra: Option<Vec<Vec<f64>>>,
    pub dparams: Option<Params>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    len: usize,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final normalized hidden states, `len x dim`.
    pub z: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &[f64],
    cache: &LnCache,
    g: &[f64],
    d: usize,
    grads: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for i in 0..d {
            dx[r * d + i] = cache.rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
    if let Some((dg, db)) = grads {
        for r in 0..rows {
            for i in 0..d {
                dg[i] += dy[r * d + i] * cache.xhat[r * d + i];
                db[i] += dy[r * d + i];
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn head_slice(m: &[f64], rows: usize, d: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&m[r * d + start..r * d + start + width]);
    }
    out
}

fn add_head_slice(m: &mut [f64], src: &[f64], rows: usize, d: usize, start: usize, width: usize) {
    for r in 0..rows {
        for i in 0..width {
            m[r * d + start + i] += src[r * width + i];
        }
    }
}

fn add_bias(m: &mut [f64], b: &[f64]) {
    for row in m.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

fn col_sum_into(m: &[f64], out: &mut [f64]) {
    for row in m.chunks_exact(out.len()) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
}

/// Fixed sinusoidal position code.
pub fn position_code(pos: usize, d: usize) -> Vec<f64> {
    let scale = POS_SCALE / ((d / 2).max(1) as f64).sqrt();
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            scale * if i % 2 == 0 { a.sin() } else { a.cos() }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl BaseModel {
    pub fn random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, params: Params::random(&cfg, seed) })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn token_row(&self, id: u32) -> &[f64] {
        let d = self.cfg.dim;
        &self.params.tok_emb[id as usize * d..(id as usize + 1) * d]
    }

    pub fn embed(&self, pieces: &[Piece]) -> Result<Vec<f64>> {
        let d = self.cfg.dim;
        if pieces.len() > self.cfg.context {
            return Err(Error::Capacity { len: pieces.len(), max: self.cfg.context });
        }
        let mut x = Vec::with_capacity(pieces.len() * d);
        for (t, piece) in pieces.iter().enumerate() {
            let pos = position_code(t, d);
            match *piece {
                Piece::Token(id) => {
                    if id as usize >= self.cfg.vocab {
                        return Err(Error::input(format!("token id {id} is not a base-vocabulary id")));
                    }
                    x.extend(self.token_row(id).iter().zip(&pos).map(|(a, b)| a + b));
                }
                Piece::Vector(v) => {
                    if v.len() != d {
                        return Err(Error::dim("injected vector has the wrong width"));
                    }
                    x.extend(v.iter().zip(&pos).map(|(a, b)| a + b));
                }
                Piece::Image(v) => {
                    if v.len() != d {
                        return Err(Error::dim("image token width differs from model width"));
                    }
                    x.extend(v.iter().zip(&pos).zip(&self.params.img_emb).map(|((a, b), c)| a + b + c));
                }
            }
        }
        Ok(x)
    }

    pub fn forward(&self, x0: &[f64]) -> Activations {
        let d = self.cfg.dim;
        let (h, dh, f) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.mlp);
        let len = x0.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x0.to_vec();
        let mut caches = Vec::with_capacity(self.params.layers.len());
        for lp in &self.params.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b, d);
            let mut q = vec![0.0; len * d];
            let mut k = vec![0.0; len * d];
            let mut v = vec![0.0; len * d];
            gemm(len, d, d, &a, false, &lp.wq, false, 0.0, &mut q);
            gemm(len, d, d, &a, false, &lp.wk, false, 0.0, &mut k);
            gemm(len, d, d, &a, false, &lp.wv, false, 0.0, &mut v);
            let mut att = vec![0.0; len * d];
            let mut probs = Vec::with_capacity(h);
            for head in 0..h {
                let qh = head_slice(&q, len, d, head * dh, dh);
                let kh = head_slice(&k, len, d, head * dh, dh);
                let vh = head_slice(&v, len, d, head * dh, dh);
                let mut s = vec![0.0; len * len];
                gemm(len, dh, len, &qh, false, &kh, true, 0.0, &mut s);
                for i in 0..len {
                    let row = &mut s[i * len..(i + 1) * len];
                    let mut mx = f64::NEG_INFINITY;
                    for val in row[..=i].iter_mut() {
                        *val *= scale;
                        mx = mx.max(*val);
                    }
                    let mut sum = 0.0;
                    for val in row[..=i].iter_mut() {
                        *val = (*val - mx).exp();
                        sum += *val;
                    }
                    for val in row[..=i].iter_mut() {
                        *val /= sum;
                    }
                    row[i + 1..].fill(0.0);
                }
                let mut oh = vec![0.0; len * dh];
                gemm(len, len, dh, &s, false, &vh, false, 0.0, &mut oh);
                add_head_slice(&mut att, &oh, len, d, head * dh, dh);
                probs.push(s);
            }
            gemm(len, d, d, &att, false, &lp.wo, false, 1.0, &mut x);
            let (c, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b, d);
            let mut u = vec![0.0; len * f];
            gemm(len, d, f, &c, false, &lp.w1, false, 0.0, &mut u);
            add_bias(&mut u, &lp.b1);
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            gemm(len, f, d, &g, false, &lp.w2, false, 1.0, &mut x);
            add_bias(&mut x, &lp.b2);
            caches.push(LayerCache { ln1, a, q, k, v, probs, att, ln2, c, u, g });
        }
        let (z, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b, d);
        Activations { len, layers: caches, lnf, z }
    }

    /// Back-propagates `dz` (gradient w.r.t. the final normalized states) to
    /// the input embeddings, accumulating weight gradients when asked.
    pub fn backward(&self, acts: &Activations, dz: &[f64], mut grads: Option<&mut Params>) -> Vec<f64> {
        let d = self.cfg.dim;
        let (h, dh, f) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.mlp);
        let len = acts.len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = match grads.as_deref_mut() {
            Some(g) => layer_norm_back(dz, &acts.lnf, &self.params.lnf_g, d, Some((&mut g.lnf_g, &mut g.lnf_b))),
            None => layer_norm_back(dz, &acts.lnf, &self.params.lnf_g, d, None),
        };
        for (li, (lp, lc)) in self.params.layers.iter().zip(&acts.layers).enumerate().rev() {
            let mut lg = grads.as_deref_mut().map(|g| &mut g.layers[li]);

            // MLP branch
            let mut dg = vec![0.0; len * f];
            gemm(len, d, f, &dx, false, &lp.w2, true, 0.0, &mut dg);
            if let Some(g) = lg.as_deref_mut() {
                gemm(f, len, d, &lc.g, true, &dx, false, 1.0, &mut g.w2);
                col_sum_into(&dx, &mut g.b2);
            }
            for (x, &u) in dg.iter_mut().zip(&lc.u) {
                *x *= gelu_grad(u);
            }
            let mut dc = vec![0.0; len * d];
            gemm(len, f, d, &dg, false, &lp.w1, true, 0.0, &mut dc);
            if let Some(g) = lg.as_deref_mut() {
                gemm(d, len, f, &lc.c, true, &dg, false, 1.0, &mut g.w1);
                col_sum_into(&dg, &mut g.b1);
            }
            let dmid = match lg.as_deref_mut() {
                Some(g) => layer_norm_back(&dc, &lc.ln2, &lp.ln2_g, d, Some((&mut g.ln2_g, &mut g.ln2_b))),
                None => layer_norm_back(&dc, &lc.ln2, &lp.ln2_g, d, None),
            };
            dx.iter_mut().zip(&dmid).for_each(|(a, b)| *a += b);

            // attention branch
            let mut datt = vec![0.0; len * d];
            gemm(len, d, d, &dx, false, &lp.wo, true, 0.0, &mut datt);
            if let Some(g) = lg.as_deref_mut() {
                gemm(d, len, d, &lc.att, true, &dx, false, 1.0, &mut g.wo);
            }
            let mut dq = vec![0.0; len * d];
            let mut dk = vec![0.0; len * d];
            let mut dv = vec![0.0; len * d];
            for head in 0..h {
                let p = &lc.probs[head];
                let doh = head_slice(&datt, len, d, head * dh, dh);
                let qh = head_slice(&lc.q, len, d, head * dh, dh);
                let kh = head_slice(&lc.k, len, d, head * dh, dh);
                let vh = head_slice(&lc.v, len, d, head * dh, dh);
                let mut dp = vec![0.0; len * len];
                gemm(len, dh, len, &doh, false, &vh, true, 0.0, &mut dp);
                let mut dvh = vec![0.0; len * dh];
                gemm(len, len, dh, p, true, &doh, false, 0.0, &mut dvh);
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let rowdot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - rowdot) * scale;
                    }
                    dr[i + 1..].fill(0.0);
                }
                let mut dqh = vec![0.0; len * dh];
                gemm(len, len, dh, &dp, false, &kh, false, 0.0, &mut dqh);
                let mut dkh = vec![0.0; len * dh];
                gemm(len, len, dh, &dp, true, &qh, false, 0.0, &mut dkh);
                add_head_slice(&mut dq, &dqh, len, d, head * dh, dh);
                add_head_slice(&mut dk, &dkh, len, d, head * dh, dh);
                add_head_slice(&mut dv, &dvh, len, d, head * dh, dh);
            }
            let mut da = vec![0.0; len * d];
            gemm(len, d, d, &dq, false, &lp.wq, true, 1.0, &mut da);
            gemm(len, d, d, &dk, false, &lp.wk, true, 1.0, &mut da);
            gemm(len, d, d, &dv, false, &lp.wv, true, 1.0, &mut da);
            if let Some(g) = lg.as_deref_mut() {
                gemm(d, len, d, &lc.a, true, &dq, false, 1.0, &mut g.wq);
                gemm(d, len, d, &lc.a, true, &dk, false, 1.0, &mut g.wk);
                gemm(d, len, d, &lc.a, true, &dv, false, 1.0, &mut g.wv);
            }
            let din = match lg {
                Some(g) => layer_norm_back(&da, &lc.ln1, &lp.ln1_g, d, Some((&mut g.ln1_g, &mut g.ln1_b))),
                None => layer_norm_back(&da, &lc.ln1, &lp.ln1_g, d, None),
            };
            dx.iter_mut().zip(&din).for_each(|(a, b)| *a += b);
        }
        dx
    }

    /// Logits of the base classifier followed by `extra` rows at state `z`.
    pub fn logits(&self, z: &[f64], extra: &[Vec<f64>]) -> Vec<f64> {
        let d = self.cfg.dim;
        let mut out = vec![0.0; self.cfg.vocab];
        gemm(self.cfg.vocab, d, 1, &self.params.head, false, z, false, 0.0, &mut out);
        out.extend(extra.iter().map(|w| linalg::dot(w, z)));
        out
    }

    /// Summed next-token negative log-likelihood over `targets`
    /// (`(position, target id)` pairs), with optional gradients.
    pub fn run(&self, pieces: &[Piece], targets: &[(usize, u32)], extra: &[Vec<f64>], mode: GradMode) -> Result<Pass> {
        let d = self.cfg.dim;
        let vocab = self.cfg.vocab + extra.len();
        let x0 = self.embed(pieces)?;
        for &(pos, id) in targets {
            if pos >= pieces.len() || id as usize >= vocab {
                return Err(Error::input(format!("target ({pos}, {id}) out of range")));
            }
        }
        let acts = self.forward(&x0);
        let mut loss = 0.0;
        let mut dz = vec![0.0; x0.len()];
        let mut dextra = vec![vec![0.0; d]; extra.len()];
        let mut dparams = (mode == GradMode::All).then(|| Params::zeros(&self.cfg));
        for &(pos, id) in targets {
            let z = &acts.z[pos * d..(pos + 1) * d];
            let logits = self.logits(z, extra);
            let (lse, probs) = log_softmax_parts(&logits);
            loss += lse - logits[id as usize];
            if mode == GradMode::None {
                continue;
            }
            let mut dl = probs;
            dl[id as usize] -= 1.0;
            let dzr = &mut dz[pos * d..(pos + 1) * d];
            gemm(1, self.cfg.vocab, d, &dl[..self.cfg.vocab], false, &self.params.head, false, 1.0, dzr);
            for (j, w) in extra.iter().enumerate() {
                let g = dl[self.cfg.vocab + j];
                dzr.iter_mut().zip(w).for_each(|(a, b)| *a += g * b);
                dextra[j].iter_mut().zip(z).for_each(|(a, b)| *a += g * b);
            }
            if let Some(p) = dparams.as_mut() {
                gemm(self.cfg.vocab, 1, d, &dl[..self.cfg.vocab], false, z, false, 1.0, &mut p.head);
            }
        }
        if mode == GradMode::None {
            return Ok(Pass { loss, dx0: None, dextra: None, dparams: None });
        }
        let dx0 = self.backward(&acts, &dz, dparams.as_mut());
        if let Some(p) = dparams.as_mut() {
            for (t, piece) in pieces.iter().enumerate() {
                let row = &dx0[t * d..(t + 1) * d];
                match piece {
                    Piece::Token(id) => {
                        let dst = &mut p.tok_emb[*id as usize * d..(*id as usize + 1) * d];
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    Piece::Image(_) => p.img_emb.iter_mut().zip(row).for_each(|(a, b)| *a += b),
                    Piece::Vector(_) => {}
                }
            }
        }
        Ok(Pass { loss, dx0: Some(dx0), dextra: Some(dextra), dparams })
    }
}

/// Returns `(logsumexp, softmax)`.
pub fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    (mx + sum.ln(), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab: 260, dim: 8, layers: 2, heads: 2, mlp: 12, context: 16 }
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut model = BaseModel::random(cfg, 5).unwrap();
        // non-trivial LayerNorm parameters
        for (i, x) in model.params.layers[0].ln1_b.iter_mut().enumerate() {
            *x = 0.05 * i as f64;
        }
        let img = vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.9, -0.4, 0.2];
        let vecv = vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let pieces = [Piece::Image(&img), Piece::Token(65), Piece::Vector(&vecv), Piece::Token(66), Piece::Token(67)];
        let targets = [(2usize, 66u32), (3, 67), (4, 256)];
        let extra = vec![vec![0.05; 8]];
        let pass = model.run(&pieces, &targets, &extra, GradMode::All).unwrap();
        let grads = pass.dparams.unwrap();
        let eps = 1e-5;
        let names: Vec<String> = model.params.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = model.params.tensors_mut()[ti].len();
            // only the touched rows of the embedding/head tables matter; sample a stride
            let step = if len > 200 { 37 } else { 1 };
            for i in (0..len).step_by(step) {
                let orig = model.params.tensors_mut()[ti][i];
                model.params.tensors_mut()[ti][i] = orig + eps;
                let lp = model.run(&pieces, &targets, &extra, GradMode::None).unwrap().loss;
                model.params.tensors_mut()[ti][i] = orig - eps;
                let lm = model.run(&pieces, &targets, &extra, GradMode::None).unwrap().loss;
                model.params.tensors_mut()[ti][i] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let a = analytic[ti][i];
                assert!(
                    (a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1e-2),
                    "{name}[{i}]: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn capacity_and_bad_ids() {
        let model = BaseModel::random(tiny(), 1).unwrap();
        let long = vec![Piece::Token(1); 17];
        assert!(matches!(model.embed(&long), Err(Error::Capacity { .. })));
        assert!(model.embed(&[Piece::Token(999)]).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
