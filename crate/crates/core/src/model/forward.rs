//! Inference forward pass with trace capture and activation patching.
//!
//! Each block is pre-norm:
//!
//! ```text
//! attn_out  = Σ_j a_j + b_O        a_j = head j's value output × its slice of W_O
//! mid       = resid_in + attn_out
//! mlp_out   = MLP(norm(mid))
//! resid_out = mid + mlp_out
//! ```
//!
//! Interventions rewrite `resid_out` (or a head contribution inside
//! `attn_out`) at one position as `h ← α·h + λ·v`, before the next block reads it.

use std::collections::HashSet;

use super::config::{ModelConfig, PositionalScheme};
use super::vocab::TokenSequence;
use super::weights::{BlockLayout, Layout, MlpLayout, ModelWeights};
use crate::error::{Error, Result};
use crate::linalg::{self, gemm, MatMut, MatRef};

/// Where an intervention lands within the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionRule {
    LastToken,
    Absolute(usize),
}

impl PositionRule {
    pub fn resolve(self, len: usize) -> Result<usize> {
        match self {
            PositionRule::LastToken if len > 0 => Ok(len - 1),
            PositionRule::LastToken => Err(Error::Intervention("empty sequence".into())),
            PositionRule::Absolute(p) if p < len => Ok(p),
            PositionRule::Absolute(p) => Err(Error::Intervention(format!(
                "position {p} outside sequence of length {len}"
            ))),
        }
    }
}

/// What an intervention overwrites.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchTarget {
    /// The block output `h_ℓ`.
    Residual(Vec<f32>),
    /// Individual head contributions `a_{ℓj}`, keyed by head index.
    Heads(Vec<(usize, Vec<f32>)>),
}

/// `h ← α·h + λ·v` at one layer and position.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    pub position: PositionRule,
    pub alpha: f32,
    pub lambda: f32,
    pub target: PatchTarget,
}

impl Intervention {
    pub fn residual(layer: usize, position: PositionRule, alpha: f32, lambda: f32, v: Vec<f32>) -> Self {
        Intervention {
            layer,
            position,
            alpha,
            lambda,
            target: PatchTarget::Residual(v),
        }
    }

    /// Replace head contributions outright (α = 0, λ = 1).
    pub fn replace_heads(layer: usize, position: PositionRule, heads: Vec<(usize, Vec<f32>)>) -> Self {
        Intervention {
            layer,
            position,
            alpha: 0.0,
            lambda: 1.0,
            target: PatchTarget::Heads(heads),
        }
    }
}

/// Captured activations of one block at the captured positions.
///
/// `resid_out` is the block output before any intervention at that layer; the
/// next block's `resid_in` shows the patched value.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub resid_in: Vec<Vec<f32>>,
    pub attn_out: Vec<Vec<f32>>,
    pub mlp_out: Vec<Vec<f32>>,
    pub resid_out: Vec<Vec<f32>>,
    /// `heads[c][j]` is head `j`'s residual-stream contribution at capture `c`.
    pub heads: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub positions: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

impl HiddenTrace {
    /// Index of `position` among the captured positions.
    pub fn slot(&self, position: usize) -> Option<usize> {
        self.positions.iter().position(|&p| p == position)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Row-major `(positions, vocab_size)`.
    pub logits: Vec<f32>,
    pub vocab_size: usize,
    pub trace: HiddenTrace,
}

impl ForwardOutput {
    pub fn logits_at(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }

    pub fn last_logits(&self) -> &[f32] {
        let n = self.logits.len() / self.vocab_size;
        self.logits_at(n - 1)
    }
}

/// Block inputs of every layer at every position, for resuming a forward pass.
#[derive(Debug, Clone)]
pub struct ResidualCache {
    pub len: usize,
    /// `inputs[ℓ]` is the `(len, hidden_dim)` input of block ℓ.
    pub inputs: Vec<Vec<f32>>,
}

/// A validated (config, weights) pair ready for inference.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    weights: ModelWeights,
    layout: Layout,
}

struct Site {
    position: usize,
    alpha: f32,
    lambda: f32,
    target: PatchTarget,
}

impl Transformer {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        let layout = weights.layout(&config)?;
        Ok(Transformer {
            config,
            weights,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    fn w(&self, i: usize) -> &[f32] {
        &self.weights.tensors[i].data
    }

    /// Output bias of block `layer`'s attention.
    pub fn attn_bias(&self, layer: usize) -> &[f32] {
        self.w(self.layout.blocks[layer].b_o)
    }

    pub fn final_norm_gain(&self) -> &[f32] {
        self.w(self.layout.final_gain)
    }

    /// `(hidden_dim, vocab_size)` unembedding matrix.
    pub fn unembed(&self) -> &[f32] {
        self.w(self.layout.unembed)
    }

    pub fn forward(&self, tokens: &TokenSequence, capture: &[usize]) -> Result<ForwardOutput> {
        self.forward_with_interventions(tokens, &[], capture)
    }

    pub fn forward_with_interventions(
        &self,
        tokens: &TokenSequence,
        interventions: &[Intervention],
        capture: &[usize],
    ) -> Result<ForwardOutput> {
        let x = self.embed(tokens)?;
        let sites = self.resolve(tokens.len(), interventions)?;
        let (out, _) = self.run(x, tokens.len(), 0, &sites, capture, false)?;
        Ok(out)
    }

    /// Plain forward pass that also returns every block input for later resumption.
    pub fn forward_cached(&self, tokens: &TokenSequence, capture: &[usize]) -> Result<(ForwardOutput, ResidualCache)> {
        let x = self.embed(tokens)?;
        let (out, inputs) = self.run(x, tokens.len(), 0, &self.resolve(tokens.len(), &[])?, capture, true)?;
        Ok((
            out,
            ResidualCache {
                len: tokens.len(),
                inputs,
            },
        ))
    }

    /// Re-run blocks `start..` from cached inputs with interventions applied.
    ///
    /// Every intervention must target a layer `>= start`. The result is
    /// bit-identical to a full `forward_with_interventions` on the same tokens.
    pub fn resume(
        &self,
        cache: &ResidualCache,
        start: usize,
        interventions: &[Intervention],
        capture: &[usize],
    ) -> Result<ForwardOutput> {
        if start >= self.config.n_layers || cache.inputs.len() != self.config.n_layers {
            return Err(Error::Intervention(format!("cannot resume at layer {start}")));
        }
        if let Some(iv) = interventions.iter().find(|iv| iv.layer < start) {
            return Err(Error::Intervention(format!(
                "intervention at layer {} precedes resume layer {start}",
                iv.layer
            )));
        }
        let sites = self.resolve(cache.len, interventions)?;
        let (out, _) = self.run(cache.inputs[start].clone(), cache.len, start, &sites, capture, false)?;
        Ok(out)
    }

    fn embed(&self, tokens: &TokenSequence) -> Result<Vec<f32>> {
        let c = &self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Length {
                len: 0,
                context_len: c.context_len,
            });
        }
        if t > c.context_len {
            return Err(Error::Length {
                len: t,
                context_len: c.context_len,
            });
        }
        let d = c.hidden_dim;
        let emb = self.w(self.layout.tok_embed);
        let mut x = vec![0.0; t * d];
        for (p, &id) in tokens.ids.iter().enumerate() {
            if id as usize >= c.vocab_size {
                return Err(Error::TokenId {
                    id,
                    vocab_size: c.vocab_size,
                });
            }
            x[p * d..(p + 1) * d].copy_from_slice(&emb[id as usize * d..(id as usize + 1) * d]);
        }
        if let Some(pe) = self.layout.pos_embed {
            let pe = self.w(pe);
            for (v, e) in x.iter_mut().zip(pe) {
                *v += e;
            }
        }
        Ok(x)
    }

    fn resolve(&self, len: usize, interventions: &[Intervention]) -> Result<Vec<Vec<Site>>> {
        let c = &self.config;
        let mut per_layer: Vec<Vec<Site>> = (0..c.n_layers).map(|_| Vec::new()).collect();
        let mut seen = HashSet::new();
        for iv in interventions {
            if iv.layer >= c.n_layers {
                return Err(Error::Intervention(format!(
                    "layer {} out of range for {} layers",
                    iv.layer, c.n_layers
                )));
            }
            let position = iv.position.resolve(len)?;
            match &iv.target {
                PatchTarget::Residual(v) => {
                    if v.len() != c.hidden_dim {
                        return Err(Error::Intervention(format!(
                            "vector has {} entries, hidden_dim is {}",
                            v.len(),
                            c.hidden_dim
                        )));
                    }
                    if !seen.insert((iv.layer, position, None)) {
                        return Err(Error::Intervention(format!(
                            "conflicting residual interventions at layer {} position {position}",
                            iv.layer
                        )));
                    }
                }
                PatchTarget::Heads(heads) => {
                    for (h, v) in heads {
                        if *h >= c.n_heads || v.len() != c.hidden_dim {
                            return Err(Error::Intervention(format!("bad head patch for head {h}")));
                        }
                        if !seen.insert((iv.layer, position, Some(*h))) {
                            return Err(Error::Intervention(format!(
                                "conflicting patches of head ({}, {h}) at position {position}",
                                iv.layer
                            )));
                        }
                    }
                }
            }
            per_layer[iv.layer].push(Site {
                position,
                alpha: iv.alpha,
                lambda: iv.lambda,
                target: iv.target.clone(),
            });
        }
        Ok(per_layer)
    }

    fn run(
        &self,
        mut x: Vec<f32>,
        t: usize,
        start: usize,
        sites: &[Vec<Site>],
        capture: &[usize],
        keep_inputs: bool,
    ) -> Result<(ForwardOutput, Vec<Vec<f32>>)> {
        let c = &self.config;
        if let Some(&p) = capture.iter().find(|&&p| p >= t) {
            return Err(Error::Intervention(format!(
                "capture position {p} outside sequence of length {t}"
            )));
        }
        let d = c.hidden_dim;
        let rope = self.rope_table(t);
        let mut layers = Vec::with_capacity(c.n_layers);
        let mut inputs = Vec::new();
        for l in start..c.n_layers {
            if keep_inputs {
                inputs.push(x.clone());
            }
            let block = &self.layout.blocks[l];
            let (mut attn_out, z) = self.attention(block, &x, t, rope.as_ref());

            let heads_at = |p: usize| -> Vec<Vec<f32>> {
                (0..c.n_heads).map(|h| self.head_contribution(block, &z, p, h)).collect()
            };
            let head_trace: Vec<Vec<Vec<f32>>> = capture.iter().map(|&p| heads_at(p)).collect();

            for site in &sites[l] {
                if let PatchTarget::Heads(patches) = &site.target {
                    let row = &mut attn_out[site.position * d..(site.position + 1) * d];
                    for (h, v) in patches {
                        let a = self.head_contribution(block, &z, site.position, *h);
                        for ((o, av), vv) in row.iter_mut().zip(&a).zip(v) {
                            let patched = site.alpha * av + site.lambda * vv;
                            *o += patched - av;
                        }
                    }
                }
            }

            let mut mid = x.clone();
            for (m, a) in mid.iter_mut().zip(&attn_out) {
                *m += a;
            }
            let mlp_out = self.mlp(block, &mid, t);
            let mut out = mid;
            for (o, m) in out.iter_mut().zip(&mlp_out) {
                *o += m;
            }

            let row = |buf: &[f32], p: usize| buf[p * d..(p + 1) * d].to_vec();
            layers.push(LayerTrace {
                resid_in: capture.iter().map(|&p| row(&x, p)).collect(),
                attn_out: capture.iter().map(|&p| row(&attn_out, p)).collect(),
                mlp_out: capture.iter().map(|&p| row(&mlp_out, p)).collect(),
                resid_out: capture.iter().map(|&p| row(&out, p)).collect(),
                heads: head_trace,
            });

            for site in &sites[l] {
                if let PatchTarget::Residual(v) = &site.target {
                    let row = &mut out[site.position * d..(site.position + 1) * d];
                    for (h, vv) in row.iter_mut().zip(v) {
                        *h = site.alpha * *h + site.lambda * vv;
                    }
                }
            }
            x = out;
        }

        let logits = self.project(&x, t);
        Ok((
            ForwardOutput {
                logits,
                vocab_size: c.vocab_size,
                trace: HiddenTrace {
                    positions: capture.to_vec(),
                    layers,
                },
            },
            inputs,
        ))
    }

    /// Final norm followed by the unembedding, for `t` stacked hidden states.
    pub(crate) fn project(&self, x: &[f32], t: usize) -> Vec<f32> {
        let c = &self.config;
        let mut normed = vec![0.0; x.len()];
        linalg::rms_norm(x, self.final_norm_gain(), c.norm_eps, &mut normed);
        linalg::matmul(
            MatRef::new(&normed, t, c.hidden_dim),
            MatRef::new(self.unembed(), c.hidden_dim, c.vocab_size),
        )
    }

    pub(crate) fn rope_table(&self, t: usize) -> Option<RopeTable> {
        match self.config.positional {
            PositionalScheme::Rotary { theta } => Some(RopeTable::new(t, self.config.head_size, theta)),
            PositionalScheme::Learned => None,
        }
    }

    /// Returns `(attn_out, z)` where `z` is the concatenated per-head value output.
    fn attention(&self, block: &BlockLayout, x: &[f32], t: usize, rope: Option<&RopeTable>) -> (Vec<f32>, Vec<f32>) {
        let c = &self.config;
        let (d, hs) = (c.hidden_dim, c.head_size);
        let mut n1 = vec![0.0; x.len()];
        linalg::rms_norm(x, self.w(block.attn_gain), c.norm_eps, &mut n1);
        let n1m = MatRef::new(&n1, t, d);
        let mut q = linalg::matmul(n1m, MatRef::new(self.w(block.w_q), d, d));
        let mut k = linalg::matmul(n1m, MatRef::new(self.w(block.w_k), d, d));
        let v = linalg::matmul(n1m, MatRef::new(self.w(block.w_v), d, d));
        if let Some(rope) = rope {
            rope.apply(&mut q, c.n_heads);
            rope.apply(&mut k, c.n_heads);
        }
        let scale = 1.0 / (hs as f32).sqrt();
        let mut z = vec![0.0; t * d];
        let mut scores = vec![0.0; t * t];
        for h in 0..c.n_heads {
            gemm(
                MatRef::block(&q, t, d, h * hs, hs),
                MatRef::block(&k, t, d, h * hs, hs).t(),
                MatMut::new(&mut scores, t, t),
                0.0,
            );
            causal_softmax(&mut scores, t, scale);
            gemm(
                MatRef::new(&scores, t, t),
                MatRef::block(&v, t, d, h * hs, hs),
                MatMut::block(&mut z, t, d, h * hs, hs),
                0.0,
            );
        }
        let mut out = linalg::matmul(MatRef::new(&z, t, d), MatRef::new(self.w(block.w_o), d, d));
        let b_o = self.w(block.b_o);
        for row in out.chunks_exact_mut(d) {
            for (o, b) in row.iter_mut().zip(b_o) {
                *o += b;
            }
        }
        (out, z)
    }

    /// Head `h`'s contribution to the residual stream at position `p`.
    fn head_contribution(&self, block: &BlockLayout, z: &[f32], p: usize, h: usize) -> Vec<f32> {
        let (d, hs) = (self.config.hidden_dim, self.config.head_size);
        let w_o = self.w(block.w_o);
        let mut out = vec![0.0; d];
        for i in 0..hs {
            let zi = z[p * d + h * hs + i];
            let w_row = &w_o[(h * hs + i) * d..(h * hs + i + 1) * d];
            for (o, w) in out.iter_mut().zip(w_row) {
                *o += zi * w;
            }
        }
        out
    }

    fn mlp(&self, block: &BlockLayout, mid: &[f32], t: usize) -> Vec<f32> {
        let c = &self.config;
        let (d, m) = (c.hidden_dim, c.mlp_size);
        let mut n2 = vec![0.0; mid.len()];
        linalg::rms_norm(mid, self.w(block.mlp_gain), c.norm_eps, &mut n2);
        let n2m = MatRef::new(&n2, t, d);
        match block.mlp {
            MlpLayout::Gelu {
                w_in,
                b_in,
                w_out,
                b_out,
            } => {
                let mut hidden = linalg::matmul(n2m, MatRef::new(self.w(w_in), d, m));
                let b = self.w(b_in);
                for row in hidden.chunks_exact_mut(m) {
                    for (v, bb) in row.iter_mut().zip(b) {
                        *v = linalg::gelu(*v + bb);
                    }
                }
                let mut out = linalg::matmul(MatRef::new(&hidden, t, m), MatRef::new(self.w(w_out), m, d));
                let b = self.w(b_out);
                for row in out.chunks_exact_mut(d) {
                    for (v, bb) in row.iter_mut().zip(b) {
                        *v += bb;
                    }
                }
                out
            }
            MlpLayout::Swiglu { w_gate, w_up, w_down } => {
                let mut gate = linalg::matmul(n2m, MatRef::new(self.w(w_gate), d, m));
                let up = linalg::matmul(n2m, MatRef::new(self.w(w_up), d, m));
                for (g, u) in gate.iter_mut().zip(&up) {
                    *g = linalg::silu(*g) * u;
                }
                linalg::matmul(MatRef::new(&gate, t, m), MatRef::new(self.w(w_down), m, d))
            }
        }
    }
}

/// Scale, mask and softmax a `(t, t)` score matrix in place.
pub(crate) fn causal_softmax(scores: &mut [f32], t: usize, scale: f32) {
    for i in 0..t {
        let row = &mut scores[i * t..(i + 1) * t];
        for v in row[..=i].iter_mut() {
            *v *= scale;
        }
        linalg::softmax_in_place(&mut row[..=i]);
        row[i + 1..].fill(0.0);
    }
}

/// Rotary cos/sin table over positions `0..t`.
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub(crate) fn new(t: usize, head_size: usize, theta: f32) -> Self {
        let half = head_size / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for p in 0..t {
            for i in 0..half {
                let freq = (theta as f64).powf(-2.0 * i as f64 / head_size as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        RopeTable { half, cos, sin }
    }

    /// Rotate `(x_i, x_{i+half})` pairs of every head. `x` is `(t, n_heads·head_size)`.
    pub(crate) fn apply(&self, x: &mut [f32], n_heads: usize) {
        self.rotate(x, n_heads, 1.0);
    }

    /// The inverse rotation, used to pull gradients back through `apply`.
    pub(crate) fn apply_inverse(&self, x: &mut [f32], n_heads: usize) {
        self.rotate(x, n_heads, -1.0);
    }

    fn rotate(&self, x: &mut [f32], n_heads: usize, sign: f32) {
        let hs = 2 * self.half;
        let d = n_heads * hs;
        for (p, row) in x.chunks_exact_mut(d).enumerate() {
            let cos = &self.cos[p * self.half..(p + 1) * self.half];
            let sin = &self.sin[p * self.half..(p + 1) * self.half];
            for h in 0..n_heads {
                let head = &mut row[h * hs..(h + 1) * hs];
                for i in 0..self.half {
                    let (a, b) = (head[i], head[i + self.half]);
                    let s = sign * sin[i];
                    head[i] = a * cos[i] - b * s;
                    head[i + self.half] = a * s + b * cos[i];
                }
            }
        }
    }
}
