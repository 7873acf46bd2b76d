//! Packed batch forward pass with a hand-written backward pass.
//!
//! All episodes of a batch are stacked into one `(N, D)` row matrix so the
//! weight projections run as single GEMMs; attention runs per episode and head.
//! Logits are only formed at supervised rows.

use super::episodes::Episode;
use crate::error::{Error, Result};
use crate::linalg::{self, gemm, MatMut, MatRef};
use crate::model::{BlockLayout, Layout, MlpLayout, ModelConfig, ModelWeights, RopeTable};

struct Packed {
    n: usize,
    /// `(first row, length)` of each episode.
    spans: Vec<(usize, usize)>,
    ids: Vec<u32>,
    positions: Vec<usize>,
    /// `(row, target id)`.
    targets: Vec<(usize, u32)>,
}

fn pack(config: &ModelConfig, episodes: &[Episode]) -> Result<Packed> {
    let mut p = Packed {
        n: 0,
        spans: Vec::new(),
        ids: Vec::new(),
        positions: Vec::new(),
        targets: Vec::new(),
    };
    for ep in episodes {
        let t = ep.tokens.len();
        if t == 0 || t > config.context_len {
            return Err(Error::Length {
                len: t,
                context_len: config.context_len,
            });
        }
        for &id in &ep.tokens.ids {
            if id as usize >= config.vocab_size {
                return Err(Error::TokenId {
                    id,
                    vocab_size: config.vocab_size,
                });
            }
        }
        for &(pos, y) in &ep.targets {
            if pos >= t || y as usize >= config.vocab_size {
                return Err(Error::Sampling(format!("bad target ({pos}, {y})")));
            }
            p.targets.push((p.n + pos, y));
        }
        p.spans.push((p.n, t));
        p.ids.extend_from_slice(&ep.tokens.ids);
        p.positions.extend(0..t);
        p.n += t;
    }
    if p.targets.is_empty() {
        return Err(Error::Sampling("batch has no supervised positions".into()));
    }
    Ok(p)
}

enum MlpCache {
    Gelu { pre: Vec<f32>, act: Vec<f32> },
    Swiglu { gate: Vec<f32>, up: Vec<f32>, act: Vec<f32> },
}

struct LayerCache {
    x: Vec<f32>,
    inv1: Vec<f32>,
    n1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `probs[e * n_heads + h]` is the `(t_e, t_e)` attention pattern.
    probs: Vec<Vec<f32>>,
    z: Vec<f32>,
    mid: Vec<f32>,
    inv2: Vec<f32>,
    n2: Vec<f32>,
    mlp: MlpCache,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    inv_final: Vec<f32>,
    /// Final-normed rows at the supervised positions, `(T, D)`.
    normed_targets: Vec<f32>,
    /// `(T, V)` logits at the supervised positions.
    logits: Vec<f32>,
}

struct Net<'a> {
    c: &'a ModelConfig,
    w: &'a ModelWeights,
    layout: Layout,
}

impl<'a> Net<'a> {
    fn new(c: &'a ModelConfig, w: &'a ModelWeights) -> Result<Self> {
        Ok(Net { c, w, layout: w.layout(c)? })
    }

    fn t(&self, i: usize) -> &[f32] {
        &self.w.tensors[i].data
    }

    fn rope(&self, max_len: usize) -> Option<RopeTable> {
        match self.c.positional {
            crate::model::PositionalScheme::Rotary { theta } => Some(RopeTable::new(max_len, self.c.head_size, theta)),
            crate::model::PositionalScheme::Learned => None,
        }
    }

    fn forward(&self, p: &Packed) -> ForwardCache {
        let c = self.c;
        let (d, hs, nh) = (c.hidden_dim, c.head_size, c.n_heads);
        let n = p.n;
        let max_len = p.spans.iter().map(|s| s.1).max().unwrap_or(0);
        let rope = self.rope(max_len);

        let emb = self.t(self.layout.tok_embed);
        let mut x = vec![0.0; n * d];
        for (r, &id) in p.ids.iter().enumerate() {
            x[r * d..(r + 1) * d].copy_from_slice(&emb[id as usize * d..(id as usize + 1) * d]);
        }
        if let Some(pe) = self.layout.pos_embed {
            let pe = self.t(pe);
            for (r, &pos) in p.positions.iter().enumerate() {
                for (v, e) in x[r * d..(r + 1) * d].iter_mut().zip(&pe[pos * d..(pos + 1) * d]) {
                    *v += e;
                }
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for block in &self.layout.blocks {
            let mut n1 = vec![0.0; n * d];
            let inv1 = linalg::rms_norm(&x, self.t(block.attn_gain), c.norm_eps, &mut n1);
            let n1m = MatRef::new(&n1, n, d);
            let mut q = linalg::matmul(n1m, MatRef::new(self.t(block.w_q), d, d));
            let mut k = linalg::matmul(n1m, MatRef::new(self.t(block.w_k), d, d));
            let v = linalg::matmul(n1m, MatRef::new(self.t(block.w_v), d, d));
            if let Some(rope) = &rope {
                for &(s, t) in &p.spans {
                    rope.apply(&mut q[s * d..(s + t) * d], nh);
                    rope.apply(&mut k[s * d..(s + t) * d], nh);
                }
            }
            let scale = 1.0 / (hs as f32).sqrt();
            let mut z = vec![0.0; n * d];
            let mut probs = Vec::with_capacity(p.spans.len() * nh);
            for &(s, t) in &p.spans {
                let rows = s * d..(s + t) * d;
                for h in 0..nh {
                    let mut scores = vec![0.0; t * t];
                    gemm(
                        MatRef::block(&q[rows.clone()], t, d, h * hs, hs),
                        MatRef::block(&k[rows.clone()], t, d, h * hs, hs).t(),
                        MatMut::new(&mut scores, t, t),
                        0.0,
                    );
                    crate::model::causal_softmax(&mut scores, t, scale);
                    gemm(
                        MatRef::new(&scores, t, t),
                        MatRef::block(&v[rows.clone()], t, d, h * hs, hs),
                        MatMut::block(&mut z[rows.clone()], t, d, h * hs, hs),
                        0.0,
                    );
                    probs.push(scores);
                }
            }
            let mut mid = linalg::matmul(MatRef::new(&z, n, d), MatRef::new(self.t(block.w_o), d, d));
            add_rows(&mut mid, self.t(block.b_o));
            for (m, xv) in mid.iter_mut().zip(&x) {
                *m += xv;
            }

            let mut n2 = vec![0.0; n * d];
            let inv2 = linalg::rms_norm(&mid, self.t(block.mlp_gain), c.norm_eps, &mut n2);
            let (mlp_out, mlp) = self.mlp_forward(block, &n2, n);
            let mut out = mid.clone();
            for (o, m) in out.iter_mut().zip(&mlp_out) {
                *o += m;
            }
            layers.push(LayerCache {
                x: std::mem::replace(&mut x, out),
                inv1,
                n1,
                q,
                k,
                v,
                probs,
                z,
                mid,
                inv2,
                n2,
                mlp,
            });
        }

        let mut normed = vec![0.0; n * d];
        let inv_final = linalg::rms_norm(&x, self.t(self.layout.final_gain), c.norm_eps, &mut normed);
        let nt = p.targets.len();
        let mut normed_targets = Vec::with_capacity(nt * d);
        for &(r, _) in &p.targets {
            normed_targets.extend_from_slice(&normed[r * d..(r + 1) * d]);
        }
        let logits = linalg::matmul(
            MatRef::new(&normed_targets, nt, d),
            MatRef::new(self.t(self.layout.unembed), d, c.vocab_size),
        );
        ForwardCache {
            layers,
            x_final: x,
            inv_final,
            normed_targets,
            logits,
        }
    }

    fn mlp_forward(&self, block: &BlockLayout, n2: &[f32], n: usize) -> (Vec<f32>, MlpCache) {
        let (d, m) = (self.c.hidden_dim, self.c.mlp_size);
        let n2m = MatRef::new(n2, n, d);
        match block.mlp {
            MlpLayout::Gelu {
                w_in,
                b_in,
                w_out,
                b_out,
            } => {
                let mut pre = linalg::matmul(n2m, MatRef::new(self.t(w_in), d, m));
                add_rows(&mut pre, self.t(b_in));
                let act: Vec<f32> = pre.iter().map(|&v| linalg::gelu(v)).collect();
                let mut out = linalg::matmul(MatRef::new(&act, n, m), MatRef::new(self.t(w_out), m, d));
                add_rows(&mut out, self.t(b_out));
                (out, MlpCache::Gelu { pre, act })
            }
            MlpLayout::Swiglu { w_gate, w_up, w_down } => {
                let gate = linalg::matmul(n2m, MatRef::new(self.t(w_gate), d, m));
                let up = linalg::matmul(n2m, MatRef::new(self.t(w_up), d, m));
                let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| linalg::silu(g) * u).collect();
                let out = linalg::matmul(MatRef::new(&act, n, m), MatRef::new(self.t(w_down), m, d));
                (out, MlpCache::Swiglu { gate, up, act })
            }
        }
    }

    /// Mean cross-entropy over the supervised rows, accumulated in f64.
    fn loss(&self, p: &Packed, cache: &ForwardCache) -> f32 {
        let v = self.c.vocab_size;
        let total: f64 = p
            .targets
            .iter()
            .enumerate()
            .map(|(i, &(_, y))| -linalg::log_softmax64(&cache.logits[i * v..(i + 1) * v])[y as usize])
            .sum();
        (total / p.targets.len() as f64) as f32
    }

    fn backward(&self, p: &Packed, cache: ForwardCache, grads: &mut ModelWeights) {
        let c = self.c;
        let (d, hs, nh, vs) = (c.hidden_dim, c.head_size, c.n_heads, c.vocab_size);
        let n = p.n;
        let nt = p.targets.len();

        let mut dlogits = vec![0.0f32; nt * vs];
        for (i, &(_, y)) in p.targets.iter().enumerate() {
            let probs = linalg::softmax64(&cache.logits[i * vs..(i + 1) * vs]);
            for (j, pr) in probs.iter().enumerate() {
                let t = if j == y as usize { 1.0 } else { 0.0 };
                dlogits[i * vs + j] = ((pr - t) / nt as f64) as f32;
            }
        }
        gemm(
            MatRef::new(&cache.normed_targets, nt, d).t(),
            MatRef::new(&dlogits, nt, vs),
            MatMut::new(&mut grads.tensors[self.layout.unembed].data, d, vs),
            1.0,
        );
        let dnt = linalg::matmul(
            MatRef::new(&dlogits, nt, vs),
            MatRef::new(self.t(self.layout.unembed), d, vs).t(),
        );
        let mut dnormed = vec![0.0; n * d];
        for (i, &(r, _)) in p.targets.iter().enumerate() {
            for (a, b) in dnormed[r * d..(r + 1) * d].iter_mut().zip(&dnt[i * d..(i + 1) * d]) {
                *a += b;
            }
        }
        let mut dx = vec![0.0; n * d];
        rms_norm_backward(
            &cache.x_final,
            self.t(self.layout.final_gain),
            &cache.inv_final,
            &dnormed,
            &mut dx,
            &mut grads.tensors[self.layout.final_gain].data,
        );

        let max_len = p.spans.iter().map(|s| s.1).max().unwrap_or(0);
        let rope = self.rope(max_len);
        for (l, lc) in cache.layers.into_iter().enumerate().rev() {
            let block = &self.layout.blocks[l];
            // dx is d(loss)/d(block output); out = mid + mlp(norm(mid)).
            let mut dmid = dx;
            let dn2 = self.mlp_backward(block, &lc, &dmid, n, grads);
            rms_norm_backward(
                &lc.mid,
                self.t(block.mlp_gain),
                &lc.inv2,
                &dn2,
                &mut dmid,
                &mut grads.tensors[block.mlp_gain].data,
            );

            // mid = x + z·W_O + b_O.
            sum_rows_into(&dmid, &mut grads.tensors[block.b_o].data);
            gemm(
                MatRef::new(&lc.z, n, d).t(),
                MatRef::new(&dmid, n, d),
                MatMut::new(&mut grads.tensors[block.w_o].data, d, d),
                1.0,
            );
            let dz = linalg::matmul(MatRef::new(&dmid, n, d), MatRef::new(self.t(block.w_o), d, d).t());

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let scale = 1.0 / (hs as f32).sqrt();
            for (e, &(s, t)) in p.spans.iter().enumerate() {
                let rows = s * d..(s + t) * d;
                for h in 0..nh {
                    let probs = &lc.probs[e * nh + h];
                    let mut dp = vec![0.0; t * t];
                    gemm(
                        MatRef::block(&dz[rows.clone()], t, d, h * hs, hs),
                        MatRef::block(&lc.v[rows.clone()], t, d, h * hs, hs).t(),
                        MatMut::new(&mut dp, t, t),
                        0.0,
                    );
                    gemm(
                        MatRef::new(probs, t, t).t(),
                        MatRef::block(&dz[rows.clone()], t, d, h * hs, hs),
                        MatMut::block(&mut dv[rows.clone()], t, d, h * hs, hs),
                        0.0,
                    );
                    for i in 0..t {
                        let pr = &probs[i * t..i * t + i + 1];
                        let row = &mut dp[i * t..(i + 1) * t];
                        let inner: f32 = pr.iter().zip(&row[..=i]).map(|(a, b)| a * b).sum();
                        for (dv_, pv) in row[..=i].iter_mut().zip(pr) {
                            *dv_ = pv * (*dv_ - inner) * scale;
                        }
                        row[i + 1..].fill(0.0);
                    }
                    gemm(
                        MatRef::new(&dp, t, t),
                        MatRef::block(&lc.k[rows.clone()], t, d, h * hs, hs),
                        MatMut::block(&mut dq[rows.clone()], t, d, h * hs, hs),
                        0.0,
                    );
                    gemm(
                        MatRef::new(&dp, t, t).t(),
                        MatRef::block(&lc.q[rows.clone()], t, d, h * hs, hs),
                        MatMut::block(&mut dk[rows.clone()], t, d, h * hs, hs),
                        0.0,
                    );
                }
            }
            if let Some(rope) = &rope {
                for &(s, t) in &p.spans {
                    rope.apply_inverse(&mut dq[s * d..(s + t) * d], nh);
                    rope.apply_inverse(&mut dk[s * d..(s + t) * d], nh);
                }
            }
            let n1t = MatRef::new(&lc.n1, n, d).t();
            for (dproj, wi) in [(&dq, block.w_q), (&dk, block.w_k), (&dv, block.w_v)] {
                gemm(n1t, MatRef::new(dproj, n, d), MatMut::new(&mut grads.tensors[wi].data, d, d), 1.0);
            }
            let mut dn1 = vec![0.0; n * d];
            for (i, (dproj, wi)) in [(&dq, block.w_q), (&dk, block.w_k), (&dv, block.w_v)].into_iter().enumerate() {
                gemm(
                    MatRef::new(dproj, n, d),
                    MatRef::new(self.t(wi), d, d).t(),
                    MatMut::new(&mut dn1, n, d),
                    if i == 0 { 0.0 } else { 1.0 },
                );
            }
            let mut dx_next = dmid;
            rms_norm_backward(
                &lc.x,
                self.t(block.attn_gain),
                &lc.inv1,
                &dn1,
                &mut dx_next,
                &mut grads.tensors[block.attn_gain].data,
            );
            dx = dx_next;
        }

        let demb = &mut grads.tensors[self.layout.tok_embed].data;
        for (r, &id) in p.ids.iter().enumerate() {
            let id = id as usize;
            for (a, b) in demb[id * d..(id + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *a += b;
            }
        }
        if let Some(pe) = self.layout.pos_embed {
            let dpe = &mut grads.tensors[pe].data;
            for (r, &pos) in p.positions.iter().enumerate() {
                for (a, b) in dpe[pos * d..(pos + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                    *a += b;
                }
            }
        }
    }

    /// Accumulates MLP weight gradients; returns d(loss)/d(norm(mid)).
    fn mlp_backward(&self, block: &BlockLayout, lc: &LayerCache, dout: &[f32], n: usize, grads: &mut ModelWeights) -> Vec<f32> {
        let (d, m) = (self.c.hidden_dim, self.c.mlp_size);
        let n2t = MatRef::new(&lc.n2, n, d).t();
        match (&block.mlp, &lc.mlp) {
            (
                &MlpLayout::Gelu {
                    w_in,
                    b_in,
                    w_out,
                    b_out,
                },
                MlpCache::Gelu { pre, act },
            ) => {
                sum_rows_into(dout, &mut grads.tensors[b_out].data);
                gemm(
                    MatRef::new(act, n, m).t(),
                    MatRef::new(dout, n, d),
                    MatMut::new(&mut grads.tensors[w_out].data, m, d),
                    1.0,
                );
                let mut dpre = linalg::matmul(MatRef::new(dout, n, d), MatRef::new(self.t(w_out), m, d).t());
                for (g, &x) in dpre.iter_mut().zip(pre) {
                    *g *= linalg::gelu_grad(x);
                }
                sum_rows_into(&dpre, &mut grads.tensors[b_in].data);
                gemm(n2t, MatRef::new(&dpre, n, m), MatMut::new(&mut grads.tensors[w_in].data, d, m), 1.0);
                linalg::matmul(MatRef::new(&dpre, n, m), MatRef::new(self.t(w_in), d, m).t())
            }
            (&MlpLayout::Swiglu { w_gate, w_up, w_down }, MlpCache::Swiglu { gate, up, act }) => {
                gemm(
                    MatRef::new(act, n, m).t(),
                    MatRef::new(dout, n, d),
                    MatMut::new(&mut grads.tensors[w_down].data, m, d),
                    1.0,
                );
                let dact = linalg::matmul(MatRef::new(dout, n, d), MatRef::new(self.t(w_down), m, d).t());
                let mut dgate = vec![0.0; n * m];
                let mut dup = vec![0.0; n * m];
                for i in 0..n * m {
                    dgate[i] = dact[i] * up[i] * linalg::silu_grad(gate[i]);
                    dup[i] = dact[i] * linalg::silu(gate[i]);
                }
                gemm(n2t, MatRef::new(&dgate, n, m), MatMut::new(&mut grads.tensors[w_gate].data, d, m), 1.0);
                gemm(n2t, MatRef::new(&dup, n, m), MatMut::new(&mut grads.tensors[w_up].data, d, m), 1.0);
                let mut dn2 = linalg::matmul(MatRef::new(&dgate, n, m), MatRef::new(self.t(w_gate), d, m).t());
                gemm(
                    MatRef::new(&dup, n, m),
                    MatRef::new(self.t(w_up), d, m).t(),
                    MatMut::new(&mut dn2, n, d),
                    1.0,
                );
                dn2
            }
            _ => unreachable!("cache built from the same layout"),
        }
    }
}

fn add_rows(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_into(x: &[f32], acc: &mut [f32]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

/// Backward of `y = x · inv · gain` with `inv = (mean(x²) + eps)^{-1/2}`.
fn rms_norm_backward(x: &[f32], gain: &[f32], inv: &[f32], dy: &[f32], dx: &mut [f32], dgain: &mut [f32]) {
    let d = gain.len();
    for (r, &s) in inv.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let dot: f32 = xr.iter().zip(dyr).zip(gain).map(|((a, b), g)| a * b * g).sum();
        let coef = s * s * s * dot / d as f32;
        for i in 0..d {
            dx[r * d + i] += s * gain[i] * dyr[i] - coef * xr[i];
            dgain[i] += dyr[i] * xr[i] * s;
        }
    }
}

/// Mean next-token cross-entropy over every supervised position of `episodes`.
pub fn batch_loss(config: &ModelConfig, weights: &ModelWeights, episodes: &[Episode]) -> Result<f32> {
    let net = Net::new(config, weights)?;
    let p = pack(config, episodes)?;
    let cache = net.forward(&p);
    Ok(net.loss(&p, &cache))
}

/// Loss plus its gradient, accumulated into `grads` (which must match `weights`).
pub fn batch_loss_and_grad(
    config: &ModelConfig,
    weights: &ModelWeights,
    episodes: &[Episode],
    grads: &mut ModelWeights,
) -> Result<f32> {
    let net = Net::new(config, weights)?;
    grads.layout(config)?;
    let p = pack(config, episodes)?;
    let cache = net.forward(&p);
    let loss = net.loss(&p, &cache);
    net.backward(&p, cache, grads);
    Ok(loss)
}

/// `(T, V)` logits at the supervised positions of `episodes`, in order.
pub fn target_logits(config: &ModelConfig, weights: &ModelWeights, episodes: &[Episode]) -> Result<Vec<f32>> {
    let net = Net::new(config, weights)?;
    let p = pack(config, episodes)?;
    Ok(net.forward(&p).logits)
}
