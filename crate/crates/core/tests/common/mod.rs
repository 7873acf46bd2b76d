//! Straight-line f64 reference implementations used as test oracles.
//!
//! Nothing here calls into the engine beyond reading tensors by name.

#![allow(dead_code)]

use rand::Rng;
use steerlab::model::{Activation, Intervention, ModelConfig, ModelWeights, PositionRule, PositionalScheme, Transformer};
use steerlab::seed;

fn tensor<'a>(w: &'a ModelWeights, name: &str) -> &'a [f32] {
    &w.get(name).unwrap_or_else(|| panic!("missing {name}")).data
}

/// `x (n×k)` times row-major `w (k×m)`.
fn matvec(x: &[f64], w: &[f32], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..m {
            out[j] += xi * w[i * m + j] as f64;
        }
    }
    out
}

fn rms(x: &[f64], gain: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * s * *g as f64).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let hs = v.len();
    let half = hs / 2;
    for i in 0..half {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / hs as f64);
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * angle.cos() - b * angle.sin();
        v[i + half] = a * angle.sin() + b * angle.cos();
    }
}

/// Per-layer activations of the reference pass at every position.
pub struct RefLayer {
    pub resid_in: Vec<Vec<f64>>,
    pub attn_out: Vec<Vec<f64>>,
    pub mlp_out: Vec<Vec<f64>>,
    pub resid_out: Vec<Vec<f64>>,
    /// `heads[p][j]`.
    pub heads: Vec<Vec<Vec<f64>>>,
}

pub struct RefOutput {
    pub logits: Vec<Vec<f64>>,
    pub layers: Vec<RefLayer>,
}

/// Reference forward pass over token ids, position by position.
pub fn reference_forward(c: &ModelConfig, w: &ModelWeights, ids: &[u32]) -> RefOutput {
    let (d, hs, nh) = (c.hidden_dim, c.head_size, c.n_heads);
    let eps = c.norm_eps as f64;
    let t = ids.len();
    let emb = tensor(w, "tok_embed");
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            let mut row: Vec<f64> = emb[id as usize * d..(id as usize + 1) * d].iter().map(|&v| v as f64).collect();
            if c.positional == PositionalScheme::Learned {
                let pe = tensor(w, "pos_embed");
                for (r, e) in row.iter_mut().zip(&pe[p * d..(p + 1) * d]) {
                    *r += *e as f64;
                }
            }
            row
        })
        .collect();

    let mut layers = Vec::new();
    for l in 0..c.n_layers {
        let name = |s: &str| format!("blocks.{l}.{s}");
        let normed: Vec<Vec<f64>> = x.iter().map(|r| rms(r, tensor(w, &name("attn_norm.gain")), eps)).collect();
        let proj = |wn: &str| -> Vec<Vec<f64>> { normed.iter().map(|r| matvec(r, tensor(w, &name(wn)), d)).collect() };
        let (mut q, mut k, v) = (proj("attn.w_q"), proj("attn.w_k"), proj("attn.w_v"));
        if let PositionalScheme::Rotary { theta } = c.positional {
            for p in 0..t {
                for h in 0..nh {
                    rotate(&mut q[p][h * hs..(h + 1) * hs], p, theta as f64);
                    rotate(&mut k[p][h * hs..(h + 1) * hs], p, theta as f64);
                }
            }
        }
        let w_o = tensor(w, &name("attn.w_o"));
        let b_o = tensor(w, &name("attn.b_o"));
        let mut heads = vec![vec![vec![0.0; d]; nh]; t];
        for p in 0..t {
            for h in 0..nh {
                let scores: Vec<f64> = (0..=p)
                    .map(|s| (0..hs).map(|i| q[p][h * hs + i] * k[s][h * hs + i]).sum::<f64>() / (hs as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut zh = vec![0.0; hs];
                for (s, es) in e.iter().enumerate() {
                    for i in 0..hs {
                        zh[i] += es / z * v[s][h * hs + i];
                    }
                }
                for (i, zi) in zh.iter().enumerate() {
                    for o in 0..d {
                        heads[p][h][o] += zi * w_o[(h * hs + i) * d + o] as f64;
                    }
                }
            }
        }
        let attn_out: Vec<Vec<f64>> = heads
            .iter()
            .map(|hp| (0..d).map(|o| hp.iter().map(|hv| hv[o]).sum::<f64>() + b_o[o] as f64).collect())
            .collect();
        let mid: Vec<Vec<f64>> = x.iter().zip(&attn_out).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
        let m = c.mlp_size;
        let mlp_out: Vec<Vec<f64>> = mid
            .iter()
            .map(|r| {
                let n2 = rms(r, tensor(w, &name("mlp_norm.gain")), eps);
                match c.activation {
                    Activation::Gelu => {
                        let b_in = tensor(w, &name("mlp.b_in"));
                        let hidden: Vec<f64> = matvec(&n2, tensor(w, &name("mlp.w_in")), m)
                            .iter()
                            .zip(b_in)
                            .map(|(a, b)| gelu(a + *b as f64))
                            .collect();
                        let b_out = tensor(w, &name("mlp.b_out"));
                        matvec(&hidden, tensor(w, &name("mlp.w_out")), d)
                            .iter()
                            .zip(b_out)
                            .map(|(a, b)| a + *b as f64)
                            .collect()
                    }
                    Activation::Swiglu => {
                        let g = matvec(&n2, tensor(w, &name("mlp.w_gate")), m);
                        let u = matvec(&n2, tensor(w, &name("mlp.w_up")), m);
                        let hidden: Vec<f64> = g.iter().zip(&u).map(|(a, b)| silu(*a) * b).collect();
                        matvec(&hidden, tensor(w, &name("mlp.w_down")), d)
                    }
                }
            })
            .collect();
        let out: Vec<Vec<f64>> = mid.iter().zip(&mlp_out).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
        layers.push(RefLayer {
            resid_in: std::mem::replace(&mut x, out.clone()),
            attn_out,
            mlp_out,
            resid_out: out,
            heads,
        });
    }
    let logits = x
        .iter()
        .map(|r| matvec(&rms(r, tensor(w, "final_norm.gain"), eps), tensor(w, "unembed"), c.vocab_size))
        .collect();
    RefOutput { logits, layers }
}

/// A random small config drawn from `seed`.
pub fn random_config(seed_: u64) -> ModelConfig {
    let mut rng = seed::stream(seed_, "config");
    let n_heads = rng.random_range(1..=4);
    let head_size = 2 * rng.random_range(1..=4);
    let mut c = ModelConfig::new(
        rng.random_range(1..=3),
        n_heads,
        head_size,
        rng.random_range(4..=24),
        rng.random_range(5..=20),
        12,
    );
    if rng.random_bool(0.5) {
        c.positional = PositionalScheme::Learned;
    }
    if rng.random_bool(0.5) {
        c.activation = Activation::Swiglu;
    }
    c
}

/// Random weights with nonzero gains and biases so every parameter matters.
pub fn random_weights(c: &ModelConfig, seed_: u64) -> ModelWeights {
    let mut w = ModelWeights::init(c, seed_).unwrap();
    let mut rng = seed::stream(seed_, "perturb");
    for t in &mut w.tensors {
        if t.shape.len() == 1 {
            for v in &mut t.data {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    w
}

pub fn random_ids(c: &ModelConfig, len: usize, seed_: u64) -> Vec<u32> {
    let mut rng = seed::stream(seed_, "ids");
    (0..len).map(|_| rng.random_range(0..c.vocab_size as u32)).collect()
}

/// CIE by looping over (layer, head) with full forward passes; returns per-trial deltas.
pub fn brute_force_cie_trial(model: &Transformer, ids: &[u32], answer: u32, means: &[Vec<Vec<f32>>]) -> Vec<Vec<f64>> {
    let c = model.config();
    let tokens = steerlab::model::TokenSequence::new(ids.to_vec());
    let p = |logits: &[f32]| steerlab::linalg::softmax64(logits)[answer as usize];
    let base = p(model.forward(&tokens, &[]).unwrap().last_logits());
    let mut out = vec![vec![0.0; c.n_heads]; c.n_layers];
    for l in 0..c.n_layers {
        for j in 0..c.n_heads {
            let iv = Intervention::replace_heads(l, PositionRule::LastToken, vec![(j, means[l][j].clone())]);
            let patched = model.forward_with_interventions(&tokens, &[iv], &[]).unwrap();
            out[l][j] = p(patched.last_logits()) - base;
        }
    }
    out
}
