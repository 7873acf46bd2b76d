//! Logit-lens projections of intermediate hidden states and the apathy metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{TokenSequence, Transformer};

/// Whether the final normalization is applied before unembedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    Raw,
    #[default]
    FinalNorm,
}

impl LensMode {
    pub fn name(self) -> &'static str {
        match self {
            LensMode::Raw => "raw",
            LensMode::FinalNorm => "final_norm",
        }
    }
}

/// Project one hidden state into vocabulary logits.
pub fn logit_lens(h: &[f32], model: &Transformer, mode: LensMode) -> Result<Vec<f32>> {
    let c = model.config();
    if h.len() != c.hidden_dim {
        return Err(Error::Domain(format!(
            "hidden state has {} entries, hidden_dim is {}",
            h.len(),
            c.hidden_dim
        )));
    }
    Ok(match mode {
        LensMode::FinalNorm => model.project(h, 1),
        LensMode::Raw => linalg::matmul(
            linalg::MatRef::new(h, 1, c.hidden_dim),
            linalg::MatRef::new(model.unembed(), c.hidden_dim, c.vocab_size),
        ),
    })
}

/// Lens logits of every block output at `position`, layer-major.
pub fn layer_logits(model: &Transformer, tokens: &TokenSequence, position: usize, mode: LensMode) -> Result<Vec<Vec<f32>>> {
    let out = model.forward(tokens, &[position])?;
    out.trace
        .layers
        .iter()
        .map(|l| logit_lens(&l.resid_out[0], model, mode))
        .collect()
}

/// A lens distribution `q_ℓ` over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistribution {
    pub layer: usize,
    pub q: Vec<f64>,
}

pub fn layer_distributions(model: &Transformer, tokens: &TokenSequence, position: usize, mode: LensMode) -> Result<Vec<LayerDistribution>> {
    Ok(layer_logits(model, tokens, position, mode)?
        .iter()
        .enumerate()
        .map(|(layer, logits)| LayerDistribution {
            layer,
            q: linalg::softmax64(logits),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenProbRow {
    pub layer: usize,
    pub p_correct: f64,
    pub p_incorrect: f64,
    pub p_top: f64,
}

/// Per-layer lens probability of a correct token, an incorrect token and the top token,
/// read at the last position of `tokens`.
pub fn layer_token_probs(
    model: &Transformer,
    tokens: &TokenSequence,
    correct: u32,
    incorrect: u32,
    mode: LensMode,
) -> Result<Vec<TokenProbRow>> {
    let v = model.config().vocab_size;
    for id in [correct, incorrect] {
        if id as usize >= v {
            return Err(Error::TokenId { id, vocab_size: v });
        }
    }
    let last = tokens.len().checked_sub(1).ok_or(Error::Length {
        len: 0,
        context_len: model.config().context_len,
    })?;
    Ok(layer_distributions(model, tokens, last, mode)?
        .into_iter()
        .map(|d| TokenProbRow {
            layer: d.layer,
            p_correct: d.q[correct as usize],
            p_incorrect: d.q[incorrect as usize],
            p_top: d.q.iter().cloned().fold(0.0, f64::max),
        })
        .collect())
}

/// `A(r, h) = (1 + cos(r, h)) · (‖r‖ − ‖h‖)`, with `cos = 0` when `h = 0`.
pub fn apathy(r: &[f32], h: &[f32]) -> Result<f64> {
    if r.len() != h.len() {
        return Err(Error::Domain("apathy vectors differ in length".into()));
    }
    let nr = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let nh = h.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if nr == 0.0 {
        return Err(Error::Domain("apathy is undefined for a zero residual".into()));
    }
    let cos = if nh == 0.0 {
        0.0
    } else {
        r.iter().zip(h).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (nr * nh)
    };
    Ok((1.0 + cos) * (nr - nh))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApathyRow {
    pub layer: usize,
    pub a_attn: f64,
    pub a_mlp: f64,
}

/// Apathy of each sublayer at `position`: attention against the block input,
/// MLP against the mid-block residual.
pub fn apathy_profile(model: &Transformer, tokens: &TokenSequence, position: usize) -> Result<Vec<ApathyRow>> {
    let out = model.forward(tokens, &[position])?;
    out.trace
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            let r = &l.resid_in[0];
            let mid: Vec<f32> = r.iter().zip(&l.attn_out[0]).map(|(a, b)| a + b).collect();
            Ok(ApathyRow {
                layer,
                a_attn: apathy(r, &l.attn_out[0])?,
                a_mlp: apathy(&mid, &l.mlp_out[0])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights};

    fn model() -> Transformer {
        let c = ModelConfig::new(2, 2, 4, 16, 10, 8);
        Transformer::new(c.clone(), ModelWeights::init(&c, 1).unwrap()).unwrap()
    }

    #[test]
    fn apathy_hand_values() {
        assert_eq!(apathy(&[5.0, 0.0], &[0.0, 3.0]).unwrap(), 2.0);
        assert_eq!(apathy(&[0.0, 2.0], &[0.0, 4.0]).unwrap(), -4.0);
        assert_eq!(apathy(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(apathy(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(apathy(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn final_layer_lens_equals_model_logits() {
        let m = model();
        let tokens = TokenSequence::new(vec![3, 4, 5, 0]);
        let out = m.forward(&tokens, &[3]).unwrap();
        let lens = logit_lens(&out.trace.layers[1].resid_out[0], &m, LensMode::FinalNorm).unwrap();
        for (a, b) in lens.iter().zip(out.last_logits()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_lens_of_zero_is_zero() {
        let m = model();
        let l = logit_lens(&[0.0; 8], &m, LensMode::Raw).unwrap();
        assert!(l.iter().all(|&v| v == 0.0));
        assert!(logit_lens(&[0.0; 7], &m, LensMode::Raw).is_err());
    }

    #[test]
    fn token_probs_are_consistent() {
        let m = model();
        let tokens = TokenSequence::new(vec![3, 4, 5, 6]);
        let rows = layer_token_probs(&m, &tokens, 7, 8, LensMode::FinalNorm).unwrap();
        assert_eq!(rows.len(), 2);
        let q = linalg::softmax64(m.forward(&tokens, &[]).unwrap().last_logits());
        let last = rows.last().unwrap();
        assert!((last.p_correct - q[7]).abs() < 1e-9);
        assert!((last.p_incorrect - q[8]).abs() < 1e-9);
        for r in &rows {
            assert!(r.p_correct + r.p_incorrect <= 1.0 + 1e-12);
            assert!(r.p_top >= r.p_correct && r.p_top >= r.p_incorrect);
        }
        assert!(layer_token_probs(&m, &tokens, 10, 8, LensMode::Raw).is_err());
    }

    #[test]
    fn apathy_profile_has_one_row_per_layer() {
        let m = model();
        let rows = apathy_profile(&m, &TokenSequence::new(vec![3, 4]), 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.a_attn.is_finite() && r.a_mlp.is_finite()));
    }
}
