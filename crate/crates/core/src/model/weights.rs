use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::config::{Activation, ModelConfig, PositionalScheme};
use crate::error::{Error, Result};
use crate::seed;

/// A named, row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// The parameters of a model as an ordered set of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub tensors: Vec<Tensor>,
}

impl ModelWeights {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        ModelWeights { tensors }
    }

    /// Random initialization drawn from the `(seed, "init")` stream.
    ///
    /// Projection matrices use N(0, 1/fan_in); output projections are further
    /// scaled by 1/sqrt(2·n_layers). Gains start at one and biases at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, "init");
        let depth_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let mut tensors = Vec::new();
        for (name, shape) in config.tensor_specs() {
            let mut t = Tensor::zeros(name.clone(), shape.clone());
            if name.ends_with(".gain") {
                t.data.fill(1.0);
            } else if shape.len() == 2 {
                let std = if name == "tok_embed" || name == "pos_embed" {
                    1.0
                } else {
                    let s = 1.0 / (shape[0] as f32).sqrt();
                    if name.ends_with("w_o") || name.ends_with("w_out") || name.ends_with("w_down") {
                        s * depth_scale
                    } else {
                        s
                    }
                };
                let normal = Normal::new(0.0f32, std).expect("finite std");
                for v in &mut t.data {
                    *v = normal.sample(&mut rng);
                }
            }
            tensors.push(t);
        }
        Ok(ModelWeights { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zeroed tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    /// Check that every tensor required by `config` is present with the right
    /// shape and that nothing else is, and resolve tensor indices.
    pub fn layout(&self, config: &ModelConfig) -> Result<Layout> {
        config.validate()?;
        let index: HashMap<&str, usize> = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.as_str(), i))
            .collect();
        if index.len() != self.tensors.len() {
            return Err(Error::Weights("duplicate tensor names".into()));
        }
        let specs = config.tensor_specs();
        for (name, shape) in &specs {
            let Some(&i) = index.get(name.as_str()) else {
                return Err(Error::Weights(format!("missing tensor `{name}`")));
            };
            let t = &self.tensors[i];
            if &t.shape != shape {
                return Err(Error::Weights(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            if t.data.len() != t.numel() {
                return Err(Error::Weights(format!("tensor `{name}` data length mismatch")));
            }
        }
        if specs.len() != self.tensors.len() {
            let extra: Vec<&str> = self
                .tensors
                .iter()
                .map(|t| t.name.as_str())
                .filter(|n| !specs.iter().any(|(s, _)| s == n))
                .collect();
            return Err(Error::Weights(format!("unexpected tensors {extra:?}")));
        }
        let at = |name: String| index[name.as_str()];
        let blocks = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                let mlp = match config.activation {
                    Activation::Gelu => MlpLayout::Gelu {
                        w_in: at(p("mlp.w_in")),
                        b_in: at(p("mlp.b_in")),
                        w_out: at(p("mlp.w_out")),
                        b_out: at(p("mlp.b_out")),
                    },
                    Activation::Swiglu => MlpLayout::Swiglu {
                        w_gate: at(p("mlp.w_gate")),
                        w_up: at(p("mlp.w_up")),
                        w_down: at(p("mlp.w_down")),
                    },
                };
                BlockLayout {
                    attn_gain: at(p("attn_norm.gain")),
                    w_q: at(p("attn.w_q")),
                    w_k: at(p("attn.w_k")),
                    w_v: at(p("attn.w_v")),
                    w_o: at(p("attn.w_o")),
                    b_o: at(p("attn.b_o")),
                    mlp_gain: at(p("mlp_norm.gain")),
                    mlp,
                }
            })
            .collect();
        Ok(Layout {
            tok_embed: at("tok_embed".into()),
            pos_embed: match config.positional {
                PositionalScheme::Learned => Some(at("pos_embed".into())),
                PositionalScheme::Rotary { .. } => None,
            },
            blocks,
            final_gain: at("final_norm.gain".into()),
            unembed: at("unembed".into()),
        })
    }
}

/// Tensor indices for each parameter role.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_embed: usize,
    pub pos_embed: Option<usize>,
    pub blocks: Vec<BlockLayout>,
    pub final_gain: usize,
    pub unembed: usize,
}

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub attn_gain: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub mlp_gain: usize,
    pub mlp: MlpLayout,
}

#[derive(Debug, Clone)]
pub enum MlpLayout {
    Gelu {
        w_in: usize,
        b_in: usize,
        w_out: usize,
        b_out: usize,
    },
    Swiglu {
        w_gate: usize,
        w_up: usize,
        w_down: usize,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_validates() {
        let c = ModelConfig::new(2, 2, 4, 16, 11, 8);
        let a = ModelWeights::init(&c, 3).unwrap();
        let b = ModelWeights::init(&c, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelWeights::init(&c, 4).unwrap());
        a.layout(&c).unwrap();
    }

    #[test]
    fn layout_reports_missing_and_misshapen_tensors() {
        let c = ModelConfig::new(2, 2, 4, 16, 11, 8);
        let mut w = ModelWeights::init(&c, 0).unwrap();
        w.get_mut("unembed").unwrap().shape = vec![11, 8];
        assert!(matches!(w.layout(&c), Err(Error::Weights(_))));
        let mut w = ModelWeights::init(&c, 0).unwrap();
        w.tensors.retain(|t| t.name != "blocks.1.attn.w_k");
        let err = w.layout(&c).unwrap_err().to_string();
        assert!(err.contains("blocks.1.attn.w_k"), "{err}");
    }
}
