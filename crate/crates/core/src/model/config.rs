use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalScheme {
    Rotary { theta: f32 },
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Swiglu,
}

/// Architecture hyperparameters of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub hidden_dim: usize,
    pub mlp_size: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub norm_eps: f32,
    pub positional: PositionalScheme,
    pub activation: Activation,
}

impl ModelConfig {
    /// A config with `hidden_dim = n_heads * head_size` and rotary positions.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        head_size: usize,
        mlp_size: usize,
        vocab_size: usize,
        context_len: usize,
    ) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            head_size,
            hidden_dim: n_heads * head_size,
            mlp_size,
            vocab_size,
            context_len,
            norm_eps: 1e-5,
            positional: PositionalScheme::Rotary { theta: 10_000.0 },
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_size", self.head_size),
            ("hidden_dim", self.hidden_dim),
            ("mlp_size", self.mlp_size),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim != self.n_heads * self.head_size {
            return Err(Error::Config(format!(
                "hidden_dim {} != n_heads {} * head_size {}",
                self.hidden_dim, self.n_heads, self.head_size
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if let PositionalScheme::Rotary { theta } = self.positional {
            if !self.head_size.is_multiple_of(2) {
                return Err(Error::Config("rotary positions need an even head_size".into()));
            }
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(Error::Config("rotary theta must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Every tensor the config requires, in canonical order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_dim;
        let m = self.mlp_size;
        let mut specs = vec![("tok_embed".to_string(), vec![self.vocab_size, d])];
        if self.positional == PositionalScheme::Learned {
            specs.push(("pos_embed".to_string(), vec![self.context_len, d]));
        }
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            specs.push((p("attn_norm.gain"), vec![d]));
            specs.push((p("attn.w_q"), vec![d, d]));
            specs.push((p("attn.w_k"), vec![d, d]));
            specs.push((p("attn.w_v"), vec![d, d]));
            specs.push((p("attn.w_o"), vec![d, d]));
            specs.push((p("attn.b_o"), vec![d]));
            specs.push((p("mlp_norm.gain"), vec![d]));
            match self.activation {
                Activation::Gelu => {
                    specs.push((p("mlp.w_in"), vec![d, m]));
                    specs.push((p("mlp.b_in"), vec![m]));
                    specs.push((p("mlp.w_out"), vec![m, d]));
                    specs.push((p("mlp.b_out"), vec![d]));
                }
                Activation::Swiglu => {
                    specs.push((p("mlp.w_gate"), vec![d, m]));
                    specs.push((p("mlp.w_up"), vec![d, m]));
                    specs.push((p("mlp.w_down"), vec![m, d]));
                }
            }
        }
        specs.push(("final_norm.gain".to_string(), vec![d]));
        specs.push(("unembed".to_string(), vec![d, self.vocab_size]));
        specs
    }
}

/// Whether `name` follows the tensor naming scheme of any config.
pub fn is_known_tensor_name(name: &str) -> bool {
    const TOP: [&str; 4] = ["tok_embed", "pos_embed", "final_norm.gain", "unembed"];
    const BLOCK: [&str; 13] = [
        "attn_norm.gain",
        "attn.w_q",
        "attn.w_k",
        "attn.w_v",
        "attn.w_o",
        "attn.b_o",
        "mlp_norm.gain",
        "mlp.w_in",
        "mlp.b_in",
        "mlp.w_out",
        "mlp.b_out",
        "mlp.w_gate",
        "mlp.w_up",
    ];
    if TOP.contains(&name) {
        return true;
    }
    let Some(rest) = name.strip_prefix("blocks.") else {
        return false;
    };
    let Some((idx, suffix)) = rest.split_once('.') else {
        return false;
    };
    idx.parse::<usize>().is_ok() && (BLOCK.contains(&suffix) || suffix == "mlp.w_down")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_hidden_dim() {
        let mut c = ModelConfig::new(2, 2, 4, 16, 10, 8);
        c.hidden_dim = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_short_context() {
        let c = ModelConfig::new(2, 2, 4, 16, 10, 1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_spec_name_is_known() {
        let mut c = ModelConfig::new(2, 2, 4, 16, 10, 8);
        for act in [Activation::Gelu, Activation::Swiglu] {
            c.activation = act;
            c.positional = PositionalScheme::Learned;
            for (name, _) in c.tensor_specs() {
                assert!(is_known_tensor_name(&name), "{name}");
            }
        }
        assert!(!is_known_tensor_name("blocks.x.attn.w_q"));
        assert!(!is_known_tensor_name("lm_head"));
    }
}
