//! Parameter layout shared by training and serving.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gem::GemKind;
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::stream;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub item_count: usize,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// Number of interests `K`.
    pub interests: usize,
    /// History truncation length; also the number of positional rows.
    pub max_len: usize,
    pub gem: GemKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.item_count == 0 || self.dim == 0 || self.interests == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("embedding dimension must be even, got {}", self.dim)));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }

    /// Denoiser input width: `x_t`, step embedding, flattened guidance.
    pub fn denoiser_input(&self) -> usize {
        2 * self.dim + self.interests * self.dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    ItemEmbedding,
    Positional,
    GemW1,
    GemB1,
    GemW2,
    GemB2,
    DamW1,
    DamB1,
    DamW2,
    DamB2,
    DamW3,
    DamB3,
}

impl ParamKey {
    pub const ALL: [ParamKey; 12] = [
        ParamKey::ItemEmbedding,
        ParamKey::Positional,
        ParamKey::GemW1,
        ParamKey::GemB1,
        ParamKey::GemW2,
        ParamKey::GemB2,
        ParamKey::DamW1,
        ParamKey::DamB1,
        ParamKey::DamW2,
        ParamKey::DamB2,
        ParamKey::DamW3,
        ParamKey::DamB3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamKey::ItemEmbedding => "item_embedding",
            ParamKey::Positional => "positional",
            ParamKey::GemW1 => "gem.w1",
            ParamKey::GemB1 => "gem.b1",
            ParamKey::GemW2 => "gem.w2",
            ParamKey::GemB2 => "gem.b2",
            ParamKey::DamW1 => "dam.w1",
            ParamKey::DamB1 => "dam.b1",
            ParamKey::DamW2 => "dam.w2",
            ParamKey::DamB2 => "dam.b2",
            ParamKey::DamW3 => "dam.w3",
            ParamKey::DamB3 => "dam.b3",
        }
    }

    /// Checkpoint group; the denoiser stack is a single group.
    pub fn group(self) -> &'static str {
        match self {
            ParamKey::DamW1
            | ParamKey::DamB1
            | ParamKey::DamW2
            | ParamKey::DamB2
            | ParamKey::DamW3
            | ParamKey::DamB3 => "dam",
            other => other.name(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GemParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DamParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub item_embedding: Tensor,
    pub positional: Tensor,
    pub gem: GemParams,
    pub dam: DamParams,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) -> Tensor {
    gaussian(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl ModelParams {
    /// Embeddings ~ N(0, (1/√d)²); dense weights Glorot-normal; biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.hidden();
        let emb_std = 1.0 / (d as f64).sqrt();
        let mut rng = stream(seed, &[0x1417]);
        let item_embedding = gaussian(&[config.item_count, d], emb_std, &mut rng);
        let positional = gaussian(&[config.max_len, d], emb_std, &mut rng);
        let gem = GemParams {
            w1: xavier(d, h, &mut rng),
            b1: Tensor::zeros(&[h]),
            w2: xavier(h, config.interests, &mut rng),
            b2: Tensor::zeros(&[config.interests]),
        };
        let dam = DamParams {
            w1: xavier(config.denoiser_input(), h, &mut rng),
            b1: Tensor::zeros(&[h]),
            w2: xavier(h, h, &mut rng),
            b2: Tensor::zeros(&[h]),
            w3: xavier(h, d, &mut rng),
            b3: Tensor::zeros(&[d]),
        };
        Ok(Self {
            config,
            item_embedding,
            positional,
            gem,
            dam,
        })
    }

    pub fn get(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::ItemEmbedding => &self.item_embedding,
            ParamKey::Positional => &self.positional,
            ParamKey::GemW1 => &self.gem.w1,
            ParamKey::GemB1 => &self.gem.b1,
            ParamKey::GemW2 => &self.gem.w2,
            ParamKey::GemB2 => &self.gem.b2,
            ParamKey::DamW1 => &self.dam.w1,
            ParamKey::DamB1 => &self.dam.b1,
            ParamKey::DamW2 => &self.dam.w2,
            ParamKey::DamB2 => &self.dam.b2,
            ParamKey::DamW3 => &self.dam.w3,
            ParamKey::DamB3 => &self.dam.b3,
        }
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::ItemEmbedding => &mut self.item_embedding,
            ParamKey::Positional => &mut self.positional,
            ParamKey::GemW1 => &mut self.gem.w1,
            ParamKey::GemB1 => &mut self.gem.b1,
            ParamKey::GemW2 => &mut self.gem.w2,
            ParamKey::GemB2 => &mut self.gem.b2,
            ParamKey::DamW1 => &mut self.dam.w1,
            ParamKey::DamB1 => &mut self.dam.b1,
            ParamKey::DamW2 => &mut self.dam.w2,
            ParamKey::DamB2 => &mut self.dam.b2,
            ParamKey::DamW3 => &mut self.dam.w3,
            ParamKey::DamB3 => &mut self.dam.b3,
        }
    }

    pub fn parameter_count(&self) -> usize {
        ParamKey::ALL.iter().map(|k| self.get(*k).len()).sum()
    }

    /// Puts every tensor on `tape`: as trainable leaves when `trainable`,
    /// otherwise frozen.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> ModelVars {
        let mut reg = |key: ParamKey| {
            if trainable {
                tape.param(self.get(key), key.index())
            } else {
                tape.frozen(self.get(key))
            }
        };
        ModelVars {
            item_embedding: reg(ParamKey::ItemEmbedding),
            positional: reg(ParamKey::Positional),
            gem: GemVars {
                w1: reg(ParamKey::GemW1),
                b1: reg(ParamKey::GemB1),
                w2: reg(ParamKey::GemW2),
                b2: reg(ParamKey::GemB2),
            },
            dam: DamVars {
                w1: reg(ParamKey::DamW1),
                b1: reg(ParamKey::DamB1),
                w2: reg(ParamKey::DamW2),
                b2: reg(ParamKey::DamB2),
                w3: reg(ParamKey::DamW3),
                b3: reg(ParamKey::DamB3),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GemVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DamVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub item_embedding: Var,
    pub positional: Var,
    pub gem: GemVars,
    pub dam: DamVars,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_embedding_scale() {
        let cfg = ModelConfig {
            item_count: 2000,
            dim: 64,
            interests: 4,
            max_len: 50,
            gem: GemKind::SelfAttentive,
        };
        let p = ModelParams::init(cfg, 1).unwrap();
        assert_eq!(p.gem.w1.shape(), &[64, 256]);
        assert_eq!(p.gem.w2.shape(), &[256, 4]);
        assert_eq!(p.dam.w1.shape(), &[64 * 6, 256]);
        assert_eq!(p.dam.w3.shape(), &[256, 64]);
        let target = 1.0 / 8.0;
        for t in [&p.item_embedding, &p.positional] {
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((std - target).abs() / target < 0.05, "std {std}");
        }
        let groups: std::collections::BTreeSet<_> = ParamKey::ALL.iter().map(|k| k.group()).collect();
        assert_eq!(groups.len(), 7);
    }

    #[test]
    fn odd_dimension_is_rejected() {
        let cfg = ModelConfig {
            item_count: 10,
            dim: 3,
            interests: 2,
            max_len: 4,
            gem: GemKind::RuleBased,
        };
        assert!(matches!(ModelParams::init(cfg, 0), Err(Error::Config(_))));
    }
}
